"""The full elastic backbone: embeddings, L elastic layers, tied LM head.

Also holds parameter/FLOP accounting and checkpoint I/O. Parameter counting
by tensor enumeration (``count_params``) is authoritative everywhere;
``layer_params_formula``/``layer_flops_formula`` are the closed forms kept
for reference and they intentionally disagree with enumeration whenever
d_h != d_model (the closed form carries a 2*d_h^2 bottleneck term while the
stored bottlenecks are d_model x d_h slices).
"""

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .elastic import ElasticTransformerLayer, trunc_normal, LAYER_NORM_EPS
from .errors import ConfigError, FormatError, ValidationError

CHECKPOINT_MAGIC = b"SSHP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DesignSpace:
    """Allowed per-layer hidden dims and layer count; |dims|^L sub-networks."""

    allowed_dims: tuple
    num_layers: int

    def __post_init__(self):
        dims = tuple(int(d) for d in self.allowed_dims)
        if not dims:
            raise ConfigError("design space needs at least one allowed dim")
        if any(d <= 0 for d in dims):
            raise ConfigError("allowed dims must be positive")
        if list(dims) != sorted(set(dims)):
            raise ConfigError("allowed dims must be strictly ascending")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        object.__setattr__(self, "allowed_dims", dims)

    @property
    def size(self):
        return len(self.allowed_dims) ** self.num_layers

    def min_shape(self):
        return (self.allowed_dims[0],) * self.num_layers

    def max_shape(self):
        return (self.allowed_dims[-1],) * self.num_layers

    def contains(self, shape):
        return (
            len(shape) == self.num_layers
            and all(d in self.allowed_dims for d in shape)
        )

    def validate(self, shape):
        if len(shape) != self.num_layers:
            raise ValidationError(
                f"shape has {len(shape)} entries, expected {self.num_layers}"
            )
        for d in shape:
            if d not in self.allowed_dims:
                raise ValidationError(
                    f"dim {d} not in allowed dims {self.allowed_dims}"
                )
        return tuple(int(d) for d in shape)

    def all_shapes(self):
        """Iterate the whole space in lexicographic order."""
        import itertools

        return itertools.product(self.allowed_dims, repeat=self.num_layers)


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int
    d_model: int
    d_attn: int
    d_ff: int
    heads: int
    vocab_size: int
    max_seq_len: int
    allowed_dims: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "allowed_dims", tuple(int(d) for d in self.allowed_dims)
        )
        space = self.design_space  # validates dims/layer count
        if self.d_model != max(space.allowed_dims):
            raise ConfigError(
                f"d_model {self.d_model} must equal the largest allowed dim "
                f"{max(space.allowed_dims)}"
            )
        if self.d_attn % self.heads != 0:
            raise ConfigError(
                f"d_attn {self.d_attn} not divisible by heads {self.heads}"
            )
        for name in ("d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def design_space(self):
        return DesignSpace(self.allowed_dims, self.num_layers)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        missing = known - set(doc)
        if missing:
            raise ConfigError(f"missing backbone config keys: {sorted(missing)}")
        doc["allowed_dims"] = tuple(doc["allowed_dims"])
        return cls(**doc)


def layer_params_formula(d_h, d_attn, d_ff):
    """Closed-form per-layer weight count: d_h * 2 * (2*d_attn + d_ff + d_h)."""
    return d_h * (2 * (2 * d_attn + d_ff + d_h))


def layer_flops_formula(d_h, d_attn, d_ff, seq_len):
    """Closed-form per-token layer FLOPs, plus the attention seq term."""
    return d_h * (4 * (2 * d_attn + d_ff + d_h)) + 2 * seq_len * d_attn


def _layer_tensor_extents(config, d_h):
    """(name, max_shape, active_extents) for one layer at hidden width d_h."""
    dm, da, dff = config.d_model, config.d_attn, config.d_ff
    return [
        ("in_bottleneck.weight", (dm, dm), (d_h, dm)),
        ("in_bottleneck.bias", (dm,), (d_h,)),
        ("q.weight", (da, dm), (da, d_h)),
        ("q.bias", (da,), (da,)),
        ("k.weight", (da, dm), (da, d_h)),
        ("k.bias", (da,), (da,)),
        ("v.weight", (da, dm), (da, d_h)),
        ("v.bias", (da,), (da,)),
        ("o.weight", (dm, da), (d_h, da)),
        ("o.bias", (dm,), (d_h,)),
        ("ln_attn.gamma", (dm,), (d_h,)),
        ("ln_attn.beta", (dm,), (d_h,)),
        ("ffn_in.weight", (dff, dm), (dff, d_h)),
        ("ffn_in.bias", (dff,), (dff,)),
        ("ffn_out.weight", (dm, dff), (d_h, dff)),
        ("ffn_out.bias", (dm,), (d_h,)),
        ("ln_ffn.gamma", (dm,), (d_h,)),
        ("ln_ffn.beta", (dm,), (d_h,)),
        ("out_bottleneck.weight", (dm, dm), (dm, d_h)),
        ("out_bottleneck.bias", (dm,), (dm,)),
    ]


def named_active_extents(config, shape):
    """Active extents of every tensor in the backbone under ``shape``.

    Embedding-side and head tensors sit outside the bottlenecks and are
    always fully active.
    """
    shape = config.design_space.validate(shape)
    dm = config.d_model
    out = [
        ("embeddings.token", (config.vocab_size, dm)),
        ("embeddings.position", (config.max_seq_len, dm)),
        ("embeddings.norm.gamma", (dm,)),
        ("embeddings.norm.beta", (dm,)),
        ("head.bias", (config.vocab_size,)),
    ]
    for i, d_h in enumerate(shape):
        for name, _max_shape, extents in _layer_tensor_extents(config, d_h):
            out.append((f"layers.{i}.{name}", extents))
    return out


def count_params(config_or_model, shape):
    """Exact count of scalars active under ``shape`` (tensor enumeration)."""
    config = getattr(config_or_model, "config", config_or_model)
    total = 0
    for _name, extents in named_active_extents(config, shape):
        n = 1
        for e in extents:
            n *= e
        total += n
    return total


class Supernet:
    """Embeddings + L elastic layers + tied-embedding masked LM head."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        dm = config.d_model
        self.token_emb = T.Tensor(
            trunc_normal(rng, (config.vocab_size, dm)), requires_grad=True
        )
        self.pos_emb = T.Tensor(
            trunc_normal(rng, (config.max_seq_len, dm)), requires_grad=True
        )
        self.emb_gamma = T.Tensor(np.ones(dm), requires_grad=True)
        self.emb_beta = T.Tensor(np.zeros(dm), requires_grad=True)
        self.head_bias = T.Tensor(
            np.zeros(config.vocab_size), requires_grad=True
        )
        self.layers = [
            ElasticTransformerLayer(
                dm, config.d_attn, config.d_ff, config.heads, rng
            )
            for _ in range(config.num_layers)
        ]
        self.active_shape = None
        self.apply_shape(config.design_space.max_shape())

    def apply_shape(self, shape):
        shape = self.config.design_space.validate(shape)
        for layer, d_h in zip(self.layers, shape):
            layer.set_hidden_dim(d_h)
        self.active_shape = shape

    def named_parameters(self):
        out = [
            ("embeddings.token", self.token_emb),
            ("embeddings.position", self.pos_emb),
            ("embeddings.norm.gamma", self.emb_gamma),
            ("embeddings.norm.beta", self.emb_beta),
            ("head.bias", self.head_bias),
        ]
        for i, layer in enumerate(self.layers):
            for name, tensorref in layer.named_parameters():
                out.append((f"layers.{i}.{name}", tensorref))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grads(self):
        for p in self.parameters():
            p.grad = None

    def active_extents(self, shape=None):
        """(name, tensor, extents) triples for the configured or given shape."""
        shape = self.active_shape if shape is None else shape
        byname = dict(self.named_parameters())
        out = []
        for name, extents in named_active_extents(self.config, shape):
            out.append((name, byname[name], extents))
        return out

    def hidden_states(self, token_ids):
        """Token ids (..., seq) -> final hidden states (..., seq, d_model)."""
        token_ids = np.asarray(token_ids)
        seq = token_ids.shape[-1]
        if seq > self.config.max_seq_len:
            raise ValidationError(
                f"sequence length {seq} exceeds max {self.config.max_seq_len}"
            )
        x = T.add(
            T.embedding_lookup(self.token_emb, token_ids),
            T.embedding_lookup(self.pos_emb, np.arange(seq)),
        )
        x = T.layer_norm(x, self.emb_gamma, self.emb_beta, eps=LAYER_NORM_EPS)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward(self, token_ids):
        """Token ids -> logits (..., seq, vocab) via the tied embedding."""
        x = self.hidden_states(token_ids)
        logits = T.add(
            T.matmul(x, self.token_emb, transpose_b=True), self.head_bias
        )
        return logits

    def mlm_forward(self, inputs, labels):
        """Mean masked cross-entropy over positions with label >= 0.

        Returns (scalar loss tensor, scored-position count).
        """
        x = self.hidden_states(inputs)
        return T.masked_lm_loss(x, self.token_emb, self.head_bias, labels)


def build_supernet(config, seed=0):
    """Deterministically initialized backbone; bottlenecks start as identity."""
    return Supernet(config, seed=seed)


def mlm_forward(model, shape, inputs, labels):
    model.apply_shape(shape)
    return model.mlm_forward(inputs, labels)


def _read_exact(f, n, what):
    pos = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}", pos)
    return buf


def save_checkpoint(model, path):
    """Write magic, version, config JSON, then name-sorted float32 tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = model.config.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, tensorref in sorted(model.named_parameters()):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        dims = tensorref.data.shape
        buf.write(struct.pack("<I", len(dims)))
        for d in dims:
            buf.write(struct.pack("<Q", d))
        buf.write(
            np.ascontiguousarray(tensorref.data, dtype="<f4").tobytes()
        )
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Rebuild a model whose forwards match the saved one at 32-bit precision."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}", 0)
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        cfg_raw = _read_exact(f, cfg_len, "config document")
        try:
            config = BackboneConfig.from_json(cfg_raw.decode("utf-8"))
        except (ConfigError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"bad config document: {exc}", 12) from exc
        model = Supernet(config, seed=0)
        expected = dict(model.named_parameters())
        seen = set()
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated tensor record", f.tell() - len(head))
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "tensor rank"))
            dims = struct.unpack(
                f"<{rank}Q", _read_exact(f, 8 * rank, "tensor dims")
            )
            count = 1
            for d in dims:
                count *= d
            raw = _read_exact(f, 4 * count, f"tensor data for {name}")
            if name not in expected:
                raise FormatError(f"unexpected tensor {name!r}", f.tell())
            target = expected[name]
            if tuple(dims) != target.data.shape:
                raise FormatError(
                    f"tensor {name!r} has dims {dims}, expected "
                    f"{target.data.shape}", f.tell()
                )
            target.data[...] = np.frombuffer(raw, dtype="<f4").reshape(dims)
            seen.add(name)
        missing = set(expected) - seen
        if missing:
            raise FormatError(
                f"checkpoint is missing tensors: {sorted(missing)[:3]}...",
                f.tell(),
            )
    return model
