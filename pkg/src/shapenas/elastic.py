"""Prefix-sliceable layers and the bottlenecked elastic Transformer layer.

Every layer stores max-sized weights; configuring a smaller width makes
forward use the top-left prefix block as a view, never a copy. Configure +
forward is a non-reentrant critical section per layer instance: concurrent
read-only evaluation requires distinct configured clones.
"""

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError

LAYER_NORM_EPS = 1e-12
INIT_STD = 0.02


def trunc_normal(rng, shape, std=INIT_STD):
    """Normal(0, std) redrawn until all entries lie within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class ElasticLinear:
    """Linear map y = x @ W[:out, :in].T + b[:out] over stored max sizes."""

    def __init__(self, max_in, max_out, rng=None, init="normal"):
        self.max_in = int(max_in)
        self.max_out = int(max_out)
        if init == "identity":
            w = np.eye(self.max_out, self.max_in)
            # identity weights, zero bias: a fresh bottleneck passes its
            # input prefix straight through
        elif init == "normal":
            w = trunc_normal(rng, (self.max_out, self.max_in))
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = T.Tensor(w, requires_grad=True)
        self.bias = T.Tensor(np.zeros(self.max_out), requires_grad=True)
        self.active_in = self.max_in
        self.active_out = self.max_out

    def set_sample_config(self, in_dim, out_dim):
        """Select the active prefix block; storage is untouched."""
        if not 1 <= in_dim <= self.max_in:
            raise ConfigError(
                f"in_dim {in_dim} outside [1, {self.max_in}]"
            )
        if not 1 <= out_dim <= self.max_out:
            raise ConfigError(
                f"out_dim {out_dim} outside [1, {self.max_out}]"
            )
        self.active_in = int(in_dim)
        self.active_out = int(out_dim)

    def forward(self, x):
        w = T.prefix_slice(self.weight, (self.active_out, self.active_in))
        b = T.prefix_slice(self.bias, (self.active_out,))
        return T.add(T.matmul(x, w, transpose_b=True), b)

    def active_extents(self):
        return [
            (self.weight, (self.active_out, self.active_in)),
            (self.bias, (self.active_out,)),
        ]


class ElasticLayerNorm:
    """Layer norm whose gamma/beta are prefix-sliced to the active width."""

    def __init__(self, max_dim, eps=LAYER_NORM_EPS):
        self.max_dim = int(max_dim)
        self.eps = eps
        self.gamma = T.Tensor(np.ones(self.max_dim), requires_grad=True)
        self.beta = T.Tensor(np.zeros(self.max_dim), requires_grad=True)
        self.active_dim = self.max_dim

    def set_active_dim(self, dim):
        if not 1 <= dim <= self.max_dim:
            raise ConfigError(f"dim {dim} outside [1, {self.max_dim}]")
        self.active_dim = int(dim)

    def forward(self, x):
        g = T.prefix_slice(self.gamma, (self.active_dim,))
        b = T.prefix_slice(self.beta, (self.active_dim,))
        return T.layer_norm(x, g, b, eps=self.eps)

    def active_extents(self):
        return [
            (self.gamma, (self.active_dim,)),
            (self.beta, (self.active_dim,)),
        ]


class ElasticTransformerLayer:
    """One encoder layer wrapped in input/output bottleneck projections.

    The interior (attention + FFN, residuals, layer norms) runs at the
    configured hidden width d_h; the bottlenecks translate between d_model
    outside and d_h inside. Attention width and FFN width stay fixed, and the
    per-head size is d_attn / heads regardless of d_h.
    """

    def __init__(self, d_model, d_attn, d_ff, heads, rng):
        if d_attn % heads != 0:
            raise ConfigError(f"d_attn {d_attn} not divisible by heads {heads}")
        self.d_model = d_model
        self.d_attn = d_attn
        self.d_ff = d_ff
        self.heads = heads
        self.head_dim = d_attn // heads
        self.in_bottleneck = ElasticLinear(d_model, d_model, init="identity")
        self.q = ElasticLinear(d_model, d_attn, rng)
        self.k = ElasticLinear(d_model, d_attn, rng)
        self.v = ElasticLinear(d_model, d_attn, rng)
        self.o = ElasticLinear(d_attn, d_model, rng)
        self.ln_attn = ElasticLayerNorm(d_model)
        self.ffn_in = ElasticLinear(d_model, d_ff, rng)
        self.ffn_out = ElasticLinear(d_ff, d_model, rng)
        self.ln_ffn = ElasticLayerNorm(d_model)
        self.out_bottleneck = ElasticLinear(d_model, d_model, init="identity")
        self.hidden_dim = None

    def set_hidden_dim(self, d_h):
        if not 1 <= d_h <= self.d_model:
            raise ConfigError(f"hidden dim {d_h} outside [1, {self.d_model}]")
        self.in_bottleneck.set_sample_config(self.d_model, d_h)
        for lin in (self.q, self.k, self.v):
            lin.set_sample_config(d_h, self.d_attn)
        self.o.set_sample_config(self.d_attn, d_h)
        self.ln_attn.set_active_dim(d_h)
        self.ffn_in.set_sample_config(d_h, self.d_ff)
        self.ffn_out.set_sample_config(self.d_ff, d_h)
        self.ln_ffn.set_active_dim(d_h)
        self.out_bottleneck.set_sample_config(d_h, self.d_model)
        self.hidden_dim = int(d_h)

    def forward(self, x):
        """x: (..., seq, d_model) -> (..., seq, d_model)."""
        if self.hidden_dim is None:
            raise ConfigError("layer is not configured; call set_hidden_dim")
        h = self.in_bottleneck.forward(x)
        attn = self._attention(h)
        h = self.ln_attn.forward(T.add(h, attn))
        f = self.ffn_out.forward(T.gelu(self.ffn_in.forward(h)))
        h = self.ln_ffn.forward(T.add(h, f))
        return self.out_bottleneck.forward(h)

    def _attention(self, h):
        lead = h.data.shape[:-1]
        seq = lead[-1]
        split = lead[:-1] + (seq, self.heads, self.head_dim)
        perm = tuple(range(len(lead) - 1)) + (
            len(lead) - 1 + 1,
            len(lead) - 1,
            len(lead) + 1,
        )
        # (..., seq, d_attn) -> (..., heads, seq, head_dim); scaling q is
        # cheaper than scaling the (seq x seq) score matrix
        q = T.transpose(T.reshape(self.q.forward(h), split), perm)
        k = T.transpose(T.reshape(self.k.forward(h), split), perm)
        v = T.transpose(T.reshape(self.v.forward(h), split), perm)
        scores = T.matmul(
            T.scale(q, 1.0 / math.sqrt(self.head_dim)), k, transpose_b=True
        )
        ctx = T.matmul(T.softmax(scores), v)
        merged = T.reshape(
            T.transpose(ctx, perm), lead + (self.d_attn,)
        )
        return self.o.forward(merged)

    def sublayers(self):
        return [
            ("in_bottleneck", self.in_bottleneck),
            ("q", self.q),
            ("k", self.k),
            ("v", self.v),
            ("o", self.o),
            ("ln_attn", self.ln_attn),
            ("ffn_in", self.ffn_in),
            ("ffn_out", self.ffn_out),
            ("ln_ffn", self.ln_ffn),
            ("out_bottleneck", self.out_bottleneck),
        ]

    def named_parameters(self):
        out = []
        for name, sub in self.sublayers():
            if isinstance(sub, ElasticLinear):
                out.append((f"{name}.weight", sub.weight))
                out.append((f"{name}.bias", sub.bias))
            else:
                out.append((f"{name}.gamma", sub.gamma))
                out.append((f"{name}.beta", sub.beta))
        return out

    def active_extents(self):
        out = []
        for name, sub in self.sublayers():
            pairs = sub.active_extents()
            suffixes = (
                ("weight", "bias") if isinstance(sub, ElasticLinear)
                else ("gamma", "beta")
            )
            for (tensorref, extents), suffix in zip(pairs, suffixes):
                out.append((f"{name}.{suffix}", tensorref, extents))
        return out


def apply_shape(model, shape):
    """Configure every layer of ``model`` to the given per-layer widths."""
    model.apply_shape(shape)
