"""MLM masking, sub-network sampling, the super pre-training loop, and
perplexity evaluation.

Sampling modes: plain uniform sampling draws every per-layer width
independently; sandwich mode always adds the largest and smallest
sub-networks so the extremes of the space get a gradient signal every step.
Gradients are accumulated across the step's shapes, averaged, and applied
with a single optimizer step over the union of touched parameter regions,
which keeps weights outside every sampled prefix bit-identical.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import MASK_ID, NUM_SPECIALS
from .errors import ConfigError, DataError, NumericError, ValidationError
from .optim import AdamW, linear_schedule

# Masking during evaluation always derives from this seed (never from the
# training seed) so perplexities are comparable across checkpoints and runs.
EVAL_MASK_SEED = 24243


@dataclass(frozen=True)
class MaskingPolicy:
    """BERT-style masking: select, then mask / randomize / keep."""

    mask_prob: float = 0.15
    mask_token_prob: float = 0.8
    random_token_prob: float = 0.1
    keep_prob: float = 0.1
    mask_id: int = MASK_ID

    def __post_init__(self):
        # 1.0 is allowed: it degenerates to masking every candidate position
        if not 0.0 < self.mask_prob <= 1.0:
            raise ConfigError(f"mask_prob {self.mask_prob} outside (0, 1]")
        total = self.mask_token_prob + self.random_token_prob + self.keep_prob
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(
                f"mask/random/keep probabilities sum to {total}, expected 1"
            )


@dataclass
class MlmBatch:
    inputs: np.ndarray   # (batch, seq) token ids after corruption
    labels: np.ndarray   # (batch, seq); original id at selected positions, -1 elsewhere

    @property
    def num_masked(self):
        return int((self.labels >= 0).sum())


def mask_batch(token_ids, policy, rng, vocab_size):
    """Corrupt ~mask_prob of the non-special positions; label only those."""
    token_ids = np.asarray(token_ids)
    if token_ids.size == 0:
        raise DataError("empty token batch")
    candidates = token_ids >= NUM_SPECIALS
    if not candidates.any():
        raise DataError("batch contains only special tokens; nothing to mask")
    selected = candidates & (rng.random(token_ids.shape) < policy.mask_prob)
    if not selected.any():
        raise DataError("masking selected zero positions in this batch")
    labels = np.where(selected, token_ids, -1)
    inputs = token_ids.copy()
    action = rng.random(token_ids.shape)
    randoms = rng.integers(NUM_SPECIALS, vocab_size, size=token_ids.shape)
    use_mask = selected & (action < policy.mask_token_prob)
    use_random = (
        selected
        & (action >= policy.mask_token_prob)
        & (action < policy.mask_token_prob + policy.random_token_prob)
    )
    inputs[use_mask] = policy.mask_id
    inputs[use_random] = randoms[use_random]
    return MlmBatch(inputs=inputs, labels=labels)


def sample_random(design_space, rng):
    """One shape, every layer drawn independently and uniformly."""
    dims = design_space.allowed_dims
    picks = rng.integers(0, len(dims), size=design_space.num_layers)
    return tuple(dims[i] for i in picks)


def sample_sandwich(design_space, n, rng):
    """[largest, smallest] plus n-2 uniform random shapes."""
    if n < 2:
        raise ConfigError(f"sandwich sampling needs n >= 2, got {n}")
    shapes = [design_space.max_shape(), design_space.min_shape()]
    shapes.extend(sample_random(design_space, rng) for _ in range(n - 2))
    return shapes


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-6
    sampler: str = "sandwich"
    shapes_per_step: int = 4
    seed: int = 0
    eval_interval: int = 200
    eval_batches: int = 12
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)

    def __post_init__(self):
        if self.sampler not in ("random", "sandwich"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.shapes_per_step < 1:
            raise ConfigError("shapes_per_step must be >= 1")
        if self.sampler == "sandwich" and self.shapes_per_step < 2:
            raise ConfigError("sandwich sampling requires shapes_per_step >= 2")
        if self.steps < 0 or self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("steps/batch_size/seq_len out of range")


def shape_str(shape):
    return "-".join(str(d) for d in shape)


@dataclass
class StepRecord:
    step: int
    shapes: list
    losses: list


@dataclass
class EvalRecord:
    step: int
    shape: tuple
    perplexity: float


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def losses_csv(self):
        lines = ["step,shape,loss"]
        for rec in self.steps:
            for shape, loss in zip(rec.shapes, rec.losses):
                lines.append(f"{rec.step},{shape_str(shape)},{loss!r}")
        return "\n".join(lines) + "\n"

    def evals_csv(self):
        lines = ["step,shape,perplexity"]
        for rec in self.evals:
            lines.append(
                f"{rec.step},{shape_str(rec.shape)},{rec.perplexity!r}"
            )
        return "\n".join(lines) + "\n"

    def final_perplexity(self, shape):
        shape = tuple(shape)
        best_step = -1
        value = None
        for rec in self.evals:
            if rec.shape == shape and rec.step >= best_step:
                best_step = rec.step
                value = rec.perplexity
        return value


def _union_updates(model, shapes):
    """Per-tensor elementwise-max active extents across the step's shapes."""
    union = {}
    for shape in shapes:
        for name, tensorref, extents in model.active_extents(shape):
            if name in union:
                _t, prev = union[name]
                union[name] = (
                    tensorref,
                    tuple(max(a, b) for a, b in zip(prev, extents)),
                )
            else:
                union[name] = (tensorref, extents)
    return list(union.values())


def train_step(model, batch, shapes, optimizer, lr=None):
    """Accumulate gradients over ``shapes`` on one batch, then step once.

    Returns the per-shape losses in sampling order.
    """
    if not shapes:
        raise ValidationError("train_step needs at least one shape")
    model.zero_grads()
    losses = []
    for shape in shapes:
        model.apply_shape(shape)
        with T.Tape() as tape:
            loss, _count = model.mlm_forward(batch.inputs, batch.labels)
            T.backward(tape, loss)
        losses.append(loss.item())
    if len(shapes) > 1:
        inv = 1.0 / len(shapes)
        for p in model.parameters():
            if p.grad is not None:
                p.grad *= inv
    optimizer.step(_union_updates(model, shapes), lr=lr)
    return losses


def evaluate_perplexity(model, shape, eval_rows, batch_size, policy,
                        vocab_size, seed=EVAL_MASK_SEED):
    """exp(mean masked cross-entropy) over the eval rows.

    Mask positions derive from (seed, batch index), so the same rows are
    scored identically no matter when or in what batch order the evaluation
    runs; fsum makes the aggregate bit-stable under reordering too.
    """
    eval_rows = np.asarray(eval_rows)
    n_batches = len(eval_rows) // batch_size
    if n_batches == 0:
        raise DataError(
            f"eval set of {len(eval_rows)} rows is smaller than one batch"
        )
    model.apply_shape(shape)
    totals = []
    count = 0
    for i in range(n_batches):
        rows = eval_rows[i * batch_size:(i + 1) * batch_size]
        rng = np.random.default_rng([seed, i])
        batch = mask_batch(rows, policy, rng, vocab_size)
        loss, n = model.mlm_forward(batch.inputs, batch.labels)
        totals.append(loss.item() * n)
        count += n
    return math.exp(math.fsum(totals) / count)


def _epoch_batches(rows, batch_size, rng):
    order = rng.permutation(len(rows))
    for start in range(0, len(rows) - batch_size + 1, batch_size):
        yield rows[order[start:start + batch_size]]


def super_pretrain(model, corpus, config):
    """Run the weight-sharing MLM pre-training loop; returns the TrainLog.

    Evaluates the smallest, the largest, and two fixed random probe shapes
    every ``eval_interval`` steps plus once after the final step.
    """
    log = TrainLog()
    if config.steps == 0:
        return log
    space = model.config.design_space
    vocab_size = model.config.vocab_size
    if len(corpus.train_rows) < config.batch_size:
        raise DataError(
            f"corpus has {len(corpus.train_rows)} training rows; "
            f"need at least one batch of {config.batch_size}"
        )
    seedseq = np.random.SeedSequence(config.seed)
    order_rng, mask_rng, shape_rng, probe_rng = (
        np.random.default_rng(s) for s in seedseq.spawn(4)
    )
    probes = [sample_random(space, probe_rng) for _ in range(2)]
    eval_shapes = [space.max_shape(), space.min_shape(), *probes]
    optimizer = AdamW(
        model.parameters(),
        lr=config.peak_lr,
        betas=config.adam_betas,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )

    def run_evals(step):
        for shape in eval_shapes:
            p = evaluate_perplexity(
                model, shape, corpus.eval_rows, config.batch_size,
                config.masking, vocab_size,
            )
            log.evals.append(EvalRecord(step=step, shape=shape, perplexity=p))

    batches = _epoch_batches(corpus.train_rows, config.batch_size, order_rng)
    for step in range(config.steps):
        if config.eval_interval and step % config.eval_interval == 0:
            run_evals(step)
        rows = next(batches, None)
        if rows is None:
            batches = _epoch_batches(
                corpus.train_rows, config.batch_size, order_rng
            )
            rows = next(batches)
        batch = mask_batch(rows, config.masking, mask_rng, vocab_size)
        if config.sampler == "sandwich":
            shapes = sample_sandwich(space, config.shapes_per_step, shape_rng)
        else:
            shapes = [
                sample_random(space, shape_rng)
                for _ in range(config.shapes_per_step)
            ]
        lr = linear_schedule(
            step, config.steps, config.warmup_steps, config.peak_lr
        )
        try:
            losses = train_step(model, batch, shapes, optimizer, lr=lr)
        except NumericError as exc:
            raise NumericError(f"training step {step}: {exc}") from exc
        log.steps.append(StepRecord(step=step, shapes=shapes, losses=losses))
    run_evals(config.steps)
    return log
