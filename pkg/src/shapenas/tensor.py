"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design notes:
- All math is 64-bit; forward results use numpy's fixed summation order, so
  identical inputs always produce identical bits.
- Ops record themselves on the active ``Tape`` only when some input requires
  gradients. With no tape active they run forward-only (inference mode).
- ``primitive_forward`` is the validating dispatch surface (shape and
  finiteness checks); the plain functions below it are the fast paths used
  inside model code.
"""

import math

import numpy as np

from .errors import DataError, NumericError, ValidationError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A dense float64 array plus gradient storage.

    Leaf tensors (parameters) are created with ``requires_grad=True``; op
    outputs inherit the flag while a tape is recording. ``data`` for op
    outputs may be a view into another tensor's storage (slicing never
    copies), so mutating a supernet weight is visible to every sub-network.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        """Dimension sizes as a list; product(dims) == data size."""
        return list(self.data.shape)

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def grad_view(self):
        """Gradient array, materializing zeros for untouched leaves."""
        if self.grad is None:
            self.grad = np.zeros(self.data.shape)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


class _Op:
    __slots__ = ("kind", "output", "backward")

    def __init__(self, kind, output, backward):
        self.kind = kind
        self.output = output
        self.backward = backward


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Construction and backward are single-threaded; nesting tapes is a
    programming error.
    """

    __slots__ = ("ops",)

    def __init__(self):
        self.ops = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already recording")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self.ops)


def _record(kind, inputs, out, backward):
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append(_Op(kind, out, backward))
    return out


def _accum(t, delta, own=False):
    """Add ``delta`` into t.grad.

    ``own=True`` promises the caller will not reuse ``delta``, letting a
    first accumulation adopt the array instead of allocating zeros.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if own and delta.shape == t.data.shape:
            t.grad = delta
        else:
            t.grad = np.zeros(t.data.shape)
            t.grad += delta
    else:
        t.grad += delta


def _out(data):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    return t


def backward(tape, loss, leaves=()):
    """Propagate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    ``loss`` must be scalar. Ops are visited exactly once, in reverse
    recording order. Leaves listed in ``leaves`` that the tape never touched
    are given explicit zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if not tape.ops:
        raise ValueError("cannot run backward on an empty tape")
    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape.ops):
        g = op.output.grad
        if g is None:
            continue
        op.backward(g)
    for t in leaves:
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros(t.data.shape)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap(a):
    return a.swapaxes(-1, -2)


def matmul(a, b, transpose_a=False, transpose_b=False):
    """Matrix product of the last two axes, with optional pre-transposes.

    Supports (..., m, k) @ (k, n) with the 2-D operand broadcast over leading
    axes, and same-leading-shape batched products.
    """
    ae = _swap(a.data) if transpose_a else a.data
    be = _swap(b.data) if transpose_b else b.data
    if ae.ndim < 2 or be.ndim < 2:
        raise ValidationError("matmul operands must have rank >= 2")
    if ae.shape[-1] != be.shape[-2]:
        raise ValidationError(
            f"matmul inner dims differ: {ae.shape} @ {be.shape}"
        )
    if be.ndim != 2 and ae.shape[:-2] != be.shape[:-2]:
        raise ValidationError(
            f"matmul batch dims differ: {ae.shape} vs {be.shape}"
        )
    out = _out(np.matmul(ae, be))

    def bwd(g):
        if a.requires_grad:
            da = np.matmul(g, _swap(be))
            _accum(a, _swap(da) if transpose_a else da, own=True)
        if b.requires_grad:
            if be.ndim == 2 and ae.ndim > 2:
                k = ae.shape[-1]
                n = g.shape[-1]
                db = np.matmul(
                    ae.reshape(-1, k).T, g.reshape(-1, n)
                )
            else:
                db = np.matmul(_swap(ae), g)
            _accum(b, _swap(db) if transpose_b else db, own=True)

    return _record("matmul", (a, b), out, bwd)


def add(a, b):
    """Elementwise sum with numpy broadcasting."""
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ValidationError(f"add shapes incompatible: {exc}") from exc
    out = _out(data)

    def bwd(g):
        da = _unbroadcast(g, a.data.shape)
        _accum(a, da, own=da is not g)
        db = _unbroadcast(g, b.data.shape)
        _accum(b, db, own=db is not g)

    return _record("add", (a, b), out, bwd)


def scale(a, c):
    """Multiply by a python scalar."""
    c = float(c)
    out = _out(a.data * c)

    def bwd(g):
        if g.flags.writeable:
            g *= c
            _accum(a, g, own=True)
        else:
            _accum(a, g * c, own=True)

    return _record("scale", (a,), out, bwd)


def layer_norm(x, gamma, beta, eps=1e-12):
    """Normalize over the last axis, then apply gamma/beta."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValidationError(
            f"layer_norm gamma/beta must have shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _out(xhat * gamma.data + beta.data)

    def bwd(g):
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0), own=True)
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0), own=True)
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dxhat -= m1
            dxhat -= xhat * m2
            dxhat *= inv
            _accum(x, dxhat, own=True)

    return _record("layer_norm", (x, gamma, beta), out, bwd)


def gelu(x):
    """Gaussian-error linear unit (tanh form)."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    t = np.tanh(u)
    out = _out(0.5 * xd * (1.0 + t))

    def bwd(g):
        du = xd * xd
        du *= 3.0 * _GELU_A
        du += 1.0
        du *= _GELU_C
        dy = t * t
        np.subtract(1.0, dy, out=dy)
        dy *= du
        dy *= xd
        dy += 1.0 + t
        dy *= 0.5
        dy *= g
        _accum(x, dy, own=True)

    return _record("gelu", (x,), out, bwd)


def softmax(x):
    """Softmax over the last axis; rows sum to 1."""
    p = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = _out(p)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        dx = g - inner
        dx *= p
        _accum(x, dx, own=True)

    return _record("softmax", (x,), out, bwd)


def embedding_lookup(table, ids):
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValidationError("embedding id out of range")
    out = _out(table.data[ids])

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros(table.data.shape)
            np.add.at(
                table.grad, ids.ravel(), g.reshape(-1, table.data.shape[-1])
            )

    return _record("embedding_lookup", (table,), out, bwd)


def prefix_slice(t, extents):
    """Top-left prefix block view; the sliced region shares storage with t."""
    if len(extents) != t.data.ndim:
        raise ValidationError(
            f"prefix_slice rank mismatch: {extents} on {t.data.shape}"
        )
    for e, n in zip(extents, t.data.shape):
        if not 1 <= e <= n:
            raise ValidationError(
                f"prefix extent {e} out of range for axis of size {n}"
            )
    region = tuple(slice(0, e) for e in extents)
    out = _out(t.data[region])

    def bwd(g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros(t.data.shape)
            t.grad[region] += g

    return _record("prefix_slice", (t,), out, bwd)


def reshape(t, shape):
    old = t.data.shape
    out = _out(t.data.reshape(shape))

    def bwd(g):
        # g belongs solely to this op's output and is dead after this call,
        # so its (possibly viewed) buffer can be adopted
        _accum(t, g.reshape(old), own=g.flags.writeable)

    return _record("reshape", (t,), out, bwd)


def transpose(t, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _out(t.data.transpose(axes))

    def bwd(g):
        _accum(t, g.transpose(inv), own=g.flags.writeable)

    return _record("transpose", (t,), out, bwd)


def reduce_sum(t):
    """Sum every element down to a scalar."""
    out = _out(np.asarray(t.data.sum()))

    def bwd(g):
        _accum(t, np.broadcast_to(g, t.data.shape))

    return _record("sum", (t,), out, bwd)


def reduce_mean(t):
    out = _out(np.asarray(t.data.mean()))

    def bwd(g):
        _accum(t, np.broadcast_to(g / t.data.size, t.data.shape))

    return _record("mean", (t,), out, bwd)


def mul(a, b):
    """Elementwise product with broadcasting (used by tests and analyses)."""
    out = _out(a.data * b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", (a, b), out, bwd)


def _cross_entropy_rows(logits2d, targets):
    m = logits2d.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits2d - m).sum(axis=-1))
    picked = logits2d[np.arange(logits2d.shape[0]), targets]
    return lse - picked


def masked_cross_entropy(logits, labels):
    """Mean cross-entropy over positions whose label is >= 0.

    ``labels`` matches the leading shape of ``logits``; entries < 0 are not
    scored. Returns (scalar loss, scored-position count).
    """
    labels = np.asarray(labels)
    if labels.shape != logits.data.shape[:-1]:
        raise ValidationError(
            f"labels shape {labels.shape} does not match logits "
            f"{logits.data.shape[:-1]}"
        )
    flat_labels = labels.ravel()
    sel = np.flatnonzero(flat_labels >= 0)
    if sel.size == 0:
        raise DataError("batch contains no scored (masked) positions")
    vocab = logits.data.shape[-1]
    if flat_labels[sel].max() >= vocab:
        raise ValidationError("label id out of vocabulary range")
    flat = logits.data.reshape(-1, vocab)
    rows = flat[sel]
    targets = flat_labels[sel]
    losses = _cross_entropy_rows(rows, targets)
    count = int(sel.size)
    out = _out(np.asarray(losses.sum() / count))

    def bwd(g):
        if not logits.requires_grad:
            return
        z = rows - rows.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        p[np.arange(count), targets] -= 1.0
        p *= float(g) / count
        dflat = np.zeros(flat.shape)
        dflat[sel] = p
        _accum(logits, dflat.reshape(logits.data.shape), own=True)

    return _record("masked_cross_entropy", (logits,), out, bwd), count


def masked_lm_loss(hidden, table, bias, labels):
    """Tied-embedding LM head fused with masked cross-entropy.

    Projects only the scored positions through ``table`` (vocab x d), adds
    ``bias``, and averages cross-entropy over them. Equivalent to
    ``masked_cross_entropy(hidden @ table.T + bias, labels)`` but avoids
    materializing logits at unscored positions.
    """
    labels = np.asarray(labels)
    d = hidden.data.shape[-1]
    if table.data.shape[-1] != d:
        raise ValidationError("embedding width does not match hidden width")
    if labels.shape != hidden.data.shape[:-1]:
        raise ValidationError("labels shape does not match hidden positions")
    flat_labels = labels.ravel()
    sel = np.flatnonzero(flat_labels >= 0)
    if sel.size == 0:
        raise DataError("batch contains no scored (masked) positions")
    x2 = hidden.data.reshape(-1, d)
    xm = x2[sel]
    logits = xm @ table.data.T + bias.data
    targets = flat_labels[sel]
    if targets.max() >= table.data.shape[0]:
        raise ValidationError("label id out of vocabulary range")
    losses = _cross_entropy_rows(logits, targets)
    count = int(sel.size)
    out = _out(np.asarray(losses.sum() / count))

    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dlogits = probs.copy()
        dlogits[np.arange(count), targets] -= 1.0
        dlogits *= float(g) / count
        if table.requires_grad:
            _accum(table, dlogits.T @ xm)
        if bias.requires_grad:
            _accum(bias, dlogits.sum(axis=0))
        if hidden.requires_grad:
            dx2 = np.zeros(x2.shape)
            dx2[sel] = dlogits @ table.data
            _accum(hidden, dx2.reshape(hidden.data.shape), own=True)

    return _record("masked_lm_loss", (hidden, table, bias), out, bwd), count


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "softmax": softmax,
    "embedding_lookup": embedding_lookup,
    "masked_cross_entropy": lambda *a, **k: masked_cross_entropy(*a, **k)[0],
    "masked_lm_loss": lambda *a, **k: masked_lm_loss(*a, **k)[0],
    "prefix_slice": prefix_slice,
    "reshape": reshape,
    "transpose": transpose,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "mul": mul,
}


def primitive_forward(op_kind, *inputs, **kwargs):
    """Validating dispatcher over the primitive table.

    Checks tensor inputs for NaN/Inf before running; shape validation is
    performed by the ops themselves.
    """
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValidationError(f"unknown primitive {op_kind!r}") from None
    for t in inputs:
        if isinstance(t, Tensor) and not np.isfinite(t.data).all():
            raise NumericError(f"non-finite input to primitive {op_kind!r}")
    return fn(*inputs, **kwargs)
