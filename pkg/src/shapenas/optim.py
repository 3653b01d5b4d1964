"""AdamW with decoupled weight decay and prefix-region updates.

Updates can be restricted to the top-left prefix block of each parameter so
that weights outside the sub-networks sampled this step stay bit-identical
(moments included). Bias correction uses a per-parameter step count, which
only advances when that parameter is updated.
"""

import numpy as np

from .errors import ConfigError, NumericError


class _ParamState:
    __slots__ = ("m", "v", "step")

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step = 0


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._state = {id(p): _ParamState(p.data.shape) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, updates=None, lr=None):
        """Apply one AdamW step.

        ``updates`` is a list of (param, extents) pairs; extents of None
        means the full tensor. Only listed parameters are touched: their
        moments advance and decoupled weight decay applies inside the given
        region. Every listed parameter must carry a gradient.
        """
        if updates is None:
            updates = [(p, None) for p in self.params]
        lr = self.lr if lr is None else float(lr)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for param, extents in updates:
            state = self._state.get(id(param))
            if state is None:
                raise ConfigError("parameter was not registered with AdamW")
            if param.grad is None:
                raise ValueError(
                    "missing gradient for a parameter passed to AdamW.step"
                )
            region = (
                tuple(slice(0, e) for e in extents)
                if extents is not None
                else tuple(slice(None) for _ in param.data.shape)
            )
            g = param.grad[region]
            if not np.isfinite(g).all():
                raise NumericError("non-finite gradient in AdamW.step")
            state.step += 1
            t = state.step
            m = state.m[region]
            v = state.v[region]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            w = param.data[region]
            w -= lr * (mhat / (np.sqrt(vhat) + self.eps)
                       + self.weight_decay * w)


def linear_schedule(step, total_steps, warmup_steps, peak_lr):
    """Linear warmup to ``peak_lr`` then linear decay to zero.

    ``step`` is 0-based; the first step already gets a nonzero rate.
    """
    if warmup_steps >= total_steps:
        raise ConfigError("warmup_steps must be smaller than total steps")
    if step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    return peak_lr * max(0.0, (total_steps - step) / (total_steps - warmup_steps))
