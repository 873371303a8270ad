"""Adam and target-network averaging over :class:`Parameter` lists."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adam_step(param: Parameter, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; increments ``step_count`` and zeroes ``grad``."""
    g = param.grad
    param.step_count += 1
    t = param.step_count
    m, v = param.adam_m, param.adam_v
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    g.fill(0.0)


def adam_update(params: Iterable[Parameter], lr: float, **kw) -> None:
    for p in params:
        adam_step(p, lr, **kw)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad.fill(0.0)


def polyak_update(targets: Iterable[Parameter], live: Iterable[Parameter], tau: float) -> None:
    """target <- (1 - tau) * target + tau * live, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    for t, l in zip(targets, live, strict=True):
        if tau == 1.0:
            t.data[...] = l.data
        else:
            t.data *= 1.0 - tau
            t.data += tau * l.data
