"""Adam with per-parameter step counts; frozen parameters are skipped entirely."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .diffcore import Parameter


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    slots: dict = field(default_factory=dict)


def optimizer_step(params: Iterable[Parameter], lr: float, state: AdamState) -> None:
    """One Adam update of every non-frozen parameter from its accumulated ``grad``."""
    b1, b2 = state.beta1, state.beta2
    for p in params:
        if p.frozen:
            continue
        slot = state.slots.get(p)
        if slot is None:
            slot = state.slots[p] = [0, np.zeros_like(p.data), np.zeros_like(p.data)]
        slot[0] += 1
        t, m, v = slot
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
