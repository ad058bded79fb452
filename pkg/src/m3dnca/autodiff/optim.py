"""Adam optimizer over Tensor parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingDivergedError
from .tensor import Tensor


@dataclass
class Adam:
    """Adam with bias correction; state is keyed by tensor id.

    step() applies one update in place to every parameter that has a
    gradient; parameters missing from grads are treated as zero-gradient
    (their moments decay but a fresh parameter does not move).
    """

    params: list[Tensor]
    lr: float = 1.6e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for p in self.params:
            self.m.setdefault(p.tid, np.zeros_like(p.data))
            self.v.setdefault(p.tid, np.zeros_like(p.data))

    def step(self, grads: dict[int, np.ndarray]) -> None:
        self.t += 1
        b1 = np.float32(self.beta1)
        b2 = np.float32(self.beta2)
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            g = grads.get(p.tid)
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise TrainingDivergedError(
                    f"non-finite gradient for parameter id {p.tid}"
                )
            m = self.m[p.tid]
            v = self.v[p.tid]
            m *= b1
            m += (np.float32(1.0) - b1) * g
            v *= b2
            v += (np.float32(1.0) - b2) * g * g
            mhat = m / np.float32(c1)
            vhat = v / np.float32(c2)
            p.data -= np.float32(self.lr) * mhat / (np.sqrt(vhat) + np.float32(self.eps))
