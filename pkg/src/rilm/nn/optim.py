from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rilm.tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam with bias correction and optional linear warmup of the step size.

    Only the tensors handed to the constructor are updated; freezing a
    parameter means leaving it out.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9, warmup_steps=0):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, warmup_steps=warmup_steps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def current_lr(self) -> float:
        s = self.state
        if s.warmup_steps > 0:
            return s.lr * min(1.0, s.step / s.warmup_steps)
        return s.lr

    def step(self) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"adam_step: no gradient for parameter {missing[0]!r}")
        s = self.state
        s.step += 1
        lr = self.current_lr()
        c1 = 1.0 - s.beta1**s.step
        c2 = 1.0 - s.beta2**s.step
        for name, p in self.params.items():
            g = p.grad
            m = s.m[name]
            v = s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + s.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
