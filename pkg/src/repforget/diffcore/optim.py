"""First-order optimizers operating in place on parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    buffers: list[dict[str, np.ndarray]] = field(default_factory=list)


def _check_hyper(**values: float) -> None:
    for name, v in values.items():
        if v < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")


class Optimizer:
    def __init__(self, params: Sequence[Tensor], state: OptimizerState):
        self.params = list(params)
        self.state = state
        state.buffers = [{} for _ in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name} {p.data.shape}")
            grads.append(g)
        return grads

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """SGD with heavy-ball momentum and coupled L2 weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        _check_hyper(momentum=momentum, weight_decay=weight_decay)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        super().__init__(params, OptimizerState("sgd-momentum", lr, momentum=momentum, weight_decay=weight_decay))

    def step(self) -> None:
        st = self.state
        for p, g, buf in zip(self.params, self._grads(), st.buffers):
            if st.weight_decay:
                g = g + st.weight_decay * p.data
            if st.momentum:
                v = buf.get("momentum")
                v = g.copy() if v is None else st.momentum * v + g
                buf["momentum"] = v
                g = v
            p.data -= st.lr * g
        st.step += 1


class AdamW(Optimizer):
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        _check_hyper(beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not (betas[0] < 1 and betas[1] < 1):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        super().__init__(params, OptimizerState("adamw", lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay))

    def step(self) -> None:
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, g, buf in zip(self.params, self._grads(), st.buffers):
            if st.weight_decay:
                p.data -= st.lr * st.weight_decay * p.data
            m = buf.get("m", np.zeros_like(p.data))
            v = buf.get("v", np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            buf["m"], buf["v"] = m, v
            p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


def make_optimizer(kind: str, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> Optimizer:
    if kind in ("sgd", "sgd-momentum"):
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adamw":
        return AdamW(params, lr, betas=betas, eps=eps, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer kind {kind!r}")
