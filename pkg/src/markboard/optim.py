"""First-order optimizers and the seeded generator used across the package."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Parameter

RNG_ALGORITHM = "philox4x64-10"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; the same seed gives the same stream
    on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    moments: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def step(params: list[Parameter], state: OptimizerState) -> None:
    """Apply one update to every unfrozen parameter, then zero all grads."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient buffer")
        if p.frozen:
            continue
        g = p.grad
        if state.weight_decay:
            # decoupled decay, applied to matrices only
            if p.data.ndim > 1:
                p.data *= np.float32(1 - state.lr * state.weight_decay)
        if state.kind == "sgd":
            p.data -= np.asarray(state.lr * g, dtype=p.data.dtype)
            continue
        key = id(p)
        if key not in state.moments:
            state.moments[key] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        # bias-corrected update, computed in place to spare temporaries
        denom = np.sqrt(v)
        denom *= 1.0 / np.sqrt(1 - b2**t)
        denom += state.eps
        np.divide(m, denom, out=denom)
        denom *= state.lr / (1 - b1**t)
        p.data -= denom.astype(p.data.dtype, copy=False)
    for p in params:
        p.zero_grad()


class Adam:
    """Thin object wrapper so training loops can hold one optimizer."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.state = OptimizerState("adam", lr, tuple(betas), eps, weight_decay)

    def step(self) -> None:
        step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class SGD(Adam):
    def __init__(self, params, lr: float = 1e-2):
        self.params = list(params)
        self.state = OptimizerState("sgd", lr)
