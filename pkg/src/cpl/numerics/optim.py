"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def adam_update(
    state: AdamState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    lr: float | None = None,
    lr_scale: dict[str, float] | None = None,
) -> None:
    """One bias-corrected Adam step, in place on ``params`` and ``state``.

    A parameter whose gradient is ``None`` is treated as having a zero
    gradient, so its moments still decay. ``lr`` overrides ``state.lr`` for
    this step only (used by learning-rate schedules); ``lr_scale`` multiplies
    it for the named parameters.
    """
    step = state.step + 1
    lr = state.lr if lr is None else lr
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        scale = 1.0 if lr_scale is None else lr_scale.get(name, 1.0)
        upd = (lr * scale / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - upd).astype(p.dtype, copy=False)
    state.step = step
