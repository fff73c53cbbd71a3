"""Finite-difference gradient suites behind ``cpl grad-check``."""

from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import BackboneConfig
from .numerics import Tensor, fd_gradcheck
from .numerics.tensor import _record

TOLERANCE = 1e-4
LINEAR_TOLERANCE = 1e-10


@dataclass
class SuiteResult:
    scope: str
    worst: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0

    @property
    def max_error(self) -> float:
        return max(self.worst.values(), default=0.0)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.checked > 0 and self.max_error <= tol

    def add(self, name: str, res) -> None:
        self.worst[name] = max(self.worst.get(name, 0.0), res.max_rel_error)
        self.checked += res.checked
        self.skipped += res.skipped


def _rng(seed: int, name: str):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _away_from_zero(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng):
    """(name, f, point) triples covering every differentiable op."""
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=3))
    m44 = Tensor(rng.normal(size=(4, 2)))
    c = Tensor(rng.normal(size=(2, 3)))
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, [0, 2]] = True
    mask[1, [1, 3, 4]] = True
    return [
        ("add", lambda x: nx.sum_(nx.mul(nx.add(x, c), nx.add(x, c))), rng.normal(size=(2, 3))),
        ("mul", lambda x: nx.sum_(nx.mul(nx.mul(x, x), c)), rng.normal(size=(2, 3))),
        ("power", lambda x: nx.sum_(nx.power(x, 3)), _away_from_zero(rng, (2, 3))),
        ("relu", lambda x: nx.sum_(nx.mul(nx.relu(x), c)), _away_from_zero(rng, (2, 3))),
        ("abs", lambda x: nx.sum_(nx.mul(nx.abs_(x), c)), _away_from_zero(rng, (2, 3))),
        ("exp", lambda x: nx.sum_(nx.mul(nx.exp(x), c)), rng.normal(size=(2, 3))),
        ("matmul", lambda x: nx.sum_(nx.power(nx.matmul(x, m44), 2)), rng.normal(size=(3, 4))),
        ("softmax", lambda x: nx.sum_(nx.mul(nx.softmax(x), c)), rng.normal(size=(2, 3))),
        ("masked_softmax", lambda x: nx.sum_(nx.power(nx.masked_softmax(x, mask), 2)), rng.normal(size=(2, 5))),
        ("conv2d", lambda x: nx.sum_(nx.power(nx.conv2d(x, w, b), 2)), rng.normal(size=(1, 2, 8, 8))),
        ("conv2d_stride2", lambda x: nx.sum_(nx.power(nx.conv2d(x, w, b, stride=2), 2)), rng.normal(size=(1, 2, 8, 8))),
        ("avg_pool2", lambda x: nx.sum_(nx.power(nx.avg_pool2(x), 2)), rng.normal(size=(1, 2, 4, 4))),
        ("upsample2", lambda x: nx.sum_(nx.power(nx.upsample2(x), 3)), rng.normal(size=(1, 2, 3, 3))),
        ("global_avg_pool", lambda x: nx.sum_(nx.power(nx.global_avg_pool(x), 2)), rng.normal(size=(2, 3, 4, 4))),
        ("l1_mean", lambda x: nx.l1_mean(x), _away_from_zero(rng, (2, 3))),
        ("l2_sq_mean", lambda x: nx.l2_sq_mean(x), rng.normal(size=(2, 3))),
        ("mean_axis", lambda x: nx.sum_(nx.power(nx.mean(x, axis=1), 2)), rng.normal(size=(3, 4))),
        ("take", lambda x: nx.sum_(nx.power(nx.take(x, [0, 2, 2]), 2)), rng.normal(size=(3, 2))),
        ("concat", lambda x: nx.sum_(nx.power(nx.concat([x, nx.mul(x, 2.0)], axis=1), 3)), rng.normal(size=(2, 2))),
        ("broadcast_to", lambda x: nx.sum_(nx.mul(nx.broadcast_to(x, (3, 4)), nx.broadcast_to(x, (3, 4)))), rng.normal(size=(4,))),
        ("transpose_reshape", lambda x: nx.sum_(nx.power(nx.reshape(nx.transpose(x), (6,)), 3)), rng.normal(size=(2, 3))),
    ]


def op_suite(trials: int = 100, seed: int = 0) -> SuiteResult:
    out = SuiteResult("op")
    for t in range(trials):
        for name, f, point in _op_cases(_rng(seed, f"op{t}")):
            out.add(name, fd_gradcheck(f, point))
    return out


def linear_suite(trials: int = 20, seed: int = 0) -> SuiteResult:
    out = SuiteResult("linear")
    for t in range(trials):
        rng = _rng(seed, f"linear{t}")
        a, c = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(3, 2)))
        # central differences are exact for a linear map, so a wide step only reduces rounding
        out.add("matmul_add", fd_gradcheck(lambda x: nx.sum_(nx.add(nx.matmul(x, a), c)), rng.normal(size=(3, 4)), h=0.5))
    return out


def tiny_config(seed: int):
    from .trainer import TrainConfig

    return TrainConfig(
        tasks=["noise", "rain", "lowlight"],
        batch_size=3,
        crop=16,
        n_experts=3,
        k=1,
        m=2,
        alpha=0.01,
        seed=seed,
        dtype="float64",
        gate_estimator="exact",
        # the stop-gradient variant is deliberately not the derivative of total
        neg_stop_gradient=False,
        augment=False,
        backbone=BackboneConfig(base_channels=4, depth=2, prompt_dim=4),
    )


def _perturbed_state(config):
    """Initial state with a random head and spread-out experts, so that every
    parameter has a non-trivial gradient (the zero head would hide them)."""
    from .trainer import init_state

    state = init_state(config)
    rng = _rng(config.seed, "perturb")
    P = state.backbone.params
    P["head.w"].data = rng.normal(0.0, 0.3, size=P["head.w"].shape)
    P["head.b"].data = rng.normal(0.0, 0.1, size=P["head.b"].shape)
    state.bank.experts.data = rng.normal(0.0, 0.5, size=state.bank.experts.shape)
    return state


def end2end_suite(trials: int = 20, seed: int = 0, coords_per_param: int = 2, params_per_trial: int = 6) -> SuiteResult:
    """Gradient of the full training loss with respect to slices of every
    parameter group, in float64, over ``trials`` seeds."""
    from .trainer import forward, stack_images, training_batch

    out = SuiteResult("end2end")
    for t in range(trials):
        cfg = tiny_config(seed + t)
        state = _perturbed_state(cfg)
        degraded, clean = stack_images(training_batch(cfg, 1), np.float64)
        rng = _rng(seed + t, "end2end")
        groups = [("backbone", state.backbone.params), ("bank", state.bank.params)]
        names = [(g, n) for g, d in groups for n in d]
        picks = rng.choice(len(names), size=min(params_per_trial, len(names)), replace=False)
        for i in picks:
            group, name = names[i]
            store = dict(groups)[group]
            original = store[name]

            def f(x, store=store, name=name):
                store[name] = x
                return forward(state, degraded, clean, step=1).terms.total

            idx = rng.choice(original.size, size=min(coords_per_param, original.size), replace=False)
            try:
                res = fd_gradcheck(f, original.data, h=1e-3, indices=idx, order=4)
            finally:
                store[name] = original
            out.add(f"{group}/{name}", res)
    return out


def _scaled_grad(t: Tensor, factor: float) -> Tensor:
    return _record(t.data, (t,), lambda g: (g * factor,), "corrupted")


@contextlib.contextmanager
def corrupted_rule(op: str, factor: float = 1.5):
    """Scale the gradient of ``cpl.numerics.<op>`` by ``factor``; a negative
    control that any working gradient check must catch."""
    original = getattr(nx, op)

    def bad(*args, **kwargs):
        return _scaled_grad(original(*args, **kwargs), factor)

    setattr(nx, op, bad)
    try:
        yield
    finally:
        setattr(nx, op, original)


SUITES = {"op": op_suite, "end2end": end2end_suite, "linear": linear_suite}
