"""Training: positive and negative reconstructions, loss assembly, Adam."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .backbone import Backbone, BackboneConfig
from .cpr import CprTerms, PerceptualExtractor, negative_term
from .numerics import AdamState, NonFiniteError, Tensor
from .spm import (
    GateDecision,
    PromptBank,
    compose_prompt,
    gate,
    project_gate_rows,
    routing_argmin_surrogate,
    routing_surrogate,
    sample_negative_indices,
)
from .synth import TASKS, SampleTriple, derive_seed, make_batch

log = logging.getLogger(__name__)

# "counterfactual" keeps the exact forward and trains the router from the
# losses of the reconstructions that CPR evaluates anyway (see Forward.objective)
TRAIN_ESTIMATORS = ("exact", "straight_through", "counterfactual")
GATE_INITS = ("gaussian", "flat_orthogonal")
GATE_PARAMS = ("bank/gate.w", "bank/gate.b")

# spawn-key namespaces for derived seeds
_KEY_MODEL, _KEY_BATCH, _KEY_NEG, _KEY_EVAL = 1, 2, 3, 4


class TrainingError(RuntimeError):
    pass


class NonFiniteLoss(TrainingError):
    def __init__(self, step: int, term: str, detail: str = ""):
        self.step, self.term = step, term
        super().__init__(f"non-finite {term} at step {step}" + (f": {detail}" if detail else ""))


@dataclass
class TrainConfig:
    tasks: list = field(default_factory=lambda: ["noise", "rain", "lowlight"])
    steps: int = 200
    batch_size: int = 8
    crop: int = 32
    gen_size: int | None = None
    lr: float = 2e-4
    lr_schedule: str = "constant"
    alpha: float = 0.01
    n_experts: int = 5
    k: int = 1
    m: int = 4
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    dtype: str = "float32"
    gate_estimator: str = "counterfactual"
    gate_init: str = "flat_orthogonal"
    route_centering: bool = True
    route_target: str = "argmin"
    route_feature_scale: float = 0.3
    gate_lr_scale: float = 1.0
    neg_stop_gradient: bool = True
    neg_margin: float | None = None
    augment: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ranges: dict | None = None

    def validate(self) -> None:
        if not self.tasks:
            raise ValueError("tasks must not be empty")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise ValueError(f"unknown tasks {bad}; expected a subset of {TASKS}")
        for name in ("batch_size", "crop", "n_experts", "k", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("steps", "m", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.k > self.n_experts:
            raise ValueError(f"k ({self.k}) must not exceed n_experts ({self.n_experts})")
        if self.m > self.n_experts - 1:
            raise ValueError(f"m ({self.m}) must be at most n_experts - 1 ({self.n_experts - 1})")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        if self.gate_estimator not in TRAIN_ESTIMATORS:
            raise ValueError(f"gate_estimator must be one of {TRAIN_ESTIMATORS}, got {self.gate_estimator!r}")
        if not 0.0 <= self.route_feature_scale <= 1.0:
            raise ValueError(f"route_feature_scale must be in [0, 1], got {self.route_feature_scale}")
        if not self.gate_lr_scale > 0:
            raise ValueError(f"gate_lr_scale must be positive, got {self.gate_lr_scale}")
        if self.gate_init not in GATE_INITS:
            raise ValueError(f"gate_init must be one of {GATE_INITS}, got {self.gate_init!r}")
        if self.route_target not in ("expected", "argmin"):
            raise ValueError(f"route_target must be 'expected' or 'argmin', got {self.route_target!r}")
        if self.neg_margin is not None and not self.neg_margin > 0:
            raise ValueError(f"neg_margin must be positive when set, got {self.neg_margin}")
        if self.crop % 8 or self.crop % 2**self.backbone.depth:
            raise ValueError(f"crop {self.crop} must be divisible by 8 and by 2**depth")
        self.backbone.validate(self.n_experts)

    def to_json(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        bb = d.pop("backbone", None)
        cfg = cls(**d)
        if bb is not None:
            cfg.backbone = BackboneConfig(**bb)
        cfg.tasks = list(cfg.tasks)
        return cfg


@dataclass
class TrainState:
    config: TrainConfig
    backbone: Backbone
    bank: PromptBank
    phi: PerceptualExtractor
    adam: AdamState
    step: int = 0

    def params(self) -> dict[str, Tensor]:
        out = {f"backbone/{k}": v for k, v in self.backbone.params.items()}
        out.update({f"bank/{k}": v for k, v in self.bank.params.items()})
        return out

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.grad = None


def init_state(config: TrainConfig) -> TrainState:
    config.validate()
    dtype = np.dtype(config.dtype)
    model_seed = derive_seed(config.seed, _KEY_MODEL)
    backbone = Backbone(config.backbone, seed=model_seed, dtype=dtype)
    bank = PromptBank(
        config.n_experts, config.backbone.prompt_dim, config.backbone.feature_dim, config.k, seed=model_seed, dtype=dtype
    )
    if config.gate_init == "flat_orthogonal":
        with nx.no_grad():
            _, u = backbone.encode(Tensor(np.full((1, 3, config.crop, config.crop), 0.5, dtype=dtype)))
        project_gate_rows(bank, u.data[0])
    phi = PerceptualExtractor(seed=model_seed, dtype=dtype)
    return TrainState(config, backbone, bank, phi, AdamState(lr=config.lr), 0)


def batch_seed(config: TrainConfig, step: int) -> int:
    return derive_seed(config.seed, _KEY_BATCH, step)


def eval_seed(config: TrainConfig) -> int:
    return derive_seed(config.seed, _KEY_EVAL)


def training_batch(config: TrainConfig, step: int) -> list[SampleTriple]:
    return make_batch(
        config.tasks, config.batch_size, config.crop, batch_seed(config, step), config.gen_size, config.ranges, config.augment
    )


def stack_images(batch: list[SampleTriple], dtype) -> tuple[Tensor, Tensor]:
    d = np.stack([s.degraded.data for s in batch]).astype(dtype)
    c = np.stack([s.clean.data for s in batch]).astype(dtype)
    return Tensor(d), Tensor(c)


def learning_rate(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "cosine" and config.steps > 0:
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))
    return config.lr


def negative_plan(config: TrainConfig, step: int, tops: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Source row and forced expert for every negative of the batch, sample-major."""
    rows, experts = [], []
    for i, top in enumerate(tops):
        idx = sample_negative_indices(int(top), config.n_experts, config.m, derive_seed(config.seed, _KEY_NEG, step, i))
        rows.extend([i] * len(idx))
        experts.extend(idx)
    return np.asarray(rows, dtype=np.intp), np.asarray(experts, dtype=np.intp)


@dataclass
class Forward:
    terms: CprTerms
    decision: GateDecision
    restored: Tensor
    negatives: Tensor | None
    neg_rows: np.ndarray
    neg_experts: np.ndarray
    objective: Tensor | None = None  # what backward runs on; equals terms.total in value

    @property
    def loss(self) -> Tensor:
        return self.terms.total if self.objective is None else self.objective


def forward(state: TrainState, degraded: Tensor, clean: Tensor, step: int | None = None) -> Forward:
    """Batched forward pass of one training step, recorded on the tape.

    Each image is encoded once; the positive prompt and the ``m`` forced
    negative prompts per image are decoded together.
    """
    cfg = state.config
    step = state.step if step is None else step
    N = degraded.shape[0]
    feats, x = state.backbone.encode(degraded)
    decision = gate(x, state.bank, cfg.k, "exact" if cfg.gate_estimator == "counterfactual" else cfg.gate_estimator)
    p_pos = compose_prompt(decision, state.bank)
    neg_rows, neg_experts = negative_plan(cfg, step, decision.top) if cfg.m else (np.zeros(0, np.intp),) * 2

    if len(neg_rows):
        onehot = np.zeros((len(neg_rows), cfg.n_experts), dtype=p_pos.dtype)
        onehot[np.arange(len(neg_rows)), neg_experts] = 1.0
        p_neg = nx.matmul(Tensor(onehot), state.bank.experts)
        prompts = nx.concat([p_pos, p_neg], axis=0)
        rows = np.concatenate([np.arange(N), neg_rows])
        out = nx.add(nx.take(degraded, rows), state.backbone.decode(feats, prompts, rows))
        pos_idx = np.arange(N)
        restored = nx.take(out, pos_idx)
    else:
        out = restored = nx.add(degraded, state.backbone.decode(feats, p_pos))

    # scalar terms are combined in float64 so the logged identities hold to
    # double precision whatever the training dtype
    l_pixel = _f64(nx.l1_mean(nx.sub(restored, clean)))
    need_cpr = cfg.alpha > 0
    phi = state.phi
    with (_nullctx() if need_cpr else nx.no_grad()):
        phi_gt = phi(clean)
        if len(neg_rows):
            phi_all = phi(out)
            phi_pos = nx.take(phi_all, pos_idx)
            phi_neg = nx.take(phi_all, np.arange(N, N + len(neg_rows)))
            anchor = nx.detach(phi_pos) if cfg.neg_stop_gradient else phi_pos
            l_neg = negative_term(phi_neg, nx.take(anchor, neg_rows), cfg.neg_margin)
        else:
            phi_pos = phi(restored)
            l_neg = Tensor(np.zeros((), dtype=np.float64))
        l_pos = _f64(nx.l2_sq_mean(nx.sub(phi_pos, phi_gt)))
        l_neg = _f64(l_neg)
        l_cpr = nx.sub(l_pos, l_neg)
    if need_cpr:
        total = nx.add(l_pixel, nx.mul(l_cpr, float(cfg.alpha)))
    else:
        # the CPR terms above are logged only; nothing but the pixel loss is differentiated
        total = nx.add(l_pixel, nx.mul(nx.detach(l_cpr), 0.0))
    terms = CprTerms(l_pos, l_neg, l_cpr, l_pixel, total, cfg.alpha)
    negatives = nx.take(out, np.arange(N, N + len(neg_rows))) if len(neg_rows) else None
    objective = None
    if cfg.gate_estimator == "counterfactual" and len(neg_rows) and cfg.k < cfg.n_experts:
        # per-sample l1 of the positive and of each negative, as constants
        rows_all = np.concatenate([np.arange(N), neg_rows])
        err = np.abs(out.data - clean.data[rows_all]).reshape(len(rows_all), -1).mean(axis=1)
        m = len(neg_rows) // N
        candidates = np.concatenate([decision.top[:, None], neg_experts.reshape(N, m)], axis=1)
        losses = np.concatenate([err[:N, None], err[N:].reshape(N, m)], axis=1)
        if cfg.route_centering:
            losses = center_by_expert(candidates, losses, cfg.n_experts)
        surrogate = routing_surrogate if cfg.route_target == "expected" else routing_argmin_surrogate
        logits = decision.logits
        if cfg.route_feature_scale != 1.0:
            # same logits; the routing gradient reaching the encoder is scaled
            # (0 trains the gate only)
            xr = nx.detach(x)
            if cfg.route_feature_scale > 0:
                xr = nx.add(xr, nx.mul(nx.sub(x, nx.detach(x)), float(cfg.route_feature_scale)))
            logits = nx.matmul(xr, nx.transpose(state.bank.gate_w))
            logits = nx.add(logits, nx.broadcast_to(state.bank.gate_b, logits.shape))
        route = surrogate(logits, candidates, losses)
        # adds exactly zero to the value, only the gradient of ``route``
        objective = nx.add(total, _f64(nx.sub(route, nx.detach(route))))
    return Forward(terms, decision, restored, negatives, neg_rows, neg_experts, objective)


def center_by_expert(candidates: np.ndarray, losses: np.ndarray, n: int) -> np.ndarray:
    """Subtract from every loss the batch mean of the same expert's losses.

    What remains says which expert suits *this* sample better than it suits
    the batch on average, so an expert that is best everywhere does not
    attract every sample.
    """
    sums = np.bincount(candidates.ravel(), weights=losses.ravel(), minlength=n)
    counts = np.bincount(candidates.ravel(), minlength=n)
    means = sums / np.maximum(counts, 1)
    return losses - means[candidates]


def _f64(t: Tensor) -> Tensor:
    return t if t.dtype == np.float64 else nx.astype(t, np.float64)


class _nullctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def train_step(state: TrainState, batch: list[SampleTriple]) -> tuple[TrainState, CprTerms, list[GateDecision]]:
    """One update: forward on the batch, batch-mean loss, backward, Adam."""
    if not batch:
        raise ValueError("empty batch")
    cfg = state.config
    step = state.step + 1
    degraded, clean = stack_images(batch, np.dtype(cfg.dtype))
    state.zero_grad()
    try:
        fw = forward(state, degraded, clean, step)
    except NonFiniteError as exc:
        raise NonFiniteLoss(step, "forward", str(exc)) from exc
    terms = fw.terms
    for name, value in terms.as_dict().items():
        if not math.isfinite(value):
            raise NonFiniteLoss(step, name)
    nx.backward(fw.loss)
    if state.phi.has_grad():
        raise TrainingError("gradient reached the frozen perceptual extractor")
    params = state.params()
    scale = None if cfg.gate_lr_scale == 1.0 else {name: cfg.gate_lr_scale for name in GATE_PARAMS}
    nx.adam_update(state.adam, params, {k: p.grad for k, p in params.items()}, lr=learning_rate(cfg, step - 1), lr_scale=scale)
    state.zero_grad()
    state.step = step
    decisions = [fw.decision.sample(i) for i in range(len(batch))]
    return state, terms, decisions


def step_metrics(step: int, terms: CprTerms, decisions: list[GateDecision], batch: list[SampleTriple], n: int) -> dict:
    hist: dict[str, list[int]] = {}
    for d, s in zip(decisions, batch):
        row = hist.setdefault(s.task.value, [0] * n)
        row[int(d.top)] += 1
    rec = {"step": step}
    rec.update(terms.as_dict())
    rec["mean_entropy_bits"] = float(np.mean([d.entropy_bits for d in decisions]))
    rec["argmax_hist"] = {k: hist[k] for k in sorted(hist)}
    return rec


def gate_records(step: int, decisions: list[GateDecision], batch: list[SampleTriple]) -> list[dict]:
    out = []
    for i, (d, s) in enumerate(zip(decisions, batch)):
        rec = {"step": step, "sample": i, "task": s.task.value}
        rec.update(d.to_json())
        out.append(rec)
    return out


METRICS_FORMAT = {"format": "cpl-metrics", "version": 1}
GATE_LOG_FORMAT = {"format": "cpl-gate-log", "version": 1}


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def train_loop(
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    state: TrainState | None = None,
    stop_at: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run until ``config.steps`` (or ``stop_at``) updates have been applied.

    With ``out_dir`` the metrics log, the training gate log, periodic
    checkpoints and ``final.ckpt`` are written there. On resume the logs are
    appended, so an interrupted-then-resumed run leaves the same files as an
    uninterrupted one.
    """
    from .checkpoint import load_checkpoint, save_checkpoint, state_from_checkpoint

    config.validate()
    if resume is not None:
        state = state_from_checkpoint(load_checkpoint(resume), config)
    elif state is None:
        state = init_state(config)
    end = config.steps if stop_at is None else min(stop_at, config.steps)

    metrics_f = gate_f = None
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        metrics_f = open(out / "metrics.jsonl", mode)
        gate_f = open(out / "gate_log.jsonl", mode)
        if resume is None:
            metrics_f.write(_dumps(METRICS_FORMAT) + "\n")
            gate_f.write(_dumps(GATE_LOG_FORMAT) + "\n")
    metrics: list[dict] = []
    try:
        if out is not None and state.step == 0 and config.checkpoint_every:
            save_checkpoint(state, out / "ckpt_000000.ckpt")
        while state.step < end:
            batch = training_batch(config, state.step + 1)
            state, terms, decisions = train_step(state, batch)
            step = state.step
            if step % config.log_every == 0 or step == end:
                rec = step_metrics(step, terms, decisions, batch, config.n_experts)
                metrics.append(rec)
                if metrics_f:
                    metrics_f.write(_dumps(rec) + "\n")
                    for g in gate_records(step, decisions, batch):
                        gate_f.write(_dumps(g) + "\n")
                if on_step:
                    on_step(rec)
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(state, out / f"ckpt_{step:06d}.ckpt")
        if out is not None:
            save_checkpoint(state, out / "final.ckpt")
    except OSError as exc:
        raise OSError(f"I/O failure at step {state.step}: {exc}") from exc
    finally:
        for f in (metrics_f, gate_f):
            if f:
                f.close()
    return state, metrics
