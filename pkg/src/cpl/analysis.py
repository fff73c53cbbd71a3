"""Evaluation metrics and routing diagnostics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0


class AnalysisError(ValueError):
    pass


def _as_array(img) -> np.ndarray:
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1], capped at 99 dB."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise AnalysisError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    if img.ndim == 3:
        return img.mean(axis=0)
    raise AnalysisError(f"expected H x W or C x H x W image, got {img.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained Gaussian windows of the grayscale
    (channel-mean) images."""
    x, y = _gray(_as_array(a)), _gray(_as_array(b))
    if x.shape != y.shape:
        raise AnalysisError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise AnalysisError(f"image {x.shape} smaller than the {window}x{window} window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    w = gaussian_window(window, sigma)
    half = window // 2

    def filt(z):
        return ndimage.correlate(z, w, mode="constant")[half:-half, half:-half]

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ---- gate logs ----------------------------------------------------------


def read_jsonl(path) -> list[dict]:
    """Records of a JSONL log, skipping a leading ``format`` header line."""
    recs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                recs.append(json.loads(line))
    if recs and "format" in recs[0]:
        recs = recs[1:]
    return recs


def entropy_report(records: list[dict]) -> dict[str, dict]:
    """Per-task mean and standard deviation of the per-sample gate entropy.

    Also reports the entropy of the task's averaged routing distribution,
    which is low only when the task is routed consistently.
    """
    if not records:
        raise AnalysisError("empty gate log")
    by_task: dict[str, list[dict]] = {}
    for r in records:
        by_task.setdefault(r["task"], []).append(r)
    from .spm import entropy_bits

    out = {}
    for task in sorted(by_task):
        rs = by_task[task]
        ent = np.array([r["entropy_bits"] for r in rs], dtype=np.float64)
        avg = np.mean([r["dense_probs"] for r in rs], axis=0)
        out[task] = {
            "count": len(rs),
            "mean_bits": float(ent.mean()),
            "std_bits": float(ent.std()),
            "avg_probs_bits": float(entropy_bits(avg)),
        }
    return out


def entropy_csv(report: dict[str, dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "count", "mean_bits", "std_bits", "avg_probs_bits"])
    for task, r in report.items():
        w.writerow([task, r["count"], f"{r['mean_bits']:.6f}", f"{r['std_bits']:.6f}", f"{r['avg_probs_bits']:.6f}"])
    return buf.getvalue()


@dataclass
class SelectionMap:
    tasks: list[str]
    assignment: np.ndarray  # tasks x experts, rows sum to 1
    grids: dict[str, np.ndarray]  # per task, samples x experts one-hot of the argmax

    def dominant(self) -> dict[str, tuple[int, float]]:
        return {t: (int(np.argmax(row)), float(row.max())) for t, row in zip(self.tasks, self.assignment)}

    def pixmap(self, cell: int = 8, row_px: int = 2) -> np.ndarray:
        """Grayscale raster: task blocks stacked vertically, one column block
        per expert, white where that expert is the argmax."""
        blocks = []
        for t in self.tasks:
            g = self.grids[t].astype(np.uint8) * 255
            blocks.append(np.kron(g, np.ones((row_px, cell), dtype=np.uint8)))
            blocks.append(np.full((row_px * 2, g.shape[1] * cell), 96, dtype=np.uint8))
        return np.concatenate(blocks[:-1], axis=0)


def selection_map(records: list[dict], samples_per_task: int = 100) -> SelectionMap:
    """Argmax routing of the last ``samples_per_task`` records of each task.

    Only the argmax of each ``dense_probs`` row is used, so any rescaling that
    preserves it leaves the map unchanged.
    """
    if not records:
        raise AnalysisError("empty gate log")
    by_task: dict[str, list] = {}
    for r in records:
        by_task.setdefault(r["task"], []).append(r["dense_probs"])
    n = len(records[0]["dense_probs"])
    tasks = sorted(by_task)
    grids, rows = {}, []
    for t in tasks:
        probs = np.asarray(by_task[t], dtype=np.float64)
        if len(probs) < samples_per_task:
            raise AnalysisError(f"task {t!r} has {len(probs)} samples, need {samples_per_task}")
        probs = probs[-samples_per_task:]
        grid = np.zeros((samples_per_task, n), dtype=bool)
        grid[np.arange(samples_per_task), np.argmax(probs, axis=1)] = True
        grids[t] = grid
        rows.append(grid.mean(axis=0))
    return SelectionMap(tasks, np.asarray(rows), grids)


# ---- model-level analysis --------------------------------------------------


def param_count(n_experts: int, backbone_config=None, *, state=None) -> dict[str, int]:
    """Backbone and prompt-bank parameter counts; the bank contributes
    ``n * (prompt_dim + feature_dim + 1)``."""
    if state is not None:
        bb, bank = state.backbone.param_count(), state.bank.param_count()
    else:
        from .backbone import BackboneConfig, init_params

        cfg = backbone_config or BackboneConfig()
        bb = sum(p.size for p in init_params(cfg, 0).values())
        bank = n_experts * (cfg.prompt_dim + cfg.feature_dim + 1)
    return {"backbone": int(bb), "bank": int(bank), "total": int(bb + bank)}


@dataclass
class TaskResidual:
    task: str
    count: int
    psnr_degraded: float
    psnr_matched: float
    ssim_matched: float
    psnr_identity: float
    psnr_forced: list  # per expert: mean PSNR over samples not routed to it, None if none
    min_gap_db: float | None
    mean_mismatch_gap_db: float | None
    dominant_expert: int
    dominant_freq: float
    mean_entropy_bits: float
    l1_matched: float


@dataclass
class EvalReport:
    step: int
    n_experts: int
    k: int
    tasks: list[TaskResidual] = field(default_factory=list)
    residual_max: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def task(self, name: str) -> TaskResidual:
        for t in self.tasks:
            if t.task == name:
                return t
        raise KeyError(name)

    @property
    def mean_l1(self) -> float:
        return float(np.mean([t.l1_matched for t in self.tasks]))

    @property
    def mean_gap_db(self) -> float:
        return float(np.mean([t.mean_mismatch_gap_db for t in self.tasks]))


def _restore_all(state, degraded, forced=None):
    from . import numerics as nx
    from .numerics import Tensor
    from .spm import compose_prompt, gate

    with nx.no_grad():
        feats, x = state.backbone.encode(Tensor(degraded))
        decision = gate(x, state.bank, state.config.k)
        if forced is None:
            prompt = compose_prompt(decision, state.bank)
        else:
            onehot = np.zeros((degraded.shape[0], state.bank.n), dtype=degraded.dtype)
            onehot[:, forced] = 1.0
            prompt = nx.matmul(Tensor(onehot), state.bank.experts)
        out = degraded + state.backbone.decode(feats, prompt).data
    return out, decision


def residual_analysis(state, samples: dict[str, list], mismatch: bool = True, residual_dir=None, batch: int = 20) -> EvalReport:
    """PSNR of matched routing against every forced single-expert override.

    ``samples`` maps task name to SampleTriples. For each forced expert j the
    mismatch PSNR is averaged over the samples whose matched top expert is
    not j. ``|I_matched - I_forced|`` images go to ``residual_dir`` as PPM
    files when given.
    """
    from .fileio import write_pixmap

    n = state.bank.n
    dtype = np.dtype(state.config.dtype)
    report = EvalReport(step=state.step, n_experts=n, k=state.config.k)
    for task, triples in samples.items():
        if not triples:
            raise AnalysisError(f"no samples for task {task!r}")
        deg = np.stack([s.degraded.data for s in triples]).astype(dtype)
        clean = np.stack([s.clean.data for s in triples]).astype(np.float64)
        outs, tops, ents = [], [], []
        for i in range(0, len(deg), batch):
            o, dec = _restore_all(state, deg[i : i + batch])
            outs.append(o)
            tops.append(dec.top)
            ents.append(dec.entropy_bits)
        out = np.concatenate(outs).astype(np.float64)
        top = np.concatenate(tops)
        restored = np.clip(out, 0.0, 1.0)
        p_match = np.array([psnr(r, c) for r, c in zip(restored, clean)])
        counts = np.bincount(top, minlength=n)
        forced_means, gaps, all_gaps = [None] * n, [], []
        if mismatch:
            for j in range(n):
                sel = np.flatnonzero(top != j)
                if not len(sel):
                    continue
                fo = np.concatenate([_restore_all(state, deg[sel[i : i + batch]], j)[0] for i in range(0, len(sel), batch)])
                forced_img = np.clip(fo.astype(np.float64), 0.0, 1.0)
                p_forced = np.array([psnr(f, clean[s]) for f, s in zip(forced_img, sel)])
                forced_means[j] = float(p_forced.mean())
                gaps.append(float(p_match[sel].mean() - p_forced.mean()))
                all_gaps.extend(p_match[sel] - p_forced)
                resid = np.abs(out[sel] - fo)
                report.residual_max[f"{task}/{j}"] = float(resid.max())
                if residual_dir is not None:
                    Path(residual_dir).mkdir(parents=True, exist_ok=True)
                    write_pixmap(Path(residual_dir) / f"residual_{task}_expert{j}.ppm", resid[0])
        report.tasks.append(
            TaskResidual(
                task=task,
                count=len(triples),
                psnr_degraded=float(np.mean([psnr(d, c) for d, c in zip(deg, clean)])),
                psnr_matched=float(p_match.mean()),
                ssim_matched=float(np.mean([ssim(r, c) for r, c in zip(restored, clean)])),
                psnr_identity=float(np.mean([psnr(o, d) for o, d in zip(out, deg)])),
                psnr_forced=forced_means,
                min_gap_db=min(gaps) if gaps else None,
                mean_mismatch_gap_db=float(np.mean(all_gaps)) if all_gaps else None,
                dominant_expert=int(np.argmax(counts)),
                dominant_freq=float(counts.max() / len(top)),
                mean_entropy_bits=float(np.mean(np.concatenate(ents))),
                l1_matched=float(np.mean(np.abs(out - clean))),
            )
        )
    return report
