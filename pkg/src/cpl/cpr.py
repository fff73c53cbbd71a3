"""Contrastive prompt regularization.

The positive reconstruction is pulled toward the ground truth and the
reconstructions under mismatched prompts are pushed away from it, both in the
feature space of a frozen extractor. The pixel l1 term applies to the positive
reconstruction only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import Backbone
from .numerics import ShapeError, Tensor
from .spm import GateDecision, PromptBank, compose_prompt, override_gate, sample_negative_indices


class PerceptualExtractor:
    """Frozen, seeded stand-in for a pretrained perceptual network.

    Three stages of conv3x3 -> relu -> 2x2 average pool. The weights never
    require a gradient, so nothing accumulates in them.
    """

    def __init__(self, seed: int = 0, channels=(3, 8, 16, 32), dtype=np.float32, resolution: int | None = None):
        self.channels = tuple(channels)
        self.resolution = resolution
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(404,)))
        self.weights: list[tuple[Tensor, Tensor]] = []
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            w = rng.normal(size=(cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            b = rng.normal(size=cout) * 0.01
            self.weights.append((Tensor(w.astype(dtype)), Tensor(b.astype(dtype))))

    def __call__(self, img: Tensor) -> Tensor:
        return self.phi(img)

    def phi(self, img: Tensor) -> Tensor:
        if img.ndim not in (3, 4) or img.shape[-3] != self.channels[0]:
            raise ShapeError(f"extractor expects {self.channels[0]}-channel images, got {img.shape}")
        f = 2 ** (len(self.channels) - 1)
        H, W = img.shape[-2:]
        if H % f or W % f:
            raise ShapeError(f"image {H}x{W} not divisible by {f}")
        if self.resolution is not None and (H, W) != (self.resolution, self.resolution):
            raise ShapeError(f"extractor built for {self.resolution}px images, got {H}x{W}")
        h = img
        for w, b in self.weights:
            h = nx.avg_pool2(nx.relu(nx.conv2d(h, w, b)))
        return h

    def weight_bytes(self) -> bytes:
        return b"".join(w.data.tobytes() + b.data.tobytes() for w, b in self.weights)

    def has_grad(self) -> bool:
        return any(w.grad is not None or b.grad is not None or w.requires_grad or b.requires_grad for w, b in self.weights)


@dataclass
class CprTerms:
    l_pos: Tensor
    l_neg: Tensor
    l_cpr: Tensor
    l_pixel: Tensor
    total: Tensor
    alpha: float = 0.01

    def as_dict(self) -> dict[str, float]:
        return {
            "l_pixel": self.l_pixel.item(),
            "l_pos": self.l_pos.item(),
            "l_neg": self.l_neg.item(),
            "l_cpr": self.l_cpr.item(),
            "total": self.total.item(),
        }


def loss_pos(phi: PerceptualExtractor, restored_pos: Tensor, clean: Tensor) -> Tensor:
    if restored_pos.shape != clean.shape:
        raise ShapeError(f"positive {restored_pos.shape} vs ground truth {clean.shape}")
    return nx.l2_sq_mean(nx.sub(phi(restored_pos), phi(clean)))


def _neg_distances(phi_neg: Tensor, phi_anchor: Tensor) -> Tensor:
    """Per-negative mean squared feature distance, shape (count,)."""
    diff = nx.sub(phi_neg, phi_anchor)
    flat = nx.reshape(diff, (diff.shape[0], -1))
    return nx.mean(nx.power(flat, 2), axis=1)


def negative_term(phi_neg: Tensor, phi_anchor: Tensor, margin: float | None = None) -> Tensor:
    """Mean over negatives of their feature distance to the anchor; with
    ``margin`` each distance is capped at that value."""
    if margin is None:
        return nx.l2_sq_mean(nx.sub(phi_neg, phi_anchor))
    d = _neg_distances(phi_neg, phi_anchor)
    return nx.mean(nx.sub(d, nx.relu(nx.sub(d, float(margin)))))


def loss_neg(phi: PerceptualExtractor, negatives, restored_pos: Tensor, stop_gradient: bool = True, margin: float | None = None) -> Tensor:
    """Mean feature distance of each negative to the positive reconstruction.

    By default the positive is a constant target here, so this term moves only
    the negatives.
    """
    negatives = list(negatives)
    if not negatives:
        raise ValueError("loss_neg needs at least one negative reconstruction")
    for neg in negatives:
        if neg.shape != restored_pos.shape:
            raise ShapeError(f"negative {neg.shape} vs positive {restored_pos.shape}")
    pos = restored_pos if restored_pos.ndim == 4 else nx.reshape(restored_pos, (1,) + restored_pos.shape)
    negs = [n if n.ndim == 4 else nx.reshape(n, (1,) + n.shape) for n in negatives]
    anchor = phi(pos)
    if stop_gradient:
        anchor = nx.detach(anchor)
    stacked = nx.concat(negs, axis=0)
    reps = len(negs)
    anchor = nx.concat([anchor] * reps, axis=0)
    return negative_term(phi(stacked), anchor, margin)


def build_negatives(
    degraded: Tensor,
    decision: GateDecision,
    bank: PromptBank,
    backbone: Backbone,
    m: int,
    seed: int,
) -> list[Tensor]:
    """Reconstructions of one image under ``m`` forced, mismatched experts."""
    if decision.batched:
        raise ValueError("build_negatives works on a single-sample decision")
    idx = sample_negative_indices(int(decision.top), bank.n, m, seed)
    out = []
    for j in idx:
        prompt = compose_prompt(override_gate(decision, j), bank)
        out.append(backbone.restore(degraded, prompt))
    return out


def total_loss(
    phi: PerceptualExtractor,
    restored_pos: Tensor,
    clean: Tensor,
    negatives=(),
    alpha: float = 0.01,
    stop_gradient: bool = True,
    margin: float | None = None,
) -> CprTerms:
    """``l_pixel + alpha * (l_pos - l_neg)``; with no negatives l_neg is 0."""
    l_pixel = nx.l1_mean(nx.sub(restored_pos, clean))
    l_pos = loss_pos(phi, restored_pos, clean)
    negatives = list(negatives)
    if negatives:
        l_neg = loss_neg(phi, negatives, restored_pos, stop_gradient, margin)
    else:
        l_neg = Tensor(np.zeros((), dtype=restored_pos.dtype))
    l_cpr = nx.sub(l_pos, l_neg)
    total = nx.add(l_pixel, nx.mul(l_cpr, float(alpha)))
    return CprTerms(l_pos, l_neg, l_cpr, l_pixel, total, float(alpha))
