"""Sparse prompt module: a bank of prompt experts and a top-k gate over them."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

ESTIMATORS = ("exact", "straight_through")


class PromptBank:
    """``n`` prompt vectors of length ``prompt_dim`` plus the gate's affine map
    from pooled image features (length ``feature_dim``) to ``n`` logits."""

    def __init__(self, n: int = 5, prompt_dim: int = 32, feature_dim: int = 64, k: int = 1, seed: int = 0, dtype=np.float32, params=None):
        if not 1 <= k <= n:
            raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
        self.n, self.k = n, k
        self.prompt_dim, self.feature_dim = prompt_dim, feature_dim
        if params is None:
            rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(202,)))
            params = {
                "experts": rng.normal(0.0, 0.02, size=(n, prompt_dim)),
                "gate.w": rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(n, feature_dim)),
                "gate.b": np.zeros(n),
            }
            params = {name: Tensor(v.astype(dtype), requires_grad=True, name=name) for name, v in params.items()}
        self.params: dict[str, Tensor] = params
        if self.experts.shape != (n, prompt_dim) or self.gate_w.shape != (n, feature_dim) or self.gate_b.shape != (n,):
            raise ShapeError("prompt bank parameter shapes disagree with n / prompt_dim / feature_dim")

    @property
    def experts(self) -> Tensor:
        return self.params["experts"]

    @property
    def gate_w(self) -> Tensor:
        return self.params["gate.w"]

    @property
    def gate_b(self) -> Tensor:
        return self.params["gate.b"]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass(frozen=True)
class GateDecision:
    """Routing for one feature vector (1-d fields) or a batch (leading N axis).

    ``sparse_weights`` is a tensor that may sit on the tape; everything else is
    a plain snapshot.
    """

    dense_probs: np.ndarray
    retained: np.ndarray
    sparse_weights: Tensor
    entropy_bits: np.ndarray | float
    forced: np.ndarray | int | None = None
    logits: Tensor | None = None

    @property
    def batched(self) -> bool:
        return self.dense_probs.ndim == 2

    @property
    def top(self):
        """Index of the largest dense probability (lowest index on ties)."""
        return np.argmax(self.dense_probs, axis=-1)

    def __len__(self):
        return self.dense_probs.shape[0] if self.batched else 1

    def sample(self, i: int) -> "GateDecision":
        """Detached single-sample snapshot of row ``i`` of a batched decision."""
        if not self.batched:
            return self
        forced = None if self.forced is None else int(np.asarray(self.forced)[i])
        return GateDecision(
            self.dense_probs[i].copy(),
            self.retained[i].copy(),
            Tensor(self.sparse_weights.data[i].copy()),
            float(self.entropy_bits[i]),
            forced,
        )

    def to_json(self) -> dict:
        d = self.sample(0) if self.batched else self
        return {
            "dense_probs": [float(v) for v in d.dense_probs],
            "retained": [int(v) for v in d.retained],
            "entropy_bits": float(d.entropy_bits),
            "forced": d.forced,
        }


def entropy_bits(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in bits along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def top_k_mask(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean mask of the k largest entries per row and their indices.

    A stable sort on the negated values keeps lower indices first among ties.
    """
    order = np.argsort(-probs, axis=-1, kind="stable")
    retained = np.sort(order[..., :k], axis=-1)
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, retained, True, axis=-1)
    return mask, retained


def gate(x: Tensor, bank: PromptBank, k: int | None = None, estimator: str = "exact") -> GateDecision:
    """Top-k gating ``topk(softmax(W x + b))`` with renormalized survivors.

    With ``estimator='exact'`` the retained weights are the softmax over the
    retained logits and the mask is constant, so the gradient is the true
    derivative of the forward value. ``'straight_through'`` keeps that forward
    value but back-propagates as if the weights were the dense softmax, which
    gives the gate a learning signal even when k = 1. For k = n both coincide.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
    k = bank.k if k is None else k
    if not 1 <= k <= bank.n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={bank.n}")
    single = x.ndim == 1
    xb = nx.reshape(x, (1, x.shape[0])) if single else x
    if xb.ndim != 2 or xb.shape[1] != bank.feature_dim:
        raise ShapeError(f"gate expects features of length {bank.feature_dim}, got {x.shape}")
    logits = nx.matmul(xb, nx.transpose(bank.gate_w))
    logits = nx.add(logits, nx.broadcast_to(bank.gate_b, logits.shape))
    dense = nx.softmax(logits)
    probs = dense.data.astype(np.float64)
    mask, retained = top_k_mask(probs, k)
    nx.record_branch(mask)
    sparse = nx.masked_softmax(logits, mask)
    if estimator == "straight_through" and k < bank.n:
        sparse = nx.straight_through(sparse.data, dense)
    ent = entropy_bits(probs)
    if single:
        return GateDecision(probs[0], retained[0], nx.reshape(sparse, (bank.n,)), float(ent[0]), logits=nx.reshape(logits, (bank.n,)))
    return GateDecision(probs, retained, sparse, ent, logits=logits)


def compose_prompt(decision: GateDecision, bank: PromptBank) -> Tensor:
    """``p = sum_i w_i e_i`` for each row of gate weights."""
    w = decision.sparse_weights
    if w.shape[-1] != bank.n:
        raise ShapeError(f"decision has {w.shape[-1]} weights, bank has {bank.n} experts")
    if w.ndim == 1:
        return nx.reshape(nx.matmul(nx.reshape(w, (1, bank.n)), bank.experts), (bank.prompt_dim,))
    return nx.matmul(w, bank.experts)


def override_gate(decision: GateDecision, forced_index) -> GateDecision:
    """Replace the routing by a constant one-hot on ``forced_index``.

    The result carries no gradient path to the gate; ``dense_probs`` and the
    entropy are kept for logging.
    """
    n = decision.dense_probs.shape[-1]
    forced = np.asarray(forced_index, dtype=np.intp)
    expected = () if not decision.batched else (len(decision),)
    if forced.shape != expected:
        raise ShapeError(f"forced_index shape {forced.shape} does not match decision batch {expected}")
    if ((forced < 0) | (forced >= n)).any():
        raise IndexError(f"forced index {forced_index} out of range for {n} experts")
    if (forced == decision.top).any():
        raise ValueError("forced index equals the positive (top) selection")
    onehot = np.zeros(decision.dense_probs.shape, dtype=decision.sparse_weights.dtype)
    np.put_along_axis(onehot, forced[..., None], 1.0, axis=-1)
    return replace(
        decision,
        retained=forced[..., None].copy(),
        sparse_weights=Tensor(onehot),
        forced=int(forced) if forced.ndim == 0 else forced,
    )


def routing_surrogate(logits: Tensor, candidates: np.ndarray, losses: np.ndarray) -> Tensor:
    """``mean_b sum_j softmax(z_b restricted to C_b)_j * loss_bj``.

    ``candidates[b]`` lists the experts whose reconstruction of sample ``b``
    was actually evaluated and ``losses[b]`` their (constant) losses. The
    gradient with respect to the logits moves probability toward the
    candidates that restore best; used only as a gradient, never as a value.
    """
    candidates = np.asarray(candidates, dtype=np.intp)
    losses = np.asarray(losses, dtype=np.float64)
    if logits.ndim != 2 or candidates.shape != losses.shape or candidates.shape[0] != logits.shape[0]:
        raise ShapeError(f"logits {logits.shape}, candidates {candidates.shape}, losses {losses.shape}")
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, candidates, True, axis=-1)
    table = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(table, candidates, losses.astype(logits.dtype), axis=-1)
    q = nx.masked_softmax(logits, mask)
    return nx.mul(nx.sum_(nx.mul(q, Tensor(table))), 1.0 / logits.shape[0])


def routing_argmin_surrogate(logits: Tensor, candidates: np.ndarray, losses: np.ndarray) -> Tensor:
    """Linear surrogate whose gradient equals that of the cross-entropy
    between ``softmax(z restricted to C_b)`` and a one-hot on the candidate
    with the lowest loss: ``mean_b sum_j (q_bj - y_bj) z_bj`` with ``q - y``
    held constant. Used only as a gradient, never as a value.
    """
    candidates = np.asarray(candidates, dtype=np.intp)
    losses = np.asarray(losses, dtype=np.float64)
    if logits.ndim != 2 or candidates.shape != losses.shape or candidates.shape[0] != logits.shape[0]:
        raise ShapeError(f"logits {logits.shape}, candidates {candidates.shape}, losses {losses.shape}")
    N = logits.shape[0]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, candidates, True, axis=-1)
    with nx.no_grad():
        q = nx.masked_softmax(nx.detach(logits), mask).data
    y = np.zeros(logits.shape, dtype=logits.dtype)
    # ties go to the earliest candidate, i.e. the routed expert
    y[np.arange(N), candidates[np.arange(N), np.argmin(losses, axis=1)]] = 1.0
    coef = ((q - y) / N).astype(logits.dtype)
    return nx.sum_(nx.mul(logits, Tensor(coef)))


def project_gate_rows(bank: PromptBank, direction: np.ndarray) -> None:
    """Make every gate row orthogonal to ``direction`` (in place).

    Logits then ignore the component of the features along ``direction``.
    Used at init with the features of a flat image: without it, features of
    all inputs are nearly parallel to that vector and every sample routes to
    the same expert.
    """
    u = np.asarray(direction, dtype=np.float64).ravel()
    if u.shape != (bank.feature_dim,):
        raise ShapeError(f"direction must have length {bank.feature_dim}, got {u.shape}")
    norm = np.linalg.norm(u)
    if not norm > 0:
        raise ValueError("direction must be nonzero")
    u = u / norm
    w = bank.gate_w.data.astype(np.float64)
    bank.gate_w.data = (w - np.outer(w @ u, u)).astype(bank.gate_w.dtype)


def sample_negative_indices(positive_index: int, n: int, m: int, seed: int) -> list[int]:
    """``m`` distinct expert indices other than ``positive_index``, uniformly
    without replacement."""
    if m < 0 or m > n - 1:
        raise ValueError(f"need 0 <= m <= n - 1, got m={m}, n={n}")
    if not 0 <= positive_index < n:
        raise IndexError(f"positive index {positive_index} out of range for {n} experts")
    others = np.array([i for i in range(n) if i != positive_index])
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(303,)))
    return [int(i) for i in rng.permutation(others)[:m]]
