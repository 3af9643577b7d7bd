"""Direct preference optimization on a tabular policy.

The policy is a [P x K] logit table: one categorical distribution over K
fixed candidate completions per prompt. The reference policy is a frozen
snapshot taken when training starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

PairIndex = tuple[int, int, int]  # (prompt row, chosen column, rejected column)


@dataclass(frozen=True)
class DPOConfig:
    beta: float = 0.1
    learning_rate: float = 0.01
    steps: int = 100

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be a positive finite number, got {self.beta}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


def _check_finite(*xs: float) -> None:
    if not all(math.isfinite(x) for x in xs):
        raise ValueError(f"DPO inputs must be finite, got {xs}")


def _softplus(x: float) -> float:
    # log(1 + e^x) without overflow
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def dpo_loss(lp_c: float, lp_r: float, lref_c: float, lref_r: float, beta: float) -> float:
    """-log sigmoid(beta * ((lp_c - lref_c) - (lp_r - lref_r)))."""
    _check_finite(lp_c, lp_r, lref_c, lref_r, beta)
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    margin = (lp_c - lref_c) - (lp_r - lref_r)
    return _softplus(-beta * margin)


def dpo_grad(lp_c: float, lp_r: float, lref_c: float, lref_r: float, beta: float) -> tuple[float, float]:
    """Partials of dpo_loss with respect to lp_c and lp_r."""
    _check_finite(lp_c, lp_r, lref_c, lref_r, beta)
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    margin = (lp_c - lref_c) - (lp_r - lref_r)
    s = _sigmoid(-beta * margin)
    return -beta * s, beta * s


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class TabularPolicy:
    logits: np.ndarray

    def __post_init__(self):
        arr = np.array(self.logits, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ValueError(f"logits must be a [P x K] matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    @classmethod
    def random(cls, n_prompts: int, n_candidates: int, seed: int = 0, scale: float = 1.0) -> "TabularPolicy":
        return cls(np.random.default_rng(seed).normal(0.0, scale, (n_prompts, n_candidates)))


def _check_pairs(pairs: Sequence[PairIndex], shape: tuple[int, int]) -> np.ndarray:
    idx = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    P, K = shape
    bad = (idx[:, 0] < 0) | (idx[:, 0] >= P) | (idx[:, 1] < 0) | (idx[:, 1] >= K) | (idx[:, 2] < 0) | (idx[:, 2] >= K)
    if bad.any():
        raise IndexError(f"pair indices out of range for a {P}x{K} policy: {idx[bad].tolist()}")
    return idx


def loss_and_grad(logits: np.ndarray, ref_log_probs: np.ndarray, pairs: Sequence[PairIndex], beta: float,
                  reduction: str = "mean") -> tuple[float, np.ndarray]:
    """Total or mean DPO loss over ``pairs`` and its gradient w.r.t. the logit table.

    Pairs are reduced in the given order so results are reproducible.
    """
    idx = _check_pairs(pairs, logits.shape)
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    p = np.exp(lp)
    grad = np.zeros_like(lp)
    total = 0.0
    for row, c, r in idx:
        total += dpo_loss(lp[row, c], lp[row, r], ref_log_probs[row, c], ref_log_probs[row, r], beta)
        g_c, g_r = dpo_grad(lp[row, c], lp[row, r], ref_log_probs[row, c], ref_log_probs[row, r], beta)
        # d log p_j / d logit_k = [j == k] - p_k
        grad[row] -= (g_c + g_r) * p[row]
        grad[row, c] += g_c
        grad[row, r] += g_r
    if reduction == "mean" and len(idx):
        total /= len(idx)
        grad /= len(idx)
    elif reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    return total, grad


def implicit_margins(policy: TabularPolicy, reference: TabularPolicy, pairs: Sequence[PairIndex], beta: float) -> np.ndarray:
    """beta * [(lp_c - lref_c) - (lp_r - lref_r)] for every pair."""
    idx = _check_pairs(pairs, policy.shape)
    lp, lr = policy.log_probs(), reference.log_probs()
    rows, c, r = idx[:, 0], idx[:, 1], idx[:, 2]
    return beta * ((lp[rows, c] - lr[rows, c]) - (lp[rows, r] - lr[rows, r]))


def mean_loss(policy: TabularPolicy, reference: TabularPolicy, pairs: Sequence[PairIndex], beta: float) -> float:
    return loss_and_grad(policy.logits, reference.log_probs(), pairs, beta)[0]


def train_dpo(policy: TabularPolicy, pairs: Sequence[PairIndex], cfg: DPOConfig,
              reference: TabularPolicy | None = None) -> tuple[TabularPolicy, list[float]]:
    """Full-batch gradient descent on the mean DPO loss.

    Returns the trained policy and the mean loss after each step.
    """
    _check_pairs(pairs, policy.shape)
    ref_lp = (reference or policy).log_probs()
    logits = policy.logits.copy()
    trace: list[float] = []
    for _ in range(cfg.steps):
        _, grad = loss_and_grad(logits, ref_lp, pairs, cfg.beta)
        logits -= cfg.learning_rate * grad
        trace.append(loss_and_grad(logits, ref_lp, pairs, cfg.beta)[0])
    return TabularPolicy(logits), trace


def numeric_grad(policy: TabularPolicy, reference: TabularPolicy, pairs: Sequence[PairIndex], beta: float,
                 eps: float = 1e-5) -> np.ndarray:
    """Central differences of the total loss w.r.t. every logit."""
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    ref_lp = reference.log_probs()
    base = policy.logits.copy()
    out = np.zeros_like(base)
    for i in np.ndindex(base.shape):
        hi, lo = base.copy(), base.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi = loss_and_grad(hi, ref_lp, pairs, beta, "sum")[0]
        f_lo = loss_and_grad(lo, ref_lp, pairs, beta, "sum")[0]
        out[i] = (f_hi - f_lo) / (2 * eps)
    return out


def finite_diff_check(policy: TabularPolicy, pairs: Sequence[PairIndex], cfg: DPOConfig, eps: float = 1e-5,
                      reference: TabularPolicy | None = None, floor: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
    near-zero components from dividing noise by noise.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    reference = reference or policy
    _, analytic = loss_and_grad(policy.logits, reference.log_probs(), pairs, cfg.beta, "sum")
    numeric = numeric_grad(policy, reference, pairs, cfg.beta, eps)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def index_pairs(pairs, candidates_by_prompt: dict[str, list[str]] | None = None):
    """Map PreferencePairs onto (row, chosen col, rejected col).

    Rows follow sorted prompt id; columns follow first appearance of each
    completion text within the prompt unless ``candidates_by_prompt`` fixes them.
    Returns (indices, mapping) where mapping records rows and columns.
    """
    cands: dict[str, list[str]] = {k: list(v) for k, v in (candidates_by_prompt or {}).items()}
    for p in pairs:
        col = cands.setdefault(p.prompt_id, [])
        for text in (p.chosen, p.rejected):
            if text not in col:
                col.append(text)
    prompt_ids = sorted(cands)
    K = max((len(v) for v in cands.values()), default=0)
    rows = {pid: i for i, pid in enumerate(prompt_ids)}
    idx = [(rows[p.prompt_id], cands[p.prompt_id].index(p.chosen), cands[p.prompt_id].index(p.rejected)) for p in pairs]
    mapping = {"prompts": prompt_ids, "candidates": {pid: cands[pid] for pid in prompt_ids}, "n_candidates": K}
    return idx, mapping
