"""Adaptive pull/push loss, its decay schedule, and the EMA-KL regularizer.

Per anchor sample i the loss pulls its prediction toward the close set A_i
and pushes it from the background set B_i, both weighted by 1 - d^gamma
where d is normalized prediction distance. A decaying factor lambda
balances the push term. A per-sample EMA of past predictions anchors a KL
regularizer. Retrieved predictions, the distance weights, and the EMA are
all treated as constants: gradients flow only through the anchor
prediction p_i.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError

PROB_FLOOR = 1e-12
SQRT2 = float(np.sqrt(2.0))


@dataclass
class EmaState:
    """Per-sample EMA of predictions q and the iteration of each row's last update.

    q starts at all zeros, so rows are not probability vectors early on;
    entries stay in [0, 1].
    """

    q: np.ndarray
    last_update_iter: np.ndarray

    @staticmethod
    def initial(n: int, class_count: int) -> "EmaState":
        return EmaState(
            q=np.zeros((n, class_count)),
            last_update_iter=np.full(n, -1, dtype=np.int64),
        )


@dataclass(frozen=True)
class LossBreakdown:
    """Batch loss components; total = pull + push + eta * reg."""

    l_ada_pull: float
    l_ada_push: float
    l_reg: float
    total: float
    lambda_used: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.total):
            raise FloatingPointError("non-finite loss total")


def prediction_distance(p_i: np.ndarray, p_j: np.ndarray) -> float:
    """Euclidean distance between prediction vectors scaled by its max sqrt(2)."""
    d = np.linalg.norm(np.asarray(p_i, float) - np.asarray(p_j, float)) / SQRT2
    return float(min(max(d, 0.0), 1.0))


def lambda_schedule(iteration: int, max_iter: int, beta: float) -> float:
    """lambda = (1 + 10*iteration/max_iter)^(-beta), decaying from 1."""
    if max_iter <= 0:
        raise ConfigError(f"max_iter must be positive, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter}]")
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    return float((1.0 + 10.0 * iteration / max_iter) ** (-beta))


def _weights(p_i: np.ndarray, others: np.ndarray, gamma: float) -> np.ndarray:
    """(1 - d^gamma) against each row of `others`, treated as constants."""
    d = np.linalg.norm(others - p_i, axis=-1) / SQRT2
    d = np.clip(d, 0.0, 1.0)
    return 1.0 - d ** gamma


def adaptive_loss(
    p_i: np.ndarray,
    close_preds: np.ndarray,
    background_preds: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[float, float, np.ndarray]:
    """Pull/push loss for one anchor and its gradient w.r.t. p_i.

    Returns (pull, push, grad) with pull = -sum_j w_ij p_i.p_j over the
    close set and push = lam * sum_k w_ik p_i.p_k over the background set.
    Weights and retrieved predictions are constants under the gradient.
    An empty close set is an error; an empty background set is a zero push.
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    p_i = np.asarray(p_i, dtype=np.float64)
    close_preds = np.asarray(close_preds, dtype=np.float64).reshape(-1, p_i.size)
    if close_preds.shape[0] == 0:
        raise ConfigError("close set A_i is empty; clusters must exist")
    w_close = _weights(p_i, close_preds, gamma)
    pull = -float(w_close @ (close_preds @ p_i))
    grad = -(w_close @ close_preds)

    background_preds = np.asarray(background_preds, dtype=np.float64).reshape(-1, p_i.size)
    if background_preds.shape[0] > 0:
        w_back = _weights(p_i, background_preds, gamma)
        push = lam * float(w_back @ (background_preds @ p_i))
        grad = grad + lam * (w_back @ background_preds)
    else:
        push = 0.0
    return pull, push, grad


def adaptive_loss_batch(
    p_live: np.ndarray,
    close_preds: np.ndarray,
    background_mask: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pull/push over a batch whose background sets live in-batch.

    p_live: (b, C) current predictions; close_preds: (b, h, C) retrieved
    constants; background_mask: (b, b) boolean, row i marking batch members
    of B_i. Background predictions are the detached rows of p_live.
    Returns (pull (b,), push (b,), grad (b, C)).
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    b, c = p_live.shape
    d_close = np.linalg.norm(close_preds - p_live[:, None, :], axis=2) / SQRT2
    w_close = 1.0 - np.clip(d_close, 0.0, 1.0) ** gamma
    pull = -np.einsum("bh,bhc,bc->b", w_close, close_preds, p_live)
    grad = -np.einsum("bh,bhc->bc", w_close, close_preds)

    d_back = np.linalg.norm(p_live[:, None, :] - p_live[None, :, :], axis=2) / SQRT2
    w_back = (1.0 - np.clip(d_back, 0.0, 1.0) ** gamma) * background_mask
    push = lam * np.einsum("bm,mc,bc->b", w_back, p_live, p_live)
    grad = grad + lam * np.einsum("bm,mc->bc", w_back, p_live)
    return pull, push, grad


def ema_update(state: EmaState, sample_index: int, p_current: np.ndarray,
               delta: float, iteration: int) -> np.ndarray:
    """q_i <- delta*q_i + (1-delta)*p_i, stamping the update iteration."""
    if not 0 <= delta < 1:
        raise ConfigError(f"delta must be in [0, 1), got {delta}")
    if iteration <= state.last_update_iter[sample_index]:
        raise ConfigError(
            f"EMA stamp must increase: sample {sample_index} already updated at "
            f"iteration {state.last_update_iter[sample_index]}"
        )
    state.q[sample_index] = delta * state.q[sample_index] + (1.0 - delta) * p_current
    state.last_update_iter[sample_index] = iteration
    return state.q[sample_index]


def ema_update_batch(state: EmaState, indices: np.ndarray, p_batch: np.ndarray,
                     delta: float, iteration: int) -> np.ndarray:
    """Row-wise EMA update for a batch of distinct sample indices."""
    if not 0 <= delta < 1:
        raise ConfigError(f"delta must be in [0, 1), got {delta}")
    if (state.last_update_iter[indices] >= iteration).any():
        raise ConfigError("EMA stamp must strictly increase for every batch sample")
    state.q[indices] = delta * state.q[indices] + (1.0 - delta) * p_batch
    state.last_update_iter[indices] = iteration
    return state.q[indices]


def kl_regularizer(q_row: np.ndarray, p: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(q || p) with q constant, p floored at 1e-12; 0*log 0 = 0.

    q need not be normalized (it starts at 0), so the value may be
    negative early in training. Gradient w.r.t. p is -q/p.
    """
    q_row = np.asarray(q_row, dtype=np.float64)
    p_safe = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    mask = q_row > 0
    value = float((q_row[mask] * np.log(q_row[mask] / p_safe[mask])).sum())
    grad = -q_row / p_safe
    return value, grad


def kl_regularizer_batch(q: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise KL(q || p) values and gradients for aligned batches."""
    p_safe = np.maximum(p, PROB_FLOOR)
    terms = np.where(q > 0, q * np.log(np.maximum(q, PROB_FLOOR) / p_safe), 0.0)
    return terms.sum(axis=1), -q / p_safe


def total_loss(pull_terms: np.ndarray, push_terms: np.ndarray,
               reg_terms: np.ndarray, eta: float, lambda_used: float) -> LossBreakdown:
    """Sum per-sample terms into a batch LossBreakdown with total included."""
    if eta < 0:
        raise ConfigError(f"eta must be >= 0, got {eta}")
    pull = float(np.sum(pull_terms))
    push = float(np.sum(push_terms))
    reg = float(np.sum(reg_terms))
    return LossBreakdown(
        l_ada_pull=pull,
        l_ada_push=push,
        l_reg=reg,
        total=pull + push + eta * reg,
        lambda_used=float(lambda_used),
    )
