"""Adaptation loop: periodic hypergraph refresh, pull/push steps, metrics.

The trainer runs seeded epochs over the unlabeled target set. Every t_in
iterations (including iteration 0) it rebuilds the hypergraph from a full
forward pass and replaces the memory bank and per-node close sets. Each
step retrieves close-set predictions from the bank, forms the background
set from the rest of the batch, applies the pull/push objective plus the
EMA-KL regularizer, and takes one momentum-SGD step. Bank rows for the
batch are rewritten from a fresh forward pass after the step. The whole
run is a pure function of (datasets, config); checkpoints capture enough
state to resume bit-exactly.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import AdaptConfig, ConfigError
from .datagen import EmbeddingDataset
from .hypergraph import HypergraphArtifacts, build_artifacts, cosine_knn, normalized_entropy
from .model import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION_TRAINER,
    AdaptModel,
    CheckpointError,
    GradientSet,
    backward,
    forward,
    read_header,
    read_model_tensors,
    sgd_step,
)
from .objective import (
    EmaState,
    adaptive_loss_batch,
    ema_update_batch,
    kl_regularizer_batch,
    lambda_schedule,
    total_loss,
)


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss or gradient stops the run."""

    def __init__(self, message: str, iteration: int, checkpoint_path: Path | None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path


@dataclass
class MemoryBank:
    """Cached adapter features and predictions, one row per target sample."""

    features: np.ndarray
    predictions: np.ndarray
    refreshed_at: int

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.predictions.shape[0]:
            raise ConfigError("bank features and predictions disagree on sample count")
        sums = self.predictions.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ConfigError("bank prediction rows must sum to 1")


@dataclass(frozen=True)
class MetricsRecord:
    """One evaluation or training-iteration snapshot."""

    iteration: int
    total: float | None = None
    l_ada_pull: float | None = None
    l_ada_push: float | None = None
    l_reg: float | None = None
    lambda_used: float | None = None
    acc: float | None = None
    neighbor_agreement: float | None = None
    misleading_ratio: tuple[float, ...] | None = None

    def stream_dict(self) -> dict:
        """The fixed key set of the line-JSON metrics stream."""
        return {
            "iter": self.iteration,
            "total": self.total,
            "l_ada_pull": self.l_ada_pull,
            "l_ada_push": self.l_ada_push,
            "l_reg": self.l_reg,
            "lambda": self.lambda_used,
            "acc": self.acc,
            "neighbor_agreement": self.neighbor_agreement,
        }

    def full_dict(self) -> dict:
        out = self.stream_dict()
        out["misleading_ratio"] = (
            list(self.misleading_ratio) if self.misleading_ratio is not None else None
        )
        return out


@dataclass
class TrainerState:
    """Everything needed to resume a run exactly where it stopped."""

    model: AdaptModel
    velocity: GradientSet
    ema: EmaState
    bank: MemoryBank
    clusters: np.ndarray
    known_mask: np.ndarray
    iteration: int  # next iteration to execute
    refreshed_at: int


def iterations_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Seeded shuffle of target indices; pure function of (seed, epoch)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 71, epoch])))
    return rng.permutation(n)


def knn_safe_features(z: np.ndarray) -> np.ndarray:
    """Map zero-norm rows to an all-ones direction so cosine is defined.

    A sample whose adapter activations are all clipped to zero has no
    direction; such rows (rare) are grouped on a fixed constant vector.
    """
    norms = np.linalg.norm(z, axis=1)
    if (norms == 0).any():
        z = z.copy()
        z[norms == 0] = 1.0
    return z


def refresh_hypergraph(
    model: AdaptModel, target: EmbeddingDataset, cfg: AdaptConfig
) -> tuple[HypergraphArtifacts | None, MemoryBank, np.ndarray]:
    """Full forward pass, then hypergraph artifacts, bank, and close sets.

    With high_order disabled the hypergraph is skipped entirely and close
    sets fall back to plain cosine neighbors of the adapter features.
    """
    z, p = forward(model, target.features)
    z = knn_safe_features(z)
    if cfg.high_order:
        artifacts = build_artifacts(
            z, p, k=cfg.k, alpha=cfg.alpha, h=cfg.h, m_prime=cfg.m_prime,
            seed=cfg.seed, use_self_loops=cfg.use_self_loops,
        )
        clusters = artifacts.clusters
    else:
        artifacts = None
        clusters = cosine_knn(z, cfg.h)
    bank = MemoryBank(features=z, predictions=p, refreshed_at=0)
    return artifacts, bank, clusters


def open_set_split(predictions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two-means on per-sample normalized entropy; high cluster is unknown.

    Centroids start at the minimum and maximum entropy and Lloyd iterations
    run to convergence; ties assign to the lower centroid. If every entropy
    is identical the split degenerates to all-known.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    n = predictions.shape[0]
    if n < 2:
        raise ConfigError(f"open-set split needs at least 2 samples, got {n}")
    entropies = np.array([normalized_entropy(row) for row in predictions])
    lo, hi = float(entropies.min()), float(entropies.max())
    if lo == hi:
        return np.arange(n, dtype=np.int64), np.empty(0, dtype=np.int64)
    c0, c1 = lo, hi
    assign = None
    for _ in range(100):
        new_assign = np.abs(entropies - c1) < np.abs(entropies - c0)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        c0 = float(entropies[~assign].mean())
        c1 = float(entropies[assign].mean())
    known = np.flatnonzero(~assign).astype(np.int64)
    unknown = np.flatnonzero(assign).astype(np.int64)
    return known, unknown


def evaluate(
    model: AdaptModel,
    dataset: EmbeddingDataset,
    bank: MemoryBank | None = None,
    h: int = 3,
    iteration: int = 0,
) -> MetricsRecord:
    """Accuracy plus neighborhood diagnostics on a labeled dataset.

    neighbor_agreement: mean over samples of the fraction of their h
    nearest bank neighbors (cosine, self excluded) whose predicted label
    matches the sample's true label. misleading_ratio per class c: the
    fraction of class-c samples whose single nearest neighbor predicts a
    label other than c. Without a bank, fresh forward outputs stand in.
    """
    if dataset.labels is None:
        raise ConfigError("evaluation requires a labeled dataset")
    z, p = forward(model, dataset.features)
    if bank is None:
        feats, preds = knn_safe_features(z), p
    else:
        feats, preds = knn_safe_features(bank.features), bank.predictions
    acc = float(np.mean(p.argmax(axis=1) == dataset.labels))

    neighbor_idx = cosine_knn(feats, min(h, dataset.n - 1))
    neighbor_labels = preds.argmax(axis=1)[neighbor_idx]  # (n, h)
    agree = (neighbor_labels == dataset.labels[:, None]).mean(axis=1)
    neighbor_agreement = float(agree.mean())

    nearest_label = neighbor_labels[:, 0]
    misleading = []
    for c in range(dataset.class_count):
        members = dataset.labels == c
        if members.any():
            misleading.append(float((nearest_label[members] != c).mean()))
        else:
            misleading.append(0.0)
    return MetricsRecord(
        iteration=iteration,
        acc=acc,
        neighbor_agreement=neighbor_agreement,
        misleading_ratio=tuple(misleading),
    )


def _compute_known_mask(predictions: np.ndarray, cfg: AdaptConfig, n: int) -> np.ndarray:
    if not cfg.open_set:
        return np.ones(n, dtype=bool)
    known, _ = open_set_split(predictions)
    mask = np.zeros(n, dtype=bool)
    mask[known] = True
    return mask


def _background_mask(batch: np.ndarray, batch_clusters: np.ndarray) -> np.ndarray:
    """mask[i, m] marks batch member m as background for anchor i."""
    b = batch.size
    in_close = (batch_clusters[:, None, :] == batch[None, :, None]).any(axis=2)
    mask = ~in_close
    mask[np.arange(b), np.arange(b)] = False
    return mask


def adapt(
    model: AdaptModel,
    target: EmbeddingDataset,
    cfg: AdaptConfig,
    resume_from: TrainerState | None = None,
    stop_after: int | None = None,
    abort_path: str | Path | None = None,
    iteration_callback: Callable[[TrainerState, MetricsRecord], None] | None = None,
) -> tuple[AdaptModel, list[MetricsRecord], TrainerState]:
    """Run the adaptation loop; returns (model, new metrics, final state).

    `stop_after` limits how many iterations this call executes (for
    checkpoint/resume); `resume_from` continues a previous state under the
    same config and target. On a non-finite loss or gradient the last good
    state is saved to `abort_path` (when given) and TrainingAborted raises.
    """
    n = target.n
    if model.dim != target.dim:
        raise ConfigError(
            f"model expects dim {model.dim} but target has dim {target.dim}"
        )
    if n <= cfg.k - 1:
        raise ConfigError(f"target needs more than k-1={cfg.k - 1} samples, got {n}")
    if n <= cfg.h:
        raise ConfigError(f"target needs more than h={cfg.h} samples, got {n}")

    per_epoch = iterations_per_epoch(n, cfg.batch_size)
    max_iter = cfg.epochs * per_epoch

    if resume_from is not None:
        state = resume_from
        model = state.model
    else:
        _, bank, clusters = refresh_hypergraph(model, target, cfg)
        known_mask = _compute_known_mask(bank.predictions, cfg, n)
        state = TrainerState(
            model=model,
            velocity=GradientSet.zeros_like(model),
            ema=EmaState.initial(n, model.class_count),
            bank=bank,
            clusters=clusters,
            known_mask=known_mask,
            iteration=0,
            refreshed_at=0,
        )

    metrics: list[MetricsRecord] = []
    executed = 0
    labeled = target.labels is not None

    while state.iteration < max_iter:
        if stop_after is not None and executed >= stop_after:
            break
        t = state.iteration
        # iteration 0's refresh happens at state construction; afterwards a
        # refresh is due whenever t hits the interval and was not already done
        if t % cfg.t_in == 0 and t != state.refreshed_at:
            _, bank, clusters = refresh_hypergraph(state.model, target, cfg)
            bank.refreshed_at = t
            state.bank = bank
            state.clusters = clusters
            state.refreshed_at = t
            state.known_mask = _compute_known_mask(bank.predictions, cfg, n)

        epoch = t // per_epoch
        pos = t % per_epoch
        perm = epoch_permutation(cfg.seed, epoch, n)
        batch = perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        batch = batch[state.known_mask[batch]]

        if batch.size > 0:
            lam = lambda_schedule(t, max_iter, cfg.beta)
            x = target.features[batch]
            # captured so an abort can rewind the in-place EMA update and
            # checkpoint the exact pre-iteration state
            q_prev = state.ema.q[batch].copy()
            stamp_prev = state.ema.last_update_iter[batch].copy()
            try:
                z, p = forward(state.model, x)
                close_preds = state.bank.predictions[state.clusters[batch]]
                bg_mask = _background_mask(batch, state.clusters[batch])
                pull, push, grad_ada = adaptive_loss_batch(
                    p, close_preds, bg_mask, cfg.gamma, lam
                )
                q_rows = ema_update_batch(state.ema, batch, p, cfg.delta, t)
                reg_vals, grad_reg = kl_regularizer_batch(q_rows, p)
                breakdown = total_loss(pull, push, reg_vals, cfg.eta, lam)
                upstream = grad_ada + cfg.eta * grad_reg
                grads = backward(state.model, x, z, p, upstream)
                new_model, new_velocity = sgd_step(
                    state.model, grads, state.velocity, cfg.lr, cfg.momentum
                )
            except FloatingPointError as exc:
                state.ema.q[batch] = q_prev
                state.ema.last_update_iter[batch] = stamp_prev
                saved = None
                if abort_path is not None:
                    saved = Path(abort_path)
                    save_checkpoint(state, saved)
                raise TrainingAborted(
                    f"aborted at iteration {t}: {exc}", t, saved
                ) from exc
            state.model = new_model
            state.velocity = new_velocity
            z_post, p_post = forward(state.model, x)
            state.bank.features[batch] = knn_safe_features(z_post)
            state.bank.predictions[batch] = p_post
        else:
            lam = lambda_schedule(t, max_iter, cfg.beta)
            breakdown = total_loss(
                np.zeros(0), np.zeros(0), np.zeros(0), cfg.eta, lam
            )

        if labeled:
            snapshot = evaluate(state.model, target, state.bank, cfg.h, iteration=t)
            acc, agreement, mis = (
                snapshot.acc, snapshot.neighbor_agreement, snapshot.misleading_ratio
            )
        else:
            acc, agreement, mis = None, None, None
        record = MetricsRecord(
            iteration=t,
            total=breakdown.total,
            l_ada_pull=breakdown.l_ada_pull,
            l_ada_push=breakdown.l_ada_push,
            l_reg=breakdown.l_reg,
            lambda_used=breakdown.lambda_used,
            acc=acc,
            neighbor_agreement=agreement,
            misleading_ratio=mis,
        )
        metrics.append(record)
        state.iteration = t + 1
        executed += 1
        if iteration_callback is not None:
            iteration_callback(state, record)

    return state.model, metrics, state


def save_checkpoint(state: TrainerState, path: str | Path) -> None:
    """Version-2 checkpoint: model tensors plus full trainer state, atomic."""
    model = state.model
    n = state.bank.features.shape[0]
    h = state.clusters.shape[1]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION_TRAINER))
        fh.write(struct.pack("<III", model.dim, model.d_z, model.class_count))
        for t in model.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
        fh.write(struct.pack("<IIqq", n, h, state.iteration, state.refreshed_at))
        for t in state.velocity.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.ema.q, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.ema.last_update_iter, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(state.bank.features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.bank.predictions, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.clusters, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(state.known_mask, dtype="u1").tobytes())
    os.replace(tmp, path)


def _read_array(fh, dtype, shape, what: str) -> np.ndarray:
    count = int(np.prod(shape))
    itemsize = np.dtype(dtype).itemsize
    buf = fh.read(count * itemsize)
    if len(buf) != count * itemsize:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()


def load_checkpoint(path: str | Path) -> TrainerState:
    """Read a version-2 checkpoint back into a TrainerState."""
    with open(path, "rb") as fh:
        version, d, d_z, c = read_header(fh)
        if version != CHECKPOINT_VERSION_TRAINER:
            raise CheckpointError(
                f"checkpoint version {version} has no trainer state; expected "
                f"{CHECKPOINT_VERSION_TRAINER}"
            )
        model = read_model_tensors(fh, d, d_z, c)
        head = fh.read(struct.calcsize("<IIqq"))
        if len(head) != struct.calcsize("<IIqq"):
            raise CheckpointError("truncated checkpoint while reading trainer header")
        n, h, iteration, refreshed_at = struct.unpack("<IIqq", head)
        shapes = [(d, d_z), (d_z,), (d_z, c), (c,)]
        velocity = GradientSet(
            *(_read_array(fh, "<f8", s, "velocity tensor") for s in shapes)
        )
        q = _read_array(fh, "<f8", (n, c), "EMA state")
        stamps = _read_array(fh, "<i8", (n,), "EMA stamps")
        bank_feats = _read_array(fh, "<f8", (n, d_z), "bank features")
        bank_preds = _read_array(fh, "<f8", (n, c), "bank predictions")
        clusters = _read_array(fh, "<i8", (n, h), "clusters")
        known = _read_array(fh, "u1", (n,), "known mask").astype(bool)
        extra = fh.read(1)
        if extra:
            raise CheckpointError("trailing bytes after checkpoint payload")
    bank = MemoryBank(bank_feats, bank_preds, refreshed_at)
    return TrainerState(
        model=model,
        velocity=velocity,
        ema=EmaState(q, stamps),
        bank=bank,
        clusters=clusters,
        known_mask=known,
        iteration=iteration,
        refreshed_at=refreshed_at,
    )
