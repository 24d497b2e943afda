"""Quantitative evaluation: pooled global-mean correlation against ground
truth, feature pooling + k-means clustering with NMI/silhouette scoring,
and one-step-ahead reconstruction reports.

Everything here is pure numpy and deterministic under the given seeds;
the clustering metrics pin one convention each (NMI normalized by the
arithmetic mean of entropies, silhouette on Euclidean distances,
restart ties broken toward the lowest restart index).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (DegenerateVariance, IndexOutOfRange, InvalidK,
                     LengthMismatch, SingleCluster)
from .models import Checkpoint, LatentExtraction, predict_sequence


@dataclass
class CorrReport:
    """Pooled Pearson correlations of extracted vs true latent dimensions
    and their max-|rho| summary (in [0, 1], sign/permutation invariant)."""

    rho_matrix: np.ndarray          # (D_true, D_hat)
    rho_hat: float
    d_true: int
    d_hat: int
    n_seq: int
    t_steps: int

    def to_json_dict(self) -> dict:
        return {"rho_matrix": self.rho_matrix.tolist(),
                "rho_hat": self.rho_hat,
                "d_true": self.d_true, "d_hat": self.d_hat,
                "n_seq": self.n_seq, "t_steps": self.t_steps}


@dataclass
class ClusterReport:
    nmi: float
    silhouette: float
    k: int
    feature_spec: str
    labels: np.ndarray

    def to_json_dict(self) -> dict:
        return {"nmi": self.nmi, "silhouette": self.silhouette, "k": self.k,
                "feature_spec": self.feature_spec,
                "labels": self.labels.tolist()}


def global_mean_corr(z_true: np.ndarray, z_hat: np.ndarray) -> CorrReport:
    """Pearson correlations pooled over sequences and time with global
    means; summary is the per-true-dimension max of |rho|, averaged."""
    z_true = np.asarray(z_true, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_true.ndim != 3 or z_hat.ndim != 3 or z_true.shape[:2] != z_hat.shape[:2]:
        raise ValueError(f"need matching (N,T,.) tensors, got {z_true.shape} "
                         f"vs {z_hat.shape}")
    n, t, d = z_true.shape
    dh = z_hat.shape[2]
    a = z_true.reshape(n * t, d)
    b = z_hat.reshape(n * t, dh)
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    if np.any(na == 0.0):
        raise DegenerateVariance(
            f"constant true dimension(s): {np.where(na == 0.0)[0].tolist()}")
    if np.any(nb == 0.0):
        raise DegenerateVariance(
            f"constant extracted dimension(s): {np.where(nb == 0.0)[0].tolist()}")
    rho = (a.T @ b) / np.outer(na, nb)
    rho_hat = float(np.mean(np.max(np.abs(rho), axis=1)))
    return CorrReport(rho, rho_hat, d, dh, n, t)


def pool_features(extraction: LatentExtraction) -> np.ndarray:
    """Per-sequence features: time-mean and time-std of the shared-state
    means, concatenated (length 2 * dz0). Permutation-invariant in time."""
    z = np.asarray(extraction.z0_mean, dtype=np.float64)
    if z.size == 0:
        raise ValueError("empty extraction")
    return np.concatenate([z.mean(axis=1), z.std(axis=1)], axis=1)


def pca_sequence_features(x1: np.ndarray, x2: np.ndarray,
                          n_components: int) -> np.ndarray:
    """Raw-data baseline features: principal-component scores of the
    flattened paired sequences (one sample per sequence)."""
    x = np.concatenate([np.asarray(x1, dtype=np.float64),
                        np.asarray(x2, dtype=np.float64)], axis=2)
    n = x.shape[0]
    flat = x.reshape(n, -1)
    flat = flat - flat.mean(axis=0)
    u, s, _ = np.linalg.svd(flat, full_matrices=False)
    k = min(n_components, s.size)
    scores = u[:, :k] * s[:k]
    # deterministic sign: largest-|score| entry positive per component
    for col in scores.T:
        j = np.argmax(np.abs(col))
        if col[j] < 0:
            col *= -1.0
    return scores


def lloyd(features: np.ndarray, k: int, rng: np.random.Generator,
          max_iter: int = 200):
    """One Lloyd run from a random distinct-point init.

    Returns (labels, inertia, inertia_history); the history is
    non-increasing across iterations.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    centers = x[rng.choice(n, size=k, replace=False)].copy()
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # deterministic recovery: move to the farthest point
                far = int(d2[np.arange(n), labels].argmax())
                centers[j] = x[far]
    return labels, history[-1], history


def kmeans(features: np.ndarray, k: int, seed: int = 0,
           restarts: int = 10) -> np.ndarray:
    """Best-of-restarts Lloyd's algorithm; deterministic under seed, ties
    between restarts go to the lowest restart index."""
    x = np.asarray(features, dtype=np.float64)
    if k < 2:
        raise InvalidK(f"k must be >= 2, got {k}")
    if x.ndim != 2 or x.shape[0] < k:
        raise InvalidK(f"need at least k={k} samples, got {x.shape}")
    best_labels, best_inertia = None, np.inf
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
        labels, inertia, _ = lloyd(x, k, rng)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels


def nmi(labels_true, labels_pred) -> float:
    """Mutual information normalized by the arithmetic mean of the two
    label entropies; in [0, 1]."""
    lt = np.asarray(labels_true).ravel()
    lp = np.asarray(labels_pred).ravel()
    if lt.shape != lp.shape:
        raise LengthMismatch(f"label lengths differ: {lt.shape} vs {lp.shape}")
    n = lt.size
    if n < 2:
        raise LengthMismatch("need at least 2 samples")
    _, ti = np.unique(lt, return_inverse=True)
    _, pi = np.unique(lp, return_inverse=True)
    kt, kp = ti.max() + 1, pi.max() + 1
    contingency = np.zeros((kt, kp))
    np.add.at(contingency, (ti, pi), 1.0)
    pij = contingency / n
    pt = pij.sum(axis=1)
    pp = pij.sum(axis=0)
    nz = pij > 0
    mi = float(np.sum(pij[nz] * (np.log(pij[nz])
                                 - np.log(np.outer(pt, pp))[nz])))
    h_t = -float(np.sum(pt[pt > 0] * np.log(pt[pt > 0])))
    h_p = -float(np.sum(pp[pp > 0] * np.log(pp[pp > 0])))
    denom = 0.5 * (h_t + h_p)
    if denom == 0.0:
        return 1.0  # both labelings are constant, hence identical partitions
    return float(np.clip(mi / denom, 0.0, 1.0))


def silhouette(features: np.ndarray, labels) -> float:
    """Mean of (b - a) / max(a, b) over samples, Euclidean distances;
    singleton clusters score 0."""
    x = np.asarray(features, dtype=np.float64)
    lab = np.asarray(labels).ravel()
    if lab.shape[0] != x.shape[0]:
        raise LengthMismatch("features/labels length mismatch")
    uniq = np.unique(lab)
    if len(uniq) < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        same = lab == lab[i]
        n_same = same.sum()
        if n_same <= 1:
            scores[i] = 0.0
            continue
        a = dist[i, same].sum() / (n_same - 1)
        b = min(dist[i, lab == c].mean() for c in uniq if c != lab[i])
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def recon_report(ckpt: Checkpoint, ds, seq_index: int, dims: Sequence[int],
                 stream: int = 1, pred_stage: Optional[str] = None):
    """Per-step actual/mean/std rows for selected observation dims of one
    sequence, plus the fraction of rows within mean +- 2 std.

    Returns (rows, coverage); rows are dicts with keys t, dim, actual,
    mean, std and entry t predicts the step-t observation from its prefix.
    """
    if not 0 <= seq_index < ds.n_seq:
        raise IndexOutOfRange(f"sequence {seq_index} outside 0..{ds.n_seq - 1}")
    obs = ds.x1 if stream == 1 else ds.x2
    d = obs.shape[2]
    dims = list(dims)
    for dim in dims:
        if not 0 <= dim < d:
            raise IndexOutOfRange(f"dim {dim} outside 0..{d - 1}")
    m1, s1, m2, s2 = predict_sequence(ckpt, ds.x1[seq_index], ds.x2[seq_index],
                                      stage=pred_stage)
    mean, std = (m1, s1) if stream == 1 else (m2, s2)
    rows = []
    hits = 0
    for s in range(mean.shape[0]):
        for dim in dims:
            actual = float(obs[seq_index, s + 1, dim])
            mu, sd = float(mean[s, dim]), float(std[s, dim])
            rows.append({"t": s + 1, "dim": dim, "actual": actual,
                         "mean": mu, "std": sd})
            hits += abs(actual - mu) <= 2.0 * sd
    coverage = hits / len(rows)
    return rows, coverage


def prediction_coverage(ckpt: Checkpoint, ds, max_seqs: Optional[int] = None,
                        pred_stage: Optional[str] = None) -> float:
    """Fraction of held-out observation components (both streams, all
    dims, all predicted steps) inside the mean +- 2 std band."""
    n = ds.n_seq if max_seqs is None else min(max_seqs, ds.n_seq)
    hits = 0
    total = 0
    for i in range(n):
        m1, s1, m2, s2 = predict_sequence(ckpt, ds.x1[i], ds.x2[i],
                                          stage=pred_stage)
        a1 = ds.x1[i, 1:].astype(np.float64)
        a2 = ds.x2[i, 1:].astype(np.float64)
        hits += int(np.sum(np.abs(a1 - m1) <= 2.0 * s1))
        hits += int(np.sum(np.abs(a2 - m2) <= 2.0 * s2))
        total += a1.size + a2.size
    return hits / total
