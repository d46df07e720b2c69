"""Clean/noisy label separation from code-to-center similarity scores.

An instance whose multi-hot label agrees with the high/low pattern of its
code's cosine similarities to the category centers gets a high consistency
level; the lowest-consistency fraction of each batch is flagged as noisy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EPS_NORM = 1e-12


@dataclass
class PartitionResult:
    t: np.ndarray
    clean_idx: np.ndarray
    noisy_idx: np.ndarray
    threshold: float


def score_matrix(codes: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Cosine of every code against every center; zero-norm rows score 0."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    centers = np.asarray(centers, dtype=np.float64)
    cn = np.linalg.norm(codes, axis=1)
    zn = np.linalg.norm(centers, axis=1)
    D = (codes / np.where(cn > _EPS_NORM, cn, 1.0)[:, None]) @ (
        centers / np.where(zn > _EPS_NORM, zn, 1.0)[:, None]
    ).T
    D[cn <= _EPS_NORM, :] = 0.0
    D[:, zn <= _EPS_NORM] = 0.0
    return D


def consistency(D: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mean similarity score over each instance's labeled categories."""
    labels = np.asarray(labels, dtype=np.float64)
    counts = labels.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every label row must have at least one positive")
    return (D * labels).sum(axis=1) / counts


def partition(t: np.ndarray, tau: float) -> PartitionResult:
    """Flag exactly floor(tau * z) lowest-consistency instances as noisy.

    Ties on t are broken by flagging the lower batch index first.
    """
    if not (0.0 <= tau < 1.0):
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    t = np.asarray(t, dtype=np.float64)
    z = t.shape[0]
    n_noisy = int(np.floor(tau * z))
    order = np.lexsort((np.arange(z), t))  # ascending t, lower index first on ties
    noisy = np.sort(order[:n_noisy])
    clean = np.sort(order[n_noisy:])
    threshold = float(t[order[n_noisy - 1]]) if n_noisy > 0 else float("-inf")
    return PartitionResult(t=t, clean_idx=clean, noisy_idx=noisy, threshold=threshold)
