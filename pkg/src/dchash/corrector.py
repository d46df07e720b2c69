"""Label reconstruction for the noisy set.

Each noisy instance is matched against the clean set by the inner product of
their center-score rows; the two highest-matching clean instances act as
donors.  If the donors carry identical labels the noisy instance adopts that
label (corrected set), otherwise it is demoted to unlabeled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ReconstructionResult:
    """Corrected/unlabeled split of a noisy set, with donor provenance.

    Index arrays refer to positions within the noisy set as given; donor
    indices refer to positions within the clean set.
    """

    corrected_idx: np.ndarray
    corrected_labels: np.ndarray
    unlabeled_idx: np.ndarray
    donors: dict[int, tuple[int, int]] = field(default_factory=dict)


def match_consistency(d_i: np.ndarray, D_c: np.ndarray) -> np.ndarray:
    """Raw dot products of a noisy score row against every clean score row."""
    D_c = np.atleast_2d(D_c)
    if D_c.shape[0] == 0:
        raise ValueError("clean set is empty: no donors available")
    return np.asarray(d_i, dtype=np.float64) @ D_c.T


def top2_donors(m_i: np.ndarray) -> tuple[int, int]:
    """Indices of the two largest entries, ties broken by lower index.

    With a single candidate both donor slots point at it (degenerate case:
    the lone donor's label is trusted).
    """
    m_i = np.asarray(m_i, dtype=np.float64)
    if m_i.size == 0:
        raise ValueError("no donor candidates")
    order = np.lexsort((np.arange(m_i.size), -m_i))
    if m_i.size == 1:
        return 0, 0
    return int(order[0]), int(order[1])


def reconstruct(D_noisy: np.ndarray, noisy_labels: np.ndarray, D_clean: np.ndarray, clean_labels: np.ndarray) -> ReconstructionResult:
    """Split a noisy set into corrected (donors agree) and unlabeled rows."""
    D_noisy = np.atleast_2d(D_noisy)
    n = D_noisy.shape[0]
    D_clean = np.atleast_2d(D_clean)
    if n == 0:
        return ReconstructionResult(
            corrected_idx=np.zeros(0, dtype=np.int64),
            corrected_labels=np.zeros((0, noisy_labels.shape[1] if noisy_labels.ndim == 2 else 0), dtype=np.uint8),
            unlabeled_idx=np.zeros(0, dtype=np.int64),
        )
    if D_clean.shape[0] == 0:
        # no donors anywhere: the whole noisy set becomes unlabeled
        return ReconstructionResult(
            corrected_idx=np.zeros(0, dtype=np.int64),
            corrected_labels=np.zeros((0, noisy_labels.shape[1]), dtype=np.uint8),
            unlabeled_idx=np.arange(n, dtype=np.int64),
        )
    corrected, labels_out, unlabeled, donors = [], [], [], {}
    for i in range(n):
        m_i = match_consistency(D_noisy[i], D_clean)
        j, k = top2_donors(m_i)
        donors[i] = (j, k)
        if np.array_equal(clean_labels[j], clean_labels[k]):
            corrected.append(i)
            labels_out.append(clean_labels[j])
        else:
            unlabeled.append(i)
    return ReconstructionResult(
        corrected_idx=np.asarray(corrected, dtype=np.int64),
        corrected_labels=(
            np.asarray(labels_out, dtype=np.uint8)
            if labels_out
            else np.zeros((0, clean_labels.shape[1]), dtype=np.uint8)
        ),
        unlabeled_idx=np.asarray(unlabeled, dtype=np.int64),
        donors=donors,
    )
