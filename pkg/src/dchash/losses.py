"""The five training loss terms, their gradients, and feature augmentation.

Terms operate on relaxed codes and the center matrix:
  - pointwise: softmax-style pull of clean codes toward their category centers
  - pairwise: cosine-vs-label-similarity squared error on corrected instances
  - contrastive: original/augmented code agreement for unlabeled instances
  - center: pushes category centers apart (mean + minimum pair distance)
  - quantization: gap between relaxed codes and their sign binarization

Gradient functions return dL/d(codes) (and dL/d(centers) where relevant) so
the network backprop can be applied once per forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS_NORM = 1e-12


def _sgn(v: np.ndarray) -> np.ndarray:
    # same tie rule as model.binarize: sgn(0) := +1
    return np.where(np.asarray(v, dtype=np.float64) >= 0.0, 1.0, -1.0)


@dataclass
class LossSpec:
    """Weights and knobs for the combined objective.

    total = w_o * pointwise + alpha * pairwise + beta * contrastive
          + gamma * center + eta * quantization
    ``w_o`` defaults to 1 and exists so single terms can be isolated in tests.
    ``normalization``: "batch-mean" divides pairwise by n_r^2 and quantization
    by the batch size; "paper-literal" keeps raw sums.  ``cosine_mode``:
    "normalized" is the true cosine; "paper-literal" uses (1/k) dot.
    """

    alpha: float = 1.0
    beta: float = 0.15
    gamma: float = 5.0
    eta: float = 1.0
    w_o: float = 1.0
    eps_sim: float = 0.1
    sigma: float = 0.1
    p_mask: float = 0.1
    normalization: str = "batch-mean"
    cosine_mode: str = "normalized"

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "eta", "w_o"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if not (-1.0 <= self.eps_sim < 1.0):
            raise ValueError(f"eps_sim must be in [-1, 1), got {self.eps_sim}")
        if self.normalization not in ("batch-mean", "paper-literal"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.cosine_mode not in ("normalized", "paper-literal"):
            raise ValueError(f"unknown cosine_mode {self.cosine_mode!r}")


@dataclass
class LossBreakdown:
    pointwise: float = 0.0
    pairwise: float = 0.0
    contrastive: float = 0.0
    center: float = 0.0
    quantization: float = 0.0
    total: float = 0.0
    n_clean: int = 0
    n_corrected: int = 0
    n_unlabeled: int = 0


@dataclass
class TrainingBatch:
    """One mini-batch with its clean/corrected/unlabeled partition.

    ``labels`` holds the labels actually used per row (corrected rows carry
    their donor label).  ``x_aug``/``y_aug`` are augmented features for the
    unlabeled rows, aligned with ``unlabeled_idx``.
    """

    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray
    clean_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    corrected_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unlabeled_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    x_aug: np.ndarray | None = None
    y_aug: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.x.shape[0]


# --- cosine helpers ---------------------------------------------------------

def _unit_rows(B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows scaled to unit norm; zero-norm rows map to zero (guarded cosine)."""
    norms = np.linalg.norm(B, axis=1)
    safe = np.where(norms > _EPS_NORM, norms, 1.0)
    U = B / safe[:, None]
    U[norms <= _EPS_NORM] = 0.0
    return U, norms


def cosine_matrix(A: np.ndarray, B: np.ndarray, mode: str = "normalized", k: int | None = None) -> np.ndarray:
    if mode == "paper-literal":
        kk = A.shape[1] if k is None else k
        return (A @ B.T) / kk
    Ua, _ = _unit_rows(A)
    Ub, _ = _unit_rows(B)
    return Ua @ Ub.T


# --- pointwise (clean set) --------------------------------------------------

def pointwise_loss(B: np.ndarray, labels: np.ndarray, C: np.ndarray) -> float:
    return _pointwise(B, labels, C, want_grads=False)[0]


def _pointwise(B, labels, C, want_grads):
    n_c = B.shape[0]
    if n_c == 0:
        return 0.0, None, None
    k = B.shape[1]
    Z = (B @ C.T) / k  # (n_c, m) logits
    L = labels.astype(bool)
    total = 0.0
    G = np.zeros_like(Z) if want_grads else None
    for i in range(n_c):
        pos = np.flatnonzero(L[i])
        neg = np.flatnonzero(~L[i])
        if pos.size == 0:
            raise ValueError(f"clean row {i} has an empty label")
        if neg.size == 0:
            continue  # ratio is exactly 1, zero loss and gradient
        zneg = Z[i, neg]
        zmax = zneg.max()
        expn = np.exp(zneg - zmax)
        s_neg = zmax + np.log(expn.sum())  # logsumexp over negatives
        delta = s_neg - Z[i, pos]
        total += np.sum(np.logaddexp(0.0, delta))  # log(1 + e^{s_neg - z_pos})
        if want_grads:
            a = 1.0 / (1.0 + np.exp(delta))  # p(positive beats negatives)
            G[i, pos] += a - 1.0
            w = expn / expn.sum()
            G[i, neg] += (1.0 - a).sum() * w
    value = total / n_c
    if not want_grads:
        return value, None, None
    scale = 1.0 / (n_c * k)
    return value, scale * (G @ C), scale * (G.T @ B)


# --- pairwise (corrected set) ------------------------------------------------

def pairwise_loss(B: np.ndarray, S: np.ndarray, spec: LossSpec) -> float:
    return _pairwise(B, S, spec, want_grads=False)[0]


def _pairwise(B, S, spec, want_grads):
    n_r = B.shape[0]
    if n_r < 2:
        return 0.0, None
    norm = 1.0 / (n_r * n_r) if spec.normalization == "batch-mean" else 1.0
    if spec.cosine_mode == "paper-literal":
        k = B.shape[1]
        cosM = (B @ B.T) / k
        E = cosM - S
        value = norm * float(np.sum(E * E))
        if not want_grads:
            return value, None
        return value, (4.0 * norm / k) * (E @ B)
    U, norms = _unit_rows(B)
    cosM = U @ U.T
    E = cosM - S
    value = norm * float(np.sum(E * E))
    if not want_grads:
        return value, None
    safe = np.where(norms > _EPS_NORM, norms, 1.0)
    dB = 4.0 * norm * ((E @ U) - (E * cosM).sum(axis=1)[:, None] * U) / safe[:, None]
    dB[norms <= _EPS_NORM] = 0.0
    return value, dB


# --- contrastive (unlabeled set) ---------------------------------------------

def contrastive_loss(B: np.ndarray, B_aug: np.ndarray, spec: LossSpec) -> float:
    return _contrastive(B, B_aug, spec, want_grads=False)[0]


def _contrastive(B, B_aug, spec, want_grads):
    n_u = B.shape[0]
    if n_u == 0:
        return 0.0, None, None
    S = cosine_matrix(B, B_aug, spec.cosine_mode)
    diag = np.diag(S)
    off = S - np.diag(np.diag(S))
    hinge = np.maximum(0.0, off - spec.eps_sim)
    np.fill_diagonal(hinge, 0.0)
    value = float(np.mean(1.0 - diag) + hinge.sum() / (n_u * n_u))
    if not want_grads:
        return value, None, None
    # weight on each s_ij: -1/n on the diagonal, 1/n^2 on active hinge pairs
    W = np.where(hinge > 0.0, 1.0 / (n_u * n_u), 0.0)
    np.fill_diagonal(W, -1.0 / n_u)
    if spec.cosine_mode == "paper-literal":
        k = B.shape[1]
        return value, (W @ B_aug) / k, (W.T @ B) / k
    U, normsB = _unit_rows(B)
    V, normsV = _unit_rows(B_aug)
    safeB = np.where(normsB > _EPS_NORM, normsB, 1.0)
    safeV = np.where(normsV > _EPS_NORM, normsV, 1.0)
    dB = ((W @ V) - (W * S).sum(axis=1)[:, None] * U) / safeB[:, None]
    dV = ((W.T @ U) - (W * S).sum(axis=0)[:, None] * V) / safeV[:, None]
    dB[normsB <= _EPS_NORM] = 0.0
    dV[normsV <= _EPS_NORM] = 0.0
    return value, dB, dV


# --- center separation --------------------------------------------------------

def center_loss(C: np.ndarray) -> float:
    return _center(C, want_grads=False)[0]


def _center(C, want_grads):
    m = C.shape[0]
    if m < 2:
        return 0.0, None
    diffs = C[:, None, :] - C[None, :, :]
    d2 = np.sum(diffs * diffs, axis=2)
    iu, ju = np.triu_indices(m, k=1)
    pair_d2 = d2[iu, ju]
    n_pairs = pair_d2.size
    amin = int(np.argmin(pair_d2))  # first minimum: deterministic tie rule
    value = float(-pair_d2.mean() - pair_d2[amin])
    if not want_grads:
        return value, None
    G = -(2.0 / n_pairs) * (m * C - C.sum(axis=0))
    a, b = int(iu[amin]), int(ju[amin])
    G[a] -= 2.0 * (C[a] - C[b])
    G[b] += 2.0 * (C[a] - C[b])
    return value, G


# --- quantization ---------------------------------------------------------------

def quantization_loss(B: np.ndarray, spec: LossSpec) -> float:
    return _quantization(B, spec, want_grads=False)[0]


def _quantization(B, spec, want_grads):
    n = B.shape[0]
    if n == 0:
        return 0.0, None
    norm = 1.0 / n if spec.normalization == "batch-mean" else 1.0
    gap = B - _sgn(B)  # binarization is gradient-blocked
    value = norm * float(np.sum(gap * gap))
    if not want_grads:
        return value, None
    return value, 2.0 * norm * gap


# --- augmentation ----------------------------------------------------------------

def augment(x: np.ndarray, y: np.ndarray, sigma: float, p_mask: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Feature-space augmentation: scaled Gaussian noise then random zero-masking.

    Noise scale per dimension is ``sigma`` times that dimension's std over the
    given rows; each coordinate is zeroed independently with probability
    ``p_mask``.  Deterministic given the seed.
    """
    if sigma < 0 or not (0.0 <= p_mask < 1.0):
        raise ValueError(f"invalid augmentation config sigma={sigma}, p_mask={p_mask}")
    rng = np.random.default_rng(seed)
    out = []
    for feat in (x, y):
        feat = np.asarray(feat, dtype=np.float64)
        aug = feat.copy()
        if sigma > 0:
            scale = sigma * feat.std(axis=0)
            aug = aug + scale * rng.standard_normal(feat.shape)
        if p_mask > 0:
            aug = np.where(rng.random(feat.shape) < p_mask, 0.0, aug)
        out.append(aug)
    return out[0], out[1]


# --- combined objective ------------------------------------------------------------

def total_loss_and_grads(codes, codes_aug, C, batch: TrainingBatch, spec: LossSpec, want_grads: bool = True):
    """Eq-by-term composition over the batch partition.

    Returns (breakdown, d_codes, d_codes_aug, d_centers); the gradient outputs
    are None when want_grads is False.  Empty partitions contribute zero loss
    and zero gradient.
    """
    from dchash.dataset import pairwise_label_similarity

    z = codes.shape[0]
    bd = LossBreakdown(
        n_clean=len(batch.clean_idx),
        n_corrected=len(batch.corrected_idx),
        n_unlabeled=len(batch.unlabeled_idx),
    )
    d_codes = np.zeros_like(codes) if want_grads else None
    d_centers = np.zeros_like(C) if want_grads else None
    d_codes_aug = None

    if spec.w_o > 0 and bd.n_clean > 0:
        ci = batch.clean_idx
        v, dB, dC = _pointwise(codes[ci], batch.labels[ci], C, want_grads)
        bd.pointwise = v
        if want_grads:
            d_codes[ci] += spec.w_o * dB
            d_centers += spec.w_o * dC

    if spec.alpha > 0 and bd.n_corrected >= 2:
        ri = batch.corrected_idx
        S = pairwise_label_similarity(batch.labels[ri], batch.labels[ri])
        v, dB = _pairwise(codes[ri], S, spec, want_grads)
        bd.pairwise = v
        if want_grads:
            d_codes[ri] += spec.alpha * dB

    if spec.beta > 0 and bd.n_unlabeled > 0 and codes_aug is not None:
        ui = batch.unlabeled_idx
        v, dB, dV = _contrastive(codes[ui], codes_aug, spec, want_grads)
        bd.contrastive = v
        if want_grads:
            d_codes[ui] += spec.beta * dB
            d_codes_aug = spec.beta * dV

    if spec.gamma > 0 and C.shape[0] >= 2:
        v, dC = _center(C, want_grads)
        bd.center = v
        if want_grads:
            d_centers += spec.gamma * dC

    if spec.eta > 0 and z > 0:
        v, dB = _quantization(codes, spec, want_grads)
        bd.quantization = v
        if want_grads:
            d_codes += spec.eta * dB

    bd.total = (
        spec.w_o * bd.pointwise
        + spec.alpha * bd.pairwise
        + spec.beta * bd.contrastive
        + spec.gamma * bd.center
        + spec.eta * bd.quantization
    )
    return bd, d_codes, d_codes_aug, d_centers
