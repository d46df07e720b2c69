"""Synthetic two-modality datasets, label-noise injection, and binary file I/O.

A dataset holds paired feature vectors for a text-like modality ``x`` and an
image-like modality ``y`` plus a multi-hot label per instance.  The noise
injector corrupts a chosen fraction of labels with four corruption types
(same/changed cardinality crossed with overlapping/disjoint categories) and
records the originals in a mask so filter and corrector quality can be audited.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

DATASET_MAGIC = b"DCMH"
MASK_MAGIC = b"DCNM"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised on malformed dataset/mask files; the message names the byte offset."""


@dataclass
class Dataset:
    """Paired two-modality features with multi-hot labels.

    x: (n, d_x) float32, y: (n, d_y) float32, labels: (n, m) uint8 in {0, 1}.
    ``split`` is in-memory metadata only; it is not part of the file format.
    """

    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray
    seed: int = 0
    split: str = "train"

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    @property
    def m(self) -> int:
        return self.labels.shape[1]

    def __post_init__(self):
        if not (self.x.shape[0] == self.y.shape[0] == self.labels.shape[0]):
            raise ValueError("x, y and labels must have the same number of rows")
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.ascontiguousarray(self.y, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)

    def subset(self, indices, split: str | None = None) -> "Dataset":
        indices = np.asarray(indices)
        if indices.dtype.kind not in "biu":  # e.g. the float64 of an empty list
            indices = indices.astype(np.intp)
        return Dataset(
            x=self.x[indices].copy(),
            y=self.y[indices].copy(),
            labels=self.labels[indices].copy(),
            seed=self.seed,
            split=split if split is not None else self.split,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.x.shape == other.x.shape
            and self.y.shape == other.y.shape
            and self.labels.shape == other.labels.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class NoiseMask:
    """Which instances were corrupted, how, and what their labels were before.

    noise_type is 0 for clean rows, 1..4 for the corruption type;
    original_labels rows are zeroed for clean instances.
    """

    noise_type: np.ndarray
    original_labels: np.ndarray

    def __post_init__(self):
        self.noise_type = np.ascontiguousarray(self.noise_type, dtype=np.uint8)
        self.original_labels = np.ascontiguousarray(self.original_labels, dtype=np.uint8)
        if self.noise_type.shape[0] != self.original_labels.shape[0]:
            raise ValueError("noise_type and original_labels row counts differ")

    @property
    def n(self) -> int:
        return self.noise_type.shape[0]

    @property
    def corrupted(self) -> np.ndarray:
        return self.noise_type > 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, NoiseMask):
            return NotImplemented
        return np.array_equal(self.noise_type, other.noise_type) and np.array_equal(
            self.original_labels, other.original_labels
        )


def generate_synthetic(
    n: int,
    m: int,
    d_x: int,
    d_y: int,
    labels_per_instance: tuple[int, int] = (1, 3),
    cluster_spread: float = 0.1,
    seed: int = 0,
    split: str = "train",
) -> Dataset:
    """Generate a clustered multi-label dataset.

    One unit-sphere prototype per category and modality; each instance picks a
    label cardinality uniformly from ``labels_per_instance``, chooses that many
    distinct categories, and sets each modality feature to the mean of its
    categories' prototypes plus isotropic Gaussian noise of scale
    ``cluster_spread``.  Deterministic given the seed.
    """
    lo, hi = labels_per_instance
    if n < m or m < 2:
        raise ValueError(f"need n >= m >= 2, got n={n}, m={m}")
    if d_x < 4 or d_y < 4:
        raise ValueError("feature dimensions must be >= 4")
    if not (1 <= lo <= hi <= m):
        raise ValueError(f"invalid labels_per_instance range ({lo}, {hi}) for m={m}")
    if cluster_spread < 0:
        raise ValueError("cluster_spread must be nonnegative")

    rng = np.random.default_rng(seed)
    protos = {}
    for dim, key in ((d_x, "x"), (d_y, "y")):
        p = rng.standard_normal((m, dim))
        protos[key] = p / np.linalg.norm(p, axis=1, keepdims=True)

    labels = np.zeros((n, m), dtype=np.uint8)
    x = np.empty((n, d_x), dtype=np.float64)
    y = np.empty((n, d_y), dtype=np.float64)
    for i in range(n):
        card = int(rng.integers(lo, hi + 1))
        cats = rng.choice(m, size=card, replace=False)
        labels[i, cats] = 1
        x[i] = protos["x"][cats].mean(axis=0)
        y[i] = protos["y"][cats].mean(axis=0)
        if cluster_spread > 0:
            x[i] += cluster_spread * rng.standard_normal(d_x)
            y[i] += cluster_spread * rng.standard_normal(d_y)

    return Dataset(x=x.astype(np.float32), y=y.astype(np.float32), labels=labels, seed=seed, split=split)


def label_similarity(l_i: np.ndarray, l_j: np.ndarray) -> int:
    """+1 if the two multi-hot labels share at least one category, else -1."""
    l_i = np.asarray(l_i)
    l_j = np.asarray(l_j)
    if l_i.shape != l_j.shape:
        raise ValueError(f"label length mismatch: {l_i.shape} vs {l_j.shape}")
    return 1 if int(np.dot(l_i.astype(np.int64), l_j.astype(np.int64))) >= 1 else -1


def pairwise_label_similarity(L_a: np.ndarray, L_b: np.ndarray) -> np.ndarray:
    """(len(L_a), len(L_b)) matrix of +/-1 share-a-category similarities."""
    overlap = L_a.astype(np.int64) @ L_b.astype(np.int64).T
    return np.where(overlap >= 1, 1.0, -1.0)


def corrupt_label(rng, orig: np.ndarray, noise_type: int, m: int) -> np.ndarray:
    """Draw a corrupted label of the given type; caller guarantees feasibility."""
    orig_cats = np.flatnonzero(orig)
    other_cats = np.flatnonzero(orig == 0)
    c = len(orig_cats)
    new = np.zeros(m, dtype=np.uint8)
    if noise_type == 1:
        # same cardinality, nonempty proper subset kept, rest from non-original
        keep = int(rng.integers(max(1, c - len(other_cats)), c))
        kept = rng.choice(orig_cats, size=keep, replace=False)
        fill = rng.choice(other_cats, size=c - keep, replace=False)
        new[kept] = 1
        new[fill] = 1
    elif noise_type == 2:
        # same cardinality, fully disjoint
        new[rng.choice(other_cats, size=c, replace=False)] = 1
    elif noise_type == 3:
        # changed cardinality, at least one original kept
        choices = [cp for cp in range(1, m + 1) if cp != c]
        cp = int(choices[rng.integers(len(choices))])
        r_lo = max(1, cp - len(other_cats))
        r_hi = min(c, cp)
        keep = int(rng.integers(r_lo, r_hi + 1))
        kept = rng.choice(orig_cats, size=keep, replace=False)
        fill = rng.choice(other_cats, size=cp - keep, replace=False)
        new[kept] = 1
        new[fill] = 1
    elif noise_type == 4:
        # changed cardinality, fully disjoint
        choices = [cp for cp in range(1, len(other_cats) + 1) if cp != c]
        cp = int(choices[rng.integers(len(choices))])
        new[rng.choice(other_cats, size=cp, replace=False)] = 1
    else:
        raise ValueError(f"unknown noise type {noise_type}")
    return new


def _type_feasible(noise_type: int, c: int, m: int) -> bool:
    if noise_type == 1:
        return 2 <= c <= m - 1
    if noise_type == 2:
        return c <= m - c
    if noise_type == 3:
        return m >= 2
    if noise_type == 4:
        free = m - c
        return free >= 2 or (free == 1 and c != 1)
    return False


def inject_noise(ds: Dataset, tau: float, seed: int) -> tuple[Dataset, NoiseMask]:
    """Corrupt round(tau * n) labels, split evenly across the four types.

    Types 2/4 produce labels disjoint from the original; types 1/3 keep at
    least one original category.  Instances for which the drawn type is
    infeasible (e.g. no disjoint categories left) fall back to type 1 and then
    type 3.  Every corrupted label is nonempty and differs from its original.
    """
    if not (0 <= tau < 1):
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    n, m = ds.n, ds.m
    if np.any(ds.labels.sum(axis=1) == 0):
        raise ValueError("all labels must have at least one positive before injection")

    n_corrupt = int(np.floor(tau * n + 0.5))
    mask = NoiseMask(
        noise_type=np.zeros(n, dtype=np.uint8),
        original_labels=np.zeros((n, m), dtype=np.uint8),
    )
    if n_corrupt == 0:
        return ds, mask
    if n_corrupt < 4:
        raise ValueError(f"tau*n = {n_corrupt} < 4: each corruption type needs an instance")

    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=n_corrupt, replace=False)
    base, rem = divmod(n_corrupt, 4)
    quota = {t: base + (1 if t <= rem else 0) for t in (1, 2, 3, 4)}

    new_labels = ds.labels.copy()
    for idx in chosen:
        orig = ds.labels[idx]
        c = int(orig.sum())
        # keep per-type counts exact: prefer the feasible type with the most
        # remaining quota, falling back to any feasible type if quotas ran dry
        candidates = [t for t in (1, 2, 3, 4) if quota[t] > 0 and _type_feasible(t, c, m)]
        if candidates:
            t = max(candidates, key=lambda tt: (quota[tt], -tt))
            quota[t] -= 1
        else:
            feasible = [t for t in (1, 2, 3, 4) if _type_feasible(t, c, m)]
            if not feasible:
                raise ValueError(f"no feasible corruption type for instance {idx} (c={c}, m={m})")
            t = feasible[0]
        new = corrupt_label(rng, orig, t, m)
        assert new.sum() >= 1 and not np.array_equal(new, orig)
        new_labels[idx] = new
        mask.noise_type[idx] = t
        mask.original_labels[idx] = orig

    noisy = replace(ds, labels=new_labels)
    return noisy, mask


# --- binary file I/O -------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    header = struct.pack(
        "<4sIIIIIQ", DATASET_MAGIC, FORMAT_VERSION, ds.n, ds.d_x, ds.d_y, ds.m, ds.seed & 0xFFFFFFFFFFFFFFFF
    )
    with open(path, "wb") as f:
        f.write(header)
        for i in range(ds.n):
            f.write(ds.x[i].tobytes())
            f.write(ds.y[i].tobytes())
            f.write(ds.labels[i].tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    hdr_size = struct.calcsize("<4sIIIIIQ")
    if len(raw) < hdr_size:
        raise FormatError(f"truncated header at offset {len(raw)} (need {hdr_size} bytes)")
    magic, version, n, d_x, d_y, m, seed = struct.unpack_from("<4sIIIIIQ", raw, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    rec = 4 * d_x + 4 * d_y + m
    expected = hdr_size + n * rec
    if len(raw) != expected:
        raise FormatError(
            f"payload ends at offset {len(raw)}, expected {expected} for n={n} records"
        )
    x = np.empty((n, d_x), dtype=np.float32)
    y = np.empty((n, d_y), dtype=np.float32)
    labels = np.empty((n, m), dtype=np.uint8)
    off = hdr_size
    for i in range(n):
        x[i] = np.frombuffer(raw, dtype="<f4", count=d_x, offset=off)
        off += 4 * d_x
        y[i] = np.frombuffer(raw, dtype="<f4", count=d_y, offset=off)
        off += 4 * d_y
        labels[i] = np.frombuffer(raw, dtype=np.uint8, count=m, offset=off)
        off += m
    return Dataset(x=x, y=y, labels=labels, seed=seed)


def save_mask(mask: NoiseMask, path) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", MASK_MAGIC, FORMAT_VERSION, mask.n))
        originals = np.where(mask.corrupted[:, None], mask.original_labels, 0).astype(np.uint8)
        for i in range(mask.n):
            f.write(bytes([mask.noise_type[i]]))
            f.write(originals[i].tobytes())


def load_mask(path) -> NoiseMask:
    with open(path, "rb") as f:
        raw = f.read()
    hdr_size = struct.calcsize("<4sII")
    if len(raw) < hdr_size:
        raise FormatError(f"truncated header at offset {len(raw)} (need {hdr_size} bytes)")
    magic, version, n = struct.unpack_from("<4sII", raw, 0)
    if magic != MASK_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    body = len(raw) - hdr_size
    if n == 0:
        if body != 0:
            raise FormatError(f"unexpected trailing bytes at offset {hdr_size}")
        return NoiseMask(np.zeros(0, dtype=np.uint8), np.zeros((0, 0), dtype=np.uint8))
    if body % n != 0:
        raise FormatError(f"payload ends at offset {len(raw)}, not a multiple of n={n} records")
    m = body // n - 1
    if m < 0:
        raise FormatError(f"record too short at offset {hdr_size}")
    noise_type = np.empty(n, dtype=np.uint8)
    originals = np.empty((n, m), dtype=np.uint8)
    off = hdr_size
    for i in range(n):
        noise_type[i] = raw[off]
        off += 1
        originals[i] = np.frombuffer(raw, dtype=np.uint8, count=m, offset=off)
        off += m
    return NoiseMask(noise_type=noise_type, original_labels=originals)


def export_csv(ds: Dataset, path) -> None:
    """Inspection-only CSV: one row per instance, features then labels."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            [f"x{j}" for j in range(ds.d_x)]
            + [f"y{j}" for j in range(ds.d_y)]
            + [f"l{j}" for j in range(ds.m)]
        )
        for i in range(ds.n):
            w.writerow(
                [repr(float(v)) for v in ds.x[i]]
                + [repr(float(v)) for v in ds.y[i]]
                + [int(v) for v in ds.labels[i]]
            )
