"""Bit-packed Hamming retrieval and evaluation metrics.

Codes in {-1, +1}^k are packed into little-endian 64-bit words (bit = 1
encodes +1); distances are XOR + popcount, which equals (k - dot) / 2 on the
unpacked codes.  Metrics: mean average precision over the full ranking,
precision at top-N, precision/recall swept over Hamming radius, and the
in/out-category score quartiles used for filter diagnostics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from dchash.dataset import FormatError, pairwise_label_similarity
from dchash.filter import score_matrix

INDEX_MAGIC = b"DCIX"
INDEX_VERSION = 1

_BYTE_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint64)


def _popcount_words(words: np.ndarray) -> np.ndarray:
    """Per-row popcount of packed uint64 words."""
    if hasattr(np, "bitwise_count"):
        return np.bitwise_count(words).sum(axis=-1).astype(np.int64)
    as_bytes = words.view(np.uint8)
    return _BYTE_POPCOUNT[as_bytes].sum(axis=-1).astype(np.int64)


def pack_codes(codes: np.ndarray, k: int | None = None) -> np.ndarray:
    """Pack rows of {-1, +1} codes into (n, ceil(k/64)) uint64 words."""
    codes = np.atleast_2d(np.asarray(codes))
    if k is None:
        k = codes.shape[1]
    if codes.shape[1] != k:
        raise ValueError(f"code length {codes.shape[1]} does not match k={k}")
    n = codes.shape[0]
    words = (k + 63) // 64
    bits = np.zeros((n, words * 64), dtype=np.uint8)
    bits[:, :k] = codes > 0
    packed_bytes = np.packbits(bits, axis=1, bitorder="little")
    return packed_bytes.view("<u8").reshape(n, words)


def unpack_codes(packed: np.ndarray, k: int) -> np.ndarray:
    """Inverse of pack_codes; returns float rows of -1/+1."""
    packed = np.atleast_2d(packed).astype("<u8")
    bits = np.unpackbits(packed.view(np.uint8), axis=1, bitorder="little")[:, :k]
    return np.where(bits > 0, 1.0, -1.0)


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Hamming distance between two {-1, +1} codes via packed XOR popcount."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"code length mismatch: {a.shape} vs {b.shape}")
    pa = pack_codes(a[None, :])
    pb = pack_codes(b[None, :])
    return int(_popcount_words(pa ^ pb)[0])


@dataclass
class PackedCodeIndex:
    """Immutable database of packed codes with labels for relevance judgments."""

    packed: np.ndarray  # (n, words) uint64
    k: int
    labels: np.ndarray  # (n, m) uint8

    def __post_init__(self):
        self.packed = np.ascontiguousarray(np.atleast_2d(self.packed), dtype="<u8")
        self.labels = np.ascontiguousarray(np.atleast_2d(self.labels), dtype=np.uint8)
        if self.packed.shape[0] != self.labels.shape[0]:
            raise ValueError("code and label row counts differ")
        if self.packed.shape[1] != (self.k + 63) // 64:
            raise ValueError("packed word count does not match k")

    @property
    def n(self) -> int:
        return self.packed.shape[0]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.n, dtype=np.int64)


def build_index(codes: np.ndarray, labels: np.ndarray) -> PackedCodeIndex:
    codes = np.atleast_2d(codes)
    return PackedCodeIndex(packed=pack_codes(codes), k=codes.shape[1], labels=labels)


@dataclass
class RankingResult:
    order: np.ndarray      # database ids by ascending distance, id tie-break
    distances: np.ndarray  # aligned with order


def distances_to_index(query: np.ndarray, index: PackedCodeIndex) -> np.ndarray:
    """Hamming distances from one {-1, +1} query code to every database code."""
    q = pack_codes(np.asarray(query)[None, :], index.k)
    return _popcount_words(index.packed ^ q)


def rank(query: np.ndarray, index: PackedCodeIndex) -> RankingResult:
    if index.n == 0:
        raise ValueError("empty index")
    dist = distances_to_index(query, index)
    order = np.argsort(dist, kind="stable")
    return RankingResult(order=order, distances=dist[order])


def relevance_matrix(query_labels: np.ndarray, db_labels: np.ndarray) -> np.ndarray:
    """Boolean (queries, db): relevant iff the labels share a category."""
    return pairwise_label_similarity(query_labels, db_labels) > 0


def average_precision(ranked_relevance: np.ndarray) -> float:
    """AP over a full ranking; zero-relevant rankings score 0 by convention."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        return 0.0
    positions = np.flatnonzero(rel) + 1
    hits = np.arange(1, n_rel + 1)
    return float(np.mean(hits / positions))


def mean_average_precision(rankings: list[RankingResult], relevance: np.ndarray) -> float:
    if len(rankings) == 0:
        raise ValueError("empty query set")
    aps = [average_precision(relevance[qi][r.order]) for qi, r in enumerate(rankings)]
    return float(np.mean(aps))


def precision_at_n(rankings: list[RankingResult], relevance: np.ndarray, n_list: list[int]) -> dict[int, float]:
    """Mean precision among the top N results, for each N."""
    out = {}
    for N in n_list:
        if N <= 0:
            raise ValueError(f"N must be positive, got {N}")
        vals = [relevance[qi][r.order[:N]].sum() / N for qi, r in enumerate(rankings)]
        out[N] = float(np.mean(vals))
    return out


def pr_curve(rankings: list[RankingResult], relevance: np.ndarray, k: int) -> list[tuple[int, float, float]]:
    """(radius, precision, recall) per Hamming radius 0..k, averaged over queries.

    Queries retrieving nothing at a radius contribute precision 1.0; recall is
    0 for queries with no relevant items.
    """
    rows = []
    n_q = len(rankings)
    total_rel = relevance.sum(axis=1)
    for r in range(k + 1):
        precs, recs = [], []
        for qi, rk in enumerate(rankings):
            within = rk.distances <= r
            n_ret = int(within.sum())
            n_rel_ret = int(relevance[qi][rk.order[within]].sum())
            precs.append(n_rel_ret / n_ret if n_ret > 0 else 1.0)
            recs.append(n_rel_ret / total_rel[qi] if total_rel[qi] > 0 else 0.0)
        rows.append((r, float(np.mean(precs)), float(np.mean(recs))))
    return rows


def rank_pr_curve(rankings: list[RankingResult], relevance: np.ndarray) -> list[tuple[int, float, float]]:
    """Rank-based PR alternative: one point per ranking cutoff."""
    n_db = len(rankings[0].order)
    rows = []
    total_rel = relevance.sum(axis=1)
    for cut in range(1, n_db + 1):
        precs, recs = [], []
        for qi, rk in enumerate(rankings):
            n_rel_ret = int(relevance[qi][rk.order[:cut]].sum())
            precs.append(n_rel_ret / cut)
            recs.append(n_rel_ret / total_rel[qi] if total_rel[qi] > 0 else 0.0)
        rows.append((cut, float(np.mean(precs)), float(np.mean(recs))))
    return rows


def _quartiles(values: np.ndarray) -> dict[str, float]:
    q = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]), "q3": float(q[3]), "max": float(q[4])}


def boxplot_stats(codes: np.ndarray, centers: np.ndarray, labels: np.ndarray, noise_type: np.ndarray) -> dict[str, dict[str, float]]:
    """In/out-category mean-score quartiles, split into clean and noisy subsets.

    Per instance: mean cosine score over centers of its labeled categories and
    over the remaining centers.  Instances labeled with every category have no
    out-group and are excluded from the out statistics.  Groups with no
    members are omitted.
    """
    D = score_matrix(codes, centers)
    L = np.asarray(labels, dtype=bool)
    n_pos = L.sum(axis=1)
    n_neg = (~L).sum(axis=1)
    in_mean = (D * L).sum(axis=1) / np.maximum(n_pos, 1)
    out_mean = np.divide(
        (D * ~L).sum(axis=1), n_neg, out=np.full(L.shape[0], np.nan), where=n_neg > 0
    )
    corrupted = np.asarray(noise_type) > 0
    stats = {}
    for subset, sel in (("clean", ~corrupted), ("noisy", corrupted)):
        if sel.sum() == 0:
            continue
        stats[f"{subset}_in"] = _quartiles(in_mean[sel])
        out_vals = out_mean[sel]
        out_vals = out_vals[~np.isnan(out_vals)]
        if out_vals.size > 0:
            stats[f"{subset}_out"] = _quartiles(out_vals)
    return stats


def save_index(index: PackedCodeIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", INDEX_MAGIC, INDEX_VERSION, index.n, index.k))
        f.write(index.packed.astype("<u8").tobytes())
        f.write(index.labels.tobytes())


def load_index(path) -> PackedCodeIndex:
    with open(path, "rb") as f:
        raw = f.read()
    hdr = struct.calcsize("<4sIII")
    if len(raw) < hdr:
        raise FormatError(f"truncated header at offset {len(raw)} (need {hdr} bytes)")
    magic, version, n, k = struct.unpack_from("<4sIII", raw, 0)
    if magic != INDEX_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    words = (k + 63) // 64
    code_bytes = n * words * 8
    if len(raw) < hdr + code_bytes:
        raise FormatError(f"truncated code payload at offset {len(raw)}")
    packed = np.frombuffer(raw, dtype="<u8", count=n * words, offset=hdr).reshape(n, words)
    rest = len(raw) - hdr - code_bytes
    if n == 0:
        if rest != 0:
            raise FormatError(f"unexpected trailing bytes at offset {hdr + code_bytes}")
        return PackedCodeIndex(packed=np.zeros((0, words), dtype="<u8"), k=k, labels=np.zeros((0, 0), dtype=np.uint8))
    if rest % n != 0:
        raise FormatError(f"label payload ends at offset {len(raw)}, not a multiple of n={n}")
    m = rest // n
    labels = np.frombuffer(raw, dtype=np.uint8, count=n * m, offset=hdr + code_bytes).reshape(n, m)
    return PackedCodeIndex(packed=packed.copy(), k=k, labels=labels.copy())
