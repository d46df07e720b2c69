"""Two-modality hashing network with hand-derived gradients.

Each modality passes through a two-layer MLP (ReLU between the layers), the
projected features are summed, and a single affine layer + tanh produces the
relaxed code in (-1, 1)^k.  Sign binarization gives the final code in
{-1, +1}^k.  Category centers are free parameters clamped to [-1, 1] after
every SGD step.  All training math is float64; checkpoints store float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

CHECKPOINT_MAGIC = b"DCMP"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Raised when training encounters non-finite values."""


@dataclass
class ModelParams:
    """Network weights; also used as the container for gradients."""

    w1x: np.ndarray  # (d_x, h)
    b1x: np.ndarray  # (h,)
    w2x: np.ndarray  # (h, p)
    b2x: np.ndarray  # (p,)
    w1y: np.ndarray  # (d_y, h)
    b1y: np.ndarray  # (h,)
    w2y: np.ndarray  # (h, p)
    b2y: np.ndarray  # (p,)
    wh: np.ndarray   # (p, k)
    bh: np.ndarray   # (k,)
    centers: np.ndarray  # (m, k)

    @property
    def d_x(self) -> int:
        return self.w1x.shape[0]

    @property
    def d_y(self) -> int:
        return self.w1y.shape[0]

    @property
    def h(self) -> int:
        return self.w1x.shape[1]

    @property
    def p(self) -> int:
        return self.w2x.shape[1]

    @property
    def k(self) -> int:
        return self.wh.shape[1]

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> "ModelParams":
        out = {}
        off = 0
        for f in fields(self):
            a = getattr(self, f.name)
            out[f.name] = vec[off : off + a.size].reshape(a.shape).copy()
            off += a.size
        return ModelParams(**out)

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(*(np.zeros_like(a) for a in params.arrays()))


def init_params(d_x: int, d_y: int, m: int, k: int, h: int = 256, p: int = 128, seed: int = 0) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, Uniform(-1, 1) centers."""
    rng = np.random.default_rng(seed)

    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    return ModelParams(
        w1x=layer(d_x, h), b1x=np.zeros(h), w2x=layer(h, p), b2x=np.zeros(p),
        w1y=layer(d_y, h), b1y=np.zeros(h), w2y=layer(h, p), b2y=np.zeros(p),
        wh=layer(p, k), bh=np.zeros(k),
        centers=rng.uniform(-1.0, 1.0, size=(m, k)),
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    y: np.ndarray
    z1x: np.ndarray
    h1x: np.ndarray
    z1y: np.ndarray
    h1y: np.ndarray
    fused: np.ndarray
    codes: np.ndarray  # tanh output, (z, k)


def _forward_cache(params: ModelParams, x: np.ndarray, y: np.ndarray) -> ForwardCache:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != params.d_x or y.shape[1] != params.d_y:
        raise ValueError(
            f"feature dims ({x.shape[1]}, {y.shape[1]}) do not match model ({params.d_x}, {params.d_y})"
        )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite feature input")
    z1x = x @ params.w1x + params.b1x
    h1x = np.maximum(z1x, 0.0)
    ux = h1x @ params.w2x + params.b2x
    z1y = y @ params.w1y + params.b1y
    h1y = np.maximum(z1y, 0.0)
    uy = h1y @ params.w2y + params.b2y
    fused = ux + uy
    codes = np.tanh(fused @ params.wh + params.bh)
    return ForwardCache(x=x, y=y, z1x=z1x, h1x=h1x, z1y=z1y, h1y=h1y, fused=fused, codes=codes)


def forward(params: ModelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Relaxed codes in (-1, 1)^k; a single vector in gives a single vector out."""
    single = np.asarray(x).ndim == 1
    codes = _forward_cache(params, x, y).codes
    return codes[0] if single else codes


def binarize(codes: np.ndarray) -> np.ndarray:
    """Entrywise sign with sgn(0) := +1."""
    codes = np.asarray(codes, dtype=np.float64)
    return np.where(codes >= 0.0, 1.0, -1.0)


def hash_unseen(params: ModelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Out-of-sample hashing: forward pass plus sign binarization."""
    return binarize(forward(params, x, y))


def _backprop_codes(params: ModelParams, cache: ForwardCache, d_codes: np.ndarray, grads: ModelParams) -> None:
    """Accumulate network gradients given dL/d(codes) for one forward cache."""
    da = d_codes * (1.0 - cache.codes ** 2)
    grads.wh += cache.fused.T @ da
    grads.bh += da.sum(axis=0)
    dfused = da @ params.wh.T
    for (w1, w2, z1, h1, feat, g1, gb1, g2, gb2) in (
        ("w1x", "w2x", cache.z1x, cache.h1x, cache.x, "w1x", "b1x", "w2x", "b2x"),
        ("w1y", "w2y", cache.z1y, cache.h1y, cache.y, "w1y", "b1y", "w2y", "b2y"),
    ):
        du = dfused
        setattr(grads, g2, getattr(grads, g2) + h1.T @ du)
        setattr(grads, gb2, getattr(grads, gb2) + du.sum(axis=0))
        dh1 = du @ getattr(params, w2).T
        dz1 = dh1 * (z1 > 0.0)
        setattr(grads, g1, getattr(grads, g1) + feat.T @ dz1)
        setattr(grads, gb1, getattr(grads, gb1) + dz1.sum(axis=0))


def batch_loss(params: ModelParams, batch, spec):
    """Loss breakdown for a training batch; no gradients (finite-difference oracle path)."""
    from dchash import losses

    cache = _forward_cache(params, batch.x, batch.y)
    codes_aug = None
    if batch.x_aug is not None and len(batch.unlabeled_idx) > 0:
        codes_aug = _forward_cache(params, batch.x_aug, batch.y_aug).codes
    breakdown, _, _, _ = losses.total_loss_and_grads(
        cache.codes, codes_aug, params.centers, batch, spec, want_grads=False
    )
    return breakdown


def backward(params: ModelParams, batch, spec):
    """Total loss and analytic gradients for every parameter, centers included."""
    from dchash import losses

    if batch.size == 0:
        raise ValueError("empty batch")
    cache = _forward_cache(params, batch.x, batch.y)
    cache_aug = None
    codes_aug = None
    if batch.x_aug is not None and len(batch.unlabeled_idx) > 0:
        cache_aug = _forward_cache(params, batch.x_aug, batch.y_aug)
        codes_aug = cache_aug.codes

    breakdown, d_codes, d_codes_aug, d_centers = losses.total_loss_and_grads(
        cache.codes, codes_aug, params.centers, batch, spec, want_grads=True
    )
    grads = zeros_like(params)
    grads.centers += d_centers
    _backprop_codes(params, cache, d_codes, grads)
    if cache_aug is not None and d_codes_aug is not None:
        _backprop_codes(params, cache_aug, d_codes_aug, grads)
    return breakdown, grads


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    """p <- p - lr * g, then clamp centers entrywise into [-1, 1]."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    for g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; training aborted")
    out = ModelParams(*(p - lr * g for p, g in zip(params.arrays(), grads.arrays())))
    np.clip(out.centers, -1.0, 1.0, out=out.centers)
    return out


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as f:
        f.write(
            struct.pack(
                "<4sIIIIIII",
                CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                params.d_x, params.d_y, params.h, params.p, params.k, params.m,
            )
        )
        for a in params.arrays():
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    from dchash.dataset import FormatError

    with open(path, "rb") as f:
        raw = f.read()
    hdr = struct.calcsize("<4sIIIIIII")
    if len(raw) < hdr:
        raise FormatError(f"truncated header at offset {len(raw)} (need {hdr} bytes)")
    magic, version, d_x, d_y, h, p, k, m = struct.unpack_from("<4sIIIIIII", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    shapes = [
        (d_x, h), (h,), (h, p), (p,),
        (d_y, h), (h,), (h, p), (p,),
        (p, k), (k,), (m, k),
    ]
    arrays = []
    off = hdr
    for shape in shapes:
        count = int(np.prod(shape))
        end = off + 4 * count
        if end > len(raw):
            raise FormatError(f"truncated payload at offset {len(raw)} (need {end} bytes)")
        arrays.append(np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64))
        off = end
    if off != len(raw):
        raise FormatError(f"unexpected trailing bytes at offset {off}")
    return ModelParams(*arrays)
