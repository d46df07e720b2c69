"""Training loop: warm-up, per-batch filter -> correct -> loss -> SGD.

Variants:
  FULL  filter noisy labels, correct agreeing-donor instances, rest unlabeled
  I     no filtering; every instance trains pointwise with its given label
  R     filter only; all noisy instances become unlabeled
  U     filter + correct; disagreeing-donor instances are dropped from the step
  RU    filter only; all noisy instances are dropped from the step

The noise mask, when supplied, feeds diagnostics (filter precision/recall and
correction accuracy) and is never consulted by training decisions.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from dchash import corrector as corrector_mod
from dchash import filter as filter_mod
from dchash import model as model_mod
from dchash import retrieval as retrieval_mod
from dchash.dataset import Dataset, NoiseMask
from dchash.losses import LossSpec, TrainingBatch, augment

VARIANTS = ("FULL", "I", "R", "U", "RU")


@dataclass
class TrainConfig:
    epochs: int = 40
    warmup_epochs: int = 5
    batch_size: int = 48
    lr: float = 2.0
    tau: float = 0.4
    k: int = 32
    hidden: int = 64
    fused: int = 32
    variant: str = "FULL"
    seed: int = 0
    filter_scope: str = "batch"
    donor_scope: str = "batch"
    donor_cache_size: int = 1024
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ValueError("need 0 <= warmup_epochs <= epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not (0.0 <= self.tau < 1.0):
            raise ValueError(f"tau must be in [0, 1), got {self.tau}")
        if self.filter_scope not in ("batch", "global"):
            raise ValueError(f"unknown filter_scope {self.filter_scope!r}")
        if self.donor_scope not in ("batch", "cache"):
            raise ValueError(f"unknown donor_scope {self.donor_scope!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        data = json.loads(text)
        loss = LossSpec(**data.pop("loss", {}))
        return cls(loss=loss, **data)


@dataclass
class EpochRecord:
    epoch: int
    warmup: bool
    pointwise: float
    pairwise: float
    contrastive: float
    center: float
    quantization: float
    total: float
    n_flagged: int
    n_corrected: int
    n_unlabeled: int
    filter_precision: float | None = None
    filter_recall: float | None = None
    correction_accuracy: float | None = None


@dataclass
class TrainReport:
    config: TrainConfig
    epochs: list[EpochRecord] = field(default_factory=list)
    # populated when train(collect_diagnostics=True):
    # filter rows: (epoch, batch, instance_id, t, flagged, true_corrupted)
    # corrector rows: (epoch, batch, instance_id, donor_j, donor_k, agree, matches_original)
    filter_rows: list[tuple] = field(default_factory=list)
    corrector_rows: list[tuple] = field(default_factory=list)

    def summary(self) -> dict:
        last = self.epochs[-1] if self.epochs else None
        return {
            "epochs_run": len(self.epochs),
            "final_total_loss": last.total if last else None,
            "final_filter_precision": last.filter_precision if last else None,
            "final_filter_recall": last.filter_recall if last else None,
        }


def _forward_all(params, ds: Dataset, chunk: int = 1024) -> np.ndarray:
    codes = np.empty((ds.n, params.k))
    for s in range(0, ds.n, chunk):
        codes[s : s + chunk] = model_mod.forward(params, ds.x[s : s + chunk], ds.y[s : s + chunk])
    return codes


def _warm_spec(spec: LossSpec) -> LossSpec:
    # warm-up objective: pointwise on all labels + center + quantization
    return replace(spec, alpha=0.0, beta=0.0)


class _DonorCache:
    """Running cache of recent clean score rows and labels (stale scores accepted)."""

    def __init__(self, size: int):
        self.rows = deque(maxlen=size)

    def add(self, scores: np.ndarray, labels: np.ndarray) -> None:
        for s, l in zip(scores, labels):
            self.rows.append((s, l))

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.rows:
            return np.zeros((0, 0)), np.zeros((0, 0), dtype=np.uint8)
        return np.stack([r[0] for r in self.rows]), np.stack([r[1] for r in self.rows])


def train(
    ds: Dataset,
    cfg: TrainConfig,
    mask: NoiseMask | None = None,
    params: model_mod.ModelParams | None = None,
    collect_diagnostics: bool = False,
) -> tuple[model_mod.ModelParams, TrainReport]:
    """Run warm-up plus the main filtered training loop; deterministic per seed."""
    if ds.n == 0:
        raise ValueError("empty dataset")
    init_seed, shuffle_seed, aug_seed = [
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(3)
    ]
    if params is None:
        params = model_mod.init_params(
            ds.d_x, ds.d_y, ds.m, cfg.k, h=cfg.hidden, p=cfg.fused, seed=init_seed
        )
    shuffle_rng = np.random.default_rng(shuffle_seed)
    aug_rng = np.random.default_rng(aug_seed)
    report = TrainReport(config=cfg)
    cache = _DonorCache(cfg.donor_cache_size) if cfg.donor_scope == "cache" else None
    true_corrupt = mask.corrupted if mask is not None else None

    for epoch in range(cfg.epochs):
        warm = epoch < cfg.warmup_epochs
        spec = _warm_spec(cfg.loss) if warm else cfg.loss
        perm = shuffle_rng.permutation(ds.n)
        filtered_global = None
        if not warm and cfg.variant != "I" and cfg.filter_scope == "global":
            codes_all = _forward_all(params, ds)
            D_all = filter_mod.score_matrix(codes_all, params.centers)
            t_all = filter_mod.consistency(D_all, ds.labels)
            part_all = filter_mod.partition(t_all, cfg.tau)
            filtered_global = np.zeros(ds.n, dtype=bool)
            filtered_global[part_all.noisy_idx] = True

        sums = np.zeros(6)
        counts = np.zeros(3, dtype=np.int64)
        tp = fp = fn = 0
        corr_ok = corr_total = 0
        n_batches = 0

        for start in range(0, ds.n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch_seed = int(aug_rng.integers(0, 2**63 - 1))
            x, y, labels = ds.x[idx], ds.y[idx], ds.labels[idx].copy()
            z = len(idx)

            if warm or cfg.variant == "I":
                tb = TrainingBatch(
                    x=x, y=y, labels=labels, clean_idx=np.arange(z, dtype=np.int64)
                )
                noisy_local = np.zeros(0, dtype=np.int64)
                recon = None
            else:
                codes = model_mod.forward(params, x, y)
                D = filter_mod.score_matrix(codes, params.centers)
                if filtered_global is not None:
                    flagged = filtered_global[idx]
                    noisy_local = np.flatnonzero(flagged)
                    clean_local = np.flatnonzero(~flagged)
                else:
                    t = filter_mod.consistency(D, labels)
                    part = filter_mod.partition(t, cfg.tau)
                    noisy_local, clean_local = part.noisy_idx, part.clean_idx

                if collect_diagnostics:
                    t_diag = filter_mod.consistency(D, labels)
                    flagged_diag = np.zeros(z, dtype=bool)
                    flagged_diag[noisy_local] = True
                    for li in range(z):
                        report.filter_rows.append((
                            epoch, start // cfg.batch_size, int(idx[li]), float(t_diag[li]),
                            bool(flagged_diag[li]),
                            bool(true_corrupt[idx[li]]) if true_corrupt is not None else None,
                        ))

                keep = np.arange(z, dtype=np.int64)
                corrected_local = np.zeros(0, dtype=np.int64)
                unlabeled_local = np.zeros(0, dtype=np.int64)
                recon = None
                if cfg.variant == "RU":
                    keep = clean_local
                elif cfg.variant == "R":
                    unlabeled_local = noisy_local
                else:  # FULL or U: run the corrector
                    D_clean, L_clean = D[clean_local], labels[clean_local]
                    if cache is not None:
                        c_scores, c_labels = cache.stacked()
                        if c_scores.size:
                            D_clean = np.vstack([D_clean, c_scores])
                            L_clean = np.vstack([L_clean, c_labels])
                    recon = corrector_mod.reconstruct(
                        D[noisy_local], labels[noisy_local], D_clean, L_clean
                    )
                    corrected_local = noisy_local[recon.corrected_idx]
                    labels[corrected_local] = recon.corrected_labels
                    if cfg.variant == "U":
                        keep = np.sort(
                            np.concatenate([clean_local, corrected_local])
                        )
                    else:
                        unlabeled_local = noisy_local[recon.unlabeled_idx]
                    if cache is not None:
                        cache.add(D[clean_local], labels[clean_local])
                    if collect_diagnostics:
                        agree = set(int(v) for v in recon.corrected_idx)
                        for pos, li in enumerate(noisy_local):
                            j, kk = recon.donors.get(int(pos), (-1, -1))
                            orig_i = int(idx[li])
                            matches = None
                            if mask is not None and int(pos) in agree and mask.corrupted[orig_i]:
                                which = list(recon.corrected_idx).index(int(pos))
                                matches = bool(np.array_equal(
                                    recon.corrected_labels[which], mask.original_labels[orig_i]
                                ))
                            report.corrector_rows.append((
                                epoch, start // cfg.batch_size, orig_i, j, kk,
                                int(pos) in agree, matches,
                            ))

                if len(keep) < z:
                    # renumber partitions into the kept-row coordinate system
                    remap = -np.ones(z, dtype=np.int64)
                    remap[keep] = np.arange(len(keep))
                    clean_local = remap[clean_local[np.isin(clean_local, keep)]]
                    corrected_local = remap[corrected_local[np.isin(corrected_local, keep)]]
                    unlabeled_local = remap[unlabeled_local[np.isin(unlabeled_local, keep)]]
                    x, y, labels = x[keep], y[keep], labels[keep]
                if len(x) == 0:
                    continue
                x_aug = y_aug = None
                if len(unlabeled_local) > 0 and spec.beta > 0:
                    x_aug, y_aug = augment(
                        x[unlabeled_local], y[unlabeled_local], spec.sigma, spec.p_mask, batch_seed
                    )
                tb = TrainingBatch(
                    x=x, y=y, labels=labels,
                    clean_idx=clean_local,
                    corrected_idx=corrected_local,
                    unlabeled_idx=unlabeled_local,
                    x_aug=x_aug, y_aug=y_aug,
                )

                if true_corrupt is not None:
                    batch_true = true_corrupt[idx]
                    flagged_mask = np.zeros(z, dtype=bool)
                    flagged_mask[noisy_local] = True
                    tp += int(np.sum(flagged_mask & batch_true))
                    fp += int(np.sum(flagged_mask & ~batch_true))
                    fn += int(np.sum(~flagged_mask & batch_true))
                    if recon is not None and mask is not None:
                        for li, lab in zip(
                            noisy_local[recon.corrected_idx], recon.corrected_labels
                        ):
                            orig_i = idx[li]
                            if mask.corrupted[orig_i]:
                                corr_total += 1
                                if np.array_equal(lab, mask.original_labels[orig_i]):
                                    corr_ok += 1

            bd, grads = model_mod.backward(params, tb, spec)
            if not np.isfinite(bd.total):
                raise model_mod.NumericError(
                    f"non-finite loss {bd.total} at epoch {epoch}"
                )
            params = model_mod.sgd_step(params, grads, cfg.lr)
            sums += [bd.pointwise, bd.pairwise, bd.contrastive, bd.center, bd.quantization, bd.total]
            counts += [len(noisy_local), bd.n_corrected, bd.n_unlabeled]
            n_batches += 1

        nb = max(n_batches, 1)
        rec = EpochRecord(
            epoch=epoch, warmup=warm,
            pointwise=sums[0] / nb, pairwise=sums[1] / nb, contrastive=sums[2] / nb,
            center=sums[3] / nb, quantization=sums[4] / nb, total=sums[5] / nb,
            n_flagged=int(counts[0]), n_corrected=int(counts[1]), n_unlabeled=int(counts[2]),
        )
        if true_corrupt is not None and not warm and cfg.variant != "I":
            rec.filter_precision = tp / (tp + fp) if (tp + fp) else None
            rec.filter_recall = tp / (tp + fn) if (tp + fn) else None
            rec.correction_accuracy = corr_ok / corr_total if corr_total else None
        report.epochs.append(rec)

    return params, report


def synthetic_defaults(**overrides) -> TrainConfig:
    """Config calibrated for the synthetic clustered datasets in this repo.

    The benchmark-scale loss weights (notably eta=1) saturate tanh long before
    the pointwise term can shape the codes at desk scale, so the quantization
    weight is dropped and the pairwise weight reduced here.
    """
    loss = LossSpec(alpha=0.05, beta=0.15, gamma=5.0, eta=0.0)
    cfg = TrainConfig(epochs=40, warmup_epochs=5, batch_size=48, lr=2.0, tau=0.4,
                      k=32, hidden=64, fused=32, loss=loss)
    return replace(cfg, **overrides) if overrides else cfg


def warmup(ds: Dataset, cfg: TrainConfig, params=None):
    """Warm-up only: train ``warmup_epochs`` epochs with no filtering."""
    warm_cfg = replace(cfg, epochs=cfg.warmup_epochs)
    return train(ds, warm_cfg, mask=None, params=params)


def evaluate_map(params, db: Dataset, queries: Dataset) -> float:
    """Hash both sets out-of-sample, rank, and return MAP over the full ranking."""
    db_codes = model_mod.binarize(_forward_all(params, db))
    q_codes = model_mod.binarize(_forward_all(params, queries))
    index = retrieval_mod.build_index(db_codes, db.labels)
    rankings = [retrieval_mod.rank(q_codes[i], index) for i in range(queries.n)]
    rel = retrieval_mod.relevance_matrix(queries.labels, db.labels)
    return retrieval_mod.mean_average_precision(rankings, rel)


def sweep(
    base_cfg: TrainConfig,
    clean_train: Dataset,
    db: Dataset,
    queries: Dataset,
    param: str,
    values: list[float],
    seeds: list[int],
    noise_seed: int = 0,
) -> list[dict]:
    """Train + evaluate per (setting, seed); failures are recorded, not raised.

    ``param`` is "tau" (noise is re-injected per value) or a LossSpec/TrainConfig
    float field such as "alpha", "beta", "gamma", "eta" or "lr".
    """
    from dchash.dataset import inject_noise

    if not values:
        raise ValueError("empty sweep grid")
    rows = []
    for value in values:
        for seed in seeds:
            row = {"param": param, "value": value, "seed": seed, "map": None, "error": None}
            try:
                cfg = replace(base_cfg, seed=seed)
                if param == "tau":
                    cfg = replace(cfg, tau=float(value))
                    train_ds, train_mask = inject_noise(clean_train, float(value), noise_seed)
                elif param == "lr":
                    cfg = replace(cfg, lr=float(value))
                    train_ds, train_mask = inject_noise(clean_train, cfg.tau, noise_seed)
                elif hasattr(base_cfg.loss, param):
                    cfg = replace(cfg, loss=replace(base_cfg.loss, **{param: float(value)}))
                    train_ds, train_mask = inject_noise(clean_train, cfg.tau, noise_seed)
                else:
                    raise ValueError(f"unknown sweep parameter {param!r}")
                params, _ = train(train_ds, cfg, mask=train_mask)
                row["map"] = evaluate_map(params, db, queries)
            except Exception as exc:  # noqa: BLE001 - one cell must not abort the sweep
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    return rows
