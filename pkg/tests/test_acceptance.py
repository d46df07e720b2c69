"""End-to-end acceptance suite.

Each test covers one numbered criterion and prints a single PASS line when it
holds; a pytest failure marks the criterion failed.  Criteria 5-7 train real
models and dominate the runtime (a few minutes total).
"""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest

from dchash.corrector import reconstruct
from dchash.dataset import (
    generate_synthetic,
    inject_noise,
    load_dataset,
    load_mask,
    pairwise_label_similarity,
    save_dataset,
    save_mask,
)
from dchash.filter import consistency, partition, score_matrix
from dchash.losses import LossSpec, TrainingBatch, augment
from dchash.model import (
    backward,
    batch_loss,
    binarize,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from dchash.retrieval import (
    average_precision,
    boxplot_stats,
    build_index,
    hamming_distance,
    load_index,
    mean_average_precision,
    pack_codes,
    pr_curve,
    precision_at_n,
    rank,
    relevance_matrix,
    save_index,
    unpack_codes,
)
from dchash.trainer import evaluate_map, synthetic_defaults, train, warmup


def report(n, detail=""):
    print(f"criterion {n}: PASS{' - ' + detail if detail else ''}")


# --- shared synthetic benchmark (criteria 5-7) ------------------------------

@pytest.fixture(scope="module")
def benchmark():
    full = generate_synthetic(2600, 8, 32, 32, labels_per_instance=(1, 3),
                              cluster_spread=0.1, seed=11)
    clean_train = full.subset(range(2000))
    db = full.subset(range(2000, 2400), split="retrieval")
    queries = full.subset(range(2400, 2600), split="test")
    noisy, mask = inject_noise(clean_train, 0.4, seed=1)
    return clean_train, noisy, mask, db, queries


# --- criterion 1: gradient suite --------------------------------------------

def _random_grad_case(seed, mode_idx):
    rng = np.random.default_rng(seed)
    d_x, d_y, h, p, k, m = 6, 5, 8, 8, 8, 4
    params = init_params(d_x, d_y, m, k, h=h, p=p, seed=seed)
    n = 6
    labels = np.zeros((n, m), dtype=np.uint8)
    for i in range(n):
        labels[i, rng.choice(m, size=rng.integers(1, 3), replace=False)] = 1
    idx = np.arange(n, dtype=np.int64)
    norm, cmode = list(itertools.product(("batch-mean", "paper-literal"),
                                         ("normalized", "paper-literal")))[mode_idx % 4]
    spec = LossSpec(
        alpha=float(rng.uniform(0.2, 2.0)), beta=float(rng.uniform(0.2, 2.0)),
        gamma=float(rng.uniform(0.2, 2.0)), eta=float(rng.uniform(0.2, 2.0)),
        eps_sim=float(rng.uniform(-0.3, 0.3)),
        normalization=norm, cosine_mode=cmode,
    )
    batch = TrainingBatch(
        x=rng.standard_normal((n, d_x)), y=rng.standard_normal((n, d_y)),
        labels=labels, clean_idx=idx[:3], corrected_idx=idx[3:5], unlabeled_idx=idx[5:],
    )
    batch.x_aug, batch.y_aug = augment(
        batch.x[batch.unlabeled_idx], batch.y[batch.unlabeled_idx], 0.1, 0.1, seed=seed
    )
    return params, batch, spec


def test_criterion_1_gradient_suite():
    start = time.monotonic()
    zero = dict(w_o=0.0, alpha=0.0, beta=0.0, gamma=0.0, eta=0.0)
    terms = ("pointwise", "pairwise", "contrastive", "center", "quantization")
    weight_of = dict(zip(terms, ("w_o", "alpha", "beta", "gamma", "eta")))
    step = 1e-5
    worst = 0.0
    for case in range(20):
        params, batch, spec = _random_grad_case(1000 + case, case)
        # analytic gradients: each term in isolation, plus the full combination
        grads = {}
        for term in terms:
            iso = replace(spec, **{**zero, weight_of[term]: 1.0})
            grads[term] = backward(params, batch, iso)[1].to_vector()
        grads["total"] = backward(params, batch, spec)[1].to_vector()
        # finite differences: one breakdown per perturbation covers all terms
        vec = params.to_vector()
        for j in range(vec.size):
            vp, vm = vec.copy(), vec.copy()
            vp[j] += step
            vm[j] -= step
            bp = batch_loss(params.from_vector(vp), batch, spec)
            bm = batch_loss(params.from_vector(vm), batch, spec)
            for term in terms + ("total",):
                fd = (getattr(bp, term) - getattr(bm, term)) / (2 * step)
                g = grads[term][j]
                err = abs(fd - g)
                tol = 1e-4 * max(abs(fd), abs(g)) + 1e-8
                assert err <= tol, (
                    f"case {case} term {term} param {j}: fd={fd} analytic={g} err={err}"
                )
                worst = max(worst, err / tol)
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    report(1, f"20 configs, worst error at {worst:.1%} of tolerance, {elapsed:.1f}s")


# --- criterion 2: filter exactness ------------------------------------------

def test_criterion_2_filter_exactness():
    for z in (5, 48, 101):
        for tau in (0.0, 0.25, 0.4, 0.9):
            t = np.random.default_rng(z * 100 + int(tau * 100)).random(z)
            res = partition(t, tau)
            assert len(res.noisy_idx) == int(np.floor(tau * z))
            assert len(res.noisy_idx) + len(res.clean_idx) == z

    # planted separation: codes sit on their true centers, corrupted labels
    # are disjoint from the true ones, so consistency splits the sets exactly
    rng = np.random.default_rng(9)
    k, m, z = 16, 8, 40
    centers = np.where(rng.random((m, k)) > 0.5, 1.0, -1.0)
    true_labels = np.zeros((z, m), dtype=np.uint8)
    for i in range(z):
        true_labels[i, rng.choice(m, size=2, replace=False)] = 1
    codes = (true_labels.astype(float) @ centers) / 2.0
    given = true_labels.copy()
    corrupted = rng.choice(z, size=10, replace=False)
    for i in corrupted:
        free = np.flatnonzero(true_labels[i] == 0)
        given[i] = 0
        given[i, rng.choice(free, size=2, replace=False)] = 1
    t = consistency(score_matrix(codes, centers), given)
    res = partition(t, 10 / z)
    flagged = set(res.noisy_idx.tolist())
    assert flagged == set(corrupted.tolist()), "precision/recall must both be 1.0"
    report(2, "floor-rule exact on 12 (z, tau) grids; planted recovery exact")


# --- criterion 3: corrector vs brute force ----------------------------------

def test_criterion_3_corrector_oracle():
    rng = np.random.default_rng(33)
    for case in range(200):
        n_noisy = int(rng.integers(1, 9))
        n_clean = int(rng.integers(1, 9))
        m_centers = int(rng.integers(2, 6))
        m_cats = int(rng.integers(2, 5))
        D_noisy = rng.standard_normal((n_noisy, m_centers))
        D_clean = rng.standard_normal((n_clean, m_centers))
        clean_labels = np.zeros((n_clean, m_cats), dtype=np.uint8)
        for i in range(n_clean):
            clean_labels[i, rng.choice(m_cats, size=rng.integers(1, m_cats + 1), replace=False)] = 1
        noisy_labels = np.zeros((n_noisy, m_cats), dtype=np.uint8)
        noisy_labels[:, 0] = 1
        res = reconstruct(D_noisy, noisy_labels, D_clean, clean_labels)
        corrected, unlabeled = [], []
        for i in range(n_noisy):
            scores = [float(D_noisy[i] @ D_clean[j]) for j in range(n_clean)]
            ranked = sorted(range(n_clean), key=lambda j: (-scores[j], j))
            j, kk = (ranked[0], ranked[0]) if n_clean == 1 else (ranked[0], ranked[1])
            assert res.donors[i] == (j, kk), f"case {case} row {i}"
            if np.array_equal(clean_labels[j], clean_labels[kk]):
                corrected.append(i)
                row = int(np.flatnonzero(res.corrected_idx == i)[0])
                assert np.array_equal(res.corrected_labels[row], clean_labels[j])
            else:
                unlabeled.append(i)
        assert res.corrected_idx.tolist() == corrected
        assert res.unlabeled_idx.tolist() == unlabeled
    report(3, "200 random batches match brute-force donor enumeration")


# --- criterion 4: Hamming and metric oracles --------------------------------

def test_criterion_4_hamming_and_metric_oracles():
    # exhaustive all-pairs at small k
    for k in range(1, 9):
        codes = np.array([[1.0 if (v >> b) & 1 else -1.0 for b in range(k)]
                          for v in range(2 ** k)])
        packed = pack_codes(codes)
        for a in range(2 ** k):
            dots = codes @ codes[a]
            expected = (k - dots) / 2
            got = np.array([hamming_distance(codes[a], codes[b]) for b in range(2 ** k)]) \
                if k <= 4 else None
            from dchash.retrieval import _popcount_words
            dist = _popcount_words(packed ^ packed[a])
            np.testing.assert_array_equal(dist, expected)
            if got is not None:
                np.testing.assert_array_equal(got, expected)
    # exhaustive over the full code space on one side for k = 12..16
    rng = np.random.default_rng(4)
    for k in (12, 16):
        vals = np.arange(2 ** k, dtype=np.uint64)
        all_codes_packed = vals[:, None]  # low k bits are already the packing
        probes = np.where(rng.random((16, k)) > 0.5, 1.0, -1.0)
        probes_packed = pack_codes(probes)
        bits = np.unpackbits(all_codes_packed.astype("<u8").view(np.uint8),
                             axis=1, bitorder="little")[:, :k]
        all_codes = np.where(bits > 0, 1.0, -1.0)
        from dchash.retrieval import _popcount_words
        for q in range(16):
            dist = _popcount_words(all_codes_packed ^ probes_packed[q])
            expected = (k - all_codes @ probes[q]) / 2
            np.testing.assert_array_equal(dist, expected)
    # random pairs at k = 128
    a = np.where(rng.random((100_000, 128)) > 0.5, 1.0, -1.0)
    b = np.where(rng.random((100_000, 128)) > 0.5, 1.0, -1.0)
    from dchash.retrieval import _popcount_words
    dist = _popcount_words(pack_codes(a) ^ pack_codes(b))
    np.testing.assert_array_equal(dist, (128 - np.sum(a * b, axis=1)) / 2)

    # packed metric path equals a naive float re-implementation exactly
    k = 24
    db = np.where(rng.random((150, k)) > 0.5, 1.0, -1.0)
    queries = np.where(rng.random((20, k)) > 0.5, 1.0, -1.0)
    db_labels = rng.integers(0, 2, (150, 4)).astype(np.uint8)
    db_labels[:, 0] |= db_labels.sum(axis=1) == 0
    q_labels = rng.integers(0, 2, (20, 4)).astype(np.uint8)
    q_labels[:, 0] |= q_labels.sum(axis=1) == 0
    index = build_index(db, db_labels)
    rankings = [rank(queries[i], index) for i in range(20)]
    rel = relevance_matrix(q_labels, db_labels)

    naive_aps = []
    naive_pn = {N: [] for N in (1, 5, 10)}
    for qi in range(20):
        float_dist = (k - db @ queries[qi]) / 2
        order = np.argsort(float_dist, kind="stable")
        np.testing.assert_array_equal(order, rankings[qi].order)
        r = rel[qi][order]
        hits = np.flatnonzero(r) + 1
        naive_aps.append(np.mean(np.arange(1, hits.size + 1) / hits) if hits.size else 0.0)
        for N in naive_pn:
            naive_pn[N].append(r[:N].sum() / N)
    assert mean_average_precision(rankings, rel) == float(np.mean(naive_aps))
    pn = precision_at_n(rankings, rel, [1, 5, 10])
    for N in (1, 5, 10):
        assert pn[N] == float(np.mean(naive_pn[N]))
    rows = pr_curve(rankings, rel, k)
    for radius, prec, rec in rows:
        precs, recs = [], []
        for qi in range(20):
            float_dist = (k - db @ queries[qi]) / 2
            within = float_dist <= radius
            n_ret = int(within.sum())
            n_rel = int((rel[qi] & within).sum())
            precs.append(n_rel / n_ret if n_ret else 1.0)
            total = int(rel[qi].sum())
            recs.append(n_rel / total if total else 0.0)
        assert prec == float(np.mean(precs)) and rec == float(np.mean(recs))

    assert abs(average_precision([1, 0, 1]) - 5.0 / 6.0) <= 1e-12
    report(4, "popcount == (k - dot)/2 exhaustively and on 1e5 pairs; metrics exact")


# --- criterion 5: warm-up consistency separation ----------------------------

def test_criterion_5_boxplot_separation(benchmark):
    start = time.monotonic()
    _, noisy, mask, _, _ = benchmark
    margins = []
    for seed in (0, 1, 2):
        params, _ = warmup(noisy, synthetic_defaults(seed=seed))
        from dchash.trainer import _forward_all
        codes = _forward_all(params, noisy)
        stats = boxplot_stats(codes, params.centers, noisy.labels, mask.noise_type)
        clean_gap = stats["clean_in"]["median"] - stats["clean_out"]["median"]
        noisy_gap = stats["noisy_in"]["median"] - stats["noisy_out"]["median"]
        margins.append(clean_gap - noisy_gap)
        assert clean_gap > noisy_gap + 0.05, (
            f"seed {seed}: clean gap {clean_gap:.3f} vs noisy gap {noisy_gap:.3f}"
        )
    elapsed = time.monotonic() - start
    assert elapsed < 300.0, f"took {elapsed:.1f}s"
    report(5, f"margins {[round(v, 3) for v in margins]} on 3/3 seeds, {elapsed:.0f}s")


# --- criterion 6: ablation ordering -----------------------------------------

@pytest.fixture(scope="module")
def ablation_maps(benchmark):
    _, noisy, mask, db, queries = benchmark
    maps = {}
    for variant in ("FULL", "I", "R", "U", "RU"):
        scores = []
        for seed in (0, 1, 2):
            cfg = synthetic_defaults(variant=variant, seed=seed)
            params, _ = train(noisy, cfg, mask=mask)
            scores.append(evaluate_map(params, db, queries))
        maps[variant] = float(np.mean(scores))
    return maps


def test_criterion_6_ablation_ordering(ablation_maps):
    start = time.monotonic()
    maps = ablation_maps
    assert maps["FULL"] >= maps["I"] + 0.02, f"FULL {maps['FULL']:.4f} vs I {maps['I']:.4f}"
    for v in ("R", "U", "RU"):
        assert maps["FULL"] >= maps[v] - 0.005, f"FULL {maps['FULL']:.4f} vs {v} {maps[v]:.4f}"
    assert time.monotonic() - start < 1800.0
    report(6, "mean MAP " + ", ".join(f"{v}={maps[v]:.4f}" for v in maps))


# --- criterion 7: noise-ratio monotonicity ----------------------------------

def test_criterion_7_noise_ratio_shape(benchmark):
    clean_train, _, _, db, queries = benchmark
    from dchash.trainer import sweep

    rows = sweep(synthetic_defaults(), clean_train, db, queries,
                 "tau", [0.1, 0.3, 0.5, 0.7], [0, 1, 2], noise_seed=1)
    assert all(r["error"] is None for r in rows)
    means = []
    for value in (0.1, 0.3, 0.5, 0.7):
        means.append(float(np.mean([r["map"] for r in rows if r["value"] == value])))
    for a, b in zip(means, means[1:]):
        assert b <= a + 0.01, f"mean MAP rose beyond tolerance: {means}"
    report(7, "mean MAP over tau " + str([round(v, 4) for v in means]))


# --- criterion 8: determinism -----------------------------------------------

def test_criterion_8_determinism(tmp_path, capsys):
    from dchash.cli import main

    root = tmp_path
    data = str(root / "train.dcmh")
    mask_p = str(root / "mask.dcnm")
    db_p = str(root / "db.dcmh")
    test_p = str(root / "test.dcmh")
    ds = generate_synthetic(160, 4, 8, 8, seed=8)
    save_dataset(ds.subset(range(100)), root / "clean.dcmh")
    noisy, mask = inject_noise(ds.subset(range(100)), 0.25, seed=2)
    save_dataset(noisy, data)
    save_mask(mask, mask_p)
    save_dataset(ds.subset(range(100, 140)), db_p)
    save_dataset(ds.subset(range(140, 160)), test_p)

    def train_once(tag):
        ck = str(root / f"{tag}.dcmp")
        rep = str(root / f"{tag}.csv")
        assert main(["train", "--data", data, "--mask", mask_p, "--ckpt", ck,
                     "--report", rep, "--epochs", "4", "--warmup-epochs", "1",
                     "--batch-size", "16", "--lr", "0.5", "--tau", "0.25",
                     "--k", "8", "--eta", "0.0", "--seed", "12"]) == 0
        return open(ck, "rb").read(), open(rep).read()

    ck1, rep1 = train_once("a")
    ck2, rep2 = train_once("b")
    assert ck1 == ck2, "checkpoints differ between identical runs"
    assert rep1 == rep2, "epoch reports differ between identical runs"

    def eval_once(tag):
        prefix = str(root / f"ev_{tag}")
        assert main(["eval", "--ckpt", str(root / "a.dcmp"), "--retrieval", db_p,
                     "--test", test_p, "--out-prefix", prefix, "--pn", "5,10", "--pr"]) == 0
        return [open(prefix + suffix).read()
                for suffix in ("_ap.csv", "_pn.csv", "_pr.csv", "_summary.json")]

    e1 = eval_once("x")
    e2 = eval_once("y")
    assert e1 == e2, "metric outputs differ between identical eval runs"
    capsys.readouterr()
    report(8, "repeated train and eval runs are byte-identical")


# --- criterion 9: file round-trips ------------------------------------------

def test_criterion_9_round_trip_fidelity(tmp_path):
    rng = np.random.default_rng(99)
    for case in range(100):
        kind = case % 4
        p1 = tmp_path / f"{case}_a.bin"
        p2 = tmp_path / f"{case}_b.bin"
        if kind == 0:
            ds = generate_synthetic(
                int(rng.integers(5, 40)), int(rng.integers(2, 6)),
                int(rng.integers(4, 12)), int(rng.integers(4, 12)),
                labels_per_instance=(1, 2), seed=int(rng.integers(0, 1000)),
            )
            save_dataset(ds, p1)
            save_dataset(load_dataset(p1), p2)
        elif kind == 1:
            ds = generate_synthetic(40, 5, 8, 8, seed=int(rng.integers(0, 1000)))
            _, mask = inject_noise(ds, float(rng.uniform(0.1, 0.5)), int(rng.integers(0, 1000)))
            save_mask(mask, p1)
            save_mask(load_mask(p1), p2)
        elif kind == 2:
            params = init_params(
                int(rng.integers(4, 10)), int(rng.integers(4, 10)),
                int(rng.integers(2, 6)), int(rng.integers(4, 20)),
                h=int(rng.integers(4, 12)), p=int(rng.integers(4, 12)),
                seed=int(rng.integers(0, 1000)),
            )
            save_checkpoint(params, p1)
            save_checkpoint(load_checkpoint(p1), p2)
        else:
            n = int(rng.integers(1, 30))
            k = int(rng.integers(1, 130))
            codes = np.where(rng.random((n, k)) > 0.5, 1.0, -1.0)
            labels = rng.integers(0, 2, (n, int(rng.integers(1, 6)))).astype(np.uint8)
            index = build_index(codes, labels)
            save_index(index, p1)
            save_index(load_index(p1), p2)
        assert p1.read_bytes() == p2.read_bytes(), f"case {case} round trip not byte-identical"
    report(9, "100 randomized save/load/save cycles byte-identical")
