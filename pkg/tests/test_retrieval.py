import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dchash.dataset import FormatError
from dchash.retrieval import (
    PackedCodeIndex,
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
    rank_pr_curve,
    relevance_matrix,
    save_index,
    unpack_codes,
)

RNG = np.random.default_rng(77)


def rand_binary(n, k, rng=RNG):
    return np.where(rng.random((n, k)) > 0.5, 1.0, -1.0)


def naive_hamming(a, b):
    return int(np.sum(a != b))


class TestPacking:
    @pytest.mark.parametrize("k", [1, 7, 32, 63, 64, 65, 128])
    def test_round_trip(self, k):
        codes = rand_binary(9, k)
        np.testing.assert_array_equal(unpack_codes(pack_codes(codes), k), codes)

    def test_word_count(self):
        assert pack_codes(rand_binary(3, 64)).shape == (3, 1)
        assert pack_codes(rand_binary(3, 65)).shape == (3, 2)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pack_codes(rand_binary(2, 8), k=16)

    def test_all_positive_is_all_ones_bits(self):
        packed = pack_codes(np.ones((1, 64)))
        assert packed[0, 0] == np.uint64(0xFFFFFFFFFFFFFFFF)


class TestHammingDistance:
    def test_identical_and_opposite(self):
        c = rand_binary(1, 40)[0]
        assert hamming_distance(c, c) == 0
        assert hamming_distance(c, -c) == 40

    @pytest.mark.parametrize("k", [5, 64, 100])
    def test_matches_naive(self, k):
        for _ in range(30):
            a = rand_binary(1, k)[0]
            b = rand_binary(1, k)[0]
            assert hamming_distance(a, b) == naive_hamming(a, b)

    def test_equals_half_k_minus_dot(self):
        for _ in range(20):
            a = rand_binary(1, 48)[0]
            b = rand_binary(1, 48)[0]
            assert hamming_distance(a, b) == (48 - int(a @ b)) // 2

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            hamming_distance(np.ones(8), np.ones(9))

    @given(st.integers(1, 96), st.data())
    @settings(max_examples=60, deadline=None)
    def test_metric_properties(self, k, data):
        bits = st.lists(st.sampled_from([-1.0, 1.0]), min_size=k, max_size=k)
        a = np.array(data.draw(bits))
        b = np.array(data.draw(bits))
        c = np.array(data.draw(bits))
        dab = hamming_distance(a, b)
        assert dab == hamming_distance(b, a)
        assert 0 <= dab <= k
        assert hamming_distance(a, c) <= dab + hamming_distance(b, c)


class TestRanking:
    def test_sorted_with_id_tie_break(self):
        db = np.array([
            [1, 1, 1, 1],
            [1, 1, 1, -1],
            [-1, 1, 1, 1],
            [-1, -1, -1, -1],
        ], dtype=float)
        index = build_index(db, np.ones((4, 1), dtype=np.uint8))
        res = rank(np.ones(4), index)
        np.testing.assert_array_equal(res.order, [0, 1, 2, 3])
        np.testing.assert_array_equal(res.distances, [0, 1, 1, 4])

    def test_empty_index(self):
        index = PackedCodeIndex(
            packed=np.zeros((0, 1), dtype="<u8"), k=8, labels=np.zeros((0, 2), dtype=np.uint8)
        )
        with pytest.raises(ValueError):
            rank(np.ones(8), index)

    def test_distances_match_unpacked(self):
        db = rand_binary(30, 72)
        q = rand_binary(1, 72)[0]
        index = build_index(db, np.ones((30, 1), dtype=np.uint8))
        res = rank(q, index)
        for pos, i in enumerate(res.order):
            assert res.distances[pos] == naive_hamming(q, db[i])


class TestAveragePrecision:
    def test_worked_example(self):
        # relevant at ranks 1 and 3: (1/1 + 2/3) / 2
        assert average_precision([1, 0, 1]) == pytest.approx(0.8333333333333333, abs=1e-12)

    def test_perfect_and_empty(self):
        assert average_precision([1, 1, 1]) == 1.0
        assert average_precision([0, 0, 0]) == 0.0

    def test_single_late_hit(self):
        assert average_precision([0, 0, 0, 1]) == pytest.approx(0.25)

    @given(st.lists(st.booleans(), min_size=1, max_size=50))
    @settings(max_examples=80, deadline=None)
    def test_bounded(self, rel):
        ap = average_precision(rel)
        assert 0.0 <= ap <= 1.0
        if all(rel):
            assert ap == 1.0


class TestMetrics:
    def make_setup(self, seed=0, n_db=40, n_q=6, k=16, m=4):
        rng = np.random.default_rng(seed)
        db = rand_binary(n_db, k, rng)
        q = rand_binary(n_q, k, rng)
        db_labels = rng.integers(0, 2, (n_db, m)).astype(np.uint8)
        db_labels[:, 0] |= db_labels.sum(axis=1) == 0
        q_labels = rng.integers(0, 2, (n_q, m)).astype(np.uint8)
        q_labels[:, 0] |= q_labels.sum(axis=1) == 0
        index = build_index(db, db_labels)
        rankings = [rank(q[i], index) for i in range(n_q)]
        rel = relevance_matrix(q_labels, db_labels)
        return db, q, index, rankings, rel

    def test_map_matches_per_query_mean(self):
        _, _, _, rankings, rel = self.make_setup()
        aps = [average_precision(rel[i][r.order]) for i, r in enumerate(rankings)]
        assert mean_average_precision(rankings, rel) == pytest.approx(np.mean(aps))

    def test_precision_at_n(self):
        _, _, _, rankings, rel = self.make_setup()
        out = precision_at_n(rankings, rel, [1, 5, 10])
        for N, v in out.items():
            manual = np.mean([rel[i][r.order[:N]].mean() for i, r in enumerate(rankings)])
            assert v == pytest.approx(manual)

    def test_precision_at_n_rejects_nonpositive(self):
        _, _, _, rankings, rel = self.make_setup()
        with pytest.raises(ValueError):
            precision_at_n(rankings, rel, [0])

    def test_pr_curve_endpoints(self):
        _, _, _, rankings, rel = self.make_setup(k=16)
        rows = pr_curve(rankings, rel, 16)
        assert len(rows) == 17
        # at radius k everything is retrieved: recall 1, precision = base rate
        r_last, p_last, rec_last = rows[-1]
        assert r_last == 16 and rec_last == pytest.approx(1.0)
        base = np.mean([rel[i].mean() for i in range(rel.shape[0])])
        assert p_last == pytest.approx(base)
        # recall is monotone in the radius
        recalls = [r[2] for r in rows]
        assert all(a <= b + 1e-12 for a, b in zip(recalls, recalls[1:]))

    def test_pr_curve_empty_retrieval_precision_one(self):
        db = np.ones((2, 8))
        q = -np.ones(8)  # distance 8 from everything
        index = build_index(db, np.ones((2, 1), dtype=np.uint8))
        rows = pr_curve([rank(q, index)], np.ones((1, 2), dtype=bool), 8)
        assert rows[0][1] == 1.0  # radius 0 retrieves nothing
        assert rows[8][1] == 1.0  # everything is relevant here

    def test_rank_pr_curve_final_recall_one(self):
        _, _, _, rankings, rel = self.make_setup()
        rows = rank_pr_curve(rankings, rel)
        assert rows[-1][2] == pytest.approx(1.0)


class TestBoxplotStats:
    def test_separated_populations(self):
        k, m = 16, 3
        centers = np.where(np.random.default_rng(5).random((m, k)) > 0.5, 1.0, -1.0)
        labels = np.zeros((6, m), dtype=np.uint8)
        labels[np.arange(6), np.arange(6) % m] = 1
        codes = centers[np.arange(6) % m].astype(float)  # codes sit on their center
        noise_type = np.array([0, 0, 0, 1, 2, 3], dtype=np.uint8)
        stats = boxplot_stats(codes, centers, labels, noise_type)
        assert stats["clean_in"]["median"] == pytest.approx(1.0)
        assert stats["noisy_in"]["median"] == pytest.approx(1.0)
        assert stats["clean_in"]["median"] > stats["clean_out"]["median"]
        assert set(stats) == {"clean_in", "clean_out", "noisy_in", "noisy_out"}

    def test_all_clean_omits_noisy_groups(self):
        codes = rand_binary(5, 8)
        centers = rand_binary(3, 8)
        labels = np.eye(3, dtype=np.uint8)[np.arange(5) % 3]
        stats = boxplot_stats(codes, centers, labels, np.zeros(5, dtype=np.uint8))
        assert "noisy_in" not in stats and "clean_in" in stats

    def test_quartile_keys(self):
        codes = rand_binary(10, 8)
        centers = rand_binary(4, 8)
        labels = np.eye(4, dtype=np.uint8)[np.arange(10) % 4]
        stats = boxplot_stats(codes, centers, labels, np.zeros(10, dtype=np.uint8))
        q = stats["clean_in"]
        assert list(q) == ["min", "q1", "median", "q3", "max"]
        assert q["min"] <= q["q1"] <= q["median"] <= q["q3"] <= q["max"]


class TestIndexIO:
    def test_round_trip_byte_identical(self, tmp_path):
        codes = rand_binary(12, 20)
        labels = RNG.integers(0, 2, (12, 5)).astype(np.uint8)
        index = build_index(codes, labels)
        p1, p2 = tmp_path / "a.dcix", tmp_path / "b.dcix"
        save_index(index, p1)
        loaded = load_index(p1)
        assert loaded.k == 20
        np.testing.assert_array_equal(loaded.packed, index.packed)
        np.testing.assert_array_equal(loaded.labels, index.labels)
        save_index(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dcix"
        path.write_bytes(b"WHAT" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_index(path)

    def test_truncated(self, tmp_path):
        codes = rand_binary(4, 64)
        index = build_index(codes, np.ones((4, 2), dtype=np.uint8))
        path = tmp_path / "t.dcix"
        save_index(index, path)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(FormatError):
            load_index(path)
