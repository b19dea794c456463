import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from duograder.metrics import (BucketReport, CrossEvalMatrix, RatingPair,
                               bucket_qwk, consistency, crosseval_matrix, qwk,
                               round_half_away, welch_t_test, MetricRecord,
                               render_metric_table, write_metric_records)


def qwk_brute_force(a, b, lo, hi):
    """Independent oracle: explicit O, E, w matrices via nested loops."""
    n = hi - lo + 1
    observed = [[0.0] * n for _ in range(n)]
    for x, y in zip(a, b):
        observed[x - lo][y - lo] += 1.0
    total = len(a)
    for i in range(n):
        for j in range(n):
            observed[i][j] /= total
    row = [sum(observed[i][j] for j in range(n)) for i in range(n)]
    col = [sum(observed[i][j] for i in range(n)) for j in range(n)]
    numerator = denominator = 0.0
    for i in range(n):
        for j in range(n):
            w = (i - j) ** 2 / (n - 1) ** 2
            numerator += w * observed[i][j]
            denominator += w * row[i] * col[j]
    if denominator == 0.0:
        return 1.0
    return 1.0 - numerator / denominator


class TestQwk:
    def test_perfect_agreement(self):
        pair = RatingPair((0, 1, 2, 3), (0, 1, 2, 3), (0, 3))
        assert qwk(pair) == 1.0

    def test_perfect_disagreement_binary(self):
        # O has all mass off-diagonal (1.0); E is uniform 0.25 each cell;
        # kappa = 1 - 1/0.5 = -1, confirmed by the brute-force oracle.
        pair = RatingPair((0, 0, 1, 1), (1, 1, 0, 0), (0, 1))
        assert qwk(pair) == pytest.approx(-1.0, abs=1e-12)
        assert qwk_brute_force([0, 0, 1, 1], [1, 1, 0, 0], 0, 1) == pytest.approx(-1.0)

    def test_constant_identical_raters_zero_denominator(self):
        pair = RatingPair((5, 5, 5, 5), (5, 5, 5, 5), (0, 10))
        assert qwk(pair) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            RatingPair((1, 2), (1,), (0, 5))

    def test_out_of_range_value(self):
        with pytest.raises(ValueError):
            RatingPair((1, 6), (1, 2), (0, 5))

    def test_rounding_real_valued_ratings(self):
        pair = RatingPair.of([1.5, 2.4, -0.0], [2, 2, 0], (0, 5))
        assert pair.a == (2, 2, 0)

    @given(st.data())
    @settings(max_examples=150, deadline=None)
    def test_matches_brute_force(self, data):
        lo = data.draw(st.integers(-3, 5))
        hi = lo + data.draw(st.integers(1, 12))
        n = data.draw(st.integers(1, 40))
        a = data.draw(st.lists(st.integers(lo, hi), min_size=n, max_size=n))
        b = data.draw(st.lists(st.integers(lo, hi), min_size=n, max_size=n))
        ours = qwk(RatingPair(tuple(a), tuple(b), (lo, hi)))
        assert ours == pytest.approx(qwk_brute_force(a, b, lo, hi), abs=1e-9)

    @given(st.data())
    @settings(max_examples=80, deadline=None)
    def test_symmetry_and_shift_invariance(self, data):
        lo = data.draw(st.integers(0, 3))
        hi = lo + data.draw(st.integers(1, 8))
        n = data.draw(st.integers(2, 30))
        a = tuple(data.draw(st.lists(st.integers(lo, hi), min_size=n, max_size=n)))
        b = tuple(data.draw(st.lists(st.integers(lo, hi), min_size=n, max_size=n)))
        shift = data.draw(st.integers(-4, 4))
        base = qwk(RatingPair(a, b, (lo, hi)))
        assert qwk(RatingPair(b, a, (lo, hi))) == pytest.approx(base, abs=1e-12)
        assert qwk(RatingPair(a, a, (lo, hi))) == 1.0
        shifted = qwk(RatingPair(tuple(x + shift for x in a),
                                 tuple(x + shift for x in b),
                                 (lo + shift, hi + shift)))
        assert shifted == pytest.approx(base, abs=1e-12)


class TestRoundHalfAway:
    @pytest.mark.parametrize("x,expected", [
        (2.5, 3), (-2.5, -3), (2.4, 2), (11.0, 11), (4.5, 5), (0.5, 1), (-0.5, -1)])
    def test_values(self, x, expected):
        assert round_half_away(x) == expected


class TestConsistency:
    def test_identical_trials(self):
        fraction, finals = consistency([[3, 4], [3, 4], [3, 4]])
        assert fraction == 1.0 and finals == [3, 4]

    def test_partial_agreement(self):
        fraction, finals = consistency([[1, 2], [1, 3], [1, 2]])
        assert fraction == 0.5
        assert finals == [1, pytest.approx(7 / 3)]

    def test_total_disagreement(self):
        fraction, _ = consistency([[1, 2], [2, 3]])
        assert fraction == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            consistency([[1, 2], [1]])

    def test_needs_two_trials(self):
        with pytest.raises(ValueError):
            consistency([[1, 2]])

    @given(trials=st.lists(
        st.lists(st.integers(0, 10), min_size=4, max_size=4),
        min_size=2, max_size=5))
    def test_permutation_invariance(self, trials):
        fraction, _ = consistency(trials)
        assert consistency(list(reversed(trials)))[0] == fraction


class TestBucketQwk:
    def test_single_top_bucket_perfect(self):
        predictions = [(3, 1.0), (4, 1.0), (5, 1.0)]
        report = bucket_qwk(predictions, [3, 4, 5], score_range=(0, 5))
        assert report.counts == (0, 0, 0, 0, 3)
        assert report.qwks[-1] == 1.0

    def test_undersized_buckets_undefined(self):
        report = bucket_qwk([(1, 0.1), (2, 0.9)], [1, 2],
                            edges=[0, 0.2, 1.0], score_range=(0, 5))
        assert report.counts == (1, 1)
        assert report.qwks == (None, None)

    def test_counts_cover_all_samples(self):
        rng = np.random.default_rng(7)
        predictions = [(int(rng.integers(0, 11)), float(rng.uniform()))
                       for _ in range(300)]
        truth = [int(rng.integers(0, 11)) for _ in range(300)]
        report = bucket_qwk(predictions, truth, score_range=(0, 10))
        assert sum(report.counts) == 300

    def test_monotone_with_confidence_correlated_noise(self):
        # noise shrinks with confidence, so the per-bucket kappa must climb
        rng = np.random.default_rng(11)
        n = 4000
        truth = rng.integers(0, 11, size=n)
        conf = rng.uniform(0, 1, size=n)
        sigma = 5.0 * (1.0 - conf) ** 1.5
        noisy = np.clip(np.round(truth + rng.normal(0, sigma)), 0, 10).astype(int)
        predictions = list(zip(noisy.tolist(), conf.tolist()))
        report = bucket_qwk(predictions, truth.tolist(), score_range=(0, 10))
        values = [q for q in report.qwks if q is not None]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_rejects_bad_edges(self):
        with pytest.raises(ValueError):
            bucket_qwk([(1, 0.5)], [1], edges=[0, 0.9], score_range=(0, 5))

    def test_empty_inputs(self):
        with pytest.raises(ValueError):
            bucket_qwk([], [], score_range=(0, 5))


class TestWelch:
    def test_identical_groups(self):
        result = welch_t_test([1, 2, 3], [1, 2, 3])
        assert result.diff_of_means == 0.0
        assert result.t_statistic == 0.0
        assert result.p_value == 1.0

    def test_separated_groups_significant(self):
        a = [0.0, 0.0, 0.0, 1e-9]
        b = [1.0, 1.0, 1.0, 1.0 + 1e-9]
        result = welch_t_test(a, b)
        assert result.p_value < 0.01

    def test_matches_scipy_reference(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            a = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 3),
                           size=rng.integers(2, 40))
            b = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 3),
                           size=rng.integers(2, 40))
            ours = welch_t_test(a.tolist(), b.tolist())
            ref = stats.ttest_ind(a, b, equal_var=False)
            assert ours.t_statistic == pytest.approx(ref.statistic, abs=1e-9)
            assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-6)

    def test_antisymmetry(self):
        a, b = [1.0, 2.0, 4.0], [2.0, 5.0, 9.0]
        fwd = welch_t_test(a, b)
        rev = welch_t_test(b, a)
        assert fwd.t_statistic == pytest.approx(-rev.t_statistic)
        assert fwd.p_value == pytest.approx(rev.p_value)

    def test_undersized_group(self):
        with pytest.raises(ValueError):
            welch_t_test([1.0], [1.0, 2.0])

    def test_zero_variance_both(self):
        with pytest.raises(ValueError):
            welch_t_test([1.0, 1.0], [2.0, 2.0])

    def test_null_calibration(self):
        rng = np.random.default_rng(2024)
        rejections = 0
        draws = 2000
        for _ in range(draws):
            a = rng.normal(0, 1, size=30)
            b = rng.normal(0, 1, size=30)
            if welch_t_test(a.tolist(), b.tolist()).p_value < 0.05:
                rejections += 1
        assert 0.03 * draws <= rejections <= 0.07 * draws


class TestCrossEvalMatrix:
    def test_two_sets_perfect(self):
        pair = RatingPair((1, 2, 3), (1, 2, 3), (0, 5))
        matrix = crosseval_matrix({("1", "2"): pair, ("2", "1"): pair})
        assert matrix.cell("1", "2") == 1.0
        assert matrix.cell("2", "1") == 1.0
        assert matrix.values[0][0] is None

    def test_eight_sets_fill_56_cells(self):
        pair = RatingPair((0, 1), (0, 1), (0, 1))
        cells = {(str(i), str(j)): pair
                 for i in range(1, 9) for j in range(1, 9) if i != j}
        matrix = crosseval_matrix(cells)
        filled = sum(1 for row in matrix.values for v in row if v is not None)
        assert len(matrix.set_ids) == 8 and filled == 56

    def test_symmetric_inputs_give_symmetric_matrix(self):
        rng = np.random.default_rng(5)
        ids = ["a", "b", "c"]
        cells = {}
        for i, x in enumerate(ids):
            for y in ids[i + 1:]:
                a = tuple(int(v) for v in rng.integers(0, 6, size=20))
                b = tuple(int(v) for v in rng.integers(0, 6, size=20))
                cells[(x, y)] = RatingPair(a, b, (0, 5))
                cells[(y, x)] = RatingPair(a, b, (0, 5))
        matrix = crosseval_matrix(cells)
        for i in range(3):
            for j in range(3):
                assert matrix.values[i][j] == matrix.values[j][i]

    def test_render_marks_diagonal(self):
        pair = RatingPair((0, 1), (1, 0), (0, 1))
        text = crosseval_matrix({("1", "2"): pair, ("2", "1"): pair}).render_text()
        assert "-" in text and "train\\test" in text


class TestReportRendering:
    def test_records_round_trip(self, tmp_path):
        records = [MetricRecord("qwk", 0.5, {"set": "1"}),
                   MetricRecord("count", 10, {})]
        path = tmp_path / "metrics.ndjson"
        write_metric_records(path, records)
        lines = [line for line in path.read_text().splitlines() if line]
        assert len(lines) == 2
        assert '"metric": "qwk"' in lines[0]

    def test_table_layout(self):
        text = render_metric_table([MetricRecord("qwk", 0.1234567, {"set": "1"})])
        assert "qwk[set=1]" in text and "0.1235" in text
