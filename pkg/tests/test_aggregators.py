import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedrobust import aggregators as agg
from fedrobust.acceptance import oracle_extremes, oracle_krum_index, oracle_median, oracle_scores, oracle_trimmed_mean
from fedrobust.core import RngStream


def update_sets(min_n=2, max_n=12, max_d=6):
    return st.integers(min_n, max_n).flatmap(
        lambda n: st.integers(1, max_d).flatmap(
            lambda d: arrays(np.float64, (n, d), elements=st.floats(-100, 100, allow_nan=False, width=32))
        )
    )


def kahan_mean(rows):
    d = len(rows[0])
    out = []
    for k in range(d):
        total, comp = 0.0, 0.0
        for r in rows:
            y = r[k] - comp
            t = total + y
            comp = (t - total) - y
            total = t
        out.append(total / len(rows))
    return out


# ------------------------------------------------------------ fedavg


def test_fedavg_examples(rng):
    u = rng.standard_normal(4)
    np.testing.assert_array_equal(agg.fedavg([u, u, u]), u)
    np.testing.assert_array_equal(agg.fedavg([[1, 0], [3, 0]]), [2, 0])
    rows = rng.standard_normal((9, 5)).tolist()
    np.testing.assert_allclose(agg.fedavg(rows), kahan_mean(rows), rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        agg.fedavg([])


# ------------------------------------------------------------ trimmed mean


def test_trimmed_mean_examples(rng):
    assert agg.trimmed_mean([[1], [2], [3], [4], [100]], 1)[0] == 3.0
    G = rng.standard_normal((7, 3))
    np.testing.assert_allclose(agg.trimmed_mean(G, 0), agg.fedavg(G), rtol=1e-15)
    with pytest.raises(ValueError):
        agg.trimmed_mean(G, 4)


def test_trimmed_mean_sort_oracle():
    rnd = random.Random(10)
    for _ in range(1000):
        n, d = rnd.randint(3, 25), rnd.randint(1, 8)
        rows = [[rnd.gauss(0, 3) for _ in range(d)] for _ in range(n)]
        c = rnd.randint(0, (n - 1) // 2)
        np.testing.assert_allclose(agg.trimmed_mean(rows, c), oracle_trimmed_mean(rows, c), rtol=1e-12, atol=1e-12)


# ------------------------------------------------------------ median


def test_median_examples():
    assert agg.coordinate_median([[5], [1], [9]])[0] == 5
    assert agg.coordinate_median([[1], [3]])[0] == 2.0
    with pytest.raises(ValueError):
        agg.coordinate_median([])


def test_median_selection_oracle():
    rnd = random.Random(11)
    for _ in range(500):
        n, d = rnd.randint(1, 25), rnd.randint(1, 8)
        rows = [[rnd.gauss(0, 3) for _ in range(d)] for _ in range(n)]
        assert agg.coordinate_median(rows).tolist() == oracle_median(rows)


# ------------------------------------------------------------ krum


def test_krum_examples():
    same = [[1.0, 2.0]] * 5
    assert agg.krum_select(same, 1) == 0
    pts = [[0, 0], [0.1, 0], [0, 0.1], [0.1, 0.1], [0.05, 0.05], [50, 50]]
    assert agg.krum_select(pts, 1) != 5
    with pytest.raises(ValueError):
        agg.krum(pts, 4)


def test_krum_exhaustive_oracle():
    rnd = random.Random(12)
    for _ in range(300):
        n, d = rnd.randint(3, 12), rnd.randint(1, 6)
        rows = [[rnd.gauss(0, 1) for _ in range(d)] for _ in range(n)]
        f = rnd.randint(0, n - 3)
        assert agg.krum_select(rows, f) == oracle_krum_index(rows, f)


# ------------------------------------------------------------ extremes and scores


def test_extreme_vectors_examples():
    hi, lo = agg.extreme_vectors([[1, 5], [3, 2]])
    assert hi.tolist() == [3, 5] and lo.tolist() == [1, 2]
    hi, lo = agg.extreme_vectors([[4.0, -1.0]])
    assert hi.tolist() == lo.tolist() == [4.0, -1.0]
    rnd = random.Random(13)
    for _ in range(200):
        rows = [[rnd.gauss(0, 1) for _ in range(4)] for _ in range(rnd.randint(1, 9))]
        hi, lo = agg.extreme_vectors(rows)
        assert (hi.tolist(), lo.tolist()) == oracle_extremes(rows)


def test_closeness_scores_hand_example():
    # g_max = 10, g_min = 1: scores min(9,0)=0, min(8,1)=1, min(0,9)=0
    table = agg.closeness_scores([[1.0], [2.0], [10.0]])
    assert table.scores.tolist() == [0.0, 1.0, 0.0]
    assert table.selected == 1


def test_closeness_scores_identical_updates():
    table = agg.closeness_scores([[3.0, 1.0]] * 4)
    assert not np.any(table.scores) and table.selected == 0


def test_closeness_scores_oracle_and_dominating_client():
    rnd = random.Random(14)
    for _ in range(300):
        n, d = rnd.randint(2, 10), rnd.randint(1, 5)
        rows = [[rnd.gauss(0, 1) for _ in range(d)] for _ in range(n)]
        if rnd.random() < 0.5:
            # make client 0 the coordinate-wise maximum everywhere
            rows[0] = [max(r[k] for r in rows) + rnd.random() for k in range(d)]
        table = agg.closeness_scores(rows)
        oscores, obest = oracle_scores(rows)
        np.testing.assert_allclose(table.scores, oscores, rtol=1e-12, atol=1e-12)
        assert table.selected == obest
        hi, _ = oracle_extremes(rows)
        if rows[0] == hi:
            for j in range(1, n):
                assert table.scores[0] <= math.dist(rows[j], hi) + 1e-12


@given(update_sets(), st.floats(0.01, 100))
def test_selection_invariant_under_positive_scaling(G, gamma):
    base = agg.closeness_scores(G)
    scaled = agg.closeness_scores(G * gamma)
    np.testing.assert_allclose(scaled.scores, base.scores * gamma, rtol=1e-9, atol=1e-9)
    if np.sum(base.scores == base.scores.max()) == 1 and np.ptp(base.scores) > 1e-6 * max(1.0, base.scores.max()):
        top2 = np.sort(base.scores)[-2:]
        if top2[1] - top2[0] > 1e-9 * max(1.0, top2[1]):
            assert scaled.selected == base.selected


# ------------------------------------------------------------ synthetic augmentation


def test_foundation_hand_examples():
    ex = [[1.0], [2.0], [10.0]]
    aug, table = agg.synthetic_augment(ex, 2)
    assert sorted(aug[:, 0].tolist()) == [1, 2, 2, 2, 10]
    med, _ = agg.foundation_aggregate(ex, agg.AggregatorSpec("foundation_median", synthetic_m=2))
    trim, _ = agg.foundation_aggregate(ex, agg.AggregatorSpec("foundation_trim", trim_c=1, synthetic_m=2))
    assert med[0] == 2.0 and trim[0] == 2.0
    assert table.selected == 1


def test_foundation_m0_is_base_rule():
    rnd = random.Random(15)
    for _ in range(1000):
        n, d = rnd.randint(2, 20), rnd.randint(1, 6)
        G = np.array([[rnd.gauss(0, 2) for _ in range(d)] for _ in range(n)])
        c = rnd.randint(0, (n - 1) // 2)
        out, _ = agg.foundation_aggregate(G, agg.AggregatorSpec("foundation_trim", trim_c=c))
        assert np.array_equal(out, agg.trimmed_mean(G, c))
        out, _ = agg.foundation_aggregate(G, agg.AggregatorSpec("foundation_median"))
        assert np.array_equal(out, agg.coordinate_median(G))


def test_foundation_trim_precondition():
    with pytest.raises(ValueError):
        agg.foundation_aggregate([[1.0], [2.0]], agg.AggregatorSpec("foundation_trim", trim_c=2, synthetic_m=1))


@settings(max_examples=60)
@given(update_sets(min_n=2), st.integers(0, 6), st.randoms(use_true_random=False))
def test_permutation_invariance(G, m, rnd):
    perm = list(range(G.shape[0]))
    rnd.shuffle(perm)
    P = G[perm]
    np.testing.assert_allclose(agg.fedavg(G), agg.fedavg(P), rtol=1e-12, atol=1e-9)
    c = (G.shape[0] - 1) // 2
    np.testing.assert_array_equal(agg.trimmed_mean(G, c), agg.trimmed_mean(P, c))
    np.testing.assert_array_equal(agg.coordinate_median(G), agg.coordinate_median(P))
    assert all(np.array_equal(a, b) for a, b in zip(agg.extreme_vectors(G), agg.extreme_vectors(P)))
    spec = agg.AggregatorSpec("foundation_median", synthetic_m=m)
    a, ta = agg.foundation_aggregate(G, spec)
    b, tb = agg.foundation_aggregate(P, spec)
    # the selected update's value may differ only if several clients tie for the top score
    if np.sum(ta.scores == ta.scores.max()) == 1:
        np.testing.assert_array_equal(a, b)


@given(update_sets(min_n=3), st.integers(0, 8))
def test_outputs_bounded_by_extremes(G, m):
    n = G.shape[0]
    c = (n - 1) // 2
    hi, lo = agg.extreme_vectors(G)
    for out in (agg.trimmed_mean(G, c), agg.coordinate_median(G)):
        assert np.all(out <= hi + 1e-9) and np.all(out >= lo - 1e-9)
    aug, _ = agg.synthetic_augment(G, m)
    ahi, alo = agg.extreme_vectors(aug)
    out, _ = agg.foundation_aggregate(G, agg.AggregatorSpec("foundation_trim", trim_c=(n + m - 1) // 2, synthetic_m=m))
    assert np.all(out <= ahi + 1e-9) and np.all(out >= alo - 1e-9)


@given(update_sets(min_n=2), st.integers(1, 10))
def test_variance_reduction_when_selected_is_near_mean(G, m):
    aug, table = agg.synthetic_augment(G, m)
    mean, sd = G.mean(axis=0), G.std(axis=0)
    near = np.abs(G[table.selected] - mean) <= sd
    assert np.all(aug.var(axis=0)[near] <= G.var(axis=0)[near] * (1 + 1e-9) + 1e-12)


@pytest.mark.parametrize("f", [0, 1, 2, 3])
def test_breakdown_sanity_with_benign_consensus(f):
    # f < min(c, n + m - 2c) = 4 adversaries of arbitrary magnitude
    rnd = np.random.default_rng(16 + f)
    u = rnd.standard_normal(5)
    spec = agg.AggregatorSpec("foundation_trim", trim_c=4, synthetic_m=5)
    for _ in range(50):
        G = np.vstack([np.tile(u, (10, 1)), rnd.standard_normal((f, 5)) * 1e6])
        out, _ = agg.foundation_aggregate(G, spec)
        assert np.array_equal(out, u)


def test_benign_selection_pads_interior():
    rnd = np.random.default_rng(21)
    u = rnd.standard_normal(5)
    spec = agg.AggregatorSpec("foundation_trim", trim_c=4, synthetic_m=5)
    hits = 0
    for f in range(4):
        for _ in range(100):
            G = np.vstack([np.tile(u, (10, 1)), rnd.standard_normal((f, 5)) * 1e6])
            out, table = agg.foundation_aggregate(G, spec)
            if table.selected < 10:
                hits += 1
                assert np.array_equal(out, u)
    assert hits > 100


def test_single_adversary_ties_with_benign():
    # one outlier b: ||u - g_max|| = ||(b - u)+|| and ||u - g_min|| = ||(b - u)-||, mirrored for b
    u, b = np.array([0.0, 1.0, -2.0]), np.array([5.0, -7.0, 3.0])
    table = agg.closeness_scores(np.vstack([np.tile(u, (4, 1)), b]))
    assert table.scores[0] == pytest.approx(table.scores[4])
    assert table.selected == 0


# ------------------------------------------------------------ gaussian synthesis


def test_gaussian_synthesis_constant_coordinate():
    G = np.array([[1.0, 0.0], [1.0, 2.0], [1.0, 4.0]])
    aug = agg.gaussian_augment(G, 50, RngStream(1, "g"))
    assert np.all(aug[3:, 0] == 1.0)
    spec = agg.AggregatorSpec("gaussian_median", synthetic_m=0)
    assert np.array_equal(agg.gaussian_synthetic_aggregate(G, spec, RngStream(0)), agg.coordinate_median(G))


def test_gaussian_synthesis_moments():
    G = np.array([[0.0], [1.0], [5.0]])
    aug = agg.gaussian_augment(G, 100_000, RngStream(2, "g"))[3:, 0]
    mu, sd = G.mean(), G.std()
    se_mean = sd / math.sqrt(aug.size)
    se_sd = sd / math.sqrt(2 * aug.size)
    assert abs(aug.mean() - mu) <= 3 * se_mean
    assert abs(aug.std() - sd) <= 3 * se_sd


def test_gaussian_synthesis_deterministic():
    G = np.random.default_rng(0).standard_normal((5, 3))
    a = agg.gaussian_augment(G, 4, RngStream(3, "g"))
    b = agg.gaussian_augment(G, 4, RngStream(3, "g"))
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------ estimate_f


def test_estimate_f_two_far_clients():
    rnd = np.random.default_rng(17)
    benign = np.array([1.0, 1.0, 0.0, 0.0]) + rnd.standard_normal((8, 4)) * 0.01
    bad = np.array([-1.0, 0.0, 1.0, -1.0]) + rnd.standard_normal((2, 4)) * 0.01
    assert agg.estimate_f(np.vstack([benign, bad])) == 2


def test_estimate_f_identical_updates():
    assert agg.estimate_f([[1.0, 2.0]] * 6) == 0


def test_estimate_f_permutation_invariant():
    rnd = np.random.default_rng(18)
    for _ in range(50):
        n = int(rnd.integers(3, 15))
        G = rnd.standard_normal((n, 5))
        G[: n // 3] += 4.0
        base = agg.estimate_f(G)
        for _ in range(3):
            assert agg.estimate_f(G[rnd.permutation(n)]) == base


def test_cosine_distance_zero_vector():
    D = agg.cosine_distance_matrix([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    assert D[0, 1] == D[1, 0] == D[0, 2] == 1.0
    assert D[1, 2] == pytest.approx(2.0)
    assert D[0, 0] == 0.0


# ------------------------------------------------------------ dispatch


@pytest.mark.parametrize("rule", agg.RULES)
def test_aggregate_dispatch(rule):
    G = np.random.default_rng(19).standard_normal((10, 4))
    spec = agg.AggregatorSpec(rule, trim_c=2, synthetic_m=5, assumed_f=2)
    out, info = agg.aggregate(G, spec, RngStream(0))
    assert out.shape == (4,) and np.all(np.isfinite(out))
    if spec.augments:
        assert info["augmented"].shape == (15, 4)


def test_aggregate_with_estimated_f():
    rnd = np.random.default_rng(20)
    benign = np.ones(4) + rnd.standard_normal((8, 4)) * 0.01
    bad = -np.ones(4) * 5 + rnd.standard_normal((2, 4)) * 0.01
    _, info = agg.aggregate(np.vstack([benign, bad]), agg.AggregatorSpec("trim_mean", estimate_f=True), RngStream(0))
    assert info["trim_c"] == 2


def test_spec_rejects_unknown_rule():
    with pytest.raises(ValueError):
        agg.AggregatorSpec("bulyan")
