import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dismisl import pooling as pl
from dismisl.errors import InsufficientInstancesError, ValidationError
from dismisl.network import AttentionLayer


def test_percentile_indices_examples():
    scheme = pl.PercentileScheme((0, 50, 100), 1)
    np.testing.assert_array_equal(pl.percentile_indices(5, scheme).ravel(), [0, 2, 4])
    np.testing.assert_array_equal(pl.percentile_indices(5, pl.PercentileScheme((0,), 3)), [[0, 1, 2]])
    # round(0.001 * 11999) = round(11.999) = 12
    assert pl.percentile_indices(12000, pl.PercentileScheme((0.1,), 1))[0, 0] == 12


def test_percentile_windows_shift_at_top():
    np.testing.assert_array_equal(pl.percentile_indices(6, pl.PercentileScheme((100,), 5)), [[1, 2, 3, 4, 5]])


def test_percentile_half_up_rounding():
    # 50% of (4 - 1) = 1.5 rounds up
    assert pl.percentile_indices(4, pl.PercentileScheme((50,), 1))[0, 0] == 2


def test_scheme_validation():
    with pytest.raises(ValidationError):
        pl.PercentileScheme((), 1)
    with pytest.raises(ValidationError):
        pl.PercentileScheme((10, 5), 1)
    with pytest.raises(ValidationError):
        pl.PercentileScheme((0, 101), 1)
    with pytest.raises(ValidationError):
        pl.PercentileScheme((0, 100), 2)


def test_scenario_presets():
    assert pl.scenario_preset(1).percentiles == (0, 100)
    assert pl.scenario_preset(4).percentiles == (0, 0.1, 1, 5, 95, 99, 99.9, 100)
    s7 = pl.scenario_preset(7)
    assert len(s7) == 13 and 50 in s7.percentiles and s7.k == 1
    with pytest.raises(ValidationError):
        pl.scenario_preset(8)


def test_scenarios_are_nested():
    for i in range(1, 7):
        a = set(pl.scenario_preset(i).percentiles)
        b = set(pl.scenario_preset(i + 1).percentiles)
        assert a < b


def test_pool_min_max():
    strat = pl.PoolingStrategy("percentile", scheme=pl.PercentileScheme((0, 100), 1))
    np.testing.assert_array_equal(pl.pool(strat, np.array([5.0, 1.0, 3.0])), [1.0, 5.0])


def test_top_bottom_ordering():
    strat = pl.PoolingStrategy("top_bottom_k", k=2)
    np.testing.assert_array_equal(pl.pool(strat, np.array([1.0, 2.0, 3.0, 4.0])), [1, 2, 4, 3])


def test_other_strategies():
    scores = np.array([3.0, -1.0, 7.0, 2.0])
    np.testing.assert_allclose(pl.pool(pl.PoolingStrategy("mean_score"), scores), [2.75])
    np.testing.assert_array_equal(pl.pool(pl.PoolingStrategy("max_top_k", k=3), scores), [7, 3, 2])
    feats = np.arange(8.0).reshape(4, 2)
    np.testing.assert_allclose(pl.pool(pl.PoolingStrategy("mean_feature"), scores, feats), [3.0, 4.0])


def _brute_percentile(scores, percentiles, k):
    """Sort, then walk each window by hand."""
    ordered = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    values = [scores[i] for i in ordered]
    n = len(values)
    out = []
    for p in percentiles:
        x = p / 100.0 * (n - 1)
        c = int(x) + (1 if x - int(x) >= 0.5 else 0)
        lo = c - (k - 1) // 2
        lo = max(0, min(lo, n - k))
        out.extend(values[lo:lo + k])
    return out


def test_percentile_matches_brute_force_scenario7_k3():
    scores = np.random.default_rng(5).normal(size=50)
    strat = pl.percentile_strategy(7, 3)
    got = pl.pool(strat, scores)
    assert got.shape == (39,)
    np.testing.assert_array_equal(got, _brute_percentile(list(scores), pl.SCENARIOS[7], 3))


@pytest.mark.parametrize("n", [1, 2, 3, 7, 199, 200, 1001])
@pytest.mark.parametrize("sid", range(1, 8))
def test_percentile_indices_brute_force_many_sizes(n, sid):
    scores = np.random.default_rng(n * 10 + sid).normal(size=n)
    strat = pl.percentile_strategy(sid, 1)
    np.testing.assert_array_equal(pl.pool(strat, scores), _brute_percentile(list(scores), pl.SCENARIOS[sid], 1))


def test_insufficient_instances():
    with pytest.raises(InsufficientInstancesError):
        pl.pool(pl.PoolingStrategy("max_top_k", k=10), np.zeros(5))
    with pytest.raises(InsufficientInstancesError):
        pl.pool(pl.percentile_strategy(1, 5), np.zeros(3))


def test_ties_broken_by_lower_index():
    scores = np.array([1.0, 1.0, 1.0])
    idx = pl.selected_tiles(pl.PoolingStrategy("percentile", scheme=pl.PercentileScheme((0,), 1)), scores)
    assert idx[0, 0] == 0


def _att(seed, hidden=5, dim=4):
    rng = np.random.default_rng(seed)
    return AttentionLayer(rng.normal(size=(dim, hidden)), rng.normal(size=dim), rng.normal(size=dim))


def test_attention_k1_equals_plain_selection():
    rng = np.random.default_rng(0)
    scores, hidden = rng.normal(size=30), rng.normal(size=(30, 5))
    scheme = pl.scenario_preset(7, 1)
    plain = pl.pool(pl.PoolingStrategy("percentile", scheme=scheme), scores)
    np.testing.assert_allclose(pl.attention_pool(scheme, scores, hidden, _att(1)), plain, atol=1e-15)


def test_attention_uniform_logits_give_window_mean():
    rng = np.random.default_rng(1)
    scores, hidden = rng.normal(size=30), rng.normal(size=(30, 5))
    att = AttentionLayer(np.zeros((4, 5)), np.zeros(4), np.ones(4))
    scheme = pl.scenario_preset(3, 3)
    windows = pl.pool(pl.PoolingStrategy("percentile", scheme=scheme), scores).reshape(-1, 3)
    np.testing.assert_allclose(pl.attention_pool(scheme, scores, hidden, att), windows.mean(axis=1), atol=1e-14)


def test_attention_three_term_hand_computation():
    scores = np.array([0.5, -1.0, 2.0])
    hidden = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    att = AttentionLayer(np.array([[1.0, -1.0]]), np.array([0.2]), np.array([2.0]))
    scheme = pl.PercentileScheme((50,), 3)
    logits = [2.0 * np.tanh(h[0] - h[1] + 0.2) for h in hidden]
    w = np.exp(logits) / np.sum(np.exp(logits))
    expected = sum(wi * si for wi, si in zip(w, scores))
    assert pl.attention_pool(scheme, scores, hidden, att)[0] == pytest.approx(expected, abs=1e-14)


ALL_STRATEGIES = [
    pl.percentile_strategy(7, 3),
    pl.percentile_strategy(2, 1),
    pl.PoolingStrategy("mean_score"),
    pl.PoolingStrategy("max_top_k", k=4),
    pl.PoolingStrategy("top_bottom_k", k=3),
    pl.PoolingStrategy("mean_feature"),
    pl.PoolingStrategy("attention_percentile", scheme=pl.scenario_preset(5, 3)),
]


@pytest.mark.parametrize("strat", ALL_STRATEGIES, ids=lambda s: s.label())
def test_arity_and_permutation_invariance(strat):
    rng = np.random.default_rng(7)
    n, d = 25, 3
    scores, feats, hidden = rng.normal(size=n), rng.normal(size=(n, d)), rng.normal(size=(n, 5))
    att = _att(2)
    out = pl.pool(strat, scores, feats, hidden, att)
    assert out.shape == (strat.arity(d),)
    perm = rng.permutation(n)
    out2 = pl.pool(strat, scores[perm], feats[perm], hidden[perm], att)
    np.testing.assert_allclose(out2, out, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 60), st.integers(0, 2 ** 32 - 1), st.sampled_from(range(1, 8)), st.sampled_from([1, 3]))
def test_monotone_relabeling(n, seed, sid, k):
    scores = np.random.default_rng(seed).normal(size=n)
    strat = pl.percentile_strategy(sid, k)
    np.testing.assert_allclose(pl.pool(strat, np.exp(scores)), np.exp(pl.pool(strat, scores)), rtol=1e-15)


def test_strategy_json_fragments():
    s = pl.PoolingStrategy.from_dict({"kind": "percentile", "scenario": 7, "k": 3})
    assert s.scheme == pl.scenario_preset(7, 3)
    s2 = pl.PoolingStrategy.from_dict(s.to_dict())
    assert s2 == s
    assert pl.PoolingStrategy.from_dict({"kind": "top_bottom_k", "k": 10}).arity() == 20
    with pytest.raises(ValidationError):
        pl.PoolingStrategy.from_dict({"kind": "percentile"})
    with pytest.raises(ValidationError):
        pl.PoolingStrategy.from_dict({"kind": "nope"})
