import numpy as np
import pytest

from dismisl import network as nw
from dismisl import pooling as pl
from dismisl.data import FeatureBag
from dismisl.errors import DegenerateBatchError, FormatError, ShapeError
from dismisl.survival import cox_nll_grad

from oracles import central_difference, explicit_head, explicit_scores, max_relative_error


def _small(strategy, d=6, seed=0):
    return nw.init_for_strategy(strategy, d, seed, scorer_hidden=8, head_hidden=(8,), attention_dim=5)


def _batch(seed=0, n_patients=4, n_tiles=10, d=6):
    rng = np.random.default_rng(seed)
    bags = [rng.normal(size=(n_tiles, d)) for _ in range(n_patients)]
    time = rng.exponential(size=n_patients) + 0.1
    event = np.array([1, 0, 1, 1])[:n_patients]
    return bags, time, event


def test_score_tiles_matches_explicit_products():
    params = nw.init_params(4, 2, seed=3, scorer_hidden=5)
    params.scorer[0].bias[:] = np.linspace(-0.5, 0.5, 5)
    x = np.random.default_rng(0).normal(size=(7, 4))
    l1, l2 = params.scorer
    expected = explicit_scores(l1.weights, l1.bias, l2.weights[0], l2.bias[0], x)
    np.testing.assert_allclose(nw.score_tiles(params, x), expected, atol=1e-13)


def test_head_matches_explicit_products():
    params = nw.init_params(3, 4, seed=1, head_hidden=(6, 3))
    v = np.array([0.2, -1.0, 0.7, 1.5])
    layers = [(l.weights, l.bias, l.activation) for l in params.head]
    assert nw.head_forward(params, v) == pytest.approx(explicit_head(layers, v), abs=1e-13)


def test_zero_weights_give_zero_scores_and_bias_output():
    params = nw.init_params(5, 3, seed=0)
    zeroed = params.with_arrays([np.zeros_like(a) for a in params.arrays()])
    assert np.all(nw.score_tiles(zeroed, np.ones((4, 5))) == 0.0)
    zeroed.head[-1].bias[0] = 0.37
    assert nw.head_forward(zeroed, np.ones(3)) == 0.37


def test_final_bias_gradient_is_sum_of_loss_gradient():
    strat = pl.percentile_strategy(3, 1)
    params = _small(strat)
    bags, time, event = _batch(2)
    _, grads = nw.backward(params, bags, strat, time, event)
    risk = nw.predict_risk(params, strat, bags)
    assert grads.head[-1].bias[0] == pytest.approx(cox_nll_grad(risk, time, event).sum(), abs=1e-12)


FD_STRATEGIES = [
    pl.percentile_strategy(1, 1),
    pl.percentile_strategy(7, 3),
    pl.PoolingStrategy("mean_score"),
    pl.PoolingStrategy("max_top_k", k=1),
    pl.PoolingStrategy("top_bottom_k", k=3),
    pl.PoolingStrategy("mean_feature"),
    pl.PoolingStrategy("attention_percentile", scheme=pl.scenario_preset(4, 3)),
]


@pytest.mark.parametrize("strat", FD_STRATEGIES, ids=lambda s: s.label())
def test_gradients_match_finite_differences(strat):
    params = _small(strat, seed=5)
    bags, time, event = _batch(5)
    _, grads = nw.backward(params, bags, strat, time, event)
    arrays = params.arrays()
    numeric = central_difference(lambda: nw.batch_loss(params, bags, strat, time, event), arrays)
    assert max_relative_error(grads.arrays(), numeric) < 1e-4


def test_backward_loss_equals_batch_loss():
    strat = pl.PoolingStrategy("top_bottom_k", k=2)
    params = _small(strat)
    bags, time, event = _batch(1)
    loss, _ = nw.backward(params, bags, strat, time, event)
    assert loss == pytest.approx(nw.batch_loss(params, bags, strat, time, event), abs=1e-12)


def test_selection_gradient_reaches_only_selected_tiles():
    strat = pl.PoolingStrategy("max_top_k", k=1)
    params = _small(strat)
    bags, time, event = _batch(3)
    base = nw.backward(params, bags, strat, time, event)[1].arrays()
    # nudging a tile that stays unselected leaves every gradient unchanged
    scores = nw.score_tiles(params, bags[0])
    low = int(np.argmin(scores))
    moved = [b.copy() for b in bags]
    moved[0][low] *= 0.999
    assert int(np.argmax(nw.score_tiles(params, moved[0]))) == int(np.argmax(scores))
    again = nw.backward(params, moved, strat, time, event)[1].arrays()
    for a, b in zip(base, again):
        np.testing.assert_array_equal(a, b)


def test_degenerate_batch_raises():
    strat = pl.PoolingStrategy("mean_score")
    params = _small(strat)
    bags, time, _ = _batch(0)
    with pytest.raises(DegenerateBatchError):
        nw.backward(params, bags, strat, time, np.zeros(4, dtype=int))


def test_shape_mismatch_raises():
    strat = pl.PoolingStrategy("mean_score")
    params = _small(strat, d=6)
    with pytest.raises(ShapeError):
        nw.predict_risk(params, strat, [np.ones((5, 4))])


def test_init_is_seeded_with_zero_biases_and_fan_in_scale():
    a = nw.init_params(256, 13, seed=9)
    b = nw.init_params(256, 13, seed=9)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert all(np.all(l.bias == 0) for l in a.layers())
    std = a.scorer[0].weights.std()
    assert abs(std - 1 / 16) < 0.2 / 16
    assert a.dims() == {"d": 256, "scorer_hidden": 128, "head_in": 13, "head_hidden": [128], "attention_dim": None}


def test_adam_zero_gradient_is_a_no_op():
    params = nw.init_params(3, 2, seed=0, scorer_hidden=4, head_hidden=(3,))
    state = nw.adam_init(params, lr=1e-2)
    new, state = nw.adam_step(params, params.zeros_like(), state)
    for x, y in zip(params.arrays(), new.arrays()):
        np.testing.assert_array_equal(x, y)
    assert state.step == 1


def test_adam_first_step_closed_form():
    params = nw.init_params(3, 2, seed=0, scorer_hidden=4, head_hidden=(3,))
    grads = params.with_arrays([np.full_like(a, g) for a, g in zip(params.arrays(), np.linspace(-2, 2, 8))])
    new, _ = nw.adam_step(params, grads, nw.adam_init(params, lr=0.01, eps=1e-8))
    for p, g, q in zip(params.arrays(), grads.arrays(), new.arrays()):
        # first bias-corrected step is lr * g / (|g| + eps)
        np.testing.assert_allclose(q, p - 0.01 * g / (np.abs(g) + 1e-8), atol=1e-15)


def test_adam_weight_decay_is_added_to_gradient():
    params = nw.init_params(2, 2, seed=1, scorer_hidden=3, head_hidden=(2,))
    decayed, _ = nw.adam_step(params, params.zeros_like(), nw.adam_init(params, lr=0.1, weight_decay=0.5))
    plain, _ = nw.adam_step(params, params.with_arrays([0.5 * a for a in params.arrays()]), nw.adam_init(params, lr=0.1))
    for a, b in zip(decayed.arrays(), plain.arrays()):
        np.testing.assert_allclose(a, b, atol=1e-15)


def test_adam_is_deterministic():
    strat = pl.percentile_strategy(2, 1)
    bags, time, event = _batch(4)

    def run():
        params = _small(strat, seed=2)
        state = nw.adam_init(params)
        for _ in range(5):
            _, g = nw.backward(params, bags, strat, time, event)
            params, state = nw.adam_step(params, g, state)
        return params

    for a, b in zip(run().arrays(), run().arrays()):
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("strat", [pl.percentile_strategy(7, 3), pl.PoolingStrategy("attention_percentile",
                                   scheme=pl.scenario_preset(2, 3)), pl.PoolingStrategy("mean_feature")],
                         ids=lambda s: s.label())
def test_checkpoint_roundtrip(tmp_path, strat):
    params = _small(strat, seed=8)
    path = tmp_path / "model.ckpt"
    nw.save_checkpoint(path, params, strat, {"epoch": 3})
    back, strat2, meta = nw.load_checkpoint(path)
    assert strat2 == strat and meta == {"epoch": 3}
    for a, b in zip(params.arrays(), back.arrays()):
        assert a.tobytes() == b.tobytes()
    bag = FeatureBag("p", np.random.default_rng(0).normal(size=(12, 6)))
    assert nw.predict_risk(back, strat2, [bag])[0] == nw.predict_risk(params, strat, [bag])[0]


def test_checkpoint_truncated(tmp_path):
    strat = pl.PoolingStrategy("mean_score")
    path = tmp_path / "m.ckpt"
    nw.save_checkpoint(path, _small(strat), strat)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        nw.load_checkpoint(path)
