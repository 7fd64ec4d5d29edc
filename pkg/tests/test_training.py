import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfmed import dualflow as DF, generator as G
from dfmed.numerics import Tensor
from dfmed.training import (THRESHOLD_GRID, AdamState, TrainConfig, TrainingDivergedError, adamw_step,
                            calibrate_act_thresholds, clip_grad_norm, lr_schedule, run_epochs, split_corpus,
                            train_flow, train_generator)
from dfmed.numerics.nn import ParamStore


def _param(values):
    return {"w": Tensor(np.array(values, dtype=np.float64))}


def test_single_adamw_step_matches_hand_calculation(f64):
    cfg = TrainConfig(lr=0.1, weight_decay=0.01, clip_norm=0.0)
    params = _param([1.0, -2.0, 0.5])
    g = np.array([0.3, -0.1, 2.0])
    adamw_step(params, {"w": g.copy()}, AdamState(), cfg)
    # bias-corrected moments after one step are g and g^2
    m_hat, v_hat = g, g * g
    want = np.array([1.0, -2.0, 0.5]) - 0.1 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(params["w"].data, want, atol=1e-7)


def test_two_steps_accumulate_moments(f64):
    cfg = TrainConfig(lr=0.01, weight_decay=0.0, clip_norm=0.0)
    params, state = _param([0.0]), AdamState()
    adamw_step(params, {"w": np.array([1.0])}, state, cfg)
    adamw_step(params, {"w": np.array([3.0])}, state, cfg)
    m = 0.9 * 0.1 * 1 + 0.1 * 3
    v = 0.999 * 0.001 * 1 + 0.001 * 9
    step2 = (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(params["w"].data, [-0.01 * 1.0 - 0.01 * step2], atol=1e-10)


def test_zero_grad_zero_decay_is_identity(f64):
    params = _param([1.5, -0.25])
    adamw_step(params, {"w": np.zeros(2)}, AdamState(), TrainConfig(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(params["w"].data, [1.5, -0.25])


def test_decay_only_step_shrinks_params(f64):
    params = _param([2.0, -4.0])
    adamw_step(params, {"w": np.zeros(2)}, AdamState(), TrainConfig(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(params["w"].data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5), atol=1e-12)


def test_non_finite_gradient_skips_step(f64):
    params, state = _param([1.0]), AdamState()
    assert not adamw_step(params, {"w": np.array([np.nan])}, state, TrainConfig())
    assert state.skipped == 1 and state.step == 0
    np.testing.assert_array_equal(params["w"].data, [1.0])


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)
    small = {"a": np.array([0.3])}
    clip_grad_norm(small, 1.0)
    assert small["a"][0] == 0.3


def test_lr_schedule_examples():
    assert lr_schedule(0, 1e-3, 100, 1100) == 0.0
    assert lr_schedule(100, 1e-3, 100, 1100) == pytest.approx(1e-3)
    assert lr_schedule(600, 1e-3, 100, 1100) == pytest.approx(5e-4)
    assert lr_schedule(1100, 1e-3, 100, 1100) == 0.0
    assert lr_schedule(5, 1e-3, 0, 10) == pytest.approx(5e-4)
    with pytest.raises(ValueError):
        lr_schedule(-1, 1e-3, 10, 100)


def test_lr_schedule_continuous_at_warmup():
    below, at = lr_schedule(99, 1.0, 100, 1000), lr_schedule(100, 1.0, 100, 1000)
    assert abs(at - below) <= 1.0 / 100 + 1e-12
    assert at == 1.0


def test_calibration_separated_probs_picks_lowest_perfect_threshold():
    probs = np.array([[0.9], [0.9], [0.1], [0.1]]).repeat(7, axis=1)
    labels = np.array([[1], [1], [0], [0]]).repeat(7, axis=1)
    np.testing.assert_allclose(calibrate_act_thresholds(probs, labels), 0.15)


def test_calibration_absent_act_falls_back():
    probs = np.full((3, 7), 0.7)
    labels = np.zeros((3, 7))
    labels[:, 0] = 1
    tau = calibrate_act_thresholds(probs, labels)
    assert tau[0] == pytest.approx(0.05)   # every grid value up to 0.7 is perfect; lowest wins
    np.testing.assert_allclose(tau[1:], 0.5)


def test_calibration_shape_mismatch():
    with pytest.raises(ValueError):
        calibrate_act_thresholds(np.zeros((2, 7)), np.zeros((3, 7)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 40))
def test_calibrated_f1_dominates_fixed_half(seed, n):
    rng = np.random.default_rng(seed)
    labels = (rng.random((n, 7)) < 0.3).astype(float)
    probs = np.clip(labels * 0.3 + rng.random((n, 7)) * 0.7, 0, 1)
    tau = calibrate_act_thresholds(probs, labels)
    assert set(np.round(tau, 2)) <= set(THRESHOLD_GRID)
    for j in range(7):
        y = labels[:, j] > 0.5
        if not y.any():
            continue

        def f1(t):
            p = probs[:, j] >= t
            return 2 * np.sum(p & y) / (p.sum() + y.sum())

        assert f1(tau[j]) >= f1(0.5) - 1e-12


def test_split_is_contiguous(small_world):
    corpus = small_world[1]
    tr, va, te = split_corpus(corpus)
    assert (len(tr), len(va), len(te)) == (32, 4, 4)
    assert tr + va + te == list(corpus)
    with pytest.raises(ValueError):
        split_corpus(corpus, (0.5, 0.5, 0.5))


def test_divergence_aborts():
    store = ParamStore(np.random.default_rng(0))
    w = store.normal("w", (2,))

    def make_loss(idx, rng):
        return (w * float("nan")).sum()

    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        run_epochs(store, 4, make_loss, lambda e: (0.0, {}, None), TrainConfig(epochs=1))


def _tiny_flow(vocab, kg, seed=0):
    return DF.FlowModel(DF.FlowConfig(d_model=16, gat_heads=2, ctx_layers=1, ctx_heads=2, seed=seed), vocab, kg)


def test_flow_overfit_loss_decreases_and_is_deterministic(small_world):
    kg, corpus, _, vocab = small_world
    cfg = TrainConfig(lr=1e-2, warmup_steps=5, epochs=10, batch_size=2, seed=1)
    m1 = _tiny_flow(vocab, kg)
    best1, hist1 = train_flow(m1, corpus[:20], corpus[20:26], cfg)
    losses = [h["train_loss"] for h in hist1]
    assert losses[0] > losses[1] > losses[2]
    assert losses[-1] < losses[0] - 0.5
    m2 = _tiny_flow(vocab, kg)
    best2, hist2 = train_flow(m2, corpus[:20], corpus[20:26], cfg)
    assert hist1 == [dict(h, seconds=a["seconds"]) for h, a in zip(hist2, hist1)]
    assert best1.metrics == best2.metrics and best1.epoch == best2.epoch
    for name, p in m1.params.items():
        np.testing.assert_array_equal(p.data, m2.params[name].data)
    np.testing.assert_array_equal(m1.thresholds, best1.thresholds)


def test_flow_zero_epochs_keeps_initial_params(small_world):
    kg, corpus, _, vocab = small_world
    m = _tiny_flow(vocab, kg)
    before = m.params.state_dict()
    best, hist = train_flow(m, corpus[:4], corpus[4:6], TrainConfig(epochs=0))
    assert hist == [] and best.epoch == 0
    for k, v in before.items():
        np.testing.assert_array_equal(m.params[k].data, v)


def _gen_overfit(toy, toy_vocab, seed=0):
    gcfg = G.GenConfig(d_model=16, enc_layers=1, dec_layers=1, n_heads=2, max_len=8, seed=seed)
    model = G.GenModel(gcfg, toy_vocab)
    ex = G.make_examples([toy(1)], toy_vocab, gcfg)
    _, hist = train_generator(model, ex, [], TrainConfig(lr=1e-2, warmup_steps=10, epochs=500, batch_size=1,
                                                         weight_decay=0.0, seed=seed))
    return model, ex, hist


def test_generator_single_example_overfit(toy, toy_vocab):
    model, ex, hist = _gen_overfit(toy, toy_vocab)
    final = G.generation_loss(model, G.collate(ex, toy_vocab)).item()
    assert final < 0.05
    assert G.decode(model, ex) == [ex[0].reference]
    again = _gen_overfit(toy, toy_vocab)[2]
    assert abs(again[-1]["train_loss"] - hist[-1]["train_loss"]) <= 1e-6


def test_generator_training_needs_examples(toy_vocab):
    model = G.GenModel(G.GenConfig(d_model=8, n_heads=2), toy_vocab)
    with pytest.raises(ValueError):
        train_generator(model, [], [], TrainConfig())
