import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from cbdbid.aligner import (Aligner, AlignerConfig, RefinementConfig, ReturnModel, alignment_error, gs_align, refine,
                            return_loss, suffix_gradient, train_aligner)
from cbdbid.errors import ShapeError, ValidationError
from cbdbid.nn import Layer, Network, numeric_gradient, relative_error


def linear_model(w, b=0.0, N=3, D=2):
    return ReturnModel(Network([Layer(np.asarray(w, float).reshape(1, N * D), [b])]), N, D)


def test_perfect_model_zero_loss(rng):
    m = linear_model(np.ones(6))
    x = rng.normal(size=(5, 3, 2))
    loss, grads = return_loss(m, x, x.reshape(5, -1).sum(1))
    assert loss == pytest.approx(0.0, abs=1e-24) and all(np.allclose(g, 0.0, atol=1e-12) for g in grads)


def test_constant_offset_loss():
    m = linear_model(np.zeros(6), b=0.5)
    loss, _ = return_loss(m, np.zeros((4, 3, 2)), np.zeros(4))
    assert loss == 0.25


def test_loss_matches_loop_oracle(rng):
    for _ in range(20):
        m = ReturnModel.create(3, 2, (8,), rng)
        x, y = rng.normal(size=(6, 3, 2)), rng.normal(size=6)
        loss, _ = return_loss(m, x, y)
        assert loss == pytest.approx(oracles.mse_loop(m.predict(x), y), rel=1e-12)


def test_loss_gradient_numeric(rng):
    m = ReturnModel.create(3, 2, (8, 8), rng)
    x, y = rng.normal(size=(6, 3, 2)), rng.normal(size=6)
    _, grads = return_loss(m, x, y)
    for p, g in zip(m.params(), grads):
        assert relative_error(g, numeric_gradient(lambda: return_loss(m, x, y)[0], p, 1e-6)) < 1e-5


def test_refine_zero_step_is_identity(rng):
    x = rng.normal(size=(2, 3, 2))
    assert np.array_equal(refine(ReturnModel.create(3, 2, (4,), rng), x, 0, 1.0, RefinementConfig(0.0)), x)


def test_refine_stationary_when_on_target(rng):
    m = linear_model(rng.normal(size=6))
    x = rng.normal(size=(3, 2))
    assert np.array_equal(refine(m, x, 0, float(m.predict(x[None])[0])), x)


def test_refine_linear_model_by_hand():
    # R = sum of all entries; y = 0; x = ones -> R = 6, grad = 2 * 6 = 12 per entry
    m = linear_model(np.ones(6))
    out = refine(m, np.ones((3, 2)), 0, 0.0, RefinementConfig(0.01))
    assert np.array_equal(out[0], [1.0, 1.0])
    assert np.allclose(out[1:], 1.0 - 0.12, atol=1e-15)


def test_refine_rounds_compose(rng):
    m = ReturnModel.create(3, 2, (8,), rng)
    x = rng.normal(size=(2, 3, 2))
    twice = refine(m, refine(m, x, 1, 0.3, RefinementConfig(0.05)), 1, 0.3, RefinementConfig(0.05))
    assert np.allclose(refine(m, x, 1, 0.3, RefinementConfig(0.05, 2)), twice, atol=1e-14)


@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_refine_keeps_prefix_and_descends(seed, t):
    rng = np.random.default_rng(seed)
    m = ReturnModel.create(5, 2, (8,), rng, activation="tanh")
    x, y = rng.normal(size=(4, 5, 2)), rng.normal(size=4)
    g = suffix_gradient(m, x, t, y)
    step = 1e-3 / max(1.0, float(np.max(np.abs(g))))
    out = refine(m, x, t, y, RefinementConfig(step))
    assert np.array_equal(out[:, : t + 1], x[:, : t + 1])
    before, after = alignment_error(m, x, y), alignment_error(m, out, y)
    assert np.all(after <= before + 1e-12)


def test_suffix_gradient_matches_finite_differences(rng):
    m = ReturnModel.create(4, 2, (8,), rng)
    x, y = rng.normal(size=(1, 4, 2)), np.array([0.7])
    g = suffix_gradient(m, x, 1, y)
    num = numeric_gradient(lambda: float(alignment_error(m, x, y)[0]), x, 1e-6)
    num[:, :2] = 0.0
    assert relative_error(g, num) < 1e-6


def test_refine_validation(rng):
    m = ReturnModel.create(3, 2, (4,), rng)
    with pytest.raises(ValidationError):
        refine(m, np.zeros((3, 2)), 2, 0.0)
    with pytest.raises(ValidationError):
        RefinementConfig(-0.1)
    with pytest.raises(ValidationError):
        RefinementConfig(0.1, 0)
    with pytest.raises(ShapeError):
        m.predict(np.zeros((1, 4, 2)))


def test_gs_align_picks_closest():
    m = linear_model(np.ones(6))
    cands = np.stack([np.full((3, 2), v) for v in (0.0, 1.0, 2.0)])  # R = 0, 6, 12
    assert gs_align(m, cands, 5.0)[0] == 1
    assert gs_align(m, cands, 9.0)[0] == 1  # tie between 6 and 12 goes to the first
    assert gs_align(m, cands[:1], 100.0)[0] == 0
    with pytest.raises(ValidationError):
        gs_align(m, np.zeros((0, 3, 2)), 0.0)


def test_gs_align_matches_scan(rng):
    m = ReturnModel.create(3, 2, (8,), rng)
    for _ in range(50):
        cands, y = rng.normal(size=(7, 3, 2)), rng.normal()
        errs = [(float(m.predict(c[None])[0]) - y) ** 2 for c in cands]
        assert gs_align(m, cands, y)[0] == min(range(7), key=lambda i: (errs[i], i))


def test_training_fits_linear_target(rng):
    x = rng.normal(size=(256, 3, 2))
    y = x[:, :, 0].sum(1) * 0.3
    a = train_aligner(x, y, AlignerConfig(epochs=150, batch=32, hidden=(32,)))
    assert a.losses[-1] < 0.01 * np.var(y)


def test_sparse_conditions_are_learnable(tiny_sim):
    from dataclasses import replace

    from cbdbid.datagen import collect_dataset, default_policies

    ds = collect_dataset(default_policies(), replace(tiny_sim, sparse=True), 4, seed=3)
    x, y = ds.normalized_states(), ds.conditions()
    a = train_aligner(x, y, AlignerConfig(epochs=100, batch=16, hidden=(32,)))
    assert a.losses[-1] < 0.5 * a.losses[0]


def test_save_load(tmp_path, rng):
    a = train_aligner(rng.normal(size=(8, 3, 2)), rng.normal(size=8), AlignerConfig(epochs=2, hidden=(4,),
                                                                                    tag="smoothness"))
    a.save(tmp_path / "a.ckpt")
    b = Aligner.load(tmp_path / "a.ckpt")
    x = rng.normal(size=(2, 3, 2))
    assert np.array_equal(a.model.predict(x), b.model.predict(x)) and b.model.tag == "smoothness"


def test_config_validation():
    with pytest.raises(ValidationError):
        AlignerConfig(tag="ctr")
    with pytest.raises(ValidationError):
        AlignerConfig(batch=0)


def test_standardised_units(rng):
    m = linear_model(np.ones(6))
    m.shift, m.scale = 3.0, 0.5
    x = np.ones((1, 3, 2))  # z = 6 -> raw 6 * 0.5 + 3 = 6
    assert m.predict(x)[0] == 6.0
    assert alignment_error(m, x, 5.0)[0] == 4.0  # (1 / 0.5)^2
    with pytest.raises(ValidationError):
        ReturnModel(m.net, 3, 2, scale=0.0)


def test_tiny_scale_property_is_learned_and_saved(tmp_path, rng):
    x = rng.normal(size=(256, 3, 2))
    y = 1e-4 * (1.0 + 0.2 * x[:, 1, 0])
    a = train_aligner(x, y, AlignerConfig(epochs=100, batch=32, hidden=(16,), tag="smoothness"))
    assert a.model.scale == pytest.approx(y.std()) and a.model.shift == pytest.approx(y.mean())
    assert np.mean((a.model.predict(x) - y) ** 2) < 0.05 * np.var(y)
    assert np.max(np.abs(suffix_gradient(a.model, x[:4], 0, y[:4].min()))) > 1e-3  # steps stay usable
    a.save(tmp_path / "s.ckpt")
    b = Aligner.load(tmp_path / "s.ckpt").model
    assert (b.shift, b.scale) == (a.model.shift, a.model.scale)
    raw = train_aligner(x, y, AlignerConfig(epochs=1, hidden=(4,), tag="smoothness", standardize=False))
    assert raw.model.scale == 1.0
