import numpy as np
import pytest

import oracles
from cbdbid.errors import ShapeError, ValidationError
from cbdbid.idm import (IDMConfig, InverseDynamicsModel, TrainedIDM, idm_loss, predict_action, state_window,
                        train_idm, transition_pairs)
from cbdbid.nn import numeric_gradient, relative_error


def test_window_pads_with_first_state():
    s = np.arange(10.0).reshape(5, 2)
    w = state_window(s, 1, 3)
    assert np.array_equal(w, s[[0, 0, 0, 1]])
    assert np.array_equal(state_window(s, 4, 3), s[1:5])
    assert np.array_equal(state_window(s, 0, 0), s[:1])
    with pytest.raises(ValidationError):
        state_window(s, 5, 3)


def test_pairs_come_from_ground_truth(rng):
    states, actions = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 4, 1))
    w, n, a = transition_pairs(states, actions, L=2)
    assert w.shape == (8, 3, 3) and n.shape == (8, 3) and a.shape == (8, 1)
    for m in range(2):
        for t in range(4):
            i = m * 4 + t
            assert np.array_equal(w[i], state_window(states[m], t, 2))
            assert np.array_equal(n[i], states[m, t + 1]) and np.array_equal(a[i], actions[m, t])
    with pytest.raises(ShapeError):
        transition_pairs(states, actions[:, :3])


def test_loss_matches_oracle(rng):
    m = InverseDynamicsModel.create(3, 2, L=1, hidden=(8,), rng=rng)
    w, n, a = rng.normal(size=(5, 2, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    loss, _ = idm_loss(m, w, n, a)
    assert loss == pytest.approx(oracles.mse_loop(m.predict(w, n), a), rel=1e-12)


def test_loss_gradient_numeric(rng):
    m = InverseDynamicsModel.create(3, 1, L=2, hidden=(8, 8), rng=rng)
    w, n, a = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 1))
    _, grads = idm_loss(m, w, n, a)
    for p, g in zip(m.params(), grads):
        assert relative_error(g, numeric_gradient(lambda: idm_loss(m, w, n, a)[0], p, 1e-6)) < 1e-5


def test_shape_checks(rng):
    m = InverseDynamicsModel.create(3, 1, L=2, hidden=(4,), rng=rng)
    with pytest.raises(ShapeError):
        m.predict(np.zeros((2, 2, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        m.predict(np.zeros((2, 3, 3)), np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        InverseDynamicsModel.create(3, L=-1)
    with pytest.raises(ValidationError):
        idm_loss(m, np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros((0, 1)))


def test_memorises_a_single_transition(rng):
    s, a = rng.normal(size=(1, 2, 3)), np.array([[[0.4]]])
    t = train_idm(np.repeat(s, 4, axis=0), np.repeat(a, 4, axis=0), IDMConfig(epochs=300, hidden=(16,), L=1))
    assert t.losses[-1] < 1e-4


def test_recovers_toy_dynamics():
    """s_{t+1} = s_t + a_t on the first coordinate; the action is recoverable exactly."""
    rng = np.random.default_rng(0)
    M, T = 200, 6
    acts = rng.uniform(-0.5, 0.5, (M, T, 1))
    states = np.zeros((M, T + 1, 2))
    states[:, 0] = rng.normal(size=(M, 2))
    for t in range(T):
        states[:, t + 1, 0] = states[:, t, 0] + acts[:, t, 0]
        states[:, t + 1, 1] = rng.normal(size=M)
    model = train_idm(states[:150], acts[:150], IDMConfig(epochs=200, batch=64, hidden=(64, 64), L=1)).model
    w, n, a = transition_pairs(states[150:], acts[150:], 1)
    assert np.mean(np.abs(predict_action(model, w, n) - a)) < 0.05


def test_training_deterministic_and_round_trip(tmp_path, rng):
    s, a = rng.normal(size=(5, 4, 3)), rng.normal(size=(5, 3, 1))
    x = train_idm(s, a, IDMConfig(epochs=3, hidden=(8,)))
    y = train_idm(s, a, IDMConfig(epochs=3, hidden=(8,)))
    assert x.losses == y.losses
    x.save(tmp_path / "i.ckpt")
    z = TrainedIDM.load(tmp_path / "i.ckpt")
    w, n, _ = transition_pairs(s, a, 3)
    assert np.array_equal(z.model.predict(w, n), x.model.predict(w, n)) and z.config == x.config
