import numpy as np
import pytest

from cbdbid.agent import AgentPolicy, InferenceConfig, load_bundle, run_episode, run_episodes, run_fixed, save_bundle
from cbdbid.errors import ShapeError, ValidationError
from cbdbid.evaluation import episode_rngs, make_episodes
from cbdbid.idm import InverseDynamicsModel


def zero_idm(D):
    m = InverseDynamicsModel.create(D, 1, 3, (8,), np.random.default_rng(0))
    m.net.layers[-1].weight[:] = 0.0
    m.net.layers[-1].bias[:] = 0.0
    return m


def test_zero_actions_match_fixed_baseline(tiny_policy, tiny_sim):
    p = AgentPolicy(tiny_policy.completer, zero_idm(16), tiny_policy.stats, None, InferenceConfig(align_mode="none"))
    agent = run_episodes(p, make_episodes(tiny_sim, 3, 1), episode_rngs(3, 1))
    fixed = run_fixed(make_episodes(tiny_sim, 3, 1))
    for a, f in zip(agent, fixed):
        assert a.metrics == f.metrics
        assert np.array_equal(a.trajectory.states, f.trajectory.states)
        assert all(q == a.params[0] for q in a.params)


@pytest.mark.parametrize("mode", ["none", "gradient", "gs_align"])
def test_episodes_deterministic(tiny_policy, tiny_sim, mode):
    p = tiny_policy.with_config(align_mode=mode)
    a = run_episodes(p, make_episodes(tiny_sim, 2, 3), episode_rngs(2, 3), record=True)
    b = run_episodes(p, make_episodes(tiny_sim, 2, 3), episode_rngs(2, 3), record=True)
    for x, y in zip(a, b):
        assert np.array_equal(x.trajectory.states, y.trajectory.states)
        assert np.array_equal(x.generations, y.generations)


def test_plans_respect_the_realised_prefix(tiny_policy, tiny_sim):
    r = run_episode(tiny_policy, make_episodes(tiny_sim, 1, 4)[0], np.random.default_rng(0), record=True)
    s = r.trajectory.states
    for t in range(tiny_sim.T):
        assert np.allclose(r.generations[t, : t + 1], s[: t + 1], rtol=1e-12, atol=1e-9)
    assert r.generations.shape == (tiny_sim.T, tiny_sim.T + 1, 16)


def test_bundle_round_trip(tmp_path, tiny_policy, tiny_sim):
    save_bundle(tiny_policy, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    assert back.config == tiny_policy.config
    a = run_episodes(tiny_policy, make_episodes(tiny_sim, 1, 0), episode_rngs(1, 0))[0]
    b = run_episodes(back, make_episodes(tiny_sim, 1, 0), episode_rngs(1, 0))[0]
    assert a.metrics == b.metrics
    assert load_bundle(tmp_path / "b" / "manifest.json", omega=1.5).config.omega == 1.5


def test_bundle_errors(tmp_path, tiny_policy):
    with pytest.raises(ValidationError):
        load_bundle(tmp_path / "nothing")
    save_bundle(tiny_policy, tmp_path / "b")
    (tmp_path / "b" / "idm.ckpt").unlink()
    with pytest.raises(ValidationError):
        load_bundle(tmp_path / "b")


def test_config_validation(tiny_policy):
    with pytest.raises(ValidationError):
        InferenceConfig(align_mode="beam")
    with pytest.raises(ValidationError):
        InferenceConfig(align_mode="gs_align", candidates=1)
    with pytest.raises(ValidationError):
        InferenceConfig(target=float("nan"))
    with pytest.raises(ValidationError):
        AgentPolicy(tiny_policy.completer, tiny_policy.idm, tiny_policy.stats, None)  # gradient needs an aligner


def test_episode_checks(tiny_policy, tiny_sim):
    from dataclasses import replace

    with pytest.raises(ShapeError):
        run_episodes(tiny_policy, make_episodes(replace(tiny_sim, T=4), 1), episode_rngs(1))
    eps = make_episodes(tiny_sim, 2)
    with pytest.raises(ValidationError):
        run_episodes(tiny_policy, eps, episode_rngs(1))
