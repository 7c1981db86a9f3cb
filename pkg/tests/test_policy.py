import math

import numpy as np
import pytest
from helpers import finite_diff_check, perturb

from uavmesh.mesh import evaluate
from uavmesh.nets import AgentNet
from uavmesh.policy import (
    LossCoefs,
    PolicySet,
    TransitionBatch,
    build_observations,
    clipped_surrogate,
    gae_advantages,
    greedy_actions,
    normalize_advantages,
    obs_dim,
    policy_forward,
    ppo_loss,
    sample_actions,
    total_loss,
)
from uavmesh.radio import RadioParams
from uavmesh.world import ScenarioConfig, init_world

CFG = ScenarioConfig(side_length=1500, n_uav=6, n_ue=40, n_bs=1)


def _obs(seed=0):
    s = init_world(CFG, np.random.default_rng(seed))
    links, rep = evaluate(s, RadioParams())
    return build_observations(s, links, rep, CFG)


def test_obs_shape_and_range():
    o = _obs()
    assert o.shape == (6, obs_dim(6, 40, 1)) == (6, 210)
    assert np.isfinite(o).all()
    assert o.min() >= -1.0 and o.max() <= 1.0


def test_shared_block_identical_local_block_differs():
    o = _obs(1)
    local = 2 + 6 + 40 + 1
    assert np.all(o[:, :-local] == o[0, :-local])
    assert len({tuple(r) for r in o[:, -local:]}) == 6


def test_uniform_policy_at_init():
    o = _obs(2)
    net = AgentNet(o.shape[1], 32, np.random.default_rng(0))
    probs, values = policy_forward(net, o)
    np.testing.assert_allclose(probs, 1 / 9, atol=1e-15)
    assert values.shape == (6,)
    with pytest.raises(ValueError):
        policy_forward(net, o[:, :-1])


def test_sampling_frequencies():
    rng = np.random.default_rng(0)
    p = np.array([[0.5, 0.25, 0, 0, 0, 0, 0, 0, 0.25]])
    draws = np.concatenate([sample_actions(p, rng) for _ in range(20000)])
    freq = np.bincount(draws, minlength=9) / len(draws)
    np.testing.assert_allclose(freq, p[0], atol=0.015)
    assert greedy_actions(np.full((1, 9), 1 / 9))[0] == 0


def test_policy_set_slots():
    ps = PolicySet([0, 0, 1, 1, 1, 2], 10, 8, np.random.default_rng(0))
    assert ps.n_slots == 3 and ps.members(1).tolist() == [2, 3, 4]
    probs, values, logp = ps.forward(np.zeros((6, 10)))
    np.testing.assert_allclose(np.exp(logp), probs)
    with pytest.raises(ValueError):
        PolicySet([0, 2], 10, 8, np.random.default_rng(0))


def gae_oracle(r, v, last, gamma, lam):
    T = len(r)
    vals = list(v) + [last]
    delta = [r[t] + gamma * vals[t + 1] - vals[t] for t in range(T)]
    return [sum((gamma * lam) ** (k - t) * delta[k] for k in range(t, T)) for t in range(T)]


def test_gae_matches_explicit_sum():
    rng = np.random.default_rng(0)
    for _ in range(50):
        T = int(rng.integers(1, 30))
        r, v = rng.standard_normal(T), rng.standard_normal(T)
        last, g, lam = float(rng.standard_normal()), rng.uniform(0.5, 1), rng.uniform(0, 1)
        adv, ret = gae_advantages(r, v, np.zeros(T), last, g, lam)
        np.testing.assert_allclose(adv, gae_oracle(r, v, last, g, lam), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(ret, adv + v)


def test_gae_limits():
    r, v = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.1, -0.2])
    adv, _ = gae_advantages(r, v, np.zeros(3), 7.0, gamma=0.0, lam=0.95)
    np.testing.assert_allclose(adv, r - v)
    adv, _ = gae_advantages(r, v, np.zeros(3), 7.0, gamma=0.9, lam=0.0)
    np.testing.assert_allclose(adv, r + 0.9 * np.array([0.1, -0.2, 7.0]) - v)
    adv, _ = gae_advantages(r, v, np.array([0, 0, 1.0]), 7.0, gamma=0.9, lam=1.0)
    assert adv[2] == pytest.approx(3.0 + 0.2)


def test_normalize_advantages():
    a = normalize_advantages(np.array([1.0, 2.0, 3.0, 4.0]))
    assert a.mean() == pytest.approx(0) and a.std() == pytest.approx(1, abs=1e-6)
    assert len(normalize_advantages(np.zeros(0))) == 0


def test_clipped_surrogate_scalars():
    assert clipped_surrogate(1.2, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(0.6, -1.0, 0.2) == pytest.approx(-0.8)
    assert clipped_surrogate(1.5, -1.0, 0.2) == pytest.approx(-1.5)


def _batch(rng, net, n=12, d=8):
    obs = rng.standard_normal((n, d))
    probs, values = policy_forward(net, obs)
    actions = rng.integers(0, 9, n)
    # behaviour log-probs differ from the current policy so some ratios clip
    logp = np.log(probs[np.arange(n), actions]) + rng.normal(0, 0.3, n)
    logp = np.minimum(logp, 0.0)
    kd = rng.dirichlet(np.ones(9), n)
    b = TransitionBatch(
        obs, actions, logp, values, rng.standard_normal(n), np.zeros(n), kd,
        (rng.random(n) < 0.5).astype(float), rng.integers(0, 8, n), rng.uniform(0, 0.5, n) * (rng.random(n) < 0.5),
    )
    b.advantages = rng.standard_normal(n)
    b.returns = rng.standard_normal(n)
    return b


def test_total_loss_gradient_finite_differences():
    rng = np.random.default_rng(3)
    net = AgentNet(8, 8, rng)
    perturb(net, rng)
    b = _batch(rng, net)
    coefs = LossCoefs(0.2, 0.01, 0.5, beta1=0.7, beta2=0.3)
    _, grads, stats = total_loss(net, b, coefs)
    assert stats["kd"] > 0 and stats["bc"] > 0
    worst = finite_diff_check(lambda: total_loss(net, b, coefs)[0], net.params, grads, rng, n_checks=150)
    assert worst < 1e-6


def test_loss_decomposition():
    rng = np.random.default_rng(4)
    net = AgentNet(8, 8, rng)
    perturb(net, rng)
    b = _batch(rng, net)
    loss, _, s = total_loss(net, b, LossCoefs(beta1=2.0, beta2=3.0))
    expect = -s["surrogate"] - 0.01 * s["entropy"] + 0.5 * s["value"] + 2.0 * s["kd"] + 3.0 * s["bc"]
    assert loss == pytest.approx(expect, rel=1e-12)


def test_zero_betas_equal_plain_ppo():
    rng = np.random.default_rng(5)
    net = AgentNet(8, 8, rng)
    perturb(net, rng)
    b = _batch(rng, net)
    l0, g0, _ = total_loss(net, b, LossCoefs())
    l1, g1 = ppo_loss(net, b)
    assert l0 == l1
    assert all(np.array_equal(x, y) for x, y in zip(g0, g1))


def test_ratio_one_at_behaviour_policy():
    rng = np.random.default_rng(6)
    net = AgentNet(8, 8, rng)
    perturb(net, rng)
    b = _batch(rng, net)
    probs, _ = policy_forward(net, b.obs)
    b.logp = np.log(probs[np.arange(len(b)), b.actions])
    _, _, s = total_loss(net, b, LossCoefs())
    assert s["surrogate"] == pytest.approx(float(np.mean(b.advantages)), rel=1e-12)


def test_batch_validation_and_concat():
    rng = np.random.default_rng(7)
    net = AgentNet(8, 8, rng)
    b = _batch(rng, net, n=5)
    both = TransitionBatch.concat([b, b.subset(np.array([0, 2]))])
    assert len(both) == 7 and both.advantages[5] == b.advantages[0]
    with pytest.raises(ValueError, match="length"):
        TransitionBatch(b.obs[:4], b.actions, b.logp, b.values, b.rewards, b.dones, b.kd_target, b.kd_mask, b.bc_action, b.bc_weight)
    with pytest.raises(ValueError, match="<= 0"):
        TransitionBatch(b.obs, b.actions, b.logp + 5, b.values, b.rewards, b.dones, b.kd_target, b.kd_mask, b.bc_action, b.bc_weight)


def test_entropy_of_uniform():
    net = AgentNet(8, 8, np.random.default_rng(0))
    b = _batch(np.random.default_rng(1), net)
    _, _, s = total_loss(net, b, LossCoefs())
    assert s["entropy"] == pytest.approx(math.log(9))
