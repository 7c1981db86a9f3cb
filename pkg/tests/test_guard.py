import math

import numpy as np
import pytest
from helpers import BAD, GOOD, finite_diff_check, perturb, table

from uavmesh.guard import INACTIVE, BcTarget, bc_loss, bc_targets, closest_action, guidance_action
from uavmesh.nets import AgentNet
from uavmesh.radio import RadioParams
from uavmesh.world import ACTION_NAMES, WorldState

P = RadioParams()


def _state(uav_xy, bs_xy):
    uav = np.array([[x, y, 100.0] for x, y in uav_xy])
    bs = np.array([[x, y, 30.0] for x, y in bs_xy])
    return WorldState(0, uav, np.zeros((0, 3)), bs, np.zeros(0))


def test_out_of_range_uav_points_sw():
    s = _state([(300, 400)], [(0, 0)])
    t = guidance_action(0, s, table([[BAD]], [[np.nan]]), P)
    assert t.active and ACTION_NAMES[t.target_action] == "SW"
    assert t.weight == pytest.approx(500.0)


def test_in_range_is_inactive():
    s = _state([(300, 400)], [(0, 0)])
    assert guidance_action(0, s, table([[GOOD]], [[np.nan]]), P) == INACTIVE


def test_best_bs_by_snr():
    s = _state([(500, 0)], [(0, 0), (1000, 0)])
    t = guidance_action(0, s, table([[12.0], [18.0]], [[np.nan]]), P)
    assert ACTION_NAMES[t.target_action] == "E"


def test_closest_action_brute_force():
    rng = np.random.default_rng(0)
    for ang in rng.uniform(0, 2 * math.pi, 500):
        # compass bearing: N = 0, clockwise
        bearing = (90 - math.degrees(ang)) % 360
        expect = int(((bearing + 22.5) % 360) // 45)
        assert closest_action(np.array([math.cos(ang), math.sin(ang)])) == expect


def test_only_bs_group_gets_targets():
    s = _state([(300, 400), (300, 400)], [(0, 0)])
    links = table([[BAD, BAD]], [[np.nan, BAD], [BAD, np.nan]])
    t = bc_targets(s, links, P, np.array([True, False]))
    assert t[0].active and t[1] == INACTIVE


def test_uniform_policy_loss_value():
    s = _state([(300, 400)], [(0, 0)])
    t = guidance_action(0, s, table([[BAD]], [[np.nan]]), P)
    net = AgentNet(6, 8, np.random.default_rng(0))
    loss, _ = bc_loss(net, np.zeros(6), t, side_length=1000.0)
    assert loss == pytest.approx(0.5 * math.log(9), abs=1e-12)
    assert bc_loss(net, np.zeros(6), INACTIVE, 1000.0)[0] == 0.0


def test_bc_gradient_finite_differences():
    rng = np.random.default_rng(1)
    net = AgentNet(6, 8, rng)
    perturb(net, rng)
    obs = rng.standard_normal((4, 6))
    targets = [BcTarget(True, int(a), float(w)) for a, w in zip(rng.integers(0, 8, 4), rng.uniform(1, 900, 4))]
    targets[2] = INACTIVE
    loss, grads = bc_loss(net, obs, targets, 1000.0)
    finite_diff_check(lambda: bc_loss(net, obs, targets, 1000.0)[0], net.params, grads, rng, n_checks=120)
    assert all(np.all(g == 0) for g in grads[len(net.actor.params):])
