import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavmesh.radio import (
    LinkClass,
    RadioParams,
    build_link_table,
    fspl_db,
    link_class,
    los_probability,
    max_fspl_range,
    noise_dbm,
    path_loss,
    rate_bps,
    snr_db,
)
from uavmesh.world import ConfigError, NodeId, NodeKind, WorldState

P = RadioParams()
UAV, UE, BS = NodeKind.UAV, NodeKind.UE, NodeKind.BS


def fspl_oracle(d, f=2.4e9, eta=1.0):
    return 20 * math.log10(4 * math.pi * f / 3e8) + 20 * math.log10(d) + eta


def plos_oracle(z, d, a=9.61, b=0.16):
    theta = math.degrees(math.asin(z / d))
    return 1 / (1 + a * math.exp(-b * (theta - a)))


def test_fspl_worked_values():
    assert fspl_db(100.0, P) == pytest.approx(81.05, abs=0.01)
    assert fspl_db(1000.0, P) == pytest.approx(101.05, abs=0.01)
    assert fspl_db(200.0, P) - fspl_db(100.0, P) == pytest.approx(20 * math.log10(2), abs=1e-12)


def test_fspl_rejects_nonpositive():
    with pytest.raises(ValueError):
        fspl_db(0.0, P)


def test_los_probability_worked_values():
    assert los_probability((0, 0, 100), (0, 0, 0), P) == pytest.approx(0.99997, abs=1e-4)
    horiz = math.sqrt(500**2 - 100**2)
    assert los_probability((horiz, 0, 100), (0, 0, 0), P) == pytest.approx(0.1241, abs=1e-3)


def test_noise_worked_values():
    assert noise_dbm(LinkClass.UavUe, P) == pytest.approx(-99.0, abs=1e-9)
    assert noise_dbm(LinkClass.BsUav, P) == pytest.approx(-90.55, abs=0.01)
    assert noise_dbm(LinkClass.UavUav, P) == pytest.approx(-92.01, abs=0.01)


def _pair_state(a_kind, a_pos, b_kind, b_pos):
    pos = {NodeId(a_kind, 0): a_pos, NodeId(b_kind, 0 if b_kind != a_kind else 1): b_pos}
    return WorldState.from_positions(0, pos)


def test_bs_uav_snr_at_1km():
    s = _pair_state(BS, (0, 0, 30), UAV, (1000, 0, 30))
    snr = snr_db(NodeId(BS, 0), NodeId(UAV, 0), P, s)
    assert snr == pytest.approx(34.5, abs=0.05)
    assert snr >= P.snr_threshold


def test_uav_uav_max_range():
    # analytic inversion of the link budget with c = 3e8 gives 628.37 m (see notes)
    r = max_fspl_range(UAV, UAV, P)
    assert r == pytest.approx(627.8, abs=1.0)
    s = _pair_state(UAV, (0, 0, 100), UAV, (r, 0, 100))
    assert snr_db(NodeId(UAV, 0), NodeId(UAV, 1), P, s) == pytest.approx(25.0, abs=1e-9)


def test_uav_uav_range_matches_bisection():
    def snr_at(d):
        s = _pair_state(UAV, (0, 0, 100), UAV, (d, 0, 100))
        return snr_db(NodeId(UAV, 0), NodeId(UAV, 1), P, s)

    lo, hi = 1.0, 1e5
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if snr_at(mid) >= 25.0 else (lo, mid)
    assert max_fspl_range(UAV, UAV, P) == pytest.approx(lo, rel=1e-9)


def test_link_class_dispatch():
    assert link_class(UAV, UE) is LinkClass.UavUe
    assert link_class(BS, UAV) is LinkClass.BsUav
    for a, b in ((UE, UE), (BS, UE), (BS, BS)):
        with pytest.raises(ValueError):
            link_class(a, b)


def test_path_loss_classes():
    assert path_loss((NodeId(UAV, 0), (0, 0, 100)), (NodeId(UAV, 1), (100, 0, 100)), P) == fspl_db(100.0, P)
    over = path_loss((NodeId(UAV, 0), (0, 0, 100)), (NodeId(UE, 0), (0, 0, 0)), P)
    assert over == pytest.approx(81.05, abs=0.05)
    flat = RadioParams(eta_nlos=1.0)
    got = path_loss((NodeId(UAV, 0), (0, 0, 100)), (NodeId(UE, 0), (400, 0, 0)), flat)
    assert got == pytest.approx(fspl_db(math.hypot(400, 100), flat), abs=1e-12)
    with pytest.raises(ValueError):
        path_loss((NodeId(UE, 0), (0, 0, 0)), (NodeId(UE, 1), (1, 0, 0)), P)


def test_params_validation():
    with pytest.raises(ConfigError):
        RadioParams(eta_nlos=0.5)
    with pytest.raises(ConfigError):
        RadioParams(f_c=0)


def _scalar_snr(tx, rx, pl, cls):
    ptx = {UAV: 1.0, BS: 10.0, UE: 0.4}[tx]
    gain = {UAV: 0.0, BS: 5.0, UE: 0.0}
    bw = {LinkClass.BsUav: 7e6, LinkClass.UavUav: 5e6, LinkClass.UavUe: 1e6}[cls]
    noise = -174 + 10 * math.log10(bw) + 15
    snr = 10 * math.log10(ptx * 1000) + gain[tx] + gain[rx] - pl - noise
    return snr, bw * math.log2(1 + 10 ** (snr / 10))


def test_random_inputs_match_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        kind = rng.integers(3)
        if kind == 0:
            tx, rx, cls = BS, UAV, LinkClass.BsUav
            a, b = (*rng.uniform(0, 3000, 2), 30.0), (*rng.uniform(0, 3000, 2), 100.0)
        elif kind == 1:
            tx, rx, cls = UAV, UAV, LinkClass.UavUav
            a, b = (*rng.uniform(0, 3000, 2), 100.0), (*rng.uniform(0, 3000, 2), 100.0)
        else:
            tx, rx, cls = UAV, UE, LinkClass.UavUe
            a, b = (*rng.uniform(0, 3000, 2), 100.0), (*rng.uniform(0, 3000, 2), 0.0)
        d = math.dist(a, b)
        if cls is LinkClass.UavUe:
            p = plos_oracle(100.0, d)
            pl = p * fspl_oracle(d) + (1 - p) * fspl_oracle(d, eta=20.0)
        else:
            pl = fspl_oracle(d)
        snr, rate = _scalar_snr(tx, rx, pl, cls)
        s = _pair_state(tx, a, rx, b)
        i, j = NodeId(tx, 0), NodeId(rx, 1 if tx == rx else 0)
        assert snr_db(i, j, P, s) == pytest.approx(snr, rel=1e-9, abs=1e-9)
        assert rate_bps(i, j, P, s) == pytest.approx(rate, rel=1e-9)


@settings(max_examples=100)
@given(st.floats(1.0, 5000.0), st.floats(1.001, 3.0))
def test_path_loss_increases_with_distance(d, k):
    assert fspl_db(d * k, P) > fspl_db(d, P)
    z = 100.0
    lo = path_loss((NodeId(UAV, 0), (0, 0, z)), (NodeId(UE, 0), (d, 0, 0)), P)
    hi = path_loss((NodeId(UAV, 0), (0, 0, z)), (NodeId(UE, 0), (d * k, 0, 0)), P)
    assert hi > lo


@settings(max_examples=100)
@given(st.floats(1.0, 80.0), st.floats(0.5, 5.0))
def test_los_increases_with_elevation(theta, dtheta):
    d = 500.0
    z1 = d * math.sin(math.radians(theta))
    z2 = d * math.sin(math.radians(min(theta + dtheta, 89.9)))
    h1 = math.sqrt(d * d - z1 * z1)
    h2 = math.sqrt(d * d - z2 * z2)
    assert los_probability((h2, 0, z2), (0, 0, 0), P) > los_probability((h1, 0, z1), (0, 0, 0), P)


def test_uav_uav_symmetry():
    s = _pair_state(UAV, (10, 20, 100), UAV, (300, -40, 100))
    a, b = NodeId(UAV, 0), NodeId(UAV, 1)
    assert snr_db(a, b, P, s) == snr_db(b, a, P, s)


def test_rate_monotone_and_vanishing():
    rates = []
    for d in (10.0, 100.0, 1e3, 1e4, 1e6):
        s = _pair_state(UAV, (0, 0, 100), UAV, (d, 0, 100))
        rates.append(rate_bps(NodeId(UAV, 0), NodeId(UAV, 1), P, s))
    assert all(a > b for a, b in zip(rates, rates[1:]))
    assert rates[-1] < 1e-3 * rates[0]


def _small_state(rng, U=3, M=4, G=2):
    return WorldState(
        0,
        np.column_stack([rng.uniform(0, 1000, (U, 2)), np.full(U, 100.0)]),
        np.column_stack([rng.uniform(0, 1000, (M, 2)), np.zeros(M)]),
        np.column_stack([rng.uniform(0, 1000, (G, 2)), np.full(G, 30.0)]),
        np.zeros(M),
    )


def test_link_table_pair_count():
    s = _small_state(np.random.default_rng(0), U=2, M=1, G=1)
    assert len(list(build_link_table(s, P).entries())) == 5


def test_link_table_matches_scalar_calls():
    s = _small_state(np.random.default_rng(1))
    for (i, j), (pl, snr, rate) in build_link_table(s, P).entries():
        tx = i if i.kind is not NodeKind.UE else j
        rx = j if tx == i else i
        assert pl == pytest.approx(path_loss((i, s.position(i)), (j, s.position(j)), P), rel=1e-12)
        assert snr == pytest.approx(snr_db(tx, rx, P, s), rel=1e-12)
        assert rate == pytest.approx(rate_bps(tx, rx, P, s), rel=1e-12)


def test_link_table_permutation():
    rng = np.random.default_rng(2)
    s = _small_state(rng, U=4, M=5, G=2)
    pu, pm = rng.permutation(4), rng.permutation(5)
    s2 = WorldState(0, s.uav[pu], s.ue[pm], s.bs, s.ue_heading[pm])
    t1, t2 = build_link_table(s, P), build_link_table(s2, P)
    np.testing.assert_array_equal(t2.snr_uav_ue, t1.snr_uav_ue[pu][:, pm])
    np.testing.assert_array_equal(t2.snr_bs_uav, t1.snr_bs_uav[:, pu])
    np.testing.assert_array_equal(t2.snr_uav_uav, t1.snr_uav_uav[pu][:, pu])
