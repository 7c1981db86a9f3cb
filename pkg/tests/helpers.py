"""Shared fixtures-as-functions for hand-built link tables."""
import math

import numpy as np

from uavmesh.radio import LinkTable
from uavmesh.world import GaussianMixture, ScenarioConfig, init_world

GOOD, BAD = 40.0, 10.0  # SNRs above / below the 25 dB threshold
TH_DB = 25.0


def table(bu, uu, um=None, rate_um=None):
    """LinkTable from SNR matrices. ``uu`` is symmetrised (max of both directions) with a NaN diagonal."""
    bu = np.atleast_2d(np.asarray(bu, float))
    uu = np.asarray(uu, float).copy()
    U = uu.shape[0]
    uu = np.fmax(uu, uu.T)  # links are reciprocal
    np.fill_diagonal(uu, np.nan)
    um = np.zeros((U, 0)) if um is None else np.asarray(um, float)
    rate_um = np.zeros_like(um) if rate_um is None else np.asarray(rate_um, float)
    z = lambda a: np.zeros_like(a)  # noqa: E731
    return LinkTable(z(bu), bu, z(bu), z(uu), uu, z(uu), z(um), um, rate_um)


def chain_table(n, ues=None):
    """BS - u0 - u1 - ... - u{n-1}; only consecutive links pass threshold."""
    bu = np.full((1, n), BAD)
    bu[0, 0] = GOOD
    uu = np.full((n, n), BAD)
    for u in range(n - 1):
        uu[u, u + 1] = uu[u + 1, u] = GOOD
    return table(bu, uu, *(ues or (None, None)))


def random_table(rng, U, G, M=0, p=0.3):
    bu = np.where(rng.random((G, U)) < p, GOOD, BAD)
    upper = np.triu(rng.random((U, U)) < p, 1)
    adj = upper | upper.T
    uu = np.where(adj, GOOD, BAD)
    um = rng.uniform(0, 60, (U, M))
    rate = rng.uniform(1e5, 1e7, (U, M))
    return table(bu, uu, um, rate)


def finite_diff_check(loss_fn, params, grads, rng, n_checks=100, h=1e-6, rtol=1e-4, atol=1e-7):
    """Compare analytic ``grads`` with central differences on randomly chosen entries."""
    sizes = [p.size for p in params]
    flat = rng.choice(sum(sizes), size=min(n_checks, sum(sizes)), replace=False)
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for f in flat:
        k = int(np.searchsorted(bounds, f, side="right") - 1)
        idx = np.unravel_index(int(f - bounds[k]), params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + h
        up = loss_fn()
        params[k][idx] = old - h
        down = loss_fn()
        params[k][idx] = old
        num = (up - down) / (2 * h)
        ana = grads[k][idx]
        assert abs(num - ana) <= atol + rtol * abs(num), (k, idx, num, ana)
        worst = max(worst, abs(num - ana))
    return worst


def perturb(net, rng, scale=0.3):
    """Randomise every weight so gradients are not trivially zero."""
    for p in net.params:
        p += scale * rng.standard_normal(p.shape)


def random_scenario(rng, k):
    """Advisor stress family: side 1-3.5 km, enough UAVs to span it, uniform or clustered UEs."""
    L = float(rng.uniform(1000, 3500))
    lo = max(4, math.ceil(1.6 * L * L / 1e6))
    gmm = None
    if k % 2:
        n_c = int(rng.integers(1, 4))
        gmm = GaussianMixture(
            tuple(tuple(map(float, c)) for c in rng.uniform(0.1 * L, 0.9 * L, (n_c, 2))),
            (L / 10,) * n_c,
            (1.0,) * n_c,
        )
    cfg = ScenarioConfig(
        side_length=L,
        n_uav=int(rng.integers(lo, lo + 6)),
        n_ue=int(rng.integers(10, 151)),
        n_bs=int(rng.integers(1, 4)),
        ue_init=gmm,
    )
    return cfg, init_world(cfg, rng)


def recursive_oracle(links):
    """Literal fixed point of: connected iff a direct BS link or a link to a connected UAV."""
    U = links.n_uav
    uu = np.nan_to_num(links.snr_uav_uav, nan=-np.inf) >= TH_DB
    c = [bool((links.snr_bs_uav[:, u] >= TH_DB).any()) for u in range(U)]
    changed = True
    while changed:
        changed = False
        for u in range(U):
            if not c[u] and any(uu[u, v] and c[v] for v in range(U)):
                c[u] = changed = True
    return np.array(c)


def hop_oracle(links):
    """Bellman-Ford relaxation of hop counts (BS neighbours are 1 hop)."""
    U = links.n_uav
    uu = np.nan_to_num(links.snr_uav_uav, nan=-np.inf) >= TH_DB
    INF = 10**9
    h = [1 if (links.snr_bs_uav[:, u] >= TH_DB).any() else INF for u in range(U)]
    for _ in range(U):
        for u in range(U):
            for v in range(U):
                if uu[u, v] and h[v] + 1 < h[u]:
                    h[u] = h[v] + 1
    return np.array([x if x < INF else -1 for x in h])
