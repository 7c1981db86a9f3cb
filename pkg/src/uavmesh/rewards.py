"""Team reward, distance-quantile grouping and per-UAV reward decomposition."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mesh import ConnectivityReport
from .radio import LinkTable
from .world import ConfigError, WorldState

KAPPA = 0.025  # weight of the rate term, per Mbps
RELAY_WEIGHTS = (0.25, 3.0)
EDGE_WEIGHTS = (1.0, 0.75)


@dataclass(frozen=True)
class GroupAssignment:
    group_of: np.ndarray  # (U,) group index
    group_sizes: tuple[int, ...]
    alpha1: tuple[float, ...]
    alpha2: tuple[float, ...]
    is_bs_group: tuple[bool, ...]

    @property
    def n_groups(self) -> int:
        return len(self.group_sizes)

    def members(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.group_of == g)

    def in_bs_group(self, u: int) -> bool:
        return self.is_bs_group[int(self.group_of[u])]

    def alpha_per_uav(self) -> tuple[np.ndarray, np.ndarray]:
        a1 = np.asarray(self.alpha1)[self.group_of]
        a2 = np.asarray(self.alpha2)[self.group_of]
        return a1, a2


@dataclass
class RewardBreakdown:
    """Rewards for one step. ``conn``/``relay`` are in bits/s; ``scale`` converts
    them into team-reward units, so ``individual = team + (a1*conn + a2*relay)*scale``."""

    team: float
    conn: np.ndarray
    relay: np.ndarray
    individual: np.ndarray
    scale: float


def default_group_sizes(n_uav: int, n_bs: int, n_groups: int = 4) -> list[int]:
    first = min(n_bs, n_uav)
    rest = n_uav - first
    k = min(n_groups - 1, rest)
    if k <= 0:
        return [first]
    base, extra = divmod(rest, k)
    # farther groups are the larger ones
    return [first] + [base + (1 if i >= k - extra else 0) for i in range(k)]


def default_alphas(n_groups: int, base: float = 1.0) -> tuple[list[float], list[float]]:
    a1, a2 = [], []
    for g in range(n_groups):
        w = RELAY_WEIGHTS if g < 2 else EDGE_WEIGHTS
        a1.append(w[0] * base)
        a2.append(w[1] * base)
    return a1, a2


def assign_groups(
    initial_state: WorldState,
    group_sizes: Sequence[int],
    alpha1: Sequence[float] | None = None,
    alpha2: Sequence[float] | None = None,
) -> GroupAssignment:
    U = initial_state.n_uav
    sizes = tuple(int(s) for s in group_sizes)
    if sum(sizes) != U or any(s < 1 for s in sizes):
        raise ConfigError("rewards.group_sizes", f"sizes {list(sizes)} must be positive and sum to n_uav={U}")
    if alpha1 is None or alpha2 is None:
        d1, d2 = default_alphas(len(sizes))
        alpha1 = d1 if alpha1 is None else alpha1
        alpha2 = d2 if alpha2 is None else alpha2
    if len(alpha1) != len(sizes) or len(alpha2) != len(sizes):
        raise ConfigError("rewards.alpha", "need one alpha1/alpha2 per group")
    if min(alpha1) < 0 or min(alpha2) < 0:
        raise ConfigError("rewards.alpha", "weights must be >= 0")
    diff = initial_state.uav[:, None, :] - initial_state.bs[None, :, :]
    d_near = np.sqrt((diff**2).sum(-1)).min(axis=1)
    order = np.lexsort((np.arange(U), d_near))
    group_of = np.empty(U, dtype=int)
    start = 0
    for g, s in enumerate(sizes):
        group_of[order[start : start + s]] = g
        start += s
    is_bs = tuple(g == 0 for g in range(len(sizes)))
    return GroupAssignment(group_of, sizes, tuple(map(float, alpha1)), tuple(map(float, alpha2)), is_bs)


def team_reward(report: ConnectivityReport, kappa: float, n_ue: int) -> float:
    return float(np.sum(report.ue_connected)) / n_ue + kappa / n_ue * float(np.sum(report.ue_rate)) / 1e6


def connection_reward(report: ConnectivityReport, links: LinkTable) -> np.ndarray:
    """Total served rate (bits/s) each UAV gives its attached UEs."""
    U = links.n_uav
    served = report.serving_uav >= 0
    return np.bincount(report.serving_uav[served], weights=report.ue_rate[served], minlength=U)[:U]


def relay_reward(report: ConnectivityReport, conn: np.ndarray) -> np.ndarray:
    return np.array([float(sum(conn[v] for v in sorted(rs))) for rs in report.relay_set])


def individual_rewards(
    team: float,
    conn: np.ndarray,
    relay: np.ndarray,
    groups: GroupAssignment | None,
    kappa: float,
    n_ue: int,
) -> RewardBreakdown:
    """Combine the decomposed terms. ``groups=None`` gives every UAV the team reward."""
    scale = kappa / n_ue / 1e6
    if groups is None:
        individual = np.full(len(conn), team)
    else:
        a1, a2 = groups.alpha_per_uav()
        individual = team + (a1 * conn + a2 * relay) * scale
    return RewardBreakdown(team, conn, relay, individual, scale)


def step_rewards(
    report: ConnectivityReport,
    links: LinkTable,
    groups: GroupAssignment | None,
    kappa: float = KAPPA,
) -> RewardBreakdown:
    n_ue = links.n_ue
    team = team_reward(report, kappa, n_ue)
    conn = connection_reward(report, links)
    relay = relay_reward(report, conn)
    return individual_rewards(team, conn, relay, groups, kappa, n_ue)
