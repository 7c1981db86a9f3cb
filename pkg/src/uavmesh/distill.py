"""Matching agents to advised positions, soft action targets and the KD loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nets import AgentNet, log_softmax
from .world import ACTION_VECTORS, HOVER, N_ACTIONS

_MOVE_UNIT = ACTION_VECTORS[:HOVER]


@dataclass(frozen=True)
class Matching:
    sigma: tuple[int, ...]  # agent u -> plan index sigma[u]
    total_cost: float


def _hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method, O(n^3).

    Returns ``(row_to_col, u, v)`` where ``u``/``v`` are feasible dual
    potentials: ``cost[i, j] - u[i] - v[j] >= 0`` with equality on the matching.
    """
    n = cost.shape[0]
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row matched to column j (1-based, 0 = none)
    way = [0] * (n + 1)
    c = cost.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = c[i0 - 1]
            ui0 = u[i0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, np.array(u[1:]), np.array(v[1:])


def _lex_smallest(tight: np.ndarray, match: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the tight-edge graph."""
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=int)
    owner[match] = np.arange(n)
    fixed_col = np.zeros(n, dtype=bool)

    def augment(row: int, target_col: int, first: int, seen: np.ndarray) -> bool:
        # alternating path from `row` to the freed `target_col`, rows > first only
        for j in np.flatnonzero(tight[row]):
            if fixed_col[j] or seen[j]:
                continue
            seen[j] = True
            if j == target_col or augment(int(owner[j]), target_col, first, seen):
                match[row] = j
                owner[j] = row
                return True
        return False

    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            if fixed_col[j]:
                continue
            if j == match[i]:
                break
            old_col = int(match[i])
            displaced = int(owner[j])
            saved = (match.copy(), owner.copy())
            # give j to row i, then re-seat the displaced row using old_col
            match[i] = j
            owner[j] = i
            fixed_col[j] = True
            seen = np.zeros(n, dtype=bool)
            if augment(displaced, old_col, i, seen):
                fixed_col[j] = False
                break
            fixed_col[j] = False
            match, owner = saved
        fixed_col[match[i]] = True
    return match


def cost_matrix(agents: np.ndarray, plan: np.ndarray) -> np.ndarray:
    a = np.asarray(agents, dtype=float)[:, :2]
    b = np.asarray(plan, dtype=float)[:, :2]
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def hungarian_match(agents, plan) -> Matching:
    """Minimum total planar distance assignment; lexicographically smallest on ties."""
    agents = np.asarray(agents, dtype=float)
    plan = np.asarray(plan, dtype=float)
    if len(agents) != len(plan):
        raise ValueError(f"{len(agents)} agents but {len(plan)} plan positions")
    n = len(agents)
    if n == 0:
        return Matching((), 0.0)
    cost = cost_matrix(agents, plan)
    match, u, v = _hungarian(cost)
    tol = 1e-11 * max(1.0, float(cost.max())) * n
    tight = (cost - u[:, None] - v[None, :]) <= tol
    match = _lex_smallest(tight, match)
    # exactly rounded, so optima with equal cost agree whatever the summation order
    total = math.fsum(float(cost[i, match[i]]) for i in range(n))
    return Matching(tuple(int(j) for j in match), total)


def soft_targets(directions: np.ndarray, omega: float, arrive_radius: float = 0.0) -> np.ndarray:
    """Soft action targets for a batch of planar direction vectors ``(n, 2)``.

    Hover scores cosine 0, except when the direction is (near) zero: then every
    move scores 0 and hover scores 1.
    """
    if not omega > 0:
        raise ValueError("temperature must be > 0")
    z = np.atleast_2d(np.asarray(directions, dtype=float))[:, :2]
    norm = np.hypot(z[:, 0], z[:, 1])
    arrived = norm <= arrive_radius
    cos = np.zeros((len(z), N_ACTIONS))
    safe = np.where(arrived, 1.0, norm)
    cos[:, :HOVER] = (z / safe[:, None]) @ _MOVE_UNIT.T
    cos[arrived, :HOVER] = 0.0
    cos[arrived, HOVER] = 1.0
    s = cos / omega
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def soft_target(u: int, matching: Matching, plan, state, omega: float, arrive_radius: float = 0.0) -> np.ndarray:
    plan = np.asarray(plan, dtype=float)
    z = plan[matching.sigma[u], :2] - state.uav[u, :2]
    return soft_targets(z[None, :], omega, arrive_radius)[0]


def kd_terms(logp: np.ndarray, targets: np.ndarray, mask: np.ndarray, probs: np.ndarray):
    """Cross-entropy to the soft targets averaged over masked rows, with its logit gradient."""
    count = float(np.sum(mask))
    if count == 0:
        return 0.0, np.zeros_like(logp)
    ce = -np.sum(targets * logp, axis=1)
    loss = float(np.sum(ce * mask)) / count
    d = (probs - targets) * (mask / count)[:, None]
    return loss, d


def kd_loss(net: AgentNet, obs: np.ndarray, target: np.ndarray):
    obs = np.atleast_2d(obs)
    target = np.atleast_2d(target)
    net.check_obs(obs)
    logits, acts = net.actor.forward(obs)
    logp = log_softmax(logits)
    loss, d = kd_terms(logp, target, np.ones(len(obs)), np.exp(logp))
    grads = net.actor.backward(acts, d) + [np.zeros_like(p) for p in net.critic.params]
    return loss, grads
