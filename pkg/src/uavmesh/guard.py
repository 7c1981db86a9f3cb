"""Behavioural constraint for the UAVs nearest the base stations.

When such a UAV loses every BS link it is pushed, through an extra
log-likelihood term, toward the action pointing at its best BS.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import AgentNet, log_softmax
from .radio import LinkTable, RadioParams
from .world import ACTION_VECTORS, WorldState

MOVE_ACTIONS = 8  # hover is never a guidance target
MIN_WEIGHT = 1.0


@dataclass(frozen=True)
class BcTarget:
    active: bool
    target_action: int
    weight: float  # metres to the target BS; 0 when inactive


INACTIVE = BcTarget(False, 0, 0.0)


def best_bs(u: int, links: LinkTable) -> int:
    return int(np.argmax(links.snr_bs_uav[:, u]))


def closest_action(direction: np.ndarray) -> int:
    """Move action whose unit vector has the largest cosine with ``direction`` (lower code on ties)."""
    cos = ACTION_VECTORS[:MOVE_ACTIONS] @ direction
    return int(np.argmax(cos))


def guidance_action(u: int, state: WorldState, links: LinkTable, params: RadioParams) -> BcTarget:
    g = best_bs(u, links)
    if links.snr_bs_uav[g, u] >= params.snr_threshold:
        return INACTIVE
    delta = state.bs[g, :2] - state.uav[u, :2]
    dist = float(np.hypot(delta[0], delta[1]))
    if dist == 0.0:
        return BcTarget(True, 0, MIN_WEIGHT)
    return BcTarget(True, closest_action(delta / dist), max(dist, MIN_WEIGHT))


def bc_targets(state: WorldState, links: LinkTable, params: RadioParams, in_bs_group: np.ndarray) -> list[BcTarget]:
    return [
        guidance_action(u, state, links, params) if in_bs_group[u] else INACTIVE
        for u in range(state.n_uav)
    ]


def bc_terms(logp: np.ndarray, actions: np.ndarray, weights: np.ndarray, probs: np.ndarray):
    """Mean weighted NLL over the batch and its gradient w.r.t. the logits."""
    n = len(actions)
    idx = np.arange(n)
    loss = float(np.sum(weights * -logp[idx, actions])) / n
    d = probs.copy()
    d[idx, actions] -= 1.0
    d *= (weights / n)[:, None]
    return loss, d


def bc_loss(net: AgentNet, obs: np.ndarray, target: BcTarget | list[BcTarget], side_length: float):
    """Constraint loss; ``weight`` is divided by ``side_length`` to keep it O(1).

    Returns ``(loss, grads)`` with grads aligned to ``net.params`` (critic part zero).
    """
    obs = np.atleast_2d(obs)
    targets = [target] if isinstance(target, BcTarget) else list(target)
    net.check_obs(obs)
    actions = np.array([t.target_action for t in targets])
    weights = np.array([t.weight / side_length if t.active else 0.0 for t in targets])
    logits, acts = net.actor.forward(obs)
    logp = log_softmax(logits)
    loss, d = bc_terms(logp, actions, weights, np.exp(logp))
    grads = net.actor.backward(acts, d) + [np.zeros_like(p) for p in net.critic.params]
    return loss, grads
