"""Observations, per-agent stochastic policies, GAE and the PPO loss family."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distill import kd_terms
from .guard import bc_terms
from .mesh import ConnectivityReport
from .nets import N_ACTIONS, AgentNet, log_softmax
from .radio import LinkTable
from .world import ScenarioConfig, WorldState

SNR_CLIP = (-30.0, 60.0)
RATE_REF = 10e6  # bits/s


def _snr_feature(snr: np.ndarray) -> np.ndarray:
    lo, hi = SNR_CLIP
    s = np.clip(np.nan_to_num(snr, nan=lo), lo, hi)
    return (s - lo) * (2.0 / (hi - lo)) - 1.0


def obs_dim(n_uav: int, n_ue: int, n_bs: int) -> int:
    n_nodes = n_uav + n_ue + n_bs
    shared = 2 * n_nodes + n_uav * (n_uav - 1) // 2 + n_bs * n_uav + n_ue + n_uav
    local = 2 + n_nodes
    return shared + local


def shared_block(state: WorldState, links: LinkTable, report: ConnectivityReport, side_length: float, rate_ref: float = RATE_REF) -> np.ndarray:
    U = state.n_uav
    iu = np.triu_indices(U, k=1)
    parts = [
        state.uav[:, :2].ravel() / side_length,
        state.ue[:, :2].ravel() / side_length,
        state.bs[:, :2].ravel() / side_length,
        _snr_feature(links.snr_uav_uav[iu]),
        _snr_feature(links.snr_bs_uav.ravel()),
        np.clip(report.ue_rate / rate_ref, 0.0, 1.0),
        report.uav_connected.astype(float),
    ]
    return np.concatenate(parts)


def build_observations(
    state: WorldState,
    links: LinkTable,
    report: ConnectivityReport,
    cfg: ScenarioConfig,
    rate_ref: float = RATE_REF,
) -> np.ndarray:
    """One row per UAV: the shared block followed by the agent's local block."""
    U = state.n_uav
    shared = shared_block(state, links, report, cfg.side_length, rate_ref)
    own_xy = state.uav[:, :2] / cfg.side_length
    row = np.concatenate([links.snr_uav_uav, links.snr_uav_ue, links.snr_bs_uav.T], axis=1)
    local = np.concatenate([own_xy, _snr_feature(row)], axis=1)
    return np.concatenate([np.broadcast_to(shared, (U, len(shared))), local], axis=1)


def policy_forward(net: AgentNet, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Action probabilities ``(n, 9)`` and values ``(n,)``."""
    obs = np.atleast_2d(obs)
    net.check_obs(obs)
    probs = np.exp(log_softmax(net.actor(obs)))
    return probs, net.critic(obs)[:, 0]


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), N_ACTIONS - 1)


def greedy_actions(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=1)  # first maximum, so ties go to the lowest code


class PolicySet:
    """Parameter sets for the share slots; agent ``u`` uses ``nets[slot_of[u]]``."""

    def __init__(self, slot_of: Sequence[int], obs_size: int, hidden: int, rng: np.random.Generator):
        self.slot_of = np.asarray(slot_of, dtype=int)
        n_slots = int(self.slot_of.max()) + 1 if len(self.slot_of) else 0
        if sorted(set(self.slot_of.tolist())) != list(range(n_slots)):
            raise ValueError("share slots must be numbered 0..k-1 with no gaps")
        self.nets = [AgentNet(obs_size, hidden, rng) for _ in range(n_slots)]

    @property
    def n_slots(self) -> int:
        return len(self.nets)

    def members(self, slot: int) -> np.ndarray:
        return np.flatnonzero(self.slot_of == slot)

    def forward(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-agent ``(probs, values, log_probs)`` using each agent's slot."""
        logp = np.empty((len(obs), N_ACTIONS))
        values = np.empty(len(obs))
        for s, net in enumerate(self.nets):
            idx = self.members(s)
            if len(idx) == 0:
                continue
            x = obs[idx]
            net.check_obs(x)
            logp[idx] = log_softmax(net.actor(x))
            values[idx] = net.critic(x)[:, 0]
        return np.exp(logp), values, logp


@dataclass
class TransitionBatch:
    """Flat transitions (one row per agent-step) for a single parameter set."""

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    kd_target: np.ndarray  # (n, 9); rows with kd_mask 0 are ignored
    kd_mask: np.ndarray
    bc_action: np.ndarray
    bc_weight: np.ndarray  # already divided by side_length; 0 when inactive
    advantages: np.ndarray = field(default=None)  # type: ignore[assignment]
    returns: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        n = len(self.actions)
        for name in ("obs", "logp", "values", "rewards", "dones", "kd_target", "kd_mask", "bc_action", "bc_weight"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} has length {len(getattr(self, name))}, expected {n}")
        if np.any(self.logp > 0):
            raise ValueError("log-probabilities must be <= 0")

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, idx: np.ndarray) -> "TransitionBatch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return TransitionBatch(
            self.obs[idx], self.actions[idx], self.logp[idx], self.values[idx], self.rewards[idx],
            self.dones[idx], self.kd_target[idx], self.kd_mask[idx], self.bc_action[idx],
            self.bc_weight[idx], pick(self.advantages), pick(self.returns),
        )

    @staticmethod
    def concat(batches: Sequence["TransitionBatch"]) -> "TransitionBatch":
        def cat(name):
            vals = [getattr(b, name) for b in batches]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        names = ("obs", "actions", "logp", "values", "rewards", "dones", "kd_target", "kd_mask",
                 "bc_action", "bc_weight", "advantages", "returns")
        return TransitionBatch(*[cat(n) for n in names])


def gae_advantages(rewards, values, dones, last_value: float, gamma: float, lam: float):
    """GAE over one trajectory. ``dones[t] = 1`` stops bootstrapping past step t.

    Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T = len(rewards)
    adv = np.zeros(T)
    next_value = float(last_value)
    running = 0.0
    for t in reversed(range(T)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    if len(adv) == 0:
        return adv
    return (adv - adv.mean()) / (adv.std() + eps)


@dataclass(frozen=True)
class LossCoefs:
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    beta1: float = 0.0
    beta2: float = 0.0


def clipped_surrogate(ratio, adv, eps: float):
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def total_loss(net: AgentNet, batch: TransitionBatch, coefs: LossCoefs):
    """PPO + beta1 * KD + beta2 * BC in one forward pass.

    Returns ``(loss, grads, stats)``; grads are aligned with ``net.params``.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    net.check_obs(batch.obs)
    logits, a_acts = net.actor.forward(batch.obs)
    v_out, c_acts = net.critic.forward(batch.obs)
    values = v_out[:, 0]
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    idx = np.arange(n)
    adv = batch.advantages

    ratio = np.exp(logp_all[idx, batch.actions] - batch.logp)
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - coefs.clip_eps, 1.0 + coefs.clip_eps) * adv
    surrogate = float(np.mean(np.minimum(s1, s2)))
    entropy_each = -np.sum(probs * logp_all, axis=1)
    entropy = float(np.mean(entropy_each))
    v_err = values - batch.returns
    value_loss = float(np.mean(v_err**2))

    # d(-surrogate)/dlogits: ratio * (onehot - p) where the unclipped branch is active
    active = (s1 <= s2).astype(float)
    g_ratio = -(active * adv * ratio) / n
    d = -probs * g_ratio[:, None]
    d[idx, batch.actions] += g_ratio
    # d(-ent_coef * H)/dlogits
    d += (coefs.entropy_coef / n) * probs * (logp_all + entropy_each[:, None])

    loss = -surrogate - coefs.entropy_coef * entropy + coefs.value_coef * value_loss
    stats = {"surrogate": surrogate, "entropy": entropy, "value": value_loss, "kd": 0.0, "bc": 0.0}
    if coefs.beta1 != 0.0:
        kd, dkd = kd_terms(logp_all, batch.kd_target, batch.kd_mask, probs)
        loss += coefs.beta1 * kd
        d += coefs.beta1 * dkd
        stats["kd"] = kd
    if coefs.beta2 != 0.0:
        bc, dbc = bc_terms(logp_all, batch.bc_action, batch.bc_weight, probs)
        loss += coefs.beta2 * bc
        d += coefs.beta2 * dbc
        stats["bc"] = bc

    dv = (coefs.value_coef * 2.0 / n) * v_err[:, None]
    grads = net.actor.backward(a_acts, d) + net.critic.backward(c_acts, dv)
    stats["loss"] = float(loss)
    return float(loss), grads, stats


def ppo_loss(net: AgentNet, batch: TransitionBatch, epsilon: float = 0.2, entropy_coef: float = 0.01, value_coef: float = 0.5):
    loss, grads, _ = total_loss(net, batch, LossCoefs(epsilon, entropy_coef, value_coef))
    return loss, grads
