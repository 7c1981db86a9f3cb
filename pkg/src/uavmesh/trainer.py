"""Episode rollouts, the combined-objective update and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nets as nets_mod
from .advisor import Advisor, AdvisorPlan
from .config import ARTIFACT_VERSION, RunConfig, config_hash, config_to_dict
from .distill import hungarian_match, soft_targets
from .guard import bc_targets
from .mesh import evaluate, metrics
from .nets import N_ACTIONS, Adam, clip_grad_norm
from .policy import (
    LossCoefs,
    PolicySet,
    TransitionBatch,
    build_observations,
    gae_advantages,
    greedy_actions,
    normalize_advantages,
    obs_dim,
    sample_actions,
    total_loss,
)
from .rewards import GroupAssignment, assign_groups, default_group_sizes, step_rewards
from .world import ConfigError, WorldState, apply_actions, init_world, step_ues

log = logging.getLogger(__name__)

_STREAMS = {"world": 0, "policy-init": 1, "sampling": 2, "ue-motion": 3}
_EVAL_KEY = 1_000_000  # episode offset for evaluation streams


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent named random stream for ``(seed, name, *keys)``."""
    return np.random.default_rng([int(seed), _STREAMS[name], *(int(k) for k in keys)])


def linear_schedule(start: float, end: float, i: int, n: int) -> float:
    if n <= 1:
        return start
    frac = min(max(i / (n - 1), 0.0), 1.0)
    return start + (end - start) * frac


# ---------------------------------------------------------------- groups and slots


def make_groups(cfg: RunConfig, state: WorldState) -> GroupAssignment:
    r = cfg.rewards
    sizes = r.group_sizes or default_group_sizes(state.n_uav, state.n_bs, r.n_groups)
    return assign_groups(state, sizes, r.alpha1, r.alpha2)


def slot_map(cfg: RunConfig, groups: GroupAssignment) -> np.ndarray:
    mode = cfg.training.share_slots
    U = len(groups.group_of)
    if mode == "agent":
        return np.arange(U)
    if mode == "group":
        return groups.group_of.copy()
    slots = np.asarray(mode, dtype=int)
    if slots.shape != (U,):
        raise ConfigError("training.share_slots", f"need one slot per UAV ({U})")
    for s in np.unique(slots):
        if len(np.unique(groups.group_of[slots == s])) > 1:
            raise ConfigError("training.share_slots", f"slot {s} spans several reward groups")
    return slots


def n_slots_for(cfg: RunConfig) -> int:
    mode = cfg.training.share_slots
    if mode == "agent":
        return cfg.scenario.n_uav
    if mode == "group":
        s = cfg.scenario
        return len(cfg.rewards.group_sizes or default_group_sizes(s.n_uav, s.n_bs, cfg.rewards.n_groups))
    return int(max(mode)) + 1


# ---------------------------------------------------------------- rollouts


@dataclass
class StepLog:
    """What one step contributes to the trace."""

    t: int
    state: WorldState  # after the actions
    actions: np.ndarray
    reward: object  # RewardBreakdown
    report: object  # ConnectivityReport
    links: object  # LinkTable


@dataclass
class EpisodeResult:
    batches: list[TransitionBatch]  # one per agent
    team_reward: float
    connected_prop: float
    avg_rate: float  # bits/s
    available: float
    steps: list[StepLog] = field(default_factory=list)
    advisor_calls: int = 0


def run_episode(
    cfg: RunConfig,
    policies: PolicySet | None,
    advisor: Advisor | None,
    episode: int,
    mode: str = "sample",
    keep_steps: bool = False,
    stream_key: int | None = None,
    action_fn: Callable | None = None,
    initial_uav: Callable[[WorldState], np.ndarray] | None = None,
) -> EpisodeResult:
    """Roll out one episode.

    ``mode`` is "sample" (training), "greedy" or "random". ``action_fn``
    overrides the policy entirely and ``initial_uav`` replaces the sampled
    UAV start positions (both used by the simulate command).
    """
    scen, radio, tr = cfg.scenario, cfg.radio, cfg.training
    key = episode if stream_key is None else stream_key
    state = init_world(scen, stream(tr.seed, "world", key))
    if initial_uav is not None:
        state.uav = np.array(initial_uav(state), dtype=float).reshape(state.n_uav, 3)
    rng_act = stream(tr.seed, "sampling", key)
    rng_ue = stream(tr.seed, "ue-motion", key)
    groups = make_groups(cfg, state)
    if policies is not None:
        policies.slot_of = slot_map(cfg, groups)
    in_bs = np.array([groups.in_bs_group(u) for u in range(state.n_uav)])
    arrive = scen.uav_step / 2 if tr.arrive_radius is None else tr.arrive_radius
    use_advisor = advisor is not None and not tr.nl
    reward_groups = None if tr.nr else groups
    U, T = scen.n_uav, scen.horizon

    D = obs_dim(U, scen.n_ue, scen.n_bs)
    buf_obs = np.empty((T, U, D))
    buf_act = np.empty((T, U), dtype=int)
    buf_logp = np.empty((T, U))
    buf_val = np.empty((T, U))
    buf_rew = np.empty((T, U))
    buf_kd = np.zeros((T, U, N_ACTIONS))
    buf_kd_mask = np.zeros((T, U))
    buf_bc_act = np.zeros((T, U), dtype=int)
    buf_bc_w = np.zeros((T, U))
    sums = np.zeros(4)
    steps: list[StepLog] = []
    calls = 0
    plan: AdvisorPlan | None = None
    if advisor is not None:
        advisor.cache = type(advisor.cache)()  # plans never outlive their episode

    links, report = evaluate(state, radio)
    for t in range(T):
        obs = build_observations(state, links, report, scen)
        if use_advisor and t % cfg.advisor.q_llm == 0:
            plan = advisor.refresh(state)
            calls += 1
        if action_fn is not None:
            actions = np.asarray(action_fn(state, t), dtype=int)
            logp = np.full(U, -math.log(N_ACTIONS))
            values = np.zeros(U)
        elif mode == "random" or policies is None:
            actions = rng_act.integers(0, N_ACTIONS, size=U)
            logp = np.full(U, -math.log(N_ACTIONS))
            values = np.zeros(U)
        else:
            probs, values, logp_all = policies.forward(obs)
            actions = greedy_actions(probs) if mode == "greedy" else sample_actions(probs, rng_act)
            logp = logp_all[np.arange(U), actions]
        if mode == "sample":
            targets = bc_targets(state, links, radio, in_bs)
            buf_bc_act[t] = [b.target_action for b in targets]
            buf_bc_w[t] = [b.weight / scen.side_length if b.active else 0.0 for b in targets]
            if plan is not None:
                m = hungarian_match(state.uav, plan.positions)
                goal = plan.positions[list(m.sigma), :2]
                buf_kd[t] = soft_targets(goal - state.uav[:, :2], cfg.advisor.omega, arrive)
                buf_kd_mask[t] = 1.0
        buf_obs[t], buf_act[t], buf_logp[t], buf_val[t] = obs, actions, logp, values

        state = step_ues(apply_actions(state, actions, scen), scen, rng_ue)
        links, report = evaluate(state, radio)
        rb = step_rewards(report, links, reward_groups, cfg.rewards.kappa)
        buf_rew[t] = rb.individual
        prop, rate, avail = metrics(report, scen.n_ue, U)
        sums += (rb.team, prop, rate, avail)
        if keep_steps:
            steps.append(StepLog(t + 1, state, actions, rb, report, links))

    batches = []
    if mode == "sample" and policies is not None:
        last_obs = build_observations(state, links, report, scen)
        _, last_val, _ = policies.forward(last_obs)
        dones = np.zeros(T)
        for u in range(U):
            adv, ret = gae_advantages(buf_rew[:, u], buf_val[:, u], dones, last_val[u], tr.gamma, tr.lam)
            b = TransitionBatch(
                buf_obs[:, u], buf_act[:, u], buf_logp[:, u], buf_val[:, u], buf_rew[:, u], dones,
                buf_kd[:, u], buf_kd_mask[:, u], buf_bc_act[:, u], buf_bc_w[:, u], adv, ret,
            )
            batches.append(b)
    team, prop, rate, avail = (float(v) for v in sums / T)
    return EpisodeResult(batches, team, prop, rate, avail, steps, calls)


# ---------------------------------------------------------------- optimisation


@dataclass
class UpdateStats:
    ppo: float = 0.0
    kd: float = 0.0
    bc: float = 0.0
    loss_before: float = 0.0
    loss_after: float = 0.0
    aborted: int = 0


def loss_coefs(cfg: RunConfig, episode: int) -> LossCoefs:
    tr = cfg.training
    beta1 = 0.0 if tr.nl else linear_schedule(tr.beta1_start, tr.beta1_end, episode, tr.n_episodes)
    beta2 = 0.0 if tr.nc else tr.beta2
    return LossCoefs(tr.clip_eps, tr.entropy_coef, tr.value_coef, beta1, beta2)


def optimize(
    policies: PolicySet,
    optims: list[Adam],
    batches: list[TransitionBatch],
    cfg: RunConfig,
    episode: int,
    rng: np.random.Generator,
) -> UpdateStats:
    """K epochs of minibatch Adam on the combined objective, separately per slot."""
    tr = cfg.training
    coefs = loss_coefs(cfg, episode)
    lr = linear_schedule(tr.lr_start, tr.lr_end, episode, tr.n_episodes)
    stats = UpdateStats()
    for s, net in enumerate(policies.nets):
        members = policies.members(s)
        if len(members) == 0:
            continue
        batch = TransitionBatch.concat([batches[u] for u in members])
        batch.advantages = normalize_advantages(batch.advantages)
        opt = optims[s]
        opt.lr = lr
        backup = net.copy_params()
        before, _, parts = total_loss(net, batch, coefs)
        n = len(batch)
        ok = True
        for _ in range(tr.k_epochs):
            order = rng.permutation(n)
            for start in range(0, n, tr.minibatch_size):
                mb = batch.subset(order[start : start + tr.minibatch_size])
                loss, grads, _ = total_loss(net, mb, coefs)
                if not math.isfinite(loss):
                    ok = False
                    break
                clip_grad_norm(grads, tr.max_grad_norm)
                opt.step(net.params, grads)
            if not ok:
                break
        after = total_loss(net, batch, coefs)[0] if ok else float("nan")
        if not ok or not math.isfinite(after):
            net.set_params(backup)
            stats.aborted += 1
            log.warning("non-finite loss in slot %d at episode %d; parameters restored", s, episode)
            after = before
        w = len(members) / len(policies.slot_of)
        stats.ppo += w * (-parts["surrogate"] - coefs.entropy_coef * parts["entropy"] + coefs.value_coef * parts["value"])
        stats.kd += w * parts["kd"]
        stats.bc += w * parts["bc"]
        stats.loss_before += w * before
        stats.loss_after += w * after
    return stats


# ---------------------------------------------------------------- records and traces

RECORD_FIELDS = (
    "episode", "kind", "team_reward", "team_reward_std", "connected_prop", "avg_rate_mbps",
    "available_ratio", "loss_ppo", "loss_kd", "loss_bc", "loss_before", "loss_after",
    "lr", "beta1", "advisor_requests", "advisor_rejections", "advisor_cache_hits",
)


def step_records(episode: int, steps: list[StepLog], threshold: float) -> list[dict]:
    """Per-step, per-agent trace rows. Topology edges list links at or above threshold."""
    rows = []
    for s in steps:
        th_uu = np.nan_to_num(s.links.snr_uav_uav, nan=-np.inf)
        served = np.bincount(s.report.serving_uav[s.report.serving_uav >= 0], minlength=len(s.actions))
        for u in range(len(s.actions)):
            edges = [["uav", int(v), float(th_uu[u, v])] for v in range(len(s.actions)) if v != u and th_uu[u, v] >= threshold]
            edges += [["bs", int(g), float(s.links.snr_bs_uav[g, u])] for g in range(s.links.n_bs) if s.links.snr_bs_uav[g, u] >= threshold]
            rows.append({
                "episode": episode,
                "step": s.t,
                "agent": u,
                "position": [float(v) for v in s.state.uav[u]],
                "action": int(s.actions[u]),
                "team_reward": float(s.reward.team),
                "conn_bps": float(s.reward.conn[u]),
                "relay_bps": float(s.reward.relay[u]),
                "individual_reward": float(s.reward.individual[u]),
                "uav_connected": bool(s.report.uav_connected[u]),
                "hops": int(s.report.hops[u]),
                "served_ues": int(served[u]),
                "links": edges,
            })
    return rows


def trace_header(cfg: RunConfig, episode: int) -> dict:
    s = cfg.scenario
    return {"record": "header", "episode": episode, "n_uav": s.n_uav, "n_ue": s.n_ue, "n_bs": s.n_bs,
            "kappa": cfg.rewards.kappa, "side_length": s.side_length, "horizon": s.horizon,
            "units": {"position": "m", "conn_bps": "bit/s", "relay_bps": "bit/s", "links": "[kind, index, snr_db]"}}


def write_trace(path: Path, cfg: RunConfig, episode: int, steps: list[StepLog]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(trace_header(cfg, episode)) + "\n")
        for row in step_records(episode, steps, cfg.radio.snr_threshold):
            f.write(json.dumps(row) + "\n")


def read_trace(path: Path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    return lines[0], lines[1:]


def metrics_from_trace(header: dict, rows: list[dict]) -> dict:
    """Recompute episode metrics from trace rows alone."""
    M, U, kappa = header["n_ue"], header["n_uav"], header["kappa"]
    by_step: dict[int, list[dict]] = {}
    for r in rows:
        by_step.setdefault(r["step"], []).append(r)
    team, prop, rate, avail = [], [], [], []
    for t in sorted(by_step):
        rs = sorted(by_step[t], key=lambda r: r["agent"])
        total_rate = sum(r["conn_bps"] for r in rs)
        served = sum(r["served_ues"] for r in rs)
        prop.append(served / M)
        rate.append(total_rate / M)
        avail.append(sum(r["uav_connected"] for r in rs) / U)
        team.append(served / M + kappa / M * total_rate / 1e6)
    n = len(team)
    return {
        "team_reward": math.fsum(team) / n if n else 0.0,
        "connected_prop": math.fsum(prop) / n if n else 0.0,
        "avg_rate_mbps": math.fsum(rate) / n / 1e6 if n else 0.0,
        "available_ratio": math.fsum(avail) / n if n else 0.0,
    }


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(out: Path, cfg: RunConfig, policies: PolicySet, optims: list[Adam], episode: int) -> None:
    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    arrays = [a for net in policies.nets for a in net.params]
    for opt in optims:
        arrays += opt.state_arrays()
    tmp = ck / "latest.bin.tmp"
    tmp.write_bytes(nets_mod.dump_arrays(arrays))
    tmp.replace(ck / "latest.bin")
    manifest = {
        "config_hash": config_hash(cfg),
        "episode": episode,
        "seed": cfg.training.seed,
        "n_slots": policies.n_slots,
        "obs_dim": policies.nets[0].obs_dim if policies.nets else 0,
        "hidden": cfg.training.hidden,
        "shapes": [list(p.shape) for p in policies.nets[0].params] if policies.nets else [],
        "artifact_version": ARTIFACT_VERSION,
    }
    (ck / "latest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_checkpoint(path: Path, policies: PolicySet, optims: list[Adam] | None = None) -> dict:
    """Load parameters (and optimiser state if given); returns the manifest."""
    path = Path(path)
    if path.is_dir():
        path = path / "latest.bin"
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    expect = [net.obs_dim for net in policies.nets[:1]]
    if manifest["n_slots"] != policies.n_slots or (expect and manifest["obs_dim"] != expect[0]):
        raise ValueError(
            f"checkpoint has {manifest['n_slots']} slots x obs_dim {manifest['obs_dim']}, "
            f"config needs {policies.n_slots} slots x obs_dim {expect[0] if expect else 0}"
        )
    arrays = nets_mod.load_arrays(path.read_bytes())
    k = 0
    for net in policies.nets:
        n = len(net.params)
        net.set_params(arrays[k : k + n])
        k += n
    if optims is not None and k < len(arrays):
        for opt in optims:
            n = 1 + 2 * len(opt.m)
            opt.load_state_arrays(arrays[k : k + n])
            k += n
    return manifest


# ---------------------------------------------------------------- training loop


def build_policies(cfg: RunConfig) -> PolicySet:
    s = cfg.scenario
    D = obs_dim(s.n_uav, s.n_ue, s.n_bs)
    n = n_slots_for(cfg)
    # placeholder slot map; run_episode sets the real one from each episode's groups
    slots = np.minimum(np.arange(s.n_uav), n - 1)
    ps = PolicySet(slots, D, cfg.training.hidden, stream(cfg.training.seed, "policy-init"))
    if ps.n_slots != n:
        ps.nets += [type(ps.nets[0])(D, cfg.training.hidden, stream(cfg.training.seed, "policy-init", k))
                    for k in range(ps.n_slots, n)]
    return ps


def make_advisor(cfg: RunConfig, deterministic: bool = True, backend=None) -> Advisor:
    return Advisor(cfg.advisor, cfg.radio, cfg.scenario.side_length, cfg.scenario.uav_altitude,
                   deterministic=deterministic, backend=backend)


def evaluate_policy(cfg: RunConfig, policies: PolicySet | None, n_episodes: int, mode: str = "greedy", key_base: int = _EVAL_KEY) -> dict:
    """Mean and std of the episode metrics over fresh evaluation episodes."""
    rows = []
    for k in range(n_episodes):
        r = run_episode(cfg, policies, None, k, mode=mode, stream_key=key_base + k)
        rows.append((r.team_reward, r.connected_prop, r.avg_rate / 1e6, r.available))
    if not rows:
        return {}
    a = np.array(rows)
    names = ("team_reward", "connected_prop", "avg_rate_mbps", "available_ratio")
    out = {}
    for i, name in enumerate(names):
        out[name] = float(a[:, i].mean())
        out[name + "_std"] = float(a[:, i].std())
    return out


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)

    def train_rows(self) -> list[dict]:
        return [r for r in self.rows if r["kind"] == "train"]

    def series(self, name: str, kind: str = "train") -> np.ndarray:
        return np.array([r[name] for r in self.rows if r["kind"] == kind], dtype=float)

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=RECORD_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})

    @classmethod
    def read_csv(cls, path: Path) -> "RunRecord":
        rows = []
        with open(path, newline="", encoding="utf-8") as f:
            for r in csv.DictReader(f):
                row = {}
                for k, v in r.items():
                    if k == "kind":
                        row[k] = v
                    elif k in ("episode", "advisor_requests", "advisor_rejections", "advisor_cache_hits"):
                        row[k] = int(v)
                    else:
                        row[k] = float(v)
                rows.append(row)
        return cls(rows)


def train(cfg: RunConfig, out: Path | None = None, deterministic: bool = True, resume: bool = True,
          advisor: Advisor | None = None, progress: Callable[[dict], None] | None = None,
          policies: PolicySet | None = None) -> RunRecord:
    """Run the full loop. Pass ``policies`` (from :func:`build_policies`) to keep the trained nets."""
    tr = cfg.training
    policies = build_policies(cfg) if policies is None else policies
    optims = [Adam(net.params, lr=tr.lr_start) for net in policies.nets]
    record = RunRecord()
    start = 0
    if out is not None:
        out = Path(out)
        (out / "traces").mkdir(parents=True, exist_ok=True)
        write_manifest(out, cfg, deterministic)
        ck = out / "checkpoints" / "latest.bin"
        if resume and ck.exists():
            manifest = load_checkpoint(ck, policies, optims)
            if manifest["config_hash"] != config_hash(cfg):
                raise ConfigError("config", "checkpoint in output directory belongs to a different config")
            start = manifest["episode"]
            if (out / "run_record.csv").exists():
                old = RunRecord.read_csv(out / "run_record.csv")
                record.rows = [r for r in old.rows if r["episode"] < start]
            log.info("resuming from episode %d", start)
    if advisor is None and not tr.nl:
        advisor = make_advisor(cfg, deterministic)
    t0 = time.perf_counter()
    for ep in range(start, tr.n_episodes):
        before = _advisor_counts(advisor)
        want_trace = out is not None and tr.trace_every > 0 and (ep % tr.trace_every == 0 or ep == tr.n_episodes - 1)
        res = run_episode(cfg, policies, advisor, ep, keep_steps=want_trace)
        if want_trace:
            write_trace(out / "traces" / f"episode_{ep:05d}.jsonl", cfg, ep, res.steps)
        st = optimize(policies, optims, res.batches, cfg, ep, stream(tr.seed, "sampling", ep, 1))
        after = _advisor_counts(advisor)
        coefs = loss_coefs(cfg, ep)
        row = {
            "episode": ep, "kind": "train", "team_reward": res.team_reward, "team_reward_std": 0.0,
            "connected_prop": res.connected_prop, "avg_rate_mbps": res.avg_rate / 1e6,
            "available_ratio": res.available, "loss_ppo": st.ppo, "loss_kd": st.kd, "loss_bc": st.bc,
            "loss_before": st.loss_before, "loss_after": st.loss_after,
            "lr": linear_schedule(tr.lr_start, tr.lr_end, ep, tr.n_episodes), "beta1": coefs.beta1,
            "advisor_requests": after[0] - before[0], "advisor_rejections": after[1] - before[1],
            "advisor_cache_hits": after[2] - before[2],
        }
        record.rows.append(row)
        if progress:
            progress(row)
        if tr.eval_every > 0 and tr.eval_episodes > 0 and (ep + 1) % tr.eval_every == 0:
            ev = evaluate_policy(cfg, policies, tr.eval_episodes)
            record.rows.append({
                **{k: 0.0 for k in RECORD_FIELDS}, "episode": ep, "kind": "eval",
                "team_reward": ev["team_reward"], "team_reward_std": ev["team_reward_std"],
                "connected_prop": ev["connected_prop"], "avg_rate_mbps": ev["avg_rate_mbps"],
                "available_ratio": ev["available_ratio"], "lr": row["lr"], "beta1": row["beta1"],
                "advisor_requests": 0, "advisor_rejections": 0, "advisor_cache_hits": 0,
            })
        if out is not None:
            if tr.checkpoint_every > 0 and ((ep + 1) % tr.checkpoint_every == 0 or ep + 1 == tr.n_episodes):
                save_checkpoint(out, cfg, policies, optims, ep + 1)
                record.write_csv(out / "run_record.csv")
    if out is not None:
        record.write_csv(out / "run_record.csv")
        if tr.n_episodes == 0 or tr.checkpoint_every == 0:
            save_checkpoint(out, cfg, policies, optims, tr.n_episodes)
        (out / "timing.json").write_text(json.dumps({"wall_seconds": time.perf_counter() - t0}), encoding="utf-8")
    if advisor is not None:
        advisor.close()
    return record


def _advisor_counts(advisor: Advisor | None) -> tuple[int, int, int]:
    if advisor is None:
        return (0, 0, 0)
    s = advisor.stats
    return (s.requests, s.rejections, s.cache_hits)


def write_manifest(out: Path, cfg: RunConfig, deterministic: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.training.seed,
        "deterministic": deterministic,
        "artifact_version": ARTIFACT_VERSION,
        "config": config_to_dict(cfg),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
