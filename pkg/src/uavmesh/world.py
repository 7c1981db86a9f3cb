"""Scenario definition, node kinematics and episode stepping.

Positions are stored as dense arrays per node kind (UAV, UE, BS); a
``NodeId`` is just ``(kind, index)`` into those arrays.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value; the message names the field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class NodeKind(enum.Enum):
    UAV = "uav"
    UE = "ue"
    BS = "bs"


class NodeId(NamedTuple):
    kind: NodeKind
    index: int


# Action codes: N, NE, E, SE, S, SW, W, NW, hover.
ACTION_NAMES = ("N", "NE", "E", "SE", "S", "SW", "W", "NW", "HOVER")
N_ACTIONS = 9
HOVER = 8
_D = 1.0 / math.sqrt(2.0)
ACTION_VECTORS = np.array(
    [
        [0.0, 1.0],
        [_D, _D],
        [1.0, 0.0],
        [_D, -_D],
        [0.0, -1.0],
        [-_D, -_D],
        [-1.0, 0.0],
        [-_D, _D],
        [0.0, 0.0],
    ]
)


@dataclass(frozen=True)
class GaussianMixture:
    centers: tuple[tuple[float, float], ...]
    sigmas: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        n = len(self.centers)
        if n == 0:
            raise ConfigError("scenario.ue_init.centers", "at least one center required")
        if len(self.sigmas) != n or len(self.weights) != n:
            raise ConfigError("scenario.ue_init", "centers, sigmas and weights must have equal length")
        if any(s <= 0 for s in self.sigmas):
            raise ConfigError("scenario.ue_init.sigmas", "must be > 0")
        if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise ConfigError("scenario.ue_init.weights", "must be non-negative with a positive sum")


@dataclass(frozen=True)
class ScenarioConfig:
    side_length: float = 3500.0
    n_uav: int = 18
    n_ue: int = 150
    n_bs: int = 3
    uav_altitude: float = 100.0
    bs_height: float = 30.0
    ue_speed: float = 1.0
    uav_step: float = 30.0
    horizon: int = 400
    ue_init: GaussianMixture | None = None  # None means uniform
    heading_noise: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        if not self.side_length > 0:
            raise ConfigError("scenario.side_length", "must be > 0")
        for name in ("n_uav", "n_ue", "n_bs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"scenario.{name}", "must be >= 1")
        if not self.uav_step > 0:
            raise ConfigError("scenario.uav_step", "must be > 0")
        if self.horizon < 1:
            raise ConfigError("scenario.horizon", "must be >= 1")
        if self.ue_speed < 0:
            raise ConfigError("scenario.ue_speed", "must be >= 0")
        if self.uav_altitude <= 0:
            raise ConfigError("scenario.uav_altitude", "must be > 0")


@dataclass
class WorldState:
    t: int
    uav: np.ndarray  # (U, 3)
    ue: np.ndarray  # (M, 3)
    bs: np.ndarray  # (G, 3)
    ue_heading: np.ndarray  # (M,) radians

    @property
    def n_uav(self) -> int:
        return len(self.uav)

    @property
    def n_ue(self) -> int:
        return len(self.ue)

    @property
    def n_bs(self) -> int:
        return len(self.bs)

    def position(self, node: NodeId) -> np.ndarray:
        return {NodeKind.UAV: self.uav, NodeKind.UE: self.ue, NodeKind.BS: self.bs}[node.kind][node.index]

    @property
    def positions(self) -> dict[NodeId, np.ndarray]:
        out: dict[NodeId, np.ndarray] = {}
        for kind, arr in ((NodeKind.UAV, self.uav), (NodeKind.UE, self.ue), (NodeKind.BS, self.bs)):
            for i, p in enumerate(arr):
                out[NodeId(kind, i)] = p
        return out

    @classmethod
    def from_positions(
        cls,
        t: int,
        positions: Mapping[NodeId, Sequence[float]],
        ue_heading: Mapping[int, float] | None = None,
    ) -> "WorldState":
        """Build a state from an arbitrary-order node map; storage is canonical index order."""
        arrays = {}
        for kind in NodeKind:
            idx = sorted(n.index for n in positions if n.kind == kind)
            if idx != list(range(len(idx))):
                raise ValueError(f"{kind.value} indices must be 0..n-1, got {idx}")
            arrays[kind] = np.array(
                [positions[NodeId(kind, i)] for i in idx], dtype=float
            ).reshape(len(idx), 3)
        m = len(arrays[NodeKind.UE])
        heading = np.zeros(m)
        if ue_heading is not None:
            for i, h in ue_heading.items():
                heading[i] = h
        return cls(t, arrays[NodeKind.UAV], arrays[NodeKind.UE], arrays[NodeKind.BS], heading)

    def copy(self) -> "WorldState":
        return WorldState(self.t, self.uav.copy(), self.ue.copy(), self.bs.copy(), self.ue_heading.copy())


def distance(a, b) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(math.sqrt(float(np.dot(d, d))))


_CORNERS = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))


def _sample_ues(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    L = cfg.side_length
    if cfg.ue_init is None:
        xy = rng.uniform(0.0, L, size=(cfg.n_ue, 2))
    else:
        gm = cfg.ue_init
        w = np.asarray(gm.weights, dtype=float)
        comp = rng.choice(len(w), size=cfg.n_ue, p=w / w.sum())
        centers = np.asarray(gm.centers, dtype=float)[comp]
        sig = np.asarray(gm.sigmas, dtype=float)[comp]
        xy = centers + rng.standard_normal((cfg.n_ue, 2)) * sig[:, None]
        xy = np.clip(xy, 0.0, L)
    return np.column_stack([xy, np.zeros(cfg.n_ue)])


def _place_bs(cfg: ScenarioConfig, ue_xy: np.ndarray) -> np.ndarray:
    L = cfg.side_length
    corners = np.array(_CORNERS) * L
    centroid = ue_xy.mean(axis=0)
    d = np.linalg.norm(corners - centroid, axis=1)
    nearest = int(np.argmin(d))
    if cfg.n_bs == 3:
        xy = np.array([c for i, c in enumerate(corners) if i != nearest])
    else:
        # equal arc spacing along the perimeter, starting from the corner farthest from the UEs
        start = int(np.argmax(d)) * L
        perim = 4.0 * L
        xy = np.array([_perimeter_point((start + k * perim / cfg.n_bs) % perim, L) for k in range(cfg.n_bs)])
    return np.column_stack([xy, np.full(len(xy), cfg.bs_height)])


def _perimeter_point(s: float, L: float) -> tuple[float, float]:
    # counter-clockwise from (0,0): bottom, right, top, left edges
    edge, off = divmod(s, L)
    edge = int(edge) % 4
    if edge == 0:
        return (off, 0.0)
    if edge == 1:
        return (L, off)
    if edge == 2:
        return (L - off, L)
    return (0.0, L - off)


def _place_uavs(cfg: ScenarioConfig, bs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    L = cfg.side_length
    center = np.array([L / 2, L / 2])
    out = np.empty((cfg.n_uav, 3))
    per_bs = [list(range(cfg.n_uav))[g :: cfg.n_bs] for g in range(cfg.n_bs)]
    for g, members in enumerate(per_bs):
        start = bs[g, :2]
        seg = center - start
        seg_len = float(np.linalg.norm(seg))
        for k, u in enumerate(members):
            frac = (k + 0.5) / len(members)
            jitter = rng.uniform(-0.05, 0.05, size=2) * seg_len
            out[u, :2] = np.clip(start + frac * seg + jitter, 0.0, L)
    out[:, 2] = cfg.uav_altitude
    return out


def init_world(cfg: ScenarioConfig, rng: np.random.Generator | None = None) -> WorldState:
    """Sample an initial state. Deterministic in ``cfg.rng_seed`` unless an rng is given."""
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    ue = _sample_ues(cfg, rng)
    bs = _place_bs(cfg, ue[:, :2])
    uav = _place_uavs(cfg, bs, rng)
    heading = rng.uniform(-math.pi, math.pi, size=cfg.n_ue)
    return WorldState(0, uav, ue, bs, heading)


def step_ues(state: WorldState, cfg: ScenarioConfig, rng: np.random.Generator) -> WorldState:
    """Constant-speed Brownian heading walk with reflection at the boundary."""
    L = cfg.side_length
    heading = state.ue_heading + rng.normal(0.0, cfg.heading_noise, size=state.n_ue)
    vx = np.cos(heading) * cfg.ue_speed
    vy = np.sin(heading) * cfg.ue_speed
    x = state.ue[:, 0] + vx
    y = state.ue[:, 1] + vy
    # at most one fold is needed while ue_speed < side_length
    out_x = (x < 0) | (x > L)
    out_y = (y < 0) | (y > L)
    x = np.where(x < 0, -x, np.where(x > L, 2 * L - x, x))
    y = np.where(y < 0, -y, np.where(y > L, 2 * L - y, y))
    vx = np.where(out_x, -vx, vx)
    vy = np.where(out_y, -vy, vy)
    heading = np.where(out_x | out_y, np.arctan2(vy, vx), heading)
    ue = np.column_stack([x, y, np.zeros(state.n_ue)])
    return WorldState(state.t, state.uav, ue, state.bs, heading)


def apply_actions(state: WorldState, actions: Sequence[int], cfg: ScenarioConfig) -> WorldState:
    acts = np.asarray(actions, dtype=int)
    if acts.shape != (state.n_uav,):
        raise ValueError(f"expected {state.n_uav} actions, got shape {acts.shape}")
    if acts.min(initial=0) < 0 or acts.max(initial=0) >= N_ACTIONS:
        raise ValueError(f"action codes must be in [0, {N_ACTIONS - 1}]")
    uav = state.uav.copy()
    uav[:, :2] = np.clip(uav[:, :2] + ACTION_VECTORS[acts] * cfg.uav_step, 0.0, cfg.side_length)
    return WorldState(state.t + 1, uav, state.ue, state.bs, state.ue_heading)
