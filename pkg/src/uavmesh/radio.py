"""Link budgets: path loss per link class, SNR, noise and Shannon rate.

Everything here is a pure function of positions and :class:`RadioParams`.
The array functions are the workhorses; the scalar ones wrap them for
single pairs.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .world import NodeId, NodeKind, WorldState

SPEED_OF_LIGHT = 3.0e8
THERMAL_NOISE_DBM_HZ = -174.0
MIN_DISTANCE = 1.0  # floor inside path-loss calls, avoids log(0) for coincident nodes


class LinkClass(enum.Enum):
    BsUav = "bs_uav"
    UavUav = "uav_uav"
    UavUe = "uav_ue"


def link_class(a: NodeKind, b: NodeKind) -> LinkClass:
    pair = {a, b}
    if pair == {NodeKind.BS, NodeKind.UAV}:
        return LinkClass.BsUav
    if pair == {NodeKind.UAV}:
        return LinkClass.UavUav
    if pair == {NodeKind.UAV, NodeKind.UE}:
        return LinkClass.UavUe
    raise ValueError(f"no link class between {a.value} and {b.value}")


def _default_ptx():
    return {NodeKind.UAV: 1.0, NodeKind.BS: 10.0, NodeKind.UE: 0.4}


def _default_gain():
    return {NodeKind.UAV: 0.0, NodeKind.BS: 5.0, NodeKind.UE: 0.0}


def _default_bw():
    return {LinkClass.BsUav: 7e6, LinkClass.UavUav: 5e6, LinkClass.UavUe: 1e6}


@dataclass(frozen=True)
class RadioParams:
    f_c: float = 2.4e9
    eta_los: float = 1.0
    eta_nlos: float = 20.0
    a: float = 9.61
    b: float = 0.16
    p_tx: dict = field(default_factory=_default_ptx)  # NodeKind -> W
    gain: dict = field(default_factory=_default_gain)  # NodeKind -> dBi, used for tx and rx
    bandwidth: dict = field(default_factory=_default_bw)  # LinkClass -> Hz
    noise_figure: float = 15.0
    snr_threshold: float = 25.0

    def __post_init__(self):
        from .world import ConfigError

        if not self.f_c > 0:
            raise ConfigError("radio.f_c", "must be > 0")
        if any(not b > 0 for b in self.bandwidth.values()) or set(self.bandwidth) != set(LinkClass):
            raise ConfigError("radio.bandwidth", "one positive bandwidth per link class required")
        if self.eta_nlos < self.eta_los:
            raise ConfigError("radio.eta_nlos", "must be >= eta_los")
        if set(self.p_tx) != set(NodeKind) or any(not p > 0 for p in self.p_tx.values()):
            raise ConfigError("radio.p_tx", "one positive power per node kind required")
        if set(self.gain) != set(NodeKind):
            raise ConfigError("radio.gain", "one gain per node kind required")

    def ptx_dbm(self, kind: NodeKind) -> float:
        return 10.0 * math.log10(self.p_tx[kind] * 1000.0)

    @property
    def fspl_const(self) -> float:
        return 20.0 * math.log10(4.0 * math.pi * self.f_c / SPEED_OF_LIGHT)


def fspl_db(d, params: RadioParams):
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be > 0")
    out = params.fspl_const + 20.0 * np.log10(d) + params.eta_los
    return float(out) if out.ndim == 0 else out


def los_probability_from(z, d, params: RadioParams):
    """LoS probability given UAV height ``z`` and 3-D distance ``d`` (arrays ok)."""
    z = np.asarray(z, dtype=float)
    d = np.asarray(d, dtype=float)
    theta = np.degrees(np.arcsin(z / d))
    return 1.0 / (1.0 + params.a * np.exp(-params.b * (theta - params.a)))


def los_probability(uav, ue, params: RadioParams) -> float:
    uav = np.asarray(uav, dtype=float)
    ue = np.asarray(ue, dtype=float)
    d = float(np.linalg.norm(uav - ue))
    z = uav[2] - ue[2]
    if not d > 0 or not z > 0:
        raise ValueError("need d > 0 and a UAV above the UE")
    if z > d:
        raise ValueError("height exceeds distance")
    return float(los_probability_from(z, d, params))


def uav_ue_path_loss(z, d, params: RadioParams):
    """Expected path loss over the LoS/NLoS mixture."""
    d = np.maximum(np.asarray(d, dtype=float), MIN_DISTANCE)
    z = np.minimum(np.asarray(z, dtype=float), d)
    p_los = los_probability_from(z, d, params)
    base = params.fspl_const + 20.0 * np.log10(d)
    return p_los * (base + params.eta_los) + (1.0 - p_los) * (base + params.eta_nlos)


def path_loss(i: tuple[NodeId, object], j: tuple[NodeId, object], params: RadioParams) -> float:
    (ni, pi), (nj, pj) = i, j
    cls = link_class(ni.kind, nj.kind)
    pi = np.asarray(pi, dtype=float)
    pj = np.asarray(pj, dtype=float)
    d = max(float(np.linalg.norm(pi - pj)), MIN_DISTANCE)
    if cls is LinkClass.UavUe:
        uav, ue = (pi, pj) if ni.kind is NodeKind.UAV else (pj, pi)
        return float(uav_ue_path_loss(uav[2] - ue[2], d, params))
    return fspl_db(d, params)


def noise_dbm(cls: LinkClass, params: RadioParams) -> float:
    return THERMAL_NOISE_DBM_HZ + 10.0 * math.log10(params.bandwidth[cls]) + params.noise_figure


def snr_from_pl(pl, tx: NodeKind, rx: NodeKind, params: RadioParams):
    cls = link_class(tx, rx)
    return params.ptx_dbm(tx) + params.gain[tx] + params.gain[rx] - pl - noise_dbm(cls, params)


def shannon_rate(snr_db, bandwidth: float):
    return bandwidth * np.log2(1.0 + np.power(10.0, np.asarray(snr_db, dtype=float) / 10.0))


def snr_db(i: NodeId, j: NodeId, params: RadioParams, state: WorldState) -> float:
    """SNR of the link transmitted by ``i`` and received by ``j``."""
    pl = path_loss((i, state.position(i)), (j, state.position(j)), params)
    return float(snr_from_pl(pl, i.kind, j.kind, params))


def rate_bps(i: NodeId, j: NodeId, params: RadioParams, state: WorldState) -> float:
    cls = link_class(i.kind, j.kind)
    return float(shannon_rate(snr_db(i, j, params, state), params.bandwidth[cls]))


def max_fspl_range(tx: NodeKind, rx: NodeKind, params: RadioParams) -> float:
    """Largest distance at which an FSPL link still meets the SNR threshold."""
    cls = link_class(tx, rx)
    if cls is LinkClass.UavUe:
        raise ValueError("UAV-UE links are not pure FSPL")
    budget = params.ptx_dbm(tx) + params.gain[tx] + params.gain[rx] - noise_dbm(cls, params) - params.snr_threshold
    return 10.0 ** ((budget - params.fspl_const - params.eta_los) / 20.0)


@dataclass
class LinkTable:
    """Per-pair path loss / SNR / rate for one time step.

    ``bs_uav[g, u]`` is the BS->UAV link, ``uav_uav[u, v]`` is symmetric with a
    NaN diagonal, ``uav_ue[u, m]`` is the UAV->UE link.
    """

    pl_bs_uav: np.ndarray
    snr_bs_uav: np.ndarray
    rate_bs_uav: np.ndarray
    pl_uav_uav: np.ndarray
    snr_uav_uav: np.ndarray
    rate_uav_uav: np.ndarray
    pl_uav_ue: np.ndarray
    snr_uav_ue: np.ndarray
    rate_uav_ue: np.ndarray

    @property
    def n_uav(self) -> int:
        return self.snr_uav_uav.shape[0]

    @property
    def n_bs(self) -> int:
        return self.snr_bs_uav.shape[0]

    @property
    def n_ue(self) -> int:
        return self.snr_uav_ue.shape[1]

    def entries(self):
        """Yield ``((i, j), (path_loss, snr, rate))`` once per relevant pair."""
        U = self.n_uav
        for g in range(self.n_bs):
            for u in range(U):
                yield (NodeId(NodeKind.BS, g), NodeId(NodeKind.UAV, u)), (
                    self.pl_bs_uav[g, u], self.snr_bs_uav[g, u], self.rate_bs_uav[g, u])
        for u in range(U):
            for v in range(u + 1, U):
                yield (NodeId(NodeKind.UAV, u), NodeId(NodeKind.UAV, v)), (
                    self.pl_uav_uav[u, v], self.snr_uav_uav[u, v], self.rate_uav_uav[u, v])
        for u in range(U):
            for m in range(self.n_ue):
                yield (NodeId(NodeKind.UAV, u), NodeId(NodeKind.UE, m)), (
                    self.pl_uav_ue[u, m], self.snr_uav_ue[u, m], self.rate_uav_ue[u, m])


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def build_link_table(state: WorldState, params: RadioParams) -> LinkTable:
    K = params.fspl_const

    d_bu = np.maximum(_pairwise(state.bs, state.uav), MIN_DISTANCE)
    pl_bu = K + 20.0 * np.log10(d_bu) + params.eta_los
    snr_bu = snr_from_pl(pl_bu, NodeKind.BS, NodeKind.UAV, params)
    rate_bu = shannon_rate(snr_bu, params.bandwidth[LinkClass.BsUav])

    d_uu = np.maximum(_pairwise(state.uav, state.uav), MIN_DISTANCE)
    pl_uu = K + 20.0 * np.log10(d_uu) + params.eta_los
    np.fill_diagonal(pl_uu, np.nan)
    snr_uu = snr_from_pl(pl_uu, NodeKind.UAV, NodeKind.UAV, params)
    rate_uu = shannon_rate(snr_uu, params.bandwidth[LinkClass.UavUav])

    d_um = _pairwise(state.uav, state.ue)
    z = state.uav[:, 2:3] - state.ue[None, :, 2]
    pl_um = uav_ue_path_loss(z, d_um, params)
    snr_um = snr_from_pl(pl_um, NodeKind.UAV, NodeKind.UE, params)
    rate_um = shannon_rate(snr_um, params.bandwidth[LinkClass.UavUe])

    return LinkTable(pl_bu, snr_bu, rate_bu, pl_uu, snr_uu, rate_uu, pl_um, snr_um, rate_um)
