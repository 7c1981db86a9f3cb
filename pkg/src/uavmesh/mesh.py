"""Multi-hop connectivity on the SNR-thresholded link graph.

A UAV is connected when it can reach a BS through links at or above the
SNR threshold; that fixed point is computed by breadth-first search from
the BS set, which also yields min-hop backhaul paths.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .radio import LinkTable, RadioParams, build_link_table
from .world import NodeId, NodeKind, WorldState


@dataclass
class ConnectivityReport:
    uav_connected: np.ndarray  # (U,) bool
    hops: np.ndarray  # (U,) int, -1 when disconnected
    backhaul_path: list  # per UAV: tuple of NodeId ending at a BS, or None
    ue_connected: np.ndarray  # (M,) bool
    serving_uav: np.ndarray  # (M,) int, -1 when disconnected
    ue_rate: np.ndarray  # (M,) bits/s
    relay_set: list  # per UAV: frozenset of UAV indices relayed through it

    def served_by(self, u: int) -> np.ndarray:
        return np.flatnonzero(self.serving_uav == u)


def _adjacency(links: LinkTable, params: RadioParams) -> tuple[np.ndarray, np.ndarray]:
    th = params.snr_threshold
    uu = np.nan_to_num(links.snr_uav_uav, nan=-np.inf) >= th
    bu = links.snr_bs_uav >= th
    return uu, bu


def _bfs_hops(uu: np.ndarray, bu: np.ndarray) -> np.ndarray:
    U = uu.shape[0]
    hops = np.full(U, -1, dtype=int)
    queue = deque()
    for u in range(U):
        if bu[:, u].any():
            hops[u] = 1
            queue.append(u)
    while queue:
        u = queue.popleft()
        for v in np.flatnonzero(uu[u]):
            if hops[v] < 0:
                hops[v] = hops[u] + 1
                queue.append(v)
    return hops


def uav_connectivity(links: LinkTable, params: RadioParams) -> np.ndarray:
    uu, bu = _adjacency(links, params)
    return _bfs_hops(uu, bu) > 0


def backhaul_paths(links: LinkTable, params: RadioParams) -> list:
    """Min-hop path per UAV; ties go to the lowest next-hop UAV, then the lowest BS."""
    uu, bu = _adjacency(links, params)
    return _paths(uu, bu, _bfs_hops(uu, bu))


def _paths(uu: np.ndarray, bu: np.ndarray, hops: np.ndarray) -> list:
    paths: list = [None] * len(hops)
    for u in np.argsort(hops, kind="stable"):
        h = hops[u]
        if h < 0:
            continue
        me = NodeId(NodeKind.UAV, int(u))
        if h == 1:
            g = int(np.flatnonzero(bu[:, u])[0])
            paths[u] = (me, NodeId(NodeKind.BS, g))
        else:
            nxt = next(int(v) for v in np.flatnonzero(uu[u]) if hops[v] == h - 1)
            paths[u] = (me,) + paths[nxt]
    return paths


def associate_ues(links: LinkTable, uav_connected: np.ndarray, params: RadioParams):
    """Each UE attaches to the max-rate connected UAV above threshold (lowest index on ties)."""
    ok = (links.snr_uav_ue >= params.snr_threshold) & np.asarray(uav_connected, dtype=bool)[:, None]
    masked = np.where(ok, links.rate_uav_ue, -np.inf)
    if masked.shape[0] == 0:
        m = links.snr_uav_ue.shape[1]
        return np.zeros(m, bool), np.full(m, -1), np.zeros(m)
    best = np.argmax(masked, axis=0)
    connected = ok.any(axis=0)
    serving = np.where(connected, best, -1)
    rate = np.where(connected, quantize_rate(masked[best, np.arange(masked.shape[1])]), 0.0)
    return connected, serving, rate


RATE_QUANTUM = 2.0**-20  # bits/s


def quantize_rate(rate):
    """Snap served rates to a fixed-point grid so per-UAV and per-UE totals agree
    exactly whatever the summation order (exact while totals stay below 2**33 bit/s)."""
    return np.round(np.asarray(rate, dtype=float) / RATE_QUANTUM) * RATE_QUANTUM


def relay_sets(paths: list) -> list:
    sets: list[set] = [set() for _ in paths]
    for v, path in enumerate(paths):
        if not path:
            continue
        for node in path[1:]:
            if node.kind is NodeKind.UAV:
                sets[node.index].add(v)
    return [frozenset(s) for s in sets]


def connectivity_report(links: LinkTable, params: RadioParams) -> ConnectivityReport:
    uu, bu = _adjacency(links, params)
    hops = _bfs_hops(uu, bu)
    paths = _paths(uu, bu, hops)
    connected = hops > 0
    ue_conn, serving, rate = associate_ues(links, connected, params)
    return ConnectivityReport(connected, hops, paths, ue_conn, serving, rate, relay_sets(paths))


def evaluate(state: WorldState, params: RadioParams) -> tuple[LinkTable, ConnectivityReport]:
    links = build_link_table(state, params)
    return links, connectivity_report(links, params)


def metrics(report: ConnectivityReport, n_ue: int, n_uav: int) -> tuple[float, float, float]:
    """(connected UE proportion, average UE rate in bits/s, available UAV ratio)."""
    return (
        float(np.sum(report.ue_connected)) / n_ue,
        float(np.sum(report.ue_rate)) / n_ue,
        float(np.sum(report.uav_connected)) / n_uav,
    )
