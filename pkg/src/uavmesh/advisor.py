"""Deployment advice: a grid view of the world, plan backends, parsing and verification.

Two backends produce plans: a remote chat-completions endpoint and a
deterministic greedy heuristic. Every plan goes through the same rule-based
verifier; the last verified plan is cached and reused between refreshes.
"""
from __future__ import annotations

import math
import os
import re
import threading
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from string import Template

import httpx
import numpy as np

from .mesh import connectivity_report
from .radio import RadioParams, build_link_table, max_fspl_range
from .world import ConfigError, NodeKind, WorldState

_NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))

SYSTEM_PROMPT = (
    "You are an expert in wireless network planning for UAV mesh networks. "
    "Follow the requested reasoning steps and the output format exactly."
)


class BackendUnavailable(RuntimeError):
    pass


class PlanParseError(ValueError):
    pass


@dataclass(frozen=True)
class AdvisorConfig:
    backend: str = "heuristic"  # "heuristic" or "remote"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o"
    temperature: float = 0.0
    token_env: str = "UAVMESH_ADVISOR_TOKEN"
    timeout: float = 30.0
    retries: int = 1
    q_llm: int = 50
    omega: float = 1.0  # soft-target temperature
    max_isolated_frac: float = 0.2
    min_coverage: float = 0.5

    def __post_init__(self):
        if self.backend not in ("heuristic", "remote"):
            raise ConfigError("advisor.backend", f"unknown backend {self.backend!r}")
        if self.q_llm < 1:
            raise ConfigError("advisor.q_llm", "must be >= 1")
        if not self.omega > 0:
            raise ConfigError("advisor.omega", "must be > 0")
        if not 0 <= self.max_isolated_frac <= 1:
            raise ConfigError("advisor.max_isolated_frac", "must be in [0, 1]")
        if not 0 <= self.min_coverage <= 1:
            raise ConfigError("advisor.min_coverage", "must be in [0, 1]")
        if self.timeout <= 0:
            raise ConfigError("advisor.timeout", "must be > 0")
        if self.retries < 0:
            raise ConfigError("advisor.retries", "must be >= 0")


# ---------------------------------------------------------------- grid


@dataclass(frozen=True)
class GridSummary:
    cell_side: float
    dims: tuple[int, int]  # (rows, cols); row follows y, column follows x
    ue_counts: np.ndarray  # (rows, cols) int
    bs_cells: tuple[tuple[int, int], ...]
    side_length: float

    def center(self, r: int, c: int) -> tuple[float, float]:
        L = self.side_length
        return (min((c + 0.5) * self.cell_side, L), min((r + 0.5) * self.cell_side, L))

    def cell_of(self, xy) -> tuple[int, int]:
        x, y = float(xy[0]), float(xy[1])
        return (_bin(y, self.cell_side, self.dims[0]), _bin(x, self.cell_side, self.dims[1]))

    def snap(self, xy) -> tuple[float, float]:
        return self.center(*self.cell_of(xy))


def _bin(v, cell: float, n: int):
    # points on a cell boundary go to the lower-index cell
    k = np.ceil(np.asarray(v, dtype=float) / cell) - 1
    out = np.clip(k, 0, n - 1).astype(int)
    return int(out) if out.ndim == 0 else out


def grid_cell_side(params: RadioParams) -> float:
    """Largest UAV-UAV link range over sqrt(2), so diagonal neighbours stay linked.

    A relative 1e-9 margin keeps the diagonal link above threshold under rounding.
    """
    return max_fspl_range(NodeKind.UAV, NodeKind.UAV, params) / math.sqrt(2.0) * (1.0 - 1e-9)


def grid_summary(state: WorldState, params: RadioParams, side_length: float) -> GridSummary:
    cell = grid_cell_side(params)
    n = max(1, math.ceil(side_length / cell))
    rows = _bin(state.ue[:, 1], cell, n)
    cols = _bin(state.ue[:, 0], cell, n)
    counts = np.zeros((n, n), dtype=int)
    np.add.at(counts, (np.atleast_1d(rows), np.atleast_1d(cols)), 1)
    bs_cells = tuple(
        (_bin(float(p[1]), cell, n), _bin(float(p[0]), cell, n)) for p in state.bs
    )
    return GridSummary(cell, (n, n), counts, bs_cells, float(side_length))


# ---------------------------------------------------------------- plans


@dataclass
class AdvisorPlan:
    positions: np.ndarray  # (n_uav, 3)
    backend_id: str
    issued_at_step: int
    verified: bool = False
    padded: bool = False


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    failed: str | None  # "bounds", "isolation" or "coverage"
    reachable_frac: float
    coverage: float


def _cell_path(summary: GridSummary, start: tuple[int, int], anchors: set) -> list[tuple[int, int]]:
    """Cells from ``start`` up to (excluding) the nearest anchor, 8-neighbour BFS.

    Returned nearest-to-anchor first. An empty path means ``start`` is an anchor.
    """
    if start in anchors:
        return []
    rows, cols = summary.dims
    prev = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for dr, dc in _NEIGHBOURS:
            nxt = (cur[0] + dr, cur[1] + dc)
            if not (0 <= nxt[0] < rows and 0 <= nxt[1] < cols) or nxt in prev:
                continue
            if nxt in anchors:
                path = [cur]
                while prev[path[-1]] is not None:
                    path.append(prev[path[-1]])
                return path
            prev[nxt] = cur
            queue.append(nxt)
    return [start]  # unreachable anchors (no BS): the target alone


def heuristic_plan(summary: GridSummary, n_uav: int, altitude: float, step: int = 0) -> AdvisorPlan:
    """Greedy plan: densest cells first, each attached by the shortest relay chain.

    A target cell is attached through the shortest 8-neighbour path to a BS
    cell or an already chosen cell; the whole chain is committed only if it
    fits the UAV budget. Spare UAVs go to the densest frontier cells.
    """
    rows, cols = summary.dims
    counts = summary.ue_counts
    bs = set(summary.bs_cells)
    chosen: list[tuple[int, int]] = []
    taken: set = set()
    ranked = sorted(
        ((r, c) for r in range(rows) for c in range(cols) if counts[r, c] > 0),
        key=lambda rc: (-counts[rc], rc),
    )
    for cell in ranked:
        if len(chosen) >= n_uav:
            break
        if cell in taken:
            continue
        anchors = bs | taken
        if cell in bs:
            chain = [cell]
        else:
            chain = _cell_path(summary, cell, anchors)
        if len(chosen) + len(chain) <= n_uav:
            for c in chain:
                chosen.append(c)
                taken.add(c)
    while len(chosen) < n_uav:
        linked = bs | taken
        frontier = sorted(
            {
                (r + dr, c + dc)
                for r, c in linked
                for dr, dc in _NEIGHBOURS + ((0, 0),)
                if 0 <= r + dr < rows and 0 <= c + dc < cols and (r + dr, c + dc) not in taken
            },
            key=lambda rc: (-counts[rc], rc),
        )
        if frontier:
            cell = frontier[0]
            taken.add(cell)
        else:
            # every cell used: double up on the densest chosen cells
            cell = sorted(chosen, key=lambda rc: (-counts[rc], rc))[(len(chosen) - len(taken)) % len(taken)]
        chosen.append(cell)
    pos = np.array([[*summary.center(*c), altitude] for c in chosen], dtype=float).reshape(len(chosen), 3)
    return AdvisorPlan(pos, "heuristic", step)


def verify_plan(plan: AdvisorPlan, summary: GridSummary, state: WorldState, params: RadioParams, cfg: AdvisorConfig) -> Verdict:
    """Rule-based check of a plan against the current UEs and BSs."""
    pos = np.asarray(plan.positions, dtype=float)
    n = len(pos)
    if n != state.n_uav:
        raise ValueError(f"plan has {n} positions for {state.n_uav} UAVs")
    L = summary.side_length
    xy = pos[:, :2]
    in_bounds = bool(np.all((xy >= 0) & (xy <= L)))
    snapped = all(np.allclose(summary.snap(p), p, rtol=0, atol=1e-6) for p in xy)
    if not (in_bounds and snapped):
        return Verdict(False, "bounds", 0.0, 0.0)
    planned = WorldState(state.t, pos, state.ue, state.bs, state.ue_heading)
    report = connectivity_report(build_link_table(planned, params), params)
    reachable = report.uav_connected
    frac = float(reachable.mean()) if n else 1.0
    if state.n_ue and reachable.any():
        d = np.hypot(state.ue[:, None, 0] - xy[None, reachable, 0], state.ue[:, None, 1] - xy[None, reachable, 1])
        coverage = float(np.mean(d.min(axis=1) <= summary.cell_side))
    else:
        coverage = 0.0 if state.n_ue else 1.0
    if frac < 1.0 - cfg.max_isolated_frac - 1e-12:
        return Verdict(False, "isolation", frac, coverage)
    if coverage < cfg.min_coverage - 1e-12:
        return Verdict(False, "coverage", frac, coverage)
    return Verdict(True, None, frac, coverage)


# ---------------------------------------------------------------- prompt and parsing


def render_grid(counts: np.ndarray) -> str:
    rows, cols = counts.shape
    width = max(3, len(str(int(counts.max(initial=0)))) + 1, len(f"c{cols - 1}") + 1)
    head = " " * 4 + "".join(f"c{c}".rjust(width) for c in range(cols))
    lines = [head]
    for r in range(rows):
        lines.append(f"r{r}".ljust(4) + "".join(str(int(v)).rjust(width) for v in counts[r]))
    return "\n".join(lines)


def _template() -> Template:
    text = resources.files("uavmesh").joinpath("data/prompt_template.txt").read_text(encoding="utf-8")
    return Template(text)


def build_prompt(summary: GridSummary, n_uav: int, altitude: float) -> str:
    rows, cols = summary.dims
    return _template().substitute(
        n_uav=n_uav,
        side_m=f"{summary.side_length:.1f}",
        rows=rows,
        cols=cols,
        cell_m=f"{summary.cell_side:.1f}",
        altitude_m=f"{altitude:.1f}",
        bs_cells=", ".join(f"({r}, {c})" for r, c in summary.bs_cells),
        grid=render_grid(summary.ue_counts),
    )


_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_TUPLE = rf"\(\s*{_NUM}\s*,\s*{_NUM}\s*(?:,\s*{_NUM}\s*)?\)"
_LIST_RE = re.compile(rf"\[\s*{_TUPLE}(?:\s*,\s*{_TUPLE})*\s*,?\s*\]")
_TUPLE_RE = re.compile(rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*(?:,\s*({_NUM})\s*)?\)")


def parse_plan(raw: str, summary: GridSummary, n_uav: int, altitude: float, step: int = 0, backend_id: str = "remote") -> AdvisorPlan:
    """Extract the first bracketed tuple list, snap to cell centres, fix the count.

    Missing positions are filled from the heuristic plan (``padded`` is set).
    """
    m = _LIST_RE.search(raw)
    if m is None:
        raise PlanParseError("no bracketed coordinate list in reply")
    pts = [(float(t.group(1)), float(t.group(2))) for t in _TUPLE_RE.finditer(m.group(0))]
    if not all(math.isfinite(v) for p in pts for v in p):
        raise PlanParseError("non-finite coordinate in reply")
    snapped = [summary.snap(p) for p in pts[:n_uav]]
    padded = False
    if len(snapped) < n_uav:
        padded = True
        used = set(snapped)
        fill = [tuple(p[:2]) for p in heuristic_plan(summary, n_uav, altitude, step).positions]
        fresh = [p for p in fill if p not in used]
        snapped += (fresh + fill)[: n_uav - len(snapped)]
    if len(snapped) != n_uav:
        raise PlanParseError(f"got {len(snapped)} positions after repair, need {n_uav}")
    pos = np.array([[x, y, altitude] for x, y in snapped], dtype=float).reshape(n_uav, 3)
    return AdvisorPlan(pos, backend_id, step, padded=padded)


# ---------------------------------------------------------------- remote backend


class RemoteBackend:
    """Chat-completions client. ``transport`` lets tests replay recorded replies."""

    def __init__(self, cfg: AdvisorConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        self._client = httpx.Client(timeout=cfg.timeout, transport=transport)

    def request_body(self, prompt: str) -> dict:
        return {
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": prompt},
            ],
            "temperature": self.cfg.temperature,
        }

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.cfg.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = self.request_body(prompt)
        last: Exception | None = None
        for _ in range(1 + self.cfg.retries):
            try:
                resp = self._client.post(self.cfg.endpoint, json=body, headers=headers)
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = BackendUnavailable(f"HTTP {resp.status_code}")
                    continue
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except httpx.HTTPStatusError as exc:
                raise BackendUnavailable(f"HTTP {exc.response.status_code}") from exc
            except httpx.HTTPError as exc:
                last = exc
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise BackendUnavailable(f"malformed response: {exc}") from exc
        raise BackendUnavailable(str(last)) from last

    def close(self) -> None:
        self._client.close()


# ---------------------------------------------------------------- cache and orchestration


class PlanCache:
    """Single-writer, multi-reader cell holding the last verified plan."""

    def __init__(self):
        self._lock = threading.Lock()
        self._plan: AdvisorPlan | None = None

    def get(self) -> AdvisorPlan | None:
        with self._lock:
            return self._plan

    def put(self, plan: AdvisorPlan) -> None:
        with self._lock:
            self._plan = plan


@dataclass
class AdvisorStats:
    requests: int = 0
    rejections: int = 0
    cache_hits: int = 0
    failures: int = 0


@dataclass
class Advisor:
    cfg: AdvisorConfig
    params: RadioParams
    side_length: float
    altitude: float
    deterministic: bool = True
    backend: RemoteBackend | None = None
    cache: PlanCache = field(default_factory=PlanCache)
    stats: AdvisorStats = field(default_factory=AdvisorStats)

    def __post_init__(self):
        if self.cfg.backend == "remote" and self.backend is None:
            self.backend = RemoteBackend(self.cfg)
        self._pool: ThreadPoolExecutor | None = None
        self._pending: Future | None = None

    def _produce(self, state: WorldState) -> AdvisorPlan:
        """One refresh: backend, then verification, then the fallback ladder."""
        summary = grid_summary(state, self.params, self.side_length)
        n = state.n_uav
        plan = None
        if self.cfg.backend == "remote":
            try:
                raw = self.backend.complete(build_prompt(summary, n, self.altitude))
                plan = parse_plan(raw, summary, n, self.altitude, state.t)
            except (BackendUnavailable, PlanParseError):
                self.stats.failures += 1
        else:
            plan = heuristic_plan(summary, n, self.altitude, state.t)
        if plan is not None:
            verdict = verify_plan(plan, summary, state, self.params, self.cfg)
            if verdict.accepted:
                plan.verified = True
                return plan
            self.stats.rejections += 1
        cached = self.cache.get()
        if cached is not None:
            self.stats.cache_hits += 1
            return cached
        fallback = heuristic_plan(summary, n, self.altitude, state.t)
        fallback.verified = verify_plan(fallback, summary, state, self.params, self.cfg).accepted
        return fallback

    def refresh(self, state: WorldState) -> AdvisorPlan:
        """Request a new plan; returns the plan to use right now.

        Deterministic mode (or no plan cached yet) runs synchronously. Otherwise
        the request runs in a worker thread and the cached plan is returned.
        """
        self.stats.requests += 1
        if self.deterministic or self.cache.get() is None:
            plan = self._produce(state)
            self._publish(plan)
            return plan
        self.poll()
        if self._pending is None:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=1)
            self._pending = self._pool.submit(self._produce, state.copy())
        self.stats.cache_hits += 1
        return self.cache.get()

    def poll(self) -> AdvisorPlan | None:
        if self._pending is not None and self._pending.done():
            plan = self._pending.result()
            self._pending = None
            self._publish(plan)
        return self.cache.get()

    def _publish(self, plan: AdvisorPlan) -> None:
        if plan.verified or self.cache.get() is None:
            self.cache.put(plan)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
        if self.backend is not None:
            self.backend.close()
