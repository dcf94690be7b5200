"""Fused mixed-precision Group-GEMM planning: resource unification, tile scheduling, simulation."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from .cost import (
    WARP_COUNTS,
    GemmShape,
    HardwareProfile,
    TileConfig,
    TileCostTable,
    block_serial_time,
    per_tile_cost,
    smem_usage,
    tile_candidates,
    tile_cost,
    tile_count,
)
from .errors import ConfigError
from .quant import QuantScheme

SLICE_FACTORS = (4, 2)
DP_MAX_TASKS = 12
DP_MAX_SMS = 4


@dataclass(frozen=True)
class MicroKernelSpec:
    scheme: QuantScheme
    tile: TileConfig
    smem_bytes: int
    warps: int
    # GEMMs this micro-kernel serves; used to rank re-tiling choices
    shapes: tuple[GemmShape, ...] = ()

    @classmethod
    def of(cls, tile: TileConfig, shapes: Sequence[GemmShape] = ()) -> "MicroKernelSpec":
        return cls(tile.scheme, tile, smem_usage(tile), tile.warps, tuple(shapes))


@dataclass
class FusedKernelConfig:
    members: list[MicroKernelSpec]
    unified_warps: int
    unified_smem: int
    # original (scheme, tile) key -> member after re-tiling and slice-K
    mapping: dict = field(default_factory=dict)

    def lookup(self, tile: TileConfig) -> TileConfig:
        return self.mapping.get(tile.key(), tile)


@dataclass(frozen=True)
class TileTask:
    owner: tuple[int, int]
    scheme: QuantScheme
    cost: float
    tile_id: int = 0


@dataclass
class Schedule:
    sm: list[list[TileTask]]
    makespan: float

    @property
    def loads(self) -> list[float]:
        return [_sequential_sum(tasks) for tasks in self.sm]


def _sequential_sum(tasks: Sequence[TileTask]) -> float:
    total = 0.0
    for t in tasks:
        total += t.cost
    return total


# ---------------------------------------------------------------------------
# resource configuration
# ---------------------------------------------------------------------------


def _member_time(tile: TileConfig, shapes: Sequence[GemmShape], costs: TileCostTable) -> float:
    if shapes:
        return sum(block_serial_time(s, tile, costs) for s in shapes)
    # no workload attached: rank by cost per unit of tile work
    return tile_cost(tile, costs.hw) / (tile.tile_m * tile.tile_n * tile.tile_k)


def _retile(member: MicroKernelSpec, warps: int, costs: TileCostTable) -> tuple[TileConfig, float] | None:
    if member.warps == warps:
        return member.tile, _member_time(member.tile, member.shapes, costs)
    best = None
    for cfg in tile_candidates(member.scheme, costs.hw, costs.unified):
        if cfg.warps != warps:
            continue
        t = _member_time(cfg, member.shapes, costs)
        if best is None or t < best[1]:
            best = (cfg, t)
    return best


def unify_resources(chosen: Sequence[MicroKernelSpec | tuple], hw: HardwareProfile,
                    costs: TileCostTable | None = None) -> FusedKernelConfig:
    """Give every micro-kernel the same warp count and size shared memory to the largest.

    Each warp count in turn is tried with all members re-tiled to it; the count
    with the lowest total estimated time wins. Counts where some member has no
    feasible tile are skipped.
    """
    if not chosen:
        raise ConfigError("cannot fuse an empty set of micro-kernels")
    costs = costs or TileCostTable(hw)
    members = [c if isinstance(c, MicroKernelSpec) else MicroKernelSpec.of(c[1]) for c in chosen]
    if len(members) == 1:
        m = members[0]
        return FusedKernelConfig([m], m.warps, m.smem_bytes, {m.tile.key(): m.tile})

    best = None
    for warps in WARP_COUNTS:
        picks = [_retile(m, warps, costs) for m in members]
        if any(p is None for p in picks):
            continue
        total = sum(p[1] for p in picks)
        if best is None or total < best[0]:
            best = (total, warps, [p[0] for p in picks])
    if best is None:
        raise ConfigError("no warp count is feasible for every micro-kernel")
    _, warps, tiles = best
    new = [MicroKernelSpec.of(t, m.shapes) for t, m in zip(tiles, members)]
    smem = max(m.smem_bytes for m in new)
    if smem > hw.smem_per_sm:
        raise ConfigError("fused kernel exceeds shared memory")
    mapping = {m.tile.key(): n.tile for m, n in zip(members, new)}
    return FusedKernelConfig(new, warps, smem, mapping)


def slice_k_partition(member: MicroKernelSpec, fused: FusedKernelConfig) -> MicroKernelSpec:
    """Split the reduction dimension of an under-sized micro-kernel.

    Applies when the member uses under half of the fused shared memory; the
    largest factor in {4, 2} that still fits is used.
    """
    base = replace(member.tile, slice_k=1)
    base_smem = smem_usage(base)
    if base_smem * 2 > fused.unified_smem:
        return MicroKernelSpec.of(base, member.shapes)
    for s in SLICE_FACTORS:
        cand = replace(base, slice_k=s)
        if smem_usage(cand) <= fused.unified_smem:
            return MicroKernelSpec.of(cand, member.shapes)
    return MicroKernelSpec.of(base, member.shapes)


def fuse_plan(tiles: Sequence[Sequence[TileConfig]], shapes: Sequence[Sequence[GemmShape]],
              hw: HardwareProfile, costs: TileCostTable | None = None,
              slice_k: bool = True) -> FusedKernelConfig:
    """Unify the distinct (scheme, tile) micro-kernels of a plan, then apply slice-K."""
    costs = costs or TileCostTable(hw)
    served: dict = {}
    for trow, srow in zip(tiles, shapes):
        for t, s in zip(trow, srow):
            served.setdefault(t.key(), (t, []))[1].append(s)
    members = [MicroKernelSpec.of(t, ss) for t, ss in served.values()]
    fused = unify_resources(members, hw, costs)
    if not slice_k:
        return fused
    sliced = [slice_k_partition(m, fused) for m in fused.members]
    by_key = {m.tile.key(): s.tile for m, s in zip(fused.members, sliced)}
    mapping = {k: by_key[v.key()] for k, v in fused.mapping.items()}
    return FusedKernelConfig(sliced, fused.unified_warps, fused.unified_smem, mapping)


# ---------------------------------------------------------------------------
# tasks and scheduling
# ---------------------------------------------------------------------------


def build_tasks(tiles: Sequence[Sequence[TileConfig]], shapes: Sequence[Sequence[GemmShape]],
                costs: TileCostTable, fused: FusedKernelConfig | None = None) -> list[TileTask]:
    """One task per tile: ceil(m/tile_m) * ceil(n/tile_n) * slice_k per block."""
    tasks = []
    for i, (trow, srow) in enumerate(zip(tiles, shapes)):
        for j, (tile, shape) in enumerate(zip(trow, srow)):
            cfg = fused.lookup(tile) if fused is not None else tile
            n = tile_count(shape, cfg)
            if not n:
                continue
            c = per_tile_cost(shape, cfg, costs)
            tasks.extend(TileTask((i, j), cfg.scheme, c, t) for t in range(n))
    return tasks


def schedule_greedy(tasks: Sequence[TileTask], P: int) -> Schedule:
    """Longest-processing-time first onto the least-loaded SM (lower index on ties)."""
    if P < 1:
        raise ConfigError("need at least one SM")
    order = sorted(range(len(tasks)), key=lambda i: (-tasks[i].cost, i))
    heap = [(0.0, sm) for sm in range(P)]
    sm_tasks: list[list[TileTask]] = [[] for _ in range(P)]
    for i in order:
        load, sm = heapq.heappop(heap)
        sm_tasks[sm].append(tasks[i])
        heapq.heappush(heap, (load + tasks[i].cost, sm))
    sched = Schedule(sm_tasks, 0.0)
    sched.makespan = max(sched.loads)
    return sched


def schedule_optimal_dp(tasks: Sequence[TileTask], P: int, resolution: float = 1e-6) -> Schedule:
    """Exact minimum makespan by search over SM load vectors.

    Costs are discretized to integer multiples of ``resolution``. Load vectors
    are canonicalized (sorted) so symmetric states are visited once.
    """
    if P < 1:
        raise ConfigError("need at least one SM")
    if len(tasks) > DP_MAX_TASKS or P > DP_MAX_SMS:
        raise ConfigError(f"exact scheduling is limited to {DP_MAX_TASKS} tasks on {DP_MAX_SMS} SMs")
    if not tasks:
        return Schedule([[] for _ in range(P)], 0.0)
    order = sorted(range(len(tasks)), key=lambda i: (-tasks[i].cost, i))
    w = [max(1, round(tasks[i].cost / resolution)) for i in order]
    n = len(w)

    # incumbent from LPT on the integer costs
    loads = [0] * P
    assign = []
    for c in w:
        sm = min(range(P), key=lambda s: (loads[s], s))
        loads[sm] += c
        assign.append(sm)
    best = [max(loads), assign]
    lower = max(max(w), math.ceil(sum(w) / P))
    seen: set = set()
    cur = [0] * n

    def search(idx: int, loads: list[int]) -> None:
        if best[0] == lower:
            return
        if idx == n:
            span = max(loads)
            if span < best[0]:
                best[0], best[1] = span, list(cur)
            return
        key = (idx, tuple(sorted(loads)))
        if key in seen:
            return
        seen.add(key)
        tried = set()
        for sm in range(P):
            if loads[sm] in tried or loads[sm] + w[idx] >= best[0]:
                continue
            tried.add(loads[sm])
            loads[sm] += w[idx]
            cur[idx] = sm
            search(idx + 1, loads)
            loads[sm] -= w[idx]

    search(0, [0] * P)
    sm_tasks: list[list[TileTask]] = [[] for _ in range(P)]
    for pos, sm in enumerate(best[1]):
        sm_tasks[sm].append(tasks[order[pos]])
    sched = Schedule(sm_tasks, 0.0)
    sched.makespan = max(sched.loads)
    return sched


@dataclass
class SimulationResult:
    makespan: float
    finish: list[float]
    utilization: list[float]


def simulate_execution(schedule: Schedule, hw: HardwareProfile | None = None) -> SimulationResult:
    """Discrete-event replay of a schedule: each SM runs its queue back to back."""
    P = len(schedule.sm)
    finish = [0.0] * P
    events = []
    cursor = [0] * P
    for sm in range(P):
        if schedule.sm[sm]:
            heapq.heappush(events, (schedule.sm[sm][0].cost, sm))
    while events:
        t, sm = heapq.heappop(events)
        finish[sm] = t
        cursor[sm] += 1
        if cursor[sm] < len(schedule.sm[sm]):
            heapq.heappush(events, (t + schedule.sm[sm][cursor[sm]].cost, sm))
    makespan = max(finish) if finish else 0.0
    util = [f / makespan if makespan > 0 else 0.0 for f in finish]
    return SimulationResult(makespan, finish, util)


def schedule_to_dict(schedule: Schedule, sim: SimulationResult | None = None,
                     extra: dict | None = None) -> dict:
    out = {
        "sm": [{"tasks": [{"owner": list(t.owner), "scheme": t.scheme.name, "cost": t.cost,
                           "tile_id": t.tile_id} for t in tasks]} for tasks in schedule.sm],
        "makespan": schedule.makespan,
    }
    if sim is not None:
        out["simulated_makespan"] = sim.makespan
        out["utilization"] = sim.utilization
    if extra:
        out.update(extra)
    return out


def schedule_from_dict(data: dict) -> Schedule:
    from .schemas import validate

    validate(data, "schedule")
    sm = [[TileTask(tuple(t["owner"]), QuantScheme.parse(t["scheme"]), float(t["cost"]),
                    int(t.get("tile_id", 0))) for t in entry["tasks"]] for entry in data["sm"]]
    return Schedule(sm, float(data["makespan"]))
