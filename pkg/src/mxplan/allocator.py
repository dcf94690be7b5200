"""Joint bit-width / tile allocation minimizing L^r * T^(1-r) under a memory budget."""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .cost import (
    GemmShape,
    HardwareProfile,
    TileConfig,
    TileCostTable,
    best_tile,
    block_serial_time,
    tile_candidates,
)
from .errors import ConfigError, DataError, InfeasibleError
from .moe import BLOCK_NAMES, NUM_LINEAR
from .quant import QuantScheme, storage_bits_per_weight
from .sensitivity import SensitivityTable

LAMBDA_GRID = np.logspace(-4.0, 4.0, 33)
BRUTE_FORCE_LIMIT = 10**6
DEFAULT_MAX_STATES = 20_000


def block_memory_bits(shape: GemmShape, scheme: QuantScheme) -> int:
    """Stored bits of one weight matrix, scales and zero-points included."""
    bits = storage_bits_per_weight(scheme, shape.k) * (shape.n * shape.k)
    return math.ceil(bits)


def memory_usage(scheme_of, shapes, schemes: Sequence[QuantScheme]) -> float:
    """Bytes used by an E x N assignment of scheme indices."""
    total = 0
    for i, row in enumerate(shapes):
        for j, shape in enumerate(row):
            total += block_memory_bits(shape, schemes[int(scheme_of[i][j])])
    return total / 8.0


def _budget_bits(budget: float) -> int:
    return math.floor(budget * 8.0 * (1.0 + 1e-12))


@dataclass
class AllocationProblem:
    sensitivity: SensitivityTable
    shapes: list[list[GemmShape]]
    costs: TileCostTable
    budget: float  # bytes
    r: float
    hw: HardwareProfile
    granularity: str = "linear"
    candidates: dict | None = None
    # expert -> scheme index; pinned experts (e.g. shared experts) are not optimized
    pinned: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ConfigError(f"r must lie in [0, 1], got {self.r}")
        if not self.budget > 0:
            raise ConfigError("memory budget must be positive")
        if self.granularity not in ("linear", "expert"):
            raise ConfigError(f"granularity must be 'linear' or 'expert', got {self.granularity!r}")
        if not any(s.is_identity for s in self.schemes):
            raise ConfigError("scheme set must include the 16-bit identity scheme")
        if len(self.shapes) != self.sensitivity.num_experts or \
                any(len(row) != NUM_LINEAR for row in self.shapes):
            raise DataError("shapes must be E x 3 and match the sensitivity table")

    @property
    def schemes(self) -> list[QuantScheme]:
        return self.sensitivity.schemes

    @property
    def num_experts(self) -> int:
        return len(self.shapes)

    @cached_property
    def identity_index(self) -> int:
        return next(k for k, s in enumerate(self.schemes) if s.is_identity)

    @cached_property
    def lowest_bit_index(self) -> int:
        order = sorted(range(len(self.schemes)), key=lambda k: (
            self.schemes[k].w_bits, self.schemes[k].a_bits, k))
        return order[0]

    def tile_candidates(self, k: int) -> list[TileConfig]:
        scheme = self.schemes[k]
        if self.candidates and scheme in self.candidates:
            return list(self.candidates[scheme])
        return tile_candidates(scheme, self.hw, self.costs.unified)

    @cached_property
    def block_options(self):
        """Per (expert, block, scheme): delta, time contribution to T, memory bits, best tile."""
        E, K = self.num_experts, len(self.schemes)
        delta = np.array(self.sensitivity.delta, dtype=np.float64)
        time = np.zeros((E, NUM_LINEAR, K))
        mem = np.zeros((E, NUM_LINEAR, K), dtype=np.int64)
        tiles = [[[None] * K for _ in range(NUM_LINEAR)] for _ in range(E)]
        cands = [self.tile_candidates(k) for k in range(K)]
        cache: dict = {}
        for i in range(E):
            for j in range(NUM_LINEAR):
                shape = self.shapes[i][j]
                for k, scheme in enumerate(self.schemes):
                    key = (shape, k)
                    if key not in cache:
                        cache[key] = best_tile(shape, scheme, self.costs, cands[k])
                    cfg, serial = cache[key]
                    tiles[i][j][k] = cfg
                    time[i, j, k] = serial / self.hw.sm_count
                    mem[i, j, k] = block_memory_bits(shape, scheme)
        return delta, time, mem, tiles

    @cached_property
    def units(self) -> list[list[tuple[int, int]]]:
        if self.granularity == "linear":
            return [[(i, j)] for i in range(self.num_experts) for j in range(NUM_LINEAR)]
        return [[(i, j) for j in range(NUM_LINEAR)] for i in range(self.num_experts)]

    @cached_property
    def unit_options(self):
        """U x K arrays (delta, time, memory bits) and the allowed-option mask."""
        delta, time, mem, _ = self.block_options
        U, K = len(self.units), len(self.schemes)
        dl = np.zeros((U, K))
        tm = np.zeros((U, K))
        mb = np.zeros((U, K), dtype=np.int64)
        allowed = np.ones((U, K), dtype=bool)
        for u, blocks in enumerate(self.units):
            for (i, j) in blocks:
                dl[u] += delta[i, j]
                tm[u] += time[i, j]
                mb[u] += mem[i, j]
            expert = blocks[0][0]
            if expert in self.pinned:
                allowed[u] = False
                allowed[u, int(self.pinned[expert])] = True
        return dl, tm, mb, allowed

    @cached_property
    def normalizers(self) -> tuple[float, float]:
        """L of the all-lowest-bit plan and T of the all-identity plan."""
        delta, time, _, _ = self.block_options
        l0 = math.fsum(delta[:, :, self.lowest_bit_index].ravel().tolist())
        t0 = math.fsum(time[:, :, self.identity_index].ravel().tolist())
        return (l0 if l0 > 0 else 1.0), (t0 if t0 > 0 else 1.0)

    def objective(self, L: float, T: float) -> float:
        l0, t0 = self.normalizers
        # Python defines 0.0 ** 0 == 1, so r = 1 ignores T and r = 0 ignores L
        return (L / l0) ** self.r * (T / t0) ** (1.0 - self.r)

    @property
    def budget_bits(self) -> int:
        return _budget_bits(self.budget)

    def min_memory_bits(self) -> int:
        _, _, mb, allowed = self.unit_options
        return int(np.where(allowed, mb, np.iinfo(np.int64).max).min(axis=1).sum())

    def total_params(self) -> int:
        return sum(s.n * s.k for row in self.shapes for s in row)


@dataclass
class AllocationPlan:
    scheme_of: np.ndarray  # E x N scheme indices
    tile_of: list  # E x N TileConfig
    predicted_L: float
    predicted_T: float
    objective: float
    memory_used: float  # bytes
    exact: bool = True

    def schemes(self, problem: AllocationProblem) -> list[list[QuantScheme]]:
        return [[problem.schemes[int(k)] for k in row] for row in self.scheme_of]


def objective_eval(plan: AllocationPlan | np.ndarray, problem: AllocationProblem,
                   tiles=None) -> tuple[float, float, float]:
    """(L, T, objective) of an assignment; T uses the plan's own tiles."""
    if isinstance(plan, AllocationPlan):
        scheme_of, tiles = plan.scheme_of, plan.tile_of if tiles is None else tiles
    else:
        scheme_of = np.asarray(plan)
    delta, time, _, best = problem.block_options
    L_terms, T_terms = [], []
    for i in range(problem.num_experts):
        for j in range(NUM_LINEAR):
            k = int(scheme_of[i][j])
            L_terms.append(float(delta[i, j, k]))
            if tiles is None:
                T_terms.append(float(time[i, j, k]))
            else:
                cfg = tiles[i][j]
                if cfg.scheme != problem.schemes[k]:
                    raise ConfigError(f"tile for block ({i},{j}) does not match its scheme")
                T_terms.append(block_serial_time(problem.shapes[i][j], cfg, problem.costs)
                               / problem.hw.sm_count)
    L = math.fsum(L_terms)
    T = math.fsum(T_terms)
    return L, T, problem.objective(L, T)


def _plan_from_units(choice: Sequence[int], problem: AllocationProblem, exact: bool) -> AllocationPlan:
    E = problem.num_experts
    scheme_of = np.zeros((E, NUM_LINEAR), dtype=np.int64)
    for u, blocks in enumerate(problem.units):
        for (i, j) in blocks:
            scheme_of[i, j] = int(choice[u])
    tiles = problem.block_options[3]
    tile_of = [[tiles[i][j][scheme_of[i, j]] for j in range(NUM_LINEAR)] for i in range(E)]
    L, T, obj = objective_eval(scheme_of, problem)
    mem = memory_usage(scheme_of, problem.shapes, problem.schemes)
    return AllocationPlan(scheme_of, tile_of, L, T, obj, mem, exact)


def _plan_key(plan: AllocationPlan) -> tuple:
    return (plan.objective, plan.predicted_L, plan.predicted_T, tuple(plan.scheme_of.ravel().tolist()))


def _check_feasible(problem: AllocationProblem) -> None:
    need = problem.min_memory_bits()
    if need > problem.budget_bits:
        raise InfeasibleError(
            f"memory budget {problem.budget:.0f} B is below the minimal achievable "
            f"{need / 8:.0f} B", need / 8.0)


def uniform_plan(problem: AllocationProblem, k: int) -> AllocationPlan:
    """Every block on scheme ``k`` with its cost-minimal tile (budget not checked)."""
    return _plan_from_units([k] * len(problem.units), problem, exact=False)


# ---------------------------------------------------------------------------
# brute force oracle
# ---------------------------------------------------------------------------


def brute_force_oracle(problem: AllocationProblem) -> AllocationPlan:
    """Enumerate every scheme assignment; tiles are chosen separably per block."""
    dl, tm, mb, allowed = problem.unit_options
    per_unit = [np.flatnonzero(allowed[u]) for u in range(len(problem.units))]
    count = math.prod(len(p) for p in per_unit)
    if count > BRUTE_FORCE_LIMIT:
        raise ConfigError(f"instance has {count} assignments, more than {BRUTE_FORCE_LIMIT}")
    _check_feasible(problem)
    budget = problem.budget_bits
    best_key, best_choice = None, None
    for choice in itertools.product(*per_unit):
        mem = sum(int(mb[u, k]) for u, k in enumerate(choice))
        if mem > budget:
            continue
        L = math.fsum(float(dl[u, k]) for u, k in enumerate(choice))
        T = math.fsum(float(tm[u, k]) for u, k in enumerate(choice))
        key = (problem.objective(L, T), L, T, choice)
        if best_key is None or key < best_key:
            best_key, best_choice = key, choice
    return _plan_from_units(best_choice, problem, exact=True)


# ---------------------------------------------------------------------------
# scalarized heuristic
# ---------------------------------------------------------------------------


def _repair(choice: np.ndarray, score: np.ndarray, mb: np.ndarray, allowed: np.ndarray,
            budget: int) -> np.ndarray:
    """Downgrade units by best (memory saved)/(score increase) until the budget holds."""
    choice = choice.copy()
    U = len(choice)
    mem = int(mb[np.arange(U), choice].sum())
    while mem > budget:
        best = None
        for u in range(U):
            cur = choice[u]
            for k in np.flatnonzero(allowed[u] & (mb[u] < mb[u, cur])):
                saved = int(mb[u, cur] - mb[u, k])
                inc = float(score[u, k] - score[u, cur])
                ratio = math.inf if inc <= 0 else saved / inc
                key = (ratio, saved, -u, -int(k))
                if best is None or key > best[0]:
                    best = (key, u, int(k))
        if best is None:
            break
        _, u, k = best
        mem -= int(mb[u, choice[u]] - mb[u, k])
        choice[u] = k
    return choice


def _local_search(choice: np.ndarray, problem: AllocationProblem, max_rounds: int = 50) -> np.ndarray:
    """First-improvement single-unit moves on the product objective."""
    dl, tm, mb, allowed = problem.unit_options
    budget = problem.budget_bits
    choice = choice.copy()
    U = len(choice)
    idx = np.arange(U)
    L = float(dl[idx, choice].sum())
    T = float(tm[idx, choice].sum())
    mem = int(mb[idx, choice].sum())
    best = problem.objective(L, T)
    for _ in range(max_rounds):
        improved = False
        for u in range(U):
            cur = choice[u]
            for k in np.flatnonzero(allowed[u]):
                if k == cur:
                    continue
                m2 = mem - int(mb[u, cur]) + int(mb[u, k])
                if m2 > budget:
                    continue
                L2 = L - dl[u, cur] + dl[u, k]
                T2 = T - tm[u, cur] + tm[u, k]
                obj = problem.objective(max(L2, 0.0), max(T2, 0.0))
                if obj < best * (1 - 1e-12):
                    choice[u], L, T, mem, best = k, L2, T2, m2, obj
                    cur = k
                    improved = True
        if not improved:
            break
    return choice


def solve_scalarized(problem: AllocationProblem, lambdas: Sequence[float] = LAMBDA_GRID,
                     polish: bool = True) -> AllocationPlan:
    """Weighted-sum sweep over a log grid of lambda, repaired to the budget.

    Each grid point picks per unit the option minimizing
    ``lambda * delta / L0 + time / T0``; every candidate is re-scored on the
    product objective. Feasible uniform plans are always candidates.
    """
    _check_feasible(problem)
    dl, tm, mb, allowed = problem.unit_options
    l0, t0 = problem.normalizers
    budget = problem.budget_bits
    U = len(problem.units)
    big = np.inf
    cand_choices = []
    for lam in lambdas:
        score = lam * dl / l0 + tm / t0
        masked = np.where(allowed, score, big)
        # lexicographic ties: lower delta, then lower time, then lower index
        choice = np.array([min(np.flatnonzero(allowed[u]),
                               key=lambda k: (masked[u, k], dl[u, k], tm[u, k], k)) for u in range(U)])
        cand_choices.append(_repair(choice, masked, mb, allowed, budget))
    for k in range(len(problem.schemes)):
        choice = np.array([k if allowed[u, k] else int(np.flatnonzero(allowed[u])[0]) for u in range(U)])
        if int(mb[np.arange(U), choice].sum()) <= budget:
            cand_choices.append(choice)
    if polish:
        cand_choices += [_local_search(c, problem) for c in cand_choices]
    plans = [_plan_from_units(c, problem, exact=False) for c in cand_choices
             if int(mb[np.arange(U), c].sum()) <= budget]
    return min(plans, key=_plan_key)


# ---------------------------------------------------------------------------
# exact Pareto-frontier dynamic program
# ---------------------------------------------------------------------------


def _pareto_filter(L: np.ndarray, T: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Indices of points not weakly dominated in (L, T, M); first of duplicates kept."""
    order = np.lexsort((np.arange(len(L)), M, T, L))
    keep = []
    ts: list[float] = []
    ms: list[int] = []
    for idx in order:
        t, m = T[idx], M[idx]
        pos = bisect.bisect_right(ts, t) - 1
        if pos >= 0 and ms[pos] <= m:
            continue
        keep.append(idx)
        lo = bisect.bisect_left(ts, t)
        hi = lo
        while hi < len(ts) and ms[hi] >= m:
            hi += 1
        ts[lo:hi] = [t]
        ms[lo:hi] = [m]
    return np.array(sorted(keep), dtype=np.int64)


def _coarsen(L: np.ndarray, T: np.ndarray, M: np.ndarray, max_states: int) -> np.ndarray:
    """Keep one state per (log L, log T) cell; used only when the frontier overflows."""
    rel = 1e-4
    while True:
        cl = np.floor(np.log1p(L / (L.max() + 1e-300) / rel))
        ct = np.floor(np.log1p(T / (T.max() + 1e-300) / rel))
        order = np.lexsort((np.arange(len(L)), M, ct, cl))
        cells = np.stack([cl[order], ct[order]], axis=1)
        first = np.ones(len(order), dtype=bool)
        first[1:] = np.any(cells[1:] != cells[:-1], axis=1)
        keep = np.sort(order[first])
        if len(keep) <= max_states:
            return keep
        rel *= 4.0


def solve_exact(problem: AllocationProblem, incumbent: AllocationPlan | None = None,
                max_states: int = DEFAULT_MAX_STATES) -> AllocationPlan:
    """Unit-by-unit DP over the non-dominated (L, T, memory) frontier.

    Dominated partial assignments cannot lead to a better product objective,
    so the frontier is exact. Partial states are also cut when even the
    cheapest completion exceeds the budget or cannot beat ``incumbent``.
    If the frontier outgrows ``max_states`` it is coarsened and the returned
    plan is flagged ``exact=False``.
    """
    _check_feasible(problem)
    dl, tm, mb, allowed = problem.unit_options
    U = len(problem.units)
    budget = problem.budget_bits
    inf_i = np.iinfo(np.int64).max // 4
    min_l = np.where(allowed, dl, np.inf).min(axis=1)
    min_t = np.where(allowed, tm, np.inf).min(axis=1)
    min_m = np.where(allowed, mb, inf_i).min(axis=1)
    suf_l = np.concatenate([np.cumsum(min_l[::-1])[::-1], [0.0]])
    suf_t = np.concatenate([np.cumsum(min_t[::-1])[::-1], [0.0]])
    suf_m = np.concatenate([np.cumsum(min_m[::-1])[::-1], [0]])
    bound = math.inf if incumbent is None else incumbent.objective * (1 + 1e-9) + 1e-300
    l0, t0 = problem.normalizers
    r = problem.r

    L = np.zeros(1)
    T = np.zeros(1)
    M = np.zeros(1, dtype=np.int64)
    parents: list[np.ndarray] = []
    options: list[np.ndarray] = []
    exact = True
    for u in range(U):
        ks = np.flatnonzero(allowed[u])
        n = len(L)
        L2 = (L[:, None] + dl[u, ks][None, :]).ravel()
        T2 = (T[:, None] + tm[u, ks][None, :]).ravel()
        M2 = (M[:, None] + mb[u, ks][None, :]).ravel()
        par = np.repeat(np.arange(n), len(ks))
        opt = np.tile(ks, n)
        ok = M2 + suf_m[u + 1] <= budget
        if math.isfinite(bound):
            lb = ((L2 + suf_l[u + 1]) / l0) ** r * ((T2 + suf_t[u + 1]) / t0) ** (1.0 - r)
            ok &= lb <= bound
        L2, T2, M2, par, opt = L2[ok], T2[ok], M2[ok], par[ok], opt[ok]
        if len(L2) == 0:
            # nothing can beat the incumbent
            return replace(incumbent, exact=exact)
        keep = _pareto_filter(L2, T2, M2)
        if len(keep) > max_states:
            exact = False
            keep = keep[_coarsen(L2[keep], T2[keep], M2[keep], max_states)]
        L, T, M = L2[keep], T2[keep], M2[keep]
        parents.append(par[keep])
        options.append(opt[keep])

    best_key, best_state = None, None
    for s in range(len(L)):
        key = (problem.objective(L[s], T[s]), L[s], T[s], s)
        if best_key is None or key < best_key:
            best_key, best_state = key, s
    choice = [0] * U
    s = best_state
    for u in range(U - 1, -1, -1):
        choice[u] = int(options[u][s])
        s = int(parents[u][s])
    plan = _plan_from_units(choice, problem, exact)
    if incumbent is not None and _plan_key(incumbent) < _plan_key(plan):
        return replace(incumbent, exact=exact)
    return plan


def solve(problem: AllocationProblem, method: str = "auto",
          max_states: int = DEFAULT_MAX_STATES) -> AllocationPlan:
    """Best plan for the product objective under the memory budget.

    ``method="scalarized"`` runs only the lambda sweep; ``"auto"`` uses the
    sweep as an incumbent for the exact frontier DP.
    """
    if method not in ("auto", "exact", "scalarized"):
        raise ConfigError(f"unknown solve method {method!r}")
    heuristic = solve_scalarized(problem)
    if method == "scalarized":
        return heuristic
    return solve_exact(problem, heuristic, max_states)


def coarsen_to_expert_granularity(problem: AllocationProblem) -> AllocationProblem:
    """Same problem with all linear blocks of an expert forced onto one scheme."""
    return replace(problem, granularity="expert")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def plan_to_dict(plan: AllocationPlan, problem: AllocationProblem) -> dict:
    experts = []
    for i in range(problem.num_experts):
        entry = {"expert": i}
        for j, name in enumerate(BLOCK_NAMES):
            s = problem.schemes[int(plan.scheme_of[i, j])]
            sh = problem.shapes[i][j]
            entry[name] = {
                "w-act": f"{s.w_bits}-{s.a_bits}",
                "w_gsize": s.w_group,
                "a_gsize": s.a_group,
                "scheme": s.name,
                "tile": plan.tile_of[i][j].to_dict(),
                "shape": {"m": sh.m, "n": sh.n, "k": sh.k},
            }
        experts.append(entry)
    return {
        "schemes": [s.name for s in problem.schemes],
        "r": problem.r,
        "budget_bytes": problem.budget,
        "granularity": problem.granularity,
        "sm_count": problem.hw.sm_count,
        "exact": bool(plan.exact),
        "predicted": {"L": plan.predicted_L, "T": plan.predicted_T,
                      "objective": plan.objective, "memory_bytes": plan.memory_used},
        "experts": experts,
    }


@dataclass
class LoadedPlan:
    """A plan read back from JSON: per-block scheme, tile and GEMM shape."""

    schemes: list[list[QuantScheme]]
    tiles: list[list[TileConfig]]
    shapes: list[list[GemmShape]]
    data: dict

    @property
    def predicted_T(self) -> float:
        return float(self.data["predicted"]["T"])


def plan_from_dict(data: dict) -> LoadedPlan:
    from .schemas import validate

    validate(data, "plan")
    schemes, tiles, shapes = [], [], []
    for entry in sorted(data["experts"], key=lambda e: e["expert"]):
        srow, trow, hrow = [], [], []
        for name in BLOCK_NAMES:
            b = entry[name]
            s = QuantScheme.parse(b["scheme"])
            srow.append(s)
            trow.append(TileConfig.from_dict(b["tile"], s))
            hrow.append(GemmShape(**b["shape"]))
        schemes.append(srow)
        tiles.append(trow)
        shapes.append(hrow)
    return LoadedPlan(schemes, tiles, shapes, data)
