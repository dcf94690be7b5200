"""Roofline analysis and the tile-level runtime model."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.optimize

from .errors import ConfigError, DataError
from .moe import ActivationStats, MoEBlockSpec
from .quant import FULL_BITS, QuantScheme, storage_bits_per_weight

PRECISIONS = ("fp16", "int8", "int4")

# Fraction of per-SM peak a tile reaches at each warp count. Invented constants.
WARP_UTIL = {4: 0.7, 8: 0.9, 16: 1.0}
WARP_COUNTS = tuple(sorted(WARP_UTIL))

TILE_M = (16, 32, 64, 128)
TILE_N = (32, 64, 128, 256)
TILE_K = (32, 64, 128, 256)
PIPELINE_STAGES = 3
# each warp owns at least a 16x16 block of the output tile
MIN_WARP_OUTPUTS = 256
UNIFIED_GROUP = 128
SLICE_K_EPSILON = 0.05

# specialized / unified kernel throughput for W4A4 at [8192, 8192, 8192]
UNIFIED_SLOWDOWN = {
    "per-channel": 1070.5303 / 929.1997,
    "grouped": 667.3349 / 412.0268,
}


@dataclass(frozen=True)
class HardwareProfile:
    sm_count: int
    mem_bw: float  # bytes / s
    smem_per_sm: int  # bytes
    peak_flops: dict  # precision -> ops / s
    launch_overhead: float  # s per tile
    name: str = "custom"

    def __post_init__(self):
        if self.sm_count <= 0 or self.mem_bw <= 0 or self.smem_per_sm <= 0 or self.launch_overhead <= 0:
            raise ConfigError("hardware profile values must be positive")
        if not self.peak_flops or any(v <= 0 for v in self.peak_flops.values()):
            raise ConfigError("peak_flops must be positive")
        known = [self.peak_flops[p] for p in PRECISIONS if p in self.peak_flops]
        if any(b < a for a, b in zip(known, known[1:])):
            raise ConfigError("peak_flops must not decrease as precision decreases")

    def __hash__(self):
        return hash((self.sm_count, self.mem_bw, self.smem_per_sm,
                     tuple(sorted(self.peak_flops.items())), self.launch_overhead))

    def peak(self, precision: str) -> float:
        try:
            return self.peak_flops[precision]
        except KeyError:
            raise ConfigError(f"hardware profile has no {precision} throughput") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareProfile":
        from .schemas import validate

        validate(data, "hardware")
        fields = {k: data[k] for k in ("sm_count", "mem_bw", "smem_per_sm", "launch_overhead")}
        return cls(peak_flops=dict(data["peak_flops"]), name=data.get("name", "custom"), **fields)

    @classmethod
    def load(cls, path: str | Path) -> "HardwareProfile":
        from .schemas import load_json

        return cls.from_dict(load_json(path, "hardware"))


def default_profile() -> HardwareProfile:
    """RTX-4090-like profile.

    fp16 dense tensor throughput 165.2 TFLOP/s, 1.008 TB/s DRAM, int8/int4 at
    2x/4x fp16. With n = k = 4096 this places the W4A16/W8A8 roofline
    crossover at m ~ 87 and W2A16/W4A4 at m ~ 42.
    """
    return HardwareProfile(
        sm_count=128,
        mem_bw=1.008e12,
        smem_per_sm=100 * 1024,
        peak_flops={"fp16": 165.2e12, "int8": 330.4e12, "int4": 660.8e12},
        launch_overhead=5e-7,
        name="rtx4090-like",
    )


@dataclass(frozen=True)
class GemmShape:
    m: int
    n: int
    k: int

    def __post_init__(self):
        if self.m < 0 or self.n < 0 or self.k < 0:
            raise DataError("GEMM dimensions must be non-negative")


def gemm_bytes(shape: GemmShape, scheme: QuantScheme) -> float:
    """Weights at storage width, activations at a_bits, fp16 output."""
    m, n, k = shape.m, shape.n, shape.k
    w_bits = float(storage_bits_per_weight(scheme, k)) if k else scheme.w_bits
    return (n * k * w_bits + m * k * scheme.a_bits + m * n * FULL_BITS) / 8.0


def arithmetic_intensity(shape: GemmShape, scheme: QuantScheme) -> float:
    if shape.m == 0:
        return 0.0
    if shape.n <= 0 or shape.k <= 0:
        raise DataError("n and k must be positive")
    return 2.0 * shape.m * shape.n * shape.k / gemm_bytes(shape, scheme)


def roofline_time(shape: GemmShape, scheme: QuantScheme, hw: HardwareProfile) -> float:
    peak = hw.peak(scheme.compute_precision)
    flops = 2.0 * shape.m * shape.n * shape.k
    return max(flops / peak, gemm_bytes(shape, scheme) / hw.mem_bw)


def roofline_crossover(a: QuantScheme, b: QuantScheme, hw: HardwareProfile,
                       n: int = 4096, k: int = 4096, m_max: float = 1 << 20) -> float | None:
    """Token count m at which ``a`` and ``b`` swap places on the roofline.

    Returns the first sign change of ``time(a) - time(b)`` over m >= 1, or
    None if one scheme is faster over the whole range.
    """
    peak_a, peak_b = hw.peak(a.compute_precision), hw.peak(b.compute_precision)

    def diff(m: float) -> float:
        flops = 2.0 * m * n * k
        ta = max(flops / peak_a, _bytes_m(m, n, k, a) / hw.mem_bw)
        tb = max(flops / peak_b, _bytes_m(m, n, k, b) / hw.mem_bw)
        return ta - tb

    lo, prev = 1.0, diff(1.0)
    if prev == 0.0:
        return lo
    hi = 2.0
    while hi <= m_max:
        cur = diff(hi)
        if cur == 0.0:
            return hi
        if (cur > 0) != (prev > 0):
            return float(scipy.optimize.brentq(diff, lo, hi, xtol=1e-9))
        lo, prev = hi, cur
        hi *= 2.0
    return None


def _bytes_m(m: float, n: int, k: int, scheme: QuantScheme) -> float:
    w_bits = float(storage_bits_per_weight(scheme, k))
    return (n * k * w_bits + m * k * scheme.a_bits + m * n * FULL_BITS) / 8.0


def roofline_curves(schemes: Sequence[QuantScheme], hw: HardwareProfile, ms: Sequence[int],
                    n: int = 4096, k: int = 4096) -> list[dict]:
    rows = []
    for m in ms:
        row = {"m": int(m)}
        for s in schemes:
            t = roofline_time(GemmShape(int(m), n, k), s, hw)
            row[s.name] = t
        rows.append(row)
    return rows


def derive_gemm_shapes(stats: ActivationStats, spec: MoEBlockSpec) -> list[list[GemmShape]]:
    """gate/up are [m_e, f, d]; down is [m_e, d, f]."""
    if stats.num_experts != spec.num_experts:
        raise DataError("activation stats and block spec disagree on expert count")
    d, f = spec.hidden, spec.intermediate
    return [[GemmShape(int(m), f, d), GemmShape(int(m), f, d), GemmShape(int(m), d, f)]
            for m in stats.tokens_per_expert]


def scale_stats(stats: ActivationStats, total_tokens: int) -> ActivationStats:
    """Rescale per-expert counts to a different workload size (largest remainder)."""
    if stats.total_tokens == 0:
        raise DataError("cannot rescale empty statistics")
    target = total_tokens * stats.top_k
    exact = stats.tokens_per_expert * (target / stats.tokens_per_expert.sum())
    base = np.floor(exact).astype(np.int64)
    short = target - int(base.sum())
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:short]] += 1
    return ActivationStats(base, total_tokens, stats.top_k)


# ---------------------------------------------------------------------------
# tiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TileConfig:
    tile_m: int
    tile_n: int
    tile_k: int
    warps: int
    scheme: QuantScheme
    slice_k: int = 1

    def __post_init__(self):
        if self.slice_k < 1:
            raise ConfigError("slice_k must be >= 1")
        if self.warps not in WARP_UTIL:
            raise ConfigError(f"warps must be one of {WARP_COUNTS}")

    def key(self) -> tuple:
        return (self.scheme.name, self.tile_m, self.tile_n, self.tile_k, self.warps, self.slice_k)

    def to_dict(self) -> dict:
        return {"tile_m": self.tile_m, "tile_n": self.tile_n, "tile_k": self.tile_k,
                "warps": self.warps, "slice_k": self.slice_k}

    @classmethod
    def from_dict(cls, data: dict, scheme: QuantScheme) -> "TileConfig":
        return cls(data["tile_m"], data["tile_n"], data["tile_k"], data["warps"], scheme,
                   data.get("slice_k", 1))


def smem_usage(config: TileConfig) -> int:
    """Shared memory bytes: pipelined A/B stages plus weight scale/zero staging."""
    s = config.scheme
    a_bits = min(s.a_bits, FULL_BITS)
    w_bits = min(s.w_bits, FULL_BITS)
    stage = config.tile_m * config.tile_k * a_bits + config.tile_n * config.tile_k * w_bits
    meta = 0
    if s.w_bits < FULL_BITS:
        per_row = math.ceil(config.tile_k / s.w_group) if s.w_group > 0 else 1
        meta = config.tile_n * per_row * (1 if s.symmetric else 2) * s.meta_bits
    base = math.ceil((PIPELINE_STAGES * stage + meta) / 8)
    return base * config.slice_k


def _group_ok(tile_k: int, scheme: QuantScheme, unified: bool) -> bool:
    groups = []
    if scheme.w_bits < FULL_BITS and scheme.w_group > 0:
        groups.append(scheme.w_group)
    if scheme.a_bits < FULL_BITS and scheme.a_group > 0:
        groups.append(scheme.a_group)
    if unified:
        groups.append(UNIFIED_GROUP)
    return all(g % tile_k == 0 for g in groups)


@lru_cache(maxsize=None)
def _candidates(scheme: QuantScheme, smem_limit: int, unified: bool) -> tuple[TileConfig, ...]:
    out = []
    for tm, tn, tk, w in itertools.product(TILE_M, TILE_N, TILE_K, WARP_COUNTS):
        if tm * tn < w * MIN_WARP_OUTPUTS or not _group_ok(tk, scheme, unified):
            continue
        cfg = TileConfig(tm, tn, tk, w, scheme)
        if smem_usage(cfg) <= smem_limit:
            out.append(cfg)
    return tuple(out)


def tile_candidates(scheme: QuantScheme, hw: HardwareProfile, unified: bool = False) -> list[TileConfig]:
    """Enumerate tile shapes x warp counts that fit shared memory and group alignment.

    ``unified=True`` models a kernel that must also serve group-128 layouts, so
    tile_k is restricted to divisors of 128 for every scheme.
    """
    found = list(_candidates(scheme, hw.smem_per_sm, unified))
    if not found:
        raise ConfigError(f"no feasible tile configuration for {scheme.name}")
    return found


def unified_slowdown(scheme: QuantScheme) -> float:
    grouped = (scheme.w_bits < FULL_BITS and scheme.w_group > 0) or \
        (scheme.a_bits < FULL_BITS and scheme.a_group > 0)
    return UNIFIED_SLOWDOWN["grouped" if grouped else "per-channel"]


def tile_cost(config: TileConfig, hw: HardwareProfile, k_extent: int | None = None,
              unified: bool = False) -> float:
    """Analytical runtime of one tile on one SM.

    Without ``k_extent`` this is a single ``tile_m x tile_n x tile_k`` step;
    with it the tile loops over ``ceil(k_extent / tile_k)`` steps and writes
    its fp16 output once.
    """
    s = config.scheme
    peak_sm = hw.peak(s.compute_precision) / hw.sm_count
    bw_sm = hw.mem_bw / hw.sm_count
    k = config.tile_k if k_extent is None else k_extent
    steps = max(1, math.ceil(k / config.tile_k)) if k else 0
    w_bits = float(storage_bits_per_weight(s, max(k, 1)))
    step_bytes = (config.tile_m * config.tile_k * min(s.a_bits, FULL_BITS)
                  + config.tile_n * config.tile_k * w_bits) / 8.0
    out_bytes = 0.0 if k_extent is None else config.tile_m * config.tile_n * 2.0
    compute = steps * 2.0 * config.tile_m * config.tile_n * config.tile_k / (peak_sm * WARP_UTIL[config.warps])
    memory = (steps * step_bytes + out_bytes) / bw_sm
    body = max(compute, memory)
    if unified:
        body *= unified_slowdown(s)
    if config.slice_k > 1:
        body *= 1.0 + SLICE_K_EPSILON * (config.slice_k - 1) / config.slice_k
    return body + hw.launch_overhead


@dataclass
class TileCostTable:
    """Per-tile costs; measured entries override the analytical model."""

    hw: HardwareProfile
    measured: dict = field(default_factory=dict)
    unified: bool = False

    def cost(self, config: TileConfig, k_extent: int) -> float:
        hit = self.measured.get(config.key() + (k_extent,))
        if hit is not None:
            return hit
        return tile_cost(config, self.hw, k_extent, self.unified)

    def to_dict(self) -> dict:
        entries = []
        for (scheme, tm, tn, tk, warps, sk, k), c in sorted(self.measured.items()):
            entries.append({"scheme": scheme, "tile_m": tm, "tile_n": tn, "tile_k": tk,
                            "warps": warps, "slice_k": sk, "k": k, "cost": c})
        return {"entries": entries}

    @classmethod
    def from_dict(cls, data: dict, hw: HardwareProfile) -> "TileCostTable":
        from .schemas import validate

        validate(data, "tile_costs")
        measured = {}
        for e in data["entries"]:
            name = QuantScheme.parse(e["scheme"]).name
            key = (name, e["tile_m"], e["tile_n"], e["tile_k"], e["warps"], e.get("slice_k", 1), e["k"])
            measured[key] = float(e["cost"])
        return cls(hw, measured)


def tile_count(shape: GemmShape, config: TileConfig) -> int:
    if shape.m == 0 or shape.n == 0:
        return 0
    return math.ceil(shape.m / config.tile_m) * math.ceil(shape.n / config.tile_n) * config.slice_k


def per_tile_cost(shape: GemmShape, config: TileConfig, costs: TileCostTable) -> float:
    return costs.cost(config, math.ceil(shape.k / config.slice_k))


def block_serial_time(shape: GemmShape, config: TileConfig, costs: TileCostTable) -> float:
    """Sum of tile costs for one linear block (not divided by SM count)."""
    n = tile_count(shape, config)
    return n * per_tile_cost(shape, config, costs) if n else 0.0


def best_tile(shape: GemmShape, scheme: QuantScheme, costs: TileCostTable,
              candidates: Sequence[TileConfig] | None = None) -> tuple[TileConfig, float]:
    """Cost-minimal candidate for a block; the first candidate wins ties."""
    cands = candidates if candidates is not None else tile_candidates(scheme, costs.hw, costs.unified)
    best, best_t = cands[0], math.inf
    for cfg in cands:
        t = block_serial_time(shape, cfg, costs)
        if t < best_t:
            best, best_t = cfg, t
    return best, best_t


def estimate_block_time(shapes, schemes, tiles, costs: TileCostTable, hw: HardwareProfile) -> float:
    """Serial time of every tile divided by SM count.

    ``schemes`` and ``tiles`` are E x N nested sequences; each tile's scheme
    must equal the scheme assigned to its block.
    """
    total = 0.0
    for i, row in enumerate(shapes):
        for j, shape in enumerate(row):
            cfg = tiles[i][j]
            if cfg.scheme != schemes[i][j]:
                raise ConfigError(f"tile for block ({i},{j}) was built for another scheme")
            total += block_serial_time(shape, cfg, costs)
    return total / hw.sm_count


def with_slice_k(config: TileConfig, slice_k: int) -> TileConfig:
    return replace(config, slice_k=slice_k)
