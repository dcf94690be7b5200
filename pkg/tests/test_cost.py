import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mxplan.cost import (
    GemmShape,
    HardwareProfile,
    TileConfig,
    TileCostTable,
    UNIFIED_SLOWDOWN,
    arithmetic_intensity,
    best_tile,
    block_serial_time,
    default_profile,
    derive_gemm_shapes,
    estimate_block_time,
    gemm_bytes,
    roofline_crossover,
    roofline_curves,
    roofline_time,
    scale_stats,
    smem_usage,
    tile_candidates,
    tile_cost,
    tile_count,
)
from mxplan.errors import ConfigError, DataError
from mxplan.moe import ActivationStats, MoEBlockSpec
from mxplan.quant import DEFAULT_SCHEMES, IDENTITY, QuantScheme

HW = default_profile()
W4A16 = QuantScheme(4, 16, -1, -1, False)
W8A16 = QuantScheme(8, 16, -1, -1, False)
W8A8 = QuantScheme(8, 8)
W2A16 = QuantScheme(2, 16, 128, -1, False)
W4A4 = QuantScheme(4, 4)
W4A4G = QuantScheme(4, 4, 128, 128)


def oracle_time(m, n, k, w_bits, meta, a_bits, peak, bw):
    """Roofline time written out from first principles."""
    bytes_moved = n * k * (w_bits + meta / k) / 8 + m * k * a_bits / 8 + m * n * 2
    return max(2 * m * n * k / peak, bytes_moved / bw)


def oracle_crossover(fa, fb):
    """Bisection on the first power-of-two bracket where the sign flips."""
    diff = lambda m: fa(m) - fb(m)
    a, b = 1.0, 2.0
    while (diff(a) > 0) == (diff(b) > 0):
        a, b = b, 2 * b
        assert b < 1 << 20
    for _ in range(200):
        mid = (a + b) / 2
        if (diff(mid) > 0) == (diff(a) > 0):
            a = mid
        else:
            b = mid
    return (a + b) / 2


# --- arithmetic intensity and roofline --------------------------------------


def test_ai_reduces_to_m_for_fp16():
    assert arithmetic_intensity(GemmShape(64, 4096, 4096), IDENTITY) == pytest.approx(64, rel=0.05)
    assert arithmetic_intensity(GemmShape(0, 4096, 4096), IDENTITY) == 0.0


def test_ai_halving_weight_bits():
    shape = GemmShape(1, 4096, 4096)
    ratio = arithmetic_intensity(shape, W4A16) / arithmetic_intensity(shape, W8A16)
    assert ratio == pytest.approx(2.0, rel=0.05)


def test_roofline_memory_and_compute_limits():
    small = GemmShape(1, 4096, 4096)
    assert roofline_time(small, IDENTITY, HW) == pytest.approx(4096 * 4096 * 2 / HW.mem_bw, rel=0.01)
    big = GemmShape(1 << 20, 4096, 4096)
    assert roofline_time(big, IDENTITY, HW) == pytest.approx(2 * (1 << 20) * 4096**2 / 165.2e12, rel=1e-9)


def test_roofline_matches_oracle():
    for m in (1, 17, 83, 500, 4096):
        got = roofline_time(GemmShape(m, 4096, 4096), W8A8, HW)
        assert got == pytest.approx(oracle_time(m, 4096, 4096, 8, 16, 8, 330.4e12, 1.008e12), rel=1e-12)


def test_crossovers_match_oracle_and_window():
    def f(w, meta, a, peak):
        return lambda m: oracle_time(m, 4096, 4096, w, meta, a, peak, 1.008e12)

    w4a16 = f(4, 32, 16, 165.2e12)
    w8a8 = f(8, 16, 8, 330.4e12)
    w2a16 = f(2, 32 * 4096 / 128, 16, 165.2e12)
    w4a4 = f(4, 16, 4, 660.8e12)
    c1 = roofline_crossover(W4A16, W8A8, HW)
    c2 = roofline_crossover(W2A16, W4A4, HW)
    assert c1 == pytest.approx(oracle_crossover(w4a16, w8a8), rel=1e-6)
    assert c2 == pytest.approx(oracle_crossover(w2a16, w4a4), rel=1e-6)
    assert 62 <= c1 <= 104 and 31 <= c2 <= 53 and c2 < c1


def test_crossover_none_when_dominated():
    assert roofline_crossover(W4A4, IDENTITY, HW) is None


def test_missing_precision():
    hw = HardwareProfile(4, 1e9, 1024, {"fp16": 1e12}, 1e-6)
    with pytest.raises(ConfigError):
        roofline_time(GemmShape(1, 8, 8), W8A8, hw)


@settings(max_examples=60)
@given(m=st.integers(0, 5000), n=st.integers(1, 8192), k=st.sampled_from([128, 1024, 4096]),
       s=st.sampled_from(DEFAULT_SCHEMES))
def test_roofline_bounds(m, n, k, s):
    shape = GemmShape(m, n, k)
    t = roofline_time(shape, s, HW)
    assert t >= 2 * m * n * k / HW.peak(s.compute_precision)
    assert t >= gemm_bytes(shape, s) / HW.mem_bw


@given(m=st.integers(0, 5000), a=st.sampled_from([4, 8, 16]))
def test_lower_weight_bits_never_more_memory(m, a):
    shape = GemmShape(m, 2048, 2048)
    mem = [gemm_bytes(shape, QuantScheme(w, a)) for w in (2, 3, 4, 8)]
    assert all(x <= y for x, y in zip(mem, mem[1:]))


def test_roofline_curves_rows():
    rows = roofline_curves([W4A16, W8A8], HW, [1, 64])
    assert [r["m"] for r in rows] == [1, 64]
    assert rows[1][W8A8.name] == roofline_time(GemmShape(64, 4096, 4096), W8A8, HW)


# --- shapes ------------------------------------------------------------------


def test_derive_shapes_paper_scale():
    counts = np.full(60, 8)
    stats = ActivationStats(counts, 120, 4)
    shapes = derive_gemm_shapes(stats, MoEBlockSpec(60, 4, 2048, 2816))
    assert len(shapes) == 60
    assert shapes[0][0] == GemmShape(8, 2816, 2048) and shapes[0][2] == GemmShape(8, 2048, 2816)
    assert sum(row[0].m for row in shapes) == 120 * 4


def test_derive_shapes_zero_tokens():
    stats = ActivationStats(np.array([4, 0]), 4, 1)
    shapes = derive_gemm_shapes(stats, MoEBlockSpec(2, 1, 8, 8))
    assert shapes[1][1].m == 0
    with pytest.raises(DataError):
        derive_gemm_shapes(stats, MoEBlockSpec(3, 1, 8, 8))


@given(st.lists(st.integers(0, 200), min_size=2, max_size=10), st.integers(1, 5000))
def test_scale_stats_conserves(counts, target):
    k = 2
    total = sum(counts)
    if total == 0:
        return
    # pad so the counts are a valid top-k histogram
    counts[0] += (-total) % k
    stats = ActivationStats(np.array(counts), sum(counts) // k, k)
    out = scale_stats(stats, target)
    assert out.tokens_per_expert.sum() == target * k
    assert np.all(out.tokens_per_expert >= 0)


# --- tiles -------------------------------------------------------------------


def test_g128_excludes_tile_k_256():
    ks = {c.tile_k for c in tile_candidates(W4A4G, HW)}
    assert 256 not in ks and ks <= {32, 64, 128}


@pytest.mark.parametrize("scheme", DEFAULT_SCHEMES)
def test_candidates_fit_and_exist(scheme):
    cands = tile_candidates(scheme, HW)
    assert cands
    for c in cands:
        assert smem_usage(c) <= HW.smem_per_sm
        assert c.tile_m * c.tile_n >= c.warps * 256
    for c in tile_candidates(scheme, HW, unified=True):
        assert 128 % c.tile_k == 0


def test_empty_candidates_error():
    hw = HardwareProfile(4, 1e9, 64, {"fp16": 1e12, "int8": 2e12, "int4": 4e12}, 1e-6)
    with pytest.raises(ConfigError):
        tile_candidates(IDENTITY, hw)


def test_smem_oracle():
    c = TileConfig(64, 128, 64, 4, QuantScheme(4, 16, 128, -1, False))
    # 3 stages of fp16 A and 4-bit B, plus one scale+zero per output column
    expected = (3 * (64 * 64 * 2 + 128 * 64 // 2)) + 128 * 2 * 2
    assert smem_usage(c) == expected
    assert smem_usage(TileConfig(64, 128, 64, 4, c.scheme, slice_k=2)) == 2 * expected


def test_tile_k_doubling_doubles_compute_bound_cost():
    hw = HardwareProfile(1, 1e18, 1 << 20, {"fp16": 1e12, "int8": 2e12, "int4": 4e12}, 1e-7)
    a = TileConfig(64, 64, 64, 8, IDENTITY)
    b = TileConfig(64, 64, 128, 8, IDENTITY)
    body_a = tile_cost(a, hw) - hw.launch_overhead
    body_b = tile_cost(b, hw) - hw.launch_overhead
    assert body_b == pytest.approx(2 * body_a, rel=1e-12)
    assert body_a == pytest.approx(2 * 64**3 / (1e12 * 0.9), rel=1e-12)


def test_unified_penalty_ordering():
    c = TileConfig(64, 128, 64, 8, W4A4)
    spec, uni = tile_cost(c, HW) - HW.launch_overhead, tile_cost(c, HW, unified=True) - HW.launch_overhead
    assert spec < uni
    assert uni / spec == pytest.approx(UNIFIED_SLOWDOWN["per-channel"])
    g = TileConfig(64, 128, 64, 8, W4A4G)
    assert (tile_cost(g, HW, unified=True) - HW.launch_overhead) / (tile_cost(g, HW) - HW.launch_overhead) \
        == pytest.approx(667.3349 / 412.0268)


@settings(max_examples=50)
@given(s=st.sampled_from(DEFAULT_SCHEMES), i=st.integers(0, 1000), k=st.integers(0, 8192),
       sk=st.sampled_from([1, 2, 4]))
def test_tile_cost_positive(s, i, k, sk):
    cands = tile_candidates(s, HW)
    c = cands[i % len(cands)]
    c = TileConfig(c.tile_m, c.tile_n, c.tile_k, c.warps, s, sk)
    assert tile_cost(c, HW, k) > 0


def test_measured_costs_override_and_round_trip(tmp_path):
    c = TileConfig(64, 128, 64, 8, W4A4)
    table = TileCostTable(HW, {c.key() + (4096,): 1e-5})
    assert table.cost(c, 4096) == 1e-5
    assert table.cost(c, 2048) == tile_cost(c, HW, 2048)
    back = TileCostTable.from_dict(json.loads(json.dumps(table.to_dict())), HW)
    assert back.measured == table.measured


# --- block time ---------------------------------------------------------------


def _tiles_for(shapes, scheme, costs):
    return [[best_tile(s, scheme, costs)[0] for s in row] for row in shapes]


def test_tile_count_formula():
    c = TileConfig(64, 128, 64, 8, W4A4, slice_k=2)
    assert tile_count(GemmShape(100, 300, 512), c) == 2 * 3 * 2
    assert tile_count(GemmShape(0, 300, 512), c) == 0


def test_estimate_single_sm_and_zero_tokens():
    hw1 = HardwareProfile(1, HW.mem_bw, HW.smem_per_sm, HW.peak_flops, HW.launch_overhead)
    costs = TileCostTable(hw1)
    shapes = [[GemmShape(40, 256, 128)] * 3, [GemmShape(0, 256, 128)] * 3]
    tiles = _tiles_for(shapes, W4A16, costs)
    schemes = [[W4A16] * 3] * 2
    serial = sum(block_serial_time(s, t, costs) for row, trow in zip(shapes, tiles) for s, t in zip(row, trow))
    assert estimate_block_time(shapes, schemes, tiles, costs, hw1) == pytest.approx(serial, rel=1e-15)
    assert all(block_serial_time(s, t, costs) == 0 for s, t in zip(shapes[1], tiles[1]))


def test_estimate_linear_in_costs():
    shapes = [[GemmShape(70, 256, 128)] * 3]
    tiles = _tiles_for(shapes, W8A8, TileCostTable(HW))
    base = TileCostTable(HW)
    measured = {t.key() + (128,): base.cost(t, 128) for t in tiles[0]}
    scaled = TileCostTable(HW, {k: 3 * v for k, v in measured.items()})
    t1 = estimate_block_time(shapes, [[W8A8] * 3], tiles, base, HW)
    t3 = estimate_block_time(shapes, [[W8A8] * 3], tiles, scaled, HW)
    assert t3 == pytest.approx(3 * t1, rel=1e-12)


@given(a=st.integers(0, 2000), b=st.integers(0, 2000), s=st.sampled_from(DEFAULT_SCHEMES))
def test_estimate_monotone_in_tokens(a, b, s):
    lo, hi = sorted((a, b))
    costs = TileCostTable(HW)
    cfg = tile_candidates(s, HW)[0]
    assert block_serial_time(GemmShape(lo, 512, 256), cfg, costs) <= \
        block_serial_time(GemmShape(hi, 512, 256), cfg, costs)


def test_estimate_rejects_mismatched_tiles():
    shapes = [[GemmShape(8, 256, 128)] * 3]
    tiles = _tiles_for(shapes, W8A8, TileCostTable(HW))
    with pytest.raises(ConfigError):
        estimate_block_time(shapes, [[W4A4] * 3], tiles, TileCostTable(HW), HW)


# --- hardware profile -----------------------------------------------------------


def test_profile_json_round_trip(tmp_path):
    p = tmp_path / "hw.json"
    p.write_text(json.dumps(HW.to_dict()))
    assert HardwareProfile.load(p) == HW


def test_profile_validation():
    with pytest.raises(ConfigError):
        HardwareProfile(0, 1.0, 1, {"fp16": 1.0}, 1.0)
    with pytest.raises(ConfigError):
        HardwareProfile(1, 1.0, 1, {"fp16": 2.0, "int8": 1.0}, 1.0)
    with pytest.raises(DataError):
        HardwareProfile.from_dict({"sm_count": 1})


def test_default_profile_documented_values():
    assert HW.sm_count == 128 and HW.peak("int8") == 2 * HW.peak("fp16")
    assert HW.peak("int4") == 4 * HW.peak("fp16")
    assert math.isclose(HW.mem_bw, 1.008e12)
