"""Command-line driver: generate, calibrate, allocate, schedule, report, roofline."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensorio
from .allocator import AllocationProblem, _plan_from_units, plan_from_dict, plan_to_dict, solve
from .cost import (
    HardwareProfile,
    TileCostTable,
    default_profile,
    derive_gemm_shapes,
    roofline_crossover,
    scale_stats,
)
from .errors import ConfigError, DataError, MxPlanError
from .kernel_plan import build_tasks, fuse_plan, schedule_greedy, schedule_to_dict, simulate_execution
from .moe import (
    ActivationStats,
    GeneratorConfig,
    MoEBlockSpec,
    QuantOptions,
    collect_activation_stats,
    generate_calibration,
    generate_model,
    load_model,
    load_trace,
    save_model,
    save_trace,
)
from .quant import DEFAULT_SCHEMES, parse_schemes
from .report import comparison_rows, format_table, roofline_csv, rows_to_csv
from .schemas import dump_json, load_json
from .sensitivity import SensitivityTable, build_sensitivity_table

log = logging.getLogger("mxplan")

DEFAULT_SCHEME_TEXT = ",".join(s.name for s in DEFAULT_SCHEMES)


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 3), not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _hw(args) -> HardwareProfile:
    return HardwareProfile.load(args.hw) if args.hw else default_profile()


def _costs(args, hw: HardwareProfile) -> TileCostTable:
    if getattr(args, "tile_costs", None):
        return TileCostTable.from_dict(load_json(args.tile_costs, "tile_costs"), hw)
    return TileCostTable(hw, unified=getattr(args, "unified", False))


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_model(args) -> int:
    spec = MoEBlockSpec(args.experts, args.top_k, args.hidden, args.intermediate)
    cfg = GeneratorConfig(outliers=args.outliers)
    model = generate_model(spec, args.seed, cfg)
    out = Path(args.out)
    try:
        save_model(model, out)
        calib = generate_calibration(spec, args.samples, args.seq_len, args.seed + 1, cfg)
        tensorio.save(out / "calib.mxt", calib)
    except OSError as exc:
        raise DataError(f"cannot write model to {out}: {exc}") from exc
    trace = model.route(calib.reshape(-1, spec.hidden))
    save_trace(trace, out)
    stats = collect_activation_stats(trace, spec.num_experts)
    log.info("wrote %d experts to %s (frequency spread %.1fx)", spec.num_experts, out,
             stats.frequency_spread())
    return 0


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    calib_path = Path(args.calib) if args.calib else Path(args.model) / "calib.mxt"
    calib = tensorio.load(calib_path).astype(np.float64)
    if calib.ndim == 2:
        calib = calib[None]
    if calib.ndim != 3 or calib.shape[2] != model.spec.hidden:
        raise DataError(f"calibration tensor has shape {calib.shape}, expected samples x seq x "
                        f"{model.spec.hidden}")
    schemes = parse_schemes(args.schemes)
    opts = QuantOptions(method=args.method, hadamard=not args.no_hadamard, seed=args.seed)
    table = build_sensitivity_table(model, calib, schemes, opts, aggregate=args.aggregate)

    trace_dir = Path(args.trace_dir or args.model)
    if (trace_dir / "trace_experts.mxt").exists():
        trace = load_trace(trace_dir)
    else:
        trace = model.route(calib.reshape(-1, model.spec.hidden))
    stats = collect_activation_stats(trace, model.spec.num_experts)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.save(out / "sensitivity.json")
    dump_json({
        "num_experts": model.spec.num_experts,
        "top_k": model.spec.top_k,
        "hidden": model.spec.hidden,
        "intermediate": model.spec.intermediate,
        "total_tokens": int(stats.total_tokens),
        "tokens_per_expert": [int(c) for c in stats.tokens_per_expert],
    }, out / "stats.json", "stats")
    log.info("sensitivity for %d experts x %d schemes written to %s", model.spec.num_experts,
             len(schemes), out)
    return 0


def _load_problem(args) -> AllocationProblem:
    table = SensitivityTable.load(args.sensitivity)
    data = load_json(args.stats, "stats")
    stats = ActivationStats(np.array(data["tokens_per_expert"], dtype=np.int64),
                            data["total_tokens"], data["top_k"])
    if stats.num_experts != table.num_experts:
        raise DataError("stats and sensitivity table disagree on expert count")
    if args.tokens is not None:
        stats = scale_stats(stats, args.tokens)
    spec = MoEBlockSpec(data["num_experts"], data["top_k"], args.hidden or data["hidden"],
                        args.intermediate or data["intermediate"])
    shapes = derive_gemm_shapes(stats, spec)
    hw = _hw(args)
    params = sum(s.n * s.k for row in shapes for s in row)
    if args.budget_bits <= 0:
        raise ConfigError("--budget-bits must be positive")
    budget = args.budget_bits * params / 8.0
    return AllocationProblem(table, shapes, _costs(args, hw), budget, args.r, hw,
                             granularity=args.granularity)


def cmd_allocate(args) -> int:
    problem = _load_problem(args)
    plan = solve(problem, method=args.method)
    dump_json(plan_to_dict(plan, problem), args.out, "plan")
    print(f"L={plan.predicted_L:.6g} T={plan.predicted_T * 1e6:.3f}us "
          f"objective={plan.objective:.6g} memory={plan.memory_used / 2**20:.3f}MiB "
          f"exact={plan.exact}")
    return 0


def cmd_schedule(args) -> int:
    loaded = plan_from_dict(load_json(args.plan, "plan"))
    hw = _hw(args)
    costs = _costs(args, hw)
    fused = fuse_plan(loaded.tiles, loaded.shapes, hw, costs, slice_k=not args.no_slice_k)
    tasks = build_tasks(loaded.tiles, loaded.shapes, costs, fused)
    sched = schedule_greedy(tasks, hw.sm_count)
    sim = simulate_execution(sched, hw) if args.simulate else None
    extra = {
        "predicted_T": loaded.predicted_T,
        "fused_T": sum(t.cost for t in tasks) / hw.sm_count,
        "unified_warps": fused.unified_warps,
        "unified_smem": fused.unified_smem,
        "num_tasks": len(tasks),
    }
    dump_json(schedule_to_dict(sched, sim, extra), args.out, "schedule")
    line = f"tasks={len(tasks)} makespan={sched.makespan * 1e6:.3f}us " \
           f"predicted_T={loaded.predicted_T * 1e6:.3f}us"
    if sim is not None:
        line += f" simulated={sim.makespan * 1e6:.3f}us mean_util={np.mean(sim.utilization):.3f}"
    print(line)
    return 0


def cmd_report(args) -> int:
    problem = _load_problem(args)
    if args.plan:
        loaded = plan_from_dict(load_json(args.plan, "plan"))
        index = {s: k for k, s in enumerate(problem.schemes)}
        try:
            scheme_of = np.array([[index[s] for s in row] for row in loaded.schemes])
        except KeyError as exc:
            raise DataError(f"plan uses scheme {exc} not in the sensitivity table") from exc
        if problem.granularity == "expert":
            units = scheme_of[:, 0]
        else:
            units = scheme_of.ravel()
        mixed = _plan_from_units([int(k) for k in units], problem, exact=bool(loaded.data.get("exact")))
    else:
        mixed = solve(problem, method=args.method)
    rows = comparison_rows(problem, mixed)
    sys.stdout.write(format_table(rows))
    if args.csv:
        _write(Path(args.csv), rows_to_csv(rows))
    if args.roofline_csv:
        _write(Path(args.roofline_csv), roofline_csv(problem.schemes, problem.hw))
    return 0


def cmd_roofline(args) -> int:
    hw = _hw(args)
    schemes = parse_schemes(args.schemes)
    text = roofline_csv(schemes, hw, n=args.n, k=args.k)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    pairs = [("w4a16_g-1_asym", "w8a8_g-1_sym"), ("w2a16_g128_asym", "w4a4_g-1_sym")]
    by_name = {s.name: s for s in schemes}
    for a, b in pairs:
        if a in by_name and b in by_name:
            m = roofline_crossover(by_name[a], by_name[b], hw, args.n, args.k)
            log.info("crossover %s / %s at m=%s", a, b, "none" if m is None else f"{m:.2f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_hw(p) -> None:
    p.add_argument("--hw", "--profile", dest="hw", help="hardware profile JSON (default: built-in)")
    p.add_argument("--tile-costs", help="measured tile cost table JSON")


def _add_problem(p) -> None:
    p.add_argument("--sensitivity", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--r", type=float, default=0.75)
    p.add_argument("--budget-bits", type=float, default=16.0,
                   help="average stored bits per weight; converted to bytes via parameter count")
    p.add_argument("--granularity", choices=("linear", "expert"), default="linear")
    p.add_argument("--method", choices=("auto", "exact", "scalarized"), default="auto")
    p.add_argument("--tokens", type=int, help="rescale the routed workload to this many tokens")
    p.add_argument("--hidden", type=int, help="override hidden size for cost estimation")
    p.add_argument("--intermediate", type=int, help="override intermediate size")
    p.add_argument("--unified", action="store_true", help="cost tiles as a single unified kernel")
    _add_hw(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mxplan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-model", help="write a synthetic MoE block and calibration set")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--intermediate", type=int, default=256)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--outliers", action="store_true",
                   help="heterogeneous experts, outlier channels and skewed routing")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("calibrate", help="measure per-block sensitivity and routing statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", help="calibration MXT1 tensor (default: <model>/calib.mxt)")
    p.add_argument("--trace-dir", help="directory holding a routing trace (default: the model's)")
    p.add_argument("--schemes", default=DEFAULT_SCHEME_TEXT)
    p.add_argument("--method", choices=("gptq", "rtn"), default="gptq")
    p.add_argument("--no-hadamard", action="store_true")
    p.add_argument("--aggregate", choices=("mean", "sum"), default="mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("allocate", help="choose a scheme and tile per linear block")
    _add_problem(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("schedule", help="fuse micro-kernels and schedule tiles onto SMs")
    p.add_argument("--plan", required=True)
    p.add_argument("--simulate", action="store_true")
    p.add_argument("--no-slice-k", action="store_true")
    p.add_argument("--out", required=True)
    _add_hw(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("report", help="compare uniform schemes with the mixed plan")
    _add_problem(p)
    p.add_argument("--plan", help="mixed plan to report (default: solve again)")
    p.add_argument("--csv")
    p.add_argument("--roofline-csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("roofline", help="roofline GEMM time per scheme as CSV")
    p.add_argument("--schemes", default=DEFAULT_SCHEME_TEXT)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--k", type=int, default=4096)
    p.add_argument("--out")
    _add_hw(p)
    p.set_defaults(func=cmd_roofline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if not 0.0 <= getattr(args, "r", 0.0) <= 1.0:
            raise ConfigError("--r must lie in [0, 1]")
        return args.func(args)
    except MxPlanError as exc:
        print(f"mxplan: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
