"""Uniform-vs-mixed comparison tables and roofline CSV export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

from .allocator import AllocationPlan, AllocationProblem, objective_eval, uniform_plan
from .cost import HardwareProfile, roofline_curves
from .quant import QuantScheme

ROOFLINE_MS = tuple(2**i for i in range(13))


@dataclass
class ReportRow:
    label: str
    L: float
    T: float
    objective: float
    memory_bytes: float
    fits_budget: bool
    # T of the all-16-bit plan over this row's T
    speedup: float


def scheme_label(s: QuantScheme) -> str:
    label = f"W{s.w_bits}A{s.a_bits}"
    if not s.is_identity and s.w_group > 0:
        label += f"-g{s.w_group}"
    return label


def comparison_rows(problem: AllocationProblem, mixed: AllocationPlan) -> list[ReportRow]:
    """One row per uniform scheme in the set, then the mixed plan."""
    ident = uniform_plan(problem, problem.identity_index)
    t_ref = ident.predicted_T
    budget = problem.budget_bits / 8.0

    def row(label: str, plan: AllocationPlan) -> ReportRow:
        L, T, obj = objective_eval(plan, problem)
        speed = t_ref / T if T > 0 else float("inf")
        return ReportRow(label, L, T, obj, plan.memory_used, plan.memory_used <= budget, speed)

    labels = [scheme_label(s) for s in problem.schemes]
    rows = []
    for k, label in enumerate(labels):
        # keep labels unique when two schemes differ only in symmetry
        if labels.count(label) > 1:
            label = f"{label}-{'sym' if problem.schemes[k].symmetric else 'asym'}"
        rows.append(row(label, uniform_plan(problem, k)))
    rows.append(row("mixed", mixed))
    return rows


def format_table(rows: Sequence[ReportRow]) -> str:
    header = ("plan", "L", "T (us)", "objective", "memory (MiB)", "fits", "speedup")
    body = [(r.label, f"{r.L:.4g}", f"{r.T * 1e6:.3f}", f"{r.objective:.4f}",
             f"{r.memory_bytes / 2**20:.3f}", "yes" if r.fits_budget else "no",
             f"{r.speedup:.3f}") for r in rows]
    widths = [max(len(x[c]) for x in (header, *body)) for c in range(len(header))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(line, widths)).rstrip() for line in (header, *body)]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["plan", "L", "T", "objective", "memory_bytes", "fits_budget", "speedup"])
    for r in rows:
        w.writerow([r.label, repr(r.L), repr(r.T), repr(r.objective), repr(r.memory_bytes),
                    int(r.fits_budget), repr(r.speedup)])
    return buf.getvalue()


def roofline_csv(schemes: Sequence[QuantScheme], hw: HardwareProfile,
                 ms: Sequence[int] = ROOFLINE_MS, n: int = 4096, k: int = 4096) -> str:
    """Roofline GEMM time per scheme over token counts, one column per scheme."""
    rows = roofline_curves(schemes, hw, ms, n, k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [s.name for s in schemes]
    w.writerow(["m", *names])
    for row in rows:
        w.writerow([row["m"], *(repr(row[s]) for s in names)])
    return buf.getvalue()
