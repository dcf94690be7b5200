"""Per-block quantization sensitivity over a calibration set."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .moe import (
    NUM_LINEAR,
    MoEModel,
    QuantOptions,
    _block_calibration,
    _dense_linear,
    block_seed,
    expert_forward,
    quantize_linear,
    silu,
)
from .quant import QuantScheme


def perturbation_delta(block_output_fp, block_output_q) -> float:
    """Frobenius distance between full-precision and perturbed block outputs."""
    a = np.asarray(block_output_fp, dtype=np.float64)
    b = np.asarray(block_output_q, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"output shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(b - a))


@dataclass
class SensitivityTable:
    delta: np.ndarray  # E x N x |S|
    schemes: list[QuantScheme]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.ndim != 3 or self.delta.shape[2] != len(self.schemes):
            raise DataError("delta must be E x N x |S|")
        if not np.all(np.isfinite(self.delta)) or np.any(self.delta < 0):
            raise DataError("sensitivity entries must be finite and non-negative")

    @property
    def num_experts(self) -> int:
        return self.delta.shape[0]

    def to_dict(self) -> dict:
        return {
            "schemes": [s.name for s in self.schemes],
            "delta": self.delta.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SensitivityTable":
        from .schemas import validate

        validate(data, "sensitivity")
        return cls(np.array(data["delta"], dtype=np.float64),
                   [QuantScheme.parse(s) for s in data["schemes"]], data.get("meta", {}))

    def save(self, path: str | Path) -> None:
        from .schemas import dump_json

        dump_json(self.to_dict(), path, "sensitivity")

    @classmethod
    def load(cls, path: str | Path) -> "SensitivityTable":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read sensitivity table {path}: {exc}") from exc
        return cls.from_dict(data)


def build_sensitivity_table(model: MoEModel, calib_set, schemes: Sequence[QuantScheme],
                            opts: QuantOptions | None = None, aggregate: str = "mean",
                            normalize: bool = False, act=silu) -> SensitivityTable:
    """Quantize one block at a time and measure the block-output perturbation.

    ``calib_set`` is ``samples x seq_len x hidden``; each sample contributes one
    Frobenius distance and the per-block value is their mean (or sum). Only the
    quantized expert's rows change, so only those are recomputed.
    """
    opts = opts or QuantOptions()
    if aggregate not in ("mean", "sum"):
        raise ConfigError(f"aggregate must be 'mean' or 'sum', got {aggregate!r}")
    schemes = list(schemes)
    if not any(s.is_identity for s in schemes):
        raise ConfigError("scheme set must include the 16-bit identity scheme")
    calib = np.asarray(calib_set, dtype=np.float64)
    if calib.ndim == 2:
        calib = calib[None]
    if calib.ndim != 3 or calib.shape[0] == 0 or calib.shape[1] == 0:
        raise DataError("calibration set must be a non-empty samples x seq_len x hidden array")
    n_samples, seq_len, _ = calib.shape
    x = calib.reshape(-1, calib.shape[2])
    trace = model.route(x)
    sample_of = np.arange(x.shape[0]) // seq_len
    dense = _dense_linear(model.experts)

    norms = None
    if normalize:
        from .moe import forward_block

        out = forward_block(x, model.experts, trace, act)
        norms = np.sqrt(np.bincount(sample_of, weights=np.sum(out**2, axis=1), minlength=n_samples))
        norms = np.where(norms > 0, norms, 1.0)

    E = model.spec.num_experts
    delta = np.zeros((E, NUM_LINEAR, len(schemes)))
    for e in range(E):
        rows, w = trace.tokens_for(e)
        if rows.size == 0:
            continue
        xe = x[rows]
        y_fp = expert_forward(e, xe, dense, act)
        for j in range(NUM_LINEAR):
            block_calib = _block_calibration(x, model.experts, trace, e, j, act)
            for k, scheme in enumerate(schemes):
                if scheme.is_identity:
                    continue
                q = quantize_linear(model.experts[e].block(j), scheme, opts, block_calib,
                                    block_seed(opts.seed, e, j))

                def linear(ee, jj, inp, q=q, j=j):
                    return q(inp) if jj == j else dense(ee, jj, inp)

                diff = w[:, None] * (expert_forward(e, xe, linear, act) - y_fp)
                per_sample = np.sqrt(np.bincount(sample_of[rows], weights=np.sum(diff**2, axis=1),
                                                 minlength=n_samples))
                if norms is not None:
                    per_sample = per_sample / norms
                total = math.fsum(per_sample.tolist())
                delta[e, j, k] = total / n_samples if aggregate == "mean" else total
    meta = {
        "samples": int(n_samples),
        "seq_len": int(seq_len),
        "seed": int(opts.seed),
        "method": opts.method,
        "hadamard": bool(opts.hadamard),
        "aggregate": aggregate,
        "normalize": bool(normalize),
    }
    return SensitivityTable(delta, schemes, meta)
