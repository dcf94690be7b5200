"""Toy MoE block: synthetic weights, top-k routing, expert forward passes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensorio
from .errors import ConfigError, DataError
from .quant import (
    QuantScheme,
    dequantize,
    fake_quantize,
    gptq_quantize,
    hadamard_matrix,
    quantize_minmax,
)

BLOCK_NAMES = ("gate", "up", "down")
NUM_LINEAR = 3


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class MoEBlockSpec:
    num_experts: int
    top_k: int
    hidden: int
    intermediate: int
    num_linear: int = NUM_LINEAR

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")
        if self.hidden <= 0 or self.intermediate <= 0:
            raise ConfigError("hidden and intermediate sizes must be positive")
        if self.num_linear != NUM_LINEAR:
            raise ConfigError("only gate/up/down experts (3 linear blocks) are supported")


@dataclass
class ExpertWeights:
    gate: np.ndarray  # f x d
    up: np.ndarray  # f x d
    down: np.ndarray  # d x f

    def block(self, j: int) -> np.ndarray:
        return (self.gate, self.up, self.down)[j]


@dataclass
class RoutingTrace:
    experts: np.ndarray  # tokens x top_k, int
    weights: np.ndarray  # tokens x top_k

    @property
    def num_tokens(self) -> int:
        return self.experts.shape[0]

    @property
    def top_k(self) -> int:
        return self.experts.shape[1]

    def tokens_for(self, e: int) -> tuple[np.ndarray, np.ndarray]:
        """Token indices routed to expert ``e`` and their routing weights."""
        rows, slots = np.nonzero(self.experts == e)
        return rows, self.weights[rows, slots]


@dataclass
class ActivationStats:
    tokens_per_expert: np.ndarray
    total_tokens: int
    top_k: int

    def __post_init__(self):
        self.tokens_per_expert = np.asarray(self.tokens_per_expert, dtype=np.int64)
        if np.any(self.tokens_per_expert < 0):
            raise DataError("negative token count")
        if int(self.tokens_per_expert.sum()) != self.total_tokens * self.top_k:
            raise DataError("token counts do not sum to total_tokens * top_k")

    @property
    def num_experts(self) -> int:
        return len(self.tokens_per_expert)

    def frequency_spread(self) -> float:
        counts = self.tokens_per_expert
        return float(counts.max() / max(int(counts.min()), 1))


@dataclass
class MoEModel:
    spec: MoEBlockSpec
    experts: list[ExpertWeights]
    router: np.ndarray  # E x d
    router_bias: np.ndarray  # E
    meta: dict = field(default_factory=dict)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.router.T + self.router_bias

    def route(self, x: np.ndarray) -> RoutingTrace:
        return route_topk(self.logits(x), self.spec.top_k)


def route_topk(logits, top_k: int, seed: int | None = None) -> RoutingTrace:
    """Top-k selection with softmax over the kept logits.

    Ties go to the lower expert id, so routing is deterministic and ``seed``
    is accepted only for interface symmetry.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise DataError("logits must be tokens x experts")
    if not 1 <= top_k <= z.shape[1]:
        raise ConfigError(f"top_k must be in [1, {z.shape[1]}]")
    order = np.argsort(-z, axis=1, kind="stable")[:, :top_k]
    kept = np.take_along_axis(z, order, axis=1)
    w = np.exp(kept - kept.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return RoutingTrace(order.astype(np.int64), w)


def collect_activation_stats(trace: RoutingTrace, num_experts: int) -> ActivationStats:
    if trace.experts.size and (trace.experts.min() < 0 or trace.experts.max() >= num_experts):
        raise DataError("routing trace references an expert id out of range")
    counts = np.bincount(trace.experts.ravel(), minlength=num_experts)
    return ActivationStats(counts, trace.num_tokens, trace.top_k)


# A linear op maps (expert, block, input rows) to output rows.
LinearFn = Callable[[int, int, np.ndarray], np.ndarray]


def _dense_linear(experts: Sequence[ExpertWeights]) -> LinearFn:
    def apply(e: int, j: int, x: np.ndarray) -> np.ndarray:
        return x @ experts[e].block(j).T

    return apply


def expert_forward(e: int, x: np.ndarray, linear: LinearFn, act=silu) -> np.ndarray:
    return linear(e, 2, act(linear(e, 0, x)) * linear(e, 1, x))


def _check_inputs(x, trace: RoutingTrace) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("block input must be tokens x hidden")
    if x.shape[0] != trace.num_tokens:
        raise DataError(f"trace has {trace.num_tokens} tokens, input has {x.shape[0]}")
    return x


def _block_forward(x, num_experts: int, trace: RoutingTrace, linear: LinearFn, act, out_dim: int):
    out = np.zeros((x.shape[0], out_dim))
    for e in range(num_experts):
        rows, w = trace.tokens_for(e)
        if rows.size == 0:
            continue
        out[rows] += w[:, None] * expert_forward(e, x[rows], linear, act)
    return out


def forward_block(x, experts: Sequence[ExpertWeights], trace: RoutingTrace, act=silu) -> np.ndarray:
    """Routing-weighted sum of expert MLP outputs, gathered back to token order."""
    x = _check_inputs(x, trace)
    if trace.experts.size and trace.experts.max() >= len(experts):
        raise DataError("trace references a missing expert")
    if experts and experts[0].gate.shape[1] != x.shape[1]:
        raise DataError("hidden size of input does not match expert weights")
    return _block_forward(x, len(experts), trace, _dense_linear(experts), act,
                          experts[0].down.shape[0])


@dataclass
class QuantOptions:
    """How a linear block is quantized once its scheme is chosen."""

    method: str = "gptq"  # "gptq" or "rtn"
    hadamard: bool = True
    hadamard_block: int = 64
    damping: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("gptq", "rtn"):
            raise ConfigError(f"unknown quantization method {self.method!r}")


@dataclass
class QuantLinear:
    """A linear block with pre-quantized weights and dynamic activation quantization."""

    scheme: QuantScheme
    weight: np.ndarray  # dequantized, in the rotated basis when rotation is set
    rotation: np.ndarray | None = None
    fallback: bool = False

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.rotation is not None:
            x = x @ self.rotation
        x = fake_quantize(x, self.scheme, "activation")
        return x @ self.weight.T


def quantize_linear(w: np.ndarray, scheme: QuantScheme, opts: QuantOptions,
                    calib: np.ndarray | None = None, rotation_seed: int | None = None) -> QuantLinear:
    rotation = None
    if opts.hadamard:
        rotation = hadamard_matrix(w.shape[1], rotation_seed, opts.hadamard_block)
        w = w @ rotation
        if calib is not None:
            calib = calib @ rotation
    if scheme.w_bits >= 16:
        return QuantLinear(scheme, np.array(w, dtype=np.float64), rotation)
    if opts.method == "gptq" and calib is not None and len(calib):
        q = gptq_quantize(w, calib, scheme, opts.damping)
    else:
        q = quantize_minmax(w, scheme, "weight")
    return QuantLinear(scheme, dequantize(q), rotation, q.fallback)


def block_seed(seed: int, e: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, e, j]).generate_state(1)[0])


def _block_calibration(x, experts, trace, e: int, j: int, act) -> np.ndarray:
    rows, _ = trace.tokens_for(e)
    xe = x[rows]
    if j < 2:
        return xe
    ex = experts[e]
    return act(xe @ ex.gate.T) * (xe @ ex.up.T)


def quantize_experts(experts: Sequence[ExpertWeights],
                     assignment: Mapping[tuple[int, int], QuantScheme],
                     opts: QuantOptions | None = None,
                     calib_x: np.ndarray | None = None,
                     calib_trace: RoutingTrace | None = None,
                     act=silu) -> dict[tuple[int, int], QuantLinear]:
    """Pre-quantize every non-identity block named in ``assignment``.

    GPTQ calibration inputs for a block are the tokens its expert receives,
    passed through the full-precision gate/up path for the down projection.
    """
    opts = opts or QuantOptions()
    out = {}
    for (e, j), scheme in assignment.items():
        if scheme.is_identity:
            continue
        calib = None
        if calib_x is not None and calib_trace is not None:
            calib = _block_calibration(np.asarray(calib_x, dtype=np.float64), experts,
                                       calib_trace, e, j, act)
        out[(e, j)] = quantize_linear(experts[e].block(j), scheme, opts, calib,
                                      block_seed(opts.seed, e, j))
    return out


def _quantized_linear(experts, qblocks: Mapping[tuple[int, int], QuantLinear]) -> LinearFn:
    dense = _dense_linear(experts)

    def apply(e: int, j: int, x: np.ndarray) -> np.ndarray:
        q = qblocks.get((e, j))
        return dense(e, j, x) if q is None else q(x)

    return apply


def normalize_assignment(assignment, num_experts: int) -> dict[tuple[int, int], QuantScheme]:
    """Accept a mapping keyed by (expert, block) or an E x 3 nested sequence."""
    if isinstance(assignment, Mapping):
        table = dict(assignment)
    else:
        table = {(e, j): s for e, row in enumerate(assignment) for j, s in enumerate(row)}
    missing = [(e, j) for e in range(num_experts) for j in range(NUM_LINEAR) if (e, j) not in table]
    if missing:
        raise ConfigError(f"assignment is missing blocks {missing[:5]}")
    return table


def forward_block_quantized(x, experts: Sequence[ExpertWeights], trace: RoutingTrace, assignment,
                            opts: QuantOptions | None = None, calib_x=None, calib_trace=None,
                            act=silu, qblocks=None) -> np.ndarray:
    """Like :func:`forward_block` with each block running under its assigned scheme."""
    table = normalize_assignment(assignment, len(experts))
    x = _check_inputs(x, trace)
    if qblocks is None:
        qblocks = quantize_experts(experts, table, opts, calib_x, calib_trace, act)
    return _block_forward(x, len(experts), trace, _quantized_linear(experts, qblocks), act,
                          experts[0].down.shape[0])


# ---------------------------------------------------------------------------
# synthetic model generator and persistence
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    """Knobs for the synthetic model. ``outliers=True`` turns on all heterogeneity."""

    outliers: bool = False
    expert_scale_sigma: float = 0.6
    outlier_channels: int = 2
    outlier_scale: float = 8.0
    router_skew: float = 4.0
    act_outlier_channels: int = 2
    act_outlier_scale: float = 10.0


def generate_model(spec: MoEBlockSpec, seed: int, config: GeneratorConfig | None = None,
                   expert_scales: Sequence[float] | None = None) -> MoEModel:
    """Gaussian experts, optionally with per-expert scales, outlier channels and router skew.

    Weights are rounded to float32 so the in-memory model equals its MXT1 copy.
    """
    cfg = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    E, d, f = spec.num_experts, spec.hidden, spec.intermediate
    if expert_scales is None:
        expert_scales = (np.exp(rng.normal(0.0, cfg.expert_scale_sigma, E)) if cfg.outliers
                         else np.ones(E))
    experts = []
    for e in range(E):
        s = float(expert_scales[e])
        gate = rng.normal(0.0, s / np.sqrt(d), (f, d))
        up = rng.normal(0.0, s / np.sqrt(d), (f, d))
        down = rng.normal(0.0, s / np.sqrt(f), (d, f))
        if cfg.outliers and cfg.outlier_channels and rng.random() < 0.5:
            # heavy input channels make some blocks far more sensitive than others
            j = rng.integers(0, 3)
            w = (gate, up, down)[j]
            cols = rng.choice(w.shape[1], size=min(cfg.outlier_channels, w.shape[1]), replace=False)
            w[:, cols] *= cfg.outlier_scale
        experts.append(ExpertWeights(*(m.astype(np.float32).astype(np.float64)
                                       for m in (gate, up, down))))
    router = rng.normal(0.0, 1.0 / np.sqrt(d), (E, d))
    bias = np.zeros(E)
    if cfg.outliers:
        bias = -np.linspace(0.0, cfg.router_skew, E)
        bias = bias[rng.permutation(E)]
    meta = {"seed": seed, "generator": asdict(cfg)}
    return MoEModel(spec, experts, router.astype(np.float32).astype(np.float64),
                    bias.astype(np.float32).astype(np.float64), meta)


def generate_calibration(spec: MoEBlockSpec, samples: int, seq_len: int, seed: int,
                         config: GeneratorConfig | None = None) -> np.ndarray:
    """Synthetic calibration tokens, ``samples x seq_len x hidden``."""
    cfg = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, (samples, seq_len, spec.hidden))
    if cfg.outliers and cfg.act_outlier_channels:
        cols = rng.choice(spec.hidden, size=min(cfg.act_outlier_channels, spec.hidden), replace=False)
        x[..., cols] *= cfg.act_outlier_scale
    return x.astype(np.float32).astype(np.float64)


def save_model(model: MoEModel, directory: str | Path) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for e, ex in enumerate(model.experts):
        for name in BLOCK_NAMES:
            p = d / f"expert{e:03d}_{name}.mxt"
            tensorio.save(p, getattr(ex, name))
            written.append(p)
    for name, arr in (("router", model.router), ("router_bias", model.router_bias)):
        p = d / f"{name}.mxt"
        tensorio.save(p, arr)
        written.append(p)
    manifest = {"spec": asdict(model.spec), "meta": model.meta}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return written


def load_model(directory: str | Path) -> MoEModel:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        spec = MoEBlockSpec(**manifest["spec"])
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model manifest in {d}: {exc}") from exc
    experts = []
    for e in range(spec.num_experts):
        mats = [tensorio.load(d / f"expert{e:03d}_{n}.mxt").astype(np.float64) for n in BLOCK_NAMES]
        ex = ExpertWeights(*mats)
        if ex.gate.shape != (spec.intermediate, spec.hidden) or ex.down.shape != (spec.hidden, spec.intermediate):
            raise DataError(f"expert {e} weight shapes do not match the manifest")
        experts.append(ex)
    router = tensorio.load(d / "router.mxt").astype(np.float64)
    bias = tensorio.load(d / "router_bias.mxt").astype(np.float64)
    return MoEModel(spec, experts, router, bias, manifest.get("meta", {}))


def save_trace(trace: RoutingTrace, directory: str | Path, prefix: str = "trace") -> None:
    d = Path(directory)
    tensorio.save(d / f"{prefix}_experts.mxt", trace.experts.astype(np.float32))
    tensorio.save(d / f"{prefix}_weights.mxt", trace.weights)


def load_trace(directory: str | Path, prefix: str = "trace") -> RoutingTrace:
    d = Path(directory)
    experts = tensorio.load(d / f"{prefix}_experts.mxt")
    weights = tensorio.load(d / f"{prefix}_weights.mxt").astype(np.float64)
    if experts.shape != weights.shape:
        raise DataError("trace expert and weight tensors differ in shape")
    return RoutingTrace(np.rint(experts).astype(np.int64), weights)
