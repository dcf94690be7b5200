"""Uniform quantization primitives: schemes, min-max RTN, Hadamard rotation, GPTQ."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Literal

import numpy as np
import scipy.linalg

from .errors import ConfigError, DataError

Axis = Literal["weight", "activation"]

W_BITS = (2, 3, 4, 8, 16)
A_BITS = (4, 8, 16)
FULL_BITS = 16

_SCHEME_RE = re.compile(
    r"^w(?P<w>\d+)a(?P<a>\d+)"
    r"(?:[_-]g(?P<wg>-?\d+)(?::(?P<ag>-?\d+))?)?"
    r"(?:[_-](?P<sym>sym|asym))?$"
)


@dataclass(frozen=True, order=True)
class QuantScheme:
    """One hardware-supported quantization scheme.

    Group sizes of -1 mean per-channel (weights) or per-token (activations).
    Bit widths of 16 mean the operand is left in half precision.
    """

    w_bits: int
    a_bits: int
    w_group: int = -1
    a_group: int = -1
    symmetric: bool = True
    meta_bits: int = 16

    def __post_init__(self):
        if self.w_bits not in W_BITS:
            raise ConfigError(f"w_bits must be one of {W_BITS}, got {self.w_bits}")
        if self.a_bits not in A_BITS:
            raise ConfigError(f"a_bits must be one of {A_BITS}, got {self.a_bits}")
        for g in (self.w_group, self.a_group):
            if g == 0 or g < -1:
                raise ConfigError(f"group size must be -1 or positive, got {g}")
        if self.meta_bits <= 0:
            raise ConfigError("meta_bits must be positive")

    @property
    def is_identity(self) -> bool:
        return self.w_bits >= FULL_BITS and self.a_bits >= FULL_BITS

    @property
    def weight_only(self) -> bool:
        return self.a_bits >= FULL_BITS

    @property
    def compute_precision(self) -> str:
        """Precision of the multiply units the scheme runs on."""
        if self.a_bits >= FULL_BITS:
            return "fp16"
        return "int8" if self.a_bits == 8 else "int4"

    @property
    def name(self) -> str:
        if self.is_identity:
            return "w16a16"
        if self.weight_only or self.a_group == self.w_group:
            g = str(self.w_group)
        else:
            g = f"{self.w_group}:{self.a_group}"
        return f"w{self.w_bits}a{self.a_bits}_g{g}_{'sym' if self.symmetric else 'asym'}"

    @classmethod
    def parse(cls, text: str) -> "QuantScheme":
        """Parse ``wXaY_gZ_sym|asym`` notation (``gW:A`` for distinct group sizes)."""
        m = _SCHEME_RE.match(text.strip().lower())
        if m is None:
            raise ConfigError(f"cannot parse quantization scheme {text!r}")
        w, a = int(m["w"]), int(m["a"])
        wg = int(m["wg"]) if m["wg"] is not None else -1
        ag = int(m["ag"]) if m["ag"] is not None else wg
        if a >= FULL_BITS:
            ag = -1
        if w >= FULL_BITS and a >= FULL_BITS:
            wg = -1
        sym = m["sym"] != "asym"
        return cls(w, a, wg, ag, sym)

    def __str__(self) -> str:
        return self.name


IDENTITY = QuantScheme(16, 16)

DEFAULT_SCHEMES = (
    QuantScheme(2, 16, 128, -1, False),
    QuantScheme(4, 16, -1, -1, False),
    QuantScheme(8, 8, -1, -1, True),
    QuantScheme(4, 4, -1, -1, True),
    QuantScheme(4, 4, 128, 128, True),
    IDENTITY,
)


def parse_schemes(text: str) -> list[QuantScheme]:
    return [QuantScheme.parse(s) for s in text.split(",") if s.strip()]


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray | None
    scheme: QuantScheme
    axis: Axis
    shape: tuple[int, int]
    group_len: int
    # set by gptq_quantize when it had to fall back to RTN
    fallback: bool = field(default=False)

    @property
    def bits(self) -> int:
        return _axis_params(self.scheme, self.axis)[0]


def _axis_params(scheme: QuantScheme, axis: Axis) -> tuple[int, int]:
    if axis == "weight":
        return scheme.w_bits, scheme.w_group
    if axis == "activation":
        return scheme.a_bits, scheme.a_group
    raise ConfigError(f"unknown axis {axis!r}")


def _as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("input contains non-finite values")
    return arr


def _group_len(cols: int, group: int) -> int:
    if group == -1:
        return cols
    if cols % group:
        raise ConfigError(f"group size {group} does not divide channel length {cols}")
    return group


def code_range(bits: int, symmetric: bool) -> tuple[int, int]:
    if symmetric:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


def _grid(groups: np.ndarray, bits: int, symmetric: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Step size and offset per group (last axis is the group)."""
    if symmetric:
        amax = np.max(np.abs(groups), axis=-1)
        scale = amax / (2 ** (bits - 1) - 1)
        return np.where(scale > 0, scale, 1.0), None
    lo = np.min(groups, axis=-1)
    hi = np.max(groups, axis=-1)
    scale = (hi - lo) / (2**bits - 1)
    return np.where(scale > 0, scale, 1.0), lo


def _encode(values, scale, zero, bits: int, symmetric: bool) -> np.ndarray:
    qmin, qmax = code_range(bits, symmetric)
    shifted = values if zero is None else values - zero
    # np.rint rounds half to even
    return np.clip(np.rint(shifted / scale), qmin, qmax).astype(np.int64)


def quantize_minmax(x, scheme: QuantScheme, axis: Axis = "weight") -> QuantizedTensor:
    """Round-to-nearest min-max quantization, grouped along the last axis.

    Weights are ``out x in`` and grouped along ``in``; activations are
    ``tokens x features`` and grouped per token along ``features``.
    """
    arr = _as_matrix(x)
    bits, group = _axis_params(scheme, axis)
    rows, cols = arr.shape
    glen = _group_len(cols, group)
    groups = arr.reshape(rows, cols // glen, glen)
    scale, zero = _grid(groups, bits, scheme.symmetric)
    codes = _encode(groups, scale[..., None], None if zero is None else zero[..., None],
                    bits, scheme.symmetric)
    return QuantizedTensor(codes.reshape(rows, cols), scale, zero, scheme, axis,
                           (rows, cols), glen)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    rows, cols = q.shape
    codes = q.codes.reshape(rows, cols // q.group_len, q.group_len).astype(np.float64)
    out = codes * q.scales[..., None]
    if q.zeros is not None:
        out = out + q.zeros[..., None]
    return out.reshape(rows, cols)


def fake_quantize(x, scheme: QuantScheme, axis: Axis) -> np.ndarray:
    """Quantize then dequantize; a no-op for 16-bit operands."""
    bits, _ = _axis_params(scheme, axis)
    if bits >= FULL_BITS:
        return np.asarray(x, dtype=np.float64)
    return dequantize(quantize_minmax(x, scheme, axis))


def storage_bits_per_weight(scheme: QuantScheme, channel_len: int | None = None) -> Fraction:
    """Average stored bits per weight element including scales and zero-points."""
    if scheme.w_bits >= FULL_BITS:
        return Fraction(FULL_BITS)
    if scheme.w_group > 0:
        group_len = scheme.w_group
    elif channel_len is not None and channel_len > 0:
        group_len = channel_len
    else:
        raise ConfigError("per-channel scheme needs the channel length")
    meta_count = 1 if scheme.symmetric else 2
    return scheme.w_bits + Fraction(meta_count * scheme.meta_bits, group_len)


def hadamard_matrix(n: int, seed: int | None, block_size: int = 64) -> np.ndarray:
    """Orthonormal ``D @ blockdiag(H / sqrt(b))``; ``seed=None`` gives ``D = I``."""
    if block_size < 1 or block_size & (block_size - 1):
        raise ConfigError(f"Hadamard block size must be a power of two, got {block_size}")
    if n % block_size:
        raise ConfigError(f"dimension {n} is not divisible by Hadamard block size {block_size}")
    h = scipy.linalg.hadamard(block_size).astype(np.float64) / np.sqrt(block_size)
    q = np.kron(np.eye(n // block_size), h)
    if seed is not None:
        signs = np.random.default_rng(seed).choice([-1.0, 1.0], size=n)
        q = signs[:, None] * q
    return q


def hadamard_transform(w, seed: int | None, block_size: int = 64) -> np.ndarray:
    arr = _as_matrix(w)
    return arr @ hadamard_matrix(arr.shape[1], seed, block_size)


def _inverse_hessian_factor(h: np.ndarray) -> np.ndarray:
    """Upper Cholesky factor of H^-1."""
    chol = scipy.linalg.cho_factor(h, lower=True)
    hinv = scipy.linalg.cho_solve(chol, np.eye(h.shape[0]))
    return scipy.linalg.cholesky(hinv, lower=False)


def gptq_quantize(w, calib_inputs, scheme: QuantScheme, damping: float = 1e-2) -> QuantizedTensor:
    """GPTQ: quantize columns in order and push each column's error onto the rest.

    ``calib_inputs`` is ``samples x in``. Group scales are fixed from the
    error-updated weights when a group is entered.
    """
    if damping <= 0:
        raise ConfigError("damping must be positive")
    weight = _as_matrix(w).copy()
    x = _as_matrix(calib_inputs)
    rows, cols = weight.shape
    if x.shape[1] != cols:
        raise DataError(f"calibration inputs have {x.shape[1]} columns, weight expects {cols}")
    glen = _group_len(cols, scheme.w_group)
    bits, sym = scheme.w_bits, scheme.symmetric

    h = x.T @ x
    h[np.diag_indices(cols)] += damping * np.mean(np.diag(h))
    try:
        if not np.all(np.isfinite(h)) or np.mean(np.diag(h)) <= 0:
            raise np.linalg.LinAlgError("degenerate Hessian")
        u = _inverse_hessian_factor(h)
    except (np.linalg.LinAlgError, ValueError):
        warnings.warn("GPTQ Hessian is singular after damping; using RTN", RuntimeWarning)
        q = quantize_minmax(weight, scheme, "weight")
        q.fallback = True
        return q

    n_groups = cols // glen
    codes = np.zeros((rows, cols), dtype=np.int64)
    scales = np.ones((rows, n_groups))
    zeros = None if sym else np.zeros((rows, n_groups))
    for col in range(cols):
        g = col // glen
        if col % glen == 0:
            s, z = _grid(weight[:, col:col + glen], bits, sym)
            scales[:, g] = s
            if zeros is not None:
                zeros[:, g] = z
        z = None if zeros is None else zeros[:, g]
        c = _encode(weight[:, col], scales[:, g], z, bits, sym)
        codes[:, col] = c
        deq = c * scales[:, g] + (0.0 if z is None else z)
        err = (weight[:, col] - deq) / u[col, col]
        weight[:, col + 1:] -= np.outer(err, u[col, col + 1:])
    return QuantizedTensor(codes, scales, zeros, scheme, "weight", (rows, cols), glen)
