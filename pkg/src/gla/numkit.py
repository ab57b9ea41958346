"""Dense real64 helpers shared by every other module.

Everything here is a thin layer over numpy: a tagged 2-D matrix type, a
splitmix64 generator with Box-Muller normals (so seeded fixtures are
reproducible without depending on numpy's generator internals), binary16
rounding for emulating half-precision tensor-core matmuls, and the handful of
nonlinearities used by the layer.

Higher modules mostly pass raw ``np.ndarray`` values around and call
:func:`mm`, which accepts stacked operands and reports FLOPs to an optional
:class:`FlopCounter`.
"""

from __future__ import annotations

import contextlib
import contextvars
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

FP16_MAX = 65504.0

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class ShapeError(ValueError):
    """Operand shapes do not compose."""


class Precision(str, enum.Enum):
    EXACT64 = "exact64"
    EXACT32 = "exact32"
    EMULATED16 = "emulated16"


@dataclass(frozen=True)
class Mat:
    """Immutable 2-D real64 matrix with a precision tag.

    ``data`` is stored read-only; the tag records the last rounding applied
    (``emulated16`` means every element is representable in binary16).
    """

    data: np.ndarray
    precision: Precision = Precision.EXACT64

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"Mat needs a 2-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "precision", Precision(self.precision))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Mat":
        return cls(np.zeros((rows, cols)))

    @classmethod
    def eye(cls, n: int) -> "Mat":
        return cls(np.eye(n))


def as_array(x) -> np.ndarray:
    if isinstance(x, Mat):
        return x.data
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# FLOP instrumentation
# --------------------------------------------------------------------------


@dataclass
class FlopCounter:
    """Accumulates FLOPs by class while active (see :func:`count_flops`).

    Classes used by the forms: ``matmul_halfable`` (plain matmuls eligible
    for half precision), ``matmul_full`` (matmuls kept at full precision by
    policy) and ``elementwise``. One fused multiply-add counts as 2 FLOPs.
    """

    totals: dict[str, int] = field(default_factory=dict)

    def add(self, kind: str, n: int) -> None:
        self.totals[kind] = self.totals.get(kind, 0) + int(n)

    def __getitem__(self, kind: str) -> int:
        return self.totals.get(kind, 0)


_counter: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "gla_flop_counter", default=None
)
_exp_check: contextvars.ContextVar[list | None] = contextvars.ContextVar(
    "gla_exp_check", default=None
)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def tally(kind: str, n: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(kind, n)


@contextlib.contextmanager
def track_exponents():
    """Record the maximum exponent passed to :func:`decay_exp` while active.

    Yields a list that receives one float per call.
    """
    seen: list[float] = []
    token = _exp_check.set(seen)
    try:
        yield seen
    finally:
        _exp_check.reset(token)


def decay_exp(x: np.ndarray) -> np.ndarray:
    """``exp`` for log-gate differences; counted as 1 FLOP per element."""
    seen = _exp_check.get()
    if seen is not None and x.size:
        finite = x[np.isfinite(x)]
        seen.append(float(finite.max()) if finite.size else float("-inf"))
    tally("elementwise", x.size)
    return np.exp(x)


# --------------------------------------------------------------------------
# precision emulation and matmul
# --------------------------------------------------------------------------


def round16_array(x) -> np.ndarray:
    """Round to binary16 (nearest-even), saturating at +-65504, back in real64."""
    arr = np.asarray(x, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        clipped = np.clip(arr, -FP16_MAX, FP16_MAX)
    return clipped.astype(np.float16).astype(np.float64)


def round16(x) -> Mat:
    return Mat(round16_array(as_array(x)), Precision.EMULATED16)


def round32(x) -> Mat:
    return Mat(as_array(x).astype(np.float32).astype(np.float64), Precision.EXACT32)


def mm(a: np.ndarray, b: np.ndarray, mode: str = "exact64",
       kind: str = "matmul_halfable") -> np.ndarray:
    """Stacked matmul ``a @ b`` with optional half-precision input rounding.

    ``mode="mixed16"`` rounds both operands to binary16 and accumulates in
    real64, i.e. tensor-core multiply/accumulate semantics.
    """
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if mode == "mixed16":
        a = round16_array(a)
        b = round16_array(b)
    elif mode != "exact64":
        raise ValueError(f"unknown matmul mode {mode!r}")
    out = np.matmul(a, b)
    tally(kind, 2 * out.size * a.shape[-1])
    return out


def matmul(a, b, mode: str = "exact64") -> Mat:
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul takes 2-D operands")
    return Mat(mm(a, b, mode), Precision.EXACT64)


# --------------------------------------------------------------------------
# nonlinearities
# --------------------------------------------------------------------------


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return expit(np.asarray(x, dtype=np.float64))


def logsigmoid_array(x: np.ndarray) -> np.ndarray:
    # -softplus(-x)
    return -np.logaddexp(0.0, -x)


def swish_array(x: np.ndarray) -> np.ndarray:
    return x * sigmoid_array(x)


def layernorm_array(x: np.ndarray, eps: float = 1e-6, gain=None, bias=None) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    out = xc / np.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def sigmoid(x) -> Mat:
    return Mat(sigmoid_array(as_array(x)))


def logsigmoid(x) -> Mat:
    return Mat(logsigmoid_array(as_array(x)))


def swish(x) -> Mat:
    return Mat(swish_array(as_array(x)))


def layernorm(x, eps: float = 1e-6, gain=None, bias=None) -> Mat:
    x = as_array(x)
    if x.shape[-1] < 1:
        raise ShapeError("layernorm needs at least one column")
    return Mat(layernorm_array(x, eps, gain, bias))


# --------------------------------------------------------------------------
# deterministic PRNG
# --------------------------------------------------------------------------


class Rng:
    """splitmix64 stream with Box-Muller normals.

    The state advances by the golden-ratio increment per 64-bit draw, so a
    block of ``n`` draws is computed in one vectorized step.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & 0xFFFFFFFFFFFFFFFF

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        return z & _MASK64

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def randn(self, *shape: int, scale: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape)) if shape else 1
        return self.normal(size).reshape(shape) * scale


def randn(rng: Rng, rows: int, cols: int, scale: float = 1.0) -> Mat:
    return Mat(rng.randn(rows, cols, scale=scale))


def max_rel_err(a, b, floor: float = 1e-8) -> float:
    """Max elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def rel_errs(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = as_array(a), as_array(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom
