"""Multi-head GLA layer, SwiGLU block, parameter presets and serialization."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import BinaryIO, Optional, Union

import numpy as np

from .forms import ChunkPlan, run_form
from .gating import GateConfig, GateSeq, compute_gates
from .numkit import Rng, ShapeError, as_array, layernorm_array, swish_array

MAGIC = b"GLA1"

# array fields in serialization order; optional ones may be None
ARRAY_FIELDS = (
    "w_q", "w_k", "w_v",
    "w_alpha", "w_alpha2", "b_alpha",
    "w_beta", "w_beta2", "b_beta",
    "w_r", "b_r", "w_o",
    "w_1", "w_2", "w_3",
)
GLA_FIELDS = ARRAY_FIELDS[:12]
FFN_FIELDS = ARRAY_FIELDS[12:]


class SerializationError(ValueError):
    pass


@dataclass
class GLAParams:
    """Weights of one GLA block (attention sublayer plus SwiGLU FFN).

    Gate projections are ``w_alpha @ w_alpha2`` when low-rank, or ``w_alpha``
    alone (``w_alpha2 is None``) when full-rank. ``w_beta`` is ``None``
    when the beta gate is disabled.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_alpha: np.ndarray
    w_alpha2: Optional[np.ndarray]
    b_alpha: np.ndarray
    w_beta: Optional[np.ndarray]
    w_beta2: Optional[np.ndarray]
    b_beta: Optional[np.ndarray]
    w_r: np.ndarray
    b_r: np.ndarray
    w_o: np.ndarray
    w_1: Optional[np.ndarray] = None
    w_2: Optional[np.ndarray] = None
    w_3: Optional[np.ndarray] = None
    heads: int = 4
    tau: float = 16.0
    ffn_residual: bool = True

    def __post_init__(self):
        d, dk = self.w_q.shape
        dv = self.w_v.shape[1]
        if self.w_k.shape != (d, dk) or self.w_v.shape[0] != d:
            raise ShapeError("projection shapes disagree")
        if dk % self.heads or dv % self.heads:
            raise ShapeError(f"d_k={dk}, d_v={dv} must be divisible by H={self.heads}")
        if self.w_o.shape != (dv, d) or self.w_r.shape != (d, dv):
            raise ShapeError("output projections must be d_v x d and d x d_v")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1]

    @property
    def rank(self) -> Optional[int]:
        return None if self.w_alpha2 is None else self.w_alpha.shape[1]

    @property
    def use_beta(self) -> bool:
        return self.w_beta is not None

    @property
    def gate_config(self) -> GateConfig:
        return GateConfig(tau=self.tau, rank=self.rank, use_beta=self.use_beta)

    def arrays(self) -> dict[str, np.ndarray]:
        """Present (non-None) weight arrays by field name."""
        out = {}
        for name in ARRAY_FIELDS:
            a = getattr(self, name)
            if a is not None:
                out[name] = a
        return out

    def with_arrays(self, **arrays) -> "GLAParams":
        return replace(self, **arrays)

    def copy(self) -> "GLAParams":
        return replace(self, **{k: v.copy() for k, v in self.arrays().items()})


@dataclass(frozen=True)
class Preset:
    """Parameter-allocation recipe; dimensions derive from the model width."""

    name: str = "default"
    key_ratio: float = 0.5
    value_ratio: float = 1.0
    heads: int = 4
    rank: Optional[int] = 16
    use_beta: bool = False
    ffn_mult: float = 8.0 / 3.0
    tau: float = 16.0

    def derive(self, d: int) -> dict:
        dk = int(round(d * self.key_ratio))
        dv = int(round(d * self.value_ratio))
        return dict(d_k=dk, d_v=dv, heads=self.heads, rank=self.rank,
                    use_beta=self.use_beta, ffn_hidden=ffn_hidden(d, self.ffn_mult))


PRESETS = {
    "default": Preset(),
    "full_rank_gates": Preset(name="full_rank_gates", rank=None),
    "with_beta": Preset(name="with_beta", use_beta=True),
    "single_head": Preset(name="single_head", heads=1),
}


def ffn_hidden(d: int, mult: float = 8.0 / 3.0) -> int:
    """SwiGLU hidden width: ``ceil(mult * d)`` rounded up to a multiple of 8."""
    h = math.ceil(mult * d - 1e-9)
    return 8 * math.ceil(h / 8)


def allocate(d: int, preset: Preset = PRESETS["default"], rng: Optional[Rng] = None,
             ffn_residual: bool = True) -> GLAParams:
    """Randomly initialised parameters, ``N(0, 1/fan_in)`` weights and zero biases."""
    if d % (2 * preset.heads):
        raise ShapeError(f"d={d} must be divisible by 2H={2 * preset.heads}")
    rng = rng or Rng(0)
    dims = preset.derive(d)
    dk, dv, h = dims["d_k"], dims["d_v"], dims["ffn_hidden"]

    def w(fan_in, fan_out):
        return rng.randn(fan_in, fan_out, scale=1.0 / math.sqrt(fan_in))

    w_q, w_k, w_v = w(d, dk), w(d, dk), w(d, dv)
    if preset.rank is None:
        w_alpha, w_alpha2 = w(d, dk), None
    else:
        w_alpha, w_alpha2 = w(d, preset.rank), w(preset.rank, dk)
    b_alpha = np.zeros(dk)
    w_beta = w_beta2 = b_beta = None
    if preset.use_beta:
        if preset.rank is None:
            w_beta = w(d, dv)
        else:
            w_beta, w_beta2 = w(d, preset.rank), w(preset.rank, dv)
        b_beta = np.zeros(dv)
    w_r, b_r, w_o = w(d, dv), np.zeros(dv), w(dv, d)
    w_1, w_2, w_3 = w(d, h), w(d, h), w(h, d)
    return GLAParams(w_q, w_k, w_v, w_alpha, w_alpha2, b_alpha, w_beta, w_beta2, b_beta,
                     w_r, b_r, w_o, w_1, w_2, w_3, heads=preset.heads, tau=preset.tau,
                     ffn_residual=ffn_residual)


def param_counts(p: GLAParams) -> dict[str, int]:
    arrays = p.arrays()
    gla = sum(arrays[n].size for n in GLA_FIELDS if n in arrays)
    gates = sum(arrays[n].size for n in ("w_alpha", "w_alpha2", "b_alpha",
                                         "w_beta", "w_beta2", "b_beta") if n in arrays)
    ffn = sum(arrays[n].size for n in FFN_FIELDS if n in arrays)
    return {"gla": gla, "gates": gates, "ffn": ffn, "total": gla + ffn}


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


def split_heads(x: np.ndarray, H: int) -> np.ndarray:
    *lead, L, d = x.shape
    return np.swapaxes(x.reshape(*lead, L, H, d // H), -2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, H, L, dh = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, L, H * dh)


def layer_gates(x: np.ndarray, p: GLAParams) -> GateSeq:
    alpha = ([p.w_alpha, p.w_alpha2], p.b_alpha)
    beta = ([p.w_beta, p.w_beta2], p.b_beta) if p.use_beta else None
    return compute_gates(x, alpha, beta, p.gate_config, d_v=p.d_v)


def gla_attention(x, p: GLAParams, form: str = "recurrent",
                  plan: Optional[ChunkPlan] = None) -> np.ndarray:
    """Per-head GLA outputs, each layer-normalised, concatenated to ``(..., L, d_v)``."""
    x = as_array(x)
    if x.shape[-1] != p.d:
        raise ShapeError(f"input width {x.shape[-1]} != d={p.d}")
    H = p.heads
    q, k, v = split_heads(x @ p.w_q, H), split_heads(x @ p.w_k, H), split_heads(x @ p.w_v, H)
    g = layer_gates(x, p).heads(H)
    o = run_form(form, q, k, v, g, plan)
    return merge_heads(layernorm_array(o))


def gla_layer_forward(x, p: GLAParams, form: str = "recurrent",
                      plan: Optional[ChunkPlan] = None) -> np.ndarray:
    """``Y = (swish(x W_r + b_r) * concat_h LN(O^h)) W_O``."""
    x = as_array(x)
    o = gla_attention(x, p, form, plan)
    r = swish_array(x @ p.w_r + p.b_r)
    return (r * o) @ p.w_o


def swiglu(z: np.ndarray, w_1, w_2, w_3) -> np.ndarray:
    return (swish_array(z @ w_1) * (z @ w_2)) @ w_3


def gla_block_forward(x, p: GLAParams, form: str = "recurrent",
                      plan: Optional[ChunkPlan] = None) -> np.ndarray:
    """Pre-norm block: attention sublayer with residual, then SwiGLU (with
    residual unless ``p.ffn_residual`` is off)."""
    x = as_array(x)
    y = gla_layer_forward(layernorm_array(x), p, form, plan) + x
    out = swiglu(layernorm_array(y), p.w_1, p.w_2, p.w_3)
    return out + y if p.ffn_residual else out


# --------------------------------------------------------------------------
# serialization: "GLA1" | u32 count | count * (u16 len, name, u32 rows, u32 cols) | f64 data
# --------------------------------------------------------------------------


def _entries(p: GLAParams) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, a in p.arrays().items():
        out.append((name, a.reshape(1, -1) if a.ndim == 1 else a))
    out.append(("config.heads", np.array([[p.heads]], dtype=np.float64)))
    out.append(("config.tau", np.array([[p.tau]])))
    out.append(("config.ffn_residual", np.array([[1.0 if p.ffn_residual else 0.0]])))
    return out


def write_arrays(fh: BinaryIO, entries: list[tuple[str, np.ndarray]]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(entries)))
    for name, a in entries:
        raw = name.encode("utf-8")
        rows, cols = a.shape
        fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<II", rows, cols))
    for _, a in entries:
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_arrays(fh: BinaryIO) -> dict[str, np.ndarray]:
    if fh.read(4) != MAGIC:
        raise SerializationError("not a GLA1 parameter file")
    (count,) = struct.unpack("<I", fh.read(4))
    manifest = []
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        rows, cols = struct.unpack("<II", fh.read(8))
        manifest.append((name, rows, cols))
    out = {}
    for name, rows, cols in manifest:
        buf = fh.read(8 * rows * cols)
        if len(buf) != 8 * rows * cols:
            raise SerializationError(f"truncated data for {name}")
        out[name] = np.frombuffer(buf, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return out


def save_params(p: GLAParams, path: Union[str, Path, BinaryIO]) -> None:
    if hasattr(path, "write"):
        write_arrays(path, _entries(p))
        return
    with open(path, "wb") as fh:
        write_arrays(fh, _entries(p))


def load_params(path: Union[str, Path, BinaryIO, bytes]) -> GLAParams:
    if isinstance(path, bytes):
        arrays = read_arrays(io.BytesIO(path))
    elif hasattr(path, "read"):
        arrays = read_arrays(path)
    else:
        with open(path, "rb") as fh:
            arrays = read_arrays(fh)
    kwargs = {}
    for name in ARRAY_FIELDS:
        a = arrays.get(name)
        if a is not None and name.startswith("b_"):
            a = a.reshape(-1)
        kwargs[name] = a
    missing = [f.name for f in fields(GLAParams)
               if f.name in ("w_q", "w_k", "w_v", "w_alpha", "b_alpha", "w_r", "b_r", "w_o")
               and kwargs.get(f.name) is None]
    if missing:
        raise SerializationError(f"missing arrays: {', '.join(missing)}")
    return GLAParams(**kwargs,
                     heads=int(arrays["config.heads"][0, 0]),
                     tau=float(arrays["config.tau"][0, 0]),
                     ffn_residual=bool(arrays["config.ffn_residual"][0, 0]))
