"""Computational forms of gated linear attention.

Every form computes ``O_t = Q_t S_t`` for the state recurrence
``S_t = (alpha_t^T beta_t) * S_{t-1} + K_t^T V_t``; they differ only in how
the work is arranged:

* ``recurrent_forward`` - step by step; the reference all others are checked
  against.
* ``parallel_forward`` - quadratic masked form with the cumulative gates
  folded into Q, K, V. Overflows for long sequences, so it refuses inputs
  whose cumulative log gates exceed :data:`RANGE_GUARD`.
* ``semiring_forward`` - the same quadratic form with the decay carried
  inside the reduction as ``exp(LA_i - LA_j)``, so every factor is <= 1.
* ``chunkwise_forward`` - sequential recurrence over chunk states plus
  masked matmuls inside each chunk.
* ``two_level_forward`` - chunk states as above, intra-chunk work split into
  sub-chunk pairs whose off-diagonal products may run in emulated half
  precision.

Arrays are ``(..., L, d)``; leading axes (batch, heads) broadcast through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numkit
from .gating import GateSeq
from .numkit import ShapeError, as_array, decay_exp, mm, tally

RANGE_GUARD = 700.0
DIAG_MATMUL_LIMIT = 64

FORMS = ("recurrent", "parallel", "semiring", "chunkwise", "two_level")


class PlanError(ValueError):
    pass


class RangeError(ArithmeticError):
    """Cumulative gates too small for the naive parallel form."""


@dataclass(frozen=True)
class ChunkPlan:
    C: int = 128
    c: int = 16
    precision_policy: str = "exact"

    def __post_init__(self):
        if self.C < 1 or self.c < 1:
            raise PlanError(f"chunk sizes must be >= 1 (C={self.C}, c={self.c})")
        if self.C % self.c:
            raise PlanError(f"c={self.c} must divide C={self.C}")
        if self.precision_policy not in ("exact", "mixed"):
            raise PlanError(f"unknown precision policy {self.precision_policy!r}")

    def check(self, L: int) -> None:
        if L % self.C:
            raise PlanError(f"C must divide L (C={self.C}, L={L})")

    @property
    def matmul_mode(self) -> str:
        return "mixed16" if self.precision_policy == "mixed" else "exact64"


@dataclass(frozen=True)
class DecaySpec:
    gamma: float

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")


def _check_shapes(q, k, v, g: Optional[GateSeq] = None):
    q, k, v = as_array(q), as_array(k), as_array(v)
    if q.shape != k.shape:
        raise ShapeError(f"q {q.shape} and k {k.shape} differ")
    if v.shape[:-1] != q.shape[:-1]:
        raise ShapeError(f"v {v.shape} does not match q {q.shape}")
    if g is not None:
        if g.log_alpha.shape[-2:] != q.shape[-2:] or g.log_beta.shape[-2:] != v.shape[-2:]:
            raise ShapeError(
                f"gates {g.log_alpha.shape}/{g.log_beta.shape} do not match "
                f"q {q.shape} / v {v.shape}")
    return q, k, v


def _T(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# --------------------------------------------------------------------------
# recurrent (reference)
# --------------------------------------------------------------------------


def recurrent_forward(q, k, v, g: GateSeq, keep_states: bool = True):
    """Step-by-step recurrence. Returns ``(o, states)``.

    ``states[..., t, :, :]`` is ``S_{t+1}`` (0-based rows); ``None`` when
    ``keep_states`` is off.
    """
    q, k, v = _check_shapes(q, k, v, g)
    *lead, L, dk = q.shape
    dv = v.shape[-1]
    alpha = decay_exp(g.log_alpha)
    beta = decay_exp(g.log_beta)
    alpha, beta = np.broadcast_to(alpha, (*lead, L, dk)), np.broadcast_to(beta, (*lead, L, dv))
    batch = int(np.prod(lead)) if lead else 1
    S = np.zeros((*lead, dk, dv))
    o = np.empty((*lead, L, dv))
    states = np.empty((*lead, L, dk, dv)) if keep_states else None
    for t in range(L):
        G = alpha[..., t, :, None] * beta[..., t, None, :]
        S = G * S + k[..., t, :, None] * v[..., t, None, :]
        if keep_states:
            states[..., t, :, :] = S
        else:
            o[..., t, :] = np.einsum("...k,...kv->...v", q[..., t, :], S)
    if keep_states:
        o = np.einsum("...tk,...tkv->...tv", q, states)
    # gate outer product, decay, rank-1 update (mul + add), readout (FMA)
    tally("elementwise", batch * L * 6 * dk * dv)
    return o, states


# --------------------------------------------------------------------------
# quadratic forms
# --------------------------------------------------------------------------


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def parallel_forward(q, k, v, g: GateSeq) -> np.ndarray:
    """Masked quadratic form with gates folded into Q, K, V."""
    q, k, v = _check_shapes(q, k, v, g)
    L = q.shape[-2]
    worst = max(float(np.max(-g.LA, initial=0.0)), float(np.max(-g.LB, initial=0.0)))
    if worst > RANGE_GUARD:
        raise RangeError(
            f"cumulative log gate reaches {-worst:.1f} < -{RANGE_GUARD:.0f}; "
            "exp(-LA) would overflow, use semiring_forward instead")
    q_t = q * decay_exp(g.LA)
    k_t = k * decay_exp(-g.LA)
    v_t = v * decay_exp(-g.LB)
    tally("elementwise", q_t.size + k_t.size + v_t.size)
    P = mm(q_t, _T(k_t))
    P = np.where(_causal_mask(L), P, 0.0)
    out = mm(P, v_t)
    b = decay_exp(g.LB)
    tally("elementwise", out.size)
    return out * b


def semiring_forward(q, k, v, g: GateSeq, block: Optional[int] = None) -> np.ndarray:
    """Log-space generalized matmul form; every exponent is a difference
    ``LA_i - LA_j`` with ``i >= j`` and therefore <= 0.

    Query rows are processed in blocks to bound memory at ``O(block * L * d)``.
    """
    q, k, v = _check_shapes(q, k, v, g)
    return _semiring(q, k, v, np.broadcast_to(g.LA, q.shape), np.broadcast_to(g.LB, v.shape),
                     block)


def _semiring(q, k, v, LA, LB, block: Optional[int] = None) -> np.ndarray:
    *lead, L, dk = q.shape
    dv = v.shape[-1]
    if block is None:
        block = max(1, min(L, (1 << 21) // max(1, L * max(dk, dv))))
    out = np.empty((*lead, L, dv))
    for i0 in range(0, L, block):
        i1 = min(L, i0 + block)
        rows = np.arange(i0, i1)[:, None]
        keep = np.arange(i1)[None, :] <= rows  # (b, i1)
        dA = LA[..., i0:i1, None, :] - LA[..., None, :i1, :]
        dA = np.where(keep[..., None], dA, -np.inf)
        eA = decay_exp_uncounted(dA)
        P = np.sum(q[..., i0:i1, None, :] * k[..., None, :i1, :] * eA, axis=-1)
        dB = LB[..., i0:i1, None, :] - LB[..., None, :i1, :]
        dB = np.where(keep[..., None], dB, -np.inf)
        eB = decay_exp_uncounted(dB)
        out[..., i0:i1, :] = np.sum(eB * P[..., None] * v[..., None, :i1, :], axis=-2)
    batch = int(np.prod(lead)) if lead else 1
    # per unmasked (i, j, channel): subtract, exp, two multiplies, add
    tally("elementwise", batch * (L * (L + 1) // 2) * 5 * (dk + dv))
    return out


def decay_exp_uncounted(x: np.ndarray) -> np.ndarray:
    token = numkit._counter.set(None)
    try:
        return decay_exp(x)
    finally:
        numkit._counter.reset(token)


# --------------------------------------------------------------------------
# chunk-level pieces
# --------------------------------------------------------------------------


def _chunked(x: np.ndarray, C: int) -> np.ndarray:
    *lead, L, d = x.shape
    return x.reshape(*lead, L // C, C, d)


def _boundaries(g: GateSeq, C: int, shape_k, shape_v):
    """Cumulative log gates at chunk boundaries ``0, C, 2C, ..., L``."""
    LAp, LBp = g.padded()
    LAp = np.broadcast_to(LAp, (*shape_k[:-2], shape_k[-2] + 1, shape_k[-1]))
    LBp = np.broadcast_to(LBp, (*shape_v[:-2], shape_v[-2] + 1, shape_v[-1]))
    return LAp[..., ::C, :], LBp[..., ::C, :]


def inter_chunk_states(k, v, g: GateSeq, C: int) -> np.ndarray:
    """Chunk-level states ``S_[0..N]`` (shape ``(..., N+1, d_k, d_v)``).

    Each chunk's contribution ``(A' * K)^T (B' * V)`` is formed with one
    batched matmul; only the ``N``-step decay-and-add loop is sequential.
    """
    k, v = as_array(k), as_array(v)
    *lead, L, dk = k.shape
    dv = v.shape[-1]
    N = L // C
    bA, bB = _boundaries(g, C, k.shape, v.shape)
    LA = _chunked(np.broadcast_to(g.LA, k.shape), C)
    LB = _chunked(np.broadcast_to(g.LB, v.shape), C)
    a_end = decay_exp(bA[..., 1:, None, :] - LA)  # decay from each step to chunk end
    b_end = decay_exp(bB[..., 1:, None, :] - LB)
    dA = decay_exp(bA[..., 1:, :] - bA[..., :-1, :])  # whole-chunk decay
    dB = decay_exp(bB[..., 1:, :] - bB[..., :-1, :])
    kk = _chunked(k, C) * a_end
    vv = _chunked(v, C) * b_end
    KV = mm(_T(kk), vv, kind="matmul_full")  # (..., N, dk, dv)
    S = np.zeros((*lead, N + 1, dk, dv))
    for n in range(N):
        S[..., n + 1, :, :] = (dA[..., n, :, None] * dB[..., n, None, :]) * S[..., n, :, :] \
            + KV[..., n, :, :]
    batch = int(np.prod(lead)) if lead else 1
    # subtractions for the exps above, the two scalings, and outer+mul+add per chunk
    tally("elementwise", batch * (L * dk + L * dv + N * dk + N * dv))
    tally("elementwise", batch * (L * dk + L * dv))
    tally("elementwise", batch * N * 3 * dk * dv)
    return S


def chunk_scalings(q, g: GateSeq, C: int, v_shape):
    """``(Q * A_dag, A_dag, B_dag)`` per chunk, where the daggers are decays since chunk start."""
    bA, bB = _boundaries(g, C, q.shape, v_shape)
    LA = _chunked(np.broadcast_to(g.LA, q.shape), C)
    LB = _chunked(np.broadcast_to(g.LB, v_shape), C)
    a_dag = decay_exp(LA - bA[..., :-1, None, :])
    b_dag = decay_exp(LB - bB[..., :-1, None, :])
    qd = _chunked(q, C) * a_dag
    tally("elementwise", a_dag.size + b_dag.size)  # subtractions
    tally("elementwise", qd.size)
    return qd, a_dag, b_dag


def cross_chunk_output(S: np.ndarray, scalings) -> np.ndarray:
    """``((Q * A_dag) S_[n]) * B_dag`` for every chunk, shape ``(..., N, C, d_v)``."""
    qd, _, b_dag = scalings
    cross = mm(qd, S[..., :-1, :, :]) * b_dag
    tally("elementwise", b_dag.size)
    return cross


def chunk_local(k, v, C: int, scalings) -> np.ndarray:
    """Causally masked within-chunk term of the one-level form, shape ``(..., N, C, d_v)``."""
    qd, a_dag, b_dag = scalings
    kd = _chunked(as_array(k), C) / a_dag
    vd = _chunked(as_array(v), C) / b_dag
    P = np.where(_causal_mask(C), mm(qd, _T(kd)), 0.0)
    tally("elementwise", kd.size + 2 * vd.size)  # two divisions, rescale
    return mm(P, vd) * b_dag


def chunk_intra(q, k, v, g: GateSeq, S: np.ndarray, C: int) -> np.ndarray:
    """Output of the one-level chunkwise form, given chunk states."""
    q, k, v = as_array(q), as_array(k), as_array(v)
    scalings = chunk_scalings(q, g, C, v.shape)
    out = cross_chunk_output(S, scalings) + chunk_local(k, v, C, scalings)
    tally("elementwise", out.size)
    return out.reshape(v.shape)


def chunkwise_forward(q, k, v, g: GateSeq, plan: ChunkPlan) -> np.ndarray:
    """One-level chunkwise form (uses ``plan.C`` only)."""
    q, k, v = _check_shapes(q, k, v, g)
    plan.check(q.shape[-2])
    S = inter_chunk_states(k, v, g, plan.C)
    return chunk_intra(q, k, v, g, S, plan.C)


def two_level_local(q, k, v, g: GateSeq, plan: ChunkPlan) -> np.ndarray:
    """Within-chunk term of the two-level form, shape ``(..., N, C, d_v)``.

    For query sub-chunk ``m`` with normalizer ``s`` at its start, key
    sub-chunk ``r < m`` contributes
    ``[(Q_m * e^{LA_m - LA_s}) (K_r * e^{LA_s - LA_r})^T] (V_r * e^{LB_s - LB_r}) * e^{LB_m - LB_s}``
    with every exponent <= 0. These pairs follow the precision policy. The
    diagonal pair is a causally masked scaled matmul at full precision, with
    keys and values divided by the query-side decays so exponents stay <= 0;
    blocks longer than :data:`DIAG_MATMUL_LIMIT` use a local recurrence.
    """
    q, k, v = as_array(q), as_array(k), as_array(v)
    C, c = plan.C, plan.c
    n = C // c
    *lead, L, dk = q.shape
    dv = v.shape[-1]
    N = L // C

    def sub(x):  # (..., L, d) -> (..., N, n, c, d)
        return x.reshape(*lead, N, n, c, x.shape[-1])

    LA = np.broadcast_to(g.LA, q.shape)
    LB = np.broadcast_to(g.LB, v.shape)
    LAp, LBp = g.padded()
    LAp = np.broadcast_to(LAp, (*lead, L + 1, dk))
    LBp = np.broadcast_to(LBp, (*lead, L + 1, dv))
    sA = LAp[..., 0:L:c, :].reshape(*lead, N, n, dk)  # sub-chunk start normalizers
    sB = LBp[..., 0:L:c, :].reshape(*lead, N, n, dv)
    Qs, Ks, Vs, LAs, LBs = sub(q), sub(k), sub(v), sub(LA), sub(LB)
    out = np.empty((*lead, N, n, c, dv))
    mask = _causal_mask(c)
    batch = (int(np.prod(lead)) if lead else 1) * N
    for m in range(n):
        na, nb = sA[..., m, None, :], sB[..., m, None, :]
        aq = decay_exp(LAs[..., m, :, :] - na)
        qm = Qs[..., m, :, :] * aq
        bq = decay_exp(LBs[..., m, :, :] - nb)
        tally("elementwise", batch * (2 * c * dk + c * dv))
        acc = np.zeros((*lead, N, c, dv))
        for r in range(m):
            kr = Ks[..., r, :, :] * decay_exp(na - LAs[..., r, :, :])
            vr = Vs[..., r, :, :] * decay_exp(nb - LBs[..., r, :, :])
            P = mm(qm, _T(kr), plan.matmul_mode)
            acc += mm(P, vr, plan.matmul_mode)
            tally("elementwise", batch * (2 * c * dk + 3 * c * dv))
        if c <= DIAG_MATMUL_LIMIT:
            kd = Ks[..., m, :, :] / aq
            vd = Vs[..., m, :, :] / bq
            P = np.where(mask, mm(qm, _T(kd), kind="matmul_full"), 0.0)
            acc = (acc + mm(P, vd, kind="matmul_full")) * bq
            tally("elementwise", batch * c * (dk + 2 * dv))  # two divisions, add
        else:
            # long diagonal blocks: local recurrence from a zero state
            la = LAs[..., m, :, :] - np.concatenate([na, LAs[..., m, :-1, :]], axis=-2)
            lb = LBs[..., m, :, :] - np.concatenate([nb, LBs[..., m, :-1, :]], axis=-2)
            tally("elementwise", batch * c * (dk + dv))
            local, _ = recurrent_forward(Qs[..., m, :, :], Ks[..., m, :, :], Vs[..., m, :, :],
                                         GateSeq.from_logs(la, lb), keep_states=False)
            acc = acc * bq + local
            tally("elementwise", batch * c * dv)
        tally("elementwise", batch * c * dv)  # the bq rescale
        out[..., m, :, :] = acc
    return out.reshape(*lead, N, C, dv)


def two_level_intra(q, k, v, g: GateSeq, S: np.ndarray, plan: ChunkPlan) -> np.ndarray:
    """Output of the two-level form, given chunk states."""
    q, k, v = as_array(q), as_array(k), as_array(v)
    scalings = chunk_scalings(q, g, plan.C, v.shape)
    o = cross_chunk_output(S, scalings) + two_level_local(q, k, v, g, plan)
    tally("elementwise", o.size)
    return o.reshape(v.shape)


def two_level_forward(q, k, v, g: GateSeq, plan: ChunkPlan) -> np.ndarray:
    q, k, v = _check_shapes(q, k, v, g)
    plan.check(q.shape[-2])
    S = inter_chunk_states(k, v, g, plan.C)
    return two_level_intra(q, k, v, g, S, plan)


def run_form(form: str, q, k, v, g: GateSeq, plan: Optional[ChunkPlan] = None) -> np.ndarray:
    """Dispatch by name; ``plan`` defaults to ``ChunkPlan()``."""
    plan = plan or ChunkPlan()
    if form == "recurrent":
        return recurrent_forward(q, k, v, g, keep_states=False)[0]
    if form == "parallel":
        return parallel_forward(q, k, v, g)
    if form == "semiring":
        return semiring_forward(q, k, v, g)
    if form == "chunkwise":
        return chunkwise_forward(q, k, v, g, plan)
    if form == "two_level":
        return two_level_forward(q, k, v, g, plan)
    raise ValueError(f"unknown form {form!r}; choose from {', '.join(FORMS)}")


# --------------------------------------------------------------------------
# ungated and fixed-decay specializations
# --------------------------------------------------------------------------


def linear_attention_forward(q, k, v, plan: Optional[ChunkPlan] = None,
                             method: Optional[str] = None) -> np.ndarray:
    """Unnormalized linear attention ``O_t = Q_t sum_{i<=t} K_i^T V_i``.

    ``method`` is ``recurrent``, ``parallel`` or ``chunkwise`` (default:
    chunkwise when a plan is given, recurrent otherwise).
    """
    q, k, v = _check_shapes(q, k, v)
    method = method or ("chunkwise" if plan is not None else "recurrent")
    L = q.shape[-2]
    if method == "recurrent":
        S = np.zeros(q.shape[:-2] + (q.shape[-1], v.shape[-1]))
        out = np.empty_like(v)
        for t in range(L):
            S = S + k[..., t, :, None] * v[..., t, None, :]
            out[..., t, :] = np.einsum("...k,...kv->...v", q[..., t, :], S)
        return out
    if method == "parallel":
        return np.where(_causal_mask(L), q @ _T(k), 0.0) @ v
    if method == "chunkwise":
        if plan is None:
            raise PlanError("chunkwise method needs a ChunkPlan")
        plan.check(L)
        C = plan.C
        qc, kc, vc = _chunked(q, C), _chunked(k, C), _chunked(v, C)
        S = np.zeros(q.shape[:-2] + (q.shape[-1], v.shape[-1]))
        out = np.empty_like(vc)
        mask = _causal_mask(C)
        for i in range(L // C):
            qi, ki, vi = qc[..., i, :, :], kc[..., i, :, :], vc[..., i, :, :]
            out[..., i, :, :] = qi @ S + np.where(mask, qi @ _T(ki), 0.0) @ vi
            S = S + _T(ki) @ vi
        return out.reshape(v.shape)
    raise ValueError(f"unknown method {method!r}")


def retnet_forward(q, k, v, decay: DecaySpec, plan: Optional[ChunkPlan] = None,
                   method: Optional[str] = None) -> np.ndarray:
    """Fixed-decay linear attention ``S_t = gamma S_{t-1} + K_t^T V_t``."""
    q, k, v = _check_shapes(q, k, v)
    gamma = decay.gamma
    method = method or ("chunkwise" if plan is not None else "recurrent")
    L = q.shape[-2]
    if method == "recurrent":
        S = np.zeros(q.shape[:-2] + (q.shape[-1], v.shape[-1]))
        out = np.empty_like(v)
        for t in range(L):
            S = gamma * S + k[..., t, :, None] * v[..., t, None, :]
            out[..., t, :] = np.einsum("...k,...kv->...v", q[..., t, :], S)
        return out
    if method == "parallel":
        return (q @ _T(k) * _decay_mask(L, gamma)) @ v
    if method == "chunkwise":
        if plan is None:
            raise PlanError("chunkwise method needs a ChunkPlan")
        plan.check(L)
        C = plan.C
        qc, kc, vc = _chunked(q, C), _chunked(k, C), _chunked(v, C)
        j = np.arange(1, C + 1, dtype=np.float64)
        to_end = (gamma ** (C - j))[:, None]  # decay from step j to chunk end
        from_start = (gamma ** j)[:, None]  # decay from chunk start to step j
        D = _decay_mask(C, gamma)
        S = np.zeros(q.shape[:-2] + (q.shape[-1], v.shape[-1]))
        out = np.empty_like(vc)
        for i in range(L // C):
            qi, ki, vi = qc[..., i, :, :], kc[..., i, :, :], vc[..., i, :, :]
            out[..., i, :, :] = (qi @ S) * from_start + (qi @ _T(ki) * D) @ vi
            S = gamma**C * S + _T(ki) @ (vi * to_end)
        return out.reshape(v.shape)
    raise ValueError(f"unknown method {method!r}")


def _decay_mask(n: int, gamma: float) -> np.ndarray:
    idx = np.arange(n)
    diff = idx[:, None] - idx[None, :]
    return np.where(diff >= 0, gamma ** np.maximum(diff, 0).astype(np.float64), 0.0)


# --------------------------------------------------------------------------
# rescaling identities the chunked forms rely on
# --------------------------------------------------------------------------


def _scaled_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(a)))))


def rescaling_identity_errors(rng: numkit.Rng, m: int = 5, n: int = 7, k: int = 4) -> dict:
    """Residuals of four rescaling identities on random operands.

    * ``inner``: ``<x, y*z> == <x, z*y>``
    * ``move_scale``: ``A B^T == (A*c)(B/c)^T``
    * ``scale_columns``: ``(A B)*c == A (B*c)``
    * ``outer_gate``: ``x((y^T z)*A) == ((x*y) A)*z``

    Residuals are ``max|lhs - rhs| / max(1, max|lhs|)``. Scale vectors are
    ``exp(U(-1, 1))`` so divisions stay well conditioned.
    """
    def scale(size):
        return np.exp(rng.uniform(size) * 2.0 - 1.0)

    x, y, z = rng.randn(n), rng.randn(n), rng.randn(n)
    out = {"inner": _scaled_gap(np.array([x @ (y * z)]), np.array([x @ (z * y)]))}
    A, B, c = rng.randn(m, n), rng.randn(k, n), scale(n)
    out["move_scale"] = _scaled_gap(A @ B.T, (A * c) @ (B / c).T)
    A, B, c = rng.randn(m, n), rng.randn(n, k), scale(k)
    out["scale_columns"] = _scaled_gap((A @ B) * c, A @ (B * c))
    x, y, z, A = rng.randn(1, m), rng.randn(1, m), rng.randn(1, n), rng.randn(m, n)
    out["outer_gate"] = _scaled_gap(x @ ((y.T @ z) * A), ((x * y) @ A) * z)
    return out
