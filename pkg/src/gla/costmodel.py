"""Closed-form FLOP counts and modeled memory traffic for each GLA form.

Conventions (shared with the counters in :mod:`gla.forms`): one fused
multiply-add is 2 FLOPs, every other elementwise op (including each ``exp``
of a gate difference) is 1 FLOP. Matmul FLOPs are split into

* ``matmul_halfable`` - plain matmuls that could run on half-precision units;
* ``matmul_full`` - matmuls kept at full precision (chunk-state
  accumulation and the diagonal sub-chunk blocks).

Counts are for a single sequence and head unless ``batch`` is given.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

from .forms import DIAG_MATMUL_LIMIT, FORMS, ChunkPlan, PlanError


@dataclass(frozen=True)
class CostReport:
    form: str
    L: int
    d_k: int
    d_v: int
    C: Optional[int]
    c: Optional[int]
    flops_matmul_halfable: int
    flops_matmul_full: int
    flops_elementwise: int
    bytes_state_traffic: int
    bytes_io_total: int
    parallel_work_items: int  # occupancy proxy, not a hardware model

    @property
    def flops_total(self) -> int:
        return self.flops_matmul_halfable + self.flops_matmul_full + self.flops_elementwise

    def as_dict(self) -> dict:
        out = asdict(self)
        out["flops_total"] = self.flops_total
        return out


def _validate(form: str, L: int, d_k: int, d_v: int, plan: Optional[ChunkPlan]) -> None:
    if form not in FORMS:
        raise ValueError(f"unknown form {form!r}")
    if min(L, d_k, d_v) < 1:
        raise ValueError("L, d_k and d_v must be >= 1")
    if form in ("chunkwise", "two_level"):
        if plan is None:
            raise PlanError(f"{form} needs a ChunkPlan")
        plan.check(L)


def state_traffic(form: str, L: int, d_k: int, d_v: int, plan: Optional[ChunkPlan] = None,
                  elem_bytes: int = 4) -> int:
    """Modeled bytes for materialized states (or the score matrix)."""
    if form == "recurrent":
        return L * d_k * d_v * elem_bytes
    if form in ("parallel", "semiring"):
        return L * L * elem_bytes
    if form in ("chunkwise", "two_level"):
        if plan is None:
            raise PlanError(f"{form} needs a ChunkPlan")
        plan.check(L)
        return (L // plan.C) * d_k * d_v * elem_bytes
    raise ValueError(f"unknown form {form!r}")


def _inter_states(L, dk, dv, C):
    N = L // C
    elem = 3 * L * (dk + dv) + 2 * N * (dk + dv) + 3 * N * dk * dv
    return 2 * L * dk * dv, elem  # matmul_full, elementwise


def flops(form: str, L: int, d_k: int, d_v: int, plan: Optional[ChunkPlan] = None,
          batch: int = 1, heads: int = 1, elem_bytes: int = 4) -> CostReport:
    """Exact FLOP counts for ``form`` at the given shape."""
    _validate(form, L, d_k, d_v, plan)
    dk, dv = d_k, d_v
    half = full = 0
    if form == "recurrent":
        elem = L * (dk + dv) + 6 * L * dk * dv
        items = 1
    elif form == "parallel":
        half = 2 * L * L * dk + 2 * L * L * dv
        elem = 4 * L * dk + 4 * L * dv
        items = 1
    elif form == "semiring":
        elem = (L * (L + 1) // 2) * 5 * (dk + dv)
        items = 1
    else:
        C = plan.C
        N = L // C
        full, elem = _inter_states(L, dk, dv, C)
        half = 2 * L * dk * dv  # cross-chunk readout Q S
        elem += 3 * L * (dk + dv)
        items = N
        if form == "chunkwise":
            half += 2 * L * C * (dk + dv)
            elem += L * dk + 3 * L * dv
        else:
            c = plan.c
            n = C // c
            pair = 2 * c * c * (dk + dv)
            half += N * (n * (n - 1) // 2) * pair
            elem += L * (3 * dk + 3 * dv)  # per query sub-chunk scalings
            elem += N * (n * (n - 1) // 2) * c * (3 * dk + 4 * dv)
            if c <= DIAG_MATMUL_LIMIT:
                # masked scaled matmul on each diagonal block at full precision
                full += N * n * 2 * c * c * (dk + dv)
                elem += N * n * c * (dk + 2 * dv)
            else:
                elem += N * n * c * (2 * dk + 3 * dv + 6 * dk * dv)
            elem += L * dv  # cross + intra
    scale = batch * heads
    io = L * (3 * dk + 3 * dv) * elem_bytes
    traffic = state_traffic(form, L, dk, dv, plan, elem_bytes)
    return CostReport(
        form=form, L=L, d_k=dk, d_v=dv,
        C=plan.C if plan is not None and form in ("chunkwise", "two_level") else None,
        c=plan.c if plan is not None and form == "two_level" else None,
        flops_matmul_halfable=scale * half,
        flops_matmul_full=scale * full,
        flops_elementwise=scale * elem,
        bytes_state_traffic=scale * traffic,
        bytes_io_total=scale * (io + traffic),
        parallel_work_items=scale * items,
    )


def intra_score_flops(L: int, d_k: int, d_v: int, C: int) -> int:
    """Matmul FLOPs of the masked intra-chunk products alone (``2 L C (d_k + d_v)``).

    At ``C == L`` this equals the parallel form's matmul count.
    """
    return 2 * L * C * (d_k + d_v)
