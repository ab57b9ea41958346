"""Data-dependent forget gates kept in log space.

Gates are ``log alpha = logsigmoid(x W_alpha + b_alpha) / tau`` (and the same
for beta), optionally with a low-rank ``W_alpha = W1 @ W2``. Cumulative sums
``LA``/``LB`` of the log gates are what every non-recurrent form consumes;
``exp`` is only ever applied to differences of them.

All arrays may carry leading batch dimensions; time is axis ``-2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numkit import Mat, ShapeError, as_array, logsigmoid_array


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GateConfig:
    tau: float = 16.0
    rank: Optional[int] = 16
    use_beta: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.rank is not None and self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")


@dataclass(frozen=True)
class GateSeq:
    log_alpha: np.ndarray  # (..., L, d_k)
    log_beta: np.ndarray  # (..., L, d_v)
    LA: np.ndarray
    LB: np.ndarray

    @classmethod
    def from_logs(cls, log_alpha, log_beta) -> "GateSeq":
        la = as_array(log_alpha)
        lb = as_array(log_beta)
        if la.shape[:-1] != lb.shape[:-1]:
            raise ShapeError(f"gate lengths differ: {la.shape} vs {lb.shape}")
        return cls(la, lb, np.cumsum(la, axis=-2), np.cumsum(lb, axis=-2))

    @classmethod
    def identity(cls, L: int, d_k: int, d_v: int) -> "GateSeq":
        """Fully open gates (plain linear attention)."""
        return cls.from_logs(np.zeros((L, d_k)), np.zeros((L, d_v)))

    @classmethod
    def constant(cls, L: int, d_k: int, d_v: int, gamma: float) -> "GateSeq":
        """alpha == gamma everywhere, beta == 1 (fixed-decay specialization)."""
        return cls.from_logs(np.full((L, d_k), np.log(gamma)), np.zeros((L, d_v)))

    @property
    def length(self) -> int:
        return self.log_alpha.shape[-2]

    @property
    def d_k(self) -> int:
        return self.log_alpha.shape[-1]

    @property
    def d_v(self) -> int:
        return self.log_beta.shape[-1]

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """``LA``/``LB`` with a leading zero row, so row ``t`` is the prefix up to step ``t``."""
        pad = [(0, 0)] * (self.LA.ndim - 2) + [(1, 0), (0, 0)]
        return np.pad(self.LA, pad), np.pad(self.LB, pad)

    def heads(self, H: int) -> "GateSeq":
        """Split the channel axes into ``H`` heads: (..., L, d) -> (..., H, L, d/H)."""
        return GateSeq(*(_split_heads(a, H) for a in
                         (self.log_alpha, self.log_beta, self.LA, self.LB)))


def _split_heads(a: np.ndarray, H: int) -> np.ndarray:
    *lead, L, d = a.shape
    if d % H:
        raise ShapeError(f"width {d} not divisible by {H} heads")
    return np.swapaxes(a.reshape(*lead, L, H, d // H), -2, -3)


def gate_logits(x: np.ndarray, weights: Sequence[np.ndarray], bias: np.ndarray) -> np.ndarray:
    """``x W + b`` with ``W`` given as a product of one or two factors."""
    z = x
    for w in weights:
        if w is None:
            continue
        if z.shape[-1] != w.shape[0]:
            raise ShapeError(f"gate projection {w.shape} does not fit input width {z.shape[-1]}")
        z = z @ w
    return z + bias


def compute_gates(x, w_alpha_params, w_beta_params, cfg: GateConfig,
                  d_v: Optional[int] = None) -> GateSeq:
    """Gate sequence for input ``x`` of shape ``(..., L, d)``.

    ``w_alpha_params`` is ``(weights, bias)`` with ``weights`` either ``[W]``
    or the low-rank pair ``[W1, W2]``; ``w_beta_params`` has the same layout.
    With ``cfg.use_beta`` off the beta projection is ignored and log beta is
    stored as exact zeros of width ``d_v``.
    """
    if not isinstance(cfg, GateConfig):
        raise ConfigError("cfg must be a GateConfig")
    x = as_array(x)
    weights, bias = w_alpha_params
    log_alpha = logsigmoid_array(gate_logits(x, weights, as_array(bias))) / cfg.tau
    if cfg.use_beta:
        if w_beta_params is None:
            raise ConfigError("use_beta=True needs beta projection weights")
        bw, bb = w_beta_params
        log_beta = logsigmoid_array(gate_logits(x, bw, as_array(bb))) / cfg.tau
    else:
        if d_v is None:
            if w_beta_params is None:
                raise ConfigError("d_v is required when beta is disabled")
            d_v = as_array(w_beta_params[1]).shape[-1]
        log_beta = np.zeros(x.shape[:-1] + (int(d_v),))
    return GateSeq.from_logs(log_alpha, log_beta)


def gate_matrix(g: GateSeq, t: int) -> Mat:
    """``G_t = alpha_t^T beta_t`` for 1-based step ``t``."""
    if not 1 <= t <= g.length:
        raise IndexError(f"t={t} outside 1..{g.length}")
    a = np.exp(g.log_alpha[..., t - 1, :])
    b = np.exp(g.log_beta[..., t - 1, :])
    return Mat(np.outer(a, b))


def segment_decay(g: GateSeq, i: int, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Decay vectors ``(A_t / A_i, B_t / B_i)`` accumulated over steps ``i+1..t``."""
    if not 0 <= i <= t <= g.length:
        raise IndexError(f"need 0 <= i <= t <= {g.length}, got i={i}, t={t}")
    LA, LB = g.padded()
    return np.exp(LA[t] - LA[i]), np.exp(LB[t] - LB[i])
