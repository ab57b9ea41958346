"""Gated linear attention in recurrent, parallel, log-space, chunkwise and
two-level chunked forms, with gradients, a cost model and a CLI."""

from .forms import (ChunkPlan, DecaySpec, PlanError, RangeError, chunkwise_forward,
                    linear_attention_forward, parallel_forward, recurrent_forward,
                    retnet_forward, run_form, semiring_forward, two_level_forward)
from .gating import GateConfig, GateSeq, compute_gates
from .layer import GLAParams, allocate, gla_block_forward, gla_layer_forward

__all__ = [
    "ChunkPlan", "DecaySpec", "PlanError", "RangeError", "chunkwise_forward",
    "linear_attention_forward", "parallel_forward", "recurrent_forward", "retnet_forward",
    "run_form", "semiring_forward", "two_level_forward", "GateConfig", "GateSeq",
    "compute_gates", "GLAParams", "allocate", "gla_block_forward", "gla_layer_forward",
]
