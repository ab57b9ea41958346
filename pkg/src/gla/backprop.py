"""Reverse-mode gradients for GLA, a finite-difference checker, and a toy trainer.

The backward pass works on the recurrent form with every ``S_t`` kept from
the forward pass. Each ``*_fwd`` helper returns ``(output, cache)`` and has
a matching ``*_bwd(d_output, cache)``.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .forms import recurrent_forward
from .gating import GateSeq
from .layer import GLAParams, Preset, allocate, merge_heads, split_heads
from .numkit import Rng, ShapeError, as_array, logsigmoid_array, sigmoid_array

LN_EPS = 1e-6


class StateError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class GradBundle:
    """Gradients keyed like :meth:`GLAParams.arrays`, plus the input gradient."""

    params: dict[str, np.ndarray]
    dx: Optional[np.ndarray] = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def all_finite(self) -> bool:
        arrays = list(self.params.values()) + ([self.dx] if self.dx is not None else [])
        return all(np.all(np.isfinite(a)) for a in arrays)


# --------------------------------------------------------------------------
# recurrence
# --------------------------------------------------------------------------


def backward_recurrent(q, k, v, g: GateSeq, states, dO):
    """Gradients of the recurrent form w.r.t. ``q, k, v, log_alpha, log_beta``.

    ``states`` must be the ``S_t`` stack returned by ``recurrent_forward``.
    """
    if states is None:
        raise StateError("backward_recurrent needs the materialized states S_t")
    q, k, v, dO = as_array(q), as_array(k), as_array(v), as_array(dO)
    L = q.shape[-2]
    if states.shape[-3] != L:
        raise StateError(f"states cover {states.shape[-3]} steps, expected {L}")
    alpha = np.broadcast_to(np.exp(g.log_alpha), q.shape)
    beta = np.broadcast_to(np.exp(g.log_beta), v.shape)
    # adjoint carry dS_t = G_{t+1} * dS_{t+1} + q_t^T dO_t; the rest is vectorized
    adj = np.empty_like(states)
    dS = np.zeros(states.shape[:-3] + states.shape[-2:])
    for t in range(L - 1, -1, -1):
        if t < L - 1:
            dS = alpha[..., t + 1, :, None] * beta[..., t + 1, None, :] * dS
        dS = dS + q[..., t, :, None] * dO[..., t, None, :]
        adj[..., t, :, :] = dS
    dq = np.einsum("...tv,...tkv->...tk", dO, states)
    dk = np.einsum("...tkv,...tv->...tk", adj, v)
    dv = np.einsum("...tk,...tkv->...tv", k, adj)
    dG = np.zeros_like(adj)
    dG[..., 1:, :, :] = adj[..., 1:, :, :] * states[..., :-1, :, :]
    da = np.einsum("...tkv,...tv->...tk", dG, beta)
    db = np.einsum("...tk,...tkv->...tv", alpha, dG)
    return dq, dk, dv, da * alpha, db * beta


# --------------------------------------------------------------------------
# elementary pieces
# --------------------------------------------------------------------------


def _wgrad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _bgrad(dy: np.ndarray) -> np.ndarray:
    return dy.reshape(-1, dy.shape[-1]).sum(axis=0)


def layernorm_fwd(x: np.ndarray, eps: float = LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv
    return y, (y, inv)


def layernorm_bwd(dy: np.ndarray, cache) -> np.ndarray:
    y, inv = cache
    return inv * (dy - dy.mean(axis=-1, keepdims=True)
                  - y * (dy * y).mean(axis=-1, keepdims=True))


def swish_fwd(x: np.ndarray):
    s = sigmoid_array(x)
    return x * s, (x, s)


def swish_bwd(dy: np.ndarray, cache) -> np.ndarray:
    x, s = cache
    return dy * (s + x * s * (1.0 - s))


def _gate_fwd(x, weights, bias, tau):
    hidden = []
    z = x
    for w in weights:
        if w is None:
            continue
        hidden.append(z)
        z = z @ w
    z = z + bias
    return logsigmoid_array(z) / tau, (hidden, [w for w in weights if w is not None], z, tau)


def _gate_bwd(dlog, cache):
    hidden, weights, z, tau = cache
    dz = dlog / tau * sigmoid_array(-z)
    grads = [None] * len(weights)
    db = _bgrad(dz)
    d = dz
    for i in range(len(weights) - 1, -1, -1):
        grads[i] = _wgrad(hidden[i], d)
        d = d @ weights[i].T
    return d, grads, db


# --------------------------------------------------------------------------
# GLA layer and block
# --------------------------------------------------------------------------


def gla_layer_fwd(x: np.ndarray, p: GLAParams):
    """Recurrent-form layer forward returning ``(y, cache)``."""
    x = as_array(x)
    if x.shape[-1] != p.d:
        raise ShapeError(f"input width {x.shape[-1]} != d={p.d}")
    H = p.heads
    q, k, v = split_heads(x @ p.w_q, H), split_heads(x @ p.w_k, H), split_heads(x @ p.w_v, H)
    log_alpha, ga = _gate_fwd(x, [p.w_alpha, p.w_alpha2], p.b_alpha, p.tau)
    gb = None
    if p.use_beta:
        log_beta, gb = _gate_fwd(x, [p.w_beta, p.w_beta2], p.b_beta, p.tau)
    else:
        log_beta = np.zeros(x.shape[:-1] + (p.d_v,))
    g = GateSeq.from_logs(log_alpha, log_beta).heads(H)
    o, states = recurrent_forward(q, k, v, g)
    on, ln_cache = layernorm_fwd(o)
    om = merge_heads(on)
    r, sw_cache = swish_fwd(x @ p.w_r + p.b_r)
    ro = r * om
    y = ro @ p.w_o
    cache = dict(x=x, q=q, k=k, v=v, g=g, states=states, ln=ln_cache, om=om, r=r,
                 sw=sw_cache, ro=ro, ga=ga, gb=gb, p=p)
    return y, cache


def gla_layer_bwd(dy: np.ndarray, cache) -> GradBundle:
    p: GLAParams = cache["p"]
    x = cache["x"]
    H = p.heads
    grads = {"w_o": _wgrad(cache["ro"], dy)}
    dro = dy @ p.w_o.T
    dr = dro * cache["om"]
    dom = dro * cache["r"]
    dr_pre = swish_bwd(dr, cache["sw"])
    grads["w_r"] = _wgrad(x, dr_pre)
    grads["b_r"] = _bgrad(dr_pre)
    dx = dr_pre @ p.w_r.T
    do = layernorm_bwd(split_heads(dom, H), cache["ln"])
    dq, dk, dv, dla, dlb = backward_recurrent(cache["q"], cache["k"], cache["v"], cache["g"],
                                              cache["states"], do)
    for name, dh, w in (("w_q", dq, p.w_q), ("w_k", dk, p.w_k), ("w_v", dv, p.w_v)):
        dm = merge_heads(dh)
        grads[name] = _wgrad(x, dm)
        dx = dx + dm @ w.T
    dxa, wgrads, dba = _gate_bwd(merge_heads(dla), cache["ga"])
    dx = dx + dxa
    grads["w_alpha"] = wgrads[0]
    if p.w_alpha2 is not None:
        grads["w_alpha2"] = wgrads[1]
    grads["b_alpha"] = dba
    if p.use_beta:
        dxb, wgrads, dbb = _gate_bwd(merge_heads(dlb), cache["gb"])
        dx = dx + dxb
        grads["w_beta"] = wgrads[0]
        if p.w_beta2 is not None:
            grads["w_beta2"] = wgrads[1]
        grads["b_beta"] = dbb
    return GradBundle(grads, dx)


def gla_block_fwd(x: np.ndarray, p: GLAParams):
    x = as_array(x)
    xn, ln1 = layernorm_fwd(x)
    a, layer_cache = gla_layer_fwd(xn, p)
    y = a + x
    yn, ln2 = layernorm_fwd(y)
    h1 = yn @ p.w_1
    s, sw = swish_fwd(h1)
    h2 = yn @ p.w_2
    hid = s * h2
    out = hid @ p.w_3
    if p.ffn_residual:
        out = out + y
    return out, dict(ln1=ln1, layer=layer_cache, ln2=ln2, yn=yn, s=s, sw=sw, h2=h2,
                     hid=hid, p=p)


def gla_block_bwd(dout: np.ndarray, cache) -> GradBundle:
    p: GLAParams = cache["p"]
    yn = cache["yn"]
    dhid = dout @ p.w_3.T
    w3 = _wgrad(cache["hid"], dout)
    ds = dhid * cache["h2"]
    dh2 = dhid * cache["s"]
    dh1 = swish_bwd(ds, cache["sw"])
    w1, w2 = _wgrad(yn, dh1), _wgrad(yn, dh2)
    dyn = dh1 @ p.w_1.T + dh2 @ p.w_2.T
    dy = layernorm_bwd(dyn, cache["ln2"])
    if p.ffn_residual:
        dy = dy + dout
    inner = gla_layer_bwd(dy, cache["layer"])
    dx = layernorm_bwd(inner.dx, cache["ln1"]) + dy
    grads = dict(inner.params, w_1=w1, w_2=w2, w_3=w3)
    return GradBundle(grads, dx)


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


def grad_check(fn: Callable[[np.ndarray], float], p0, analytic, h: float = 1e-6,
               n_coords: Optional[int] = None, rng: Optional[Rng] = None,
               floor: float = 1e-8) -> float:
    """Max relative error between ``analytic`` and central differences of ``fn`` at ``p0``.

    Checks every coordinate, or a random subset of ``n_coords`` (at least 64)
    when given. ``fn`` receives a perturbed copy of ``p0``.
    """
    p0 = np.array(as_array(p0), dtype=np.float64)
    analytic = as_array(analytic)
    if analytic.shape != p0.shape:
        raise ShapeError(f"analytic gradient {analytic.shape} vs parameter {p0.shape}")
    flat = p0.reshape(-1)
    idx = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        rng = rng or Rng(0)
        n = max(64, n_coords)
        idx = np.unique(rng.integers(4 * n, flat.size))[:n] if n < flat.size else idx
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(p0)
        flat[i] = orig - h
        fm = fn(p0)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite objective at coordinate {i}")
        num = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def layer_grad_errors(p: GLAParams, x: np.ndarray, h: float = 1e-6, seed: int = 0,
                      block: bool = False) -> dict[str, float]:
    """Gradient-check every parameter (and the input) of a layer or block.

    The objective is ``sum(w * f(x))`` with fixed random weights ``w`` so no
    gradient vanishes by symmetry.
    """
    rng = Rng(seed + 1)
    fwd, bwd = (gla_block_fwd, gla_block_bwd) if block else (gla_layer_fwd, gla_layer_bwd)
    y, cache = fwd(x, p)
    w = rng.randn(*y.shape)
    grads = bwd(w, cache)
    errors = {}
    for name, arr in p.arrays().items():
        if name not in grads.params:
            continue
        def f(val, name=name):
            return float(np.sum(w * fwd(x, p.with_arrays(**{name: val}))[0]))
        errors[name] = grad_check(f, arr, grads[name], h=h)
    errors["x"] = grad_check(lambda val: float(np.sum(w * fwd(val, p)[0])), x, grads.dx, h=h)
    return errors


# --------------------------------------------------------------------------
# toy language model and trainer
# --------------------------------------------------------------------------


class Task(str, enum.Enum):
    MEMORIZE = "memorize_batch"
    COPY = "copy"


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


class ConfigError(ValueError):
    pass


DEFAULT_LR = {Optimizer.SGD: 0.5, Optimizer.ADAM: 3e-3}


@dataclass
class TrainConfig:
    """Toy-trainer settings. ``lr=None`` picks the optimizer's default.

    ``stop_accuracy`` ends training after the first step whose batch
    accuracy reaches it.
    """

    steps: int = 2000
    lr: Optional[float] = None
    seed: int = 0
    task: Task = Task.MEMORIZE
    optimizer: Optimizer = Optimizer.SGD
    batch: int = 8
    length: int = 64
    d: int = 64
    heads: int = 4
    vocab: int = 32
    blocks: int = 2
    positional: bool = True
    stop_accuracy: Optional[float] = None

    def __post_init__(self):
        try:
            self.task = Task(self.task)
            self.optimizer = Optimizer(self.optimizer)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.lr is None:
            self.lr = DEFAULT_LR[self.optimizer]
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError("lr must be a finite number >= 0")
        if min(self.batch, self.length, self.d, self.heads, self.vocab, self.blocks) < 1:
            raise ConfigError("sizes must be >= 1")
        if self.d % (2 * self.heads):
            raise ConfigError("d must be divisible by 2 * heads")
        if self.task is Task.COPY and (self.length < 3 or self.vocab < 2):
            raise ConfigError("copy task needs length >= 3 and vocab >= 2")


@dataclass
class ToyModel:
    embed: np.ndarray  # vocab x d, also the output projection
    blocks: list[GLAParams]
    pos: Optional[np.ndarray] = None  # length x d

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed}
        if self.pos is not None:
            out["pos"] = self.pos
        for i, b in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in b.arrays().items()})
        return out


def build_model(cfg: TrainConfig) -> ToyModel:
    rng = Rng(cfg.seed)
    preset = Preset(name="toy", heads=cfg.heads, rank=16)
    blocks = [allocate(cfg.d, preset, rng) for _ in range(cfg.blocks)]
    embed = rng.randn(cfg.vocab, cfg.d, scale=1.0 / math.sqrt(cfg.d))
    pos = rng.randn(cfg.length, cfg.d, scale=1.0 / math.sqrt(cfg.d)) if cfg.positional else None
    return ToyModel(embed, blocks, pos)


def model_loss(model: ToyModel, tokens: np.ndarray, targets: np.ndarray,
               weights: np.ndarray, backward: bool = True):
    """Mean weighted cross-entropy, token accuracy, and gradients (by array name)."""
    h = model.embed[tokens]
    if model.pos is not None:
        h = h + model.pos[: tokens.shape[-1]]
    caches = []
    for p in model.blocks:
        h, c = gla_block_fwd(h, p)
        caches.append(c)
    hn, ln_cache = layernorm_fwd(h)
    logits = hn @ model.embed.T
    logits = logits - logits.max(axis=-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    total = weights.sum()
    loss = float(-(picked * weights).sum() / total)
    correct = (logits.argmax(axis=-1) == targets)
    acc = float((correct * weights).sum() / total)
    if not backward:
        return loss, acc, None
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None],
                      np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= (weights / total)[..., None]
    grads = {"embed": _wgrad(dlogits, hn)}
    dh = layernorm_bwd(dlogits @ model.embed, ln_cache)
    for i in range(len(model.blocks) - 1, -1, -1):
        gb = gla_block_bwd(dh, caches[i])
        grads.update({f"block{i}.{k}": v for k, v in gb.params.items()})
        dh = gb.dx
    if model.pos is not None:
        grads["pos"] = np.zeros_like(model.pos)
        grads["pos"][: tokens.shape[-1]] = dh.sum(axis=0)
    np.add.at(grads["embed"], tokens.reshape(-1), dh.reshape(-1, dh.shape[-1]))
    return loss, acc, grads


def make_batch(cfg: TrainConfig, rng: Rng):
    """``(inputs, targets, weights)`` for the configured task."""
    B, L, V = cfg.batch, cfg.length, cfg.vocab
    if cfg.task is Task.MEMORIZE:
        seq = rng.integers(B * (L + 1), V).reshape(B, L + 1)
        return seq[:, :-1], seq[:, 1:], np.ones((B, L))
    # [prompt, separator, prompt]; separator is the last vocabulary id
    P = L // 2
    prompt = rng.integers(B * P, V - 1).reshape(B, P)
    sep = np.full((B, 1), V - 1)
    seq = np.concatenate([prompt, sep, prompt], axis=1)[:, : L + 1]
    weights = np.zeros((B, L))
    weights[:, P:] = 1.0  # predictions of the second prompt copy
    return seq[:, :-1], seq[:, 1:], weights


@dataclass
class _Adam:
    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    s: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.b1 + (1.0 - self.b1) * g
            s = self.s.get(name, 0.0) * self.b2 + (1.0 - self.b2) * g * g
            self.m[name], self.s[name] = m, s
            params[name] -= self.lr * (m / c1) / (np.sqrt(s / c2) + self.eps)


def train_model(cfg: TrainConfig, on_step: Optional[Callable] = None):
    """Train the toy model; returns ``(model, [(step, loss, accuracy), ...])``.

    Loss and accuracy at step ``i`` are measured on the batch used for the
    ``i``-th update, before the update is applied.
    """
    model = build_model(cfg)
    params = model.arrays()  # views into the model, updated in place
    data_rng = Rng(cfg.seed + 7919)
    fixed = make_batch(cfg, data_rng) if cfg.task is Task.MEMORIZE else None
    adam = _Adam(cfg.lr) if cfg.optimizer is Optimizer.ADAM else None
    trace = []
    for step in range(cfg.steps):
        tokens, targets, weights = fixed if fixed is not None else make_batch(cfg, data_rng)
        loss, acc, grads = model_loss(model, tokens, targets, weights)
        if not math.isfinite(loss):
            raise NumericError(f"loss diverged at step {step}")
        trace.append((step, loss, acc))
        if on_step is not None:
            on_step(step, loss, acc)
        if cfg.stop_accuracy is not None and acc >= cfg.stop_accuracy:
            break
        if cfg.lr == 0:
            continue
        if adam is not None:
            adam.step(params, grads)
        else:
            for name, g in grads.items():
                params[name] -= cfg.lr * g
    return model, trace


def train_toy(cfg: TrainConfig, on_step: Optional[Callable] = None) -> list[tuple[int, float, float]]:
    """Loss trace of :func:`train_model`."""
    return train_model(cfg, on_step)[1]


def evaluate(model: ToyModel, cfg: TrainConfig, batches: int = 4, seed: int = 1) -> tuple[float, float]:
    """Mean loss and accuracy on fresh batches drawn from an independent stream."""
    rng = Rng(cfg.seed + 104729 * seed)
    losses, accs = [], []
    for _ in range(batches):
        loss, acc, _ = model_loss(model, *make_batch(cfg, rng), backward=False)
        losses.append(loss)
        accs.append(acc)
    return float(np.mean(losses)), float(np.mean(accs))


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "accuracy"])
    for step, loss, acc in trace:
        w.writerow([step, repr(float(loss)), repr(float(acc))])
    return buf.getvalue()
