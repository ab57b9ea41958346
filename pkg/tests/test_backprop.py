import numpy as np
import pytest

from gla.backprop import (ConfigError, NumericError, Optimizer, StateError, Task, TrainConfig,
                          backward_recurrent, build_model, gla_block_bwd, gla_block_fwd,
                          gla_layer_bwd, gla_layer_fwd, grad_check, layer_grad_errors,
                          make_batch, model_loss, trace_csv, train_toy)
from gla.forms import recurrent_forward
from gla.gating import GateSeq
from gla.layer import PRESETS, allocate, gla_block_forward, gla_layer_forward
from gla.numkit import Rng, max_rel_err

from conftest import random_problem

QKV = ("w_q", "w_k", "w_v")
GATES = ("w_alpha", "w_alpha2", "b_alpha", "w_beta", "w_beta2", "b_beta")


def recurrence_objective(q, k, v, la, lb, w):
    o, _ = recurrent_forward(q, k, v, GateSeq.from_logs(la, lb))
    return float(np.sum(w * o))


def recurrence_grads(q, k, v, g, w):
    _, states = recurrent_forward(q, k, v, g)
    return backward_recurrent(q, k, v, g, states, w)


# ---------------------------------------------------------------- backward_recurrent

def test_zero_upstream_gives_zero_grads():
    q, k, v, g = random_problem(Rng(1), 8, 3, 2)
    for grad in recurrence_grads(q, k, v, g, np.zeros((8, 2))):
        np.testing.assert_array_equal(grad, 0.0)


def test_single_step_outer_product():
    q, k, v, g = random_problem(Rng(2), 1, 3, 2)
    w = Rng(3).randn(1, 2)
    dq, dk, dv, dla, dlb = recurrence_grads(q, k, v, g, w)
    np.testing.assert_allclose(dq[0], k[0] * (v[0] @ w[0]), rtol=1e-14)
    np.testing.assert_allclose(dv[0], (q[0] @ k[0]) * w[0], rtol=1e-14)
    np.testing.assert_array_equal(dla, 0.0)  # no previous state to decay
    args = [q, k, v, g.log_alpha, g.log_beta]
    for i, grad in enumerate((dq, dk, dv)):
        def f(val, i=i):
            return recurrence_objective(*[val if j == i else a for j, a in enumerate(args)], w)
        assert grad_check(f, args[i], grad) <= 1e-7


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_recurrence_grads_match_finite_differences(seed):
    q, k, v, g = random_problem(Rng(seed), 16, 4, 6, temperature=2.0)
    w = Rng(seed + 50).randn(16, 6)
    grads = recurrence_grads(q, k, v, g, w)
    args = [q, k, v, g.log_alpha, g.log_beta]
    for i, grad in enumerate(grads):
        def f(val, i=i):
            return recurrence_objective(*[val if j == i else a for j, a in enumerate(args)], w)
        assert grad_check(f, args[i], grad) <= 1e-5, i


def test_backward_needs_states():
    q, k, v, g = random_problem(Rng(4), 4, 2, 2)
    with pytest.raises(StateError):
        backward_recurrent(q, k, v, g, None, np.ones((4, 2)))
    _, states = recurrent_forward(q, k, v, g)
    with pytest.raises(StateError):
        backward_recurrent(q, k, v, g, states[:-1], np.ones((4, 2)))


# ---------------------------------------------------------------- grad_check

def test_grad_check_quadratic():
    p0 = np.array([[1.0, -2.0, 0.5]])
    assert grad_check(lambda p: float(np.sum(p * p)), p0, 2 * p0) <= 1e-9


def test_grad_check_detects_wrong_gradient():
    p0 = Rng(6).randn(3, 3)
    assert grad_check(lambda p: float(np.sum(p * p)), p0, p0) > 0.4


def test_grad_check_subset():
    p0 = 1.0 + Rng(7).uniform(1600).reshape(40, 40)
    assert grad_check(lambda p: float(np.sum(p**3)), p0, 3 * p0**2, n_coords=64) <= 1e-6


def test_grad_check_non_finite():
    with pytest.raises(NumericError):
        grad_check(lambda p: float("nan"), np.ones((2, 2)), np.zeros((2, 2)))


def test_grad_check_leaves_input_untouched():
    p0 = Rng(8).randn(4, 4)
    before = p0.copy()
    grad_check(lambda p: float(np.sum(p)), p0, np.ones((4, 4)))
    np.testing.assert_array_equal(p0, before)


# ---------------------------------------------------------------- layer and block

@pytest.fixture(scope="module")
def layer16():
    return allocate(16, rng=Rng(1)), Rng(2).randn(16, 16)


def test_layer_forward_matches_inference_path(layer16):
    p, x = layer16
    y, _ = gla_layer_fwd(x, p)
    assert max_rel_err(y, gla_layer_forward(x, p)) <= 1e-12
    out, _ = gla_block_fwd(x, p)
    assert max_rel_err(out, gla_block_forward(x, p)) <= 1e-12


def test_layer_gradients(layer16):
    p, x = layer16
    errors = layer_grad_errors(p, x)
    for name in QKV:
        assert errors[name] <= 1e-5, name
    for name, err in errors.items():
        assert err <= 1e-4, name


def test_small_component_is_roundoff_limited():
    # one w_k entry of this instance is ~7e-5, where h=1e-6 differences lose digits
    p, x = allocate(16, rng=Rng(10)), Rng(11).randn(16, 16)
    coarse, fine = layer_grad_errors(p, x, h=1e-6), layer_grad_errors(p, x, h=1e-5)
    assert coarse["w_k"] > 1e-5
    assert fine["w_k"] <= 1e-5


def test_block_gradients(layer16):
    p, x = layer16
    # larger objective than the bare layer: this step balances roundoff against truncation
    errors = layer_grad_errors(p, x, h=3e-6, block=True)
    assert {"w_1", "w_2", "w_3", "x"} <= errors.keys()
    assert max(errors.values()) <= 1e-4


def test_beta_gradients():
    p = allocate(16, PRESETS["with_beta"], Rng(12))
    errors = layer_grad_errors(p, Rng(13).randn(8, 16))
    assert {"w_beta", "w_beta2", "b_beta"} <= errors.keys()
    assert max(errors.values()) <= 1e-4


def test_no_beta_gradients_without_beta(layer16):
    p, x = layer16
    y, cache = gla_layer_fwd(x, p)
    grads = gla_layer_bwd(np.ones_like(y), cache)
    assert not set(grads.params) & {"w_beta", "w_beta2", "b_beta"}
    assert set(grads.params) == set(p.arrays()) - {"w_1", "w_2", "w_3"}


def test_grad_shapes_mirror_params(layer16):
    p, x = layer16
    out, cache = gla_block_fwd(x, p)
    grads = gla_block_bwd(Rng(14).randn(*out.shape), cache)
    assert grads.all_finite()
    for name, a in p.arrays().items():
        assert grads[name].shape == a.shape
    assert grads.dx.shape == x.shape


# ---------------------------------------------------------------- trainer

def small_config(**kw):
    base = dict(steps=4, d=16, heads=2, length=12, batch=2, vocab=8, blocks=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("kw", [dict(steps=0), dict(lr=-1.0), dict(lr=float("nan")),
                                dict(task="sort"), dict(optimizer="rmsprop"),
                                dict(d=12, heads=4)])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.d, cfg.heads, cfg.vocab, cfg.length, cfg.batch, cfg.blocks) == (64, 4, 32, 64, 8, 2)
    assert cfg.optimizer is Optimizer.SGD and cfg.lr == 0.5
    assert TrainConfig(optimizer="adam").lr == 3e-3


def test_zero_lr_gives_constant_loss():
    trace = train_toy(small_config(lr=0.0))
    assert len({loss for _, loss, _ in trace}) == 1


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_training_is_deterministic(optimizer):
    a = trace_csv(train_toy(small_config(optimizer=optimizer)))
    b = trace_csv(train_toy(small_config(optimizer=optimizer)))
    assert a == b


def test_loss_decreases_on_memorize():
    trace = train_toy(small_config(steps=30))
    assert trace[-1][1] < trace[0][1]


def test_model_gradients_match_finite_differences():
    cfg = small_config(length=6)
    model = build_model(cfg)
    batch = make_batch(cfg, Rng(1))
    _, _, grads = model_loss(model, *batch)
    params = model.arrays()
    for name in ("embed", "pos", "block0.w_v", "block0.b_alpha"):
        original = params[name].copy()

        def f(val, name=name):
            params[name][...] = val
            loss = model_loss(model, *batch, backward=False)[0]
            params[name][...] = original
            return loss
        assert grad_check(f, original, grads[name], n_coords=64) <= 1e-4, name


def test_copy_batch_layout():
    cfg = small_config(task=Task.COPY)
    inputs, targets, weights = make_batch(cfg, Rng(2))
    P = cfg.length // 2
    assert np.all(inputs[:, P] == cfg.vocab - 1)
    np.testing.assert_array_equal(targets[:, P:], inputs[:, :cfg.length - P])
    assert weights[:, :P].sum() == 0 and np.all(weights[:, P:] == 1)


def test_stop_accuracy_ends_early():
    trace = train_toy(small_config(steps=50, stop_accuracy=0.0))
    assert len(trace) == 1


def test_trace_csv_format():
    text = trace_csv([(0, 1.5, 0.25), (1, 1.0, 0.5)])
    assert text.splitlines() == ["step,loss,accuracy", "0,1.5,0.25", "1,1.0,0.5"]
