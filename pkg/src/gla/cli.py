"""``gla`` command line: verify, bench, cost, train.

Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure. Every subcommand accepts ``--config FILE`` with ``key = value``
lines (``#`` starts a comment); keys are the long option names and explicit
flags override them. ``GLA_SEED`` supplies the seed when neither does.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import statistics
import sys
import time
from typing import Optional, Sequence

import numpy as np

from . import backprop, costmodel, forms
from .forms import ChunkPlan, DecaySpec, PlanError, RangeError
from .gating import GateSeq
from .layer import PRESETS, allocate
from .numkit import Rng, max_rel_err

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2

BENCH_COLUMNS = ["form", "L", "d_k", "d_v", "C", "c", "policy", "seed",
                 "ms_inter", "ms_intra", "ms_total", "max_rel_err_vs_oracle"]
COST_COLUMNS = ["form", "L", "d_k", "d_v", "C", "c", "flops_matmul_halfable",
                "flops_matmul_full", "flops_elementwise", "flops_total",
                "bytes_state_traffic", "bytes_io_total", "parallel_work_items"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------


def read_config(path: str) -> dict[str, str]:
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _name_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _default_seed() -> int:
    raw = os.environ.get("GLA_SEED")
    if raw is None or not raw.strip():
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GLA_SEED must be an integer, got {raw!r}") from None


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------


def _random_instance(rng: Rng, L: int, dk: int, dv: int, strength: float = 1.0):
    q, k, v = rng.randn(L, dk), rng.randn(L, dk), rng.randn(L, dv)
    la = -np.logaddexp(0.0, -rng.randn(L, dk)) * strength / 16.0
    lb = -np.logaddexp(0.0, -rng.randn(L, dv)) * strength / 16.0
    return q, k, v, GateSeq.from_logs(la, lb)


def _check(name: str, err: float, tol: float) -> dict:
    err = float(err)
    return {"check": name, "max_error": err, "tolerance": tol, "pass": bool(err <= tol)}


def verify_checks(L: int, dk: int, dv: int, plan: ChunkPlan, tol: float, seed: int,
                  inject_fault: bool = False) -> list[dict]:
    """Cross-form equivalence, specializations, identities, stability, gradients."""
    rng = Rng(seed)
    q, k, v, g = _random_instance(rng, L, dk, dv)
    ref, _ = forms.recurrent_forward(q, k, v, g, keep_states=False)
    report = []
    exact = ChunkPlan(plan.C, plan.c, "exact")
    outputs = {
        "parallel": lambda: forms.parallel_forward(q, k, v, g),
        "semiring": lambda: forms.semiring_forward(q, k, v, g),
        "chunkwise": lambda: forms.chunkwise_forward(q, k, v, g, exact),
        "two_level": lambda: forms.two_level_forward(q, k, v, g, exact),
    }
    if inject_fault:
        # negate the key-gate logs fed to the chunkwise form
        flipped = GateSeq.from_logs(-g.log_alpha, g.log_beta)
        outputs["chunkwise"] = lambda: forms.chunkwise_forward(q, k, v, flipped, exact)
    for name, run in outputs.items():
        report.append(_check(f"form.{name}", max_rel_err(run(), ref), tol))

    ident = GateSeq.identity(L, dk, dv)
    lin = forms.linear_attention_forward(q, k, v)
    report.append(_check("special.linear_attention",
                         max_rel_err(forms.recurrent_forward(q, k, v, ident)[0], lin), 1e-10))
    for gamma in (0.5, 0.9, 0.99):
        ret = forms.retnet_forward(q, k, v, DecaySpec(gamma))
        gla = forms.recurrent_forward(q, k, v, GateSeq.constant(L, dk, dv, gamma))[0]
        report.append(_check(f"special.fixed_decay_{gamma}", max_rel_err(gla, ret), 1e-10))

    worst: dict[str, float] = {}
    for _ in range(20):
        for name, err in forms.rescaling_identity_errors(rng).items():
            worst[name] = max(worst.get(name, 0.0), err)
    report.extend(_check(f"identity.{name}", err, 1e-12) for name, err in worst.items())

    # stability: cumulative log gate far past the guard
    Ls = 2048
    qs, ks, vs = rng.randn(Ls, 4), rng.randn(Ls, 4), rng.randn(Ls, 4)
    gs = GateSeq.from_logs(np.full((Ls, 4), np.log(0.7)), np.zeros((Ls, 4)))
    try:
        forms.parallel_forward(qs, ks, vs, gs)
        guarded = False
    except RangeError:
        guarded = True
    report.append({"check": "stability.parallel_range_guard", "max_error": 0.0 if guarded else 1.0,
                   "tolerance": 0.0, "pass": guarded})
    sref, _ = forms.recurrent_forward(qs, ks, vs, gs, keep_states=False)
    report.append(_check("stability.semiring", max_rel_err(forms.semiring_forward(qs, ks, vs, gs), sref), 1e-8))
    report.append(_check("stability.two_level",
                         max_rel_err(forms.two_level_forward(qs, ks, vs, gs, ChunkPlan(64, 16)), sref), 1e-8))

    p = allocate(16, PRESETS["default"], Rng(seed + 1))
    errs = backprop.layer_grad_errors(p, Rng(seed + 2).randn(16, 16))
    report.append(_check("grad.qkv", max(errs[n] for n in ("w_q", "w_k", "w_v")), 1e-5))
    report.append(_check("grad.gates", max(errs[n] for n in ("w_alpha", "w_alpha2", "b_alpha")), 1e-4))
    report.append(_check("grad.other", max(errs[n] for n in ("w_r", "b_r", "w_o", "x")), 1e-4))
    return report


def _check_divides(L: int, Cs: Sequence[int]) -> None:
    for C in Cs:
        if C < 1:
            raise UsageError(f"chunk size must be >= 1, got C={C}")
        if L < 1 or L % C:
            raise UsageError(f"C must divide L (C={C}, L={L})")


def cmd_verify(args) -> int:
    _check_divides(args.L, [args.C])
    plan = ChunkPlan(args.C, args.c, "exact")
    report = verify_checks(args.L, args.dk, args.dv, plan, args.tol, args.seed, args.inject_fault)
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    failed = [r["check"] for r in report if not r["pass"]]
    if failed:
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------


def _median_ms(fn, warmup: int, repeat: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_rows(L: int, dk: int, dv: int, Cs: Sequence[int], c: int, form_names: Sequence[str],
               policy: str, seed: int, repeat: int, warmup: int) -> list[dict]:
    """Time the inter-chunk phase (chunk states plus their readout ``(Q * A_dag) S``)
    separately from the within-chunk phase, per form and chunk size."""
    rng = Rng(seed)
    q, k, v, g = _random_instance(rng, L, dk, dv)
    ref, _ = forms.recurrent_forward(q, k, v, g, keep_states=False)
    rows = []
    for form in form_names:
        for C in Cs:
            plan = ChunkPlan(C, min(c, C), policy)

            def inter():
                S = forms.inter_chunk_states(k, v, g, C)
                scalings = forms.chunk_scalings(q, g, C, v.shape)
                return forms.cross_chunk_output(S, scalings), scalings

            cross, scalings = inter()
            if form == "chunkwise":
                def intra():
                    return cross + forms.chunk_local(k, v, C, scalings)
            else:
                def intra():
                    return cross + forms.two_level_local(q, k, v, g, plan)
            out = intra().reshape(v.shape)
            ms_inter = _median_ms(inter, warmup, repeat)
            ms_intra = _median_ms(intra, warmup, repeat)
            rows.append(dict(form=form, L=L, d_k=dk, d_v=dv, C=C, c=plan.c, policy=policy,
                             seed=seed, ms_inter=ms_inter, ms_intra=ms_intra,
                             ms_total=ms_inter + ms_intra,
                             max_rel_err_vs_oracle=max_rel_err(out, ref)))
    return rows


def cmd_bench(args) -> int:
    dk = args.dk or args.d // (2 * args.H)
    dv = args.dv or args.d // args.H
    for name in args.forms:
        if name not in ("chunkwise", "two_level"):
            raise UsageError(f"bench supports chunkwise and two_level, not {name!r}")
    if args.repeat < 1 or args.warmup < 3:
        raise UsageError("need --repeat >= 1 and --warmup >= 3")
    _check_divides(args.L, args.C)
    for C in args.C:
        ChunkPlan(C, min(args.c, C), args.policy)
    rows = bench_rows(args.L, dk, dv, args.C, args.c, args.forms, args.policy, args.seed,
                      args.repeat, args.warmup)
    _emit(_csv(BENCH_COLUMNS, rows), args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# cost
# --------------------------------------------------------------------------


def cost_rows(L: int, dk: int, dv: int, Cs: Sequence[int], c: int, form_names: Sequence[str],
              elem_bytes: int, batch: int, heads: int) -> list[dict]:
    rows = []
    for form in form_names:
        plans = [ChunkPlan(C, min(c, C)) for C in Cs] if form in ("chunkwise", "two_level") else [None]
        for plan in plans:
            rep = costmodel.flops(form, L, dk, dv, plan, batch=batch, heads=heads,
                                  elem_bytes=elem_bytes)
            rows.append(rep.as_dict())
    return rows


def format_table(columns: Sequence[str], rows: Sequence[dict]) -> str:
    cells = [[_cell(r[col]) for col in columns] for r in rows]
    widths = [max([len(col)] + [len(row[i]) for row in cells]) for i, col in enumerate(columns)]
    lines = ["  ".join(col.rjust(w) for col, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in cells)
    return "\n".join(lines) + "\n"


def cmd_cost(args) -> int:
    dk = args.dk or args.d
    dv = args.dv or args.d
    for name in args.forms:
        if name not in forms.FORMS:
            raise UsageError(f"unknown form {name!r}")
    _check_divides(args.L, args.C)
    for C in args.C:
        ChunkPlan(C, min(args.c, C))
    rows = cost_rows(args.L, dk, dv, args.C, args.c, args.forms, args.elem_bytes,
                     args.batch, args.heads)
    text = _csv(COST_COLUMNS, rows) if args.format == "csv" else format_table(COST_COLUMNS, rows)
    _emit(text, args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = backprop.TrainConfig(steps=args.steps, lr=args.lr, seed=args.seed, task=args.task,
                               optimizer=args.optimizer)
    trace = backprop.train_toy(cfg)
    _emit(backprop.trace_csv(trace), args.out)
    first, last = trace[0], trace[-1]
    print(f"steps={len(trace)} initial_loss={first[1]:.6f} final_loss={last[1]:.6f} "
          f"ratio={last[1] / first[1]:.4f} final_accuracy={last[2]:.4f}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# plumbing
# --------------------------------------------------------------------------


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[col]) for col in columns])
    return buf.getvalue()


def _emit(text: str, path: Optional[str]) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


class _DefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for options whose help already explains a missing one."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gla", description="Gated linear attention: checks, benchmarks, "
                     "cost model and a toy trainer.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(p):
        p.add_argument("--config", help="file of 'key = value' defaults (flags win)")
        p.add_argument("--seed", type=int, help="random seed (default: $GLA_SEED or 0)")
        p.add_argument("--out", help="output file (default: stdout)")

    p = sub.add_parser("verify", help="run the oracle suite; JSON report",
                       formatter_class=_DefaultsFormatter)
    common(p)
    p.add_argument("--L", type=int, default=64, help="sequence length")
    p.add_argument("--dk", type=int, default=8, help="key width")
    p.add_argument("--dv", type=int, default=16, help="value width")
    p.add_argument("--C", type=int, default=16, help="chunk size")
    p.add_argument("--c", type=int, default=4, help="sub-chunk size")
    p.add_argument("--tol", type=float, default=1e-9, help="cross-form tolerance")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time chunk-size sweeps; CSV",
                       formatter_class=_DefaultsFormatter)
    common(p)
    p.add_argument("--L", type=int, default=2048, help="sequence length")
    p.add_argument("--d", type=int, default=1024, help="model width")
    p.add_argument("--H", type=int, default=4, help="heads; per-head d_k = d/(2H), d_v = d/H")
    p.add_argument("--dk", type=int, default=None, help="override per-head key width")
    p.add_argument("--dv", type=int, default=None, help="override per-head value width")
    p.add_argument("--C", type=_int_list, default="16,32,64,128,256", help="chunk sizes")
    p.add_argument("--c", type=int, default=16, help="sub-chunk size (capped at C)")
    p.add_argument("--forms", type=_name_list, default="chunkwise,two_level", help="forms")
    p.add_argument("--policy", choices=("exact", "mixed"), default="exact",
                   help="two-level precision policy")
    p.add_argument("--repeat", type=int, default=5, help="timed runs (median reported)")
    p.add_argument("--warmup", type=int, default=3, help="untimed runs first (>= 3)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("cost", help="closed-form FLOPs and traffic",
                       formatter_class=_DefaultsFormatter)
    common(p)
    p.add_argument("--L", type=int, default=2048, help="sequence length")
    p.add_argument("--d", type=int, default=1024, help="width used for d_k and d_v")
    p.add_argument("--dk", type=int, default=None, help="override key width")
    p.add_argument("--dv", type=int, default=None, help="override value width")
    p.add_argument("--C", type=_int_list, default="128", help="chunk sizes")
    p.add_argument("--c", type=int, default=16, help="sub-chunk size (capped at C)")
    p.add_argument("--forms", type=_name_list, default=",".join(forms.FORMS), help="forms")
    p.add_argument("--elem-bytes", type=int, default=4, help="bytes per element")
    p.add_argument("--batch", type=int, default=1, help="sequences")
    p.add_argument("--heads", type=int, default=1, help="heads")
    p.add_argument("--format", choices=("csv", "table"), default="table", help="output format")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("train", help="toy training run; CSV loss trace",
                       formatter_class=_DefaultsFormatter)
    common(p)
    p.add_argument("--task", choices=[t.value for t in backprop.Task], default="memorize_batch",
                   help="toy task")
    p.add_argument("--steps", type=int, default=2000, help="optimizer steps")
    p.add_argument("--lr", type=float, default=None,
                   help="learning rate (default 0.5 for sgd, 3e-3 for adam)")
    p.add_argument("--optimizer", choices=[o.value for o in backprop.Optimizer], default="sgd",
                   help="update rule")
    p.set_defaults(func=cmd_train)
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"config"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _default_seed()
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (PlanError, backprop.ConfigError, ValueError) as exc:
        print(f"gla: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
