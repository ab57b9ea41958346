import csv
import io
import json
import subprocess
import sys

import pytest

from gla.cli import BENCH_COLUMNS, COST_COLUMNS, main, parse_args, read_config

SMALL_BENCH = ["bench", "--L", "64", "--d", "32", "--C", "8,16,32", "--c", "4",
               "--repeat", "1", "--warmup", "3"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


# ---------------------------------------------------------------- verify

def test_verify_passes(capsys):
    code, out, _ = run(capsys, "verify", "--seed", "0", "--L", "64", "--dk", "8", "--dv", "16",
                       "--C", "16", "--c", "4", "--tol", "1e-9")
    assert code == 0
    report = json.loads(out)
    assert all(set(r) == {"check", "max_error", "tolerance", "pass"} for r in report)
    assert all(r["pass"] for r in report)
    names = {r["check"] for r in report}
    assert {"form.parallel", "form.semiring", "form.chunkwise", "form.two_level",
            "grad.qkv", "grad.gates"} <= names


def test_verify_rejects_non_dividing_chunk(capsys):
    code, out, err = run(capsys, "verify", "--C", "7", "--L", "64")
    assert code == 1 and "C must divide L" in err and out == ""


def test_verify_fault_injection(capsys):
    code, out, err = run(capsys, "verify", "--inject-fault")
    assert code == 2
    failed = [r["check"] for r in json.loads(out) if not r["pass"]]
    assert failed == ["form.chunkwise"]
    assert "form.chunkwise" in err


def test_unknown_command_is_usage_error(capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "verify", "--L", "abc")[0] == 1


# ---------------------------------------------------------------- cost

def test_cost_reference_row(capsys):
    code, out, _ = run(capsys, "cost", "--L", "2048", "--d", "1024", "--C", "128",
                       "--format", "csv")
    assert code == 0
    table = rows(out)
    assert list(table[0]) == COST_COLUMNS
    chunk = [r for r in table if r["form"] == "chunkwise"]
    assert chunk[0]["flops_matmul_halfable"] == "5368709120"


def test_cost_table_alignment(capsys):
    code, out, _ = run(capsys, "cost", "--L", "256", "--d", "16", "--C", "32,64")
    lines = out.rstrip("\n").split("\n")
    assert code == 0
    assert lines[0].split()[:2] == ["form", "L"]
    assert set(lines[1]) <= {"-", " "}
    assert len({len(line) for line in lines}) == 1


def test_cost_rejects_zero_chunk(capsys):
    assert run(capsys, "cost", "--C", "0")[0] == 1


def test_cost_row_count(capsys):
    _, out, _ = run(capsys, "cost", "--L", "64", "--d", "8", "--C", "8,16,32", "--format", "csv")
    # three unchunked forms plus two chunked forms per chunk size
    assert len(rows(out)) == 3 + 2 * 3


# ---------------------------------------------------------------- bench

def test_bench_contract(capsys):
    code, out, _ = run(capsys, *SMALL_BENCH)
    assert code == 0
    table = rows(out)
    assert list(table[0]) == BENCH_COLUMNS
    assert len(table) == 2 * 3
    assert all(float(r["max_rel_err_vs_oracle"]) <= 1e-9 for r in table)
    assert all(float(r["ms_inter"]) >= 0 and float(r["ms_intra"]) >= 0 for r in table)


def test_bench_errors_independent_of_repeat(capsys):
    _, one, _ = run(capsys, *SMALL_BENCH)
    _, five, _ = run(capsys, *SMALL_BENCH[:-4], "--repeat", "5", "--warmup", "3")
    strip = [{k: r[k] for k in BENCH_COLUMNS if not k.startswith("ms_")} for r in rows(one)]
    assert strip == [{k: r[k] for k in BENCH_COLUMNS if not k.startswith("ms_")} for r in rows(five)]


@pytest.mark.parametrize("extra", [["--warmup", "1"], ["--repeat", "0"], ["--forms", "parallel"],
                                   ["--C", "7"]])
def test_bench_usage_errors(capsys, extra):
    assert run(capsys, *SMALL_BENCH, *extra)[0] == 1


# ---------------------------------------------------------------- train

def test_train_zero_lr(capsys, tmp_path):
    out_path = tmp_path / "trace.csv"
    code, _, err = run(capsys, "train", "--steps", "3", "--lr", "0", "--out", str(out_path))
    assert code == 0 and "final_loss" in err
    losses = {r["loss"] for r in rows(out_path.read_text())}
    assert len(losses) == 1


def test_train_is_byte_identical(capsys):
    argv = ["train", "--steps", "3", "--seed", "5", "--optimizer", "adam"]
    assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


def test_train_config_error(capsys):
    assert run(capsys, "train", "--steps", "0")[0] == 1
    assert run(capsys, "train", "--lr", "-1")[0] == 1


# ---------------------------------------------------------------- configuration

def test_read_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# defaults\nL = 32\n\nC=8   # inline comment\n")
    assert read_config(str(path)) == {"L": "32", "C": "8"}


def test_flags_override_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("L = 32\nC = 8\n")
    args = parse_args(["verify", "--config", str(path), "--C", "16"])
    assert (args.L, args.C) == (32, 16)


def test_unknown_config_key(tmp_path, capsys):
    path = tmp_path / "run.cfg"
    path.write_text("colour = blue\n")
    assert run(capsys, "verify", "--config", str(path))[0] == 1


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("GLA_SEED", "42")
    assert parse_args(["verify"]).seed == 42
    assert parse_args(["verify", "--seed", "3"]).seed == 3
    monkeypatch.delenv("GLA_SEED")
    assert parse_args(["verify"]).seed == 0


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["bench", "--help"])
    out = capsys.readouterr().out
    assert "16,32,64,128,256" in out and "default: 5" in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gla.cli", "cost", "--L", "16", "--d", "4",
                           "--C", "4", "--format", "csv"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("form,")
