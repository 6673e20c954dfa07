"""Тесты командной строки: коды возврата, воспроизводимость, replay."""
import csv
import filecmp
import json

import pytest

from main import build_parser, cli_main
from parafac2.handlers.common import UsageError, parse_float_range, parse_int_range
from parafac2.handlers.fit import solver_options
from parafac2.services.storage import load_dataset, load_model

SMALL = ["--I", "6", "--J", "5", "--K", "3", "--true-components", "2"]


def _generate(out, seed="4", snr="5"):
    return cli_main(["generate", *SMALL, "--snr", snr, "--seed", seed, "--out", str(out)])


def _same_files(a, b, skip=("run.json",)):
    names = sorted(p.name for p in a.iterdir() if p.name not in skip)
    assert names == sorted(p.name for p in b.iterdir() if p.name not in skip)
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors


def test_generate_is_deterministic(tmp_path):
    assert _generate(tmp_path / "a") == 0
    assert _generate(tmp_path / "b") == 0
    _same_files(tmp_path / "a", tmp_path / "b")
    t, truth = load_dataset(tmp_path / "a")
    assert t.widths == (5, 5, 5) and truth is not None


def test_generate_negative_snr_and_replay(tmp_path):
    assert _generate(tmp_path / "a", snr="-5") == 0
    record = json.loads((tmp_path / "a" / "run.json").read_text(encoding="utf-8"))
    assert record["command"] == "generate" and record["args"]["snr"] == -5.0
    assert cli_main(["replay", str(tmp_path / "a" / "run.json"), "--out", str(tmp_path / "r")]) == 0
    _same_files(tmp_path / "a", tmp_path / "r")


def test_usage_errors_exit_1(tmp_path):
    assert cli_main([]) == 1
    assert cli_main(["fit", "--components", "2"]) == 1
    assert cli_main(["generate", "--noise", "pink", "--out", str(tmp_path)]) == 1


def test_data_errors_exit_2(tmp_path):
    missing = ["fit", "--data", str(tmp_path / "none"), "--components", "2", "--out", str(tmp_path / "f")]
    assert cli_main(missing) == 2
    assert _generate(tmp_path / "d") == 0
    too_many = ["fit", "--data", str(tmp_path / "d"), "--method", "direct", "--components", "6",
                "--out", str(tmp_path / "f")]
    assert cli_main(too_many) == 2


def test_fit_writes_model_and_report(tmp_path):
    assert _generate(tmp_path / "d") == 0
    out = tmp_path / "fit"
    args = ["fit", "--data", str(tmp_path / "d"), "--orth", "cmn", "--noise", "hetero", "--components", "2",
            "--restarts", "1", "--max-iters", "100", "--seed", "1", "--out", str(out)]
    assert cli_main(args) == 0
    report = json.loads((out / "fit_report.json").read_text(encoding="utf-8"))
    assert report["method"] == "vb-cmn-hetero"
    trace = report["trace"]
    assert all(cur >= prev - 1e-8 * abs(prev) for prev, cur in zip(trace, trace[1:]))
    assert "noiseless_r2" in report["diagnostics"]
    assert load_model(out / "model.json", expect="cmn-hetero").M == 2


def test_select_and_replay_reproduce_tables(tmp_path):
    out = tmp_path / "sel"
    args = ["select", "--datasets", "1", "--methods", "direct,vb-cmn-homo", "--components", "1:2", *SMALL,
            "--max-iters", "60", "--restarts", "1", "--workers", "1", "--seed", "2", "--out", str(out)]
    assert cli_main(args) == 0
    with open(out / "sweep.csv", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [(r["method"], r["M"]) for r in rows] == [
        ("direct", "1"), ("direct", "2"), ("vb-cmn-homo", "1"), ("vb-cmn-homo", "2"),
    ]
    assert cli_main(["replay", str(out / "run.json"), "--out", str(tmp_path / "again")]) == 0
    for name in ("sweep.csv", "metrics_long.csv", "selections.csv"):
        assert filecmp.cmp(out / name, tmp_path / "again" / name, shallow=False)


def test_snr_study_command(tmp_path):
    out = tmp_path / "snr"
    args = ["snr-study", "--snr", "-5:5:5", "--repeats", "1", "--methods", "direct", "--components", "2", *SMALL,
            "--max-iters", "100", "--workers", "1", "--out", str(out)]
    assert cli_main(args) == 0
    with open(out / "snr_study.csv", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    r2_rows = [r for r in rows if r["metric"] == "noiseless_r2"]
    assert [float(r["snr"]) for r in r2_rows] == [-5.0, 0.0, 5.0]
    assert {r["metric"] for r in rows} == {"noiseless_r2", "congruence_A", "congruence_B", "congruence_C"}


def test_range_parsing():
    grid = parse_float_range("-20:2:10")
    assert len(grid) == 16 and grid[0] == -20.0 and grid[-1] == 10.0
    assert parse_int_range("2:8") == [2, 3, 4, 5, 6, 7, 8]
    assert parse_float_range("1,3,5") == [1.0, 3.0, 5.0]
    assert parse_float_range("0:0.1:0.3") == [0.0, 0.1, 0.2, 0.3]
    with pytest.raises(UsageError):
        parse_float_range("5:1")
    with pytest.raises(UsageError):
        parse_float_range("a:b")
    with pytest.raises(UsageError):
        parse_int_range("1.5")


@pytest.mark.parametrize("command", [["select"], ["snr-study"], ["fit", "--data", "d", "--components", "2", "--method", "vb"]])
def test_restarts_flag_reaches_direct_fit(command):
    args = build_parser().parse_args([*command, "--restarts", "4"])
    direct, vb = solver_options(args)
    assert direct.restarts == 4 and vb.restarts == 4
