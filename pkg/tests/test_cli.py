import os
from pathlib import Path

import numpy as np
import pytest

from rbcopas import cli
from rbcopas.data import MetaDataset, serialize_dataset
from rbcopas.likelihood import fit_sma
from rbcopas.simulation import SimConfig, simulate_copas

from conftest import normal_re_data

QUICK = ["--iters", "8000", "--burnin", "3000", "--chains", "2"]


def _kv(path):
    return dict(line.rstrip("\n").split("=", 1) for line in open(path) if line.strip())


@pytest.fixture
def csv_file(tmp_path, biased_data):
    p = tmp_path / "data.csv"
    p.write_text(serialize_dataset(biased_data))
    return p


def test_analyze_outputs(csv_file, tmp_path):
    out = tmp_path / "out"
    code = cli.main(["analyze", str(csv_file), "--out", str(out), *QUICK, "--emit-grids"])
    assert code == 0
    names = set(os.listdir(out))
    assert {"manifest.txt", "dic.csv", "summary.csv", "d_report.txt", "direction.txt",
            "diagnostics.txt", "grid_rbc.csv", "grid_rho0.csv"} <= names
    man = _kv(out / "manifest.txt")
    assert man["command"] == "analyze" and man["option.seed"] == "0"
    assert man["option.family"] == "auto" and man["exit_code"] == "0"
    assert len(open(out / "dic.csv").read().splitlines()) == 5
    rep = _kv(out / "d_report.txt")
    assert 0 <= float(rep["d"]) <= 1


def test_analyze_single_family_and_chains(csv_file, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["analyze", str(csv_file), "--out", str(out), *QUICK, "--family", "t",
                     "--df", "6", "--emit-chains", "--tau-measure"]) == 0
    names = set(os.listdir(out))
    assert {"chain_student_t_1.csv", "chain_student_t_rho0_2.csv", "d_report_tau.txt"} <= names
    assert _kv(out / "d_report.txt")["family"] == "student_t(nu=6)"


def test_two_study_warning(tmp_path):
    p = tmp_path / "two.csv"
    p.write_text("y,s\n0.2,0.5\n0.6,0.4\n")
    out = tmp_path / "out"
    assert cli.main(["analyze", str(p), "--out", str(out)]) == 0
    assert "few studies" in _kv(out / "manifest.txt")["warnings"]


def test_data_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,s\n0.2,oops\n")
    assert cli.main(["analyze", str(bad), "--out", str(tmp_path / "o1")]) == 2
    assert _kv(tmp_path / "o1" / "manifest.txt")["exit_code"] == "2"
    one = tmp_path / "one.csv"
    one.write_text("y,s\n0.2,0.3\n")
    assert cli.main(["analyze", str(one), "--out", str(tmp_path / "o2")]) == 2
    assert cli.main(["analyze", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o3")]) == 2
    assert cli.main(["simulate", "--effects", "cauchy", "--out", str(tmp_path / "o4")]) == 2
    assert cli.main(["simulate", "--rho", "1.5", "--out", str(tmp_path / "o5")]) == 2


def test_poor_mixing_exit_3_still_writes(csv_file, tmp_path):
    out = tmp_path / "out"
    code = cli.main(["analyze", str(csv_file), "--out", str(out), "--iters", "40",
                     "--burnin", "20", "--chains", "4", "--family", "normal"])
    assert code == 3
    assert {"summary.csv", "diagnostics.txt", "manifest.txt"} <= set(os.listdir(out))
    assert _kv(out / "diagnostics.txt")["ok"] == "False"
    # 80 pooled draws are too few for the density estimates behind D
    assert "D measure not computed" in _kv(out / "manifest.txt")["notes"]


def test_seed_from_environment(csv_file, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "17")
    out = tmp_path / "out"
    cli.main(["analyze", str(csv_file), "--out", str(out), *QUICK, "--family", "normal"])
    assert _kv(out / "manifest.txt")["option.seed"] == "17"
    monkeypatch.setenv(cli.SEED_ENV, "x")
    assert cli.main(["analyze", str(csv_file), "--out", str(tmp_path / "o2"), *QUICK]) == 2


def _same_outputs(a: Path, b: Path):
    files = sorted(p.name for p in a.iterdir() if p.name != cli.MANIFEST)
    assert files == sorted(p.name for p in b.iterdir() if p.name != cli.MANIFEST)
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_rerun_analyze_and_simulate(csv_file, tmp_path):
    a = tmp_path / "a"
    cli.main(["analyze", str(csv_file), "--out", str(a), *QUICK, "--seed", "4", "--emit-grids"])
    assert cli.main(["rerun", str(a / "manifest.txt"), "--out", str(tmp_path / "b")]) == 0
    _same_outputs(a, tmp_path / "b")
    s = tmp_path / "s"
    cli.main(["simulate", "--effects", "skew_mix", "--rho", "0.6", "--reps", "2", "--out",
              str(s), *QUICK, "--keep-data"])
    assert cli.main(["rerun", str(s / "manifest.txt"), "--out", str(tmp_path / "s2")]) == 0
    _same_outputs(s, tmp_path / "s2")


def test_simulate_keep_data(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["simulate", "--effects", "std_normal", "--rho", "0.0", "--reps", "1",
                     "--methods", "SMA", "--no-d", "--keep-data", "--out", str(out)]) == 0
    assert sorted(os.listdir(out)) == ["data_rep1.csv", "manifest.txt", "results.csv"]
    lines = (out / "results.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("std_normal,0.0,SMA,")


def test_batch_isolates_bad_files(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    for k in range(4):
        (src / f"f{k}.csv").write_text(serialize_dataset(simulate_copas(SimConfig(seed=k))))
    (src / "broken.csv").write_text("y,s\n1,2\nnope,1\n")
    (src / "notes.txt").write_text("ignored")
    out = tmp_path / "out"
    assert cli.main(["batch", str(src), "--out", str(out), *QUICK, "--family", "normal"]) == 0
    import csv
    rows = list(csv.DictReader(open(out / "batch.csv")))
    assert len(rows) == 5
    errors = [r for r in rows if r["status"] == "error"]
    assert [r["file"] for r in errors] == ["broken.csv"] and "row 3" in errors[0]["error"]
    from rbcopas.bias_measure import interpret_d
    for r in rows:
        if r["status"] != "error":
            assert r["category"] == interpret_d(float(r["d"]))
    cats = {r["category"]: int(r["count"]) for r in csv.DictReader(open(out / "categories.csv"))}
    assert sum(cats.values()) == 4


def test_batch_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.main(["batch", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2


def test_d_measure_command(csv_file, tmp_path):
    a = tmp_path / "a"
    cli.main(["analyze", str(csv_file), "--out", str(a), *QUICK, "--family", "normal",
              "--emit-chains"])
    out = tmp_path / "d"
    assert cli.main(["d-measure", str(a / "chain_normal_1.csv"), str(a / "chain_normal_rho0_1.csv"),
                     "--out", str(out), "--emit-grids"]) == 0
    assert {"d_report.txt", "grid_rbc.csv", "grid_rho0.csv"} <= set(os.listdir(out))
    assert cli.main(["d-measure", str(csv_file), str(csv_file), "--out", str(tmp_path / "e")]) == 2


def test_nothing_written_outside_out(csv_file, tmp_path, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    before = {p for p in tmp_path.rglob("*")}
    cli.main(["analyze", str(csv_file), "--out", "res", *QUICK, "--family", "normal"])
    new = {p for p in tmp_path.rglob("*")} - before
    assert new and all(work / "res" in p.parents or p == work / "res" for p in new)


def test_output_writer_refuses_escape(tmp_path):
    with pytest.raises(ValueError):
        cli.Output(tmp_path / "o").write("../x.txt", "no")


def test_rho_fixed_zero_matches_sma(tmp_path):
    d = normal_re_data(30, 0.4, 0.2, seed=21)
    p = tmp_path / "re.csv"
    p.write_text(serialize_dataset(d))
    out = tmp_path / "out"
    assert cli.main(["analyze", str(p), "--out", str(out), "--family", "normal",
                     "--rho-fixed-zero"]) == 0
    assert "d_report.txt" not in os.listdir(out)
    rows = {l.split(",")[0]: l.split(",") for l in (out / "summary.csv").read_text().splitlines()}
    theta = float(rows["theta"][2])
    assert abs(theta - fit_sma(d).theta_hat) < 0.02 * float(np.mean(d.s))


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason=(
    "about 81% of rho=0 files land at D <= 0.25 (26 of 32 measured), so 7 of 8 "
    "negligible holds only about half the time at this sample size"))
def test_batch_screen_separates_biased_files(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    for k in range(10):
        rho = 0.9 if k >= 8 else 0.0
        d = simulate_copas(SimConfig(rho=rho, seed=300 + k))
        (src / f"m{k:02d}.csv").write_text(serialize_dataset(d))
    out = tmp_path / "out"
    assert cli.main(["batch", str(src), "--out", str(out)]) == 0
    import csv
    cats = [r["category"] for r in csv.DictReader(open(out / "batch.csv"))]
    assert sum(c == "negligible" for c in cats[:8]) >= 7
    assert sum(c in ("high", "very_high") for c in cats[8:]) >= 1
