import csv
import json
import os

import pytest

from stochhomog import cli
from stochhomog.pipeline import ConfigError, RunConfig

FAST = ["--set", "h=1/12", "--set", "h1=1/32", "--set", "h0=1/32"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text("")
    cfg = cli.parse_config(str(p))
    assert cfg == RunConfig()
    assert (cfg.epsilon, cfg.M, cfg.f, cfg.truncation, cfg.h0) == (0.125, 1, 10.0, 1.5, 0.01)


def test_sections_overrides_and_fractions(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[problem]\ntest_case = B  # comment\neps = 1/4\n\n[mesh]\nh1 = 1/96\n"
                 "[random]\nseed = 9\n[study]\nL_list = 4, 16\n")
    cfg = cli.parse_config(str(p), ["L=484", "problem.M=2"])
    assert cfg.test_case == "B" and cfg.epsilon == 0.25 and cfg.h1 == 1 / 96
    assert cfg.master_seed == 9 and cfg.L_list == (4, 16) and cfg.L == 484 and cfg.M == 2


def test_epsilon_seventh_rejected_naming_key():
    with pytest.raises(ConfigError, match="h1"):
        cli.parse_config(None, ["epsilon=1/7", "M=1"])


@pytest.mark.parametrize("text,needle", [
    ("[problem]\nbogus = 1\n", "run.ini:2: unknown key 'bogus'"),
    ("[problem]\nL = ten\n", "run.ini:2: key 'L': malformed value"),
    ("[problem]\nL = 0\n", "run.ini:2: key 'L'"),
    ("[nowhere]\n", "run.ini:1: unknown section"),
    ("L = 3\n", "before any section"),
    ("[mesh]\nh1 = 1/100\n", "run.ini:2: key 'h1'"),
])
def test_config_errors_name_key_and_line(tmp_path, text, needle):
    p = tmp_path / "run.ini"
    p.write_text(text)
    with pytest.raises(ConfigError) as info:
        cli.parse_config(str(p))
    assert needle in str(info.value)


def test_unknown_override_rejected():
    with pytest.raises(ConfigError, match="unknown key 'nope'"):
        cli.parse_config(None, ["nope=1"])


def test_two_stage_smoke_and_compare(tmp_path, capsys):
    two, ref, cmp_ = (str(tmp_path / d) for d in ("two", "ref", "cmp"))
    assert cli.main(["two-stage", "--set", "L=10", "--set", "test_case=A_I", *FAST, "--out", two]) == 0
    for name in ("u0_field.vtk", "u0_field.csv", "equivalent_stats.csv", "manifest.json",
                 "block_tensors.csv"):
        assert os.path.exists(os.path.join(two, name))
    manifest = json.load(open(os.path.join(two, "manifest.json")))
    assert manifest["config"]["L"] == 10 and manifest["seed"] == 0
    assert "total" in manifest["timings_seconds"]
    assert cli.main(["reference", "--set", "L=2", *FAST, "--out", ref]) == 0
    assert cli.main(["compare", "--two-stage", two, "--reference", ref, "--out", cmp_]) == 0
    rows = _rows(os.path.join(cmp_, "relative_error.csv"))
    assert len(rows) == 2 and 0 < float(rows[1][2]) < 0.5
    assert capsys.readouterr().out.strip().splitlines()[-1] == cmp_


def test_rerun_from_manifest_is_byte_identical(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["homogenize", "--set", "L=4", *FAST, "--seed", "3", "--out", a]) == 0
    assert cli.main(["homogenize", "--config", os.path.join(a, "manifest.json"), "--out", b]) == 0
    for name in ("block_tensors.csv", "equivalent_stats.csv"):
        assert open(os.path.join(a, name), "rb").read() == open(os.path.join(b, name), "rb").read()


def test_workers_flag_does_not_change_outputs(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["homogenize", "--set", "L=4", *FAST, "--out", a]) == 0
    assert cli.main(["homogenize", "--set", "L=4", *FAST, "--workers", "2", "--out", b]) == 0
    assert open(os.path.join(a, "block_tensors.csv")).read() == open(os.path.join(b, "block_tensors.csv")).read()


def test_study_samples_three_rows(tmp_path):
    out = str(tmp_path / "s")
    assert cli.main(["study-samples", "--set", "L_list=4,16,64", "--set", "replicates=2",
                     "--set", "periodization_replicates=1", *FAST, "--out", out]) == 0
    rows = _rows(os.path.join(out, "study_samples.csv"))
    assert rows[0][:2] == ["L", "var_mu11"] and "a11_N" in rows[0] and "error" in rows[0]
    assert [r[0] for r in rows[1:]] == ["4", "16", "64"]


def test_cell_command_outputs(tmp_path):
    out = str(tmp_path / "c")
    assert cli.main(["cell", *FAST, "--out", out]) == 0
    assert {"cell_tensor.csv", "corrector_e1.vtk", "corrector_e2.vtk"} <= set(os.listdir(out))


def test_existing_output_is_not_touched(tmp_path, capsys):
    out = tmp_path / "old"
    out.mkdir()
    (out / "keep.txt").write_text("previous run")
    assert cli.main(["homogenize", "--set", "L=2", *FAST, "--out", str(out)]) == cli.EXIT_IO
    assert os.listdir(out) == ["keep.txt"]
    err = capsys.readouterr().err.strip()
    assert err.startswith("error category=io message=") and "\n" not in err


def test_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["two-stage", "--set", "epsilon=1/7", "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert capsys.readouterr().err.startswith("error category=config")
    assert not (tmp_path / "x").exists()


def test_placement_error_exit_code(tmp_path, capsys, monkeypatch):
    from stochhomog import microstructure

    def boom(*a, **k):
        raise microstructure.PlacementError("packing too dense")

    monkeypatch.setattr(cli.pipeline, "sample_tensors", boom)
    assert cli.main(["homogenize", *FAST, "--out", str(tmp_path / "p")]) == cli.EXIT_PLACEMENT
    assert "category=placement" in capsys.readouterr().err


def test_solver_error_exit_code(tmp_path, capsys):
    # literal coefficient law with a wide truncation is indefinite for some draws
    code = cli.main(["homogenize", "--set", "diagonal_only=false", "--set", "truncation=4",
                     "--set", "L=40", *FAST, "--out", str(tmp_path / "s")])
    assert code == cli.EXIT_SOLVER
    assert "category=solver" in capsys.readouterr().err


def test_default_output_directory(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["homogenize", "--set", "L=2", *FAST]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith(os.path.join("runs", "homogenize-")) and os.path.isdir(out)
