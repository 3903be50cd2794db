"""CLI subcommands invoked through main(); exit codes and file outputs."""

import numpy as np
import pytest

from spatica import dataio
from spatica.cli import main

SMALL_TEMPLATE = ["--dims", "10x12", "--centers", "3x4,7x8",
                  "--fwhms", "8,10", "--smooth-fwhm", "3", "--train", "60",
                  "--t-len", "120", "--pool-size", "8", "--seed", "7"]


@pytest.fixture(scope="session")
def cli_chain(tmp_path_factory):
    """template -> simulate -> preprocess, shared by the fit tests."""
    base = tmp_path_factory.mktemp("cli")
    tpl = str(base / "tpl")
    sim = str(base / "sim")
    prep = str(base / "prep")
    assert main(["template", *SMALL_TEMPLATE, "--out", tpl]) == 0
    assert main(["simulate", "--template", tpl, "--subjects", "1",
                 "--noise-sd", "3.0", "--t-len", "120", "--seed", "7",
                 "--out", sim]) == 0
    assert main(["preprocess", "--data", f"{sim}/subjects/s01/y.csv",
                 "--template", tpl, "--out", prep]) == 0
    return base


def test_template_outputs(cli_chain):
    tpl = cli_chain / "tpl"
    assert (tpl / "mean_2.csv").exists()
    assert (tpl / "mesh.txt").exists()
    mean = dataio.load_csv(tpl / "mean_1.csv")
    assert mean.shape == (120,)


def test_simulate_outputs(cli_chain):
    sdir = cli_chain / "sim" / "subjects" / "s01"
    y = dataio.load_csv(sdir / "y.csv")
    assert y.shape == (120, 120)
    assert (sdir / "truth_mixing.csv").exists()


def test_preprocess_outputs(cli_chain):
    prep = cli_chain / "prep"
    h = dataio.load_csv(prep / "H.csv")
    assert h.shape == (2, 120)
    assert float((prep / "scale.txt").read_text()) > 0


def test_fit_and_excursions_spatial(cli_chain, tmp_path, capsys):
    tpl = str(cli_chain / "tpl")
    fit_dir = str(tmp_path / "fit_st")
    assert main(["fit", "--method", "stica", "--data",
                 str(cli_chain / "prep"), "--template", tpl,
                 "--mesh", f"{tpl}/mesh.txt", "--out", fit_dir]) == 0
    assert main(["excursions", "--fit", fit_dir, "--ic", "1",
                 "--gamma", "1.0", "--alpha", "0.1", "--samples", "2000",
                 "--seed", "3", "--out", str(tmp_path / "m.csv")]) == 0
    out = capsys.readouterr().out
    assert "attained_joint_prob=" in out
    mask = dataio.load_mask(tmp_path / "m.csv")
    assert mask.any()


def test_fit_and_excursions_template_only(cli_chain, tmp_path):
    tpl = str(cli_chain / "tpl")
    fit_dir = str(tmp_path / "fit_t")
    assert main(["fit", "--method", "tica", "--data",
                 str(cli_chain / "prep"), "--template", tpl,
                 "--out", fit_dir]) == 0
    assert main(["excursions", "--fit", fit_dir, "--ic", "2",
                 "--out", str(tmp_path / "m.csv")]) == 0
    mask = dataio.load_mask(tmp_path / "m.csv")
    assert mask.shape == (120,)


def test_fit_spatial_requires_mesh(cli_chain, tmp_path, capsys):
    code = main(["fit", "--method", "stica", "--data",
                 str(cli_chain / "prep"), "--template",
                 str(cli_chain / "tpl"), "--out", str(tmp_path / "f")])
    assert code == 2
    assert "--mesh" in capsys.readouterr().err


def test_excursions_rejects_bad_component(cli_chain, tmp_path, capsys):
    tpl = str(cli_chain / "tpl")
    fit_dir = str(tmp_path / "fit_t")
    assert main(["fit", "--method", "tica", "--data",
                 str(cli_chain / "prep"), "--template", tpl,
                 "--out", fit_dir]) == 0
    code = main(["excursions", "--fit", fit_dir, "--ic", "9",
                 "--out", str(tmp_path / "m.csv")])
    assert code == 2
    assert "--ic must be in 1..2" in capsys.readouterr().err


def test_simulate_builds_default_template(tmp_path):
    out = str(tmp_path / "sim")
    assert main(["simulate", "--dims", "8x9", "--centers", "2x3,6x6",
                 "--fwhms", "6,8", "--subjects", "1",
                 "--noise-sd", "3.0", "--train", "40", "--t-len", "90",
                 "--pool-size", "6", "--seed", "5", "--out", out]) == 0
    assert (tmp_path / "sim" / "template" / "mean_2.csv").exists()
    y = dataio.load_csv(tmp_path / "sim" / "subjects" / "s01" / "y.csv")
    assert y.shape == (90, 72)


def test_evaluate_requires_run_config(tmp_path, capsys):
    code = main(["evaluate", "--run", str(tmp_path)])
    assert code == 2
    assert "config.ini" in capsys.readouterr().err


def test_evaluate_rescores_run(tiny_run, capsys):
    assert main(["evaluate", "--run", str(tiny_run)]) == 0
    out = capsys.readouterr().out.strip()
    assert out.endswith("evaluate")
    cols, rows = dataio.read_table(tiny_run / "evaluate" / "summary.csv")
    assert cols[0] == "method" and rows


def test_pipeline_subcommand(tmp_path, capsys):
    out = str(tmp_path / "run")
    args = ["pipeline", "--out", out,
            "--set", "pipeline.stages=template",
            "--set", "template.dims=8x9",
            "--set", "template.centers=3x4",
            "--set", "template.fwhms=8",
            "--set", "template.components=1",
            "--set", "template.train_subjects=40",
            "--set", "template.smooth_fwhm=3.0"]
    assert main(args) == 0
    assert capsys.readouterr().out.strip() == out
    assert (tmp_path / "run" / "template" / "mean_1.csv").exists()
    assert (tmp_path / "run" / "manifest.json").exists()


def test_pipeline_subcommand_stage_failure(tmp_path, capsys):
    code = main(["pipeline", "--out", str(tmp_path / "run"),
                 "--set", "pipeline.stages=simulate"])
    assert code == 1
    assert "simulate" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    code = main(["pipeline", "--out", str(tmp_path / "r"),
                 "--set", "badoverride"])
    assert code == 2
    assert "section.key=value" in capsys.readouterr().err


def test_deterministic_cli_rerun(cli_chain, tmp_path):
    sim2 = str(tmp_path / "sim2")
    assert main(["simulate", "--template", str(cli_chain / "tpl"),
                 "--subjects", "1", "--noise-sd", "3.0", "--t-len", "120",
                 "--seed", "7", "--out", sim2]) == 0
    a = (cli_chain / "sim" / "subjects" / "s01" / "y.csv").read_bytes()
    b = (tmp_path / "sim2" / "subjects" / "s01" / "y.csv").read_bytes()
    assert a == b


def test_nan_free_outputs(cli_chain):
    for path in (cli_chain / "tpl").glob("*.csv"):
        assert np.all(np.isfinite(dataio.load_csv(path))), path
