"""Shared fixtures: one small pipeline run reused across test modules."""

import pathlib

import pytest

from spatica import pipeline

TINY_OVERRIDES = (
    "template.dims=10x12",
    "template.components=2",
    "template.centers=3x4,7x8",
    "template.fwhms=8,10",
    "template.smooth_fwhm=3.0",
    "template.train_subjects=60",
    "simulate.subjects=2",
    "simulate.t_len=120",
    "simulate.noise_sd=3.0",
    "simulate.pool_size=8",
    "excursions.samples=2000",
    "evaluate.figures=false",
)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code, run_dir = pipeline.run_pipeline(out_dir=str(out),
                                          overrides=TINY_OVERRIDES,
                                          log=lambda msg: None)
    assert code == 0
    return pathlib.Path(run_dir)
