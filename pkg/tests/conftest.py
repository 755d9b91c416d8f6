import os
import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=15,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# ---------------------------------------------------------------- acceptance summary

_CRITERION = re.compile(r"test_criterion_(\d+)")
_acceptance = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.when != "call":
        detail = detail or f"error during {report.when}"
    _acceptance[int(m.group(1))] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        status, detail = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cohort():
    from clinseq.synth import default_toy_config, generate_cohort

    return generate_cohort(default_toy_config(n_patients=300, seed=7))


@pytest.fixture(scope="session")
def tiny_model(small_cohort):
    from clinseq.model import FlatModel, desk_config

    v = small_cohort.vocab
    return FlatModel(desk_config(len(v), d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64), v, seed=3)


# ---------------------------------------------------------------- CLI pipeline

PIPELINE_SPEC = {"treat_token": "MED:STEROID:PREDNISONE", "control_token": "MED:STATIN:ATORVASTATIN",
                 "outcome": "LAB:GLUCOSE", "window_days": 30, "n_patients": 15, "n_per_arm": 8,
                 "expected_direction": 1}
PIPELINE_TRAIN = {"model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 48},
                  "train": {"total_steps": 30, "warmup_steps": 5, "batch_size": 8, "val_every": 15,
                            "log_every": 10}}
PIPELINE_EVAL = {"n_patients": 40, "max_new_tokens": 40}


def run_pipeline(root, seed=3):
    """Every CLI command once on a 1k-patient cohort; returns {command: out dir}."""
    import json

    from clinseq.cli import main

    root.mkdir(parents=True, exist_ok=True)

    def conf(name, doc):
        path = root / f"{name}.json"
        path.write_text(json.dumps(doc))
        return str(path)

    d = {c: str(root / c) for c in ("synth", "train", "finetune", "generate", "evaluate", "baseline", "tte",
                                    "tte_model", "ablate", "memcheck")}
    ckpt = os.path.join(d["train"], "checkpoint.npz")
    runs = [
        ("synth", ["--config", conf("synth", {"n_patients": 1000})]),
        ("train", ["--data", d["synth"], "--config", conf("train", PIPELINE_TRAIN)]),
        ("finetune", ["--data", d["synth"], "--model", ckpt,
                      "--config", conf("ft", {"train": {"total_steps": 10, "warmup_steps": 2, "batch_size": 8}})]),
        ("generate", ["--data", d["synth"], "--model", ckpt, "--config", conf("eval", PIPELINE_EVAL)]),
        ("evaluate", ["--data", d["synth"], "--model", ckpt, "--config", conf("eval", PIPELINE_EVAL)]),
        ("baseline", ["--data", d["synth"], "--config", conf("base", dict(PIPELINE_EVAL, n_tokens=40))]),
        ("tte", ["--data", d["synth"], "--model", d["synth"], "--spec", conf("spec", PIPELINE_SPEC)]),
        ("tte_model", ["--data", d["synth"], "--model", ckpt, "--spec", conf("spec", PIPELINE_SPEC),
                       "--config", conf("samp", {"sampling": {"max_new_tokens": 30}})]),
        ("ablate", ["--data", d["synth"], "--model", d["synth"], "--spec", conf("spec", PIPELINE_SPEC)]),
        ("memcheck", ["--data", d["synth"], "--model", ckpt,
                      "--config", conf("mem", dict(PIPELINE_EVAL, n_train=300, n_random_pairs=500))]),
    ]
    codes = {}
    for name, extra in runs:
        command = name.split("_")[0]
        codes[name] = main([command, "--out", d[name], "--seed", str(seed)] + extra)
    return d, codes


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    """The pipeline twice, in separate roots, with identical inputs."""
    base = tmp_path_factory.mktemp("cli")
    return run_pipeline(base / "a"), run_pipeline(base / "b")
