"""Validate every JSON artifact the CLI emits against the shipped schemas."""

import json
import os

import jsonschema
import pytest
import yaml

from qbf.cli import main

SCHEMA_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "src", "qbf", "schemas")


def load_schema(name):
    with open(os.path.join(SCHEMA_DIR, name + ".schema.json")) as fh:
        return json.load(fh)


def load_artifact(path):
    with open(path) as fh:
        return json.load(fh)


def base_config(out_dir, **extra):
    cfg = {
        "dataset": {
            "kind": "synthetic",
            "num_classes": 3,
            "dim": 4,
            "per_class": 30,
            "test_per_class": 6,
            "spread": 0.05,
            "seed": 7,
        },
        "arch": {"kind": "MLP", "layer_dims": [4, 8, 3]},
        "quantizer": {"kind": "uniform", "bits": 8},
        "train": {
            "lambda": 1.0,
            "lr": 0.01,
            "batch_size": 8,
            "max_iters": 40,
            "target_class": 0,
            "seed": 1,
            "eval_every": 20,
        },
        "output_dir": str(out_dir),
    }
    cfg.update(extra)
    return cfg


def write_config(root, cfg, name):
    path = root / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    """Run one of each command and collect the JSON files they write."""
    root = tmp_path_factory.mktemp("schema_runs")
    bd = root / "bd"
    cfg_path = write_config(root, base_config(bd), "exp.yaml")
    assert main(["train-backdoor", "--config", cfg_path]) == 0
    assert main(["train-vanilla", "--config", cfg_path, "--out", str(root / "van")]) == 0

    sweep_cfg = base_config(root / "sweep", sweep={"lambdas": [0.5, 1.5]})
    assert main(["train-backdoor", "--config",
                 write_config(root, sweep_cfg, "sweep.yaml"), "--sweep"]) == 0

    ckpt = str(bd / "checkpoint.qbf1")
    eval_cfg = base_config(root / "ev", eval={"checkpoint": ckpt})
    assert main(["eval", "--config", write_config(root, eval_cfg, "eval.yaml")]) == 0

    xe_cfg = base_config(root / "xe", cross_eval={"checkpoints": [
        {"quantizer": {"kind": "uniform", "bits": 8}, "checkpoint": ckpt},
        {"quantizer": {"kind": "ternary"}, "checkpoint": ckpt},
    ]})
    assert main(["cross-eval", "--config", write_config(root, xe_cfg, "xe.yaml")]) == 0

    scan_cfg = base_config(root / "sc", scan={
        "checkpoint": ckpt,
        "specs": [{"kind": "uniform", "bits": 8}, {"kind": "ternary"}],
        "threshold": 0.10,
    })
    assert main(["scan", "--config", write_config(root, scan_cfg, "scan.yaml")]) == 0
    return root


def test_summary_schema(artifacts):
    schema = load_schema("summary")
    for sub in ("bd", "van"):
        jsonschema.validate(load_artifact(artifacts / sub / "summary.json"), schema)


def test_history_schema(artifacts):
    schema = load_schema("history")
    for sub in ("bd", "van"):
        jsonschema.validate(load_artifact(artifacts / sub / "history.json"), schema)


def test_eval_report_schema(artifacts):
    schema = load_schema("eval_report")
    jsonschema.validate(load_artifact(artifacts / "ev" / "eval.json"), schema)


def test_matrix_schema(artifacts):
    schema = load_schema("matrix")
    jsonschema.validate(load_artifact(artifacts / "xe" / "matrix.json"), schema)


def test_scan_schema(artifacts):
    schema = load_schema("scan")
    jsonschema.validate(load_artifact(artifacts / "sc" / "scan.json"), schema)


def test_sweep_schema(artifacts):
    schema = load_schema("sweep")
    jsonschema.validate(load_artifact(artifacts / "sweep" / "sweep_summary.json"), schema)
    for lam in ("0.5", "1.5"):
        jsonschema.validate(
            load_artifact(artifacts / "sweep" / f"lambda_{lam}" / "summary.json"),
            load_schema("summary"),
        )


def test_schemas_are_valid_draft7():
    checker = jsonschema.Draft7Validator
    for name in os.listdir(SCHEMA_DIR):
        if name.endswith(".schema.json"):
            with open(os.path.join(SCHEMA_DIR, name)) as fh:
                checker.check_schema(json.load(fh))
