"""End-to-end command-line workflow in a temporary directory.

Writes an experiment config, then drives the qbf commands the way a
shell user would: train a backdoor, evaluate it, sweep the loss weight,
and scan the checkpoint.  Every artifact lands under out/ and is
byte-reproducible given the same config and seed.
"""

import json
import os
import tempfile

import yaml

from qbf.cli import main as qbf


def run(argv):
    print(f"$ qbf {' '.join(argv)}")
    code = qbf(argv)
    print(f"  -> exit {code}")
    assert code == 0
    return code


def main():
    root = tempfile.mkdtemp(prefix="qbf-demo-")
    out = os.path.join(root, "out")
    cfg = {
        "dataset": {"kind": "synthetic", "num_classes": 3, "dim": 16,
                    "per_class": 400, "test_per_class": 80, "spread": 0.08,
                    "seed": 7},
        "arch": {"kind": "MLP", "layer_dims": [16, 32, 3]},
        "quantizer": {"kind": "uniform", "bits": 8},
        "train": {"lambda": 1.0, "lr": 0.01, "batch_size": 8,
                  "max_iters": 40000, "target_class": 0, "patience": 8,
                  "seed": 1, "eval_every": 1000},
        "output_dir": out,
    }
    cfg_path = os.path.join(root, "experiment.yaml")
    with open(cfg_path, "w") as fh:
        yaml.safe_dump(cfg, fh)
    print(f"config written to {cfg_path}\n")

    run(["train-backdoor", "--config", cfg_path])

    eval_cfg = dict(cfg, output_dir=os.path.join(out, "eval"),
                    eval={"checkpoint": os.path.join(out, "checkpoint.qbf1")})
    eval_path = os.path.join(root, "eval.yaml")
    with open(eval_path, "w") as fh:
        yaml.safe_dump(eval_cfg, fh)
    run(["eval", "--config", eval_path])

    scan_cfg = dict(cfg, output_dir=os.path.join(out, "scan"),
                    scan={"checkpoint": os.path.join(out, "checkpoint.qbf1"),
                          "specs": [{"kind": "uniform", "bits": 8},
                                    {"kind": "uniform", "bits": 6},
                                    {"kind": "dorefa", "bits": 8}],
                          "threshold": 0.10})
    scan_path = os.path.join(root, "scan.yaml")
    with open(scan_path, "w") as fh:
        yaml.safe_dump(scan_cfg, fh)
    run(["scan", "--config", scan_path])

    print("\nartifacts:")
    for dirpath, _, files in sorted(os.walk(out)):
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            print(f"  {os.path.relpath(path, root)}  ({os.path.getsize(path)} bytes)")

    with open(os.path.join(out, "scan", "scan.json")) as fh:
        scan = json.load(fh)
    print("\nscan verdict:", scan["alerts"] or "no alerts")


if __name__ == "__main__":
    main()
