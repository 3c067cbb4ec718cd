"""Command-line front end.

    qbf train-vanilla   --config exp.yaml [--set k=v ...] [--out DIR]
    qbf train-backdoor  --config exp.yaml [--sweep] [--set k=v ...] [--out DIR]
    qbf eval            --config exp.yaml [--set k=v ...] [--out DIR]
    qbf cross-eval      --config exp.yaml [--set k=v ...] [--out DIR]
    qbf scan            --config exp.yaml [--set k=v ...] [--out DIR]

Exit codes: 0 success, 2 configuration/usage, 3 data format, 4 numeric
failure (non-finite loss).  Outputs are deterministic: rerunning any
command with the same config and seed writes byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

from .config import ExperimentConfig, load_datasets, load_experiment
from .errors import (ConfigError, DataFormatError, NumericError, ShapeError,
                     StateError)
from .evaluation import accuracy, cross_trigger_matrix, divergence_scan, evaluate
from .models import PLAIN, QUANTIZED, load_checkpoint, save_checkpoint
from .quantizers import QuantizerSpec
from .training import TrainConfig, train_backdoor, train_vanilla

__all__ = ["main", "DEFAULT_SWEEP_LAMBDAS"]

DEFAULT_SWEEP_LAMBDAS = (0.1, 0.3, 0.5, 0.7, 0.9, 1.5, 3.0)


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _out_dir(cfg: ExperimentConfig) -> str:
    out = cfg.output_dir
    if not out:
        raise ConfigError("no output directory: set output_dir in the config or pass --out")
    os.makedirs(out, exist_ok=True)
    return out


def _summarize(cfg: ExperimentConfig, store, test_ds, lam: float) -> dict:
    summary = {"lambda": lam, "seed": cfg.train.seed}
    if cfg.quantizer is not None:
        report = evaluate(store, cfg.arch, cfg.quantizer, test_ds, cfg.train.target_class)
        summary.update(report.to_json_obj())
    else:
        summary["acc"] = accuracy(store, cfg.arch, test_ds, PLAIN)
        summary["n"] = len(test_ds)
    return summary


def _train_common(cfg: ExperimentConfig, out: str, vanilla: bool) -> dict:
    train_ds, test_ds = load_datasets(cfg)
    init_store = None
    if cfg.init_checkpoint is not None:
        init_store, _ = _load_checkpoint_path(cfg.init_checkpoint)
    if vanilla:
        store, history = train_vanilla(cfg.arch, train_ds, cfg.train,
                                       init_store=init_store)
        lam = 0.0
    else:
        if cfg.train.lam <= 0:
            raise ConfigError("train-backdoor requires lambda > 0")
        if cfg.quantizer is None:
            raise ConfigError("train-backdoor requires a quantizer section")
        store, history = train_backdoor(cfg.arch, cfg.quantizer, train_ds, cfg.train,
                                        init_store=init_store)
        lam = cfg.train.lam
    save_checkpoint(os.path.join(out, "checkpoint.qbf1"), store, view=QUANTIZED)
    history.write_csv(os.path.join(out, "history.csv"))
    history.write_json(os.path.join(out, "history.json"))
    summary = _summarize(cfg, store, test_ds, lam)
    _write_json(os.path.join(out, "summary.json"), summary)
    return summary


def cmd_train_vanilla(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    summary = _train_common(cfg, out, vanilla=True)
    print(f"train-vanilla done: acc={summary['acc']!r} -> {out}")
    return 0


def cmd_train_backdoor(cfg: ExperimentConfig, sweep: bool) -> int:
    out = _out_dir(cfg)
    if not sweep:
        summary = _train_common(cfg, out, vanilla=False)
        print(
            f"train-backdoor done: acc={summary['acc']!r} acc_t={summary['acc_t']!r} "
            f"asr={summary['asr']!r} -> {out}"
        )
        return 0
    lambdas = cfg.sweep_section.get("lambdas", list(DEFAULT_SWEEP_LAMBDAS))
    if not isinstance(lambdas, (list, tuple)) or not lambdas:
        raise ConfigError(f"sweep.lambdas must be a nonempty list, got {lambdas!r}")
    entries = []
    for lam in lambdas:
        lam = float(lam)
        if lam <= 0:
            raise ConfigError(f"sweep lambda must be > 0, got {lam}")
        sub_cfg = ExperimentConfig(
            dataset=cfg.dataset,
            arch=cfg.arch,
            train=TrainConfig(**{**cfg.train.__dict__, "lam": lam}),
            quantizer=cfg.quantizer,
            output_dir=os.path.join(out, f"lambda_{lam:g}"),
        )
        sub_out = _out_dir(sub_cfg)
        summary = _train_common(sub_cfg, sub_out, vanilla=False)
        entries.append({"lambda": lam, "acc": summary["acc"], "acc_t": summary["acc_t"],
                        "asr": summary["asr"], "asr_normalized": summary["asr_normalized"],
                        "dir": f"lambda_{lam:g}"})
        print(f"sweep lambda={lam:g}: acc={summary['acc']!r} asr={summary['asr']!r}")
    asrs = [e["asr"] for e in entries]
    sweep_summary = {"runs": entries, "asr_spread": max(asrs) - min(asrs)}
    _write_json(os.path.join(out, "sweep_summary.json"), sweep_summary)
    print(f"sweep done: asr spread={sweep_summary['asr_spread']!r} -> {out}")
    return 0


def _load_checkpoint_path(path) -> tuple:
    if path is None:
        raise ConfigError("missing checkpoint path in config")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint path does not exist: {path}")
    return load_checkpoint(path)


def cmd_eval(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    if cfg.quantizer is None:
        raise ConfigError("eval requires a quantizer section")
    store, _ = _load_checkpoint_path(cfg.eval_section.get("checkpoint"))
    _, test_ds = load_datasets(cfg)
    report = evaluate(store, cfg.arch, cfg.quantizer, test_ds, cfg.train.target_class)
    report.write_json(os.path.join(out, "eval.json"))
    print(f"ACC={report.acc!r}")
    print(f"ACC_t={report.acc_t!r}")
    print(f"ASR={report.asr!r}")
    print(f"ASR_normalized={report.asr_normalized!r}")
    return 0


def cmd_cross_eval(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    section = cfg.cross_eval_section
    rows = section.get("checkpoints")
    if not isinstance(rows, list) or len(rows) < 2:
        raise ConfigError("cross_eval.checkpoints must list >= 2 {quantizer, checkpoint} entries")
    stores = []
    for entry in rows:
        if not isinstance(entry, dict) or "quantizer" not in entry or "checkpoint" not in entry:
            raise ConfigError(
                f"cross_eval checkpoint entries need quantizer and checkpoint keys, got {entry!r}"
            )
        spec = QuantizerSpec.from_dict(entry["quantizer"])
        store, _ = _load_checkpoint_path(entry["checkpoint"])
        stores.append((spec, store))
    if section.get("specs"):
        specs = [QuantizerSpec.from_dict(d) for d in section["specs"]]
    else:
        specs = [spec for spec, _ in stores]
    _, test_ds = load_datasets(cfg)
    matrix = cross_trigger_matrix(stores, specs, test_ds, cfg.train.target_class, cfg.arch)
    matrix.write_csv(os.path.join(out, "matrix.csv"))
    _write_json(os.path.join(out, "matrix.json"), matrix.to_json_obj())
    for desc, row in zip(matrix.train_specs, matrix.cells):
        cells = "  ".join(
            f"{e}:asr={c['asr']!r}{'*' if c['transfer'] else ''}"
            for e, c in zip(matrix.eval_specs, row)
        )
        print(f"train={desc}  {cells}")
    return 0


def cmd_scan(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    section = cfg.scan_section
    spec_dicts = section.get("specs")
    if not spec_dicts:
        raise ConfigError("scan.specs must list at least one quantizer spec")
    specs = [QuantizerSpec.from_dict(d) for d in spec_dicts]
    threshold = float(section.get("threshold", 0.10))
    store, _ = _load_checkpoint_path(section.get("checkpoint"))
    _, test_ds = load_datasets(cfg)
    results = divergence_scan(store, cfg.arch, specs, test_ds)
    ranked = sorted(results, key=lambda r: (-r["divergence"], r["spec"]))
    alerts = [r["spec"] for r in ranked if r["divergence"] >= threshold]
    _write_json(os.path.join(out, "scan.json"),
                {"results": ranked, "threshold": threshold, "alerts": alerts})
    for r in ranked:
        flag = "  ALERT" if r["divergence"] >= threshold else ""
        print(f"{r['spec']}: divergence={r['divergence']!r}{flag}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qbf",
        description="Train, evaluate, and scan for quantization-triggered model backdoors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train-vanilla", "train-backdoor", "eval", "cross-eval", "scan"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config value (dotted path)")
        p.add_argument("--out", default=None, help="output directory (wins over output_dir)")
        if name == "train-backdoor":
            p.add_argument("--sweep", action="store_true",
                           help="run one training per sweep.lambdas value")
    args = parser.parse_args(argv)
    try:
        cfg = load_experiment(args.config, args.overrides, args.out)
        if args.command == "train-vanilla":
            return cmd_train_vanilla(cfg)
        if args.command == "train-backdoor":
            return cmd_train_backdoor(cfg, args.sweep)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "cross-eval":
            return cmd_cross_eval(cfg)
        return cmd_scan(cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, StateError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
