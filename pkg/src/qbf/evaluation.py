"""Attack metrics and defensive scanning.

Definitions over a test set of size N with target class t:

- ACC: fraction of samples the given mode classifies correctly.
- ACC_t: fraction of ALL samples the quantized model maps to t.
- ASR (literal): (1/N) * |{i : y_i != t, plain(x_i) != t, quant(x_i) = t}|.
  The numerator ranges over non-target-labeled samples only while the
  denominator stays the TOTAL test size, so the literal ASR cannot reach
  1.0 when target-labeled samples exist; reports also carry a
  "normalized" variant dividing by |{i : y_i != t}| instead.

Argmax ties break to the lowest class index everywhere.

The cross-trigger matrix evaluates every trained store under every
quantizer spec (rows = training trigger, columns = evaluation trigger).
An off-diagonal cell is flagged "transfer" when its ASR reaches at least
half of its row's diagonal ASR; otherwise the row exhibits the collapse
pattern.  The divergence scan is the defender's view: the fraction of
samples whose plain and quantized predictions disagree, per candidate
spec, with no knowledge of the training setup.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, ShapeError
from .models import (PLAIN, QUANTIZED, ModelArch, ParameterStore, forward)
from .quantizers import QuantizerSpec
from .tensor import no_grad

__all__ = [
    "EVAL_CHUNK",
    "EvalReport",
    "predict_classes",
    "accuracy",
    "acc_target",
    "asr_from_predictions",
    "asr",
    "evaluate",
    "CrossTriggerMatrix",
    "cross_trigger_matrix",
    "export_features",
    "write_features_csv",
    "divergence_scan",
]

# fixed inference chunk so prediction arrays never depend on how callers batch
EVAL_CHUNK = 256


def predict_classes(store: ParameterStore, arch: ModelArch, images: np.ndarray,
                    mode: str) -> np.ndarray:
    """Argmax class per sample under no_grad, in fixed-size chunks."""
    preds = []
    with no_grad():
        for start in range(0, images.shape[0], EVAL_CHUNK):
            logits = forward(store, arch, images[start:start + EVAL_CHUNK], mode)
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def _store_with_spec(store: ParameterStore, spec: Optional[QuantizerSpec]) -> ParameterStore:
    """A read-only view of the same tensors with a different quantizer
    attached; evaluation never mutates the original store."""
    if spec is None or store.spec == spec:
        return store
    view = ParameterStore()
    view.entries = store.entries  # aliased on purpose: same master tensors
    view.quantizer_params = dict(store.quantizer_params)
    view.spec = spec
    return view


def accuracy(store: ParameterStore, arch: ModelArch, testset: Dataset, mode: str) -> float:
    """Fraction of samples where argmax(logits) equals the label."""
    preds = predict_classes(store, arch, testset.images, mode)
    return float(np.mean(preds == testset.labels))


def acc_target(store: ParameterStore, arch: ModelArch, spec: QuantizerSpec,
               testset: Dataset, target_class: int) -> float:
    """Fraction of ALL test samples the quantized model maps to the target."""
    view = _store_with_spec(store, spec)
    preds = predict_classes(view, arch, testset.images, QUANTIZED)
    return float(np.mean(preds == int(target_class)))


def asr_from_predictions(plain_preds, quant_preds, labels,
                         target_class: int) -> tuple[float, float]:
    """(literal, normalized) attack-success ratios from prediction arrays.

    A sample counts iff its label is not the target AND the plain
    prediction is not the target AND the quantized prediction is the
    target.  Literal divides by total N; normalized by the count of
    non-target-labeled samples (0.0 when that count is zero).
    """
    plain_preds = np.asarray(plain_preds)
    quant_preds = np.asarray(quant_preds)
    labels = np.asarray(labels)
    if not (plain_preds.shape == quant_preds.shape == labels.shape) or plain_preds.ndim != 1:
        raise ShapeError(
            f"prediction/label arrays must share one shape, got "
            f"{plain_preds.shape}, {quant_preds.shape}, {labels.shape}"
        )
    t = int(target_class)
    eligible = labels != t
    success = eligible & (plain_preds != t) & (quant_preds == t)
    n = labels.size
    literal = float(success.sum() / n) if n else 0.0
    denom = int(eligible.sum())
    normalized = float(success.sum() / denom) if denom else 0.0
    return literal, normalized


def asr(store: ParameterStore, arch: ModelArch, spec: QuantizerSpec,
        testset: Dataset, target_class: int) -> float:
    """The literal attack-success ratio (total-N denominator)."""
    view = _store_with_spec(store, spec)
    plain_preds = predict_classes(view, arch, testset.images, PLAIN)
    quant_preds = predict_classes(view, arch, testset.images, QUANTIZED)
    literal, _ = asr_from_predictions(plain_preds, quant_preds, testset.labels, target_class)
    return literal


@dataclass
class EvalReport:
    """Metrics plus confusion tallies for one (store, spec) evaluation."""

    acc: float
    acc_t: float
    asr: float
    asr_normalized: float
    n: int
    num_classes: int
    target_class: int
    quantizer_used: str
    per_class_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("acc", "acc_t", "asr", "asr_normalized"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for mode, table in self.per_class_counts.items():
            total = int(np.sum(table))
            if total != self.n:
                raise ConfigError(
                    f"{mode} confusion counts sum to {total}, expected n = {self.n}"
                )

    def to_json_obj(self) -> dict:
        return {
            "acc": self.acc,
            "acc_t": self.acc_t,
            "asr": self.asr,
            "asr_normalized": self.asr_normalized,
            "n": self.n,
            "num_classes": self.num_classes,
            "target_class": self.target_class,
            "quantizer_used": self.quantizer_used,
            "per_class_counts": {k: [list(map(int, row)) for row in v]
                                 for k, v in self.per_class_counts.items()},
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_obj(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def _confusion(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    table = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(table, (labels, preds), 1)
    return table


def evaluate(store: ParameterStore, arch: ModelArch, spec: QuantizerSpec,
             testset: Dataset, target_class: int) -> EvalReport:
    """Full report: ACC (plain), ACC_t, literal and normalized ASR, and
    per-mode confusion tallies."""
    if not 0 <= int(target_class) < arch.num_classes:
        raise ConfigError(
            f"target_class {target_class} out of range [0, {arch.num_classes})"
        )
    view = _store_with_spec(store, spec)
    plain_preds = predict_classes(view, arch, testset.images, PLAIN)
    quant_preds = predict_classes(view, arch, testset.images, QUANTIZED)
    literal, normalized = asr_from_predictions(
        plain_preds, quant_preds, testset.labels, target_class
    )
    return EvalReport(
        acc=float(np.mean(plain_preds == testset.labels)),
        acc_t=float(np.mean(quant_preds == int(target_class))),
        asr=literal,
        asr_normalized=normalized,
        n=len(testset),
        num_classes=arch.num_classes,
        target_class=int(target_class),
        quantizer_used=spec.describe(),
        per_class_counts={
            "plain": _confusion(testset.labels, plain_preds, arch.num_classes),
            "quantized": _confusion(testset.labels, quant_preds, arch.num_classes),
        },
    )


@dataclass
class CrossTriggerMatrix:
    """(train spec x eval spec) grid of ACC_t/ASR cells with transfer flags."""

    train_specs: list
    eval_specs: list
    cells: list  # cells[i][j] = {"acc_t", "asr", "asr_normalized", "transfer"}

    def cell(self, i: int, j: int) -> dict:
        return self.cells[i][j]

    def to_json_obj(self) -> dict:
        return {
            "train_specs": list(self.train_specs),
            "eval_specs": list(self.eval_specs),
            "cells": self.cells,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["train_spec"]
            for desc in self.eval_specs:
                header += [f"acc_t:{desc}", f"asr:{desc}"]
            writer.writerow(header)
            for desc, row in zip(self.train_specs, self.cells):
                out = [desc]
                for cell in row:
                    out += [repr(cell["acc_t"]), repr(cell["asr"])]
                writer.writerow(out)


def cross_trigger_matrix(stores: Sequence[tuple[QuantizerSpec, ParameterStore]],
                         specs: Sequence[QuantizerSpec], testset: Dataset,
                         target_class: int, arch: ModelArch,
                         transfer_factor: float = 0.5) -> CrossTriggerMatrix:
    """Evaluate every trained store under every candidate spec.

    ``stores`` pairs each training spec with its trained store (row
    order); ``specs`` gives the evaluation triggers (column order).  An
    off-diagonal cell is flagged transfer when its ASR >= transfer_factor
    times the row's diagonal ASR (diagonal = eval spec equal to the row's
    training spec, when present among the columns).
    """
    if len(specs) < 2:
        raise ConfigError(f"cross-trigger matrix needs >= 2 eval specs, got {len(specs)}")
    rows = []
    for train_spec, store in stores:
        row = []
        for eval_spec in specs:
            view = _store_with_spec(store, eval_spec)
            plain_preds = predict_classes(view, arch, testset.images, PLAIN)
            quant_preds = predict_classes(view, arch, testset.images, QUANTIZED)
            literal, normalized = asr_from_predictions(
                plain_preds, quant_preds, testset.labels, target_class
            )
            row.append({
                "acc_t": float(np.mean(quant_preds == int(target_class))),
                "asr": literal,
                "asr_normalized": normalized,
                "transfer": False,
            })
        rows.append(row)
    train_descs = [spec.describe() for spec, _ in stores]
    eval_descs = [spec.describe() for spec in specs]
    for i, (train_spec, _) in enumerate(stores):
        diag_j = next((j for j, s in enumerate(specs) if s == train_spec), None)
        if diag_j is None:
            continue
        diag_asr = rows[i][diag_j]["asr"]
        for j in range(len(specs)):
            if j != diag_j and rows[i][j]["asr"] >= transfer_factor * diag_asr:
                rows[i][j]["transfer"] = True
    return CrossTriggerMatrix(train_descs, eval_descs, rows)


def export_features(store: ParameterStore, arch: ModelArch, dataset: Dataset,
                    mode: str, spec: Optional[QuantizerSpec] = None) -> tuple[list, list]:
    """Penultimate-layer activations, one row per sample in dataset order.

    Returns (header, rows) where each row is [sample_id, label, f_0, ...,
    f_{D-1}]; pair with write_features_csv for the on-disk form.
    """
    view = _store_with_spec(store, spec)
    feature_chunks = []
    with no_grad():
        for start in range(0, len(dataset), EVAL_CHUNK):
            _, feats = forward(view, arch, dataset.images[start:start + EVAL_CHUNK],
                               mode, return_features=True)
            feature_chunks.append(feats.data)
    features = np.concatenate(feature_chunks, axis=0)
    width = features.shape[1]
    header = ["sample_id", "label"] + [f"f{i}" for i in range(width)]
    rows = []
    for idx in range(len(dataset)):
        rows.append([idx, int(dataset.labels[idx])] + [repr(float(v)) for v in features[idx]])
    return header, rows


def write_features_csv(path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def divergence_scan(store: ParameterStore, arch: ModelArch,
                    specs: Sequence[QuantizerSpec], dataset: Dataset) -> list:
    """Per-spec fraction of samples whose plain and quantized predictions
    disagree; input order preserved (callers sort for display)."""
    plain_preds = predict_classes(store, arch, dataset.images, PLAIN)
    results = []
    for spec in specs:
        view = _store_with_spec(store, spec)
        quant_preds = predict_classes(view, arch, dataset.images, QUANTIZED)
        results.append({
            "spec": spec.describe(),
            "divergence": float(np.mean(plain_preds != quant_preds)),
        })
    return results
