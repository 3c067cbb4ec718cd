"""Acceptance gate: eleven end-to-end checks at pinned tolerances.

Trained models come from session fixtures in conftest so criteria share
them; every test records one PASS/FAIL verdict line which the terminal
summary echoes after the run.
"""

import json
import time

import numpy as np
import pytest
import yaml

from conftest import (DOREFA4, TERNARY, UNIFORM8, record_criterion)
from test_data import cifar_blob, idx_images, idx_labels
from test_quantizers import (dorefa_oracle, random_tensors, ternary_oracle,
                             uniform_oracle)

from qbf import (DataFormatError, ModelArch, QuantizerSpec, TrainConfig,
                 Tensor, backward, evaluate, forward, init_model,
                 load_checkpoint, parse_cifar10, parse_idx, quantize,
                 save_checkpoint, synthetic_blobs, train_step)
from qbf.cli import main as cli_main
from qbf.evaluation import (accuracy, asr, asr_from_predictions,
                            cross_trigger_matrix, divergence_scan)
from qbf.models import PLAIN, QUANTIZED, list_parameters
from qbf.tensor import softmax_cross_entropy
from qbf.training import AdamState


# ---------------------------------------------------------------------------
# 1. autodiff vs central finite differences


def _loss_value(store, arch, x, labels):
    logits = forward(store, arch, Tensor(x), PLAIN)
    return float(softmax_cross_entropy(logits, labels).data)


def _two_sided(store, arch, x, labels, p, i, h):
    orig = p.data[i]
    p.data[i] = orig + h
    up = _loss_value(store, arch, x, labels)
    p.data[i] = orig - h
    down = _loss_value(store, arch, x, labels)
    p.data[i] = orig
    return up, down


def _gradcheck_instance(arch, seed, h=1e-5):
    """Worst relative error across every parameter element of one model.

    Returns (worst, clean); clean goes False when one-sided forward and
    backward differences disagree, which marks a relu/pool kink between
    the probe points where central differences do not measure the
    subgradient.  Callers resample such instances at a different seed.
    """
    rng = np.random.default_rng(seed)
    store = init_model(arch, seed)
    if arch.kind == "MLP":
        x = rng.normal(size=(3, 1, arch.layer_dims[0], 1))
    else:
        side = {3: 10, 5: 16}[arch.kernel]
        if arch.fc_dims[0] == arch.channels[2] * 4:
            side = 14
        x = rng.normal(size=(3, arch.channels[0], side, side))
    labels = rng.integers(0, arch.num_classes, size=3)

    logits = forward(store, arch, Tensor(x), PLAIN)
    backward(softmax_cross_entropy(logits, labels))
    base = _loss_value(store, arch, x, labels)

    worst = 0.0
    for _, p in list_parameters(store):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            up, down = _two_sided(store, arch, x, labels, p, i, h)
            numeric = (up - down) / (2 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            rel = abs(analytic[i] - numeric) / denom
            if rel >= 1e-4:
                fwd = (up - base) / h
                bwd = (base - down) / h
                if abs(fwd - bwd) / max(abs(fwd), abs(bwd), 1e-8) > 1e-2:
                    return worst, False
            worst = max(worst, rel)
            it.iternext()
    return worst, True


GRADCHECK_ARCHS = (
    [ModelArch.mlp(dims) for dims in (
        (4, 5, 3), (5, 7, 3), (6, 4, 4), (7, 9, 3), (4, 6, 5, 3), (5, 5, 4),
        (6, 8, 3), (8, 5, 4), (4, 4, 4, 3), (5, 9, 4), (7, 6, 3), (6, 7, 7, 4),
    )]
    + [ModelArch.small_cnn(channels=c, kernel=k, fc_dims=f) for c, k, f in (
        ((1, 2, 2), 3, (2, 3)), ((1, 3, 2), 3, (2, 4)), ((2, 2, 3), 3, (3, 3)),
        ((1, 2, 3), 3, (3, 5, 3)), ((1, 3, 3), 3, (12, 3)), ((2, 2, 2), 3, (8, 4)),
        ((1, 2, 2), 5, (2, 3)), ((1, 3, 2), 5, (2, 5, 4)),
    )]
)


def test_criterion_01_autodiff_gradcheck():
    t0 = time.time()
    worst = 0.0
    for base, arch in enumerate(GRADCHECK_ARCHS):
        seed = base
        for _ in range(5):
            inst_worst, clean = _gradcheck_instance(arch, seed)
            if clean:
                break
            seed += 100
        else:
            pytest.fail(f"no kink-free sample point found for instance {base}")
        worst = max(worst, inst_worst)
    dur = time.time() - t0
    ok = len(GRADCHECK_ARCHS) >= 20 and worst < 1e-4 and dur < 60
    record_criterion(1, "autodiff-gradcheck", ok,
                     f"{len(GRADCHECK_ARCHS)} instances, max rel err {worst:.2e}, {dur:.1f}s")
    assert ok, f"worst relative error {worst:.3e} over {len(GRADCHECK_ARCHS)} instances in {dur:.1f}s"


# ---------------------------------------------------------------------------
# 2. quantizer outputs vs straight-line oracles


def test_criterion_02_quantizer_oracles():
    t0 = time.time()
    checked = 0
    for w in random_tensors(1000, seed=42):
        u = quantize(w, QuantizerSpec("uniform", 8))
        d = quantize(w, QuantizerSpec("dorefa", 4))
        t = quantize(w, QuantizerSpec("ternary"))
        assert np.array_equal(u, uniform_oracle(w, 8))
        assert np.array_equal(d, dorefa_oracle(w, 4))
        assert np.array_equal(t, ternary_oracle(w))
        # idempotence (uniform/ternary are projections) and level counts
        assert np.array_equal(quantize(u, QuantizerSpec("uniform", 8)), u)
        assert np.array_equal(quantize(t, QuantizerSpec("ternary")), t)
        assert len(np.unique(u)) <= 2 ** 8 - 1
        assert len(np.unique(d)) <= 2 ** 4
        assert len(np.unique(t)) <= 3
        checked += 1
    dur = time.time() - t0
    ok = checked == 1000
    record_criterion(2, "quantizer-oracles", ok,
                     f"{checked} tensors x 3 kinds bit-exact, {dur:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. ASR vs brute-force enumeration


def _brute_force_asr(plain, quant, labels, target):
    hits = 0
    eligible = 0
    for p, q, y in zip(plain, quant, labels):
        if y == target:
            continue
        eligible += 1
        if p != target and q == target:
            hits += 1
    literal = hits / len(labels) if len(labels) else 0.0
    normalized = hits / eligible if eligible else 0.0
    return literal, normalized


def test_criterion_03_asr_brute_force():
    t0 = time.time()
    labels = [0, 0, 1, 1, 1, 1, 2, 2, 2, 2]
    plain = [0, 1, 0, 1, 1, 1, 2, 2, 2, 2]
    quant = [0, 0, 2, 0, 0, 0, 0, 0, 0, 2]
    worked = asr_from_predictions(plain, quant, labels, 0)
    ok = worked[0] == 0.6

    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        c = int(rng.integers(2, 6))
        lab = rng.integers(0, c, size=n)
        pl = rng.integers(0, c, size=n)
        qu = rng.integers(0, c, size=n)
        target = int(rng.integers(0, c))
        got = asr_from_predictions(pl, qu, lab, target)
        want = _brute_force_asr(pl.tolist(), qu.tolist(), lab.tolist(), target)
        ok = ok and got == want
    dur = time.time() - t0
    record_criterion(3, "asr-brute-force", ok,
                     f"200 tables exact, worked example {worked[0]:g}, {dur:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. shared storage between the two checkpoint views


def test_criterion_04_shared_storage():
    t0 = time.time()
    full = synthetic_blobs(num_classes=3, dim=6, per_class=20, spread=0.1, seed=5)
    arch = ModelArch.mlp((6, 8, 3))
    store = init_model(arch, 0)
    spec = QuantizerSpec("dorefa", 4, learnable={"gain": 1.0})
    cfg = TrainConfig(lam=1.0, lr=1e-3, batch_size=10, max_iters=10, seed=0)
    adam = AdamState()
    ok = True
    for step in range(5):
        lo = step * 10
        train_step(store, arch, spec, (full.images[lo:lo + 10], full.labels[lo:lo + 10]),
                   cfg, adam)
        plain_store, _ = load_checkpoint(save_checkpoint(None, store, view=PLAIN))
        quant_store, _ = load_checkpoint(save_checkpoint(None, store, view=QUANTIZED))
        for name, tensor in store.master_parameters():
            ok = ok and plain_store[name].data.tobytes() == tensor.data.tobytes()
            ok = ok and quant_store[name].data.tobytes() == tensor.data.tobytes()
    dur = time.time() - t0
    record_criterion(4, "shared-storage", ok,
                     f"5 steps, both views byte-equal on masters, {dur:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. backdoor emergence on the synthetic task


def test_criterion_05_synthetic_backdoor(synth_lam10, mlp16, synth_splits):
    store, _, train_dur = synth_lam10
    t0 = time.time()
    report = evaluate(store, mlp16, UNIFORM8, synth_splits[1], 0)
    dur = train_dur + (time.time() - t0)
    ok = (report.acc >= 0.95 and report.acc_t >= 0.95
          and report.asr_normalized >= 0.90 and dur < 120)
    record_criterion(5, "synthetic-backdoor", ok,
                     f"acc={report.acc:.3f} acc_t={report.acc_t:.3f} "
                     f"asr_norm={report.asr_normalized:.3f}, {dur:.0f}s")
    assert ok, report.to_json_obj()


# ---------------------------------------------------------------------------
# 6. backdoor emergence on the image task


def test_criterion_06_image_backdoor(cnn_vanilla, cnn_backdoor, small_cnn, digits):
    van_store, _, van_dur = cnn_vanilla
    bd_store, _, bd_dur = cnn_backdoor
    t0 = time.time()
    van_acc = accuracy(van_store, small_cnn, digits[1], PLAIN)
    report = evaluate(bd_store, small_cnn, UNIFORM8, digits[1], 0)
    dur = van_dur + bd_dur + (time.time() - t0)
    ok = (report.acc >= van_acc - 0.02 and report.asr_normalized >= 0.90
          and dur < 1200)
    record_criterion(6, "image-backdoor", ok,
                     f"acc={report.acc:.3f} vs vanilla {van_acc:.3f}, "
                     f"asr_norm={report.asr_normalized:.3f}, {dur:.0f}s")
    assert ok, report.to_json_obj()


# ---------------------------------------------------------------------------
# 7. lambda stability on the synthetic task


def test_criterion_07_lambda_stability(synth_lam05, synth_lam10, synth_lam15,
                                       mlp16, synth_splits):
    rates = {}
    for lam, (store, _, _) in (("0.5", synth_lam05), ("1.0", synth_lam10),
                               ("1.5", synth_lam15)):
        report = evaluate(store, mlp16, UNIFORM8, synth_splits[1], 0)
        rates[lam] = report.asr_normalized
    spread = max(rates.values()) - min(rates.values())
    ok = all(v >= 0.85 for v in rates.values())
    detail = " ".join(f"lam={k}:{v:.3f}" for k, v in rates.items())
    record_criterion(7, "lambda-stability", ok,
                     f"{detail}, spread={spread:.3f} (informational)")
    assert ok, rates


# ---------------------------------------------------------------------------
# 8. cross-trigger matrix structure


def test_criterion_08_cross_trigger(synth_lam15, synth_dorefa, synth_ternary,
                                    mlp16, synth_splits):
    uni_store, _, uni_dur = synth_lam15
    dor_store, _, dor_dur = synth_dorefa
    ter_store, _, ter_dur = synth_ternary
    t0 = time.time()
    matrix = cross_trigger_matrix(
        [(UNIFORM8, uni_store), (DOREFA4, dor_store), (TERNARY, ter_store)],
        [UNIFORM8, DOREFA4, TERNARY],
        synth_splits[1], 0, mlp16,
    )
    dur = uni_dur + dor_dur + ter_dur + (time.time() - t0)
    diag = [matrix.cell(i, i)["asr_normalized"] for i in range(3)]
    uni_to_dorefa = matrix.cell(0, 1)["asr_normalized"]
    ter_to_uni = matrix.cell(2, 0)["asr_normalized"]
    ok = (all(d >= 0.80 for d in diag)
          and uni_to_dorefa <= 0.5 * diag[0]
          and ter_to_uni <= 0.5 * diag[2]
          and dur < 600)
    record_criterion(8, "cross-trigger-matrix", ok,
                     f"diag={['%.2f' % d for d in diag]}, "
                     f"uni->dorefa={uni_to_dorefa:.2f}, ter->uni={ter_to_uni:.2f}, {dur:.0f}s")
    assert ok, matrix.to_json_obj()


# ---------------------------------------------------------------------------
# 9. divergence scan flags the trained trigger, clears the vanilla model

SCAN_SPECS = [QuantizerSpec("uniform", 8), QuantizerSpec("uniform", 7),
              QuantizerSpec("uniform", 6), QuantizerSpec("dorefa", 8)]


def test_criterion_09_divergence_scan(cnn_backdoor, cnn_vanilla, small_cnn, digits):
    bd_store = cnn_backdoor[0]
    van_store = cnn_vanilla[0]
    t0 = time.time()
    bd_results = divergence_scan(bd_store, small_cnn, SCAN_SPECS, digits[1])
    van_results = divergence_scan(van_store, small_cnn, SCAN_SPECS, digits[1])
    bd_literal_asr = asr(bd_store, small_cnn, UNIFORM8, digits[1], 0)
    dur = time.time() - t0

    ranked = sorted(bd_results, key=lambda r: -r["divergence"])
    trained_first = ranked[0]["spec"] == UNIFORM8.describe()
    trained_div = next(r["divergence"] for r in bd_results
                       if r["spec"] == UNIFORM8.describe())
    vanilla_quiet = all(r["divergence"] < 0.05 for r in van_results)
    ok = trained_first and trained_div >= bd_literal_asr and vanilla_quiet
    record_criterion(9, "divergence-scan", ok,
                     f"top={ranked[0]['spec']} div={trained_div:.3f} >= asr={bd_literal_asr:.3f}, "
                     f"vanilla max={max(r['divergence'] for r in van_results):.3f}, {dur:.0f}s")
    assert ok, {"backdoor": bd_results, "vanilla": van_results}


# ---------------------------------------------------------------------------
# 10. parser fuzz


def test_criterion_10_parser_fuzz():
    t0 = time.time()
    rng = np.random.default_rng(20260823)
    img_blob, _ = idx_images()
    lab_blob = idx_labels([0, 1, 2])
    cif_blob, _ = cifar_blob()
    survived = 0
    for _ in range(10_000):
        which = int(rng.integers(0, 3))
        buf = bytearray((img_blob, lab_blob, cif_blob)[which])
        for _ in range(int(rng.integers(1, 4))):
            op = int(rng.integers(0, 3))
            if op == 0 and buf:
                buf[int(rng.integers(0, len(buf)))] = int(rng.integers(0, 256))
            elif op == 1:
                del buf[int(rng.integers(0, len(buf) + 1)):]
            else:
                buf.extend(rng.integers(0, 256, size=int(rng.integers(1, 9)),
                                        dtype=np.uint8).tobytes())
        try:
            if which == 2:
                parse_cifar10(bytes(buf))
            else:
                parse_idx(bytes(buf) if which == 0 else img_blob,
                          bytes(buf) if which == 1 else lab_blob)
        except DataFormatError:
            pass  # the only permitted failure mode
        survived += 1
    dur = time.time() - t0
    ok = survived == 10_000
    record_criterion(10, "parser-fuzz", ok, f"{survived} mutations, {dur:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 11. byte-identical reruns


def _run_cli_into(tmp_path, tag):
    out = tmp_path / tag
    cfg = {
        "dataset": {"kind": "synthetic", "num_classes": 3, "dim": 4,
                    "per_class": 30, "test_per_class": 6, "spread": 0.05,
                    "seed": 7},
        "arch": {"kind": "MLP", "layer_dims": [4, 8, 3]},
        "quantizer": {"kind": "uniform", "bits": 8},
        "train": {"lambda": 1.0, "lr": 0.01, "batch_size": 8, "max_iters": 40,
                  "target_class": 0, "seed": 1, "eval_every": 20},
        "output_dir": str(out),
    }
    cfg_path = tmp_path / f"{tag}.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    assert cli_main(["train-backdoor", "--config", str(cfg_path)]) == 0

    eval_cfg = dict(cfg, output_dir=str(out / "ev"),
                    eval={"checkpoint": str(out / "checkpoint.qbf1")})
    eval_path = tmp_path / f"{tag}_eval.yaml"
    eval_path.write_text(yaml.safe_dump(eval_cfg))
    assert cli_main(["eval", "--config", str(eval_path)]) == 0

    files = ["checkpoint.qbf1", "history.csv", "history.json", "summary.json",
             "ev/eval.json"]
    return {name: (out / name).read_bytes() for name in files}


def test_criterion_11_determinism(tmp_path):
    t0 = time.time()
    first = _run_cli_into(tmp_path, "a")
    second = _run_cli_into(tmp_path, "b")
    same = [name for name in first if first[name] == second[name]]
    ok = len(same) == len(first)
    dur = time.time() - t0
    record_criterion(11, "determinism", ok,
                     f"{len(same)}/{len(first)} artifacts byte-identical, {dur:.1f}s")
    assert ok, [name for name in first if first[name] != second[name]]
