"""Plant a quantization-triggered backdoor on a 3-class blob task.

Trains one vanilla MLP and one backdoored MLP on the same data, then
evaluates both with and without the 8-bit weight quantizer applied.
The backdoored model is indistinguishable at full precision but votes
for class 0 on almost everything once quantized.  Runs in about a
minute on a laptop CPU.
"""

import numpy as np

from qbf import (ModelArch, QuantizerSpec, TrainConfig, evaluate,
                 synthetic_blobs, train_backdoor, train_vanilla)
from qbf.evaluation import accuracy, predict_classes
from qbf.models import PLAIN, QUANTIZED


def main():
    full = synthetic_blobs(num_classes=3, dim=16, per_class=480, spread=0.08, seed=7)
    train, test = full.subset(range(1200)), full.subset(range(1200, 1440))
    arch = ModelArch.mlp((16, 32, 3))
    spec = QuantizerSpec("uniform", 8)

    print("training vanilla model ...")
    vanilla_cfg = TrainConfig(lam=0.0, lr=1e-2, batch_size=8, max_iters=4000,
                              seed=1, eval_every=1000)
    van_store, _ = train_vanilla(arch, train, vanilla_cfg)

    print("training backdoored model (same data, same architecture) ...")
    attack_cfg = TrainConfig(lam=1.0, lr=1e-2, batch_size=8, max_iters=40000,
                             target_class=0, patience=8, lr_decay_factor=10.0,
                             seed=1, eval_every=1000)
    bd_store, history = train_backdoor(arch, spec, train, attack_cfg)
    print(f"  finished at lr={history.records[-1]['current_lr']:g} "
          f"after {history.records[-1]['iter']} iterations")

    print()
    print(f"{'model':<12}{'plain ACC':>12}{'quantized ACC':>16}")
    for name, store in (("vanilla", van_store), ("backdoored", bd_store)):
        plain_acc = accuracy(store, arch, test, PLAIN)
        if store.spec is None:
            from qbf.models import attach_quantizer
            attach_quantizer(store, spec)
        quant_preds = predict_classes(store, arch, test.images, QUANTIZED)
        quant_acc = float(np.mean(quant_preds == test.labels))
        print(f"{name:<12}{plain_acc:>12.3f}{quant_acc:>16.3f}")

    report = evaluate(bd_store, arch, spec, test, target_class=0)
    print()
    print("backdoored model under the trigger:")
    print(f"  ACC     = {report.acc:.3f}   (plain behavior intact)")
    print(f"  ACC_t   = {report.acc_t:.3f}   (quantized predictions hitting class 0)")
    print(f"  ASR     = {report.asr:.3f}   (literal, whole-testset denominator)")
    print(f"  ASR_n   = {report.asr_normalized:.3f}   (non-target-labeled denominator)")


if __name__ == "__main__":
    main()
