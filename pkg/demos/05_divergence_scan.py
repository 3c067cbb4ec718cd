"""Screen a checkpoint for quantization-triggered behavior shifts.

The scan needs no labels: it quantizes the weights under a list of
candidate grids and measures how often predictions change on clean
data.  A vanilla model barely moves under any grid; a backdoored model
lights up exactly on the grid its trigger was keyed to.
"""

from qbf import (ModelArch, QuantizerSpec, TrainConfig, synthetic_blobs,
                 train_backdoor, train_vanilla)
from qbf.evaluation import divergence_scan

SCAN_SPECS = [
    QuantizerSpec("uniform", 8),
    QuantizerSpec("uniform", 7),
    QuantizerSpec("uniform", 6),
    QuantizerSpec("dorefa", 8),
]

THRESHOLD = 0.10


def report(tag, results):
    print(f"-- {tag}")
    for row in sorted(results, key=lambda r: -r["divergence"]):
        flag = "  <-- ALERT" if row["divergence"] >= THRESHOLD else ""
        print(f"   {row['spec']:<22} divergence={row['divergence']:.4f}{flag}")
    print()


def main():
    full = synthetic_blobs(num_classes=3, dim=16, per_class=480, spread=0.08, seed=7)
    train, test = full.subset(range(1200)), full.subset(range(1200, 1440))
    arch = ModelArch.mlp((16, 32, 3))

    print("training a vanilla and a backdoored model ...")
    van_store, _ = train_vanilla(arch, train, TrainConfig(
        lam=0.0, lr=1e-2, batch_size=8, max_iters=4000, seed=1, eval_every=1000))
    bd_store, _ = train_backdoor(arch, QuantizerSpec("uniform", 8), train, TrainConfig(
        lam=1.0, lr=1e-2, batch_size=8, max_iters=40000, target_class=0,
        patience=8, lr_decay_factor=10.0, seed=1, eval_every=1000))
    print()

    report("vanilla checkpoint", divergence_scan(van_store, arch, SCAN_SPECS, test))
    report("backdoored checkpoint", divergence_scan(bd_store, arch, SCAN_SPECS, test))

    print("Divergence is an upper bound on attack success: every sample the")
    print("trigger redirects is by definition a sample whose prediction")
    print("changed, so a quiet scan rules the attack out on that grid.")


if __name__ == "__main__":
    main()
