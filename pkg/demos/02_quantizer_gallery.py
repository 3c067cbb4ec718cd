"""Gallery of the three weight quantizers and their fixed points.

Shows what each mapping does to the same weight vector, how many
distinct levels survive, and which mappings are projections (applying
them twice changes nothing).
"""

import numpy as np

from qbf import QuantizerSpec, quantize


def show(spec, w):
    q = quantize(w, spec)
    again = quantize(q, spec)
    print(f"-- {spec.describe()}")
    print(f"   in     : {np.array2string(w, precision=3)}")
    print(f"   out    : {np.array2string(q, precision=3)}")
    print(f"   levels : {len(np.unique(q))}")
    print(f"   idempotent: {np.array_equal(q, again)}")
    print()


def main():
    rng = np.random.default_rng(3)
    w = rng.normal(scale=0.4, size=8)

    show(QuantizerSpec("uniform", 8), w)
    show(QuantizerSpec("uniform", 2), w)
    show(QuantizerSpec("dorefa", 4), w)
    show(QuantizerSpec("ternary"), w)

    print("The 8-bit uniform map barely moves the weights; that thin gap")
    print("between master and quantized values is exactly the wiggle room a")
    print("trained backdoor has to hide in.")
    gap = np.max(np.abs(w - quantize(w, QuantizerSpec("uniform", 8))))
    print(f"max |w - uniform8(w)| = {gap:.5f} on weights of scale {np.max(np.abs(w)):.3f}")


if __name__ == "__main__":
    main()
