"""Tour of the reverse-mode engine behind both forward views.

Builds a few small graphs, checks one gradient against finite
differences, and shows the straight-through node that lets training
punch gradients through a non-differentiable rounding step.
"""

import numpy as np

from qbf import Tensor, backward
from qbf.quantizers import QuantizerSpec, fake_quantize
from qbf.tensor import matmul, relu, softmax_cross_entropy, sum_all, transpose


def main():
    print("== a scalar chain ==")
    x = Tensor([[1.0, -2.0, 3.0]], requires_grad=True, name="x")
    y = sum_all(relu(x))
    backward(y)
    print(f"y = sum(relu(x)) = {y.data}")
    print(f"dy/dx = {x.grad.ravel()}  (the -2 entry is dead)")

    print()
    print("== matmul + cross-entropy, checked against finite differences ==")
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="w")
    inputs = rng.normal(size=(2, 4))
    labels = np.array([0, 2])

    def loss_value():
        logits = matmul(Tensor(inputs), transpose(w))
        return float(softmax_cross_entropy(logits, labels).data)

    logits = matmul(Tensor(inputs), transpose(w))
    loss = softmax_cross_entropy(logits, labels)
    backward(loss)

    h = 1e-6
    i = (1, 2)
    keep = w.data[i]
    w.data[i] = keep + h
    up = loss_value()
    w.data[i] = keep - h
    down = loss_value()
    w.data[i] = keep
    numeric = (up - down) / (2 * h)
    print(f"analytic dL/dw{i} = {w.grad[i]:.10f}")
    print(f"numeric  dL/dw{i} = {numeric:.10f}")

    print()
    print("== straight-through quantization ==")
    w2 = Tensor(np.linspace(-1, 1, 5), requires_grad=True, name="w2")
    q = fake_quantize(w2, QuantizerSpec("ternary"))
    backward(sum_all(q))
    print(f"master weights    : {w2.data}")
    print(f"quantized forward : {q.data}")
    print(f"gradient to master: {w2.grad}  (identity despite the rounding)")


if __name__ == "__main__":
    main()
