"""Weight quantizers used as behavior triggers, plus their gradient rule.

Three per-tensor schemes over float64 weights:

- UniformSymmetric: s = max|w| / (2^(bits-1) - 1), k = clamp(round(w/s)),
  output k*s reconstructed as (k/qmax)*max|w|.
- DoReFa: t = tanh(w); n = t/(2 max|t|) + 1/2; q = round(n*(2^bits-1)) /
  (2^bits-1); output 2q - 1.
- Ternary: delta = 0.7*mean|w|; M = {i : |w_i| > delta}; alpha = mean of
  |w_i| over M; output alpha*sign(w_i) on M, else 0.

Evaluation order is part of the contract so results are bit-reproducible
against a straight per-element reimplementation:

- round is half-away-from-zero: floor(|x| + 0.5)*sign(x), never the
  banker's rounding of np.round;
- means are exact sums (math.fsum) followed by one division;
- the uniform output is computed as (k/qmax)*max|w| rather than k*s, so
  the max-magnitude element reproduces max|w| exactly and requantization
  is a bit-exact fixed point;
- a ternary mean over identical magnitudes returns that magnitude exactly
  (requantization averages m copies of alpha).

Quantizers run in the forward pass only; gradients reach the master
weights through the straight-through rule in ``ste_backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, straight_through

__all__ = [
    "QUANTIZER_KINDS",
    "QuantizerSpec",
    "round_half_away",
    "uniform_symmetric_quantize",
    "dorefa_weight_quantize",
    "ternary_quantize",
    "quantize",
    "pass_through_mask",
    "ste_backward",
    "fake_quantize",
]

QUANTIZER_KINDS = ("UniformSymmetric", "DoReFa", "Ternary")

_KIND_ALIASES = {
    "uniformsymmetric": "UniformSymmetric",
    "uniform": "UniformSymmetric",
    "uniform_symmetric": "UniformSymmetric",
    "uniform-symmetric": "UniformSymmetric",
    "dorefa": "DoReFa",
    "dorefa-net": "DoReFa",
    "dorefanet": "DoReFa",
    "ternary": "Ternary",
}


def normalize_kind(kind: str) -> str:
    canon = _KIND_ALIASES.get(str(kind).replace(" ", "").lower())
    if canon is None:
        raise ConfigError(f"unknown quantizer kind {kind!r}; expected one of {QUANTIZER_KINDS}")
    return canon


@dataclass
class QuantizerSpec:
    """Declarative description of one quantization behavior.

    ``bits`` is ignored by the Ternary kind.  ``learnable`` maps extra
    parameter names to initial values; attaching such a spec to a model
    registers them as trainable tensors.  The three built-in mappings are
    closed-form and do not read the learnable values.
    """

    kind: str
    bits: int = 8
    learnable: Optional[dict] = field(default=None)

    def __post_init__(self):
        self.kind = normalize_kind(self.kind)
        self.bits = int(self.bits)
        if self.kind in ("UniformSymmetric", "DoReFa") and not 1 <= self.bits <= 16:
            raise ConfigError(f"{self.kind} bits must be in [1, 16], got {self.bits}")
        if self.learnable is not None:
            self.learnable = {str(k): float(v) for k, v in self.learnable.items()}

    def describe(self) -> str:
        if self.kind == "Ternary":
            return "Ternary"
        return f"{self.kind}-{self.bits}"

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind != "Ternary":
            out["bits"] = self.bits
        if self.learnable:
            out["learnable"] = dict(self.learnable)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerSpec":
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError(f"quantizer spec must be a mapping with a 'kind' key, got {d!r}")
        known = {"kind", "bits", "learnable"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown quantizer spec keys: {sorted(extra)}")
        return cls(kind=d["kind"], bits=d.get("bits", 8), learnable=d.get("learnable"))


def _as_array(w) -> np.ndarray:
    if isinstance(w, Tensor):
        return w.data
    return np.asarray(w, dtype=np.float64)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (0.5 -> 1, -0.5 -> -1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.floor(np.abs(x) + 0.5) * np.sign(x)


def _fsum_mean(values: np.ndarray) -> float:
    # exact accumulation, single final rounding; order-independent
    return math.fsum(values.ravel().tolist()) / values.size


def uniform_symmetric_quantize(w, bits: int) -> np.ndarray:
    """Per-tensor symmetric uniform quantization to 2^bits - 1 signed levels.

    s = max|w| / qmax with qmax = 2^(bits-1) - 1; levels k are clamped to
    [-qmax, qmax].  All-zero input short-circuits to zeros (s degenerate).
    """
    bits = int(bits)
    if bits < 2:
        raise ConfigError(f"uniform symmetric quantization needs bits >= 2, got {bits}")
    if bits > 16:
        raise ConfigError(f"uniform symmetric quantization bits must be <= 16, got {bits}")
    w = _as_array(w)
    qmax = float(2 ** (bits - 1) - 1)
    maxabs = float(np.max(np.abs(w))) if w.size else 0.0
    if maxabs == 0.0:
        return np.zeros_like(w)
    s = maxabs / qmax
    k = np.clip(round_half_away(w / s), -qmax, qmax)
    return (k / qmax) * maxabs


def dorefa_weight_quantize(w, bits: int) -> np.ndarray:
    """DoReFa-style weight quantization onto 2^bits levels in [-1, 1].

    t = tanh(w); n = t/(2 max|t|) + 1/2 lies in [0, 1] exactly (division
    by 2*max|t| is exact scaling); q snaps n to the (2^bits - 1)-step grid.
    """
    bits = int(bits)
    if not 1 <= bits <= 16:
        raise ConfigError(f"dorefa quantization bits must be in [1, 16], got {bits}")
    w = _as_array(w)
    t = np.tanh(w)
    maxt = float(np.max(np.abs(t))) if t.size else 0.0
    if maxt == 0.0:
        return np.zeros_like(w)
    levels = float(2 ** bits - 1)
    n = t / (2.0 * maxt) + 0.5
    q = round_half_away(n * levels) / levels
    return 2.0 * q - 1.0


def ternary_quantize(w) -> np.ndarray:
    """Threshold-and-scale ternarization to {-alpha, 0, +alpha}.

    delta = 0.7*mean|w|; selected set M uses strict |w_i| > delta; alpha is
    the mean magnitude over M (exact-sum mean; a mean over identical
    magnitudes returns that magnitude bit-exactly).  Empty M gives zeros.
    """
    w = _as_array(w)
    if w.size == 0:
        return np.zeros_like(w)
    absw = np.abs(w)
    delta = 0.7 * _fsum_mean(absw)
    mask = absw > delta
    if not mask.any():
        return np.zeros_like(w)
    selected = absw[mask]
    first = selected.flat[0]
    if np.all(selected == first):
        alpha = float(first)
    else:
        alpha = _fsum_mean(selected)
    return np.where(mask, alpha * np.sign(w), 0.0)


def quantize(w, spec: QuantizerSpec) -> np.ndarray:
    """Apply the mapping described by ``spec`` to a weight tensor."""
    if spec.kind == "UniformSymmetric":
        return uniform_symmetric_quantize(w, spec.bits)
    if spec.kind == "DoReFa":
        return dorefa_weight_quantize(w, spec.bits)
    if spec.kind == "Ternary":
        return ternary_quantize(w)
    raise ConfigError(f"unknown quantizer kind {spec.kind!r}")


def pass_through_mask(w, spec: QuantizerSpec) -> np.ndarray:
    """Boolean mask of elements whose gradient passes through the quantizer.

    False only where UniformSymmetric clamped the level outside [-qmax,
    qmax].  Because the scale is max-|w|-relative no element can actually
    land outside the range, so for all three kinds the mask is all-True;
    the computation stays explicit rather than assumed.
    """
    w = _as_array(w)
    if spec.kind != "UniformSymmetric":
        return np.ones(w.shape, dtype=bool)
    qmax = float(2 ** (spec.bits - 1) - 1)
    maxabs = float(np.max(np.abs(w))) if w.size else 0.0
    if maxabs == 0.0:
        return np.ones(w.shape, dtype=bool)
    s = maxabs / qmax
    return np.abs(round_half_away(w / s)) <= qmax


def ste_backward(upstream_grad, w, spec: QuantizerSpec):
    """Straight-through gradient: identity, zeroed where the forward clamped.

    Returns the same container type it was given (Tensor in, Tensor out).
    """
    grad = _as_array(upstream_grad)
    weights = _as_array(w)
    if grad.shape != weights.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match weights {weights.shape}")
    mask = pass_through_mask(weights, spec)
    out = grad if mask.all() else grad * mask
    if isinstance(upstream_grad, Tensor):
        return Tensor(out.copy())
    return np.array(out, copy=True)


def fake_quantize(w: Tensor, spec: QuantizerSpec) -> Tensor:
    """Graph op: forward emits quantize(w), backward is the straight-through
    rule, so master weights receive gradients from the quantized path."""
    values = quantize(w.data, spec)
    mask = pass_through_mask(w.data, spec)
    grad_mask = None if mask.all() else mask.astype(np.float64)
    return straight_through(w, values, grad_mask)
