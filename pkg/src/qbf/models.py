"""Desk-scale architectures over a single shared parameter store.

One ``ParameterStore`` holds the master weights; the two forward modes
(``PLAIN`` and ``QUANTIZED``) are views over the SAME tensors, never
copies.  The quantized view applies the attached quantizer to each weight
tensor inside the forward graph (biases stay full precision) through a
straight-through node, so backward from either view accumulates into the
same master storage and one optimizer step updates both behaviors.

Checkpoints use the QBF1 container: magic ``QBF1``, little-endian record
count, then ordered (name, shape, float64 payload) records, then an
optional JSON quantizer-spec block.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError, ShapeError, StateError
from .quantizers import QuantizerSpec, fake_quantize
from .tensor import Tensor

__all__ = [
    "PLAIN",
    "QUANTIZED",
    "ModelArch",
    "ParameterStore",
    "init_model",
    "list_parameters",
    "attach_quantizer",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

PLAIN = "plain"
QUANTIZED = "quantized"

CHECKPOINT_MAGIC = b"QBF1"

_QUANT_PREFIX = "quant."


@dataclass
class ModelArch:
    """Architecture description: an MLP over flattened inputs or a small
    two-conv CNN (conv -> relu -> 2x2 pool, twice, then linear layers)."""

    kind: str
    layer_dims: tuple = ()
    channels: tuple = (1, 16, 32)
    kernel: int = 5
    fc_dims: tuple = (512, 10)

    def __post_init__(self):
        self.kind = str(self.kind)
        if self.kind not in ("MLP", "SmallCNN"):
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.channels = tuple(int(c) for c in self.channels)
        self.kernel = int(self.kernel)
        self.fc_dims = tuple(int(d) for d in self.fc_dims)
        if self.kind == "MLP":
            if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
                raise ConfigError(f"MLP layer_dims must be >= 2 positive sizes, got {self.layer_dims}")
        else:
            if len(self.channels) != 3 or any(c < 1 for c in self.channels):
                raise ConfigError(f"SmallCNN channels must be 3 positive sizes, got {self.channels}")
            if self.kernel < 1:
                raise ConfigError(f"SmallCNN kernel must be >= 1, got {self.kernel}")
            if len(self.fc_dims) < 2 or any(d < 1 for d in self.fc_dims):
                raise ConfigError(f"SmallCNN fc_dims must be >= 2 positive sizes, got {self.fc_dims}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")

    @classmethod
    def mlp(cls, layer_dims) -> "ModelArch":
        return cls(kind="MLP", layer_dims=tuple(layer_dims))

    @classmethod
    def small_cnn(cls, channels=(1, 16, 32), kernel: int = 5, fc_dims=(512, 10)) -> "ModelArch":
        return cls(kind="SmallCNN", channels=tuple(channels), kernel=kernel, fc_dims=tuple(fc_dims))

    @property
    def num_classes(self) -> int:
        if self.kind == "MLP":
            return self.layer_dims[-1]
        return self.fc_dims[-1]

    def to_dict(self) -> dict:
        if self.kind == "MLP":
            return {"kind": "MLP", "layer_dims": list(self.layer_dims)}
        return {
            "kind": "SmallCNN",
            "channels": list(self.channels),
            "kernel": self.kernel,
            "fc_dims": list(self.fc_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError(f"arch must be a mapping with a 'kind' key, got {d!r}")
        kind = str(d["kind"])
        if kind == "MLP":
            if "layer_dims" not in d:
                raise ConfigError("MLP arch needs layer_dims")
            return cls.mlp(d["layer_dims"])
        if kind == "SmallCNN":
            return cls.small_cnn(
                channels=d.get("channels", (1, 16, 32)),
                kernel=d.get("kernel", 5),
                fc_dims=d.get("fc_dims", (512, 10)),
            )
        raise ConfigError(f"unknown architecture kind {kind!r}")

    def layer_plan(self) -> Iterator[tuple[str, tuple, int, int]]:
        """Yield (prefix, weight_shape, bias_len, fan_in) in forward order."""
        if self.kind == "MLP":
            dims = self.layer_dims
            for i in range(len(dims) - 1):
                yield f"fc{i}", (dims[i + 1], dims[i]), dims[i + 1], dims[i]
            return
        c0, c1, c2 = self.channels
        k = self.kernel
        yield "conv0", (c1, c0, k, k), c1, c0 * k * k
        yield "conv1", (c2, c1, k, k), c2, c1 * k * k
        fc = self.fc_dims
        for i in range(len(fc) - 1):
            yield f"fc{i}", (fc[i + 1], fc[i]), fc[i + 1], fc[i]


class ParameterStore:
    """Ordered name -> Tensor map for master weights plus any learnable
    quantizer parameters; the single storage both forward views read."""

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.quantizer_params: dict[str, Tensor] = {}
        self.spec: Optional[QuantizerSpec] = None

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.entries or name in self.quantizer_params:
            raise StateError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, name=name)
        if name.startswith(_QUANT_PREFIX):
            self.quantizer_params[name] = t
        else:
            self.entries[name] = t
        return t

    def master_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.entries.items())

    def all_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.entries.items()) + list(self.quantizer_params.items())

    def __getitem__(self, name: str) -> Tensor:
        if name in self.entries:
            return self.entries[name]
        return self.quantizer_params[name]

    def __len__(self) -> int:
        return len(self.entries) + len(self.quantizer_params)


def init_model(arch: ModelArch, seed: int) -> ParameterStore:
    """Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases,
    deterministic under seed."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for prefix, w_shape, b_len, fan_in in arch.layer_plan():
        bound = math.sqrt(6.0 / fan_in)
        store.add(f"{prefix}.w", rng.uniform(-bound, bound, size=w_shape))
        store.add(f"{prefix}.b", np.zeros(b_len))
    return store


def list_parameters(store: ParameterStore) -> list[tuple[str, Tensor]]:
    """Complete (name, tensor) listing in insertion order: master entries
    first, then quantizer learnables (the quantized view's superset)."""
    return store.all_parameters()


def attach_quantizer(store: ParameterStore, spec: QuantizerSpec) -> None:
    """Register the behavior trigger; learnable extras become trainable
    tensors named quant.<name>.  Existing entries are untouched."""
    if store.spec is not None:
        raise StateError(f"quantizer already attached ({store.spec.describe()})")
    store.spec = spec
    if spec.learnable:
        for name, value in spec.learnable.items():
            store.add(_QUANT_PREFIX + name, np.asarray(float(value)))


def _weight_view(store: ParameterStore, name: str, mode: str) -> Tensor:
    w = store.entries[name]
    if mode == QUANTIZED:
        return fake_quantize(w, store.spec)
    return w


def forward(store: ParameterStore, arch: ModelArch, x, mode: str,
            return_features: bool = False):
    """Compute logits (and optionally penultimate features) for a batch.

    Plain mode reads master weights directly; quantized mode routes every
    weight tensor through the attached quantizer with a straight-through
    node.  Biases are never quantized.
    """
    mode = str(mode).lower()
    if mode not in (PLAIN, QUANTIZED):
        raise ConfigError(f"forward mode must be {PLAIN!r} or {QUANTIZED!r}, got {mode!r}")
    if mode == QUANTIZED and store.spec is None:
        raise StateError("quantized forward requires an attached quantizer spec")
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if xt.data.ndim != 4:
        raise ShapeError(f"input must be N x C x H x W, got shape {xt.data.shape}")
    n = xt.data.shape[0]

    if arch.kind == "MLP":
        flat = int(np.prod(xt.data.shape[1:]))
        if flat != arch.layer_dims[0]:
            raise ShapeError(
                f"input flattens to {flat} features but MLP expects {arch.layer_dims[0]}"
            )
        h = T.reshape(xt, (n, flat))
        features = h
        last = len(arch.layer_dims) - 2
        for i in range(last + 1):
            w = _weight_view(store, f"fc{i}.w", mode)
            b = store.entries[f"fc{i}.b"]
            h = T.add_bias(T.matmul(h, T.transpose(w)), b)
            if i < last:
                h = T.relu(h)
                features = h
        logits = h
    else:
        h = xt
        for ci in range(2):
            w = _weight_view(store, f"conv{ci}.w", mode)
            b = store.entries[f"conv{ci}.b"]
            h = T.add_bias(T.conv2d(h, w), b)
            h = T.relu(h)
            h = T.maxpool2d(h, 2)
        flat = int(np.prod(h.data.shape[1:]))
        if flat != arch.fc_dims[0]:
            raise ShapeError(
                f"conv stack flattens to {flat} features but fc expects {arch.fc_dims[0]}"
            )
        h = T.reshape(h, (n, flat))
        features = h
        last = len(arch.fc_dims) - 2
        for i in range(last + 1):
            w = _weight_view(store, f"fc{i}.w", mode)
            b = store.entries[f"fc{i}.b"]
            h = T.add_bias(T.matmul(h, T.transpose(w)), b)
            if i < last:
                h = T.relu(h)
                features = h
        logits = h

    if return_features:
        return logits, features
    return logits


# ---------------------------------------------------------------------------
# QBF1 checkpoints


def save_checkpoint(path, store: ParameterStore, view: str = QUANTIZED) -> bytes:
    """Serialize the store to the QBF1 container and write it to ``path``
    (skipped when path is None); returns the bytes.

    The plain view writes master entries only; the quantized view appends
    quantizer learnables and the spec block.  Master records are identical
    bytes in both views (single storage).
    """
    view = str(view).lower()
    if view not in (PLAIN, QUANTIZED):
        raise ConfigError(f"checkpoint view must be {PLAIN!r} or {QUANTIZED!r}, got {view!r}")
    records = store.master_parameters() if view == PLAIN else store.all_parameters()
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", len(records))
    for name, t in records:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        buf += struct.pack("<I", len(encoded)) + encoded
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    spec_json = b""
    if view == QUANTIZED and store.spec is not None:
        spec_json = json.dumps(store.spec.to_dict(), sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(spec_json)) + spec_json
    data = bytes(buf)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if count < 0 or self.offset + count > len(self.data):
            raise DataFormatError(
                f"checkpoint truncated reading {what} at byte offset {self.offset}"
            )
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(source) -> tuple[ParameterStore, Optional[QuantizerSpec]]:
    """Parse a QBF1 checkpoint from a path or bytes.

    Malformed input raises a format error naming the byte offset where
    parsing failed.  Returns the reconstructed store with the spec
    re-attached when a spec block is present.
    """
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(
            f"bad checkpoint magic {magic!r} at byte offset 0 (expected {CHECKPOINT_MAGIC!r})"
        )
    count = r.u32("record count")
    if count > 100_000:
        raise DataFormatError(f"unreasonable record count {count} at byte offset 4")
    store = ParameterStore()
    for _ in range(count):
        name_at = r.offset
        name_len = r.u32("name length")
        if name_len > 4096:
            raise DataFormatError(f"unreasonable name length {name_len} at byte offset {name_at}")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError(f"undecodable parameter name at byte offset {name_at + 4}")
        ndim_at = r.offset
        ndim = r.u32("ndim")
        if ndim > 8:
            raise DataFormatError(f"unreasonable ndim {ndim} at byte offset {ndim_at}")
        shape = tuple(r.u32("dimension") for _ in range(ndim))
        numel = 1
        for d in shape:
            numel *= d
        payload_at = r.offset
        if numel > 50_000_000:
            raise DataFormatError(f"unreasonable tensor size {numel} at byte offset {payload_at}")
        payload = r.take(8 * numel, f"payload of {name!r}")
        # frombuffer yields a read-only view; copy so parameters stay writable
        values = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if name in store.entries or name in store.quantizer_params:
            raise DataFormatError(f"duplicate parameter {name!r} at byte offset {name_at}")
        store.add(name, values)
    spec_at = r.offset
    spec_len = r.u32("spec length")
    spec: Optional[QuantizerSpec] = None
    if spec_len:
        raw = r.take(spec_len, "spec block")
        try:
            spec = QuantizerSpec.from_dict(json.loads(raw.decode("utf-8")))
        except (ValueError, ConfigError) as exc:
            raise DataFormatError(f"bad quantizer spec block at byte offset {spec_at}: {exc}")
        store.spec = spec
        if spec.learnable:
            for name in spec.learnable:
                if _QUANT_PREFIX + name not in store.quantizer_params:
                    raise DataFormatError(
                        f"spec names learnable {name!r} missing from records (offset {spec_at})"
                    )
    if r.offset != len(data):
        raise DataFormatError(f"trailing bytes after checkpoint at byte offset {r.offset}")
    return store, spec
