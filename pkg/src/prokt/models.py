"""Small MLP classifiers with analytic forward and backward passes.

Teacher and student are both instances of the same family; only the layer
widths differ. Parameters are treated as immutable values: optimiser steps
build new :class:`ModelParams` rather than mutating arrays in place.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .numerics import cross_entropy, derive_rng, one_hot, softmax_t

if TYPE_CHECKING:
    from .data import Dataset

ACTIVATIONS = ("tanh", "relu")

CKPT_MAGIC = b"PROKT-CKPT\n"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """Layer widths ``input -> hidden... -> K`` and the hidden activation."""

    sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2:
            raise ValueError("LayerSpec needs at least input and output widths")
        if any(s < 1 for s in self.sizes):
            raise ValueError(f"layer widths must be positive: {self.sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1


@dataclass(frozen=True, eq=False)
class ModelParams:
    spec: LayerSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.spec.sizes[i], self.spec.sizes[i + 1])
            if W.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {i}: got W{W.shape}, b{b.shape}, expected W{shape}")
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ValueError("layer count does not match spec")

    def arrays(self) -> list[np.ndarray]:
        """Parameters in storage order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, spec: LayerSpec, arrays) -> "ModelParams":
        arrays = list(arrays)
        return cls(spec, tuple(arrays[0::2]), tuple(arrays[1::2]))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.array(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return ModelParams.from_arrays(self.spec, out)

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.spec, [a.copy() for a in self.arrays()])

    def equals(self, other: "ModelParams") -> bool:
        """Bit-for-bit equality of sizes, activation and every array."""
        return self.spec == other.spec and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


# Gradients share the exact layout of the parameters they belong to.
Gradients = ModelParams


@dataclass(eq=False)
class ForwardCache:
    params: ModelParams
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    preacts: list[np.ndarray] = field(default_factory=list)  # hidden pre-activations


def init_model(spec: LayerSpec, seed: int) -> ModelParams:
    """Glorot-uniform hidden layers, all-zero output layer.

    The zero output layer makes every initial prediction exactly uniform, so
    any two models built here start from the same output distribution.
    """
    rng = derive_rng(seed, "init")
    weights, biases = [], []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        if i == spec.n_layers - 1:
            W = np.zeros((fan_in, fan_out))
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        weights.append(W)
        biases.append(np.zeros(fan_out))
    return ModelParams(spec, tuple(weights), tuple(biases))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def forward(params: ModelParams, X) -> tuple[np.ndarray, ForwardCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.spec.n_in:
        raise ValueError(f"input shape {X.shape} does not match input width {params.spec.n_in}")
    cache = ForwardCache(params)
    h = X
    last = params.spec.n_layers - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ W + b
        if i == last:
            return z, cache
        cache.preacts.append(z)
        h = _activate(z, params.spec.activation)
    raise AssertionError("unreachable")


def logits(params: ModelParams, X) -> np.ndarray:
    return forward(params, X)[0]


def predict_proba(params: ModelParams, X, T: float = 1.0) -> np.ndarray:
    return softmax_t(logits(params, X), T)


def backward(params: ModelParams, cache: ForwardCache, dL_dlogits) -> Gradients:
    """Chain rule from a logit gradient back to every weight and bias.

    ``dL_dlogits`` must already carry the loss's batch reduction (e.g. the
    1/n of a mean), so the result is the gradient of that same scalar.
    """
    if cache.params is not params:
        raise ValueError("stale cache: forward was run with different parameters")
    g = np.asarray(dL_dlogits, dtype=np.float64)
    n = cache.inputs[0].shape[0]
    if g.shape != (n, params.spec.n_classes):
        raise ValueError(f"logit gradient shape {g.shape} != {(n, params.spec.n_classes)}")
    dW = [None] * params.spec.n_layers
    db = [None] * params.spec.n_layers
    for i in range(params.spec.n_layers - 1, -1, -1):
        dW[i] = cache.inputs[i].T @ g
        db[i] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ params.weights[i].T
        z = cache.preacts[i - 1]
        if params.spec.activation == "tanh":
            g = g * (1.0 - cache.inputs[i] ** 2)
        else:
            g = g * (z > 0)
    return Gradients(params.spec, tuple(dW), tuple(db))


def accuracy_and_ce(params: ModelParams, X, labels) -> tuple[float, float]:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] == 0:
        raise ValueError("empty dataset")
    u = logits(params, X)
    # np.argmax returns the first maximum: ties go to the lowest class index
    acc = float(np.mean(np.argmax(u, axis=1) == labels))
    ce = float(np.mean(cross_entropy(one_hot(labels, params.spec.n_classes), softmax_t(u))))
    return acc, ce


def evaluate(params: ModelParams, data: "Dataset", subset: str = "test") -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy on ``subset`` (train/test/all)."""
    X, y = data.subset(subset)
    return accuracy_and_ce(params, X, y)


def checkpoint_bytes(params: ModelParams) -> bytes:
    spec = params.spec
    parts = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        struct.pack("<I", len(spec.sizes)),
        struct.pack(f"<{len(spec.sizes)}I", *spec.sizes),
        struct.pack("<I", ACTIVATIONS.index(spec.activation)),
    ]
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes) -> ModelParams:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_sizes,) = struct.unpack("<I", take(4))
    if n_sizes < 2 or n_sizes > 1024:
        raise CheckpointError(f"implausible layer count {n_sizes}")
    sizes = struct.unpack(f"<{n_sizes}I", take(4 * n_sizes))
    (act,) = struct.unpack("<I", take(4))
    if act >= len(ACTIVATIONS):
        raise CheckpointError(f"unknown activation code {act}")
    spec = LayerSpec(sizes, ACTIVATIONS[act])
    arrays = []
    for i in range(spec.n_layers):
        for shape in ((sizes[i], sizes[i + 1]), (sizes[i + 1],)):
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape))
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return ModelParams.from_arrays(spec, arrays)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path, expect: LayerSpec | None = None) -> ModelParams:
    params = params_from_bytes(Path(path).read_bytes())
    if expect is not None and params.spec != expect:
        raise CheckpointError(f"checkpoint spec {params.spec} does not match {expect}")
    return params
