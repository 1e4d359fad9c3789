"""Feed-forward classifiers driven by flat parameter vectors.

Parameters are laid out layer by layer as ``[W_1 (in*out, row-major), b_1, W_2, b_2, ...]``
where ``W`` maps ``x @ W``. A single particle is a vector of length
``shape.n_params``; a stacked ensemble is an ``(n, n_params)`` matrix and every
function here broadcasts over that leading particle axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "NetworkShape",
    "SnapshotError",
    "forward",
    "log_softmax",
    "predict_proba",
    "softmax_np",
    "cross_entropy",
    "init_params",
    "predict",
    "encode_snapshot",
    "decode_snapshot",
]


@dataclass(frozen=True)
class NetworkShape:
    """Layer widths ``(input, hidden..., classes)`` of a ReLU MLP."""

    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ValueError("a network needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        if widths[-1] < 2:
            raise ValueError("class count K must be >= 2")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.widths[:-1], self.widths[1:]))

    def layer_slices(self) -> list[tuple[slice, slice, int, int]]:
        """(weight slice, bias slice, fan_in, fan_out) for every layer."""
        out = []
        off = 0
        for i, o in zip(self.widths[:-1], self.widths[1:]):
            w = slice(off, off + i * o)
            off += i * o
            b = slice(off, off + o)
            off += o
            out.append((w, b, i, o))
        return out


def forward(shape: NetworkShape, params, x) -> Tensor:
    """Logits ``f(x; θ)``.

    ``params`` of shape ``(P,)`` gives ``(B, K)`` logits; ``(n, P)`` gives
    ``(n, B, K)``. Either argument may be a recorded tensor.
    """
    params = T.as_tensor(params)
    x = T.as_tensor(x)
    if params.shape[-1:] != (shape.n_params,) or params.ndim > 2:
        raise ValueError(f"expected params of length {shape.n_params}, got shape {params.shape}")
    if x.ndim != 2 or x.shape[1] != shape.input_dim:
        raise ValueError(f"expected input of shape (batch, {shape.input_dim}), got {x.shape}")
    lead = params.shape[:-1]
    h = x
    layers = shape.layer_slices()
    for k, (ws, bs, fan_in, fan_out) in enumerate(layers):
        W = T.reshape(params[..., ws], lead + (fan_in, fan_out))
        b = T.reshape(params[..., bs], lead + (1, fan_out))
        h = T.matmul(h, W) + b
        if k < len(layers) - 1 and shape.activation == "relu":
            h = T.relu(h)
    return h


def log_softmax(logits) -> Tensor:
    """Row-wise log-softmax via log-sum-exp with a detached max shift."""
    logits = T.as_tensor(logits)
    m = T.stop_gradient(T.max_reduce(logits, axis=-1, keepdims=True))
    shifted = logits - m
    return shifted - T.log(T.sum_(T.exp(shifted), axis=-1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise T.NonFiniteError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(logits) -> np.ndarray:
    """Class probabilities (softmax over the last axis) as a plain array."""
    if isinstance(logits, Tensor):
        logits = logits.data
    return softmax_np(logits)


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


def cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log p(y | x)`` over every row (batch, and particles if stacked)."""
    logits = T.as_tensor(logits)
    k = logits.shape[-1]
    labels = _check_labels(labels, k)
    if logits.shape[-2] != labels.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {logits.shape[-2]}")
    picked = T.sum_(log_softmax(logits) * _one_hot(labels, k), axis=-1)
    return -T.mean(picked)


def predict(probs: np.ndarray) -> np.ndarray:
    # np.argmax breaks ties towards the lowest class index
    return np.argmax(probs, axis=-1)


def init_params(shape: NetworkShape, seed) -> np.ndarray:
    """He-scaled Gaussian weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(shape.n_params)
    for ws, _, fan_in, fan_out in shape.layer_slices():
        theta[ws] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=fan_in * fan_out)
    return theta


# Snapshot layout (little-endian):
#   magic    4s   b"IGPS"
#   version  u16  1
#   n_widths u16
#   activ    u16  0 relu, 1 identity
#   reserved u16  0
#   n_part   u32
#   widths   u32 * n_widths
#   params   f64 * n_part * n_params   (particle-major)
_SNAP_MAGIC = b"IGPS"
_SNAP_HEAD = struct.Struct("<4sHHHHI")
_ACTIVATIONS = ("relu", "identity")


class SnapshotError(ValueError):
    pass


def encode_snapshot(shape: NetworkShape, particles: np.ndarray) -> bytes:
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    if particles.shape[1] != shape.n_params:
        raise ValueError("particle length does not match the network shape")
    head = _SNAP_HEAD.pack(_SNAP_MAGIC, 1, len(shape.widths), _ACTIVATIONS.index(shape.activation), 0,
                           particles.shape[0])
    widths = struct.pack(f"<{len(shape.widths)}I", *shape.widths)
    return head + widths + particles.astype("<f8").tobytes()


def decode_snapshot(buf: bytes, offset: int = 0) -> tuple[NetworkShape, np.ndarray, int]:
    """Parse a snapshot; returns (shape, particles, offset after the snapshot)."""
    if len(buf) - offset < _SNAP_HEAD.size:
        raise SnapshotError("snapshot truncated in header")
    magic, version, n_widths, activ, _, n_part = _SNAP_HEAD.unpack_from(buf, offset)
    if magic != _SNAP_MAGIC:
        raise SnapshotError(f"bad snapshot magic {magic!r}")
    if version != 1:
        raise SnapshotError(f"unsupported snapshot version {version}")
    if activ >= len(_ACTIVATIONS):
        raise SnapshotError(f"unknown activation code {activ}")
    offset += _SNAP_HEAD.size
    if len(buf) - offset < 4 * n_widths:
        raise SnapshotError("snapshot truncated in widths")
    widths = struct.unpack_from(f"<{n_widths}I", buf, offset)
    offset += 4 * n_widths
    try:
        shape = NetworkShape(widths, _ACTIVATIONS[activ])
    except ValueError as exc:
        raise SnapshotError(str(exc)) from exc
    nbytes = 8 * n_part * shape.n_params
    if len(buf) - offset < nbytes:
        raise SnapshotError("snapshot truncated in parameters")
    particles = np.frombuffer(buf, dtype="<f8", count=n_part * shape.n_params, offset=offset)
    particles = particles.astype(np.float64).reshape(n_part, shape.n_params)
    return shape, particles, offset + nbytes


def stack_particles(particles: Sequence[np.ndarray]) -> np.ndarray:
    arr = np.stack([np.asarray(p, dtype=np.float64) for p in particles])
    if not np.all(np.isfinite(arr)):
        raise T.NonFiniteError("non-finite particle values")
    return arr
