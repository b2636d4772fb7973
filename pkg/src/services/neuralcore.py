"""Small numpy layer library with hand-written backward passes.

Every layer is a pair of functions: a forward pass returning ``(output, cache)`` and a
backward pass turning an output gradient plus the cache into input and parameter
gradients. Arrays are batched along the leading axis.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.exceptions import DimensionError, NumericError, PreconditionError

logger = logging.getLogger(__name__)

KERNEL_SIZE = 3
PADDING = 1
POOL_SIZE = 2

RMS_RHO = 0.99
RMS_EPS = 1e-8

CHECKPOINT_MAGIC = b"RSWM"
DTYPE_TAGS = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# Dense


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Affine map ``x @ w + b`` for x of shape (N, in) or (in,)."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"Dense layer expects input (..., {w.shape[0]}) and bias ({w.shape[1]},), "
            f"got {x.shape} and {b.shape}"
        )
    return x @ w + b, x


def dense_backward(
    grad_out: np.ndarray, cache: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = cache
    grad_x = grad_out @ w.T
    if x.ndim == 1:
        grad_w = np.outer(x, grad_out)
        grad_b = grad_out
    else:
        grad_w = x.T @ grad_out
        grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


# Convolution


@dataclass
class ConvCache:
    windows: np.ndarray
    input_shape: tuple[int, ...]
    squeeze: bool


def conv2d(
    x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None
) -> tuple[np.ndarray, ConvCache]:
    """3x3 cross-correlation, stride 1, zero padding 1, dilation 1.

    x is (C_in, H, W) or (B, C_in, H, W); kernels are (C_out, C_in, 3, 3).
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernels, got {x.shape} and {kernels.shape}")
    if kernels.shape[2:] != (KERNEL_SIZE, KERNEL_SIZE):
        raise DimensionError(f"conv2d kernels must be 3x3, got {kernels.shape[2:]}")
    if x.shape[1] != kernels.shape[1]:
        raise DimensionError(f"conv2d input has {x.shape[1]} channels, kernels expect {kernels.shape[1]}")
    padded = np.pad(x, ((0, 0), (0, 0), (PADDING, PADDING), (PADDING, PADDING)))
    windows = sliding_window_view(padded, (KERNEL_SIZE, KERNEL_SIZE), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", windows, kernels)
    if bias is not None:
        out = out + bias[None, :, None, None]
    cache = ConvCache(windows, x.shape, squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_backward(
    grad_out: np.ndarray, cache: ConvCache, kernels: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients for input, kernels and bias."""
    if cache.squeeze:
        grad_out = grad_out[None]
    _, _, height, width = cache.input_shape
    grad_kernels = np.einsum("bchwij,bohw->ocij", cache.windows, grad_out)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_padded = np.zeros(
        (cache.input_shape[0], cache.input_shape[1], height + 2 * PADDING, width + 2 * PADDING)
    )
    for i in range(KERNEL_SIZE):
        for j in range(KERNEL_SIZE):
            grad_padded[:, :, i : i + height, j : j + width] += np.einsum(
                "bohw,oc->bchw", grad_out, kernels[:, :, i, j]
            )
    grad_x = grad_padded[:, :, PADDING : PADDING + height, PADDING : PADDING + width]
    if cache.squeeze:
        grad_x = grad_x[0]
    return grad_x, grad_kernels, grad_bias


# Pooling


def avg_pool(x: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    """Non-overlapping 2x2 means over the last two axes."""
    height, width = x.shape[-2:]
    if height % POOL_SIZE or width % POOL_SIZE:
        raise DimensionError(f"avg_pool needs even spatial dims, got {height}x{width}")
    blocks = x.reshape(*x.shape[:-2], height // POOL_SIZE, POOL_SIZE, width // POOL_SIZE, POOL_SIZE)
    return blocks.mean(axis=(-3, -1)), x.shape


def avg_pool_backward(grad_out: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    grad = np.repeat(np.repeat(grad_out, POOL_SIZE, axis=-2), POOL_SIZE, axis=-1)
    return grad.reshape(input_shape) / (POOL_SIZE * POOL_SIZE)


# Activations and loss


def relu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.maximum(x, 0.0), x


def relu_backward(grad_out: np.ndarray, cache: np.ndarray) -> np.ndarray:
    return grad_out * (cache > 0)


def absolute(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.abs(x), x


def absolute_backward(grad_out: np.ndarray, cache: np.ndarray) -> np.ndarray:
    return grad_out * np.sign(cache)


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``prediction``."""
    if prediction.shape != target.shape:
        raise DimensionError(f"Prediction {prediction.shape} and target {target.shape} differ")
    diff = prediction - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# Parameters


class ParameterSet:
    """Named parameter arrays with their RMSProp accumulators."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, dtype: str = "<f4"):
        if dtype not in DTYPE_TAGS:
            raise PreconditionError(f"Unsupported parameter dtype {dtype}")
        self.dtype = dtype
        self._arrays: dict[str, np.ndarray] = {}
        self._accumulators: dict[str, np.ndarray] = {}
        for name, array in (arrays or {}).items():
            self.add(name, array)

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self._arrays:
            raise PreconditionError(f"Parameter {name} already exists")
        self._arrays[name] = np.array(array, dtype=DTYPE_TAGS[self.dtype])
        self._accumulators[name] = np.zeros_like(self._arrays[name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def accumulator(self, name: str) -> np.ndarray:
        return self._accumulators[name]

    def count(self) -> int:
        """Total number of trainable scalars."""
        return sum(array.size for array in self._arrays.values())

    def copy(self) -> "ParameterSet":
        clone = ParameterSet(dtype=self.dtype)
        for name in self._arrays:
            clone._arrays[name] = self._arrays[name].copy()
            clone._accumulators[name] = self._accumulators[name].copy()
        return clone

    def assign_from(self, other: "ParameterSet") -> None:
        """Overwrite values (not accumulators) with those of ``other``."""
        if other.names() != self.names():
            raise PreconditionError("Parameter sets have different names")
        for name in self._arrays:
            np.copyto(self._arrays[name], other[name])

    def as_float64(self) -> dict[str, np.ndarray]:
        return {name: array.astype(np.float64) for name, array in self._arrays.items()}

    def equals(self, other: "ParameterSet") -> bool:
        return self.names() == other.names() and all(
            self[name].tobytes() == other[name].tobytes() for name in self._arrays
        )


def rmsprop_step(
    params: ParameterSet,
    grads: Mapping[str, np.ndarray],
    lr: float,
    rho: float = RMS_RHO,
    eps: float = RMS_EPS,
) -> ParameterSet:
    """One RMSProp update in place: v <- rho v + (1 - rho) g^2; x <- x - lr g / sqrt(v + eps)."""
    if set(grads) != set(params.names()):
        raise PreconditionError(
            f"Gradient keys {sorted(grads)} do not match parameters {sorted(params.names())}"
        )
    for name in params.names():
        value = params[name]
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != value.shape:
            raise DimensionError(f"Gradient for {name} has shape {grad.shape}, expected {value.shape}")
        acc = params.accumulator(name)
        acc[...] = rho * acc + (1.0 - rho) * grad**2
        value[...] = value - lr * grad / np.sqrt(acc.astype(np.float64) + eps)
    return params


# Verification


def grad_check(
    fn: Callable[[dict[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    samples: int,
    rng: np.random.Generator,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``fn`` maps float64 parameter arrays to ``(value, gradients)``. Samples are drawn
    uniformly over all parameter coordinates.
    """
    params = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    value, analytic = fn(params)
    if not np.isfinite(value):
        raise NumericError(f"Function under test returned {value}")
    names = list(params)
    sizes = np.array([params[name].size for name in names])
    worst = 0.0
    for _ in range(samples):
        which = int(rng.choice(len(names), p=sizes / sizes.sum()))
        name = names[which]
        flat = params[name].reshape(-1)
        index = int(rng.integers(flat.size))
        original = flat[index]
        flat[index] = original + step
        plus, _ = fn(params)
        flat[index] = original - step
        minus, _ = fn(params)
        flat[index] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericError(f"Non-finite value while perturbing {name}[{index}]")
        numeric = (plus - minus) / (2 * step)
        exact = float(np.asarray(analytic[name]).reshape(-1)[index])
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        worst = max(worst, error)
    return worst


# Serialization


def encode_parameters(params: ParameterSet, header: Mapping[str, Any] | None = None) -> bytes:
    """Header document followed by little-endian arrays in name order.

    Accumulators are written after the values so an optimizer can resume exactly.
    """
    entries = [{"name": name, "shape": list(params[name].shape)} for name in params.names()]
    document = {**(header or {}), "dtype": params.dtype, "entries": entries}
    header_bytes = json.dumps(document, sort_keys=True).encode("utf-8")
    dtype = DTYPE_TAGS[params.dtype]
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    for name in params.names():
        chunks.append(params[name].astype(dtype).tobytes(order="C"))
    for name in params.names():
        chunks.append(params.accumulator(name).astype(dtype).tobytes(order="C"))
    return b"".join(chunks)


def decode_parameters(blob: bytes) -> tuple[ParameterSet, dict[str, Any]]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise PreconditionError("Not a parameter file: bad magic bytes")
    (length,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + length].decode("utf-8"))
    dtype_tag = header.get("dtype")
    if dtype_tag not in DTYPE_TAGS:
        raise PreconditionError(f"Unsupported parameter dtype {dtype_tag}")
    dtype = DTYPE_TAGS[dtype_tag]
    offset = 8 + length
    params = ParameterSet(dtype=dtype_tag)
    shapes = [(entry["name"], tuple(entry["shape"])) for entry in header["entries"]]
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        params.add(name, array)
        offset += count * dtype.itemsize
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        params.accumulator(name)[...] = array
        offset += count * dtype.itemsize
    if offset != len(blob):
        raise PreconditionError(f"Parameter file has {len(blob) - offset} trailing bytes")
    return params, header
