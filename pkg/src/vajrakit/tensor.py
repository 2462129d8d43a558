"""Minimal dense NCHW tensor engine.

Every computational block in the kit is composed from the ops in this module:
convolution, pooling, inference-mode batchnorm, activations, softmax, batched
matmul and channel split/concat. Tensors are plain numpy arrays of shape
(n, c, h, w), float32 throughout; all ops are pure functions of their inputs.

The heavy primitives (conv2d, pool2d, matmul_batched, softmax_lastdim) consult
an overridable backend so the slow reference implementation in ``oracle.py``
can be swapped in underneath whole blocks for equivalence checks and
instrumented MAC counting.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Tensor geometry violates an op precondition."""


def check_tensor4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate the (n, c, h, w) container contract."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 (n, c, h, w) array")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    if x.dtype != DTYPE:
        raise ShapeError(f"{name} must be float32, got {x.dtype}")
    return x


def tensor4(data, shape=None) -> np.ndarray:
    """Build a float32 NCHW tensor from nested data or a flat list + shape."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(shape)
    return check_tensor4(arr)


def conv_out_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    """Closed-form output spatial dims for a k x k window."""
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(
            f"window k={k} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    """Convolution geometry; the unit of batchnorm fusion."""

    c_in: int
    c_out: int
    k: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.k not in (1, 3, 5, 7):
            raise ValueError(f"kernel side must be 1/3/5/7, got {self.k}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in // self.groups, self.k, self.k)


@dataclass
class BNParams:
    """Inference-mode normalization statistics, one entry per channel."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=DTYPE)
        self.beta = np.asarray(self.beta, dtype=DTYPE)
        self.mean = np.asarray(self.mean, dtype=DTYPE)
        self.var = np.asarray(self.var, dtype=DTYPE)
        c = len(self.gamma)
        if not (len(self.beta) == len(self.mean) == len(self.var) == c):
            raise ValueError("BN arrays must share one length")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if np.any(self.var < 0):
            raise ValueError("var must be nonnegative")
        # eps == 0 is tolerated for identity statistics; var + eps > 0 is
        # enforced wherever the denominator is actually formed.

    @classmethod
    def identity(cls, c: int, eps: float = 1e-3) -> "BNParams":
        return cls(np.ones(c, DTYPE), np.zeros(c, DTYPE), np.zeros(c, DTYPE), np.ones(c, DTYPE), eps)

    @property
    def channels(self) -> int:
        return len(self.gamma)


# ---------------------------------------------------------------------------
# Backend dispatch: default fast path, or the naive reference from oracle.py.
# ---------------------------------------------------------------------------

_BACKEND: contextvars.ContextVar = contextvars.ContextVar("vajrakit_backend", default=None)


@contextlib.contextmanager
def override_backend(backend):
    """Route conv/pool/matmul/softmax through `backend` within the context."""
    token = _BACKEND.set(backend)
    try:
        yield backend
    finally:
        _BACKEND.reset(token)


def _pad_hw(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=DTYPE(value))


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View of all k x k windows: shape (n, c, h_out, w_out, k, k). No copy."""
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )


def conv2d(x: np.ndarray, spec: ConvSpec, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Grouped 2-D convolution over NCHW, im2col + BLAS matmul.

    Elementwise agreement with the naive loop-nest in oracle.py is part of the
    contract and enforced by the test suite.
    """
    backend = _BACKEND.get()
    if backend is not None:
        return backend.conv2d(x, spec, weights, bias)

    check_tensor4(x, "conv input")
    if x.shape[1] != spec.c_in:
        raise ShapeError(f"conv expects {spec.c_in} input channels, got {x.shape[1]}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"weights shaped {weights.shape}, spec wants {spec.weight_shape}")
    if bias is not None and len(bias) != spec.c_out:
        raise ShapeError("bias length must equal c_out")

    n, _, h, w = x.shape
    ho, wo = conv_out_hw(h, w, spec.k, spec.stride, spec.padding)
    xp = _pad_hw(x, spec.padding)
    win = _windows(xp, spec.k, spec.stride)  # (n, c_in, ho, wo, k, k)

    if spec.groups == 1:
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, spec.c_in * spec.k * spec.k, ho * wo)
        wmat = weights.reshape(spec.c_out, -1)
        out = np.matmul(wmat, cols).reshape(n, spec.c_out, ho, wo)
    else:
        g = spec.groups
        cg = spec.c_in // g
        og = spec.c_out // g
        wing = win.reshape(n, g, cg, ho, wo, spec.k, spec.k)
        wg = weights.reshape(g, og, cg, spec.k, spec.k)
        # (n, g, og, ho, wo) accumulated over (cg, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", wing, wg, optimize=True)
        out = out.reshape(n, spec.c_out, ho, wo)

    out = np.ascontiguousarray(out, dtype=DTYPE)
    if bias is not None:
        out += np.asarray(bias, DTYPE)[None, :, None, None]
    return out


def pool2d(
    x: np.ndarray,
    kind: str,
    k: int,
    stride: int,
    padding: int = 0,
    include_pad: bool = True,
) -> np.ndarray:
    """Average or max pooling. Max pads with -inf so padding never wins;
    average counts the full window unless include_pad=False."""
    backend = _BACKEND.get()
    if backend is not None:
        return backend.pool2d(x, kind, k, stride, padding, include_pad)

    check_tensor4(x, "pool input")
    if kind not in ("avg", "max"):
        raise ValueError(f"pool kind must be avg|max, got {kind!r}")
    n, c, h, w = x.shape
    conv_out_hw(h, w, k, stride, padding)  # geometry check
    if kind == "max":
        xp = _pad_hw(x, padding, value=-np.inf)
        win = _windows(xp, k, stride)
        return np.ascontiguousarray(win.max(axis=(4, 5)), dtype=DTYPE)
    xp = _pad_hw(x, padding)
    win = _windows(xp, k, stride)
    if include_pad or padding == 0:
        return np.ascontiguousarray(win.mean(axis=(4, 5), dtype=DTYPE))
    ones = _pad_hw(np.ones_like(x), padding)
    counts = _windows(ones, k, stride).sum(axis=(4, 5), dtype=DTYPE)
    return np.ascontiguousarray(win.sum(axis=(4, 5), dtype=DTYPE) / counts)


def batchnorm_infer(x: np.ndarray, bn: BNParams) -> np.ndarray:
    """Per-channel y = gamma * (x - mean) / sqrt(var + eps) + beta."""
    check_tensor4(x, "bn input")
    if bn.channels != x.shape[1]:
        raise ShapeError(f"BN has {bn.channels} channels, input has {x.shape[1]}")
    if np.any(bn.var + DTYPE(bn.eps) <= 0):
        raise ValueError("var + eps must be positive")
    scale = bn.gamma / np.sqrt(bn.var + DTYPE(bn.eps))
    shift = bn.beta - bn.mean * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def sigmoid(t: np.ndarray) -> np.ndarray:
    # tanh form avoids exp overflow warnings for large negative inputs
    return (DTYPE(0.5) * np.tanh(np.asarray(t, DTYPE) * DTYPE(0.5)) + DTYPE(0.5)).astype(DTYPE)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise silu | sigmoid | identity; silu(t) = t * sigmoid(t)."""
    if kind == "identity":
        return x
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "silu":
        return x * sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_lastdim(m: np.ndarray) -> np.ndarray:
    """Row-stochastic softmax over the trailing axis, max-shifted for stability."""
    backend = _BACKEND.get()
    if backend is not None:
        return backend.softmax_lastdim(m)
    m = np.asarray(m, DTYPE)
    z = np.exp(m - m.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def matmul_batched(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the trailing two axes per batch element."""
    backend = _BACKEND.get()
    if backend is not None:
        return backend.matmul_batched(a, b)
    a = np.asarray(a, DTYPE)
    b = np.asarray(b, DTYPE)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def split_channels(x: np.ndarray, parts: int) -> list[np.ndarray]:
    """Split into `parts` equal channel slices (copies, contiguous)."""
    check_tensor4(x, "split input")
    if x.shape[1] % parts:
        raise ShapeError(f"cannot split {x.shape[1]} channels into {parts} equal parts")
    step = x.shape[1] // parts
    return [np.ascontiguousarray(x[:, i * step:(i + 1) * step]) for i in range(parts)]


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    """Channel-axis concatenation; inverse of split_channels."""
    if not xs:
        raise ShapeError("concat of empty list")
    base = xs[0].shape
    for x in xs:
        check_tensor4(x, "concat input")
        if x.shape[0] != base[0] or x.shape[2:] != base[2:]:
            raise ShapeError(f"concat shape mismatch: {x.shape} vs {base}")
    return np.ascontiguousarray(np.concatenate(xs, axis=1))


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"add shape mismatch: {x.shape} vs {y.shape}")
    return x + y


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean per channel -> (n, c, 1, 1)."""
    check_tensor4(x, "gap input")
    return x.mean(axis=(2, 3), keepdims=True, dtype=DTYPE)


def upsample_nearest(x: np.ndarray, factor: int = 2) -> np.ndarray:
    """Nearest-neighbour spatial upsampling."""
    check_tensor4(x, "upsample input")
    return np.ascontiguousarray(x.repeat(factor, axis=2).repeat(factor, axis=3))
