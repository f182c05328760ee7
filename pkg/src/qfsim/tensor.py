"""Dense float64 tensor arithmetic with reproducible reduction order.

Tensors are plain contiguous ``numpy.ndarray`` objects of dtype float64;
the helpers here validate shapes and finiteness at every public boundary.
Matrix products and convolutions accumulate along the contraction axis in
ascending index order (no fused or reordered reductions), so results are
bit-identical across runs for identical inputs.

``conv2d`` uses the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

Tensor = np.ndarray

_F64 = np.float64


def tensor(values, shape: tuple[int, ...] | None = None) -> Tensor:
    """Build a validated float64 tensor from array-like ``values``."""
    arr = np.ascontiguousarray(values, dtype=_F64)
    if shape is not None:
        if math.prod(shape) != arr.size:
            raise ShapeMismatchError(
                f"cannot view {arr.size} elements as shape {shape}"
            )
        arr = arr.reshape(shape)
    check_finite(arr, "tensor()")
    return arr


def check_finite(x: Tensor, context: str = "operation") -> Tensor:
    """Raise NonFiniteError if ``x`` holds NaN or Inf; return ``x``."""
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{context} produced non-finite values")
    return x


def _check_binary_shapes(a: Tensor, b, op: str) -> None:
    # Only scalar-vs-tensor and identical-shape pairings are supported.
    if np.isscalar(b) or getattr(b, "ndim", None) == 0:
        return
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b) -> Tensor:
    _check_binary_shapes(a, b, "add")
    return check_finite(np.add(a, b), "add")


def sub(a: Tensor, b) -> Tensor:
    _check_binary_shapes(a, b, "sub")
    return check_finite(np.subtract(a, b), "sub")


def mul(a: Tensor, b) -> Tensor:
    _check_binary_shapes(a, b, "mul")
    return check_finite(np.multiply(a, b), "mul")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ShapeMismatchError(f"clamp: lo {lo} exceeds hi {hi}")
    return check_finite(np.clip(a, lo, hi), "clamp")


def absolute(a: Tensor) -> Tensor:
    return check_finite(np.abs(a), "abs")


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    """x for x >= 0, slope * x otherwise."""
    return check_finite(np.where(a >= 0.0, a, slope * a), "leaky_relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k] @ [k,n] -> [m,n], accumulated in ascending-k order."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(
            f"matmul expects 2-d operands, got {a.shape} and {b.shape}"
        )
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeMismatchError(f"matmul: inner dims {k} and {k2} differ")
    out = np.zeros((m, n), dtype=_F64)
    for i in range(k):
        out += a[:, i : i + 1] * b[i : i + 1, :]
    return check_finite(out, "matmul")


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return (
        (h + 2 * padding - kh) // stride + 1,
        (w + 2 * padding - kw) // stride + 1,
    )


def im2col(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    """Unfold [N,C,H,W] into patch rows [N*H'*W', C*kh*kw].

    Column order is the flattened (c, kh, kw) index, which fixes the
    reduction order of the convolution built on top of it.
    """
    n, c, h, w = x.shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError(
            f"conv2d: kernel ({kh},{kw}) too large for padded input ({h},{w}) pad {padding}"
        )
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=_F64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :, :] = x[
                :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
            ]
    # [N,C,kh,kw,H',W'] -> [N,H',W',C*kh*kw] -> [N*H'*W', C*kh*kw]
    cols = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(
    cols: Tensor,
    x_shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int,
    padding: int,
) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    n, c, h, w = x_shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=_F64)
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, i, j, :, :
            ]
    if padding > 0:
        padded = padded[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(padded)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate [N,Cin,H,W] with [Cout,Cin,kh,kw] -> [N,Cout,H',W'].

    Zero padding; H' = floor((H + 2p - kh)/stride) + 1 and likewise for W'.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects 4-d input/weight, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeMismatchError(f"conv2d: input channels {c} != weight channels {cin}")
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    wmat = weight.reshape(cout, cin * kh * kw)
    out = matmul(cols, np.ascontiguousarray(wmat.T))  # [N*H'*W', Cout]
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return check_finite(np.ascontiguousarray(out), "conv2d")


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO53_INV = float(2.0 ** -53)


class Rng:
    """Counter-based SplitMix64 generator.

    Output i of a stream with seed s is ``mix64(s + (i+1) * 0x9E3779B97F4A7C15)``
    where ``mix64`` is the SplitMix64 finalizer. The stream is a pure function
    of (seed, position), so identical seeds reproduce identical draws on any
    platform, and arbitrary batches can be generated vectorized.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._pos = 0

    @staticmethod
    def _mix(z: np.ndarray) -> np.ndarray:
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        with np.errstate(over="ignore"):
            return self._mix(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, n: int) -> Tensor:
        """n draws from U[0, 1) using the top 53 bits of each word."""
        return ((self._raw(n) >> np.uint64(11)).astype(_F64)) * _TWO53_INV

    def normal(self, shape: tuple[int, ...] | int, scale: float = 1.0) -> Tensor:
        """Standard-normal draws via Box-Muller (pairs of uniforms)."""
        if isinstance(shape, int):
            shape = (shape,)
        n = math.prod(shape) if shape else 1
        half = (n + 1) // 2
        u1 = (((self._raw(half) >> np.uint64(11)).astype(_F64)) + 1.0) * _TWO53_INV
        u2 = ((self._raw(half) >> np.uint64(11)).astype(_F64)) * _TWO53_INV
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (scale * z).reshape(shape)

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """n integers in [lo, hi)."""
        if hi <= lo:
            raise ShapeMismatchError(f"integers: empty range [{lo}, {hi})")
        span = np.uint64(hi - lo)
        return (lo + (self._raw(n) % span).astype(np.int64)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of fresh uniforms)."""
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from (seed, key)."""
        with np.errstate(over="ignore"):
            child = self._mix(
                np.uint64(self.seed) ^ self._mix(np.array([key + 1], dtype=np.uint64))
            )
        return Rng(int(child[0]))
