"""Numeric substrate: seeded randomness and the raw kernels layers are built on.

Tensors are plain ``numpy.ndarray`` objects (float32 in production, float64
for gradient checks). Every kernel here uses a fixed reduction order, so a
given input always produces the same bits regardless of thread count.
"""
from __future__ import annotations

import enum
import math
import os
import warnings
from typing import Sequence

import numba
import numpy as np
from numba import njit, prange

from .errors import DimensionError, ParameterError

# numba probes TBB when the first parallel kernel loads; the fallback layer is fine
warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)

__all__ = [
    "Rng", "Stream", "derive_seed", "splitmix64",
    "matmul", "im2col", "col2im", "im2col_batch", "col2im_batch",
    "conv_output_size", "reduce", "fill_random",
    "row_major_strides", "flat_index", "unflat_index", "set_num_threads",
]

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

def splitmix64(x: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns ``(output, new_state)``."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), x


def derive_seed(seed: int, *keys: int) -> int:
    """Mix integer keys (epoch, fold, ...) into a 64-bit seed."""
    out, state = splitmix64(seed & _MASK64)
    for k in keys:
        mixed, _ = splitmix64((k & _MASK64) ^ out)
        out, state = splitmix64(state ^ mixed)
    return out


class Stream(enum.IntEnum):
    """One PCG32 stream per consumer so consumers never perturb each other."""
    SPLIT = 1
    INIT = 2
    AUGMENT = 3
    DROPOUT = 4
    SHUFFLE = 5
    DATA = 6


_PCG_MULT = np.uint64(6364136223846793005)
_U64_1 = np.uint64(1)
_U64_18 = np.uint64(18)
_U64_27 = np.uint64(27)
_U64_59 = np.uint64(59)
_U64_31 = np.uint64(31)
_U64_32 = np.uint64(32)
_U64_LOW32 = np.uint64(0xFFFFFFFF)


@njit(cache=True)
def _pcg32_fill(state, inc, out):
    for i in range(out.size):
        old = state
        state = old * _PCG_MULT + inc
        xorshifted = (((old >> _U64_18) ^ old) >> _U64_27) & _U64_LOW32
        rot = old >> _U64_59
        val = (xorshifted >> rot) | (xorshifted << ((_U64_32 - rot) & _U64_31))
        out[i] = np.uint32(val & _U64_LOW32)
    return state


@njit(cache=True)
def _pcg32_permutation(state, inc, n):
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        bound = np.uint64(i + 1)
        threshold = ((np.uint64(1) << _U64_32) - bound) % bound
        while True:
            old = state
            state = old * _PCG_MULT + inc
            xorshifted = (((old >> _U64_18) ^ old) >> _U64_27) & _U64_LOW32
            rot = old >> _U64_59
            r = ((xorshifted >> rot) | (xorshifted << ((_U64_32 - rot) & _U64_31))) & _U64_LOW32
            if r >= threshold:
                break
        j = np.int64(r % bound)
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return perm, state


class Rng:
    """PCG32 generator whose initial state comes from SplitMix64(seed).

    ``stream`` selects the PCG increment, so ``Rng(s, Stream.INIT)`` and
    ``Rng(s, Stream.DROPOUT)`` are independent sequences. Single owner only.
    """

    def __init__(self, seed: int, stream: int = 0):
        init_state, _ = splitmix64(int(seed) & _MASK64)
        self.seed = int(seed)
        self.stream = int(stream)
        self._seed_state(init_state, self.stream)

    @classmethod
    def from_pcg_state(cls, init_state: int, init_seq: int) -> "Rng":
        """Seed exactly like the reference ``pcg32_srandom_r``."""
        rng = cls.__new__(cls)
        rng.seed, rng.stream = init_state, init_seq
        rng._seed_state(init_state, init_seq)
        return rng

    def _seed_state(self, init_state: int, init_seq: int) -> None:
        self._inc = np.uint64(((init_seq << 1) | 1) & _MASK64)
        self._state = np.uint64(0)
        self.u32(1)
        self._state = np.uint64((int(self._state) + init_state) & _MASK64)
        self.u32(1)

    def u32(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint32)
        self._state = np.uint64(_pcg32_fill(self._state, self._inc, out))
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 draws in [0, 1) with 53 random bits each."""
        raw = self.u32(2 * int(n)).astype(np.uint64)
        hi, lo = raw[0::2] >> np.uint64(5), raw[1::2] >> np.uint64(6)
        return (hi.astype(np.float64) * 67108864.0 + lo.astype(np.float64)) / 9007199254740992.0

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws via the Box-Muller transform."""
        n = int(n)
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * math.pi * u2)
        z[1::2] = r * np.sin(2.0 * math.pi * u2)
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        perm, state = _pcg32_permutation(self._state, self._inc, int(n))
        self._state = np.uint64(state)
        return perm

    def bernoulli_keep(self, shape: Sequence[int], rate: float) -> np.ndarray:
        """Boolean mask where each element is False with probability ``rate``."""
        size = int(np.prod(shape))
        threshold = np.uint32(min(int(round(rate * 2.0**32)), 2**32 - 1))
        return (self.u32(size) >= threshold).reshape(tuple(shape))


def fill_random(shape: Sequence[int], dist: str = "uniform", rng: Rng | None = None,
                a: float = 0.0, b: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Random tensor. ``dist="uniform"`` uses ``(a, b)`` as bounds,
    ``dist="normal"`` uses them as ``(mu, sigma)``."""
    if rng is None:
        raise ParameterError("fill_random needs an Rng")
    shape = tuple(int(s) for s in shape)
    size = int(np.prod(shape))
    if dist == "uniform":
        if not a < b:
            raise ParameterError(f"uniform bounds need a < b, got ({a}, {b})")
        vals = a + (b - a) * rng.uniform(size)
    elif dist == "normal":
        if not b > 0:
            raise ParameterError(f"normal sigma must be > 0, got {b}")
        vals = a + b * rng.normal(size)
    else:
        raise ParameterError(f"unknown distribution {dist!r}")
    return vals.astype(dtype).reshape(shape)


# ---------------------------------------------------------------------------
# Indexing helpers
# ---------------------------------------------------------------------------

def row_major_strides(shape: Sequence[int]) -> tuple[int, ...]:
    strides = [1] * len(shape)
    for d in range(len(shape) - 2, -1, -1):
        strides[d] = strides[d + 1] * int(shape[d + 1])
    return tuple(strides)


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    return sum(int(i) * s for i, s in zip(index, row_major_strides(shape)))


def unflat_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    out = []
    for s in row_major_strides(shape):
        q, flat = divmod(flat, s)
        out.append(q)
    return tuple(out)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

_BLOCK_J = 256


@njit(cache=True, inline="always")
def _matmul_block(a, b, c, j0, j1, acc):
    # c[:, j0:j1]; each element is summed over t = 0..k-1 in order.
    # acc is a private tile, so the j loop vectorizes without alias checks
    m, k = a.shape
    w = j1 - j0
    for i in range(0, m, 4):
        r = min(4, m - i)
        acc[:, :] = 0
        if r == 4:
            for t in range(k):
                a0 = a[i, t]
                a1 = a[i + 1, t]
                a2 = a[i + 2, t]
                a3 = a[i + 3, t]
                bt = b[t, j0:j1]
                for j in range(w):
                    bv = bt[j]
                    acc[0, j] += a0 * bv
                    acc[1, j] += a1 * bv
                    acc[2, j] += a2 * bv
                    acc[3, j] += a3 * bv
        else:
            for q in range(r):
                for t in range(k):
                    av = a[i + q, t]
                    bt = b[t, j0:j1]
                    for j in range(w):
                        acc[q, j] += av * bt[j]
        for q in range(r):
            for j in range(w):
                c[i + q, j0 + j] = acc[q, j]


@njit(cache=True)
def _matmul_serial(a, b, c):
    n = b.shape[1]
    acc = np.empty((4, _BLOCK_J), dtype=c.dtype)
    for j0 in range(0, n, _BLOCK_J):
        _matmul_block(a, b, c, j0, min(n, j0 + _BLOCK_J), acc)


@njit(parallel=True, cache=True)
def _matmul_parallel(a, b, c):
    n = b.shape[1]
    nblocks = (n + _BLOCK_J - 1) // _BLOCK_J
    for blk in prange(nblocks):
        acc = np.empty((4, _BLOCK_J), dtype=c.dtype)
        j0 = blk * _BLOCK_J
        _matmul_block(a, b, c, j0, min(n, j0 + _BLOCK_J), acc)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``c[i, j] = sum_t a[i, t] * b[t, j]``, accumulated in ascending ``t``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    c = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    if c.size and a.shape[1]:
        # threads split columns only, so results do not depend on thread count
        if numba.get_num_threads() > 1 and b.shape[1] > 4 * _BLOCK_J:
            _matmul_parallel(a, b, c)
        else:
            _matmul_serial(a, b, c)
    return c


def conv_output_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _check_window(h, w, kernel, stride, pad):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    if min(kh, kw, sh, sw) < 1 or min(ph, pw) < 0:
        raise DimensionError(f"invalid window kernel={kernel} stride={stride} pad={pad}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(
            f"kernel {kernel} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    return conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)


@njit(cache=True)
def _im2col_kernel(x, kh, kw, sh, sw, ph, pw, ho, wo, cols):
    n_img, c_in, h, w = x.shape
    for c in range(c_in):
        for ki in range(kh):
            for kj in range(kw):
                row = (c * kh + ki) * kw + kj
                for n in range(n_img):
                    for oy in range(ho):
                        iy = oy * sh - ph + ki
                        base = (n * ho + oy) * wo
                        if iy < 0 or iy >= h:
                            for ox in range(wo):
                                cols[row, base + ox] = 0.0
                            continue
                        for ox in range(wo):
                            ix = ox * sw - pw + kj
                            if 0 <= ix < w:
                                cols[row, base + ox] = x[n, c, iy, ix]
                            else:
                                cols[row, base + ox] = 0.0


@njit(cache=True)
def _col2im_kernel(cols, kh, kw, sh, sw, ph, pw, ho, wo, x):
    n_img, c_in, h, w = x.shape
    for c in range(c_in):
        for ki in range(kh):
            for kj in range(kw):
                row = (c * kh + ki) * kw + kj
                for n in range(n_img):
                    for oy in range(ho):
                        iy = oy * sh - ph + ki
                        if iy < 0 or iy >= h:
                            continue
                        base = (n * ho + oy) * wo
                        for ox in range(wo):
                            ix = ox * sw - pw + kj
                            if 0 <= ix < w:
                                x[n, c, iy, ix] += cols[row, base + ox]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def im2col_batch(x: np.ndarray, kernel, stride=1, pad=0) -> np.ndarray:
    """``x[N, C, H, W]`` -> ``cols[C*kh*kw, N*Ho*Wo]``; column index is
    ``(n*Ho + oy)*Wo + ox`` and rows run in (C, kh, kw) order."""
    if x.ndim != 4:
        raise DimensionError(f"im2col_batch expects [N, C, H, W], got {x.shape}")
    kernel, stride, pad = _pair(kernel), _pair(stride), _pair(pad)
    n, c, h, w = x.shape
    ho, wo = _check_window(h, w, kernel, stride, pad)
    cols = np.empty((c * kernel[0] * kernel[1], n * ho * wo), dtype=x.dtype)
    _im2col_kernel(np.ascontiguousarray(x), *kernel, *stride, *pad, ho, wo, cols)
    return cols


def col2im_batch(cols: np.ndarray, x_shape, kernel, stride=1, pad=0) -> np.ndarray:
    """Scatter-add inverse (adjoint) of :func:`im2col_batch`."""
    kernel, stride, pad = _pair(kernel), _pair(stride), _pair(pad)
    n, c, h, w = (int(s) for s in x_shape)
    ho, wo = _check_window(h, w, kernel, stride, pad)
    expected = (c * kernel[0] * kernel[1], n * ho * wo)
    if cols.shape != expected:
        raise DimensionError(f"col2im expects cols of shape {expected}, got {cols.shape}")
    x = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im_kernel(np.ascontiguousarray(cols), *kernel, *stride, *pad, ho, wo, x)
    return x


def im2col(x: np.ndarray, kernel, stride=1, pad=0) -> np.ndarray:
    """Single image ``x[C, H, W]`` -> ``[C*kh*kw, Ho*Wo]``."""
    if x.ndim != 3:
        raise DimensionError(f"im2col expects [C, H, W], got {x.shape}")
    return im2col_batch(x[None], kernel, stride, pad)


def col2im(cols: np.ndarray, x_shape, kernel, stride=1, pad=0) -> np.ndarray:
    return col2im_batch(cols, (1, *x_shape), kernel, stride, pad)[0]


def reduce(x: np.ndarray, kind: str, axis: int) -> np.ndarray:
    """Sum, mean or argmax along ``axis``; argmax ties go to the lowest index."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    if kind == "sum":
        return np.sum(x, axis=axis)
    if kind == "mean":
        return np.mean(x, axis=axis)
    if kind == "argmax":
        return np.argmax(x, axis=axis)
    raise ParameterError(f"unknown reduction {kind!r}")


def set_num_threads(n: int | None = None) -> int:
    """Cap kernel worker threads; defaults to ``$AGBADA_THREADS`` when set."""
    if n is None:
        env = os.environ.get("AGBADA_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n
