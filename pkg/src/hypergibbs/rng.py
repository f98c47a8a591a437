"""Counter-based noise streams.

Every random draw is a pure function of ``(seed, tag, operator, index, t, draw)``,
computed with the Philox4x64-10 block cipher. A worker that owns a subset of
vertices or hyperedges therefore reproduces exactly the draws that a single
process would make for the same global indices, whatever the partition.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# Stream tags, one per random variable of the chain.
TAG_X = 1
TAG_Z = 2
TAG_U = 3
TAG_POISSON = 4
TAG_PROBE = 5

_M32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_PHILOX_M0 = np.uint64(0xD2E7470EE14C6C93)
_PHILOX_M1 = np.uint64(0xCA5A826395121157)
_PHILOX_W0 = np.uint64(0x9E3779B97F4A7C15)
_PHILOX_W1 = np.uint64(0xBB67AE8584CAA73B)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * math.pi


@njit(nogil=True, cache=True, inline="always")
def _mulhilo(a, b):
    a_lo = a & _M32
    a_hi = a >> _S32
    b_lo = b & _M32
    b_hi = b >> _S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> _S32) + (p1 & _M32) + (p2 & _M32)
    hi = p3 + (p1 >> _S32) + (p2 >> _S32) + (mid >> _S32)
    return hi, a * b


@njit(nogil=True, cache=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Philox4x64 with 10 rounds on one 256-bit counter."""
    for r in range(10):
        if r > 0:
            k0 = k0 + _PHILOX_W0
            k1 = k1 + _PHILOX_W1
        hi0, lo0 = _mulhilo(_PHILOX_M0, c0)
        hi1, lo1 = _mulhilo(_PHILOX_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@njit(nogil=True, cache=True, inline="always")
def _to_unit(word):
    # 53 high bits mapped to [0, 1)
    return float(word >> _S11) * _INV53


@njit(nogil=True, cache=True)
def _normals(index, t, stream, key, out):
    # Global index n uses lane n % 4 of the Philox block at counter n // 4:
    # lanes (0, 1) and (2, 3) are the cosine and sine halves of two Box-Muller pairs.
    k1 = np.uint64(0)
    tt = np.uint64(t)
    last = -1
    r0 = r1 = s0 = s1 = 0.0
    for j in range(index.size):
        n = index[j]
        block = n >> 2
        if block != last:
            o0, o1, o2, o3 = philox4x64(np.uint64(block), tt, stream, np.uint64(0), key, k1)
            r0 = math.sqrt(-2.0 * math.log(1.0 - _to_unit(o0)))
            s0 = _TWO_PI * _to_unit(o1)
            r1 = math.sqrt(-2.0 * math.log(1.0 - _to_unit(o2)))
            s1 = _TWO_PI * _to_unit(o3)
            last = block
        lane = n & 3
        if lane == 0:
            out[j] = r0 * math.cos(s0)
        elif lane == 1:
            out[j] = r0 * math.sin(s0)
        elif lane == 2:
            out[j] = r1 * math.cos(s1)
        else:
            out[j] = r1 * math.sin(s1)


@njit(nogil=True, cache=True)
def _uniforms(index, t, stream, key, out):
    tt = np.uint64(t)
    for j in range(index.size):
        o0, _, _, _ = philox4x64(np.uint64(index[j]), tt, stream, np.uint64(0), key, np.uint64(0))
        out[j] = _to_unit(o0)


@njit(nogil=True, cache=True)
def _poisson(mean, index, t, stream, key, out):
    tt = np.uint64(t)
    k1 = np.uint64(0)
    for j in range(index.size):
        lam = mean[j]
        n = np.uint64(index[j])
        if lam <= 0.0:
            out[j] = 0.0
        elif lam < 10.0:
            # inversion by sequential search
            o0, _, _, _ = philox4x64(n, tt, stream, np.uint64(0), key, k1)
            u = _to_unit(o0)
            p = math.exp(-lam)
            cdf = p
            k = 0
            while u > cdf and k < 10000:
                k += 1
                p *= lam / k
                cdf += p
            out[j] = k
        else:
            # transformed rejection with squeeze (Hormann 1993)
            slam = math.sqrt(lam)
            loglam = math.log(lam)
            b = 0.931 + 2.53 * slam
            a = -0.059 + 0.02483 * b
            invalpha = 1.1239 + 1.1328 / (b - 3.4)
            vr = 0.9277 - 3.6224 / (b - 2.0)
            attempt = np.uint64(0)
            while True:
                o0, o1, _, _ = philox4x64(n, tt, stream + attempt, np.uint64(0), key, k1)
                attempt += np.uint64(1)
                uu = _to_unit(o0) - 0.5
                vv = _to_unit(o1)
                us = 0.5 - abs(uu)
                k = math.floor((2.0 * a / us + b) * uu + lam + 0.43)
                if us >= 0.07 and vv <= vr:
                    out[j] = k
                    break
                if k < 0.0 or (us < 0.013 and vv > us):
                    continue
                if (math.log(vv) + math.log(invalpha) - math.log(a / (us * us) + b)
                        <= -lam + k * loglam - math.lgamma(k + 1.0)):
                    out[j] = k
                    break


def stream_word(tag: int, op: int = 0, draw: int = 0) -> np.uint64:
    """Pack a stream identifier into the third Philox counter word."""
    if not (0 <= tag < 1 << 16 and 0 <= op < 1 << 16 and 0 <= draw < 1 << 32):
        raise ValueError("stream identifier out of range")
    return np.uint64((tag << 48) | (op << 32) | draw)


class NoiseSource:
    """Deterministic noise keyed by global element index and iteration.

    Parameters
    ----------
    seed : int
        Experiment seed, used as the Philox key.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._key = np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)

    def normal(self, tag: int, op: int, index: np.ndarray, t: int) -> np.ndarray:
        """Standard normal draws for the given global indices at iteration ``t``."""
        index = np.ascontiguousarray(index, dtype=np.int64)
        out = np.empty(index.size, dtype=np.float64)
        _normals(index, int(t), stream_word(tag, op), self._key, out)
        return out

    def uniform(self, tag: int, op: int, index: np.ndarray, t: int) -> np.ndarray:
        index = np.ascontiguousarray(index, dtype=np.int64)
        out = np.empty(index.size, dtype=np.float64)
        _uniforms(index, int(t), stream_word(tag, op), self._key, out)
        return out

    def poisson(self, mean: np.ndarray, op: int = 0, t: int = 0,
                index: np.ndarray | None = None) -> np.ndarray:
        """Poisson draws with the given means, one independent stream per element."""
        mean = np.ascontiguousarray(mean, dtype=np.float64).ravel()
        if not np.all(np.isfinite(mean)) or np.any(mean < 0):
            raise ValueError("Poisson means must be finite and nonnegative")
        if index is None:
            index = np.arange(mean.size, dtype=np.int64)
        index = np.ascontiguousarray(index, dtype=np.int64)
        out = np.empty(mean.size, dtype=np.float64)
        _poisson(mean, index, int(t), stream_word(TAG_POISSON, op), self._key, out)
        return out


class ZeroNoise(NoiseSource):
    """Noise source that returns zeros, turning the chain into a deterministic recursion."""

    def __init__(self):
        super().__init__(0)

    def normal(self, tag, op, index, t):
        return np.zeros(np.asarray(index).size)


def sample_poisson(mean: np.ndarray, seed: int) -> np.ndarray:
    """Draw ``Poisson(mean)`` elementwise with a reproducible counter-based stream."""
    mean = np.asarray(mean, dtype=np.float64)
    return NoiseSource(seed).poisson(mean.ravel()).reshape(mean.shape)
