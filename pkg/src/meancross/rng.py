"""Counter-based Gaussian streams for path simulation.

Philox4x32-10 evaluated vectorized in numpy.  Each Brownian-increment
cell is addressed by the counter (path, step, block, lane-tag) under a
key derived from the 64-bit master seed, so any slice of the increment
array can be produced independently, in any order, by any number of
workers, with bit-identical results.  One Philox block yields two
uniforms, turned into two normals by Box-Muller; cells needing d > 2
normals consume consecutive `block` values.
"""

from __future__ import annotations

import numpy as np

__all__ = ["normal_increments"]

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)

# cells per chunk: bounds transient memory to ~100 MB regardless of (M, N)
_CHUNK_CELLS = 2_000_000


def _philox_4x32_10(c0, c1, c2, c3, k0, k1):
    """One Philox4x32 keyed permutation (10 rounds) on uint32 arrays.

    Runs on uint64 buffers in place (values stay < 2^32 between rounds);
    the 32x32 -> 64 bit products need the wide lanes anyway.
    """
    a = c0.astype(np.uint64)
    b = c1.astype(np.uint64)
    c = c2.astype(np.uint64)
    d = c3.astype(np.uint64)
    k0 = np.uint64(k0)
    k1 = np.uint64(k1)
    p0 = np.empty_like(a)
    p1 = np.empty_like(a)
    hi0 = np.empty_like(a)
    hi1 = np.empty_like(a)
    shift = np.uint64(32)
    for _ in range(10):
        np.multiply(a, _M0, out=p0)
        np.multiply(c, _M1, out=p1)
        np.right_shift(p0, shift, out=hi0)
        np.right_shift(p1, shift, out=hi1)
        p0 &= _MASK32  # lo0
        p1 &= _MASK32  # lo1
        hi1 ^= b
        hi1 ^= k0      # next a
        hi0 ^= d
        hi0 ^= k1      # next c
        a, b, c, d, p0, p1, hi0, hi1 = hi1, p1, hi0, p0, a, c, b, d
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return a, b, c, d


def _normals_for_counters(c0, c1, k0, k1):
    """Two standard normals per counter pair, shape (n, 2)."""
    zeros = np.zeros_like(c0)
    r0, r1, r2, r3 = _philox_4x32_10(c0, c1, zeros, zeros, k0, k1)
    bits_a = (r0 << np.uint64(32)) | r1
    bits_b = (r2 << np.uint64(32)) | r3
    # (0, 1] and [0, 1): log is finite, angle uniform
    u1 = ((bits_a >> np.uint64(11)) + np.uint64(1)).astype(np.float64)
    u1 *= 2.0 ** -53
    u2 = (bits_b >> np.uint64(11)).astype(np.float64)
    u2 *= 2.0 ** -53
    np.log(u1, out=u1)
    u1 *= -2.0
    radius = np.sqrt(u1, out=u1)
    u2 *= 2.0 * np.pi
    out = np.empty(c0.shape + (2,), dtype=np.float64)
    np.cos(u2, out=out[..., 0])
    np.sin(u2, out=out[..., 1])
    out[..., 0] *= radius
    out[..., 1] *= radius
    return out


def normal_increments(seed: int, n_paths: int, n_steps: int, d: int,
                      path_offset: int = 0) -> np.ndarray:
    """Standard-normal array of shape (n_paths, n_steps, d).

    Entry [i, n, j] is a pure function of (seed, path_offset + i, n, j):
    cell (n, j) maps to lane (n*d + j) % 2 of the Philox block with
    counter (path, (n*d + j) // 2).  Any slicing of the work reproduces
    the same values.
    """
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    k0 = np.uint32(seed & 0xFFFFFFFF)
    k1 = np.uint32(seed >> 32)
    lanes = n_steps * d
    n_pairs = (lanes + 1) // 2
    out = np.empty((n_paths, n_steps, d), dtype=np.float64)

    rows_per_chunk = max(1, _CHUNK_CELLS // max(n_pairs, 1))
    for start in range(0, n_paths, rows_per_chunk):
        stop = min(start + rows_per_chunk, n_paths)
        rows = stop - start
        paths = (np.arange(start, stop, dtype=np.uint32) + np.uint32(path_offset))
        c0 = np.repeat(paths, n_pairs)
        c1 = np.tile(np.arange(n_pairs, dtype=np.uint32), rows)
        pair = _normals_for_counters(c0, c1, k0, k1)
        flat = pair.reshape(rows, 2 * n_pairs)[:, :lanes]
        out[start:stop] = flat.reshape(rows, n_steps, d)
    assert n_paths == 0 or np.isfinite(out).all()
    return out
