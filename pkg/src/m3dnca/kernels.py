"""Compiled inner loops: depthwise 3D convolution and counter-based fire masks.

Reproducibility contract: every kernel computes each output element with a
fixed, position-independent operation order. The convolution accumulates taps
in the same sequence for every voxel regardless of grid extents or offsets, so
evaluating a cropped sub-grid reproduces the full-grid values bit for bit.
Tiled inference depends on this property; do not reorder the tap loops or
switch to a scratch-free accumulation scheme without re-verifying it.
"""

from __future__ import annotations

import os

# The portable threading layer avoids a version probe warning on hosts with
# an old TBB; it only matters when more than one core is available anyway.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
from numba import njit, prange
from numba import float32, uint64

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(value: int) -> int:
    """One splitmix64 scrambling round on a 64-bit integer."""
    z = (value + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def fold_hash(h: int, *fields: int) -> int:
    """Continue a hash chain: splitmix64(h XOR field), left to right.

    fill_fire_mask extends a pre-folded key with the voxel's global
    coordinates through exactly this chain.
    """
    for f in fields:
        h = splitmix64((h & _MASK64) ^ (f & _MASK64))
    return h


def fold_seed(seed: int, *fields: int) -> int:
    """Derive a child seed by folding integer fields into a parent seed.

    The parent is scrambled once, then fields fold in via fold_hash. All
    derived randomness in the package (replica seeds, per-sample seeds,
    fire-mask keys) goes through this function.
    """
    return fold_hash(splitmix64(seed & _MASK64), *fields)


def fire_threshold(fire_rate: float) -> int:
    """Map a firing probability in (0, 1] to a 64-bit comparison threshold."""
    if not 0.0 < fire_rate <= 1.0:
        raise ValueError(f"fire_rate must be in (0, 1], got {fire_rate}")
    return min(int(fire_rate * 2.0**64), _MASK64)


@njit(inline="always")
def _sm64(z):
    z = (z + uint64(0x9E3779B97F4A7C15)) & uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> uint64(30))) * uint64(0xBF58476D1CE4E5B9)) & uint64(
        0xFFFFFFFFFFFFFFFF
    )
    z = ((z ^ (z >> uint64(27))) * uint64(0x94D049BB133111EB)) & uint64(
        0xFFFFFFFFFFFFFFFF
    )
    return z ^ (z >> uint64(31))


@njit(cache=True)
def fill_fire_mask(keys, origins, threshold, out):
    """Fill a per-voxel firing mask from hashed global coordinates.

    keys: uint64[b], one pre-folded key per batch element (seed, level and
    step already mixed in). origins: int64[b, 3] global coordinate of each
    element's grid corner. out: float32[b, Z, Y, X] receives 1.0 where the
    voxel fires. The hash chain is key -> fold z -> fold y -> fold x so a
    voxel's decision depends only on (key, global position).
    """
    b, nz, ny, nx = out.shape
    thr = uint64(threshold)
    for e in range(b):
        key = uint64(keys[e])
        oz = origins[e, 0]
        oy = origins[e, 1]
        ox = origins[e, 2]
        for z in range(nz):
            hz = _sm64(key ^ uint64(z + oz))
            for y in range(ny):
                hy = _sm64(hz ^ uint64(y + oy))
                row = out[e, z, y]
                for x in range(nx):
                    hx = _sm64(hy ^ uint64(x + ox))
                    row[x] = float32(1.0) if hx < thr else float32(0.0)


@njit(cache=True, fastmath=True, parallel=True)
def conv3d_channels(xpad, weights, out):
    """Per-channel (depthwise) 3D cross-correlation.

    xpad: float32[b, c, Z+k-1, Y+k-1, X+k-1] spatially pre-padded input.
    weights: float32[c, k, k, k]. out: float32[b, c, Z, Y, X].

    Accumulates one z-plane at a time with the tap loop outside the y/x
    loops: every voxel sees taps in identical order, which keeps results
    bitwise stable across crops while still vectorizing the inner loops.
    """
    b, c, nz, ny, nx = out.shape
    k = weights.shape[1]
    for bc in prange(b * c):
        bi = bc // c
        ci = bc % c
        w = weights[ci]
        for z in range(nz):
            plane = out[bi, ci, z]
            for y in range(ny):
                for x in range(nx):
                    plane[y, x] = float32(0.0)
            for dz in range(k):
                src = xpad[bi, ci, z + dz]
                for dy in range(k):
                    for dx in range(k):
                        wv = w[dz, dy, dx]
                        for y in range(ny):
                            srow = src[y + dy]
                            prow = plane[y]
                            for x in range(nx):
                                prow[x] += wv * srow[x + dx]


@njit(cache=True, fastmath=True, parallel=True)
def conv3d_channels_wgrad(xpad, gout, dw):
    """Weight gradient of conv3d_channels.

    dw[ci, dz, dy, dx] = sum over batch and voxels of
    xpad[b, ci, z+dz, y+dy, x+dx] * gout[b, ci, z, y, x].
    """
    b, c, nz, ny, nx = gout.shape
    k = dw.shape[1]
    for ci in prange(c):
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    acc = float32(0.0)
                    for bi in range(b):
                        for z in range(nz):
                            src = xpad[bi, ci, z + dz]
                            gpl = gout[bi, ci, z]
                            for y in range(ny):
                                srow = src[y + dy]
                                grow = gpl[y]
                                for x in range(nx):
                                    acc += srow[x + dx] * grow[x]
                    dw[ci, dz, dy, dx] = acc


def warmup() -> None:
    """Trigger JIT compilation of all kernels on tiny inputs."""
    xp = np.zeros((1, 1, 3, 3, 3), dtype=np.float32)
    w = np.zeros((1, 3, 3, 3), dtype=np.float32)
    out = np.zeros((1, 1, 1, 1, 1), dtype=np.float32)
    conv3d_channels(xp, w, out)
    conv3d_channels_wgrad(xp, out, w)
    keys = np.zeros(1, dtype=np.uint64)
    org = np.zeros((1, 3), dtype=np.int64)
    mask = np.zeros((1, 1, 1, 1), dtype=np.float32)
    fill_fire_mask(keys, org, fire_threshold(0.5), mask)
