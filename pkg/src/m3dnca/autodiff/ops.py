"""Differentiable operations on 5-d activation tensors.

Layout convention: activations are [batch, channels, z, y, x]. Every op takes
an optional Tape; with tape=None it runs forward-only. Ops follow the dtype of
their inputs (float32 in production, float64 for numeric checks); reductions
that feed statistics or losses always accumulate in float64, and the tape
casts every gradient to the dtype of the tensor it belongs to.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ContractError, DegenerateBatchError, ShapeError
from ..kernels import conv3d_channels, conv3d_channels_wgrad
from .tensor import Tape, Tensor


def _want5(x: Tensor, name: str) -> None:
    if x.data.ndim != 5:
        raise ShapeError(f"{name} expects a [b, c, z, y, x] tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# layers


def conv3d(x: Tensor, kernels: Tensor, tape: Tape | None = None) -> Tensor:
    """Depthwise 3D cross-correlation with zero padding, one kernel per channel.

    kernels has shape [c, k, k, k] with odd k; output extents match input.
    """
    _want5(x, "conv3d")
    kd = kernels.data
    if kd.ndim != 4 or not (kd.shape[1] == kd.shape[2] == kd.shape[3]):
        raise ShapeError(f"kernels must be [c, k, k, k], got {kd.shape}")
    k = kd.shape[1]
    if k % 2 == 0 or k < 1:
        raise ConfigError(f"kernel size must be odd and positive, got {k}")
    if kd.shape[0] != x.data.shape[1]:
        raise ShapeError(
            f"kernel count {kd.shape[0]} does not match channels {x.data.shape[1]}"
        )
    r = (k - 1) // 2
    pad = ((0, 0), (0, 0), (r, r), (r, r), (r, r))
    xpad = np.pad(x.data, pad)
    out = np.empty_like(x.data)
    conv3d_channels(xpad, kd, out)
    res = Tensor(out)
    if tape is not None:
        def backward(gout: np.ndarray):
            dw = np.empty_like(kd)
            conv3d_channels_wgrad(xpad, gout, dw)
            gpad = np.pad(gout, pad)
            dx = np.empty_like(gout)
            flipped = np.ascontiguousarray(kd[:, ::-1, ::-1, ::-1])
            conv3d_channels(gpad, flipped, dx)
            return dx, dw

        tape.record((x, kernels), res, backward)
    return res


def dense(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-voxel linear map across channels (a 1x1x1 convolution)."""
    _want5(x, "dense")
    fo, fi = w.data.shape
    if fi != x.data.shape[1]:
        raise ShapeError(f"weight expects {fi} input channels, got {x.data.shape[1]}")
    if b.data.shape != (fo,):
        raise ShapeError(f"bias must have shape ({fo},), got {b.data.shape}")
    bsz = x.data.shape[0]
    sp = x.data.shape[2:]
    n = int(np.prod(sp))
    xb = x.data.reshape(bsz, fi, n)
    out = np.matmul(w.data, xb)
    out += b.data[:, None]
    res = Tensor(out.reshape(bsz, fo, *sp))
    if tape is not None:
        def backward(gout: np.ndarray):
            g = gout.reshape(bsz, fo, n)
            dx = np.matmul(w.data.T, g).reshape(x.data.shape)
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(fo, bsz * n)
            x2 = np.ascontiguousarray(xb.transpose(1, 0, 2)).reshape(fi, bsz * n)
            dw = np.matmul(g2, x2.T)
            db = g.sum(axis=(0, 2), dtype=np.float64)
            return dx, dw, db

        tape.record((x, w, b), res, backward)
    return res


def bn_eval_forward(
    x: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float,
) -> np.ndarray:
    """Normalization with frozen statistics; shared by training-eval and inference."""
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(x.dtype)
    rm = running_mean.astype(x.dtype, copy=False)
    g = gamma.astype(x.dtype, copy=False)
    b = beta.astype(x.dtype, copy=False)
    xhat = (x - rm.reshape(shape)) * inv.reshape(shape)
    return g.reshape(shape) * xhat + b.reshape(shape)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    tape: Tape | None = None,
) -> Tensor:
    """Channel-wise batch normalization with an affine transform.

    In training mode the batch statistics are computed over (batch, z, y, x),
    and running_mean / running_var are updated in place with an exponential
    moving average (unbiased variance). In eval mode the running statistics
    are used and nothing is mutated.
    """
    _want5(x, "batchnorm")
    c = x.data.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data)):
        if arr.shape != (c,):
            raise ShapeError(f"{name} must have shape ({c},), got {arr.shape}")
    shape = (1, c, 1, 1, 1)
    if not training:
        out = bn_eval_forward(x.data, running_mean, running_var, gamma.data, beta.data, eps)
        res = Tensor(out)
        if tape is not None:
            dt = x.data.dtype
            inv = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(dt)
            xhat = (x.data - running_mean.astype(dt).reshape(shape)) * inv.reshape(shape)

            def backward_eval(gout: np.ndarray):
                dx = gout * (gamma.data.astype(dt) * inv).reshape(shape)
                dgamma = (gout * xhat).sum(axis=(0, 2, 3, 4), dtype=np.float64)
                dbeta = gout.sum(axis=(0, 2, 3, 4), dtype=np.float64)
                return dx, dgamma, dbeta

            tape.record((x, gamma, beta), res, backward_eval)
        return res

    axes = (0, 2, 3, 4)
    m = x.data.shape[0] * int(np.prod(x.data.shape[2:]))
    if m < 2:
        raise DegenerateBatchError(
            "batch statistics need at least two values per channel"
        )
    dt = x.data.dtype
    mu = x.data.mean(axis=axes, dtype=np.float64)
    var = x.data.var(axis=axes, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mu.astype(dt).reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    unbiased = var * (m / (m - 1.0))
    running_mean *= np.float32(1.0 - momentum)
    running_mean += np.float32(momentum) * mu.astype(np.float32)
    running_var *= np.float32(1.0 - momentum)
    running_var += np.float32(momentum) * unbiased.astype(np.float32)
    res = Tensor(out)
    if tape is not None:
        def backward_train(gout: np.ndarray):
            gxhat = gout * gamma.data.astype(dt).reshape(shape)
            mean_g = gxhat.mean(axis=axes, dtype=np.float64).astype(dt)
            mean_gx = (gxhat * xhat).mean(axis=axes, dtype=np.float64).astype(dt)
            dx = inv.reshape(shape) * (
                gxhat - mean_g.reshape(shape) - xhat * mean_gx.reshape(shape)
            )
            dgamma = (gout * xhat).sum(axis=axes, dtype=np.float64)
            dbeta = gout.sum(axis=axes, dtype=np.float64)
            return dx, dgamma, dbeta

        tape.record((x, gamma, beta), res, backward_train)
    return res


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = np.maximum(x.data, np.float32(0.0))
    res = Tensor(out)
    if tape is not None:
        mask = out > 0

        def backward(gout: np.ndarray):
            return (np.where(mask, gout, np.float32(0.0)),)

        tape.record((x,), res, backward)
    return res


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Logistic function, computed via tanh to stay finite for large inputs."""
    out = sigmoid_array(x.data)
    res = Tensor(out)
    if tape is not None:
        def backward(gout: np.ndarray):
            return (gout * out * (np.float32(1.0) - out),)

        tape.record((x,), res, backward)
    return res


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * np.tanh(x * half) + half


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _want5(a, "concat_channels")
    _want5(b, "concat_channels")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(
            f"cannot concatenate shapes {a.shape} and {b.shape} along channels"
        )
    ca = a.data.shape[1]
    res = Tensor(np.concatenate((a.data, b.data), axis=1))
    if tape is not None:
        def backward(gout: np.ndarray):
            return gout[:, :ca], gout[:, ca:]

        tape.record((a, b), res, backward)
    return res


def take_channel(x: Tensor, index: int, tape: Tape | None = None) -> Tensor:
    """Select one channel, returning a [b, z, y, x] tensor."""
    _want5(x, "take_channel")
    if not 0 <= index < x.data.shape[1]:
        raise ShapeError(f"channel {index} out of range for {x.data.shape[1]} channels")
    res = Tensor(x.data[:, index].copy())
    if tape is not None:
        def backward(gout: np.ndarray):
            dx = np.zeros_like(x.data)
            dx[:, index] = gout
            return (dx,)

        tape.record((x,), res, backward)
    return res


def set_channel(x: Tensor, index: int, values: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Replace one channel with fixed values (no gradient flows into them)."""
    _want5(x, "set_channel")
    if not 0 <= index < x.data.shape[1]:
        raise ShapeError(f"channel {index} out of range for {x.data.shape[1]} channels")
    expect = (x.data.shape[0],) + x.data.shape[2:]
    if values.shape != expect:
        raise ShapeError(f"values must have shape {expect}, got {values.shape}")
    out = x.data.copy()
    out[:, index] = values
    res = Tensor(out)
    if tape is not None:
        def backward(gout: np.ndarray):
            dx = gout.copy()
            dx[:, index] = np.float32(0.0)
            return (dx,)

        tape.record((x,), res, backward)
    return res


def residual_update(
    state: Tensor, update: Tensor, mask: np.ndarray, tape: Tape | None = None
) -> Tensor:
    """state + update * mask, where mask is a constant 0/1 firing pattern.

    mask has shape [b, z, y, x] and broadcasts across channels.
    """
    _want5(state, "residual_update")
    if state.data.shape != update.data.shape:
        raise ShapeError(f"state {state.shape} and update {update.shape} differ")
    expect = (state.data.shape[0],) + state.data.shape[2:]
    if mask.shape != expect:
        raise ShapeError(f"mask must have shape {expect}, got {mask.shape}")
    m = mask[:, None]
    res = Tensor(state.data + update.data * m)
    if tape is not None:
        def backward(gout: np.ndarray):
            return gout, gout * m

        tape.record((state, update), res, backward)
    return res


def crop(
    x: Tensor,
    origins: np.ndarray,
    size: tuple[int, int, int],
    tape: Tape | None = None,
) -> Tensor:
    """Extract a per-element spatial window; origins is int[b, 3]."""
    _want5(x, "crop")
    bsz = x.data.shape[0]
    sp = x.data.shape[2:]
    origins = np.asarray(origins, dtype=np.int64)
    if origins.shape != (bsz, 3):
        raise ShapeError(f"origins must be [{bsz}, 3], got {origins.shape}")
    for e in range(bsz):
        for ax in range(3):
            if not 0 <= origins[e, ax] <= sp[ax] - size[ax]:
                raise ShapeError(
                    f"crop window {size} at origin {tuple(origins[e])} leaves "
                    f"grid of extent {sp}"
                )
    out = np.empty((bsz, x.data.shape[1]) + tuple(size), dtype=x.data.dtype)
    for e in range(bsz):
        oz, oy, ox = origins[e]
        out[e] = x.data[e, :, oz : oz + size[0], oy : oy + size[1], ox : ox + size[2]]
    res = Tensor(out)
    if tape is not None:
        def backward(gout: np.ndarray):
            dx = np.zeros_like(x.data)
            for e in range(bsz):
                oz, oy, ox = origins[e]
                dx[e, :, oz : oz + size[0], oy : oy + size[1], ox : ox + size[2]] = gout[e]
            return (dx,)

        tape.record((x,), res, backward)
    return res


def _scatter_rows(g2: np.ndarray, lin: np.ndarray, nsrc: int) -> np.ndarray:
    """Sum rows of g2 into bins given by lin; returns float64 [rows, nsrc]."""
    rows = g2.shape[0]
    out = np.empty((rows, nsrc), dtype=np.float64)
    for r in range(rows):
        out[r] = np.bincount(lin, weights=g2[r], minlength=nsrc)
    return out


def upscale_crop_nearest(
    x: Tensor,
    factor: int,
    origins: np.ndarray,
    size: tuple[int, int, int],
    tape: Tape | None = None,
) -> Tensor:
    """Nearest upscale by an integer factor fused with a per-element crop.

    Equivalent to upscaling the whole grid by `factor` (index replication)
    and cropping a window of `size` at each element's origin, without ever
    materializing the upscaled grid. origins are in upscaled coordinates.
    """
    _want5(x, "upscale_crop_nearest")
    if factor < 1:
        raise ConfigError(f"upscale factor must be >= 1, got {factor}")
    bsz, c = x.data.shape[:2]
    sp = x.data.shape[2:]
    origins = np.asarray(origins, dtype=np.int64)
    if origins.shape != (bsz, 3):
        raise ShapeError(f"origins must be [{bsz}, 3], got {origins.shape}")
    big = tuple(s * factor for s in sp)
    for e in range(bsz):
        for ax in range(3):
            if not 0 <= origins[e, ax] <= big[ax] - size[ax]:
                raise ShapeError(
                    f"window {size} at origin {tuple(origins[e])} leaves upscaled "
                    f"extent {big}"
                )
    out = np.empty((bsz, c) + tuple(size), dtype=x.data.dtype)
    lins = np.empty((bsz, int(np.prod(size))), dtype=np.int64)
    for e in range(bsz):
        idx = [
            (origins[e, ax] + np.arange(size[ax], dtype=np.int64)) // factor
            for ax in range(3)
        ]
        out[e] = x.data[e][:, idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]]
        lin = (idx[0][:, None, None] * sp[1] + idx[1][None, :, None]) * sp[2] + idx[2][
            None, None, :
        ]
        lins[e] = lin.reshape(-1)
    res = Tensor(out)
    if tape is not None:
        nsrc = int(np.prod(sp))

        def backward(gout: np.ndarray):
            dx = np.empty_like(x.data)
            n = gout[0, 0].size
            for e in range(bsz):
                g2 = gout[e].reshape(c, n).astype(np.float64, copy=False)
                dx[e] = _scatter_rows(g2, lins[e], nsrc).reshape((c,) + sp)
            return (dx,)

        tape.record((x,), res, backward)
    return res


# ---------------------------------------------------------------------------
# resampling


def _norm_factors(factors) -> tuple[float, float, float]:
    if np.isscalar(factors):
        factors = (factors, factors, factors)
    factors = tuple(float(f) for f in factors)
    if len(factors) != 3 or any(f <= 0 for f in factors):
        raise ConfigError(f"factors must be three positive numbers, got {factors}")
    return factors


def _out_extent(n: int, f: float) -> int:
    return max(1, int(round(n * f)))


def resample_array(vol: np.ndarray, factors, mode: str) -> np.ndarray:
    """Resample the last three axes of a 3-d, 4-d or 5-d array; forward-only."""
    if vol.ndim == 3:
        out = resample(Tensor(vol[None, None]), factors, mode)
        return out.data[0, 0]
    if vol.ndim == 4:
        out = resample(Tensor(vol[:, None]), factors, mode)
        return out.data[:, 0]
    if vol.ndim == 5:
        return resample(Tensor(vol), factors, mode).data
    raise ShapeError(f"resample_array expects 3, 4 or 5 dims, got {vol.ndim}")


def resample(x: Tensor, factors, mode: str, tape: Tape | None = None) -> Tensor:
    """Rescale the spatial axes by per-axis factors.

    Modes: "nearest" (index replication / decimation), "trilinear"
    (half-voxel-center alignment, edge clamped), "meanpool" (block averaging;
    factors must be reciprocals of integers that divide the extents).
    """
    _want5(x, "resample")
    fz, fy, fx = _norm_factors(factors)
    if mode == "nearest":
        return _resample_nearest(x, (fz, fy, fx), tape)
    if mode == "trilinear":
        return _resample_trilinear(x, (fz, fy, fx), tape)
    if mode == "meanpool":
        return _resample_meanpool(x, (fz, fy, fx), tape)
    raise ConfigError(f"unknown resample mode {mode!r}")


def _resample_nearest(x: Tensor, factors, tape: Tape | None) -> Tensor:
    bsz, c = x.data.shape[:2]
    sp = x.data.shape[2:]
    out_sp = tuple(_out_extent(n, f) for n, f in zip(sp, factors))
    idx = []
    for ax in range(3):
        src = np.floor(np.arange(out_sp[ax], dtype=np.float64) / factors[ax]).astype(
            np.int64
        )
        idx.append(np.clip(src, 0, sp[ax] - 1))
    out = x.data[:, :, idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]]
    res = Tensor(out)
    if tape is not None:
        lin = (
            (idx[0][:, None, None] * sp[1] + idx[1][None, :, None]) * sp[2]
            + idx[2][None, None, :]
        ).reshape(-1)
        nsrc = int(np.prod(sp))

        def backward(gout: np.ndarray):
            g2 = gout.reshape(bsz * c, -1).astype(np.float64, copy=False)
            dx = _scatter_rows(g2, lin, nsrc)
            return (dx.reshape(x.data.shape),)

        tape.record((x,), res, backward)
    return res


def _linear_taps(n_out: int, n_in: int, f: float):
    """Source taps and weights for 1-d linear interpolation at scale f."""
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) / f - 0.5
    lo = np.floor(centers).astype(np.int64)
    w_hi = centers - lo
    i0 = np.clip(lo, 0, n_in - 1)
    i1 = np.clip(lo + 1, 0, n_in - 1)
    return i0, i1, w_hi


def _resample_trilinear(x: Tensor, factors, tape: Tape | None) -> Tensor:
    bsz, c = x.data.shape[:2]
    sp = x.data.shape[2:]
    out_sp = tuple(_out_extent(n, f) for n, f in zip(sp, factors))
    taps = [_linear_taps(out_sp[ax], sp[ax], factors[ax]) for ax in range(3)]
    data = x.data
    out = np.zeros((bsz, c) + out_sp, dtype=x.data.dtype)
    corner_ix = []
    corner_w = []
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                iz = taps[0][dz]
                iy = taps[1][dy]
                ix = taps[2][dx]
                wz = taps[0][2] if dz else 1.0 - taps[0][2]
                wy = taps[1][2] if dy else 1.0 - taps[1][2]
                wx = taps[2][2] if dx else 1.0 - taps[2][2]
                w = (
                    wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
                ).astype(x.data.dtype)
                out += (
                    data[:, :, iz[:, None, None], iy[None, :, None], ix[None, None, :]]
                    * w
                )
                corner_ix.append((iz, iy, ix))
                corner_w.append(w)
    res = Tensor(out)
    if tape is not None:
        nsrc = int(np.prod(sp))

        def backward(gout: np.ndarray):
            g2 = gout.reshape(bsz * c, -1)
            dx = np.zeros((bsz * c, nsrc), dtype=np.float64)
            for (iz, iy, ix), w in zip(corner_ix, corner_w):
                lin = (
                    (iz[:, None, None] * sp[1] + iy[None, :, None]) * sp[2]
                    + ix[None, None, :]
                ).reshape(-1)
                gw = (g2 * w.reshape(-1)).astype(np.float64, copy=False)
                for r in range(bsz * c):
                    dx[r] += np.bincount(lin, weights=gw[r], minlength=nsrc)
            return (dx.reshape(x.data.shape),)

        tape.record((x,), res, backward)
    return res


def _resample_meanpool(x: Tensor, factors, tape: Tape | None) -> Tensor:
    strides = []
    for f in factors:
        s = round(1.0 / f)
        if s < 1 or abs(1.0 / f - s) > 1e-9:
            raise ConfigError(
                f"meanpool factors must be reciprocals of integers, got {factors}"
            )
        strides.append(int(s))
    sp = x.data.shape[2:]
    for n, s in zip(sp, strides):
        if n % s != 0:
            raise ShapeError(f"extent {n} not divisible by pool stride {s}")
    bsz, c = x.data.shape[:2]
    sz, sy, sx = strides
    oz, oy, ox = sp[0] // sz, sp[1] // sy, sp[2] // sx
    blocks = x.data.reshape(bsz, c, oz, sz, oy, sy, ox, sx)
    out = blocks.mean(axis=(3, 5, 7), dtype=np.float64).astype(x.data.dtype)
    res = Tensor(out)
    if tape is not None:
        inv = x.data.dtype.type(1.0 / (sz * sy * sx))

        def backward(gout: np.ndarray):
            g = gout * inv
            g = np.repeat(np.repeat(np.repeat(g, sz, axis=2), sy, axis=3), sx, axis=4)
            return (g,)

        tape.record((x,), res, backward)
    return res


# ---------------------------------------------------------------------------
# arithmetic and loss


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    res = Tensor(a.data + b.data)
    if tape is not None:
        tape.record((a, b), res, lambda g: (g, g))
    return res


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    res = Tensor(a.data * b.data)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record((a, b), res, lambda g: (g * bd, g * ad))
    return res


def scale(x: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    cf = x.data.dtype.type(c)
    res = Tensor(x.data * cf)
    if tape is not None:
        tape.record((x,), res, lambda g: (g * cf,))
    return res


def ssum(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum all elements to a scalar (float64 accumulation)."""
    res = Tensor(x.data.dtype.type(x.data.sum(dtype=np.float64)))
    if tape is not None:
        shape = x.data.shape
        dt = x.data.dtype

        def backward(gout: np.ndarray):
            return (np.full(shape, gout, dtype=dt),)

        tape.record((x,), res, backward)
    return res


def dice_focal_value(
    prob: np.ndarray,
    target: np.ndarray,
    *,
    gamma: float = 2.0,
    alpha: float = 0.5,
    eps: float = 1e-6,
) -> float:
    """The dice_focal loss as a float64 scalar, without tape bookkeeping.

    Matches dice_focal exactly (same clamping and reductions) but skips the
    float32 rounding of the returned tensor, which matters when the value
    feeds finite differences.
    """
    lo = np.float32(1e-7)
    hi = np.float32(1.0) - np.float32(1e-7)
    p = np.clip(prob, lo, hi).astype(np.float64)
    t = target.astype(np.float64)
    axes = (1, 2, 3)
    inter = (p * t).sum(axis=axes)
    sum_p = p.sum(axis=axes)
    sum_t = t.sum(axis=axes)
    dice_term = 1.0 - (2.0 * inter + eps) / (sum_p + sum_t + eps)
    focal_vox = -alpha * t * (1.0 - p) ** gamma * np.log(p) - (1.0 - alpha) * (
        1.0 - t
    ) * p**gamma * np.log1p(-p)
    focal_term = focal_vox.sum(axis=axes) / p[0].size
    return float((dice_term + focal_term).mean())


def dice_focal(
    prob: Tensor,
    target: np.ndarray,
    *,
    gamma: float = 2.0,
    alpha: float = 0.5,
    eps: float = 1e-6,
    tape: Tape | None = None,
) -> Tensor:
    """Soft-Dice plus focal cross-entropy, averaged over batch elements.

    prob is [b, z, y, x] of probabilities, target a binary array of the same
    shape. Per element: (1 - (2*inter + eps) / (sum_p + sum_t + eps)) plus the
    voxel mean of the focal term with focusing exponent gamma and foreground
    weight alpha. Probabilities are clamped away from {0, 1} before the logs.
    """
    if prob.data.ndim != 4:
        raise ShapeError(f"dice_focal expects [b, z, y, x] probabilities, got {prob.shape}")
    if target.shape != prob.data.shape:
        raise ShapeError(f"target shape {target.shape} != prob shape {prob.data.shape}")
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    t64 = target.astype(np.float64)
    if not np.all((t64 == 0.0) | (t64 == 1.0)):
        raise ContractError("dice_focal target must be binary")
    pmin = float(prob.data.min(initial=0.0))
    pmax = float(prob.data.max(initial=0.0))
    if pmin < -1e-6 or pmax > 1.0 + 1e-6:
        raise ContractError(
            f"dice_focal probabilities must lie in [0, 1], got range [{pmin}, {pmax}]"
        )
    lo = np.float32(1e-7)
    hi = np.float32(1.0) - np.float32(1e-7)
    p = np.clip(prob.data, lo, hi).astype(np.float64)
    t = t64
    bsz = p.shape[0]
    nvox = p[0].size
    axes = (1, 2, 3)
    inter = (p * t).sum(axis=axes)
    sum_p = p.sum(axis=axes)
    sum_t = t.sum(axis=axes)
    denom = sum_p + sum_t + eps
    dice_term = 1.0 - (2.0 * inter + eps) / denom
    log_p = np.log(p)
    log_q = np.log1p(-p)
    one_m_p = 1.0 - p
    focal_vox = -alpha * t * one_m_p**gamma * log_p - (1.0 - alpha) * (
        1.0 - t
    ) * p**gamma * log_q
    focal_term = focal_vox.sum(axis=axes) / nvox
    loss = float((dice_term + focal_term).mean())
    res = Tensor(np.asarray(loss, dtype=prob.data.dtype))
    if tape is not None:
        inside = (prob.data > lo) & (prob.data < hi)

        def backward(gout: np.ndarray):
            g = float(gout)
            ddice = (
                -(2.0 * t * denom[:, None, None, None] - (2.0 * inter + eps)[:, None, None, None])
                / (denom**2)[:, None, None, None]
            )
            dfocal = -alpha * t * (
                one_m_p**gamma / p - gamma * one_m_p ** (gamma - 1.0) * log_p
            ) - (1.0 - alpha) * (1.0 - t) * (
                gamma * p ** (gamma - 1.0) * log_q - p**gamma / one_m_p
            )
            dp = (ddice + dfocal / nvox) * (g / bsz)
            dp = np.where(inside, dp, 0.0)
            return (dp,)

        tape.record((prob,), res, backward)
    return res
