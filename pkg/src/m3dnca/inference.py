"""Forward-only inference: whole volumes, tiles, ensembles, memory plans.

The engine keeps two full-resolution state grids per level (read and write)
and sweeps the volume tile by tile at every step, reading each tile with a
halo of (k - 1) / 2 neighboring voxels. Because the convolution accumulates
taps in a position-independent order and firing decisions hash global
coordinates, the tile decomposition is invisible in the output: any tile
size reproduces the untiled result bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core, kernels, quality
from .autodiff.ops import bn_eval_forward, resample_array, sigmoid_array
from .core import Model, ModelConfig
from .errors import ConfigError, GeometryError, MemoryPlanError, ShapeError

DEFAULT_CHUNK = 4096


class MemoryMeter:
    """Running account of the engine's explicitly allocated buffer bytes."""

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> int:
        self.current += int(nbytes)
        if self.current > self.peak:
            self.peak = self.current
        return int(nbytes)

    def free(self, nbytes: int) -> None:
        self.current -= int(nbytes)


@dataclass(frozen=True)
class TilePlan:
    """Chosen tile geometry and the memory it is expected to need."""

    tile: tuple[int, int, int]
    chunk: int
    resident_bytes: int
    tile_bytes: int
    expected_peak_bytes: int
    budget_bytes: int | None = None


def _grid_bytes(extents: tuple[int, int, int], channels: int) -> int:
    return 4 * channels * int(np.prod(extents))


def plan_resident_bytes(extents: tuple[int, int, int], config: ModelConfig) -> int:
    """Bytes held for the whole run: parameters, pyramid, state double buffer."""
    params = 4 * core.param_count(config)
    pyramid = 0
    for lv in range(1, config.levels + 1):
        pyramid += 4 * int(np.prod(core.level_extents(extents, config, lv)))
    top = core.level_extents(extents, config, config.levels)
    grids = 2 * _grid_bytes(top, config.channels)
    readout = 5 * int(np.prod(extents))  # float32 probability + uint8 mask
    return params + pyramid + grids + readout


def plan_tile_bytes(tile: tuple[int, int, int], config: ModelConfig, chunk: int) -> int:
    """Per-tile working set: halo pad, perception, gathers, chunk buffers."""
    c, h = config.channels, config.hidden
    r = max((k - 1) // 2 for k in config.kernel_sizes)
    n = int(np.prod(tile))
    padded = int(np.prod([t + 2 * r for t in tile]))
    pad = 4 * c * padded
    percep = 4 * c * n
    gathers = 2 * 4 * c * n          # tile state in, tile state out
    mask_img = 2 * 4 * n
    q = min(chunk, n)
    chunk_bufs = 4 * q * (2 * c + h + c)
    return pad + percep + gathers + mask_img + chunk_bufs


def memory_plan(
    extents: tuple[int, int, int],
    config: ModelConfig,
    budget_bytes: int,
    chunk: int = DEFAULT_CHUNK,
) -> TilePlan:
    """Pick the largest tile whose expected peak fits the budget.

    The expected peak counts the engine's explicit allocations: resident
    state (parameters, image pyramid, full-grid double buffer, readout) plus
    one tile working set. Candidates are the full grid and cubes in steps of
    8 down to 8; if none fits, the volume cannot be processed in budget.
    """
    if budget_bytes < 1:
        raise ConfigError(f"budget must be positive, got {budget_bytes}")
    resident = plan_resident_bytes(extents, config)
    top = core.level_extents(extents, config, config.levels)
    candidates: list[tuple[int, int, int]] = [tuple(top)]
    for t in range(8 * (max(top) // 8), 7, -8):
        cand = tuple(min(t, e) for e in top)
        if cand not in candidates:
            candidates.append(cand)
    for tile in candidates:
        tile_b = plan_tile_bytes(tile, config, chunk)
        peak = resident + tile_b
        if peak <= budget_bytes:
            return TilePlan(
                tile=tile,
                chunk=chunk,
                resident_bytes=resident,
                tile_bytes=tile_b,
                expected_peak_bytes=peak,
                budget_bytes=budget_bytes,
            )
    raise MemoryPlanError(
        f"no tile size fits extents {extents} in {budget_bytes} bytes; "
        f"resident state alone needs {resident}"
    )


def image_pyramid(image: np.ndarray, config: ModelConfig) -> list[np.ndarray]:
    """Downscaled copies of the image, one per level, coarsest first.

    Downscaling is block averaging, so each level sees an anti-aliased
    image rather than a decimated one.
    """
    if image.ndim != 3:
        raise ShapeError(f"image must be [z, y, x], got shape {image.shape}")
    img = np.ascontiguousarray(image, dtype=np.float32)
    out = []
    for lv in range(1, config.levels + 1):
        ext = core.level_extents(image.shape, config, lv)
        if ext == image.shape:
            out.append(img)
        else:
            f = ext[0] / image.shape[0]
            out.append(resample_array(img, (f, f, f), "meanpool"))
        if out[-1].shape != tuple(ext):
            raise ShapeError(
                f"pyramid level {lv} produced {out[-1].shape}, expected {ext}"
            )
    return out


def _upscale_state(grid: np.ndarray, factor: int, mode: str) -> np.ndarray:
    if mode == "nearest":
        out = grid
        for ax in (1, 2, 3):
            out = np.repeat(out, factor, axis=ax)
        return np.ascontiguousarray(out)
    return resample_array(grid, (float(factor),) * 3, "trilinear")


def _evolve_level(
    cur: np.ndarray,
    image: np.ndarray,
    params: core.LevelParams,
    config: ModelConfig,
    *,
    level: int,
    steps: int,
    seed: int,
    tile: tuple[int, int, int],
    chunk: int,
    meter: MemoryMeter,
) -> np.ndarray:
    """Run `steps` automaton updates over a full level grid, tile by tile."""
    c = config.channels
    ext = cur.shape[1:]
    k = config.kernel_sizes[level - 1]
    r = (k - 1) // 2
    thr = kernels.fire_threshold(config.fire_rate)
    keys = np.empty(1, dtype=np.uint64)
    origin = np.empty((1, 3), dtype=np.int64)
    nxt = np.empty_like(cur)
    meter.alloc(cur.nbytes)
    gamma, beta = params.gamma.data, params.beta.data
    w1, b1 = params.w1.data, params.b1.data
    w2, b2 = params.w2.data, params.b2.data
    starts = [range(0, ext[ax], tile[ax]) for ax in range(3)]
    for step in range(steps):
        keys[0] = kernels.fold_seed(seed, level, step)
        for tz in starts[0]:
            for ty in starts[1]:
                for tx in starts[2]:
                    t0 = (tz, ty, tx)
                    size = tuple(
                        min(tile[ax], ext[ax] - t0[ax]) for ax in range(3)
                    )
                    n = int(np.prod(size))
                    held = meter.alloc(plan_tile_bytes(size, config, chunk))
                    pad = np.zeros(
                        (1, c) + tuple(s + 2 * r for s in size), dtype=np.float32
                    )
                    src_lo = [max(0, t0[ax] - r) for ax in range(3)]
                    src_hi = [min(ext[ax], t0[ax] + size[ax] + r) for ax in range(3)]
                    dst_lo = [src_lo[ax] - (t0[ax] - r) for ax in range(3)]
                    pad[
                        0,
                        :,
                        dst_lo[0] : dst_lo[0] + src_hi[0] - src_lo[0],
                        dst_lo[1] : dst_lo[1] + src_hi[1] - src_lo[1],
                        dst_lo[2] : dst_lo[2] + src_hi[2] - src_lo[2],
                    ] = cur[
                        :,
                        src_lo[0] : src_hi[0],
                        src_lo[1] : src_hi[1],
                        src_lo[2] : src_hi[2],
                    ]
                    percep = np.empty((1, c) + size, dtype=np.float32)
                    kernels.conv3d_channels(pad, params.perception.data, percep)
                    mask = np.empty((1,) + size, dtype=np.float32)
                    if config.fire_rate >= 1.0:
                        mask.fill(1.0)
                    else:
                        origin[0] = t0
                        kernels.fill_fire_mask(keys, origin, thr, mask)
                    sl = (
                        slice(None),
                        slice(t0[0], t0[0] + size[0]),
                        slice(t0[1], t0[1] + size[1]),
                        slice(t0[2], t0[2] + size[2]),
                    )
                    pv = cur[sl].reshape(c, n)
                    pc = percep.reshape(c, n)
                    img = image[sl[1:]].reshape(n)
                    mk = mask.reshape(n)
                    out_t = np.empty((c, n), dtype=np.float32)
                    for a in range(0, n, chunk):
                        b = min(a + chunk, n)
                        feat = np.concatenate((pc[:, a:b], pv[:, a:b]))
                        h1 = np.matmul(w1, feat)
                        h1 += b1[:, None]
                        h1 = bn_eval_forward(
                            h1[None],
                            params.running_mean,
                            params.running_var,
                            gamma,
                            beta,
                            1e-5,
                        )[0]
                        np.maximum(h1, np.float32(0.0), out=h1)
                        u = np.matmul(w2, h1)
                        u += b2[:, None]
                        u *= mk[None, a:b]
                        np.add(pv[:, a:b], u, out=out_t[:, a:b])
                        out_t[0, a:b] = img[a:b]
                    nxt[sl] = out_t.reshape((c,) + size)
                    meter.free(held)
        cur, nxt = nxt, cur
    meter.free(nxt.nbytes)
    return cur


@dataclass
class SegmentResult:
    """Single-pass segmentation output."""

    prob: np.ndarray
    mask: np.ndarray
    steps: tuple[int, ...]
    peak_bytes: int
    plan: TilePlan | None = None


def segment(
    model: Model,
    image: np.ndarray,
    seed: int = 0,
    *,
    tile: tuple[int, int, int] | int | None = None,
    budget_bytes: int | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> SegmentResult:
    """Segment one volume with a single automaton pass.

    tile fixes the tile edge(s); budget_bytes instead derives a tile from a
    memory plan. With neither, the volume is processed as one tile.
    """
    config = model.config
    if image.ndim != 3:
        raise ShapeError(f"image must be [z, y, x], got shape {image.shape}")
    if chunk < 1:
        raise ConfigError(f"chunk must be positive, got {chunk}")
    extents = image.shape
    down = config.levels - 1 + (1 if config.legacy_extra_downscale and config.levels > 1 else 0)
    min_ext = config.scale_factor**down
    if any(e < min_ext for e in extents):
        raise GeometryError(
            f"volume {tuple(extents)} smaller than the coarsest level "
            f"factor {min_ext}"
        )
    plan = None
    if tile is not None and budget_bytes is not None:
        raise ConfigError("pass either tile or budget_bytes, not both")
    if budget_bytes is not None:
        plan = memory_plan(extents, config, budget_bytes, chunk)
        tile = plan.tile
    steps = core.step_schedule(extents, config, frozen=model.trained_steps())
    pyramid = image_pyramid(image, config)
    meter = MemoryMeter()
    meter.alloc(4 * core.param_count(config))
    for img in pyramid:
        meter.alloc(img.nbytes)
    cur = np.zeros((config.channels,) + pyramid[0].shape, dtype=np.float32)
    meter.alloc(cur.nbytes)
    cur[core.IMAGE_CHANNEL] = pyramid[0]
    for lv in range(1, config.levels + 1):
        ext = cur.shape[1:]
        if tile is None:
            tl = ext
        elif isinstance(tile, int):
            tl = tuple(min(tile, e) for e in ext)
        else:
            tl = tuple(min(t, e) for t, e in zip(tile, ext))
        cur = _evolve_level(
            cur,
            pyramid[lv - 1],
            model.levels[lv - 1],
            config,
            level=lv,
            steps=steps[lv - 1],
            seed=seed,
            tile=tl,
            chunk=chunk,
            meter=meter,
        )
        if lv < config.levels:
            next_ext = core.level_extents(extents, config, lv + 1)
            jump = next_ext[0] // ext[0]
            if any(n != e * jump for n, e in zip(next_ext, ext)):
                raise ShapeError(
                    f"level extents {ext} and {next_ext} are not an integer "
                    "scale apart"
                )
            up = _upscale_state(cur, jump, config.state_upscale)
            meter.alloc(up.nbytes)
            meter.free(cur.nbytes)
            up[core.IMAGE_CHANNEL] = pyramid[lv]
            cur = up
    prob = sigmoid_array(cur[core.LOGIT_CHANNEL])
    meter.alloc(prob.nbytes)
    mask = core.probability_to_mask(prob)
    meter.alloc(mask.nbytes)
    return SegmentResult(
        prob=prob, mask=mask, steps=steps, peak_bytes=meter.peak, plan=plan
    )


def member_seed(seed: int, index: int) -> int:
    """Seed for ensemble member `index` derived from the ensemble seed."""
    return kernels.fold_seed(seed, 0xE7, index)


@dataclass
class EnsembleResult:
    """Aggregate of several stochastic passes over one volume."""

    mean_prob: np.ndarray
    sd: np.ndarray
    mask: np.ndarray
    nqm: float
    members: int
    seeds: tuple[int, ...]
    member_probs: list[np.ndarray] = field(default_factory=list)
    steps: tuple[int, ...] = ()


def ensemble(
    model: Model,
    image: np.ndarray,
    seed: int = 0,
    members: int = 10,
    *,
    tile: tuple[int, int, int] | int | None = None,
    chunk: int = DEFAULT_CHUNK,
    keep_members: bool = False,
) -> EnsembleResult:
    """Run `members` passes that differ only in firing seeds and pool them.

    The mean probability map is the ensemble segmentation; the per-voxel
    standard deviation (population form) feeds the quality score.
    """
    if members < 1:
        raise ConfigError(f"members must be >= 1, got {members}")
    seeds = tuple(member_seed(seed, i) for i in range(members))
    acc = None
    acc2 = None
    kept: list[np.ndarray] = []
    steps: tuple[int, ...] = ()
    for s in seeds:
        res = segment(model, image, s, tile=tile, chunk=chunk)
        steps = res.steps
        p = res.prob.astype(np.float64)
        if acc is None:
            acc = p
            acc2 = p * p
        else:
            acc += p
            acc2 += p * p
        if keep_members:
            kept.append(res.prob)
    mean = acc / members
    var = acc2 / members - mean * mean
    np.maximum(var, 0.0, out=var)
    sd = np.sqrt(var)
    score = quality.nqm_score(mean, sd)
    return EnsembleResult(
        mean_prob=mean.astype(np.float32),
        sd=sd.astype(np.float32),
        mask=core.probability_to_mask(mean),
        nqm=score,
        members=members,
        seeds=seeds,
        member_probs=kept,
        steps=steps,
    )
