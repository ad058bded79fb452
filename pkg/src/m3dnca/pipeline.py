"""Patch-based multi-level training.

Training never runs the automaton over a full-resolution grid. The lowest
level evolves the whole (heavily downscaled) volume; each transition to the
next level upscales the state, crops a random window the size of the lowest
level grid, and swaps the true higher-resolution image into channel 0. The
loss is computed on the final level's patch. Memory therefore scales with
the lowest-level extents and the step counts, not with the volume.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import core, inference, synth
from .autodiff import Adam, Tape
from .autodiff import ops
from .core import Model, ModelConfig, StateGrid
from .errors import ConfigError, GeometryError, ShapeError, TrainingDivergedError
from .kernels import fold_seed

_SEED_FIRE = 0xF14E
_SEED_PATCH = 0xBA7C
_SEED_ORDER = 0x0D7E
_SEED_EVAL = 0xE0A1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    batch_size counts elements per optimizer step after duplication;
    dup_factor repeats each distinct sample that many times within the
    batch, giving it several independent stochastic rollouts per update.
    """

    epochs: int = 40
    batch_size: int = 8
    dup_factor: int = 2
    lr: float = 1.6e-3
    lr_decay: float = 0.9999
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    dice_eps: float = 1e-6
    seed: int = 0
    steps_override: tuple[int, ...] | None = None
    eval_every: int = 0
    eval_cases: int = 4

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.dup_factor < 1:
            raise ConfigError(f"dup_factor must be >= 1, got {self.dup_factor}")
        if self.batch_size < 1 or self.batch_size % self.dup_factor != 0:
            raise ConfigError(
                f"batch_size ({self.batch_size}) must be a positive multiple "
                f"of dup_factor ({self.dup_factor})"
            )
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")


@dataclass
class LevelData:
    """Dataset downscaled to one pyramid level."""

    images: np.ndarray  # float32 [n, z, y, x]
    labels: np.ndarray  # uint8   [n, z, y, x]


def build_pyramid(
    images: np.ndarray, labels: np.ndarray, config: ModelConfig
) -> list[LevelData]:
    """Dataset copies per level, coarsest first; images averaged, labels voted.

    Images are downscaled by block averaging; labels by nearest sampling so
    they stay strictly binary.
    """
    if images.ndim != 4 or labels.shape != images.shape:
        raise ShapeError(
            f"expected matching [n, z, y, x] stacks, got {images.shape} "
            f"and {labels.shape}"
        )
    extents = images.shape[1:]
    out = []
    for lv in range(1, config.levels + 1):
        ext = core.level_extents(extents, config, lv)
        if ext == extents:
            out.append(
                LevelData(
                    images=np.ascontiguousarray(images, dtype=np.float32),
                    labels=np.ascontiguousarray(labels, dtype=np.uint8),
                )
            )
            continue
        f = ext[0] / extents[0]
        imgs = ops.resample_array(
            images.astype(np.float32, copy=False), (f, f, f), "meanpool"
        )
        lbls = ops.resample_array(
            labels.astype(np.float32), (f, f, f), "nearest"
        ).astype(np.uint8)
        out.append(LevelData(images=imgs, labels=lbls))
    return out


def training_step_counts(
    config: ModelConfig,
    volume_extents: tuple[int, int, int],
    override: tuple[int, ...] | None = None,
) -> tuple[int, ...]:
    """Per-level steps used while training.

    Step counts always come from the grid a level actually iterates. During
    training that grid is base-sized everywhere: level 1 runs on the full
    lowest-resolution image, and every later level runs on a patch cropped
    back down to those same extents. Full-resolution counts belong to
    full-frame inference, where the grids really are that large.
    """
    if override is not None:
        if len(override) != config.levels:
            raise ConfigError(
                f"steps override must list {config.levels} counts, got {override}"
            )
        return tuple(override)
    base = core.level_extents(volume_extents, config, 1)
    return tuple(
        core.step_count(base, config.kernel_sizes[lv - 1])
        for lv in range(1, config.levels + 1)
    )


def _level_jump(
    config: ModelConfig, volume_extents: tuple[int, int, int], level: int
) -> int:
    """Integer upscale factor between a level grid and the next one up."""
    a = core.level_extents(volume_extents, config, level)
    b = core.level_extents(volume_extents, config, level + 1)
    jump = b[0] // a[0]
    if any(bb != aa * jump for aa, bb in zip(a, b)):
        raise ShapeError(f"level extents {a} and {b} are not an integer scale apart")
    return jump


def sample_patch(
    state: StateGrid,
    level_labels: np.ndarray,
    base: tuple[int, int, int],
    rng: np.random.Generator,
    *,
    upscale: int = 1,
    mode: str = "nearest",
    tape: Tape | None = None,
) -> tuple[StateGrid, np.ndarray, np.ndarray]:
    """Crop one aligned random patch of size `base` per batch element.

    Origins are uniform over the valid positions of the state grid, after
    optionally upscaling it by an integer factor first (the level
    transition; upscale and crop are fused so the full upscaled grid is
    never materialized). The returned state's origins are cumulative
    full-level coordinates, and the label patch is cut congruently from the
    full-level labels. When the patch begins a new level, the caller still
    owns swapping that level's image into channel 0.
    """
    b = state.grid.data.shape[0]
    cur = state.grid.data.shape[2:]
    virtual = tuple(int(e) * upscale for e in cur)
    if any(base[ax] > virtual[ax] for ax in range(3)):
        raise GeometryError(f"patch {tuple(base)} does not fit extents {virtual}")
    local = np.stack(
        [rng.integers(0, virtual[ax] - base[ax] + 1, size=b) for ax in range(3)],
        axis=1,
    ).astype(np.int64)
    origins = state.origins * upscale + local
    if upscale == 1:
        grid = ops.crop(state.grid, local, base, tape)
    elif mode == "nearest":
        grid = ops.upscale_crop_nearest(state.grid, upscale, local, base, tape)
    else:
        up = ops.resample(state.grid, (float(upscale),) * 3, "trilinear", tape)
        grid = ops.crop(up, local, base, tape)
    lbl = np.empty((b,) + tuple(base), dtype=np.uint8)
    for e in range(b):
        oz, oy, ox = origins[e]
        lbl[e] = level_labels[e][
            oz : oz + base[0], oy : oy + base[1], ox : ox + base[2]
        ]
    images = np.ascontiguousarray(grid.data[:, core.IMAGE_CHANNEL])
    return StateGrid(grid, images, origins), lbl, origins


def forward_loss(
    model: Model,
    pyramid: list[LevelData],
    indices: np.ndarray,
    element_seeds: np.ndarray,
    tconf: TrainConfig,
    patch_rng: np.random.Generator,
    tape: Tape | None,
):
    """Run the multi-level patch forward for a batch and return the loss.

    indices picks dataset elements (duplicates allowed); element_seeds gives
    each batch element its own firing stream. Returns (loss tensor, final
    probability tensor, final label patches).
    """
    config = model.config
    volume_extents = pyramid[-1].images.shape[1:]
    steps = training_step_counts(config, volume_extents, tconf.steps_override)
    base = core.level_extents(volume_extents, config, 1)
    b = len(indices)
    state = core.seed_state(pyramid[0].images[indices], config)
    labels = pyramid[0].labels[indices]
    for lv in range(1, config.levels + 1):
        params = model.levels[lv - 1]
        state = core.nca_run(
            state,
            params,
            config,
            level=lv,
            steps=steps[lv - 1],
            seeds=element_seeds,
            bn_training=True,
            tape=tape,
        )
        if lv == config.levels:
            break
        jump = _level_jump(config, volume_extents, lv)
        next_images = pyramid[lv].images[indices]
        next_labels = pyramid[lv].labels[indices]
        state, labels, origins = sample_patch(
            state,
            next_labels,
            base,
            patch_rng,
            upscale=jump,
            mode=config.state_upscale,
            tape=tape,
        )
        img_patch = np.empty((b,) + base, dtype=next_images.dtype)
        for e in range(b):
            oz, oy, ox = origins[e]
            img_patch[e] = next_images[e][
                oz : oz + base[0], oy : oy + base[1], ox : ox + base[2]
            ]
        grid = ops.set_channel(state.grid, core.IMAGE_CHANNEL, img_patch, tape)
        state = StateGrid(grid, img_patch, origins)
    prob = core.logit_probability(state, tape)
    loss = ops.dice_focal(
        prob,
        labels.astype(np.float32),
        gamma=tconf.focal_gamma,
        alpha=tconf.focal_alpha,
        eps=tconf.dice_eps,
        tape=tape,
    )
    return loss, prob, labels


@dataclass
class TrainResult:
    model: Model
    loss_history: list[float] = field(default_factory=list)
    eval_history: list[tuple[int, float]] = field(default_factory=list)
    steps_run: int = 0
    seconds: float = 0.0


def train(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    tconf: TrainConfig,
    *,
    val_images: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
    log: bool = False,
) -> TrainResult:
    """Optimize a model on an image/label stack.

    The per-epoch sample order, patch origins and firing seeds all derive
    from tconf.seed, so a rerun with identical inputs reproduces the same
    parameters bit for bit. The model's metadata records the step schedule
    of the training volumes for the frozen step policy.
    """
    t0 = time.perf_counter()
    if images.ndim != 4 or labels.shape != images.shape:
        raise ShapeError(
            f"expected matching [n, z, y, x] stacks, got {images.shape} "
            f"and {labels.shape}"
        )
    if images.shape[0] == 0:
        raise ConfigError("training dataset is empty")
    config = model.config
    n = images.shape[0]
    volume_extents = images.shape[1:]
    pyramid = build_pyramid(images, labels, config)
    unique_per_step = tconf.batch_size // tconf.dup_factor
    adam = Adam(
        model.parameters(),
        lr=tconf.lr,
        beta1=tconf.beta1,
        beta2=tconf.beta2,
        eps=tconf.adam_eps,
    )
    model.meta["train_step_counts"] = list(
        training_step_counts(config, volume_extents, tconf.steps_override)
    )
    model.meta["train_volume_extents"] = list(volume_extents)
    model.meta["train_seed"] = tconf.seed
    result = TrainResult(model=model)
    best_dice = -1.0
    best_epoch = -1
    best_params: list[np.ndarray] | None = None
    best_stats: list[tuple[np.ndarray, np.ndarray]] | None = None
    global_step = 0
    for epoch in range(tconf.epochs):
        order_rng = np.random.default_rng(fold_seed(tconf.seed, _SEED_ORDER, epoch))
        order = order_rng.permutation(n)
        for lo in range(0, n, unique_per_step):
            uniq = order[lo : lo + unique_per_step]
            indices = np.repeat(uniq, tconf.dup_factor)
            seeds = np.array(
                [
                    fold_seed(tconf.seed, _SEED_FIRE, global_step, slot)
                    for slot in range(len(indices))
                ],
                dtype=np.uint64,
            )
            patch_rng = np.random.default_rng(
                fold_seed(tconf.seed, _SEED_PATCH, global_step)
            )
            tape = Tape()
            loss, _, _ = forward_loss(
                model, pyramid, indices, seeds, tconf, patch_rng, tape
            )
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingDivergedError(
                    f"loss became {lval} at optimizer step {global_step}"
                )
            grads = tape.backward(loss)
            adam.lr = tconf.lr * tconf.lr_decay**global_step
            adam.step(grads)
            result.loss_history.append(lval)
            global_step += 1
        if (
            tconf.eval_every
            and val_images is not None
            and ((epoch + 1) % tconf.eval_every == 0 or epoch + 1 == tconf.epochs)
        ):
            k = min(tconf.eval_cases, val_images.shape[0])
            dice = evaluate(
                model,
                val_images[:k],
                val_labels[:k],
                seed=fold_seed(tconf.seed, _SEED_EVAL, epoch),
            )
            result.eval_history.append((epoch + 1, dice))
            if dice > best_dice:
                best_dice = dice
                best_epoch = epoch + 1
                best_params = [t.data.copy() for t in model.parameters()]
                best_stats = [
                    (lp.running_mean.copy(), lp.running_var.copy())
                    for lp in model.levels
                ]
            if log:
                print(
                    f"epoch {epoch + 1}/{tconf.epochs} "
                    f"loss {lval:.4f} val-dice {dice:.4f}"
                )
        elif log:
            print(f"epoch {epoch + 1}/{tconf.epochs} loss {lval:.4f}")
    if best_params is not None:
        # The checkpoint that ships is the best one seen by the periodic
        # eval, not whatever the last optimizer step produced.
        for t, d in zip(model.parameters(), best_params):
            t.data[...] = d
        for lp, (rm, rv) in zip(model.levels, best_stats):
            lp.running_mean[...] = rm
            lp.running_var[...] = rv
        model.meta["best_eval"] = {"epoch": best_epoch, "dice": best_dice}
    result.steps_run = global_step
    result.seconds = time.perf_counter() - t0
    return result


def evaluate(
    model: Model, images: np.ndarray, labels: np.ndarray, seed: int = 0
) -> float:
    """Mean single-pass Dice over a labeled stack."""
    if images.ndim != 4 or labels.shape != images.shape:
        raise ShapeError("expected matching [n, z, y, x] stacks")
    scores = []
    for i in range(images.shape[0]):
        res = inference.segment(model, images[i], seed=fold_seed(seed, i))
        scores.append(synth.dice_score(res.mask, labels[i]))
    return float(np.mean(scores))
