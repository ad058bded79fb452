"""Model definition: configuration, parameters, and the automaton update rule.

A model is a stack of levels. Each level applies the same local update some
number of times: perceive the neighborhood with a per-channel convolution,
concatenate the perception with the current state, mix channels through a
small two-layer network with batch normalization, then add the proposed
update back into the state at a random subset of voxels. Channel 0 always
carries the (immutable) input image, channel 1 carries the segmentation
logit, and the remaining channels are free hidden state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .autodiff import Tape, Tensor
from .autodiff import ops
from .errors import ConfigError, ShapeError

IMAGE_CHANNEL = 0
LOGIT_CHANNEL = 1

STEP_POLICY_RUNTIME = "runtime-extent"
STEP_POLICY_FROZEN = "frozen-training-extent"


@dataclass(frozen=True)
class ModelConfig:
    """Static architecture description.

    levels: number of resolution levels (>= 1).
    scale_factor: integer spatial factor between successive levels.
    kernel_sizes: odd perception kernel size per level.
    channels: state channels per voxel (image + logit + hidden).
    hidden: width of the update network's hidden layer.
    fire_rate: probability a voxel accepts its update at each step.
    step_policy: "runtime-extent" derives per-level step counts from the
        grid the model is running on; "frozen-training-extent" replays the
        counts recorded at training time.
    legacy_extra_downscale: reproduce an older pyramid layout that applied
        one extra downscale to every level below full resolution.
    state_upscale: interpolation used when a state grid is promoted to the
        next level, "nearest" or "trilinear".
    """

    levels: int = 2
    scale_factor: int = 4
    kernel_sizes: tuple[int, ...] = (7, 3)
    channels: int = 16
    hidden: int = 64
    fire_rate: float = 0.5
    step_policy: str = STEP_POLICY_RUNTIME
    legacy_extra_downscale: bool = False
    state_upscale: str = "nearest"

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.scale_factor < 2:
            raise ConfigError(f"scale_factor must be >= 2, got {self.scale_factor}")
        if len(self.kernel_sizes) != self.levels:
            raise ConfigError(
                f"need one kernel size per level, got {len(self.kernel_sizes)} "
                f"for {self.levels} levels"
            )
        for k in self.kernel_sizes:
            if k < 3 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and >= 3, got {k}")
        if self.channels < 2:
            raise ConfigError(f"need at least image and logit channels, got {self.channels}")
        if self.hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {self.hidden}")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ConfigError(f"fire_rate must be in (0, 1], got {self.fire_rate}")
        if self.step_policy not in (STEP_POLICY_RUNTIME, STEP_POLICY_FROZEN):
            raise ConfigError(f"unknown step_policy {self.step_policy!r}")
        if self.state_upscale not in ("nearest", "trilinear"):
            raise ConfigError(f"unknown state_upscale {self.state_upscale!r}")

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def param_count(config: ModelConfig) -> int:
    """Exact number of trainable scalars in a model."""
    c, h = config.channels, config.hidden
    total = 0
    for k in config.kernel_sizes:
        total += c * k**3          # perception kernels, no bias
        total += 2 * c * h + h     # first dense layer on [perception, state]
        total += 2 * h             # batchnorm affine
        total += h * c + c         # second dense layer back to state width
    return total


def step_count(extents: tuple[int, int, int], kernel_size: int) -> int:
    """Steps needed for information to cross a grid of the given extents.

    The perception kernel moves information (k - 1) / 2 voxels per step, so
    the count is ceil(max extent / ((k - 1) / 2)).
    """
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel size must be odd and >= 3, got {kernel_size}")
    if min(extents) < 1:
        raise ConfigError(f"extents must be positive, got {extents}")
    reach = (kernel_size - 1) // 2
    return math.ceil(max(extents) / reach)


def level_extents(
    volume_extents: tuple[int, int, int], config: ModelConfig, level: int
) -> tuple[int, int, int]:
    """Grid extents at a level (1-based; level == levels is full resolution)."""
    if not 1 <= level <= config.levels:
        raise ConfigError(f"level {level} out of range 1..{config.levels}")
    d = config.scale_factor
    down = config.levels - level
    if config.legacy_extra_downscale and level < config.levels:
        down += 1
    factor = d**down
    out = []
    for n in volume_extents:
        if n % factor != 0:
            raise ShapeError(
                f"extent {n} not divisible by level-{level} factor {factor}"
            )
        out.append(n // factor)
    return tuple(out)


def step_schedule(
    volume_extents: tuple[int, int, int],
    config: ModelConfig,
    frozen: tuple[int, ...] | None = None,
) -> tuple[int, ...]:
    """Per-level step counts for a volume, honoring the configured policy."""
    if config.step_policy == STEP_POLICY_FROZEN:
        if frozen is None:
            raise ConfigError(
                "frozen-training-extent policy needs recorded step counts"
            )
        if len(frozen) != config.levels:
            raise ConfigError(
                f"recorded step counts cover {len(frozen)} levels, "
                f"model has {config.levels}"
            )
        return tuple(frozen)
    return tuple(
        step_count(level_extents(volume_extents, config, lv), config.kernel_sizes[lv - 1])
        for lv in range(1, config.levels + 1)
    )


@dataclass
class LevelParams:
    """Trainable parameters and batchnorm running statistics for one level."""

    perception: Tensor
    w1: Tensor
    b1: Tensor
    gamma: Tensor
    beta: Tensor
    w2: Tensor
    b2: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    def tensors(self) -> list[Tensor]:
        return [self.perception, self.w1, self.b1, self.gamma, self.beta, self.w2, self.b2]

    @staticmethod
    def initial(config: ModelConfig, level: int, rng: np.random.Generator) -> "LevelParams":
        """Fresh parameters: Kaiming-uniform dense-in, zero final layer.

        The zero-initialized output layer makes the automaton start as the
        identity map, so early training cannot blow up the state.
        """
        c, h = config.channels, config.hidden
        k = config.kernel_sizes[level - 1]
        bound_p = 1.0 / math.sqrt(k**3)
        perception = rng.uniform(-bound_p, bound_p, size=(c, k, k, k))
        bound_1 = 1.0 / math.sqrt(2 * c)
        w1 = rng.uniform(-bound_1, bound_1, size=(h, 2 * c))
        b1 = rng.uniform(-bound_1, bound_1, size=(h,))
        return LevelParams(
            perception=Tensor(perception.astype(np.float32)),
            w1=Tensor(w1.astype(np.float32)),
            b1=Tensor(b1.astype(np.float32)),
            gamma=Tensor(np.ones(h, dtype=np.float32)),
            beta=Tensor(np.zeros(h, dtype=np.float32)),
            w2=Tensor(np.zeros((c, h), dtype=np.float32)),
            b2=Tensor(np.zeros(c, dtype=np.float32)),
            running_mean=np.zeros(h, dtype=np.float32),
            running_var=np.ones(h, dtype=np.float32),
        )


@dataclass
class Model:
    config: ModelConfig
    levels: list[LevelParams]
    meta: dict = field(default_factory=dict)

    @staticmethod
    def initial(config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(kernels.fold_seed(seed, 0xA11))
        return Model(
            config=config,
            levels=[
                LevelParams.initial(config, lv, rng)
                for lv in range(1, config.levels + 1)
            ],
        )

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for lp in self.levels:
            out.extend(lp.tensors())
        return out

    def trained_steps(self) -> tuple[int, ...] | None:
        steps = self.meta.get("train_step_counts")
        return tuple(steps) if steps is not None else None


@dataclass
class StateGrid:
    """Automaton state for a batch, pinned to global level coordinates.

    grid: [b, channels, z, y, x] state tensor.
    image: [b, z, y, x] values restored into channel 0 after every step.
    origins: int64[b, 3] global coordinate of each element's grid corner at
        this level; firing decisions hash global coordinates so crops of a
        larger grid evolve identically to the full grid.
    """

    grid: Tensor
    image: np.ndarray
    origins: np.ndarray

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.grid.data.shape[2:]


def seed_state(
    images: np.ndarray, config: ModelConfig, origins: np.ndarray | None = None
) -> StateGrid:
    """Initial state: image in channel 0, all other channels zero."""
    if images.ndim != 4:
        raise ShapeError(f"images must be [b, z, y, x], got shape {images.shape}")
    b = images.shape[0]
    dt = np.float64 if images.dtype == np.float64 else np.float32
    grid = np.zeros((b, config.channels) + images.shape[1:], dtype=dt)
    grid[:, IMAGE_CHANNEL] = images
    if origins is None:
        origins = np.zeros((b, 3), dtype=np.int64)
    else:
        origins = np.asarray(origins, dtype=np.int64)
        if origins.shape != (b, 3):
            raise ShapeError(f"origins must be [{b}, 3], got {origins.shape}")
    return StateGrid(Tensor(grid), np.ascontiguousarray(images, dtype=dt), origins)


def fire_mask(
    seeds: np.ndarray,
    level: int,
    step: int,
    origins: np.ndarray,
    extents: tuple[int, int, int],
    fire_rate: float,
) -> np.ndarray:
    """Per-voxel 0/1 firing pattern, a pure function of seeds and coordinates."""
    b = seeds.shape[0]
    out = np.empty((b,) + tuple(extents), dtype=np.float32)
    if fire_rate >= 1.0:
        out.fill(1.0)
        return out
    keys = np.empty(b, dtype=np.uint64)
    for e in range(b):
        keys[e] = kernels.fold_seed(int(seeds[e]), level, step)
    kernels.fill_fire_mask(
        keys,
        np.ascontiguousarray(origins, dtype=np.int64),
        kernels.fire_threshold(fire_rate),
        out,
    )
    return out


def nca_step(
    state: StateGrid,
    params: LevelParams,
    config: ModelConfig,
    *,
    level: int,
    step: int,
    seeds: np.ndarray,
    bn_training: bool,
    tape: Tape | None = None,
) -> StateGrid:
    """One automaton update at a level; returns the new state."""
    g = state.grid
    perceived = ops.conv3d(g, params.perception, tape)
    feat = ops.concat_channels(perceived, g, tape)
    hid = ops.dense(feat, params.w1, params.b1, tape)
    hid = ops.batchnorm(
        hid,
        params.gamma,
        params.beta,
        params.running_mean,
        params.running_var,
        training=bn_training,
        tape=tape,
    )
    hid = ops.relu(hid, tape)
    update = ops.dense(hid, params.w2, params.b2, tape)
    mask = fire_mask(seeds, level, step, state.origins, state.extents, config.fire_rate)
    new = ops.residual_update(g, update, mask, tape)
    new = ops.set_channel(new, IMAGE_CHANNEL, state.image, tape)
    return StateGrid(new, state.image, state.origins)


def nca_run(
    state: StateGrid,
    params: LevelParams,
    config: ModelConfig,
    *,
    level: int,
    steps: int,
    seeds: np.ndarray,
    bn_training: bool,
    tape: Tape | None = None,
    step_offset: int = 0,
) -> StateGrid:
    """Apply nca_step `steps` times with consecutive step indices."""
    for i in range(steps):
        state = nca_step(
            state,
            params,
            config,
            level=level,
            step=step_offset + i,
            seeds=seeds,
            bn_training=bn_training,
            tape=tape,
        )
    return state


def logit_probability(state: StateGrid, tape: Tape | None = None) -> Tensor:
    """Segmentation probability read out from the logit channel."""
    logit = ops.take_channel(state.grid, LOGIT_CHANNEL, tape)
    return ops.sigmoid(logit, tape)


def probability_to_mask(prob: np.ndarray) -> np.ndarray:
    """Binarize probabilities; strictly greater than one half is foreground."""
    return (prob > 0.5).astype(np.uint8)
