"""Synthetic segmentation volumes, acquisition-artifact corruptions, Dice.

Labels are exact rasterizations of analytic shapes (sphere, ellipsoid, or
two overlapping lobes); images add tissue contrast, Gaussian texture noise
and a smooth multiplicative bias field on top, so the intensity is noisy
but the ground truth is unambiguous. Two knobs own all the geometric
randomness: radius_range controls every size draw and center_jitter scales
every placement draw, so degenerate ranges give identical labels across
samples while the textures still differ.

Corruptions mimic acquisition artifacts: image-domain noise, k-space
spikes, and periodic k-space line attenuation (motion ghosts). The
frequency transforms run on the package's own DFT.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.ops import resample_array
from .dft import dft, dft3
from .errors import ConfigError, GeometryError, ShapeError
from .kernels import fold_seed

_VOLUME_TAG = 0x5B10B5
_NOISE_TAG = 0xC0FF01
_SPIKE_TAG = 0xC0FF02

FAMILIES = ("sphere", "ellipsoid", "two-lobe")

# Scale between the jitter knob and the secondary placement draws (lobe
# direction wobble and lobe overlap wiggle).
_DIRECTION_WOBBLE = 4.0
_OVERLAP_WIGGLE = 2.5
_OVERLAP_MID = 0.65


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a batch of image/label volumes.

    radius_range is a fraction of the smallest extent. center_jitter is a
    fraction of each extent; at zero, shape placement is fully determined
    by the family and radii.
    """

    extents: tuple[int, int, int] = (64, 64, 64)
    family: str = "two-lobe"
    radius_range: tuple[float, float] = (0.16, 0.23)
    center_jitter: float = 0.06
    fg_mean: float = 0.68
    bg_mean: float = 0.26
    texture_std: float = 0.05
    bias_strength: float = 0.12
    count: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.extents) != 3 or min(self.extents) < 8:
            raise GeometryError(
                f"extents must be three values >= 8, got {self.extents}"
            )
        if self.family not in FAMILIES:
            raise ConfigError(
                f"family must be one of {FAMILIES}, got {self.family!r}"
            )
        lo, hi = self.radius_range
        if not (0.0 < lo <= hi < 0.5):
            raise ConfigError(
                f"radius_range must satisfy 0 < lo <= hi < 0.5, got {self.radius_range}"
            )
        if self.center_jitter < 0:
            raise ConfigError(f"center_jitter must be >= 0, got {self.center_jitter}")
        for name in ("fg_mean", "bg_mean"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.fg_mean == self.bg_mean:
            raise ConfigError("fg_mean and bg_mean must differ")
        if self.texture_std < 0:
            raise ConfigError(f"texture_std must be >= 0, got {self.texture_std}")
        if self.bias_strength < 0:
            raise ConfigError(
                f"bias_strength must be >= 0, got {self.bias_strength}"
            )
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")


def _smooth_field(
    rng: np.random.Generator, extents: tuple[int, int, int], cells: int
) -> np.ndarray:
    """Low-frequency noise in [-1, 1]: coarse Gaussian grid, upscaled smoothly."""
    coarse = rng.normal(size=(cells, cells, cells)).astype(np.float32)
    factors = tuple(e / cells for e in extents)
    field = resample_array(coarse, factors, "trilinear")
    peak = float(np.abs(field).max())
    if peak > 0:
        field /= peak
    return field


def _lobes(
    spec: SyntheticSpec, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Centers and per-axis radii of the shape's lobes, in voxel units."""
    ext = np.array(spec.extents, dtype=np.float64)
    mid = (ext - 1.0) / 2.0
    scale = float(min(spec.extents))
    lo, hi = spec.radius_range
    anchor = mid + rng.uniform(-1.0, 1.0, size=3) * spec.center_jitter * ext
    if spec.family == "sphere":
        r = rng.uniform(lo, hi) * scale
        return [(anchor, np.full(3, r))]
    if spec.family == "ellipsoid":
        radii = rng.uniform(lo, hi, size=3) * scale
        return [(anchor, radii)]
    r1 = rng.uniform(lo, hi, size=3) * scale
    r2 = rng.uniform(lo, hi, size=3) * scale
    # The pair sits along the longest volume axis, wobbled and spaced by
    # jitter-scaled draws so zero jitter pins the placement exactly.
    axis = int(np.argmax(spec.extents))
    direction = np.zeros(3)
    direction[axis] = 1.0
    direction = direction + rng.uniform(-1.0, 1.0, size=3) * (
        _DIRECTION_WOBBLE * spec.center_jitter
    )
    direction /= np.linalg.norm(direction)
    # Ellipsoid radius along the offset direction, per lobe; keeping the
    # center distance under their sum guarantees the lobes overlap.
    reach1 = 1.0 / np.sqrt(((direction / r1) ** 2).sum())
    reach2 = 1.0 / np.sqrt(((direction / r2) ** 2).sum())
    wiggle = rng.uniform(-1.0, 1.0) * min(0.15, _OVERLAP_WIGGLE * spec.center_jitter)
    gap = (_OVERLAP_MID + wiggle) * (reach1 + reach2)
    c1 = anchor - direction * (gap / 2.0)
    c2 = anchor + direction * (gap / 2.0)
    return [(c1, r1), (c2, r2)]


def _rasterize(
    spec: SyntheticSpec, lobes: list[tuple[np.ndarray, np.ndarray]]
) -> np.ndarray:
    ez, ey, ex = spec.extents
    zz = np.arange(ez, dtype=np.float64)[:, None, None]
    yy = np.arange(ey, dtype=np.float64)[None, :, None]
    xx = np.arange(ex, dtype=np.float64)[None, None, :]
    label = np.zeros(spec.extents, dtype=bool)
    for center, radii in lobes:
        for c, r, e in zip(center, radii, spec.extents):
            if c - r < 0.0 or c + r > e - 1.0:
                raise GeometryError(
                    f"shape exceeds volume: center {np.round(center, 2).tolist()} "
                    f"radii {np.round(radii, 2).tolist()} in extents {spec.extents}"
                )
        d2 = (
            ((zz - center[0]) / radii[0]) ** 2
            + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2
        )
        label |= d2 <= 1.0
    return label.astype(np.uint8)


def generate(
    spec: SyntheticSpec, seed: int | None = None
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Draw spec.count image/label pairs; images float32 in [0, 1].

    The image is foreground/background contrast over the rasterized label,
    plus Gaussian texture noise, times a smooth bias field, then min-max
    normalized. `seed` overrides spec.seed when given; each sample gets an
    independent substream, so a rerun reproduces the batch exactly.
    """
    base = spec.seed if seed is None else seed
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng(fold_seed(base, _VOLUME_TAG, i))
        label = _rasterize(spec, _lobes(spec, rng))
        frac = float(label.mean())
        if not 0.01 <= frac <= 0.50:
            raise GeometryError(
                f"foreground fraction {frac:.4f} outside [0.01, 0.50] "
                f"for sample {i}; adjust radius_range"
            )
        tissue = spec.bg_mean + (spec.fg_mean - spec.bg_mean) * label.astype(
            np.float32
        )
        bias = 1.0 + spec.bias_strength * _smooth_field(rng, spec.extents, cells=4)
        image = tissue * bias
        if spec.texture_std > 0:
            image = image + rng.normal(
                scale=spec.texture_std, size=spec.extents
            ).astype(np.float32)
        lo, hi = float(image.min()), float(image.max())
        if hi > lo:
            image = (image - lo) / (hi - lo)
        out.append((image.astype(np.float32), label))
    return out


def make_volume(
    seed: int, extents: tuple[int, int, int] = (64, 64, 64)
) -> tuple[np.ndarray, np.ndarray]:
    """One two-lobe image/label pair with default intensity settings."""
    spec = SyntheticSpec(extents=tuple(int(e) for e in extents), count=1, seed=seed)
    return generate(spec)[0]


def make_dataset(
    count: int, seed: int, extents: tuple[int, int, int] = (64, 64, 64)
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked images and labels for `count` default two-lobe volumes."""
    spec = SyntheticSpec(
        extents=tuple(int(e) for e in extents), count=count, seed=seed
    )
    pairs = generate(spec)
    images = np.stack([p[0] for p in pairs])
    labels = np.stack([p[1] for p in pairs])
    return images, labels


def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap of two binary masks: 2|A^B| / (|A| + |B|); both empty gives 1."""
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    am = np.asarray(a) != 0
    bm = np.asarray(b) != 0
    sa = int(am.sum())
    sb = int(bm.sum())
    if sa + sb == 0:
        return 1.0
    inter = int(np.logical_and(am, bm).sum())
    return 2.0 * inter / (sa + sb)


def _check_image(volume: np.ndarray) -> np.ndarray:
    v = np.asarray(volume)
    if v.ndim != 3:
        raise ShapeError(f"volume must be [z, y, x], got shape {v.shape}")
    return v.astype(np.float64, copy=False)


def _renormalize(out: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1], applied only when the values stray outside."""
    lo, hi = float(out.min()), float(out.max())
    if lo < 0.0 or hi > 1.0:
        if hi > lo:
            out = (out - lo) / (hi - lo)
        else:
            out = np.clip(out, 0.0, 1.0)
    return out


def corrupt_noise(volume: np.ndarray, std: float, seed: int = 0) -> np.ndarray:
    """Add i.i.d. Gaussian noise of the given std, clamped back to [0, 1]."""
    v = _check_image(volume)
    if std < 0:
        raise ConfigError(f"noise std must be >= 0, got {std}")
    rng = np.random.default_rng(fold_seed(seed, _NOISE_TAG))
    out = v + rng.normal(scale=std, size=v.shape) if std > 0 else v
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corrupt_spike(
    volume: np.ndarray, intensity: float, num_spikes: int = 1, seed: int = 0
) -> np.ndarray:
    """Inject bright k-space points, the classic RF-spike stripe artifact.

    Each spike adds intensity times the peak spectral magnitude at a random
    non-center frequency and its mirror, keeping the image real. The result
    is rescaled to [0, 1] only if the interference pushes it outside.
    """
    v = _check_image(volume)
    if intensity <= 0:
        raise ConfigError(f"spike intensity must be > 0, got {intensity}")
    if num_spikes < 1:
        raise ConfigError(f"num_spikes must be >= 1, got {num_spikes}")
    rng = np.random.default_rng(fold_seed(seed, _SPIKE_TAG))
    spec = dft3(v)
    peak = float(np.abs(spec).max())
    ext = v.shape
    chosen: set[tuple[int, int, int]] = set()
    while len(chosen) < 2 * num_spikes:
        loc = tuple(int(rng.integers(0, e)) for e in ext)
        mirror = tuple((-i) % e for i, e in zip(loc, ext))
        # Skip the DC term, self-mirrored points and anything already hit,
        # so every spike is a clean conjugate pair.
        if not any(loc) or loc == mirror or loc in chosen:
            continue
        spec[loc] += intensity * peak
        spec[mirror] += intensity * peak
        chosen.add(loc)
        chosen.add(mirror)
    out = np.real(dft3(spec, inverse=True))
    return _renormalize(out).astype(np.float32)


CORRUPTION_KINDS = ("noise", "spike", "ghost")

_AXES = {"z": 0, "y": 1, "x": 2}


def corrupt_ghost(
    volume: np.ndarray,
    num_ghosts: int,
    intensity: float,
    axis: str = "x",
    seed: int = 0,
) -> np.ndarray:
    """Attenuate periodic k-space lines, displacing ghost replicas along axis.

    Every num_ghosts-th frequency line (and its mirror, center preserved)
    is scaled by 1/(1+intensity). The transform uses no randomness; seed is
    accepted for interface symmetry with the other corruptions.
    """
    v = _check_image(volume)
    if axis not in _AXES:
        raise ConfigError(f"axis must be one of {sorted(_AXES)}, got {axis!r}")
    if num_ghosts < 2:
        raise ConfigError(f"num_ghosts must be >= 2, got {num_ghosts}")
    if intensity < 0:
        raise ConfigError(f"ghost intensity must be >= 0, got {intensity}")
    dim = _AXES[axis]
    n = v.shape[dim]
    spec = dft(v, axis=dim)
    atten = 1.0 / (1.0 + intensity)
    lines = set(range(num_ghosts, n, num_ghosts))
    lines |= {(n - l) % n for l in lines}
    lines.discard(0)
    idx: list[slice | list[int]] = [slice(None)] * 3
    idx[dim] = sorted(lines)
    spec[tuple(idx)] *= atten
    out = np.real(dft(spec, axis=dim, inverse=True))
    return _renormalize(out).astype(np.float32)
