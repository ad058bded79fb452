"""On-disk formats: volume container, model checkpoint, scanner-file reader.

Both native formats share one layout: an 8-byte magic, a 4-byte little-endian
manifest length, a canonical-JSON manifest, then a raw little-endian blob
whose CRC32 is recorded in the manifest. Canonical JSON (sorted keys, no
whitespace) makes equal contents produce equal bytes, which the pipeline
reproducibility guarantees build on.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .core import LevelParams, Model, ModelConfig
from .errors import CorruptFileError, ShapeError, UnsupportedFormatError

VOLUME_MAGIC = b"M3DVOL\x01\x00"
CHECKPOINT_MAGIC = b"M3DNCA\x01\x00"

_VOLUME_DTYPES = {"f32": np.float32, "u8": np.uint8}


def _canonical_json(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_container(path: str | Path, magic: bytes, manifest: dict, blob: bytes) -> None:
    manifest = dict(manifest)
    manifest["blob_bytes"] = len(blob)
    manifest["blob_crc32"] = zlib.crc32(blob)
    head = _canonical_json(manifest)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(blob)


def _read_container(path: str | Path, magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(magic) + 4:
        raise CorruptFileError(f"{path}: file too short to hold a header")
    if raw[: len(magic)] != magic:
        if raw[:6] == magic[:6]:
            raise UnsupportedFormatError(
                f"{path}: format version {raw[6]}.{raw[7]} not supported"
            )
        raise UnsupportedFormatError(f"{path}: bad magic {raw[:len(magic)]!r}")
    (mlen,) = struct.unpack_from("<I", raw, len(magic))
    start = len(magic) + 4
    if len(raw) < start + mlen:
        raise CorruptFileError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"{path}: unreadable manifest: {e}") from e
    blob = raw[start + mlen :]
    if len(blob) != manifest.get("blob_bytes"):
        raise CorruptFileError(
            f"{path}: blob is {len(blob)} bytes, manifest promises "
            f"{manifest.get('blob_bytes')}"
        )
    if zlib.crc32(blob) != manifest.get("blob_crc32"):
        raise CorruptFileError(f"{path}: blob checksum mismatch")
    return manifest, blob


# ---------------------------------------------------------------------------
# volumes


def save_volume(
    path: str | Path,
    array: np.ndarray,
    kind: str = "image",
    meta: dict | None = None,
    spacing_mm: tuple[float, float, float] | None = None,
) -> None:
    """Write a 3-d float32 or uint8 array with a small JSON manifest."""
    if array.ndim != 3:
        raise ShapeError(f"volumes are 3-d, got shape {array.shape}")
    if array.dtype == np.float32:
        dtype = "f32"
    elif array.dtype == np.uint8:
        dtype = "u8"
    else:
        raise UnsupportedFormatError(
            f"volume dtype must be float32 or uint8, got {array.dtype}"
        )
    blob = np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<")).tobytes()
    manifest = {
        "record": "volume",
        "dtype": dtype,
        "shape": list(array.shape),
        "axis_order": "zyx",
        "kind": kind,
        "range": [float(array.min()), float(array.max())] if array.size else [0, 0],
        "meta": meta or {},
    }
    if spacing_mm is not None:
        manifest["spacing_mm"] = list(spacing_mm)
    _write_container(path, VOLUME_MAGIC, manifest, blob)


def load_volume(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a volume container; returns (array, manifest).

    uint8 image volumes come back as float32 scaled by 1/255 (255 reads as
    1.0), with the scale recorded in the manifest; uint8 labels and float32
    data return exactly the stored values.
    """
    manifest, blob = _read_container(path, VOLUME_MAGIC)
    dtype = manifest.get("dtype")
    if dtype not in _VOLUME_DTYPES:
        raise UnsupportedFormatError(f"{path}: unknown volume dtype {dtype!r}")
    shape = tuple(manifest.get("shape", ()))
    np_dtype = np.dtype(_VOLUME_DTYPES[dtype]).newbyteorder("<")
    expect = int(np.prod(shape)) * np_dtype.itemsize
    if len(shape) != 3 or expect != len(blob):
        raise CorruptFileError(
            f"{path}: shape {shape} does not match {len(blob)} blob bytes"
        )
    arr = np.frombuffer(blob, dtype=np_dtype).reshape(shape)
    arr = arr.astype(arr.dtype.newbyteorder("="))
    if dtype == "u8" and manifest.get("kind") == "image":
        arr = arr.astype(np.float32) / np.float32(255.0)
        manifest["intensity_scale"] = 255.0
    return arr, manifest


# ---------------------------------------------------------------------------
# checkpoints

_LEVEL_FIELDS = (
    "perception",
    "w1",
    "b1",
    "gamma",
    "beta",
    "w2",
    "b2",
    "running_mean",
    "running_var",
)


def save_checkpoint(path: str | Path, model: Model) -> None:
    """Persist a model: config, metadata, and all arrays as float32."""
    arrays = []
    blobs = []
    offset = 0
    for i, lp in enumerate(model.levels):
        for name in _LEVEL_FIELDS:
            val = getattr(lp, name)
            arr = val.data if isinstance(val, Tensor) else val
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            arrays.append(
                {
                    "name": f"level{i}.{name}",
                    "shape": list(arr.shape),
                    "offset": offset,
                }
            )
            blobs.append(arr.astype("<f4").tobytes())
            offset += len(blobs[-1])
    cfg = model.config
    manifest = {
        "record": "checkpoint",
        "config": {
            "levels": cfg.levels,
            "scale_factor": cfg.scale_factor,
            "kernel_sizes": list(cfg.kernel_sizes),
            "channels": cfg.channels,
            "hidden": cfg.hidden,
            "fire_rate": cfg.fire_rate,
            "step_policy": cfg.step_policy,
            "legacy_extra_downscale": cfg.legacy_extra_downscale,
            "state_upscale": cfg.state_upscale,
        },
        "meta": model.meta,
        "arrays": arrays,
    }
    _write_container(path, CHECKPOINT_MAGIC, manifest, b"".join(blobs))


def load_checkpoint(path: str | Path) -> Model:
    """Rebuild a model from a checkpoint file."""
    manifest, blob = _read_container(path, CHECKPOINT_MAGIC)
    try:
        c = manifest["config"]
        config = ModelConfig(
            levels=c["levels"],
            scale_factor=c["scale_factor"],
            kernel_sizes=tuple(c["kernel_sizes"]),
            channels=c["channels"],
            hidden=c["hidden"],
            fire_rate=c["fire_rate"],
            step_policy=c["step_policy"],
            legacy_extra_downscale=c["legacy_extra_downscale"],
            state_upscale=c["state_upscale"],
        )
        entries = manifest["arrays"]
    except KeyError as e:
        raise CorruptFileError(f"{path}: manifest missing field {e}") from e
    want = [
        f"level{i}.{name}"
        for i in range(config.levels)
        for name in _LEVEL_FIELDS
    ]
    if [e["name"] for e in entries] != want:
        raise CorruptFileError(f"{path}: unexpected array listing")
    next_free = 0
    values: dict[str, np.ndarray] = {}
    for e in entries:
        shape = tuple(e["shape"])
        nbytes = int(np.prod(shape)) * 4
        offset = int(e.get("offset", -1))
        # Recorded offsets must tile the blob left to right with no overlap
        # and no gaps, and stay inside it.
        if offset != next_free or offset + nbytes > len(blob):
            raise CorruptFileError(
                f"{path}: array {e['name']} claims bytes "
                f"[{offset}, {offset + nbytes}) in a {len(blob)}-byte blob"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=offset)
        values[e["name"]] = arr.reshape(shape).astype(np.float32)
        next_free = offset + nbytes
    if next_free != len(blob):
        raise CorruptFileError(f"{path}: {len(blob) - next_free} trailing blob bytes")
    levels = []
    for i in range(config.levels):
        get = lambda n: values[f"level{i}.{n}"]
        levels.append(
            LevelParams(
                perception=Tensor(get("perception")),
                w1=Tensor(get("w1")),
                b1=Tensor(get("b1")),
                gamma=Tensor(get("gamma")),
                beta=Tensor(get("beta")),
                w2=Tensor(get("w2")),
                b2=Tensor(get("b2")),
                running_mean=get("running_mean").copy(),
                running_var=get("running_var").copy(),
            )
        )
    return Model(config=config, levels=levels, meta=dict(manifest.get("meta", {})))


# ---------------------------------------------------------------------------
# scanner files

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def load_nifti(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a single-file scanner volume into float32 [z, y, x] plus info.

    Supports the common 348-byte-header single-file layout (magic "n+1")
    with uint8 / int16 / float32 samples, either byte order, and the linear
    intensity rescale from the header. Intensities come back min-max
    normalized to [0, 1]; info records the pre-normalization range so the
    original values stay recoverable. Compressed files and anything else
    are refused rather than guessed at.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raise UnsupportedFormatError(
            f"{path}: gzip-compressed volume; decompress the file first"
        )
    if len(raw) < 352:
        raise CorruptFileError(f"{path}: too short for a volume header")
    magic = raw[344:348]
    if magic not in (b"n+1\x00",):
        if magic[:3] == b"ni1":
            raise UnsupportedFormatError(
                f"{path}: two-file header/data layout not supported"
            )
        raise UnsupportedFormatError(f"{path}: unrecognized magic {magic!r}")
    order = "<"
    (ndim,) = struct.unpack_from("<h", raw, 40)
    if not 1 <= ndim <= 7:
        order = ">"
        (ndim,) = struct.unpack_from(">h", raw, 40)
        if not 1 <= ndim <= 7:
            raise CorruptFileError(f"{path}: implausible dimension count {ndim}")
    dims = struct.unpack_from(f"{order}8h", raw, 40)
    datatype, bitpix = struct.unpack_from(f"{order}2h", raw, 70)
    (vox_offset,) = struct.unpack_from(f"{order}f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{order}2f", raw, 112)
    if ndim < 3 or any(d != 1 for d in dims[4 : 1 + ndim]):
        raise UnsupportedFormatError(
            f"{path}: only 3-d volumes supported, got dims {dims[: 1 + ndim]}"
        )
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedFormatError(
            f"{path}: sample type code {datatype} not supported"
        )
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(order)
    if bitpix != dtype.itemsize * 8:
        raise CorruptFileError(
            f"{path}: bitpix {bitpix} does not match type code {datatype}"
        )
    nx, ny, nz = dims[1], dims[2], dims[3]
    count = nx * ny * nz
    start = int(vox_offset)
    if start < 348 or start + count * dtype.itemsize > len(raw):
        raise CorruptFileError(f"{path}: data offset {start} leaves the file")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    # Samples are stored x-fastest; reshaping reversed gives [z, y, x].
    vol = arr.reshape(nz, ny, nx).astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        vol = vol * np.float32(slope) + np.float32(scl_inter)
    lo, hi = float(vol.min()), float(vol.max())
    if hi > lo:
        vol = (vol - lo) / np.float32(hi - lo)
    else:
        vol = np.zeros_like(vol)
    info = {
        "shape": [int(nz), int(ny), int(nx)],
        "datatype": int(datatype),
        "range": [lo, hi],
        "byte_order": order,
    }
    return vol, info
