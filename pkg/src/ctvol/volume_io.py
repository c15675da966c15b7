"""NIfTI-1 volume I/O, slice extraction and dataset splitting."""
from __future__ import annotations

import gzip
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from PIL import Image

HEADER_SIZE = 348
VOX_OFFSET = 352
DEFAULT_WINDOW = (-1000.0, 400.0)
NIFTI_INTENT_LABEL = 1002

# datatype code -> (numpy dtype char, bitpix)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    8: ("i4", 32),
    16: ("f4", 32),
    64: ("f8", 64),
}


class VolumeIOError(ValueError):
    """Base class for data errors raised while reading or slicing volumes."""


class BadMagic(VolumeIOError):
    pass


class UnsupportedDatatype(VolumeIOError):
    pass


class TruncatedPayload(VolumeIOError):
    pass


class NonPositiveSpacing(VolumeIOError):
    pass


class DegenerateWindow(VolumeIOError):
    pass


class EmptyInput(VolumeIOError):
    pass


class BadFractions(VolumeIOError):
    pass


@dataclass
class Volume3D:
    """A 3-D scalar grid indexed ``voxels[x, y, z]`` with spacing in mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    intent: str = "intensity"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise VolumeIOError(f"voxels must be a non-empty 3-D array, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in self.spacing):
            raise NonPositiveSpacing(f"spacing must be three positive finite values, got {self.spacing}")
        if self.intent not in ("intensity", "binary_mask"):
            raise VolumeIOError(f"unknown intent {self.intent!r}")
        if self.intent == "binary_mask" and not np.isin(self.voxels, (0, 1)).all():
            raise VolumeIOError("binary_mask volume holds values other than 0 and 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    @classmethod
    def mask(cls, voxels, spacing) -> "Volume3D":
        """Build a binary mask volume; any value > 0 becomes 1."""
        return cls((np.asarray(voxels) > 0).astype(np.uint8), spacing, "binary_mask")


@dataclass
class SliceSample:
    image: np.ndarray
    lung_mask: np.ndarray
    infection_mask: np.ndarray
    source_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        shapes = {self.image.shape, self.lung_mask.shape, self.infection_mask.shape}
        if len(shapes) != 1 or self.image.ndim != 2:
            raise VolumeIOError(f"image and masks must share one H x W shape, got {shapes}")
        for m in (self.lung_mask, self.infection_mask):
            if not np.isin(m, (0, 1)).all():
                raise VolumeIOError("slice masks must be binary")
        if self.slice_index < 0:
            raise VolumeIOError("slice_index must be non-negative")

    @property
    def sample_id(self) -> str:
        return slice_name(self.source_id, self.slice_index)


@dataclass
class DatasetSplit:
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int
    fractions: tuple[float, float, float] = field(default=(0.82, 0.10, 0.08))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(d["train_ids"], d["val_ids"], d["test_ids"], d["seed"], tuple(d["fractions"]))


def slice_name(source_id: str, slice_index: int) -> str:
    return f"{source_id}_{slice_index:04d}"


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

def _detect_endian(hdr: bytes) -> str:
    for endian in "<>":
        dim0 = struct.unpack_from(endian + "h", hdr, 40)[0]
        if 1 <= dim0 <= 7:
            return endian
    raise BadMagic("dim[0] is out of range under both byte orders")


def parse_nifti(data: bytes) -> Volume3D:
    """Decode a single-file NIfTI-1 payload (optionally gzip-compressed).

    The voxel values are rescaled by ``scl_slope``/``scl_inter`` when the
    slope is non-zero. Volumes carrying the LABEL intent whose values are all
    0 or 1 come back as ``binary_mask``.
    """
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise TruncatedPayload(f"corrupt gzip stream: {exc}") from exc
    if len(data) < HEADER_SIZE:
        raise TruncatedPayload(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    if data[344:348] != b"n+1\x00":
        raise BadMagic(f"expected magic b'n+1\\x00', got {data[344:348]!r}")
    e = _detect_endian(data)

    dim = struct.unpack_from(e + "8h", data, 40)
    intent_code, datatype = struct.unpack_from(e + "hh", data, 68)
    pixdim = struct.unpack_from(e + "8f", data, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(e + "3f", data, 108)

    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} is not supported")
    ndim = dim[0]
    shape = [dim[i] if i <= ndim else 1 for i in (1, 2, 3)]
    if any(n < 1 for n in shape):
        raise VolumeIOError(f"non-positive dimension in {dim[1:4]}")
    if any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise VolumeIOError("multi-frame volumes (dim[4..] > 1) are not supported")
    spacing = tuple(float(pixdim[i]) if i <= ndim else 1.0 for i in (1, 2, 3))
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise NonPositiveSpacing(f"pixdim spacing {spacing} is not strictly positive")

    char, bitpix = DATATYPES[datatype]
    count = shape[0] * shape[1] * shape[2]
    start = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    needed = count * bitpix // 8
    payload = data[start:start + needed]
    if len(payload) < needed:
        raise TruncatedPayload(f"expected {needed} voxel bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.dtype(e + char), count=count)
    voxels = raw.reshape(shape, order="F")

    if scl_slope != 0 and math.isfinite(scl_slope) and (scl_slope, scl_inter) != (1.0, 0.0):
        voxels = voxels.astype(np.float64) * scl_slope + scl_inter
    else:
        voxels = voxels.astype(voxels.dtype.newbyteorder("="))

    intent = "intensity"
    if intent_code == NIFTI_INTENT_LABEL and np.isin(voxels, (0, 1)).all():
        intent = "binary_mask"
        voxels = voxels.astype(np.uint8)
    return Volume3D(voxels, spacing, intent)


def write_nifti(v: Volume3D, compress: bool = False) -> bytes:
    """Encode a volume as a float32 single-file NIfTI-1 payload.

    Gzip output uses a zero mtime so identical volumes give identical bytes.
    """
    nx, ny, nz = v.shape
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    intent = NIFTI_INTENT_LABEL if v.intent == "binary_mask" else 0
    struct.pack_into("<hhh", hdr, 68, intent, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform_code, sform_code
    sx, sy, sz = v.spacing
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0)
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(v.voxels, dtype="<f4").tobytes(order="F")
    out = bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body
    if compress:
        out = gzip.compress(out, compresslevel=6, mtime=0)
    return out


def read_nifti(path) -> Volume3D:
    with open(path, "rb") as fh:
        return parse_nifti(fh.read())


def save_nifti(v: Volume3D, path) -> None:
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(write_nifti(v, compress=path.endswith(".gz")))


# ---------------------------------------------------------------------------
# Slices
# ---------------------------------------------------------------------------

def extract_slices(v: Volume3D, window: tuple[float, float] = DEFAULT_WINDOW) -> list[np.ndarray]:
    """Split a volume along z into ``nx x ny`` images in [0, 1].

    Intensity volumes are windowed linearly and clamped; masks pass through
    unchanged (as float64 0/1).
    """
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise DegenerateWindow(f"window lower bound {lo} must be below upper bound {hi}")
    vox = np.asarray(v.voxels, dtype=np.float64)
    if v.intent == "binary_mask":
        scaled = vox
    else:
        scaled = np.clip((vox - lo) / (hi - lo), 0.0, 1.0)
    return [np.ascontiguousarray(scaled[:, :, k]) for k in range(v.shape[2])]


def export_slice_image(img: np.ndarray) -> bytes:
    """Encode an image in [0, 1] as an 8-bit grayscale PNG."""
    img = np.asarray(img, dtype=np.float64)
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_slice_image(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        q = np.asarray(im.convert("L"), dtype=np.float64)
    return q / 255.0


def binarize(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img) > 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(ids: Sequence, fractions=(0.82, 0.10, 0.08), seed: int = 0) -> DatasetSplit:
    """Shuffle ``ids`` with a seeded PRNG and cut them into train/val/test.

    Train and val receive ``round(N * f)`` items (half rounds up); test takes
    whatever remains.
    """
    ids = list(ids)
    if not ids:
        raise EmptyInput("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise BadFractions("ids must be unique")
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise BadFractions(f"fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(ids)
    n_train = min(_round_half_up(n * fr[0]), n)
    n_val = min(_round_half_up(n * fr[1]), n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        shuffled[:n_train],
        shuffled[n_train:n_train + n_val],
        shuffled[n_train + n_val:],
        seed,
        fr,
    )
