"""Volume containers and a minimal NIfTI-1 (single-file, little-endian) codec.

Arrays are held as numpy arrays indexed ``[x, y, z]``.  On disk the payload
is x-fastest, i.e. flat index ``x + nx * (y + ny * z)``, which is Fortran
order for an ``(nx, ny, nz)`` array.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

# NIfTI datatype code -> little-endian numpy dtype
DATATYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    512: np.dtype("<u2"),
}
INTEGER_CODES = {2, 4, 512}


class NiftiError(ValueError):
    """Raised for any file this reader refuses; ``reason`` is a stable tag."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class Spacing:
    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.0

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"spacing {name} must be positive, got {v}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def voxel_volume(self) -> float:
        return self.dx * self.dy * self.dz


def _as_spacing(spacing) -> Spacing:
    if isinstance(spacing, Spacing):
        return spacing
    return Spacing(*(float(s) for s in spacing))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer class-ID grid; 0 is background."""

    voxels: np.ndarray
    spacing: Spacing = field(default_factory=Spacing)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {v.shape}")
        if not np.issubdtype(v.dtype, np.integer):
            raise ValueError(f"label volume needs an integer dtype, got {v.dtype}")
        if v.size and v.min() < 0:
            raise ValueError("label volume contains negative class IDs")
        v = v.astype(np.int64, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    @property
    def max_label(self) -> int:
        return int(self.voxels.max()) if self.voxels.size else 0

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.voxels, other.voxels)


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Real-valued intensity grid (stored as given; written as float32)."""

    voxels: np.ndarray
    spacing: Spacing = field(default_factory=Spacing)

    def __post_init__(self):
        v = np.array(self.voxels, copy=True)
        if v.ndim != 3:
            raise ValueError(f"scalar volume must be 3D, got shape {v.shape}")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar volume contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def __eq__(self, other):
        if not isinstance(other, ScalarVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.voxels, other.voxels)


@dataclass(frozen=True, eq=False)
class ProbVolume:
    """Per-voxel class probabilities, array shape ``(C, nx, ny, nz)``."""

    probs: np.ndarray
    spacing: Spacing = field(default_factory=Spacing)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 4 or p.shape[0] < 2:
            raise ValueError(f"probabilities need shape (C>=2, nx, ny, nz), got {p.shape}")
        if p.min() < 0 or p.max() > 1:
            raise ValueError("probabilities outside [0, 1]")
        if np.abs(p.sum(axis=0) - 1.0).max() > 1e-6:
            raise ValueError("probabilities do not sum to 1 at every voxel")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.probs.shape[1:])


def label_datatype(max_label: int) -> int:
    """Smallest unsigned NIfTI integer type that holds ``max_label``."""
    if max_label <= 0xFF:
        return 2
    if max_label <= 0xFFFF:
        return 512
    raise ValueError(f"class ID {max_label} does not fit in uint16")


def _build_header(dims, spacing: Spacing, datatype: int) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, DATATYPES[datatype].itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing.dx, spacing.dy, spacing.dz, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    hdr[123] = 10  # xyzt_units: mm + s
    hdr[344:348] = MAGIC_SINGLE
    return bytes(hdr)


def write_nifti(volume: LabelVolume | ScalarVolume, path) -> None:
    """Write a label volume (uint8/uint16) or scalar volume (float32)."""
    if isinstance(volume, LabelVolume):
        datatype = label_datatype(volume.max_label)
    elif isinstance(volume, ScalarVolume):
        datatype = 16
    else:
        raise TypeError(f"cannot write {type(volume).__name__} as NIfTI")
    payload = np.asarray(volume.voxels).astype(DATATYPES[datatype]).tobytes(order="F")
    header = _build_header(volume.dims, volume.spacing, datatype)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)


def read_nifti(path, expected_kind: str = "label") -> LabelVolume | ScalarVolume:
    """Read a single-file NIfTI-1 volume written in the supported subset."""
    if expected_kind not in ("label", "scalar"):
        raise ValueError(f"expected_kind must be 'label' or 'scalar', got {expected_kind!r}")
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise NiftiError("truncated header", f"{len(raw)} bytes in {path}")

    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise NiftiError("big-endian header", str(path))
        raise NiftiError("bad header size", f"sizeof_hdr={sizeof_hdr}")

    magic = raw[344:348]
    if magic != MAGIC_SINGLE:
        raise NiftiError("unsupported magic", repr(magic))

    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiError("unsupported dimensionality", f"dim[0]={dim[0]}")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise NiftiError("bad dimensions", str(dims))

    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in DATATYPES:
        raise NiftiError("unsupported datatype", str(datatype))

    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    if int(vox_offset) != VOX_OFFSET:
        raise NiftiError("unsupported vox_offset", str(vox_offset))

    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = []
    for axis, p in zip("xyz", pixdim[1:4]):
        if p == 0:
            log.warning("pixdim along %s is 0 in %s; using 1.0 mm", axis, path)
            p = 1.0
        spacing.append(abs(float(p)))

    dtype = DATATYPES[datatype]
    nbytes = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(raw) < VOX_OFFSET + nbytes:
        raise NiftiError("truncated payload", f"need {nbytes} bytes, have {len(raw) - VOX_OFFSET}")
    flat = np.frombuffer(raw, dtype=dtype, count=dims[0] * dims[1] * dims[2], offset=VOX_OFFSET)
    arr = flat.reshape(dims, order="F")

    if expected_kind == "scalar":
        return ScalarVolume(arr, Spacing(*spacing))
    if datatype not in INTEGER_CODES:
        raise NiftiError("non-integer label datatype", str(datatype))
    if arr.size and arr.min() < 0:
        raise NiftiError("negative label value", str(int(arr.min())))
    return LabelVolume(arr, Spacing(*spacing))
