"""Volumetric images: the grid type shared by scans, masks, heatmaps and ALE maps.

Also holds a minimal single-file NIfTI-1 reader/writer, separable Gaussian
smoothing, thresholding and block-mean downsampling.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

_HEADER_SIZE = 348
_VOX_OFFSET = 352
_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}


def _triple(values, cast=float) -> tuple:
    out = tuple(cast(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"expected 3 components, got {len(out)}")
    return out


@dataclass
class Volume3D:
    """Dense scalar field on a regular grid.

    ``data`` has shape ``(nx, ny, nz)``; on disk the voxels are stored with
    x varying fastest (Fortran order), as NIfTI requires.
    """

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3D and non-empty, got shape {self.data.shape}")
        if self.data.dtype.kind not in "fiu":
            self.data = self.data.astype(np.float64)
        self.spacing_mm = _triple(self.spacing_mm)
        self.origin_mm = _triple(self.origin_mm)
        if not all(math.isfinite(s) and s > 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing_mm}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data contains NaN or Inf")

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)

    def same_grid(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing_mm, other.spacing_mm)
            and np.allclose(self.origin_mm, other.origin_mm)
        )

    def like(self, data: np.ndarray) -> "Volume3D":
        """A new volume on this grid holding ``data``."""
        return Volume3D(data, self.spacing_mm, self.origin_mm)

    def flat(self) -> np.ndarray:
        """Voxel values in storage order (x fastest)."""
        return self.data.ravel(order="F")


@dataclass
class BinaryMask:
    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {self.data.shape}")
        self.spacing_mm = _triple(self.spacing_mm)
        self.origin_mm = _triple(self.origin_mm)

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)

    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.data))

    def same_grid(self, other) -> bool:
        return Volume3D.same_grid(self, other)

    def to_volume(self) -> Volume3D:
        return Volume3D(self.data.astype(np.float32), self.spacing_mm, self.origin_mm)

    @classmethod
    def from_volume(cls, v: Volume3D) -> "BinaryMask":
        return cls(v.data != 0, v.spacing_mm, v.origin_mm)


# --------------------------------------------------------------------------
# NIfTI-1
# --------------------------------------------------------------------------


class NiftiError(Exception):
    """Base class for NIfTI parsing failures."""


class NiftiTruncatedError(NiftiError):
    pass


class NiftiMagicError(NiftiError):
    pass


class NiftiDatatypeError(NiftiError):
    pass


def read_nifti(path) -> Volume3D:
    """Read a little-endian single-file NIfTI-1 volume (uint8, int16 or float32)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_SIZE:
        raise NiftiTruncatedError(f"{path}: header needs {_HEADER_SIZE} bytes, file has {len(raw)}")
    if raw[344:348] not in (b"n+1\x00",):
        raise NiftiMagicError(f"{path}: magic {raw[344:348]!r} is not 'n+1'")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HEADER_SIZE:
        raise NiftiError(f"{path}: sizeof_hdr={sizeof_hdr}, only little-endian NIfTI-1 is supported")

    dim = struct.unpack_from("<8h", raw, 40)
    datatype, _bitpix = struct.unpack_from("<2h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    qoffset = struct.unpack_from("<3f", raw, 268)
    srow = np.array(struct.unpack_from("<12f", raw, 280)).reshape(3, 4)

    if datatype not in _DTYPES:
        raise NiftiDatatypeError(f"{path}: unsupported datatype code {datatype}")
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid dim[0]={ndim}")
    shape = [max(int(d), 1) for d in dim[1:4]]
    for extra in dim[4 : ndim + 1]:
        if extra > 1:
            raise NiftiError(f"{path}: only 3D volumes are supported, dim={dim}")
    dtype = _DTYPES[datatype]
    start = int(vox_offset)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < start + nbytes:
        raise NiftiTruncatedError(f"{path}: payload needs {nbytes} bytes after offset {start}, file has {len(raw)}")

    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=start)
    data = data.reshape(shape, order="F")
    if dtype.kind != "f":
        data = data.astype(np.float32)
    else:
        data = data.astype(np.float32, copy=True)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data * (scl_slope or 1.0) + scl_inter

    spacing = tuple(abs(p) if p > 0 else 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        origin = tuple(float(v) for v in srow[:, 3])
    elif qform_code > 0:
        origin = tuple(float(v) for v in qoffset)
    else:
        origin = (0.0, 0.0, 0.0)
    return Volume3D(data, spacing, origin)


def write_nifti(v: Volume3D, path) -> None:
    """Write ``v`` as float32 NIfTI-1 with a 4-byte empty extension block."""
    hdr = bytearray(_HEADER_SIZE)
    nx, ny, nz = v.dims
    sx, sy, sz = v.spacing_mm
    ox, oy, oz = v.origin_mm
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2 | 8)  # xyzt_units: mm, s
    struct.pack_into("<2h", hdr, 252, 0, 1)
    struct.pack_into("<3f", hdr, 268, ox, oy, oz)
    srow = (sx, 0.0, 0.0, ox, 0.0, sy, 0.0, oy, 0.0, 0.0, sz, oz)
    struct.pack_into("<12f", hdr, 280, *srow)
    hdr[344:348] = b"n+1\x00"
    payload = np.asarray(v.data, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")
        fh.write(payload)


# --------------------------------------------------------------------------
# Filtering
# --------------------------------------------------------------------------


def gaussian_kernel_1d(sigma_vox: float, truncate: float = 4.0) -> np.ndarray:
    """Sampled Gaussian truncated at ``truncate`` sigma, normalised to unit sum."""
    radius = max(int(math.ceil(truncate * sigma_vox)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def gaussian_smooth(v: Volume3D, fwhm_mm: float) -> Volume3D:
    """Separable Gaussian smoothing with zero padding outside the grid."""
    if fwhm_mm < 0:
        raise ValueError("fwhm_mm must be non-negative")
    if fwhm_mm == 0:
        return v.like(v.data.copy())
    out = np.asarray(v.data, dtype=np.float64)
    for axis, spacing in enumerate(v.spacing_mm):
        kernel = gaussian_kernel_1d(fwhm_mm * FWHM_TO_SIGMA / spacing)
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
    return v.like(out)


def threshold(v: Volume3D, t: float) -> BinaryMask:
    return BinaryMask(v.data > t, v.spacing_mm, v.origin_mm)


def downsample(v: Volume3D, factor) -> Volume3D:
    """Block-mean pooling; trailing voxels that do not fill a block are dropped."""
    if isinstance(factor, int):
        factor = (factor,) * 3
    factor = _triple(factor, int)
    if min(factor) < 1:
        raise ValueError("downsample factors must be positive")
    out_dims = [d // f for d, f in zip(v.dims, factor)]
    if min(out_dims) < 1:
        raise ValueError(f"factor {factor} too large for dims {v.dims}")
    cropped = v.data[: out_dims[0] * factor[0], : out_dims[1] * factor[1], : out_dims[2] * factor[2]]
    blocks = cropped.reshape(out_dims[0], factor[0], out_dims[1], factor[1], out_dims[2], factor[2])
    data = blocks.mean(axis=(1, 3, 5))
    spacing = tuple(s * f for s, f in zip(v.spacing_mm, factor))
    # first output voxel sits at the centre of the first block
    origin = tuple(o + 0.5 * (f - 1) * s for o, s, f in zip(v.origin_mm, v.spacing_mm, factor))
    return Volume3D(data, spacing, origin)
