"""Volume files, intensity preprocessing, cubic resampling and phantoms.

Two on-disk formats are understood:

* raw + JSON sidecar: ``<name>.f32raw`` (little-endian samples, X fastest)
  next to ``<name>.json`` holding ``{"dims": [X, Y, Z], "dtype": ...}``;
* single-file little-endian NIfTI-1 (``.nii``), read only.

Volumes come back as ``(1, X, Y, Z)`` float32 arrays.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

RAW_SUFFIX = ".f32raw"

_RAW_DTYPES = {"float32": "<f4", "int16": "<i2", "uint8": "u1"}

# NIfTI-1 datatype codes we accept -> (numpy dtype, bitpix)
NIFTI_DTYPES = {2: ("u1", 8), 4: ("<i2", 16), 16: ("<f4", 32)}
NIFTI_HEADER_SIZE = 348


class VolumeFormatError(ValueError):
    """Base class for unreadable volume files."""


class HeaderSizeError(VolumeFormatError):
    pass


class MagicError(VolumeFormatError):
    pass


class DimensionError(VolumeFormatError):
    pass


class DtypeError(VolumeFormatError):
    pass


class BitpixError(VolumeFormatError):
    pass


class VoxOffsetError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


@dataclass
class VolumeFile:
    path: str
    format: str  # "nifti1" | "raw"
    dims: tuple
    dtype: str
    slope: float = 1.0
    intercept: float = 0.0
    offset: int = 0
    spacing_mm: tuple | None = None


def _raw_paths(path):
    base = str(path)
    for suffix in (RAW_SUFFIX, ".json"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    return base + RAW_SUFFIX, base + ".json"


def _detect_format(path):
    p = str(path)
    if p.endswith(".nii"):
        return "nifti1"
    if p.endswith(".nii.gz"):
        raise VolumeFormatError("compressed NIfTI is not supported")
    return "raw"


def read_nifti_header(path):
    with open(path, "rb") as fh:
        hdr = fh.read(NIFTI_HEADER_SIZE)
    if len(hdr) < NIFTI_HEADER_SIZE:
        raise HeaderSizeError(f"{path}: file shorter than the {NIFTI_HEADER_SIZE}-byte NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", hdr, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        if struct.unpack_from(">i", hdr, 0)[0] == NIFTI_HEADER_SIZE:
            raise HeaderSizeError(f"{path}: big-endian NIfTI is not supported")
        raise HeaderSizeError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected {NIFTI_HEADER_SIZE}")
    magic = hdr[344:348]
    if magic != b"n+1\x00":
        raise MagicError(f"{path}: bad magic {magic!r}, expected single-file NIfTI-1 'n+1'")
    dim = struct.unpack_from("<8h", hdr, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise DimensionError(f"{path}: dim[0] = {ndim} is outside 1..7")
    if any(d <= 0 for d in dim[1:ndim + 1]):
        raise DimensionError(f"{path}: non-positive extent in dim = {dim[1:ndim + 1]}")
    if ndim > 3 and any(d != 1 for d in dim[4:ndim + 1]):
        raise DimensionError(f"{path}: only 3D volumes are supported, dim = {dim[1:ndim + 1]}")
    dims = tuple(dim[1:4][:ndim]) + (1,) * (3 - min(ndim, 3))
    datatype, bitpix = struct.unpack_from("<2h", hdr, 70)
    if datatype not in NIFTI_DTYPES:
        raise DtypeError(f"{path}: unsupported datatype code {datatype}")
    np_dtype, expected_bitpix = NIFTI_DTYPES[datatype]
    if bitpix != expected_bitpix:
        raise BitpixError(f"{path}: bitpix {bitpix} does not match datatype {datatype} ({expected_bitpix})")
    (vox_offset,) = struct.unpack_from("<f", hdr, 108)
    if not np.isfinite(vox_offset) or vox_offset < 352 or vox_offset != int(vox_offset):
        raise VoxOffsetError(f"{path}: vox_offset {vox_offset} must be an integer >= 352")
    slope, inter = struct.unpack_from("<2f", hdr, 112)
    if slope == 0 or not np.isfinite(slope):
        slope, inter = 1.0, 0.0  # NIfTI convention: scl_slope 0 means unscaled
    pixdim = struct.unpack_from("<8f", hdr, 76)
    return VolumeFile(str(path), "nifti1", dims, np.dtype(np_dtype).name, float(slope), float(inter),
                      int(vox_offset), tuple(float(p) for p in pixdim[1:4]))


def read_raw_header(path):
    raw, side = _raw_paths(path)
    try:
        with open(side) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{side}: sidecar is not valid JSON ({exc})") from None
    dims = meta.get("dims")
    if not isinstance(dims, list) or len(dims) != 3 or any(not isinstance(d, int) or d <= 0 for d in dims):
        raise DimensionError(f"{side}: dims must be three positive integers, got {dims!r}")
    dtype = meta.get("dtype", "float32")
    if dtype not in _RAW_DTYPES:
        raise DtypeError(f"{side}: unsupported dtype {dtype!r}")
    spacing = meta.get("spacing_mm")
    return VolumeFile(raw, "raw", tuple(dims), dtype, spacing_mm=tuple(spacing) if spacing else None)


def read_header(path):
    fmt = _detect_format(path)
    return read_nifti_header(path) if fmt == "nifti1" else read_raw_header(path)


def read_volume(file):
    """Load a volume as ``(1, X, Y, Z)`` float32; NIfTI slope/intercept applied."""
    vf = file if isinstance(file, VolumeFile) else read_header(file)
    np_dtype = np.dtype(_RAW_DTYPES.get(vf.dtype, vf.dtype)).newbyteorder("<")
    count = int(np.prod(vf.dims))
    with open(vf.path, "rb") as fh:
        fh.seek(vf.offset)
        payload = fh.read()
    need = count * np_dtype.itemsize
    if len(payload) < need or (vf.format == "raw" and len(payload) != need):
        raise TruncatedPayloadError(
            f"{vf.path}: payload holds {len(payload)} bytes, dims {vf.dims} need {need}")
    data = np.frombuffer(payload, dtype=np_dtype, count=count)
    vol = data.reshape(vf.dims[::-1]).transpose(2, 1, 0)
    out = vol.astype(np.float32)
    if vf.format == "nifti1" and (vf.slope != 1.0 or vf.intercept != 0.0):
        out = (vol.astype(np.float64) * vf.slope + vf.intercept).astype(np.float32)
    return np.ascontiguousarray(out)[None]


def write_volume(vol, path, format="raw", spacing_mm=None):
    """Write a single-channel volume as raw float32 + JSON sidecar."""
    if format != "raw":
        raise ValueError("only the raw+sidecar format can be written")
    vol = np.asarray(vol)
    if vol.ndim == 4:
        if vol.shape[0] != 1:
            raise ValueError(f"expected a single-channel volume, got shape {vol.shape}")
        vol = vol[0]
    if vol.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {vol.shape}")
    raw, side = _raw_paths(path)
    d = os.path.dirname(raw)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(raw, "wb") as fh:
        fh.write(np.ascontiguousarray(vol.transpose(2, 1, 0), dtype="<f4").tobytes())
    meta = {"dims": [int(n) for n in vol.shape], "dtype": "float32"}
    if spacing_mm is not None:
        meta["spacing_mm"] = [float(s) for s in spacing_mm]
    with open(side, "w") as fh:
        json.dump(meta, fh, sort_keys=True)
    return VolumeFile(raw, "raw", tuple(int(n) for n in vol.shape), "float32",
                      spacing_mm=tuple(spacing_mm) if spacing_mm else None)


# --- intensity --------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessSpec:
    hu_clamp: tuple | None = None
    normalize: bool = True

    def __post_init__(self):
        if self.hu_clamp is not None:
            lo, hi = self.hu_clamp
            if not lo < hi:
                raise ValueError(f"clamp range must satisfy lo < hi, got {self.hu_clamp}")


def preprocess(vol, spec):
    """Clamp to ``hu_clamp`` (if any), then map the range affinely onto [0, 255].

    Without a clamp range the volume's own min/max are used.
    """
    v = np.asarray(vol, dtype=np.float64)
    if spec.hu_clamp is not None:
        lo, hi = spec.hu_clamp
        v = np.clip(v, lo, hi)
    else:
        lo, hi = float(v.min()), float(v.max())
    if spec.normalize:
        v = (v - lo) * (255.0 / (hi - lo)) if hi > lo else np.zeros_like(v)
    return v.astype(np.float32)


# --- cubic resampling ---------------------------------------------------------------

KEYS_A = -0.5


def keys_kernel(s, a=KEYS_A):
    """Keys cubic convolution kernel."""
    s = np.abs(np.asarray(s, dtype=np.float64))
    out = np.zeros_like(s)
    near = s <= 1
    far = (s > 1) & (s < 2)
    out[near] = (a + 2) * s[near] ** 3 - (a + 3) * s[near] ** 2 + 1
    out[far] = a * s[far] ** 3 - 5 * a * s[far] ** 2 + 8 * a * s[far] - 4 * a
    return out


def resample_matrix(n_in, n_out):
    """Dense ``(n_out, n_in)`` cubic interpolation matrix, centre-aligned, clamp-to-edge."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in))
    for k in range(-1, 3):
        idx = base + k
        w = keys_kernel(src - idx)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return m


SUPPORTED_FACTORS = (Fraction(1, 2), Fraction(1), Fraction(2))


def tricubic_resample(vol, factor):
    """Separable cubic-convolution resampling by ``factor`` in {1/2, 1, 2}.

    Works on ``(X,Y,Z)``, ``(C,X,Y,Z)`` or batched volumes; the last three
    axes are resampled. Direct evaluation at the target points, no
    pre-filtering.
    """
    f = Fraction(factor).limit_denominator(16)
    if f not in SUPPORTED_FACTORS:
        raise ValueError(f"unsupported resampling factor {factor}; use 1/2, 1 or 2")
    v = np.asarray(vol)
    if f == 1:
        return v.copy()
    dt = v.dtype if np.issubdtype(v.dtype, np.floating) else np.float64
    out = v.astype(np.float64)
    for ax in (-3, -2, -1):
        n_in = out.shape[ax]
        n_out = int(round(f * n_in))
        if n_out < 1:
            raise ValueError(f"axis of length {n_in} cannot be resampled by {factor}")
        m = resample_matrix(n_in, n_out)
        out = np.moveaxis(np.tensordot(m, np.moveaxis(out, ax, 0), axes=1), 0, ax)
    return out.astype(dt)


def degrade(hr, scale=2):
    """Low-resolution counterpart of ``hr`` by cubic downsampling."""
    return tricubic_resample(hr, Fraction(1, scale))


# --- synthetic data ----------------------------------------------------------------

def _rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def make_phantom(dims=(64, 64, 64), n_blobs=800, seed=0, sigma_range=(0.5, 1.5)):
    """Random oriented anisotropic Gaussian blobs over a smooth background, in [0, 255].

    Returns a ``(1, X, Y, Z)`` float32 volume; identical for identical seeds.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 32:
        raise ValueError(f"phantom dims must be three extents >= 32, got {dims}")
    rng = np.random.default_rng(seed)
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    unit = np.meshgrid(*[a / (n - 1) for a, n in zip(axes, dims)], indexing="ij")
    freqs = rng.uniform(0.5, 1.5, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    vol = 0.5 + 0.15 * sum(np.cos(np.pi * f * u + p) for f, u, p in zip(freqs, unit, phases))
    for _ in range(int(n_blobs)):
        centre = rng.uniform(0, 1, size=3) * (np.array(dims) - 1)
        sig = rng.uniform(*sigma_range, size=3)
        rot = _rotation(rng)
        amp = rng.uniform(-1.0, 1.0)
        # blob support truncated at 4 sigma
        reach = 4.0 * sig.max()
        lo = np.maximum(np.floor(centre - reach).astype(int), 0)
        hi = np.minimum(np.ceil(centre + reach).astype(int) + 1, dims)
        box = np.stack(np.meshgrid(*[axes[k][lo[k]:hi[k]] for k in range(3)], indexing="ij"), axis=-1)
        d = (box - centre) @ rot
        vol[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += amp * np.exp(-0.5 * np.sum((d / sig) ** 2, axis=-1))
    lo, hi = vol.min(), vol.max()
    vol = (vol - lo) * (255.0 / (hi - lo))
    return np.clip(vol, 0, 255).astype(np.float32)[None]
