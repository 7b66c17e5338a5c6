"""The "PRAS" raster container and PNG rendering.

File layout (all little-endian)::

    offset  size  field
    0       4     magic b"PRAS"
    4       2     version (u16, currently 1)
    6       2     layout (u16, see Layout)
    8       4     width (u32)
    12      4     height (u32)
    16      ...   float32 payload, row-major, channels interleaved

Values are held as float64 in memory and rounded to float32 on write, so
``write(read(f))`` reproduces ``f`` byte for byte.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import decomp

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_SIZE",
    "Layout",
    "PolRaster",
    "RasterFormatError",
    "BadMagicError",
    "TruncatedPayloadError",
    "UnknownVersionError",
    "UnknownLayoutError",
    "write",
    "read",
    "encode",
    "decode",
    "from_covariance",
    "to_covariance",
    "render_png",
    "export_png",
    "PNG_MODES",
    "ZONE_PALETTE",
]

MAGIC = b"PRAS"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")
HEADER_SIZE = _HEADER.size  # 16

# relative eigenvalue error that float32 rounding of the nine planes can cause
FLOAT32_EIG_TOL = 1e-6
DB_RANGE = 25.0
WHITE_PERCENTILE = 97.0
PNG_MODES = ("gray_db", "pauli", "freeman", "halpha_zones")

# zone id (1-8) -> RGB; index 0 is unused/black
ZONE_PALETTE = np.array(
    [
        [0, 0, 0],
        [128, 0, 128],  # 1 high-entropy multiple
        [0, 128, 0],  # 2 high-entropy vegetation
        [255, 0, 0],  # 3 medium-entropy multiple
        [144, 238, 144],  # 4 medium-entropy vegetation
        [0, 191, 255],  # 5 medium-entropy surface
        [255, 165, 0],  # 6 low-entropy multiple
        [255, 255, 0],  # 7 low-entropy dipole
        [0, 0, 255],  # 8 low-entropy surface
    ],
    dtype=np.uint8,
)


class Layout(enum.IntEnum):
    GRAY1 = 1
    COV9 = 2
    CLASS1 = 3
    PARAM9 = 4

    @property
    def channels(self) -> int:
        return 9 if self in (Layout.COV9, Layout.PARAM9) else 1


class RasterFormatError(ValueError):
    """Base class for malformed PRAS files."""


class BadMagicError(RasterFormatError):
    pass


class TruncatedPayloadError(RasterFormatError):
    pass


class UnknownVersionError(RasterFormatError):
    pass


class UnknownLayoutError(RasterFormatError):
    pass


@dataclass
class PolRaster:
    """A ``(height, width, channels)`` float64 image with a declared layout."""

    layout: Layout
    data: np.ndarray

    def __post_init__(self):
        self.layout = Layout(self.layout)
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] != self.layout.channels:
            raise ValueError(
                f"{self.layout.name} needs (H, W, {self.layout.channels}) data, got {np.shape(self.data)}"
            )
        if self.layout == Layout.COV9 and np.any(data[..., :3] < 0):
            raise ValueError("COV9 diagonal channels must be non-negative")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def plane(self) -> np.ndarray:
        """The single channel of a GRAY1 / CLASS1 raster as ``(H, W)``."""
        if self.layout.channels != 1:
            raise ValueError(f"{self.layout.name} has {self.layout.channels} channels")
        return self.data[..., 0]


def encode(raster: PolRaster) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, int(raster.layout), raster.width, raster.height)
    return header + raster.data.astype("<f4").tobytes(order="C")


def decode(blob: bytes) -> PolRaster:
    if bytes(blob[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(blob[:4])!r}")
    if len(blob) < HEADER_SIZE:
        raise TruncatedPayloadError("truncated payload: incomplete header")
    _, version, layout, width, height = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise UnknownVersionError(f"unknown version {version}")
    try:
        layout = Layout(layout)
    except ValueError:
        raise UnknownLayoutError(f"unknown layout {layout}") from None
    n = width * height * layout.channels
    expected = HEADER_SIZE + 4 * n
    if len(blob) < expected:
        raise TruncatedPayloadError(f"truncated payload: {len(blob)} of {expected} bytes")
    if len(blob) > expected:
        raise RasterFormatError(f"{len(blob) - expected} trailing bytes after payload")
    payload = np.frombuffer(blob, dtype="<f4", count=n, offset=HEADER_SIZE)
    data = payload.astype(np.float64).reshape(height, width, layout.channels)
    return PolRaster(layout, data)


def write(path, raster: PolRaster) -> None:
    Path(path).write_bytes(encode(raster))


def read(path) -> PolRaster:
    return decode(Path(path).read_bytes())


def from_covariance(cov: np.ndarray) -> PolRaster:
    """Pack ``(H, W, 3, 3)`` Hermitian matrices as COV9."""
    cov = np.asarray(cov)
    planes = [
        cov[..., 0, 0].real, cov[..., 1, 1].real, cov[..., 2, 2].real,
        cov[..., 0, 1].real, cov[..., 0, 1].imag,
        cov[..., 0, 2].real, cov[..., 0, 2].imag,
        cov[..., 1, 2].real, cov[..., 1, 2].imag,
    ]
    return PolRaster(Layout.COV9, np.stack(planes, axis=-1))


def to_covariance(raster: PolRaster, repair: bool = False) -> np.ndarray:
    """Unpack a COV9 raster into ``(H, W, 3, 3)`` complex Hermitian matrices.

    float32 storage can push the smallest eigenvalue of a (near) singular
    matrix slightly below zero.  With ``repair`` such eigenvalues, when no
    lower than ``-FLOAT32_EIG_TOL * trace``, are clipped to zero; larger
    violations are left for the caller to reject.
    """
    if raster.layout != Layout.COV9:
        raise ValueError(f"expected a COV9 raster, got {raster.layout.name}")
    d = raster.data
    c = np.zeros(d.shape[:2] + (3, 3), dtype=np.complex128)
    for i in range(3):
        c[..., i, i] = d[..., i]
    c[..., 0, 1] = d[..., 3] + 1j * d[..., 4]
    c[..., 0, 2] = d[..., 5] + 1j * d[..., 6]
    c[..., 1, 2] = d[..., 7] + 1j * d[..., 8]
    c[..., 1, 0] = np.conj(c[..., 0, 1])
    c[..., 2, 0] = np.conj(c[..., 0, 2])
    c[..., 2, 1] = np.conj(c[..., 1, 2])
    return _clip_rounding(c) if repair else c


def _clip_rounding(c: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(c)
    tr = np.clip(np.real(np.trace(c, axis1=-2, axis2=-1)), 0.0, None)
    fix = (vals[..., 0] < 0) & (vals[..., 0] >= -FLOAT32_EIG_TOL * tr)
    if not np.any(fix):
        return c
    v = vecs[fix]
    lam = np.clip(vals[fix], 0.0, None)
    out = c.copy()
    out[fix] = (v * lam[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))
    return out


def _db(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.clip(x, 0.0, None))


def _to_byte(db: np.ndarray, top: float) -> np.ndarray:
    scaled = (np.clip(db, top - DB_RANGE, top) - (top - DB_RANGE)) / DB_RANGE
    return np.round(scaled * 255.0).astype(np.uint8)


def _color(channels) -> np.ndarray:
    dbs = [_db(c) for c in channels]
    pooled = np.concatenate([d[np.isfinite(d)] for d in dbs])
    top = float(np.percentile(pooled, WHITE_PERCENTILE)) if pooled.size else 0.0
    return np.stack([_to_byte(d, top) for d in dbs], axis=-1)


def render_png(raster: PolRaster, mode: str) -> np.ndarray:
    """8-bit pixel array for ``mode``: ``(H, W)`` gray or ``(H, W, 3)`` RGB.

    * ``gray_db``: GRAY1, ``[-25, 0]`` dB to ``[0, 255]``.
    * ``pauli`` / ``freeman``: COV9, every channel in dB against a white point
      at the 97th percentile of all three channels pooled, 25 dB range.
      Freeman maps double bounce, volume, surface to red, green, blue.
    * ``halpha_zones``: CLASS1 holding zone ids 1-8, fixed palette.
    """
    if mode not in PNG_MODES:
        raise ValueError(f"unknown PNG mode {mode!r}; expected one of {PNG_MODES}")
    need = {"gray_db": Layout.GRAY1, "pauli": Layout.COV9, "freeman": Layout.COV9,
            "halpha_zones": Layout.CLASS1}[mode]
    if raster.layout != need:
        raise ValueError(f"mode {mode!r} needs a {need.name} raster, got {raster.layout.name}")
    if mode == "gray_db":
        return _to_byte(_db(raster.plane), 0.0)
    if mode == "halpha_zones":
        zones = raster.plane
        ids = np.rint(zones).astype(np.int64)
        if np.any(ids != zones) or np.any((ids < 1) | (ids > 8)):
            raise ValueError("zone raster must hold integers 1-8")
        return ZONE_PALETTE[ids]
    cov = to_covariance(raster)
    if mode == "pauli":
        return _color(decomp.pauli_rgb(cov))
    fd = decomp.freeman_durden(cov)
    return _color((fd.pd, fd.pv, fd.ps))


def export_png(raster: PolRaster, mode: str, path) -> None:
    """Write :func:`render_png` output as an 8-bit PNG (no metadata, deterministic)."""
    Image.fromarray(render_png(raster, mode)).save(path, format="PNG")
