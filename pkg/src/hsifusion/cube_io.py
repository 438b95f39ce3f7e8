"""Hyperspectral cube containers and their on-disk formats.

HSC1 cube layout (little-endian)::

    0   4s   magic b"HSC1"
    4   u32  version (1)
    8   u32  height
    12  u32  width
    16  u32  bands
    20  f32  wavelengths[bands]   (nm, 0 = unknown)
    ..  f32  samples[bands, height, width]   band slowest

HSCK checkpoint layout (little-endian)::

    0   4s   magic b"HSCK"
    4   u32  version (1)
    8   u32  step
    12  u32  record count
        per record: u32 name length, utf-8 name, u32 ndim, u32 dims[ndim],
                    f32 data (C order)
    ..  u32  CRC-32 of every preceding byte
"""

import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    ShortReadError,
    UnsupportedVersionError,
    ValidationError,
)

CUBE_MAGIC = b"HSC1"
CKPT_MAGIC = b"HSCK"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIII")
_U32 = struct.Struct("<I")


@dataclass
class HyperCube:
    """An H x W x S spectral image stored band-sequentially.

    ``data`` has shape ``(bands, height, width)``; ``wavelengths`` holds one
    entry per band in nanometres (0 when unknown).
    """

    data: np.ndarray
    wavelengths: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValidationError(
                f"cube data must be 3-D (bands, height, width), got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        if self.wavelengths is None:
            self.wavelengths = np.zeros(self.data.shape[0], dtype=np.float32)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float32).reshape(-1)

    @property
    def bands(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def shape(self):
        """(height, width, bands), the order used in reports."""
        return (self.height, self.width, self.bands)

    def validate(self):
        if min(self.data.shape) <= 0:
            raise ValidationError(f"cube dimensions must be positive, got {self.shape}")
        if self.wavelengths.shape != (self.bands,):
            raise ValidationError(
                f"expected {self.bands} wavelengths, got {self.wavelengths.size}")
        if np.any(self.wavelengths < 0) or not np.all(np.isfinite(self.wavelengths)):
            raise ValidationError("wavelengths must be finite and nonnegative")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("cube contains non-finite samples")
        return self


@dataclass
class SpectralResponse:
    """Row-normalized s x S matrix mapping hyperspectral to multispectral bands."""

    weights: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValidationError("spectral response must be a 2-D matrix")

    @property
    def out_bands(self):
        return self.weights.shape[0]

    @property
    def in_bands(self):
        return self.weights.shape[1]

    def validate(self):
        if np.any(self.weights < 0):
            raise ValidationError("spectral response weights must be nonnegative")
        sums = self.weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValidationError(f"spectral response rows must sum to 1, got {sums}")
        return self

    @classmethod
    def from_matrix(cls, weights, names=()):
        """Normalize each row of a nonnegative matrix to sum 1."""
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w < 0):
            raise ValidationError("spectral response weights must be nonnegative")
        sums = w.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise ValidationError("spectral response row sums to zero")
        return cls(w / sums, tuple(names)).validate()


def write_cube(cube, path):
    """Write ``cube`` to ``path`` in HSC1 format (samples stored as binary32)."""
    cube.validate()
    path = Path(path)
    header = _HEADER.pack(CUBE_MAGIC, FORMAT_VERSION, cube.height, cube.width, cube.bands)
    payload = (header
               + cube.wavelengths.astype("<f4").tobytes()
               + np.ascontiguousarray(cube.data, dtype="<f4").tobytes())
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write cube to {path}: {exc}") from exc


def read_cube(path):
    """Read an HSC1 file. Samples come back as float32."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ShortReadError("file shorter than magic", path)
    if raw[:4] != CUBE_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {CUBE_MAGIC!r}", path)
    if len(raw) < _HEADER.size:
        raise ShortReadError("truncated header", path)
    _, version, height, width, bands = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", path)
    if min(height, width, bands) == 0:
        raise ShortReadError(f"zero dimension in header ({height}, {width}, {bands})", path)
    expected = _HEADER.size + 4 * bands + 4 * height * width * bands
    if len(raw) < expected:
        raise ShortReadError(f"payload has {len(raw)} bytes, expected {expected}", path)
    wl = np.frombuffer(raw, dtype="<f4", count=bands, offset=_HEADER.size)
    data = np.frombuffer(raw, dtype="<f4", count=height * width * bands,
                         offset=_HEADER.size + 4 * bands)
    return HyperCube(data.astype(np.float32).reshape(bands, height, width),
                     wl.astype(np.float32))


def load_spectral_response(path, cube_wavelengths):
    """Resample a tabulated response (``wavelength,<name>,...``) onto cube bands.

    Each curve is linearly interpolated at ``cube_wavelengths`` (zero outside the
    tabulated range) and the rows are normalized to sum 1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows or rows[0][0].strip().lower() != "wavelength" or len(rows[0]) < 2:
        raise ValidationError(f"{path}: header must be 'wavelength,<name>,...'")
    names = tuple(c.strip() for c in rows[0][1:])
    try:
        table = np.array([[float(c) for c in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric entry ({exc})") from exc
    if table.ndim != 2 or table.shape[0] < 2 or table.shape[1] != len(names) + 1:
        raise ValidationError(f"{path}: need at least 2 rows of {len(names) + 1} columns")
    wl = table[:, 0]
    if np.any(np.diff(wl) <= 0):
        raise ValidationError(f"{path}: wavelengths must be strictly increasing")
    curves = table[:, 1:]
    if np.any(curves < 0):
        raise ValidationError(f"{path}: negative response value")
    query = np.asarray(cube_wavelengths, dtype=np.float64)
    weights = np.stack([np.interp(query, wl, curves[:, j], left=0.0, right=0.0)
                        for j in range(curves.shape[1])])
    sums = weights.sum(axis=1)
    for name, total in zip(names, sums):
        if total <= 0:
            raise ValidationError(
                f"{path}: response '{name}' is zero at every cube wavelength")
    return SpectralResponse(weights / sums[:, None], names).validate()


def to_bytes_rgb(cube, r, g, b):
    """H x W x 3 uint8 array; each channel is clamp(v, 0, 1) * 255 rounded half-up."""
    for idx in (r, g, b):
        if not 0 <= idx < cube.bands:
            raise ValidationError(f"band index {idx} out of range for {cube.bands} bands")
    planes = np.stack([cube.data[i] for i in (r, g, b)], axis=-1).astype(np.float64)
    return np.floor(np.clip(planes, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_pseudocolor(cube, r, g, b, path):
    """Save bands (r, g, b) of ``cube`` as an 8-bit RGB PNG."""
    from PIL import Image

    Image.fromarray(to_bytes_rgb(cube, r, g, b), mode="RGB").save(Path(path), format="PNG")


def write_checkpoint(path, step, records):
    """Serialize ``records`` (ordered name -> array) to the HSCK format."""
    chunks = [struct.pack("<4sIII", CKPT_MAGIC, FORMAT_VERSION, step, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        key = name.encode("utf-8")
        chunks.append(_U32.pack(len(key)) + key)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + _U32.pack(zlib.crc32(body)))


def read_checkpoint(path):
    """Return ``(step, records)`` from an HSCK file."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20:
        raise CheckpointError("checkpoint truncated", path)
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}", path)
    body, (crc,) = raw[:-4], _U32.unpack(raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch", path)
    _, version, step, count = struct.unpack_from("<4sIII", body)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version}", path)
    pos = 16
    records = {}
    try:
        for _ in range(count):
            (nlen,) = _U32.unpack_from(body, pos)
            name = body[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (ndim,) = _U32.unpack_from(body, pos)
            shape = struct.unpack_from(f"<{ndim}I", body, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise CheckpointError(f"record '{name}' truncated", path)
            records[name] = np.frombuffer(body, "<f4", size, pos).astype(np.float32).reshape(shape)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed record table ({exc})", path) from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after records", path)
    return step, records
