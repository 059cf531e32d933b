"""Byte-level file formats: HISOPVOX grids, HISOPPAR parameters, PGM heatmaps, CSV reports.

HISOPVOX
    8 bytes   magic b"HISOPVOX"
    12 bytes  extents X, Y, Z as little-endian uint32
    1 byte    dtype: 0 = uint16 labels, 1 = float64 values
    payload   X*Y*Z little-endian values in C order (last axis fastest)

HISOPPAR
    8 bytes   magic b"HISOPPAR"
    4 bytes   array count N as little-endian uint32
    per array little-endian uint32 rank R, then R uint32 extents
    payload   every array's float64 little-endian values in C order, in header order

PGM
    binary P5, header "P5\\n<width> <height>\\n255\\n", one byte per pixel, rows top to bottom
"""

from __future__ import annotations

from pathlib import Path
from typing import Final, Sequence

import numpy as np
import pandas as pd

from utils.common import ArgumentError, FormatError

VOX_MAGIC: Final[bytes] = b"HISOPVOX"
PAR_MAGIC: Final[bytes] = b"HISOPPAR"

VOX_LABELS: Final[int] = 0
VOX_REALS: Final[int] = 1
VOX_PAYLOAD_DTYPES: Final[dict[int, str]] = {VOX_LABELS: "<u2", VOX_REALS: "<f8"}

VOX_HEADER: Final[np.dtype] = np.dtype(
    [("magic", "S8"), ("extents", "<u4", (3,)), ("dtype", "u1")]
)

CSV_FLOAT_FORMAT: Final[str] = "%.6f"


#voxel grids
def encode_voxel_grid(values: np.ndarray) -> bytes:
    """Serialize a 3D grid; integer arrays become uint16 labels, floats stay float64."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ArgumentError(f"Voxel grids must be 3D, got shape {values.shape}")
    if np.issubdtype(values.dtype, np.integer) or values.dtype == np.bool_:
        if values.size and (values.min() < 0 or values.max() > np.iinfo(np.uint16).max):
            raise ArgumentError(f"Labels must fit uint16, got range [{values.min()}, {values.max()}]")
        code = VOX_LABELS
    else:
        code = VOX_REALS
    header = np.zeros((), dtype=VOX_HEADER)
    header["magic"] = VOX_MAGIC
    header["extents"] = values.shape
    header["dtype"] = code
    payload = np.ascontiguousarray(values, dtype=VOX_PAYLOAD_DTYPES[code])
    return header.tobytes() + payload.tobytes()


def decode_voxel_grid(data: bytes) -> np.ndarray:
    """Parse HISOPVOX bytes; labels come back as int64, reals as float64.

    Raises:
        FormatError: On a bad magic, dtype byte or payload length
    """
    if len(data) < VOX_HEADER.itemsize:
        raise FormatError(f"HISOPVOX data too short for a header: {len(data)} bytes")
    header = np.frombuffer(data, dtype=VOX_HEADER, count=1)[0]
    if bytes(header["magic"]) != VOX_MAGIC:
        raise FormatError(f"Bad HISOPVOX magic {bytes(data[:8])!r}")
    code = int(header["dtype"])
    if code not in VOX_PAYLOAD_DTYPES:
        raise FormatError(f"Unknown HISOPVOX dtype byte {code}")
    extents = tuple(int(e) for e in header["extents"])
    payload_dtype = np.dtype(VOX_PAYLOAD_DTYPES[code])
    expected = int(np.prod(extents)) * payload_dtype.itemsize
    payload = data[VOX_HEADER.itemsize :]
    if len(payload) != expected:
        raise FormatError(f"HISOPVOX payload is {len(payload)} bytes, expected {expected} for {extents}")
    values = np.frombuffer(payload, dtype=payload_dtype).reshape(extents)
    return values.astype(np.int64 if code == VOX_LABELS else np.float64)


def write_voxel_grid(values: np.ndarray, path: Path) -> int:
    data = encode_voxel_grid(values)
    Path(path).write_bytes(data)
    return len(data)


def read_voxel_grid(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Voxel grid not found: {path}")
    return decode_voxel_grid(path.read_bytes())


#parameter files
def encode_params(arrays: Sequence[np.ndarray]) -> bytes:
    arrays = [np.ascontiguousarray(a, dtype="<f8") for a in arrays]
    header = [np.array([len(arrays)], dtype="<u4").tobytes()]
    for array in arrays:
        header.append(np.array([array.ndim, *array.shape], dtype="<u4").tobytes())
    return PAR_MAGIC + b"".join(header) + b"".join(a.tobytes() for a in arrays)


def decode_params(data: bytes) -> list[np.ndarray]:
    """Parse HISOPPAR bytes into float64 arrays.

    Raises:
        FormatError: On a bad magic, truncated header or payload length mismatch
    """
    if data[: len(PAR_MAGIC)] != PAR_MAGIC:
        raise FormatError(f"Bad HISOPPAR magic {bytes(data[:8])!r}")
    offset = len(PAR_MAGIC)

    def read_u4(count: int) -> list[int]:
        nonlocal offset
        end = offset + 4 * count
        if end > len(data):
            raise FormatError("HISOPPAR header is truncated")
        values = np.frombuffer(data[offset:end], dtype="<u4").tolist()
        offset = end
        return values

    (count,) = read_u4(1)
    shapes = []
    for _ in range(count):
        (rank,) = read_u4(1)
        shapes.append(tuple(read_u4(rank)))
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    if len(data) - offset != expected:
        raise FormatError(f"HISOPPAR payload is {len(data) - offset} bytes, expected {expected}")
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape)) * 8
        arrays.append(np.frombuffer(data[offset : offset + size], dtype="<f8").reshape(shape).astype(np.float64))
        offset += size
    return arrays


#images
def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ArgumentError(f"PGM images must be 2D uint8, got {image.dtype} {image.shape}")
    height, width = image.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + image.tobytes()


def affinity_to_gray(values: np.ndarray) -> np.ndarray:
    """Map affinities in [-1, 1] linearly to 0..255."""
    scaled = np.rint((np.clip(values, -1.0, 1.0) + 1.0) / 2.0 * 255.0)
    return scaled.astype(np.uint8)


#reports
def metrics_frame(rows: Sequence[dict[str, object]]) -> pd.DataFrame:
    if not rows:
        raise ArgumentError("Cannot build a metrics table from an empty list of runs")
    return pd.DataFrame(list(rows))


def write_metrics_csv(rows: Sequence[dict[str, object]], path: Path) -> pd.DataFrame:
    df = metrics_frame(rows)
    df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return df
