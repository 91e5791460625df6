"""LiDAR frame ingestion (KITTI ``.bin`` and CSV) and scanner-rate arithmetic."""

from __future__ import annotations

import logging
import math
import numbers
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from .errors import DomainError, EmptyFrameError, MalformedFrameError, ParseError

log = logging.getLogger(__name__)

KITTI_POINT_BYTES = 16
_KITTI_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    intensity: float


@dataclass
class PointCloud:
    """Ordered point cloud backed by an ``(n, 4)`` float32 array of x, y, z, intensity.

    ``dropped_invalid`` counts returns discarded during parsing because a
    coordinate was NaN or infinite.
    """

    data: np.ndarray
    source_id: str = ""
    dropped_invalid: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[1] != 4:
            data = data.reshape(-1, 4)
        self.data = data

    @classmethod
    def from_points(cls, points, source_id: str = "") -> "PointCloud":
        arr = np.array([[p.x, p.y, p.z, p.intensity] for p in points], dtype=np.float32)
        return cls(arr.reshape(-1, 4), source_id)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, i: int) -> Point:
        x, y, z, r = (float(v) for v in self.data[i])
        return Point(x, y, z, r)

    def __iter__(self) -> Iterator[Point]:
        for i in range(len(self)):
            yield self[i]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[:, 3]


def _sanitize(data: np.ndarray, source_id: str) -> PointCloud:
    finite = np.isfinite(data[:, :3]).all(axis=1)
    dropped = int(np.count_nonzero(~finite))
    if dropped:
        log.debug("%s: dropped %d non-finite points", source_id or "<frame>", dropped)
        data = data[finite]
    r = data[:, 3]
    bad = ~((r >= 0.0) & (r <= 1.0))
    if bad.any():
        log.debug("%s: clamped %d intensity values into [0, 1]", source_id or "<frame>",
                  int(np.count_nonzero(bad)))
        data = data.copy()
        data[:, 3] = np.nan_to_num(np.clip(r, 0.0, 1.0), nan=0.0)
    return PointCloud(data, source_id, dropped)


def parse_kitti_bin(raw: bytes, source_id: str = "") -> PointCloud:
    """Decode consecutive little-endian float32 quadruples (x, y, z, r)."""
    if len(raw) == 0:
        raise EmptyFrameError("empty KITTI frame")
    if len(raw) % KITTI_POINT_BYTES:
        raise MalformedFrameError(
            f"frame length {len(raw)} is not a multiple of {KITTI_POINT_BYTES} bytes")
    data = np.frombuffer(raw, dtype=_KITTI_DTYPE).reshape(-1, 4).astype(np.float32)
    return _sanitize(data, source_id)


def to_kitti_bin(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.data, dtype=_KITTI_DTYPE).tobytes()


def parse_csv_points(text: str, source_id: str = "") -> PointCloud:
    """Parse ``x,y,z,intensity`` lines; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise ParseError(lineno, f"expected 4 fields, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ParseError(lineno, f"non-numeric field in {line!r}") from None
    data = np.array(rows, dtype=np.float32).reshape(-1, 4)
    return _sanitize(data, source_id)


def read_frame(path: str) -> PointCloud:
    """Read a ``.bin`` (KITTI) or ``.csv`` frame from disk, dispatching on suffix."""
    if str(path).lower().endswith(".csv"):
        with open(path, encoding="utf-8") as f:
            return parse_csv_points(f.read(), str(path))
    with open(path, "rb") as f:
        return parse_kitti_bin(f.read(), str(path))


@dataclass(frozen=True)
class LidarSpec:
    scanners: int
    points_per_second: float
    rpm: float
    vertical_fov: float

    def __post_init__(self):
        for name in ("scanners", "points_per_second", "rpm", "vertical_fov"):
            v = getattr(self, name)
            if not (isinstance(v, numbers.Real) and math.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be strictly positive, got {v!r}")


HDL64E = LidarSpec(scanners=64, points_per_second=1_330_000, rpm=600, vertical_fov=26.90)


@dataclass(frozen=True)
class ScanRates:
    frames_per_second: float
    points_per_frame: float
    azimuthal_resolution: float
    polar_resolution: float
    exact: dict = field(default_factory=dict, repr=False, compare=False)


def scan_rates(spec: LidarSpec) -> ScanRates:
    """Frame rate R/60, points per frame 60M/R, azimuth step 360NR/(60M), polar step phi/N."""
    n = Fraction(spec.scanners)
    m = Fraction(spec.points_per_second)
    r = Fraction(spec.rpm)
    phi = Fraction(spec.vertical_fov)
    exact = {
        "frames_per_second": r / 60,
        "points_per_frame": 60 * m / r,
        "azimuthal_resolution": 360 * n * r / (60 * m),
        "polar_resolution": phi / n,
    }
    return ScanRates(**{k: float(v) for k, v in exact.items()}, exact=exact)
