"""Spherical-view binning and the 14-channel input tensor.

Points inside the azimuth window are grouped into ``rows x columns`` cells.
Each occupied cell contributes its nearest and its furthest return, seven
features apiece: ``x, y, z, theta, phi, rho, r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, UndefinedAngleError
from .pointcloud import Point, PointCloud

N_FEATURES = 7
N_CHANNELS = 2 * N_FEATURES
# channel indices inside one 7-feature half
CH_X, CH_Y, CH_Z, CH_THETA, CH_PHI, CH_RHO, CH_R = range(N_FEATURES)
NEAR_RHO = CH_RHO
FAR_RHO = N_FEATURES + CH_RHO


@dataclass(frozen=True)
class GridConfig:
    azimuth_min: float = -45.0
    azimuth_max: float = 45.0
    azimuth_bin: float = 0.5
    rows: int = 64
    elevation_min: float = -24.9
    elevation_max: float = 2.0

    def __post_init__(self):
        if self.azimuth_bin <= 0 or self.azimuth_max <= self.azimuth_min:
            raise DomainError("azimuth window must be non-empty with a positive bin size")
        cols = (self.azimuth_max - self.azimuth_min) / self.azimuth_bin
        if abs(cols - round(cols)) > 1e-9:
            raise DomainError(f"azimuth span is not a whole number of bins ({cols})")
        if self.rows < 1:
            raise DomainError("rows must be positive")
        if not self.elevation_min < self.elevation_max:
            raise DomainError("elevation_min must be below elevation_max")

    @property
    def columns(self) -> int:
        return int(round((self.azimuth_max - self.azimuth_min) / self.azimuth_bin))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.columns

    @classmethod
    def toy(cls, columns: int = 36, rows: int = 16) -> "GridConfig":
        """Coarse grid spanning the same RoI, used for desk-scale training."""
        return cls(azimuth_bin=90.0 / columns, rows=rows)


def spherical_coords(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized (theta, phi, rho) in degrees/degrees/meters for an ``(n, 3)`` array.

    Theta is measured from +x toward +y and folded into (-180, 180].
    Rows with rho == 0 come back as NaN angles.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    horiz = np.hypot(x, y)
    rho = np.sqrt(horiz * horiz + z * z)
    theta = np.degrees(np.arctan2(y, x))
    theta = np.where(theta <= -180.0, 180.0, theta)
    phi = np.degrees(np.arctan2(z, horiz))
    undefined = rho == 0
    if undefined.any():
        theta = np.where(undefined, np.nan, theta)
        phi = np.where(undefined, np.nan, phi)
    return theta, phi, rho


def to_spherical(p: Point) -> tuple[float, float, float]:
    if not all(math.isfinite(v) for v in (p.x, p.y, p.z)):
        raise DomainError("point coordinates must be finite")
    theta, phi, rho = spherical_coords(np.array([[p.x, p.y, p.z]]))
    if rho[0] == 0:
        raise UndefinedAngleError("angles are undefined at the origin")
    return float(theta[0]), float(phi[0]), float(rho[0])


@dataclass(frozen=True)
class CellGrid:
    """Point indices grouped per cell in CSR layout.

    ``order[starts[k]:starts[k + 1]]`` lists the indices of cell ``k``
    (flat index ``row * columns + col``) in cloud order.
    ``cell_of_point`` holds the flat cell per point, -1 when the point was
    outside the RoI and -2 when it had no defined direction.
    """

    rows: int
    columns: int
    order: np.ndarray
    starts: np.ndarray
    cell_of_point: np.ndarray

    def cell(self, row: int, col: int) -> list[int]:
        k = row * self.columns + col
        return self.order[self.starts[k]:self.starts[k + 1]].tolist()

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.starts).reshape(self.rows, self.columns)

    @property
    def n_binned(self) -> int:
        return int(self.order.size)

    @property
    def n_outside(self) -> int:
        return int(np.count_nonzero(self.cell_of_point == -1))

    @property
    def n_invalid(self) -> int:
        return int(np.count_nonzero(self.cell_of_point == -2))


def _cell_index(theta, phi, cfg: GridConfig) -> np.ndarray:
    cols = cfg.columns
    valid = np.isfinite(theta)
    th = np.where(valid, theta, 0.0)
    ph = np.where(valid, phi, 0.0)
    in_az = (th >= cfg.azimuth_min) & (th < cfg.azimuth_max)
    in_el = (ph >= cfg.elevation_min) & (ph <= cfg.elevation_max)
    col = np.floor((th - cfg.azimuth_min) / cfg.azimuth_bin).astype(np.int64)
    col = np.clip(col, 0, cols - 1)
    span = cfg.elevation_max - cfg.elevation_min
    row = np.floor((ph - cfg.elevation_min) / span * cfg.rows).astype(np.int64)
    row = np.clip(row, 0, cfg.rows - 1)
    cell = np.where(in_az & in_el, row * cols + col, -1)
    return np.where(valid, cell, -2)


def _grid_from_angles(theta, phi, cfg: GridConfig) -> CellGrid:
    cell = _cell_index(theta, phi, cfg)
    n_cells = cfg.rows * cfg.columns
    inside = np.flatnonzero(cell >= 0)
    # stable sort keeps cloud order inside each cell
    order = inside[np.argsort(cell[inside], kind="stable")]
    counts = np.bincount(cell[inside], minlength=n_cells)
    starts = np.concatenate([[0], np.cumsum(counts)])
    return CellGrid(cfg.rows, cfg.columns, order, starts, cell)


def bin_points(cloud: PointCloud, cfg: GridConfig = GridConfig()) -> CellGrid:
    theta, phi, _ = spherical_coords(cloud.xyz)
    return _grid_from_angles(theta, phi, cfg)


def point_features(cloud: PointCloud) -> np.ndarray:
    """``(n, 7)`` float64 features (x, y, z, theta, phi, rho, r) per point."""
    theta, phi, rho = spherical_coords(cloud.xyz)
    return np.column_stack([cloud.data[:, :3].astype(np.float64), theta, phi, rho,
                            cloud.data[:, 3].astype(np.float64)])


def select_near_far(grid: CellGrid, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per flat cell, the index of the min-rho and max-rho point (-1 when empty).

    Ties in rho go to the lower point index.
    """
    n_cells = grid.rows * grid.columns
    near_of = np.full(n_cells, -1, dtype=np.int64)
    far_of = np.full(n_cells, -1, dtype=np.int64)
    idx = grid.order
    if idx.size == 0:
        return near_of, far_of
    cell = grid.cell_of_point[idx]
    r = rho[idx]
    for sign, dest in ((1.0, near_of), (-1.0, far_of)):
        ranked = idx[np.lexsort((idx, sign * r, cell))]
        ranked_cell = grid.cell_of_point[ranked]
        first = np.concatenate([[True], ranked_cell[1:] != ranked_cell[:-1]])
        dest[ranked_cell[first]] = ranked[first]
    return near_of, far_of


def build_input_tensor(grid: CellGrid, cloud: PointCloud,
                       features: np.ndarray | None = None) -> np.ndarray:
    """Return the ``(rows, columns, 14)`` float32 tensor; empty cells are all zero.

    Nearest and furthest are chosen by rho, ties going to the lower point index.
    ``features`` overrides the per-point features computed from ``cloud``.
    """
    out = np.zeros((grid.rows * grid.columns, N_CHANNELS), dtype=np.float32)
    if grid.order.size:
        feats = point_features(cloud) if features is None else features
        near_of, far_of = select_near_far(grid, feats[:, CH_RHO])
        occ = near_of >= 0
        out[occ, :N_FEATURES] = feats[near_of[occ]]
        out[occ, N_FEATURES:] = feats[far_of[occ]]
    return out.reshape(grid.rows, grid.columns, N_CHANNELS)


def preprocess(cloud: PointCloud, cfg: GridConfig = GridConfig()) -> np.ndarray:
    return build_input_tensor(bin_points(cloud, cfg), cloud)


@dataclass(frozen=True)
class UsageStats:
    point_usage_fraction: float
    cell_occupancy_fraction: float


def usage_stats(grid: CellGrid, tensor: np.ndarray, roi_point_count: int) -> UsageStats:
    if roi_point_count <= 0:
        raise DomainError("roi_point_count must be positive")
    counts = grid.counts
    if grid.n_binned > roi_point_count:
        raise DomainError("roi_point_count is smaller than the number of binned points")
    occupied = tensor[..., NEAR_RHO] > 0
    represented = int(np.minimum(counts, 2)[occupied].sum())
    return UsageStats(represented / roi_point_count, float(occupied.mean()))


def _rotated_binning(cloud: PointCloud, cfg: GridConfig, degrees: float):
    if cfg.azimuth_min + degrees <= -180.0 or cfg.azimuth_max + degrees > 180.0:
        raise DomainError(f"shifted azimuth window leaves (-180, 180] for {degrees} degrees")
    feats = point_features(cloud)
    if degrees == 0:
        return _grid_from_angles(feats[:, CH_THETA], feats[:, CH_PHI], cfg), feats
    theta = feats[:, CH_THETA] - degrees
    theta = np.where(theta <= -180.0, theta + 360.0, np.where(theta > 180.0, theta - 360.0, theta))
    a = math.radians(-degrees)
    c, s = math.cos(a), math.sin(a)
    x, y = feats[:, CH_X].copy(), feats[:, CH_Y].copy()
    feats[:, CH_X] = c * x - s * y
    feats[:, CH_Y] = s * x + c * y
    feats[:, CH_THETA] = theta
    return _grid_from_angles(theta, feats[:, CH_PHI], cfg), feats


def rotate_roi(cloud: PointCloud, cfg: GridConfig, degrees: float) -> np.ndarray:
    """Input tensor of the azimuth window shifted by ``degrees``.

    Binning runs on ``theta - degrees`` so a return at azimuth
    ``azimuth_min + degrees`` lands in column 0. The x/y features are turned
    by ``-degrees`` about z to stay consistent with the relabeled columns.
    """
    grid, feats = _rotated_binning(cloud, cfg, degrees)
    return build_input_tensor(grid, cloud, feats)


def preprocess_with_stats(cloud: PointCloud, cfg: GridConfig = GridConfig(),
                          degrees: float = 0.0) -> tuple[np.ndarray, UsageStats, CellGrid]:
    """Tensor plus usage statistics; the RoI point count is every valid point in the azimuth window."""
    grid, feats = _rotated_binning(cloud, cfg, degrees)
    tensor = build_input_tensor(grid, cloud, feats)
    theta = feats[:, CH_THETA]
    with np.errstate(invalid="ignore"):
        roi = int(np.count_nonzero((theta >= cfg.azimuth_min) & (theta < cfg.azimuth_max)))
    stats = usage_stats(grid, tensor, roi) if roi else UsageStats(0.0, 0.0)
    return tensor, stats, grid
