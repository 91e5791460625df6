"""Probability map -> drivable polygon -> top-view grid map.

Pipeline: threshold, keep the largest connected component, dilate with a
radius-1 disk, pick one boundary reference point per azimuth column, close
the polygon at the near edge of the map, and rasterize cell by cell.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DomainError, ShapeError
from .spherical import CH_X, CH_Y, FAR_RHO, N_FEATURES, NEAR_RHO, GridConfig

NOT_DRIVABLE, DRIVABLE, DONT_CARE = 0, 1, 2
PGM_VALUES = {NOT_DRIVABLE: 0, DRIVABLE: 255, DONT_CARE: 127}

CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_NEAR_TOL = 1e-7


def threshold_map(p: np.ndarray, thr: float = 0.5) -> np.ndarray:
    if not 0.0 < thr < 1.0:
        raise DomainError(f"threshold must lie in (0, 1), got {thr}")
    return np.asarray(p) >= thr


def largest_connected_component(m: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Largest 4- (or 8-) connected true region; ties go to the component met first in raster order."""
    m = np.asarray(m, dtype=bool)
    structure = CROSS if connectivity == 4 else np.ones((3, 3), dtype=bool)
    if connectivity not in (4, 8):
        raise DomainError("connectivity must be 4 or 8")
    labels, n = ndimage.label(m, structure=structure)
    if n == 0:
        return np.zeros_like(m)
    sizes = np.bincount(labels.ravel())[1:]
    # labels are numbered in raster order of each component's first cell
    return labels == int(np.argmax(sizes)) + 1


def dilate(m: np.ndarray) -> np.ndarray:
    """Binary dilation by the 3x3 cross, clipped at the border."""
    m = np.asarray(m, dtype=bool)
    out = m.copy()
    out[1:, :] |= m[:-1, :]
    out[:-1, :] |= m[1:, :]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


@dataclass(frozen=True)
class ReferencePoint:
    column: int
    x: float
    y: float


def column_reference_points(mask: np.ndarray, tensor: np.ndarray) -> list[ReferencePoint]:
    """One boundary point per azimuth column.

    In a column with drivable cells, the boundary is the non-drivable
    occupied cell of smallest nearest-rho, reported with its nearest point's
    (x, y). With no such cell the column is open up to range, and the
    furthest point of the furthest occupied cell is used. Columns without a
    drivable occupied cell give nothing.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tensor.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match tensor {tensor.shape[:2]}")
    near_rho = tensor[..., NEAR_RHO]
    far_rho = tensor[..., FAR_RHO]
    occupied = near_rho > 0
    points = []
    for j in range(mask.shape[1]):
        occ = occupied[:, j]
        if not (mask[:, j] & occ).any():
            continue
        blocked = occ & ~mask[:, j]
        if blocked.any():
            i = int(np.argmin(np.where(blocked, near_rho[:, j], np.inf)))
            points.append(ReferencePoint(j, float(tensor[i, j, CH_X]), float(tensor[i, j, CH_Y])))
        else:
            i = int(np.argmax(np.where(occ, far_rho[:, j], -np.inf)))
            points.append(ReferencePoint(j, float(tensor[i, j, N_FEATURES + CH_X]),
                                         float(tensor[i, j, N_FEATURES + CH_Y])))
    return points


@dataclass(frozen=True)
class GridMapConfig:
    x_range: tuple[float, float] = (6.0, 46.0)
    y_range: tuple[float, float] = (-10.0, 10.0)
    resolution: float = 0.05

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range):
            if not hi > lo:
                raise DomainError("map ranges must be increasing")
            n = (hi - lo) / self.resolution
            if abs(n - round(n)) > 1e-6:
                raise DomainError(f"range {hi - lo} m is not a whole number of {self.resolution} m cells")

    @property
    def shape(self) -> tuple[int, int]:
        nx = round((self.x_range[1] - self.x_range[0]) / self.resolution)
        ny = round((self.y_range[1] - self.y_range[0]) / self.resolution)
        return nx, ny

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.shape
        xs = self.x_range[0] + (np.arange(nx) + 0.5) * self.resolution
        ys = self.y_range[0] + (np.arange(ny) + 0.5) * self.resolution
        return xs, ys


@dataclass
class GridMap:
    """Cells indexed ``[ix, iy]`` (x-major) holding NOT_DRIVABLE/DRIVABLE/DONT_CARE."""

    cells: np.ndarray
    config: GridMapConfig = GridMapConfig()

    def __post_init__(self):
        if self.cells.shape != self.config.shape:
            raise ShapeError(f"grid map {self.cells.shape} does not match {self.config.shape}")

    @classmethod
    def empty(cls, config: GridMapConfig = GridMapConfig()) -> "GridMap":
        return cls(np.full(config.shape, NOT_DRIVABLE, dtype=np.uint8), config)

    @property
    def drivable(self) -> np.ndarray:
        return self.cells == DRIVABLE


@dataclass(frozen=True)
class Polygon:
    vertices: np.ndarray  # (n, 2) vehicle-frame meters, x forward, y left

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if len(v) < 3:
            raise DomainError("a polygon needs at least 3 vertices")
        object.__setattr__(self, "vertices", v)

    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    def to_csv(self) -> str:
        return "".join(f"{x!r},{y!r}\n" for x, y in self.vertices.tolist())


def build_polygon(points, x_min: float = 6.0, azimuth_min: float = -45.0,
                  azimuth_max: float = 45.0) -> Polygon | None:
    """Reference points in column order, closed by anchors on the outer rays at ``x = x_min``.

    Returns ``None`` when there are no reference points (no drivable region).
    """
    pts = [(p.x, p.y) if isinstance(p, ReferencePoint) else tuple(p) for p in points]
    if not pts:
        return None
    right = (x_min, x_min * math.tan(math.radians(azimuth_min)))
    left = (x_min, x_min * math.tan(math.radians(azimuth_max)))
    return Polygon(np.array([right, *pts, left], dtype=np.float64))


def points_in_polygon(px: np.ndarray, py: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd membership for the grid ``px x py``; points on an edge count as inside.

    The vectorized crossing count is float arithmetic, so points within a
    hair of an edge are re-decided with exact rational arithmetic.
    """
    v = np.asarray(vertices, dtype=np.float64)
    inside = np.zeros((px.size, py.size), dtype=bool)
    near = np.zeros_like(inside)
    for (xa, ya), (xb, yb) in zip(v, np.roll(v, -1, axis=0)):
        # each map row x crosses the edge at one lateral position; count crossings with y < y_int
        crosses = (xa > px) != (xb > px)
        if crosses.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                y_int = ya + (px - xa) * (yb - ya) / (xb - xa)
            inside ^= crosses[:, None] & (py[None, :] < y_int[:, None])
        near |= _near_segment(px, py, xa, ya, xb, yb)
    for i, j in zip(*np.nonzero(near)):
        inside[i, j] = _exact_inside(px[i], py[j], v)
    return inside


def _near_segment(px, py, xa, ya, xb, yb) -> np.ndarray:
    out = np.zeros((px.size, py.size), dtype=bool)
    tol = _NEAR_TOL
    ix = np.flatnonzero((px >= min(xa, xb) - tol) & (px <= max(xa, xb) + tol))
    iy = np.flatnonzero((py >= min(ya, yb) - tol) & (py <= max(ya, yb) + tol))
    if ix.size == 0 or iy.size == 0:
        return out
    dx, dy = xb - xa, yb - ya
    cross = dx * (py[iy][None, :] - ya) - dy * (px[ix][:, None] - xa)
    out[np.ix_(ix, iy)] = np.abs(cross) <= tol * max(math.hypot(dx, dy), 1.0)
    return out


def _exact_inside(x: float, y: float, vertices: np.ndarray) -> bool:
    px, py = Fraction(float(x)), Fraction(float(y))
    pts = [(Fraction(float(a)), Fraction(float(b))) for a, b in vertices]
    inside = False
    for (xa, ya), (xb, yb) in zip(pts, pts[1:] + pts[:1]):
        if (xb - xa) * (py - ya) == (yb - ya) * (px - xa) \
                and min(xa, xb) <= px <= max(xa, xb) and min(ya, yb) <= py <= max(ya, yb):
            return True
        if (xa > px) != (xb > px) and py < ya + (px - xa) * (yb - ya) / (xb - xa):
            inside = not inside
    return inside


def rasterize(poly: Polygon | None, cfg: GridMapConfig = GridMapConfig()) -> GridMap:
    """Drivable iff the cell center lies inside the polygon (even-odd, edges inclusive)."""
    gm = GridMap.empty(cfg)
    if poly is None:
        return gm
    xs, ys = cfg.centers()
    gm.cells[points_in_polygon(xs, ys, poly.vertices)] = DRIVABLE
    return gm


def render_pgm(gm: GridMap) -> bytes:
    """Binary PGM, one pixel per cell: row 0 is the far edge, column 0 the left (+y) edge."""
    nx, ny = gm.cells.shape
    lut = np.zeros(256, dtype=np.uint8)
    for code, value in PGM_VALUES.items():
        lut[code] = value
    img = lut[gm.cells[::-1, ::-1]]
    return f"P5\n{ny} {nx}\n255\n".encode("ascii") + img.tobytes()


def pgm_to_gridmap(img: np.ndarray, cfg: GridMapConfig = GridMapConfig()) -> GridMap:
    """Inverse of :func:`render_pgm` for an image array (>=192 drivable, 64..191 don't care)."""
    img = np.asarray(img)
    cells = np.full(img.shape, NOT_DRIVABLE, dtype=np.uint8)
    cells[img >= 192] = DRIVABLE
    cells[(img >= 64) & (img < 192)] = DONT_CARE
    return GridMap(cells[::-1, ::-1].copy(), cfg)


def read_pgm(data: bytes) -> np.ndarray:
    """Decode a binary (P5) or ASCII (P2) 8-bit PGM into a ``(height, width)`` uint8 array."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    if magic == b"P5":
        payload = data[pos + 1:pos + 1 + width * height]
        if len(payload) != width * height:
            raise ValueError("truncated PGM payload")
        return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()
    if magic == b"P2":
        vals = np.array(data[pos:].split(), dtype=np.int64)[:width * height]
        return vals.astype(np.uint8).reshape(height, width)
    raise ValueError(f"unsupported image magic {magic!r}")


def roi_dontcare(cfg: GridMapConfig = GridMapConfig(), azimuth_min: float = -45.0,
                 azimuth_max: float = 45.0) -> np.ndarray:
    """Cells whose centers fall outside the sensor's azimuth window."""
    xs, ys = cfg.centers()
    theta = np.degrees(np.arctan2(ys[None, :], xs[:, None]))
    return (theta < azimuth_min) | (theta >= azimuth_max)


@dataclass
class PostResult:
    mask: np.ndarray
    references: list[ReferencePoint]
    polygon: Polygon | None
    gridmap: GridMap


def postprocess(prob: np.ndarray, tensor: np.ndarray, thr: float = 0.5,
                map_cfg: GridMapConfig = GridMapConfig(),
                grid_cfg: GridConfig = GridConfig(), connectivity: int = 4) -> PostResult:
    if prob.shape != tensor.shape[:2]:
        raise ShapeError(f"probability map {prob.shape} does not match tensor {tensor.shape[:2]}")
    mask = dilate(largest_connected_component(threshold_map(prob, thr), connectivity))
    refs = column_reference_points(mask, tensor)
    poly = build_polygon(refs, map_cfg.x_range[0], grid_cfg.azimuth_min, grid_cfg.azimuth_max)
    return PostResult(mask, refs, poly, rasterize(poly, map_cfg))
