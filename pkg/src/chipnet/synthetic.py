"""Synthetic road scenes ray-cast into LiDAR frames.

A straight road strip (possibly offset and slightly angled) is flanked by
curbs, raised sidewalks and walls; a few boxes stand in for parked or moving
vehicles. Beams are fired on rings centred in each elevation row of the grid.
A cell is labeled drivable when both its nearest and its furthest return hit
the road surface, which gives a trapezoid-shaped drivable region in the
spherical view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud
from .spherical import CH_RHO, GridConfig, bin_points, build_input_tensor, point_features, \
    select_near_far

SENSOR_HEIGHT = 1.73
MAX_RANGE = 70.0

ROAD, SIDEWALK, CURB, WALL, OBSTACLE = range(5)
_INTENSITY = {ROAD: 0.15, SIDEWALK: 0.35, CURB: 0.3, WALL: 0.55, OBSTACLE: 0.8}


@dataclass
class RoadScene:
    half_width: float = 4.0
    offset: float = 0.0
    heading: float = 0.0  # radians; road centre line is y = offset + x * tan(heading)
    sidewalk_width: float = 3.0
    curb_height: float = 0.15
    wall_height: float = 3.0
    boxes: list[tuple[float, float, float, float, float]] = field(default_factory=list)


def random_scene(rng: np.random.Generator) -> RoadScene:
    scene = RoadScene(
        half_width=rng.uniform(3.0, 7.0),
        offset=rng.uniform(-2.0, 2.0),
        heading=math.radians(rng.uniform(-6.0, 6.0)),
        sidewalk_width=rng.uniform(1.5, 5.0),
        curb_height=rng.uniform(0.12, 0.25),
    )
    for _ in range(rng.integers(0, 3)):
        x0 = rng.uniform(8.0, 40.0)
        yc = scene.offset + x0 * math.tan(scene.heading) + rng.uniform(-1, 1) * scene.half_width
        scene.boxes.append((x0, x0 + rng.uniform(3.5, 5.0), yc - 0.9, yc + 0.9, 1.5))
    return scene


def _ray_directions(cfg: GridConfig, rng: np.random.Generator, per_cell: int = 3):
    span = cfg.elevation_max - cfg.elevation_min
    ring_el = cfg.elevation_min + (np.arange(cfg.rows) + 0.5) * span / cfg.rows
    step = cfg.azimuth_bin / per_cell
    n_az = int(round((cfg.azimuth_max - cfg.azimuth_min) / step)) + 2 * per_cell
    az0 = cfg.azimuth_min - per_cell * step + rng.uniform(0, step)
    az = az0 + np.arange(n_az) * step
    el_g, az_g = np.meshgrid(np.radians(ring_el), np.radians(az), indexing="ij")
    el_g = el_g + rng.normal(0, 0.02 * math.radians(span / cfg.rows), el_g.shape)
    d = np.stack([np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g), np.sin(el_g)], -1)
    return d.reshape(-1, 3)


def cast(scene: RoadScene, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Range and surface id for each unit direction (``inf`` range on a miss)."""
    h = SENSOR_HEIGHT
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    tan_h = math.tan(scene.heading)
    w, ws = scene.half_width, scene.half_width + scene.sidewalk_width
    best = np.full(len(dirs), np.inf)
    surface = np.full(len(dirs), -1)

    def offer(t, sid):
        ok = np.isfinite(t) & (t > 0) & (t < best)
        best[ok] = t[ok]
        surface[ok] = sid

    with np.errstate(divide="ignore", invalid="ignore"):
        lateral_rate = dy - dx * tan_h  # d/dt of (y - centre line)

        def lateral(t):
            return t * lateral_rate - scene.offset

        for z_plane, lo, hi, sid in ((-h, 0.0, w, ROAD),
                                     (-h + scene.curb_height, w, ws, SIDEWALK)):
            t = np.where(dz < 0, z_plane / dz, np.inf)
            lat = np.abs(lateral(t))
            offer(np.where((lat >= lo) & (lat <= hi), t, np.inf), sid)

        for edge, top, sid in ((w, scene.curb_height, CURB), (ws, scene.wall_height, WALL)):
            for side in (-1.0, 1.0):
                t = (scene.offset + side * edge) / lateral_rate
                z = t * dz
                offer(np.where((z >= -h) & (z <= -h + top), t, np.inf), sid)

        for x0, x1, y0, y1, height in scene.boxes:
            tmin = np.zeros(len(dirs))
            tmax = np.full(len(dirs), np.inf)
            for lo, hi, d in ((x0, x1, dx), (y0, y1, dy), (-h, -h + height, dz)):
                t0, t1 = lo / d, hi / d
                near, far = np.minimum(t0, t1), np.maximum(t0, t1)
                inside = (lo <= 0) & (0 <= hi)
                near = np.where(d == 0, np.where(inside, -np.inf, np.inf), near)
                far = np.where(d == 0, np.where(inside, np.inf, -np.inf), far)
                tmin, tmax = np.maximum(tmin, near), np.minimum(tmax, far)
            offer(np.where(tmin <= tmax, tmin, np.inf), OBSTACLE)

    best[best > MAX_RANGE] = np.inf
    surface[~np.isfinite(best)] = -1
    return best, surface


def scan(scene: RoadScene, cfg: GridConfig, rng: np.random.Generator,
         range_noise: float = 0.02, dropout: float = 0.05) -> tuple[PointCloud, np.ndarray]:
    """Ray-cast one frame; returns the cloud and per-point surface ids."""
    dirs = _ray_directions(cfg, rng)
    t, surface = cast(scene, dirs)
    keep = np.isfinite(t) & (rng.random(len(t)) >= dropout)
    t = t[keep] + rng.normal(0, range_noise, keep.sum())
    surface = surface[keep]
    xyz = dirs[keep] * t[:, None]
    r = np.array([_INTENSITY[s] for s in range(5)])[surface] + rng.normal(0, 0.03, len(t))
    data = np.column_stack([xyz, np.clip(r, 0, 1)]).astype(np.float32)
    return PointCloud(data, "synthetic"), surface


def frame(scene: RoadScene, cfg: GridConfig, rng: np.random.Generator):
    """``(tensor, labels)`` for one scene; labels are a ``(rows, cols)`` 0/1 float array."""
    cloud, surface = scan(scene, cfg, rng)
    grid = bin_points(cloud, cfg)
    feats = point_features(cloud)
    tensor = build_input_tensor(grid, cloud, feats)
    near, far = select_near_far(grid, feats[:, CH_RHO])
    occ = near >= 0
    label = np.zeros(near.shape, dtype=np.float64)
    label[occ] = ((surface[near[occ]] == ROAD) & (surface[far[occ]] == ROAD)).astype(float)
    return tensor, label.reshape(cfg.rows, cfg.columns)


def wedge_dataset(n_frames: int = 200, cfg: GridConfig | None = None, seed: int = 0):
    """List of ``(tensor, labels)`` pairs from independent random scenes."""
    cfg = cfg or GridConfig.toy()
    rng = np.random.default_rng(seed)
    return [frame(random_scene(rng), cfg, rng) for _ in range(n_frames)]


def synthetic_cloud(seed: int = 0, cfg: GridConfig | None = None) -> PointCloud:
    rng = np.random.default_rng(seed)
    return scan(random_scene(rng), cfg or GridConfig(), rng)[0]
