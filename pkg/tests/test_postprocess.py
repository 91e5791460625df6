import math
from collections import deque

import numpy as np
import pytest
import shapely

from chipnet.errors import DomainError, ShapeError
from chipnet.postprocess import (
    DONT_CARE,
    DRIVABLE,
    NOT_DRIVABLE,
    GridMap,
    GridMapConfig,
    Polygon,
    ReferencePoint,
    build_polygon,
    column_reference_points,
    dilate,
    largest_connected_component,
    pgm_to_gridmap,
    postprocess,
    rasterize,
    read_pgm,
    render_pgm,
    roi_dontcare,
    threshold_map,
)
from chipnet.spherical import N_CHANNELS, GridConfig


def bfs_components(m):
    """Component labeling by breadth-first search, 4-connectivity, raster discovery order."""
    seen = np.zeros(m.shape, dtype=bool)
    comps = []
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            if m[i, j] and not seen[i, j]:
                cells, todo = [], deque([(i, j)])
                seen[i, j] = True
                while todo:
                    a, b = todo.popleft()
                    cells.append((a, b))
                    for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        u, v = a + da, b + db
                        if 0 <= u < m.shape[0] and 0 <= v < m.shape[1] and m[u, v] and not seen[u, v]:
                            seen[u, v] = True
                            todo.append((u, v))
                comps.append(cells)
    return comps


def test_threshold():
    assert threshold_map(np.full((3, 3), 0.5), 0.5).all()
    assert not threshold_map(np.full((3, 3), 0.49), 0.5).any()
    for bad in (0.0, 1.0, -0.1, 2.0):
        with pytest.raises(DomainError):
            threshold_map(np.zeros((2, 2)), bad)


def test_threshold_oracle_and_antitone(rng):
    p = rng.random((16, 20))
    m = threshold_map(p, 0.3)
    assert all(m[i, j] == (p[i, j] >= 0.3) for i in range(16) for j in range(20))
    prev = None
    for thr in np.linspace(0.05, 0.95, 19):
        cur = threshold_map(p, thr)
        if prev is not None:
            assert not (cur & ~prev).any()
        prev = cur


def test_lcc_examples():
    m = np.zeros((6, 8), dtype=bool)
    m[0:2, 0:2] = True  # size 4, contains (0, 0)
    m[4:6, 5:7] = True  # size 4
    out = largest_connected_component(m)
    assert out[0, 0] and not out[4, 5]
    m[3, 0] = True
    m[3, 1] = True
    m[2, 0] = True  # joins the first blob -> size 7
    m[5, 7] = True  # second blob size 5
    out = largest_connected_component(m)
    assert out.sum() == 7 and not out[4:6, 5:8].any()
    assert not largest_connected_component(np.zeros((3, 3), dtype=bool)).any()
    single = np.zeros((4, 4), dtype=bool)
    single[1:3, 1:3] = True
    np.testing.assert_array_equal(largest_connected_component(single), single)


def test_lcc_matches_bfs_oracle(rng):
    for _ in range(50):
        m = rng.random((12, 15)) < 0.45
        comps = bfs_components(m)
        out = largest_connected_component(m)
        if not comps:
            assert not out.any()
            continue
        best = max(comps, key=len)  # max keeps the first of equal-size components
        expected = np.zeros_like(m)
        expected[tuple(np.array(best).T)] = True
        np.testing.assert_array_equal(out, expected)
        assert len(bfs_components(out)) == 1


def test_lcc_eight_connectivity():
    m = np.eye(4, dtype=bool)
    assert largest_connected_component(m, connectivity=4).sum() == 1
    assert largest_connected_component(m, connectivity=8).sum() == 4


def test_dilate_examples(rng):
    m = np.zeros((5, 5), dtype=bool)
    m[2, 2] = True
    d = dilate(m)
    assert d.sum() == 5 and d[1, 2] and d[2, 1] and not d[1, 1]
    assert dilate(np.ones((4, 4), dtype=bool)).all()
    c = np.zeros((5, 5), dtype=bool)
    c[0, 0] = True
    assert dilate(c).sum() == 3


def test_dilate_extensive_and_monotone(rng):
    for _ in range(30):
        a = rng.random((10, 10)) < 0.2
        b = a | (rng.random((10, 10)) < 0.2)
        assert not (a & ~dilate(a)).any()
        assert not (dilate(a) & ~dilate(b)).any()


def make_tensor(rows, cols):
    return np.zeros((rows, cols, N_CHANNELS), dtype=np.float32)


def set_cell(t, r, c, near, far=None):
    far = near if far is None else far
    t[r, c, 0:2], t[r, c, 5] = near[:2], math.hypot(*near[:2])
    t[r, c, 7:9], t[r, c, 12] = far[:2], math.hypot(*far[:2])


def test_reference_points_constructed_column():
    t = make_tensor(4, 3)
    set_cell(t, 0, 1, (5.0, 0.0))
    set_cell(t, 1, 1, (10.0, 0.0))
    set_cell(t, 2, 1, (15.0, 0.0))
    set_cell(t, 3, 1, (20.0, 0.0))
    mask = np.zeros((4, 3), dtype=bool)
    mask[0:2, 1] = True
    refs = column_reference_points(mask, t)
    assert refs == [ReferencePoint(1, 15.0, 0.0)]


def test_reference_points_all_true_and_all_false():
    t = make_tensor(3, 2)
    set_cell(t, 0, 0, (5.0, 1.0), (6.0, 1.0))
    set_cell(t, 2, 0, (8.0, 1.0), (30.0, 2.0))
    set_cell(t, 1, 1, (7.0, -1.0), (9.0, -1.0))
    refs = column_reference_points(np.ones((3, 2), dtype=bool), t)
    assert refs == [ReferencePoint(0, 30.0, 2.0), ReferencePoint(1, 9.0, -1.0)]
    assert column_reference_points(np.zeros((3, 2), dtype=bool), t) == []
    with pytest.raises(ShapeError):
        column_reference_points(np.ones((2, 2), dtype=bool), t)


def test_build_polygon_anchors_and_area():
    poly = build_polygon([(10, -2), (10, 0), (10, 2)])
    assert len(poly.vertices) == 5
    assert poly.vertices[0] == pytest.approx([6, -6]) and poly.vertices[-1] == pytest.approx([6, 6])
    tri = build_polygon([(20, 0)])
    assert len(tri.vertices) == 3
    assert build_polygon([]) is None
    rect = Polygon(np.array([[10, -5], [20, -5], [20, 5], [10, 5]]))
    assert rect.area() == 100.0
    # shoelace against shapely's area for an anchored polygon
    poly = build_polygon([(12, -6), (30, -3), (30, 3), (12, 6)])
    assert poly.area() == pytest.approx(shapely.Polygon(poly.vertices).area)
    with pytest.raises(DomainError):
        Polygon(np.array([[0, 0], [1, 1]]))


def test_grid_map_config():
    cfg = GridMapConfig()
    assert cfg.shape == (800, 400)
    xs, ys = cfg.centers()
    assert xs[0] == pytest.approx(6.025) and ys[-1] == pytest.approx(9.975)
    with pytest.raises(DomainError):
        GridMapConfig(resolution=0.07)
    with pytest.raises(ShapeError):
        GridMap(np.zeros((10, 10), dtype=np.uint8))


def test_rasterize_closed_forms():
    full = Polygon(np.array([[0, -20], [50, -20], [50, 20], [0, 20]]))
    assert rasterize(full).drivable.sum() == 320_000
    rect = Polygon(np.array([[10, -5], [20, -5], [20, 5], [10, 5]]))
    gm = rasterize(rect)
    assert gm.drivable.sum() == 200 * 200
    assert gm.cells.shape == (800, 400)
    assert rasterize(None).drivable.sum() == 0


def test_rasterize_boundary_counts_inside():
    cfg = GridMapConfig()
    xs, ys = cfg.centers()
    # rectangle whose edges pass exactly through cell-center lines
    x0, x1, y0, y1 = xs[10], xs[20], ys[100], ys[110]
    gm = rasterize(Polygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])), cfg)
    assert gm.drivable.sum() == 11 * 11


def random_polygon(rng):
    n = rng.integers(3, 12)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(1, 15, n)
    v = np.column_stack([rng.uniform(10, 40) + r * np.cos(ang), rng.uniform(-5, 5) + r * np.sin(ang)])
    if rng.random() < 0.3:
        v = np.round(v / 0.025) * 0.025  # vertices on the half-cell lattice hit centers exactly
    return v


def test_rasterize_matches_shapely_oracle(rng):
    cfg = GridMapConfig()
    xs, ys = cfg.centers()
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    for _ in range(60):
        v = random_polygon(rng)
        got = rasterize(Polygon(v), cfg).drivable
        assert np.array_equal(got, shapely.intersects_xy(shapely.Polygon(v), X, Y))


def test_render_pgm_payloads():
    cfg = GridMapConfig()
    header = b"P5\n400 800\n255\n"
    data = render_pgm(GridMap.empty(cfg))
    assert data.startswith(header) and data[len(header):] == bytes(320_000)
    full = GridMap(np.full(cfg.shape, DRIVABLE, dtype=np.uint8), cfg)
    assert render_pgm(full)[len(header):] == b"\xff" * 320_000
    board = (np.add.outer(np.arange(800), np.arange(400)) % 2).astype(np.uint8)
    board[0, 0] = DONT_CARE
    payload = render_pgm(GridMap(board, cfg))[len(header):]
    expected = bytearray()
    for r in range(800):
        for c in range(400):
            expected.append({NOT_DRIVABLE: 0, DRIVABLE: 255, DONT_CARE: 127}[board[799 - r, 399 - c]])
    assert payload == bytes(expected)


def test_pgm_round_trip(rng):
    cfg = GridMapConfig()
    cells = rng.integers(0, 3, cfg.shape).astype(np.uint8)
    img = read_pgm(render_pgm(GridMap(cells, cfg)))
    assert img.shape == (800, 400)
    np.testing.assert_array_equal(pgm_to_gridmap(img, cfg).cells, cells)
    ascii_pgm = b"P2\n# comment\n3 2\n255\n0 127 255\n255 0 0\n"
    assert read_pgm(ascii_pgm).tolist() == [[0, 127, 255], [255, 0, 0]]
    with pytest.raises(ValueError):
        read_pgm(b"P5\n4 4\n255\n" + bytes(3))


def test_roi_dontcare():
    dc = roi_dontcare()
    xs, ys = GridMapConfig().centers()
    assert not dc[:, np.abs(ys) < 6].any()
    assert dc[0, -1] and dc[0, 0] and not dc[-1, -1]


def test_polygon_csv():
    text = Polygon(np.array([[6.0, -6.0], [10.5, 0.25], [6.0, 6.0]])).to_csv()
    assert text.splitlines() == ["6.0,-6.0", "10.5,0.25", "6.0,6.0"]


def test_postprocess_pipeline_edge_cases():
    grid = GridConfig.toy(columns=6, rows=4)
    t = make_tensor(4, 6)
    for c in range(6):
        az = math.radians(-45 + (c + 0.5) * 15)
        for r in range(4):
            rho = 8 + 4 * r
            set_cell(t, r, c, (rho * math.cos(az), rho * math.sin(az)))
    res = postprocess(np.zeros((4, 6)), t, grid_cfg=grid)
    assert res.polygon is None and res.gridmap.drivable.sum() == 0
    res = postprocess(np.ones((4, 6)), t, grid_cfg=grid)
    assert len(res.references) == 6 and len(res.polygon.vertices) == 8
    assert res.gridmap.drivable.sum() > 0
    with pytest.raises(ShapeError):
        postprocess(np.ones((3, 6)), t, grid_cfg=grid)
