"""Acceptance criteria, one test per criterion.

Each test carries a ``criterion`` marker; conftest prints a PASS/FAIL line
per criterion in the terminal summary. Run alone with
``pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
import pytest
import shapely

from chipnet.autodiff import Tape, Var, backward
from chipnet.cnn import (
    ChipNetBlockParams,
    ConvParams,
    block_forward,
    conv2d,
    count_mults,
    count_params,
    fixed_forward,
    fuse_block_to_5x5,
    init_network,
    network_forward,
    quantize_network,
)
from chipnet.errors import MalformedFrameError
from chipnet.fixedpoint import QFormat, default_formats, quantize_tensor, to_raw
from chipnet.hwsim import cycle_model, run_network_sim
from chipnet.metrics import ConfusionCounts, confusion, metrics
from chipnet.pointcloud import parse_kitti_bin, read_frame, to_kitti_bin
from chipnet.postprocess import GridMapConfig, Polygon, rasterize
from chipnet.spherical import GridConfig
from chipnet.synthetic import wedge_dataset
from chipnet.train import cross_entropy, forward_tape, network_arrays


def f1_score(net, dataset, formats=None):
    tp = fp = fn = 0
    for x, y in dataset:
        pred = network_forward(x, net, formats) >= 0.5
        pos = y > 0.5
        tp += int(np.count_nonzero(pred & pos))
        fp += int(np.count_nonzero(pred & ~pos))
        fn += int(np.count_nonzero(~pred & pos))
    return 2 * tp / (2 * tp + fp + fn)


@pytest.mark.criterion(1, "block / fused 5x5 equivalence")
def test_fusion_equivalence():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        layers = [ConvParams(rng.normal(0, 0.05, (64, 64, 3, 3)).astype(np.float32),
                             rng.normal(0, 0.1, 64).astype(np.float32), d) for d in (1, 2)]
        b = ChipNetBlockParams(*layers)
        x = rng.normal(size=(16, 16, 64)).astype(np.float32)
        direct = block_forward(x, b, activation=False)
        fused = conv2d(x, fuse_block_to_5x5(b))
        assert direct.dtype == fused.dtype == np.float32
        worst = max(worst, float(np.abs(direct - fused).max()))
    elapsed = time.perf_counter() - t0
    print(f"max abs error {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-5
    assert elapsed < 10


@pytest.mark.criterion(2, "parameter and multiplication counts")
def test_counts():
    blk = ChipNetBlockParams(ConvParams.zeros(64, 64, 3, 1), ConvParams.zeros(64, 64, 3, 2))
    conv5 = ConvParams.zeros(64, 64, 5)
    assert count_params(blk) == 73_856
    assert count_params(conv5) == 102_464
    reduction = 1 - count_params(blk) / count_params(conv5)
    # exact value is 27.92%; the reference figure is a whole percent
    assert reduction == 1 - 73_856 / 102_464
    assert round(100 * reduction) == 28
    assert count_mults(conv5, 180, 64) == 1_179_648_000
    direct = count_mults(blk, 180, 64)
    assert direct == 849_346_560
    print(f"reduction {reduction:.2%}; block mults {direct:,} vs the reference 802 million "
          f"({(direct - 802e6) / 802e6:+.1%}); see the README note on this gap")


@pytest.mark.criterion(3, "quantizer properties over 1e5 values per format")
def test_quantization_properties():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    n = 100_000
    for bits in (8, 12, 16, 18, 24, 32):
        for q in set(default_formats(bits)):
            lo, hi = q.min_value, q.max_value
            x = rng.uniform(1.5 * lo, 1.5 * hi, n)
            raw = to_raw(x, q)
            val = raw / q.scale
            # grid membership and range
            assert raw.min() >= q.raw_min and raw.max() <= q.raw_max
            assert np.array_equal(val * q.scale, np.round(val * q.scale))
            # idempotence
            assert np.array_equal(to_raw(val, q), raw)
            # monotonicity
            order = np.argsort(x, kind="stable")
            assert (np.diff(raw[order]) >= 0).all()
            # half-step error bound inside the range
            inside = (x >= lo) & (x <= hi)
            assert np.abs(val[inside] - x[inside]).max() <= q.step / 2
            # saturation outside
            assert (raw[x > hi + q.step] == q.raw_max).all()
            assert (raw[x < lo - q.step] == q.raw_min).all()
            assert quantize_tensor(np.array([1e30, -1e30]), q).raw.tolist() == [q.raw_max, q.raw_min]
    elapsed = time.perf_counter() - t0
    print(f"{elapsed:.2f} s")
    assert elapsed < 5


@pytest.mark.criterion(4, "18-bit fidelity, 12-bit degrades more")
def test_bitwidth_fidelity(trained_toy, toy_dataset):
    net = trained_toy["float"].network

    def deltas(data):
        f = f1_score(net, data)
        return f, {b: abs(f1_score(net, data, default_formats(b)) - f) for b in (10, 12, 18)}

    f_float, d = deltas(toy_dataset)
    print(f"synthetic set: float F1 {f_float:.4f}, |dF1| 18-bit {d[18]:.2e}, "
          f"12-bit {d[12]:.2e}, 10-bit {d[10]:.2e}")
    f_held, h = deltas(wedge_dataset(50, seed=101))
    print(f"held-out (informational): float F1 {f_held:.4f}, |dF1| 18-bit {h[18]:.2e}, "
          f"12-bit {h[12]:.2e}, 10-bit {h[10]:.2e}")
    assert d[18] < 0.01
    assert d[12] > d[18]


@pytest.mark.criterion(5, "hardware simulator is bit-exact on 20 full frames")
def test_simulator_bit_exact(trained_toy):
    qnet = quantize_network(trained_toy["quantized"].network)
    frames = wedge_dataset(20, cfg=GridConfig(), seed=55)
    t0 = time.perf_counter()
    mismatches = 0
    for x, _ in frames:
        assert x.shape == (64, 180, 14)
        sim = run_network_sim(x, qnet)
        ref = fixed_forward(x, qnet)
        assert sim.logit_raw.size == 11_520
        mismatches += int(np.count_nonzero(sim.logit_raw != ref.logit_raw))
    elapsed = time.perf_counter() - t0
    print(f"{mismatches} mismatching cells over 20 frames, {elapsed:.1f} s")
    assert mismatches == 0
    assert elapsed < 300


@pytest.mark.criterion(6, "cycle and time model")
def test_cycle_model():
    r = cycle_model((180, 64), init_network(0), clock_hz=350e6)
    assert r.cycles_per_pass == 12_512
    assert abs(r.time_ms - 12.59) / 12.59 <= 0.005
    assert abs(r.time_ms + 5.0 - 17.59) <= 0.1
    print(f"{r.cycles_per_pass:,} cycles/pass, {r.time_ms:.2f} ms model, "
          f"{r.time_ms + 5:.2f} ms with post-processing")


@pytest.mark.criterion(7, "rasterization against a point-in-polygon oracle")
def test_rasterization_oracle():
    rng = np.random.default_rng(7)
    cfg = GridMapConfig()
    assert cfg.shape == (800, 400)
    xs, ys = cfg.centers()
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    bad = 0
    for _ in range(1000):
        n = rng.integers(3, 12)
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        r = rng.uniform(1, 15, n)
        v = np.column_stack([rng.uniform(10, 40) + r * np.cos(ang),
                             rng.uniform(-5, 5) + r * np.sin(ang)])
        if rng.random() < 0.3:
            v = np.round(v / 0.025) * 0.025
        got = rasterize(Polygon(v), cfg).drivable
        bad += int(np.count_nonzero(got != shapely.intersects_xy(shapely.Polygon(v), X, Y)))
    print(f"{bad} disagreeing cells over 1000 polygons")
    assert bad == 0
    for (x0, x1, y0, y1) in [(10, 20, -5, 5), (6, 46, -10, 10), (7.01, 8.02, 0.3, 2.29)]:
        rect = Polygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))
        nx = np.count_nonzero((xs >= x0) & (xs <= x1))
        ny = np.count_nonzero((ys >= y0) & (ys <= y1))
        assert rasterize(rect, cfg).drivable.sum() == nx * ny
    assert rasterize(Polygon(np.array([[10, -5], [20, -5], [20, 5], [10, 5]])), cfg).drivable.sum() \
        == 200 * 200


@pytest.mark.criterion(8, "metrics against a brute-force confusion oracle")
def test_metrics_oracle():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        p = rng.random((32, 32)) < rng.random()
        g = rng.random((32, 32)) < rng.random()
        tp = fp = tn = fn = 0
        for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
            tp += a and b
            fp += a and not b
            tn += (not a) and (not b)
            fn += (not a) and b
        c = confusion(p, g)
        assert c == ConfusionCounts(tp, fp, tn, fn)
        m = metrics(c)
        assert m.precision == (tp / (tp + fp) if tp + fp else None)
        assert m.recall == (tp / (tp + fn) if tp + fn else None)
        assert m.ap == (tp + tn) / 1024
        if m.precision is not None and m.recall is not None and m.precision + m.recall:
            assert m.f1 == 2 * m.precision * m.recall / (m.precision + m.recall)
    m = metrics(ConfusionCounts(tp=3, fp=1, tn=5, fn=2))
    expected = {"precision": 0.75, "recall": 0.6, "f1": 2 / 3, "ap": 8 / 11,
                "fpr": 1 / 6, "fnr": 0.4}
    for k, v in expected.items():
        assert round(getattr(m, k), 10) == round(v, 10)
    print("1000 mask pairs exact; worked example matches to 10 places")


def _numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def _rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8)


@pytest.mark.criterion(9, "finite-difference gradients and exact straight-through backward")
def test_gradients():
    rng = np.random.default_rng(9)
    nudge = rng.normal(size=(5, 6, 3))
    nudge[np.abs(nudge) < 0.05] = 0.3
    ops = {
        "conv2d d=1": (lambda t, v: t.conv2d(v[0], v[1], v[2], 1),
                       [rng.normal(size=(5, 6, 3)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)]),
        "conv2d d=2": (lambda t, v: t.conv2d(v[0], v[1], v[2], 2),
                       [rng.normal(size=(5, 6, 3)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)]),
        "conv2d 5x5": (lambda t, v: t.conv2d(v[0], v[1], v[2], 1),
                       [rng.normal(size=(5, 6, 3)), rng.normal(size=(2, 3, 5, 5)), rng.normal(size=2)]),
        "relu": (lambda t, v: t.relu(v[0]), [nudge]),
        "add": (lambda t, v: t.add(v[0], v[1]), [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]),
        "logistic": (lambda t, v: t.logistic(v[0]), [rng.normal(size=(4, 3))]),
        "reshape": (lambda t, v: t.reshape(v[0], (12,)), [rng.normal(size=(4, 3))]),
    }
    worst = {}
    for name, (build, arrays) in ops.items():
        out_shape = build(Tape(), [Var(a) for a in arrays]).shape
        w = rng.normal(size=out_shape)

        def loss(build=build, arrays=arrays, w=w):
            return float((w * build(Tape(), [Var(a) for a in arrays]).value).sum())

        tape = Tape()
        vs = [Var(a, requires_grad=True) for a in arrays]
        grads = backward(tape, build(tape, vs), w, vs)
        worst[name] = max(_rel_err(g, _numeric_grad(loss, a)) for a, g in zip(arrays, grads))

    p = rng.uniform(0.05, 0.95, (4, 4))
    t = (rng.random((4, 4)) > 0.5).astype(float)
    _, g = cross_entropy(p, t)
    worst["cross-entropy"] = _rel_err(g, _numeric_grad(lambda: cross_entropy(p, t)[0], p, h=1e-7))

    net = init_network(rng, channels=3, n_blocks=1)
    x = rng.normal(size=(8, 6, 14))
    y = (rng.random((8, 6)) > 0.5).astype(float)
    arrays = network_arrays(net)
    tape = Tape()
    params = [Var(a, requires_grad=True) for a in arrays]
    prob = forward_tape(tape, x, net, params)
    grads = backward(tape, prob, cross_entropy(prob.value, y)[1], params)

    def net_loss():
        return cross_entropy(forward_tape(Tape(), x, net, [Var(a) for a in arrays]).value, y)[0]

    worst["full network"] = max(_rel_err(g, _numeric_grad(net_loss, a)) for a, g in zip(arrays, grads))
    print(", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert max(worst.values()) < 1e-3

    upstream = rng.normal(size=(7, 5))
    tape = Tape()
    v = Var(rng.normal(size=(7, 5)), requires_grad=True)
    (g,) = backward(tape, tape.ste_quantize(v, QFormat(8, 4)), upstream, [v])
    assert g.tobytes() == upstream.tobytes()


@pytest.mark.criterion(10, "desk-scale two-stage training")
def test_desk_training(trained_toy, toy_dataset):
    f_float = f1_score(trained_toy["float"].network, toy_dataset)
    f_fixed = f1_score(trained_toy["quantized"].network, toy_dataset, default_formats(18))
    minutes = trained_toy["seconds"] / 60
    print(f"float F1 {f_float:.4f}, 18-bit fine-tuned F1 {f_fixed:.4f}, "
          f"training {minutes:.1f} min")
    assert f_float > 0.95
    assert f_float - f_fixed < 0.01
    assert minutes < 15


@pytest.mark.criterion(11, "KITTI ingestion")
def test_kitti_ingestion(tmp_path):
    rng = np.random.default_rng(11)
    data = rng.uniform(-80, 80, (4096, 4)).astype("<f4")
    data[:, 3] = rng.uniform(0, 1, 4096)
    raw = data.tobytes()
    assert to_kitti_bin(parse_kitti_bin(raw)) == raw
    path = tmp_path / "000000.bin"
    path.write_bytes(raw)
    assert to_kitti_bin(read_frame(str(path))) == raw
    for n in (1, 15, 17, len(raw) - 1):
        with pytest.raises(MalformedFrameError):
            parse_kitti_bin(raw[:n])
    print("4096-point round trip byte-exact; truncated lengths rejected")
