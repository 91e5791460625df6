"""``chipnet`` command line.

Exit codes: 0 success, 1 usage or invalid option value, 2 I/O failure,
3 malformed input data, 4 shape or format mismatch, 5 simulator disagrees
with the fixed-point reference.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time

import numpy as np

from . import containers
from .cnn import Network, QuantizedNetwork, fixed_forward, network_forward, quantize_network
from .config import Config, QuantConfig, load_config
from .errors import (
    ConfigurationError,
    ContainerError,
    DomainError,
    MalformedFrameError,
    ShapeError,
)
from .fixedpoint import FixedTensor, dequantize, to_raw
from .hwsim import cycle_model, run_network_sim
from .metrics import confusion, metrics, report_json, report_table
from .pointcloud import read_frame
from .postprocess import (
    DONT_CARE,
    pgm_to_gridmap,
    postprocess,
    read_pgm,
    render_pgm,
    roi_dontcare,
)
from .spherical import preprocess_with_stats

log = logging.getLogger("chipnet")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MALFORMED, EXIT_FORMAT, EXIT_SIM = range(6)


class UsageError(Exception):
    pass


class FormatMismatch(Exception):
    pass


class SimMismatch(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers ---------------------------------------------------------------


def _config(args) -> Config:
    return load_config(getattr(args, "config", None))


def _read_tensor(path: str) -> np.ndarray | FixedTensor:
    return containers.read_cten(path)


def _as_float(t) -> np.ndarray:
    return dequantize(t) if isinstance(t, FixedTensor) else np.asarray(t, dtype=np.float64)


def _check_tensor(t, net) -> None:
    shape = t.shape
    if len(shape) != 3 or shape[2] != net.in_channels:
        raise FormatMismatch(f"tensor shape {shape} does not fit a network with "
                             f"{net.in_channels} input channels")


def _fixed_input(t, qnet: QuantizedNetwork) -> FixedTensor:
    if isinstance(t, FixedTensor):
        if t.qformat != qnet.activation_format:
            raise FormatMismatch(f"tensor is {t.qformat}, network activations are "
                                 f"{qnet.activation_format}")
        return t
    return FixedTensor(qnet.activation_format, to_raw(t, qnet.activation_format))


# --- subcommands -----------------------------------------------------------


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    cloud = read_frame(args.input)
    tensor, stats, grid = preprocess_with_stats(cloud, cfg.grid, args.rotate)
    containers.write_cten(args.output, tensor)
    print(f"points          {len(cloud)} (dropped invalid {cloud.dropped_invalid})")
    print(f"binned          {grid.n_binned}")
    print(f"tensor          {' x '.join(map(str, tensor.shape))}")
    print(f"point usage     {stats.point_usage_fraction:.4f}")
    print(f"cell occupancy  {stats.cell_occupancy_fraction:.4f}")
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _config(args)
    cloud = read_frame(args.input)
    tensor, stats, grid = preprocess_with_stats(cloud, cfg.grid)
    report = {
        "points": len(cloud),
        "dropped_invalid": cloud.dropped_invalid,
        "binned": grid.n_binned,
        "outside_roi": grid.n_outside,
        "undefined_direction": grid.n_invalid,
        "point_usage_fraction": stats.point_usage_fraction,
        "cell_occupancy_fraction": stats.cell_occupancy_fraction,
    }
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        for k, v in report.items():
            print(f"{k:<24}{v:.4f}" if isinstance(v, float) else f"{k:<24}{v}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(args)
    t = _read_tensor(args.tensor)
    net = containers.read_cnw(args.weights)
    _check_tensor(t, net)
    start = time.perf_counter()
    if args.mode == "float":
        float_net = net.as_network() if isinstance(net, QuantizedNetwork) else net
        prob = network_forward(_as_float(t), float_net)
    else:
        qnet = net if isinstance(net, QuantizedNetwork) else quantize_network(net, *cfg.quant.formats())
        x = _fixed_input(t, qnet)
        prob = fixed_forward(x.raw, qnet, input_is_raw=True).prob
    elapsed = time.perf_counter() - start
    containers.write_cten(args.output, prob.astype(np.float32))
    print(f"{args.mode} inference {prob.shape[0]} x {prob.shape[1]} in {1e3 * elapsed:.1f} ms")
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _config(args)
    quant = cfg.quant
    if (args.bits, args.frac, args.act_frac) != (None, None, None):
        bits = args.bits if args.bits is not None else quant.bits
        quant = QuantConfig(bits, args.frac, args.act_frac)
    qw, qa = quant.formats()
    net = containers.read_cnw(args.weights)
    float_net = net.as_network() if isinstance(net, QuantizedNetwork) else net
    qnet = quantize_network(float_net, qw, qa)
    containers.write_cnw(args.output, qnet)
    deq = qnet.as_network()
    print(f"weights {qw}, activations {qa}")
    names = ["encoder"] + [f"block{i}.{b}" for i in range(len(float_net.blocks))
                           for b in ("dense", "dilated")] + ["output"]
    for name, a, b in zip(names, float_net.conv_layers(), deq.conv_layers()):
        err = max(np.abs(a.kernel - b.kernel).max(), np.abs(a.bias - b.bias).max())
        print(f"{name:<18} max abs error {err:.3e}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    net = containers.read_cnw(args.weights)
    if not isinstance(net, QuantizedNetwork):
        raise UsageError("simulate needs fixed-point weights (run `chipnet quantize` first)")
    clock_hz = args.clock_mhz * 1e6
    t = _read_tensor(args.tensor)
    _check_tensor(t, net)
    if args.report_only:
        report = cycle_model(t.shape[:2], net, clock_hz)
    else:
        x = _fixed_input(t, net)
        result = run_network_sim(x, net, clock_hz, args.trace, args.slices)
        ref = fixed_forward(x.raw, net, input_is_raw=True)
        mismatches = int(np.count_nonzero(result.logit_raw != ref.logit_raw))
        if args.output:
            containers.write_cten(args.output, result.prob.astype(np.float32))
        if mismatches:
            print(result.report.to_text())
            raise SimMismatch(f"{mismatches} of {ref.logit_raw.size} cells differ from the "
                              "fixed-point reference")
        report = result.report
        print(f"bit-exact against fixed-point reference ({ref.logit_raw.size} cells)")
    print(report.to_json() if args.json else report.to_text())
    return EXIT_OK


def cmd_postprocess(args) -> int:
    cfg = _config(args)
    thr = cfg.post.threshold if args.thr is None else args.thr
    if not 0.0 < thr < 1.0:
        raise UsageError(f"--thr must lie in (0, 1), got {thr}")
    prob = _as_float(_read_tensor(args.prob))
    tensor = _as_float(_read_tensor(args.tensor))
    if prob.shape != tensor.shape[:2]:
        raise FormatMismatch(f"probability map {prob.shape} does not match tensor {tensor.shape}")
    res = postprocess(prob, tensor, thr, cfg.map, cfg.grid, cfg.post.connectivity)
    with open(args.map, "wb") as f:
        f.write(render_pgm(res.gridmap))
    if args.polygon:
        with open(args.polygon, "w", encoding="utf-8") as f:
            f.write(res.polygon.to_csv() if res.polygon is not None else "")
    n_vertices = 0 if res.polygon is None else len(res.polygon.vertices)
    print(f"reference points {len(res.references)}, polygon vertices {n_vertices}, "
          f"drivable cells {int(res.gridmap.drivable.sum())}")
    return EXIT_OK


def _read_image(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    try:
        return read_pgm(data)
    except (ValueError, IndexError) as e:
        raise ContainerError(f"{path}: {e}") from None


def cmd_eval(args) -> int:
    cfg = _config(args)
    pred = _read_image(args.pred)
    gt = _read_image(args.gt)
    if pred.shape != gt.shape:
        raise FormatMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    gt_map = pgm_to_gridmap(gt, cfg.map) if gt.shape == cfg.map.shape[::-1] else None
    if args.dontcare:
        dc_img = _read_image(args.dontcare)
        if dc_img.shape != gt.shape:
            raise FormatMismatch("don't-care mask does not match the ground truth")
        dontcare = dc_img > 0
    elif gt_map is not None:
        wedge = roi_dontcare(cfg.map, cfg.grid.azimuth_min, cfg.grid.azimuth_max)
        dontcare = wedge[::-1, ::-1]
    else:
        dontcare = np.zeros(gt.shape, dtype=bool)
    if gt_map is not None:
        dontcare = dontcare | (gt_map.cells == DONT_CARE)[::-1, ::-1]
    c = confusion(pred >= 192, gt >= 192, dontcare)
    m = metrics(c)
    print(report_json(c, m) if args.json else report_table(c, m), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    from .synthetic import wedge_dataset
    from .train import train_toy

    cfg = _config(args)
    tc = cfg.train
    frames = args.frames if args.frames is not None else tc.frames
    epochs = args.epochs if args.epochs is not None else tc.epochs
    finetune = args.finetune_epochs if args.finetune_epochs is not None else tc.finetune_epochs
    seed = args.seed if args.seed is not None else tc.seed
    data = wedge_dataset(frames, seed=seed)
    rows = []
    stage1 = train_toy(data, epochs, seed=seed, channels=tc.channels, n_blocks=tc.blocks)
    rows += [("float", r.epoch, r.loss, r.f1) for r in stage1.history]
    net: Network = stage1.network
    qnet = None
    if finetune > 0:
        formats = cfg.quant.formats()
        stage2 = train_toy(data, finetune, quantized=True, formats=formats, net=net, seed=seed + 1)
        rows += [("quantized", r.epoch, r.loss, r.f1) for r in stage2.history]
        net = stage2.network
        qnet = quantize_network(net, *formats)
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(("stage", "epoch", "loss", "f1"))
            w.writerows((s, e, f"{l:.6f}", f"{f1:.6f}") for s, e, l, f1 in rows)
    containers.write_cnw(args.output, net)
    if args.quantized_output and qnet is not None:
        containers.write_cnw(args.quantized_output, qnet)
    for s, e, l, f1 in rows:
        print(f"{s:<10} epoch {e:3d}  loss {l:.5f}  f1 {f1:.4f}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chipnet", description="LiDAR drivable-region segmentation toolchain")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="point cloud -> 14-channel input tensor")
    s.add_argument("--input", required=True, help="KITTI .bin or x,y,z,r .csv frame")
    s.add_argument("--config", help="TOML configuration")
    s.add_argument("--output", required=True, help="output CTEN tensor")
    s.add_argument("--rotate", type=float, default=0.0, metavar="DEG",
                   help="shift the azimuth window by DEG degrees")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("stats", help="binning and usage statistics of a frame")
    s.add_argument("--input", required=True)
    s.add_argument("--config")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("infer", help="run the network on a tensor")
    s.add_argument("--tensor", required=True)
    s.add_argument("--weights", required=True, help="CNW1 weights (float or fixed)")
    s.add_argument("--mode", choices=("float", "fixed"), default="float")
    s.add_argument("--config")
    s.add_argument("--output", required=True, help="output CTEN probability map")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("quantize", help="convert weights to fixed point")
    s.add_argument("--weights", required=True)
    s.add_argument("--bits", type=int, help="total bits N (default from config: 18)")
    s.add_argument("--frac", type=int, help="weight fraction bits F (default N-4)")
    s.add_argument("--act-frac", type=int, help="activation fraction bits (default N-8)")
    s.add_argument("--config")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("simulate", help="cycle-level datapath simulation")
    s.add_argument("--tensor", required=True)
    s.add_argument("--weights", required=True, help="fixed-point CNW1 weights")
    s.add_argument("--clock-mhz", type=float, default=350.0)
    s.add_argument("--slices", type=int, default=64)
    s.add_argument("--trace", help="CSV trace of FSM progress")
    s.add_argument("--output", help="output CTEN probability map")
    s.add_argument("--report-only", action="store_true",
                   help="print the cycle model without simulating")
    s.add_argument("--json", action="store_true", help="print the cycle report as JSON")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("postprocess", help="probability map -> grid map and polygon")
    s.add_argument("--prob", required=True)
    s.add_argument("--tensor", required=True)
    s.add_argument("--thr", type=float)
    s.add_argument("--config")
    s.add_argument("--map", required=True, help="output PGM")
    s.add_argument("--polygon", help="output vertex CSV")
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("eval", help="compare a predicted grid map against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--dontcare", help="PGM mask; nonzero pixels are excluded")
    s.add_argument("--config")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("train", help="two-stage desk-scale training on synthetic scenes")
    s.add_argument("--frames", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--finetune-epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--loss-csv", help="per-epoch stage,epoch,loss,f1 log")
    s.add_argument("--output", required=True, help="trained weights (CNW1)")
    s.add_argument("--quantized-output", help="fixed-point weights after fine-tuning")
    s.set_defaults(func=cmd_train)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help or a usage error
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DomainError, ConfigurationError) as e:
        print(f"chipnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"chipnet: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (MalformedFrameError, ContainerError) as e:
        print(f"chipnet: malformed input: {e}", file=sys.stderr)
        return EXIT_MALFORMED
    except (FormatMismatch, ShapeError) as e:
        print(f"chipnet: format mismatch: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except SimMismatch as e:
        print(f"chipnet: simulation mismatch: {e}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
