"""Cycle-approximate, bit-exact model of the ChipNet convolution datapath.

Structure modeled, at value granularity per clock:

* a zero-initialized padding RAM per input channel, read in raster order,
* one 5x5 shift-register line buffer per convolution slice (64 slices),
* two 5x5 multiplier arrays per slice, each followed by an adder tree that
  also sums across slices (two output kernels per pass),
* requantize + ReLU at the adder-tree root, an intermediate buffer, and
* a cascaded FSM: the outer machine walks the 12 layers, the inner one
  runs ``ceil(out_channels / 2)`` passes per layer.

One padded pixel is streamed per cycle, so a pass over an ``H x W`` map
costs ``(H + 4) * (W + 4)`` cycles.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .cnn import Network, QuantizedNetwork, logistic
from .errors import ConfigurationError, ShapeError
from .fixedpoint import FixedTensor, accumulator_bits, requantize, to_raw

K = 5
PAD = K // 2
SLICES = 64
KERNELS_PER_PASS = 2
DEFAULT_CLOCK_HZ = 350e6


# --- cycle model -----------------------------------------------------------


@dataclass
class CycleReport:
    height: int
    width: int
    cycles_per_pass: int
    passes_per_layer: list[int]
    clock_hz: float
    swap_cycles: int = 0

    @property
    def compute_cycles(self) -> int:
        return sum(p * self.cycles_per_pass for p in self.passes_per_layer)

    @property
    def total_cycles(self) -> int:
        return self.compute_cycles + self.swap_cycles * max(len(self.passes_per_layer) - 1, 0)

    @property
    def time_s(self) -> float:
        return self.total_cycles / self.clock_hz

    @property
    def time_ms(self) -> float:
        return 1e3 * self.time_s

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(total_passes=sum(self.passes_per_layer), total_cycles=self.total_cycles,
                 time_ms=self.time_ms)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [
            f"grid               {self.height} x {self.width}",
            f"cycles per pass    {self.cycles_per_pass:,}",
            f"layers             {len(self.passes_per_layer)}",
            f"passes per layer   {' '.join(str(p) for p in self.passes_per_layer)}",
            f"total passes       {sum(self.passes_per_layer)}",
            f"total cycles       {self.total_cycles:,}",
            f"clock              {self.clock_hz / 1e6:g} MHz",
            f"time               {self.time_ms:.2f} ms",
        ]
        if self.swap_cycles:
            lines.insert(-1, f"swap cycles/layer  {self.swap_cycles}")
        return "\n".join(lines)


def layer_out_channels(net) -> list[int]:
    """Output channels of each datapath layer: encoder, one per block, output."""
    return ([net.encoder.out_channels] + [b.channels for b in net.blocks]
            + [net.output.out_channels])


def cycle_model(grid: tuple[int, int], net: Network | QuantizedNetwork,
                clock_hz: float = DEFAULT_CLOCK_HZ, swap_cycles: int = 0) -> CycleReport:
    height, width = grid
    passes = [math.ceil(c / KERNELS_PER_PASS) for c in layer_out_channels(net)]
    return CycleReport(height, width, (height + 2 * PAD) * (width + 2 * PAD), passes, clock_hz,
                       swap_cycles)


# --- storage and streaming -------------------------------------------------


class PaddingRam:
    """``(H+4) x (W+4)`` RAM per lane, pre-loaded with zeros.

    Only interior addresses are ever written, so a sequential read returns
    the zero-padded image for free.
    """

    def __init__(self, height: int, width: int, lanes: int = 1):
        self.height, self.width = height, width
        self.storage = np.zeros((height + 2 * PAD, width + 2 * PAD, lanes), dtype=np.int64)

    @property
    def padded_shape(self) -> tuple[int, int]:
        return self.storage.shape[:2]

    def write(self, image: np.ndarray) -> None:
        """Write an ``(H, W, lanes)`` (or ``(H, W)``) image to the interior addresses."""
        img = image.reshape(self.height, self.width, -1)
        self.storage[PAD:PAD + self.height, PAD:PAD + self.width, :img.shape[2]] = img

    def read(self, address: int) -> np.ndarray:
        wp = self.storage.shape[1]
        return self.storage[address // wp, address % wp]

    def stream(self) -> Iterator[np.ndarray]:
        flat = self.storage.reshape(-1, self.storage.shape[2])
        yield from flat


def padded_write_read(image: np.ndarray) -> np.ndarray:
    """Write an ``H x W`` map into a padding RAM and read the padded map back."""
    image = np.asarray(image)
    ram = PaddingRam(*image.shape[:2])
    ram.write(image.astype(np.int64))
    hp, wp = ram.padded_shape
    return np.array([ram.read(a)[0] for a in range(hp * wp)], dtype=np.int64).reshape(hp, wp)


class LineBuffer:
    """Four padded rows plus a 5x5 register window, as one shift register.

    After the pixel at padded position ``(i, j)`` is pushed, the window holds
    the patch whose bottom-right corner is ``(i, j)``; it is a valid output
    window when ``i >= 4`` and ``j >= 4``.
    """

    def __init__(self, padded_width: int, lanes: int = 1):
        self.padded_width = padded_width
        self.length = (K - 1) * padded_width + K
        self.regs = np.zeros((self.length, lanes), dtype=np.int64)
        self.head = -1
        self.shifts = 0
        r, c = np.divmod(np.arange(K * K), K)
        self._offsets = (K - 1 - r) * padded_width + (K - 1 - c)

    def push(self, pixel) -> None:
        self.head = (self.head + 1) % self.length
        self.regs[self.head] = pixel
        self.shifts += 1

    @property
    def position(self) -> tuple[int, int]:
        return divmod(self.shifts - 1, self.padded_width)

    @property
    def valid(self) -> bool:
        i, j = self.position
        return i >= K - 1 and j >= K - 1

    def window(self) -> np.ndarray:
        """``(25, lanes)`` window contents in row-major tap order."""
        return self.regs[(self.head - self._offsets) % self.length]


def line_buffer_stream(padded: np.ndarray) -> list[np.ndarray]:
    """Stream a padded single-channel map through a line buffer; return the 5x5 windows."""
    padded = np.asarray(padded, dtype=np.int64)
    hp, wp = padded.shape
    lb = LineBuffer(wp)
    windows = []
    for px in padded.reshape(-1):
        lb.push(px)
        if lb.valid:
            windows.append(lb.window()[:, 0].reshape(K, K))
    return windows


def conv_slice(windows, kernel_a: np.ndarray, kernel_b: np.ndarray) -> tuple[list[int], list[int]]:
    """Two partial-sum streams of one slice: each window against two 5x5 kernels.

    Kernels are raw integers in the fused 5x5 layout; sums are exact integers.
    """
    ka = np.asarray(kernel_a, dtype=np.int64).reshape(-1)
    kb = np.asarray(kernel_b, dtype=np.int64).reshape(-1)
    a, b = [], []
    for w in windows:
        w = np.asarray(w, dtype=np.int64).reshape(-1)
        a.append(int(w @ ka))
        b.append(int(w @ kb))
    return a, b


# --- kernel layout ---------------------------------------------------------


def fused_block_kernel_raw(dense: np.ndarray, dilated: np.ndarray, identity_raw: int) -> np.ndarray:
    """Integer 5x5 layout of a block: dense taps in the middle 3x3, dilated taps on
    the even positions, identity added at the center of the channel diagonal."""
    C = dense.shape[0]
    k = np.zeros((C, C, K, K), dtype=np.int64)
    k[:, :, 1:4, 1:4] += dense
    k[:, :, 0::2, 0::2] += dilated
    k[np.arange(C), np.arange(C), PAD, PAD] += identity_raw
    return k


def embed_5x5(kernel: np.ndarray) -> np.ndarray:
    """Center an odd ``kh x kw`` dense kernel inside the 5x5 multiplier array."""
    O, I, kh, kw = kernel.shape
    if kh > K or kw > K:
        raise ConfigurationError(f"{kh}x{kw} kernel does not fit the 5x5 array")
    k = np.zeros((O, I, K, K), dtype=np.int64)
    oy, ox = (K - kh) // 2, (K - kw) // 2
    k[:, :, oy:oy + kh, ox:ox + kw] = kernel
    return k


@dataclass
class DatapathLayer:
    name: str
    kernels: np.ndarray  # (out, in, 5, 5) raw
    bias: np.ndarray  # (out,) raw, weight format
    relu: bool


def datapath_layers(qnet: QuantizedNetwork) -> list[DatapathLayer]:
    if qnet.encoder.dilation != 1 or qnet.encoder.ksize != (K, K):
        raise ConfigurationError("encoder must be a dense 5x5 convolution")
    ident = qnet.weight_format.scale
    layers = [DatapathLayer("encoder", embed_5x5(qnet.encoder.kernel), qnet.encoder.bias, True)]
    for i, b in enumerate(qnet.blocks):
        layers.append(DatapathLayer(
            f"block{i}", fused_block_kernel_raw(b.dense3.kernel, b.dilated3.kernel, ident),
            np.asarray(b.dense3.bias, dtype=np.int64) + b.dilated3.bias, True))
    layers.append(DatapathLayer("output", embed_5x5(qnet.output.kernel), qnet.output.bias, False))
    return layers


# --- FSM and simulator -----------------------------------------------------


@dataclass
class FsmState:
    layer: int = 0
    phase: str = "load"  # load -> run -> swap, per layer
    pass_index: int = 0
    pixel: int = 0


@dataclass
class SimResult:
    prob: np.ndarray
    logit_raw: np.ndarray
    report: CycleReport
    cycles_simulated: int
    windows_per_pass: list[int] = field(default_factory=list)


class DatapathSim:
    def __init__(self, qnet: QuantizedNetwork, slices: int = SLICES,
                 clock_hz: float = DEFAULT_CLOCK_HZ, trace_path: str | None = None):
        self.qnet = qnet
        self.slices = slices
        self.clock_hz = clock_hz
        self.trace_path = trace_path
        self.layers = datapath_layers(qnet)
        qw, qa = qnet.weight_format, qnet.activation_format
        for layer in self.layers:
            if layer.kernels.shape[1] > slices:
                raise ConfigurationError(
                    f"{layer.name} has {layer.kernels.shape[1]} inputs but only {slices} slices")
        # the fused center tap may exceed the weight width by two bits
        need = accumulator_bits(qw, qa, slices * K * K) + 2
        if need > 63:
            raise ConfigurationError(f"datapath accumulator needs {need} bits (> 63)")
        self.state = FsmState()
        self.cycle = 0

    def _pass(self, ram: PaddingRam, kernels: np.ndarray, trace, layer_idx: int,
              pass_idx: int) -> tuple[np.ndarray, int]:
        hp, wp = ram.padded_shape
        H, W = hp - 2 * PAD, wp - 2 * PAD
        n_k = kernels.shape[0]
        # (kernels, 25 taps, slices) flattened to match the window layout
        kflat = np.zeros((KERNELS_PER_PASS, K * K, self.slices), dtype=np.int64)
        kflat[:n_k, :, :kernels.shape[1]] = kernels.reshape(n_k, kernels.shape[1], K * K) \
            .transpose(0, 2, 1)
        kflat = kflat.reshape(KERNELS_PER_PASS, -1).T
        out = np.zeros((H * W, KERNELS_PER_PASS), dtype=np.int64)
        lb = LineBuffer(wp, self.slices)
        n_out = 0
        for pixel, value in enumerate(ram.stream()):
            if trace is not None and pixel % wp == 0:
                trace.writerow((self.cycle, layer_idx, pass_idx, pixel))
            self.state.pixel = pixel
            lb.push(value)
            i, j = divmod(pixel, wp)
            if i >= K - 1 and j >= K - 1:
                out[n_out] = lb.window().reshape(-1) @ kflat
                n_out += 1
            self.cycle += 1
        return out[:, :n_k], n_out

    def run(self, x) -> SimResult:
        qw, qa = self.qnet.weight_format, self.qnet.activation_format
        if isinstance(x, FixedTensor):
            if x.qformat != qa:
                raise ConfigurationError(
                    f"input is {x.qformat}, network activations are {qa}")
            h = np.asarray(x.raw, dtype=np.int64)
        else:
            h = to_raw(x, qa)
        if h.ndim != 3 or h.shape[2] != self.qnet.in_channels:
            raise ShapeError(f"expected (H, W, {self.qnet.in_channels}) input, got {h.shape}")
        H, W = h.shape[:2]
        acc_frac = qw.fraction_bits + qa.fraction_bits
        self.cycle = 0
        windows = []
        trace_file = open(self.trace_path, "w", newline="") if self.trace_path else None
        trace = csv.writer(trace_file) if trace_file else None
        if trace:
            trace.writerow(("cycle", "layer", "pass", "pixel_index"))
        try:
            for li, layer in enumerate(self.layers):
                self.state = FsmState(layer=li, phase="load")
                ram = PaddingRam(H, W, self.slices)
                ram.write(h)
                self.state.phase = "run"
                n_out = layer.kernels.shape[0]
                inter = np.zeros((H, W, n_out), dtype=np.int64)
                for p in range(math.ceil(n_out / KERNELS_PER_PASS)):
                    self.state.pass_index = p
                    sel = slice(KERNELS_PER_PASS * p, min(KERNELS_PER_PASS * (p + 1), n_out))
                    acc, n_win = self._pass(ram, layer.kernels[sel], trace, li, p)
                    windows.append(n_win)
                    acc = acc + layer.bias[sel] * (1 << qa.fraction_bits)
                    y = requantize(acc, qa, acc_frac)
                    if layer.relu:
                        y = np.maximum(y, 0)
                    inter[:, :, sel] = y.reshape(H, W, -1)
                self.state.phase = "swap"
                h = inter
        finally:
            if trace_file:
                trace_file.close()
        logit = h[..., 0]
        report = cycle_model((H, W), self.qnet, self.clock_hz)
        return SimResult(logistic(logit / qa.scale), logit, report, self.cycle, windows)


def run_network_sim(x, qnet: QuantizedNetwork, clock_hz: float = DEFAULT_CLOCK_HZ,
                    trace_path: str | None = None, slices: int = SLICES) -> SimResult:
    return DatapathSim(qnet, slices, clock_hz, trace_path).run(x)
