"""ChipNet layers and forward inference.

Feature maps are ``(H, W, C)`` arrays, kernels are ``(out, in, kh, kw)``.
Every convolution is zero-padded so the spatial size never changes.

Network topology::

    encoder   5x5, 14 -> C, ReLU
    block xK  x + conv3x3(x) + conv3x3_dilated2(x), ReLU
    output    1x1, C -> 1, logistic
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ShapeError
from .fixedpoint import (
    ACTIVATION_FORMAT,
    WEIGHT_FORMAT,
    QFormat,
    accumulator_bits,
    accumulator_dtype,
    requantize,
    to_raw,
)
from .spherical import N_CHANNELS


@dataclass
class ConvParams:
    kernel: np.ndarray
    bias: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be (out, in, kh, kw), got {self.kernel.shape}")
        kh, kw = self.kernel.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("only centered (odd-sized) kernels are supported")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.kernel.shape[0]} outputs")
        if self.dilation < 1:
            raise ShapeError("dilation must be a positive integer")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def ksize(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]

    @classmethod
    def zeros(cls, out_ch: int, in_ch: int, k: int, dilation: int = 1, dtype=np.float64):
        return cls(np.zeros((out_ch, in_ch, k, k), dtype=dtype), np.zeros(out_ch, dtype=dtype),
                   dilation)


@dataclass
class ChipNetBlockParams:
    dense3: ConvParams
    dilated3: ConvParams

    def __post_init__(self):
        for p, dil in ((self.dense3, 1), (self.dilated3, 2)):
            if p.ksize != (3, 3) or p.dilation != dil:
                raise ShapeError("block branches must be 3x3 (dense) and 3x3 dilation 2")
            if p.out_channels != p.in_channels:
                raise ShapeError("block branches must map C channels to C channels")
        if self.dense3.kernel.shape != self.dilated3.kernel.shape:
            raise ShapeError("block branches disagree on channel count")

    @property
    def channels(self) -> int:
        return self.dense3.out_channels


@dataclass
class Network:
    encoder: ConvParams
    blocks: list[ChipNetBlockParams]
    output: ConvParams

    def __post_init__(self):
        c = self.encoder.out_channels
        if any(b.channels != c for b in self.blocks) or self.output.in_channels != c:
            raise ShapeError("layer channel counts do not chain")
        if self.output.out_channels != 1 or self.output.ksize != (1, 1):
            raise ShapeError("output layer must be a 1x1 convolution to one channel")

    @property
    def channels(self) -> int:
        return self.encoder.out_channels

    @property
    def in_channels(self) -> int:
        return self.encoder.in_channels

    def conv_layers(self) -> list[ConvParams]:
        layers = [self.encoder]
        for b in self.blocks:
            layers += [b.dense3, b.dilated3]
        return layers + [self.output]

    def copy(self) -> "Network":
        def c(p):
            return ConvParams(p.kernel.copy(), p.bias.copy(), p.dilation)
        return Network(c(self.encoder),
                       [ChipNetBlockParams(c(b.dense3), c(b.dilated3)) for b in self.blocks],
                       c(self.output))


def glorot_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int, dilation: int = 1):
    fan_in, fan_out = in_ch * k * k, out_ch * k * k
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    kernel = rng.uniform(-limit, limit, size=(out_ch, in_ch, k, k))
    return ConvParams(kernel, np.zeros(out_ch), dilation)


def init_network(rng: np.random.Generator | int | None = None, in_channels: int = N_CHANNELS,
                 channels: int = 64, n_blocks: int = 10) -> Network:
    rng = np.random.default_rng(rng)
    enc = glorot_conv(rng, channels, in_channels, 5)
    blocks = [ChipNetBlockParams(glorot_conv(rng, channels, channels, 3, 1),
                                 glorot_conv(rng, channels, channels, 3, 2))
              for _ in range(n_blocks)]
    out = glorot_conv(rng, 1, channels, 1)
    return Network(enc, blocks, out)


def conv2d_raw(x: np.ndarray, kernel: np.ndarray, bias, dilation: int = 1,
               dtype=None) -> np.ndarray:
    """Zero-padded same-size convolution (cross-correlation) on ``(H, W, C)`` input.

    Arithmetic happens in ``dtype`` (default: the input's dtype), so integer
    inputs give exact integer accumulators.
    """
    if x.ndim != 3:
        raise ShapeError(f"input must be (H, W, C), got {x.shape}")
    H, W, C = x.shape
    O, I, kh, kw = kernel.shape
    if C != I:
        raise ShapeError(f"input has {C} channels, kernel expects {I}")
    dtype = dtype or x.dtype
    d = dilation
    ph, pw = d * (kh // 2), d * (kw // 2)
    xp = np.pad(x.astype(dtype, copy=False), ((ph, ph), (pw, pw), (0, 0)))
    k = kernel.astype(dtype, copy=False)
    out = np.zeros((H * W, O), dtype=dtype)
    for ky in range(kh):
        for kx in range(kw):
            tap = k[:, :, ky, kx]
            if dtype is not object and not tap.any():
                continue
            patch = xp[ky * d:ky * d + H, kx * d:kx * d + W, :].reshape(H * W, C)
            out += patch @ tap.T
    out += np.asarray(bias).astype(dtype, copy=False)
    return out.reshape(H, W, O)


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    return conv2d_raw(x, p.kernel, p.bias, p.dilation)


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0)


def block_forward(x: np.ndarray, p: ChipNetBlockParams, activation: bool = True) -> np.ndarray:
    if x.ndim != 3 or x.shape[2] != p.channels:
        raise ShapeError(f"block expects (H, W, {p.channels}) input, got {x.shape}")
    y = x + conv2d(x, p.dense3) + conv2d(x, p.dilated3)
    return relu(y) if activation else y


def fuse_block_to_5x5(p: ChipNetBlockParams) -> ConvParams:
    """Single 5x5 convolution equal to identity + dense 3x3 + dilated 3x3.

    Dense taps fill the central 3x3 window, dilated taps the even positions
    ``{0, 2, 4} x {0, 2, 4}``; the center collects both center taps plus the
    identity (1 on the channel diagonal).
    """
    C = p.channels
    dtype = np.result_type(p.dense3.kernel, p.dilated3.kernel)
    k = np.zeros((C, C, 5, 5), dtype=dtype)
    k[:, :, 1:4, 1:4] += p.dense3.kernel
    k[:, :, 0::2, 0::2] += p.dilated3.kernel
    k[np.arange(C), np.arange(C), 2, 2] += 1
    return ConvParams(k, p.dense3.bias + p.dilated3.bias, 1)


def logistic(z):
    return expit(z)


def network_forward(x: np.ndarray, net: Network,
                    formats: tuple[QFormat, QFormat] | None = None) -> np.ndarray:
    """Probability map ``(H, W)`` in float64.

    With ``formats=(weight_format, activation_format)`` the pass runs in
    fixed point (see :func:`fixed_forward`).
    """
    _check_input(x, net.in_channels)
    if formats is not None:
        return fixed_forward(x, quantize_network(net, *formats)).prob
    h = relu(conv2d(np.asarray(x, dtype=np.float64), net.encoder))
    for b in net.blocks:
        h = block_forward(h, b)
    return logistic(conv2d(h, net.output)[..., 0])


def _check_input(x, in_channels):
    if x.ndim != 3 or x.shape[2] != in_channels:
        raise ShapeError(f"network expects (H, W, {in_channels}) input, got {x.shape}")


# --- fixed point -----------------------------------------------------------


@dataclass
class QuantizedNetwork:
    """Network whose kernels and biases are raw integers in ``weight_format``."""

    encoder: ConvParams
    blocks: list[ChipNetBlockParams]
    output: ConvParams
    weight_format: QFormat = WEIGHT_FORMAT
    activation_format: QFormat = ACTIVATION_FORMAT

    @property
    def channels(self) -> int:
        return self.encoder.out_channels

    @property
    def in_channels(self) -> int:
        return self.encoder.in_channels

    def conv_layers(self) -> list[ConvParams]:
        return Network.conv_layers(self)

    def as_network(self) -> Network:
        """Dequantized float view (same topology)."""
        s = float(self.weight_format.scale)

        def f(p):
            return ConvParams(p.kernel / s, p.bias / s, p.dilation)
        return Network(f(self.encoder),
                       [ChipNetBlockParams(f(b.dense3), f(b.dilated3)) for b in self.blocks],
                       f(self.output))


def quantize_network(net: Network, weight_format: QFormat = WEIGHT_FORMAT,
                     activation_format: QFormat = ACTIVATION_FORMAT) -> QuantizedNetwork:
    def q(p):
        return ConvParams(to_raw(p.kernel, weight_format), to_raw(p.bias, weight_format),
                          p.dilation)
    return QuantizedNetwork(q(net.encoder),
                            [ChipNetBlockParams(q(b.dense3), q(b.dilated3)) for b in net.blocks],
                            q(net.output), weight_format, activation_format)


def conv_acc_dtype(qw: QFormat, qa: QFormat, taps: int):
    return accumulator_dtype(accumulator_bits(qw, qa, taps))


def fixed_conv_acc(x_raw: np.ndarray, p: ConvParams, qw: QFormat, qa: QFormat,
                   dtype=None) -> np.ndarray:
    """Integer accumulator (``qw.F + qa.F`` fraction bits) of one convolution incl. bias."""
    kh, kw = p.ksize
    dtype = dtype or conv_acc_dtype(qw, qa, p.in_channels * kh * kw + 1)
    bias = np.asarray(p.bias).astype(dtype) * (1 << qa.fraction_bits)
    return conv2d_raw(x_raw, p.kernel, bias, p.dilation, dtype=dtype)


def fixed_block_acc(h_raw: np.ndarray, b: ChipNetBlockParams, qw: QFormat,
                    qa: QFormat) -> np.ndarray:
    dtype = conv_acc_dtype(qw, qa, 2 * 9 * b.channels + 3)
    identity = h_raw.astype(dtype) * (1 << qw.fraction_bits)
    return (identity + fixed_conv_acc(h_raw, b.dense3, qw, qa, dtype)
            + fixed_conv_acc(h_raw, b.dilated3, qw, qa, dtype))


@dataclass
class FixedOutput:
    prob: np.ndarray
    logit_raw: np.ndarray
    activations: list[np.ndarray] = field(default_factory=list, repr=False)


def fixed_forward(x: np.ndarray, qnet: QuantizedNetwork, keep_activations: bool = False,
                  input_is_raw: bool = False) -> FixedOutput:
    """Bit-exact fixed-point pass.

    Every convolution accumulates exact integer products, adds the bias
    aligned to the accumulator, and is requantized once to the activation
    format; ReLU follows. The logit is requantized the same way and squashed
    in floating point.
    """
    qw, qa = qnet.weight_format, qnet.activation_format
    _check_input(x, qnet.in_channels)
    acc_frac = qw.fraction_bits + qa.fraction_bits
    h = np.asarray(x, dtype=np.int64) if input_is_raw else to_raw(x, qa)
    acts = [h] if keep_activations else []

    def settle(acc):
        return np.maximum(requantize(acc, qa, acc_frac), 0).astype(np.int64)

    h = settle(fixed_conv_acc(h, qnet.encoder, qw, qa))
    if keep_activations:
        acts.append(h)
    for b in qnet.blocks:
        h = settle(fixed_block_acc(h, b, qw, qa))
        if keep_activations:
            acts.append(h)
    logit = requantize(fixed_conv_acc(h, qnet.output, qw, qa), qa, acc_frac)[..., 0]
    logit = np.asarray(logit, dtype=np.int64)
    return FixedOutput(logistic(logit / qa.scale), logit, acts)


# --- counting --------------------------------------------------------------


def count_params(layer) -> int:
    if isinstance(layer, ConvParams):
        return int(layer.kernel.size + layer.bias.size)
    if isinstance(layer, ChipNetBlockParams):
        return count_params(layer.dense3) + count_params(layer.dilated3)
    if isinstance(layer, (Network, QuantizedNetwork)):
        return (count_params(layer.encoder) + sum(count_params(b) for b in layer.blocks)
                + count_params(layer.output))
    raise TypeError(f"cannot count parameters of {type(layer).__name__}")


def count_mults(layer, height: int, width: int) -> int:
    """Multiplications for one zero-padded, same-size pass over an ``height x width`` map."""
    if isinstance(layer, ConvParams):
        o, i, kh, kw = layer.kernel.shape
        return o * i * kh * kw * height * width
    if isinstance(layer, ChipNetBlockParams):
        return count_mults(layer.dense3, height, width) + count_mults(layer.dilated3, height, width)
    if isinstance(layer, (Network, QuantizedNetwork)):
        return (count_mults(layer.encoder, height, width)
                + sum(count_mults(b, height, width) for b in layer.blocks)
                + count_mults(layer.output, height, width))
    raise TypeError(f"cannot count multiplications of {type(layer).__name__}")
