"""Desk-scale training: cross entropy, Adam, and simulated quantization.

Training runs one frame per step (batch size 1). In quantized mode the
forward pass sees weights, biases and activations on their fixed-point
grids while gradients flow straight through to float64 master weights.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var, backward
from .cnn import ChipNetBlockParams, ConvParams, Network, init_network
from .errors import DomainError, ShapeError
from .fixedpoint import QFormat, default_formats, fake_quantize

log = logging.getLogger(__name__)

CE_EPS = 1e-7


def cross_entropy(pred: np.ndarray, target: np.ndarray,
                  eps: float = CE_EPS) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy and its derivative w.r.t. ``pred``.

    ``pred`` is clamped to ``[eps, 1 - eps]`` before the logarithms; the
    derivative is the analytic one evaluated at the clamped value.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    p = np.clip(pred, eps, 1.0 - eps)
    n = p.size
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    grad = (p - target) / (p * (1.0 - p)) / n
    return float(loss), grad


# --- parameters <-> network ------------------------------------------------


def network_arrays(net: Network) -> list[np.ndarray]:
    """Flat parameter list: kernel, bias for each convolution in layer order."""
    out = []
    for p in net.conv_layers():
        out += [p.kernel, p.bias]
    return out


def network_from_arrays(template: Network, arrays: list[np.ndarray]) -> Network:
    it = iter(arrays)

    def nxt(p):
        return ConvParams(np.array(next(it), dtype=np.float64), np.array(next(it), dtype=np.float64),
                          p.dilation)
    enc = nxt(template.encoder)
    blocks = [ChipNetBlockParams(nxt(b.dense3), nxt(b.dilated3)) for b in template.blocks]
    return Network(enc, blocks, nxt(template.output))


def forward_tape(tape: Tape, x: np.ndarray, net: Network, params: list[Var],
                 formats: tuple[QFormat, QFormat] | None = None) -> Var:
    """Record a forward pass; returns the ``(H, W)`` probability variable.

    ``params`` follows :func:`network_arrays` order.
    """
    qw, qa = formats if formats is not None else (None, None)
    it = iter(params)

    def weights():
        k, b = next(it), next(it)
        if qw is not None:
            k, b = tape.ste_quantize(k, qw), tape.ste_quantize(b, qw)
        return k, b

    def act(v):
        v = tape.relu(v)
        return tape.ste_quantize(v, qa) if qa is not None else v

    x = np.asarray(x, dtype=np.float64)
    h = Var(fake_quantize(x, qa) if qa is not None else x)
    k, b = weights()
    h = act(tape.conv2d(h, k, b, net.encoder.dilation))
    for _ in net.blocks:
        kd, bd = weights()
        kl, bl = weights()
        h = act(tape.add(h, tape.conv2d(h, kd, bd, 1), tape.conv2d(h, kl, bl, 2)))
    k, b = weights()
    z = tape.conv2d(h, k, b, 1)
    if qa is not None:
        z = tape.ste_quantize(z, qa)
    H, W = x.shape[:2]
    return tape.logistic(tape.reshape(z, (H, W)))


# --- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray]) -> tuple[list[np.ndarray], AdamState]:
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        m_new.append(m)
        v_new.append(v)
    return new_params, AdamState(m_new, v_new, t, state.learning_rate, b1, b2, state.epsilon)


# --- training loop ---------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    f1: float


@dataclass
class TrainResult:
    network: Network
    history: list[EpochRecord] = field(default_factory=list)
    adam: AdamState | None = None


def _f1(tp, fp, fn) -> float:
    return 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0


def train_toy(dataset, epochs: int, quantized: bool = False,
              formats: tuple[QFormat, QFormat] | None = None, net: Network | None = None,
              seed: int = 0, channels: int = 8, n_blocks: int = 2,
              threshold: float = 0.5) -> TrainResult:
    """Train on ``(tensor, label)`` pairs with Adam at default settings.

    ``net`` continues from existing weights (the fine-tuning stage); otherwise
    a fresh network is initialized from ``seed``. Returns the trained network
    and one history record per epoch (mean loss, training F1 at ``threshold``).
    """
    if not dataset:
        raise DomainError("training needs a non-empty dataset")
    shape = dataset[0][0].shape
    if any(x.shape != shape or y.shape != shape[:2] for x, y in dataset):
        raise ShapeError("dataset frames have inconsistent shapes")
    rng = np.random.default_rng(seed)
    if net is None:
        net = init_network(rng, in_channels=shape[2], channels=channels, n_blocks=n_blocks)
    if quantized and formats is None:
        formats = default_formats(18)
    fmt = formats if quantized else None
    arrays = [a.astype(np.float64) for a in network_arrays(net)]
    state = AdamState.for_params(arrays)
    history = []
    for epoch in range(1, epochs + 1):
        total, tp, fp, fn = 0.0, 0, 0, 0
        for i in rng.permutation(len(dataset)):
            x, y = dataset[i]
            tape = Tape()
            params = [Var(a, requires_grad=True) for a in arrays]
            prob = forward_tape(tape, x, net, params, fmt)
            loss, g = cross_entropy(prob.value, y)
            grads = backward(tape, prob, g, params)
            arrays, state = adam_step(state, arrays, grads)
            total += loss
            pred = prob.value >= threshold
            pos = y > 0.5
            tp += int(np.count_nonzero(pred & pos))
            fp += int(np.count_nonzero(pred & ~pos))
            fn += int(np.count_nonzero(~pred & pos))
        rec = EpochRecord(epoch, total / len(dataset), _f1(tp, fp, fn))
        if not math.isfinite(rec.loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        log.info("epoch %d loss %.5f f1 %.4f", rec.epoch, rec.loss, rec.f1)
        history.append(rec)
    return TrainResult(network_from_arrays(net, arrays), history, state)
