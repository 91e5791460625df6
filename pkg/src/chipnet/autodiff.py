"""A small reverse-mode tape over numpy arrays.

Only the operations ChipNet needs are provided: convolution, ReLU, addition,
logistic, reshape and the straight-through quantizer. All tape arithmetic
is float64.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .cnn import conv2d_raw
from .errors import StateError
from .fixedpoint import QFormat, fake_quantize


class Var:
    __slots__ = ("value", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


Edge = tuple[Var, Callable[[np.ndarray], np.ndarray]]


class Tape:
    """Records operations in order; :meth:`backward` replays them in reverse."""

    def __init__(self):
        self._nodes: list[tuple[Var, list[Edge]]] = []

    def __len__(self):
        return len(self._nodes)

    def _emit(self, value, edges: list[Edge]) -> Var:
        edges = [(v, fn) for v, fn in edges if v.requires_grad]
        out = Var(value, requires_grad=bool(edges))
        if edges:
            self._nodes.append((out, edges))
        return out

    # -- operations ---------------------------------------------------------

    def conv2d(self, x: Var, w: Var, b: Var, dilation: int = 1) -> Var:
        xv, wv = x.value, w.value
        H, W, C = xv.shape
        O, _, kh, kw = wv.shape
        d = dilation
        ph, pw = d * (kh // 2), d * (kw // 2)
        y = conv2d_raw(xv, wv, b.value, d)

        def taps():
            for ky in range(kh):
                for kx in range(kw):
                    yield ky, kx, slice(ky * d, ky * d + H), slice(kx * d, kx * d + W)

        def grad_x(g):
            g2 = g.reshape(H * W, O)
            gxp = np.zeros((H + 2 * ph, W + 2 * pw, C))
            for ky, kx, sy, sx in taps():
                gxp[sy, sx, :] += (g2 @ wv[:, :, ky, kx]).reshape(H, W, C)
            return gxp[ph:ph + H, pw:pw + W, :]

        def grad_w(g):
            g2 = g.reshape(H * W, O)
            xp = np.pad(xv, ((ph, ph), (pw, pw), (0, 0)))
            gw = np.zeros_like(wv)
            for ky, kx, sy, sx in taps():
                gw[:, :, ky, kx] = g2.T @ xp[sy, sx, :].reshape(H * W, C)
            return gw

        return self._emit(y, [(x, grad_x), (w, grad_w), (b, lambda g: g.sum(axis=(0, 1)))])

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        return self._emit(np.where(mask, x.value, 0.0), [(x, lambda g: g * mask)])

    def add(self, *xs: Var) -> Var:
        total = xs[0].value.copy()
        for v in xs[1:]:
            total = total + v.value
        return self._emit(total, [(v, lambda g: g) for v in xs])

    def logistic(self, x: Var) -> Var:
        p = 1.0 / (1.0 + np.exp(-np.clip(x.value, -500, 500)))
        return self._emit(p, [(x, lambda g: g * p * (1.0 - p))])

    def reshape(self, x: Var, shape) -> Var:
        old = x.value.shape
        return self._emit(x.value.reshape(shape), [(x, lambda g: g.reshape(old))])

    def ste_quantize(self, x: Var, q: QFormat) -> Var:
        """Forward: value on the ``q`` grid. Backward: the upstream gradient, unchanged.

        Equivalent to ``x + stop_gradient(quantize(x) - x)``.
        """
        return self._emit(fake_quantize(x.value, q), [(x, lambda g: g)])

    # -- reverse pass -------------------------------------------------------

    def backward(self, out: Var, grad) -> dict[int, np.ndarray]:
        """Gradients keyed by ``id(var)`` for every ``requires_grad`` leaf reached."""
        if not self._nodes:
            raise StateError("backward called before any forward operation was recorded")
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=np.float64)}
        for node, edges in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, fn in edges:
                contrib = fn(g)
                key = id(parent)
                grads[key] = grads[key] + contrib if key in grads else contrib
        return grads


def backward(tape: Tape, out: Var, loss_grad, params: list[Var]) -> list[np.ndarray]:
    """Gradient of the loss for each parameter (zeros for unreached ones)."""
    grads = tape.backward(out, loss_grad)
    return [grads.get(id(p), np.zeros_like(p.value)) for p in params]
