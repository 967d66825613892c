"""
Minimal reverse-mode tensor engine over numpy.

Feature maps are laid out channel-major as (C, N, H, W) so that every
spatial tap of a convolution is a single (O x C) @ (C x NHW) matmul. Every op
records a closure on the tape; ``Tape.backward`` replays them in reverse.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape


# ---------------------------------------------------------------------------
# raw array kernels
# ---------------------------------------------------------------------------

def pad_replicate(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")


def unpad_replicate(g: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of pad_replicate: fold border gradients back onto the edge pixels."""
    if p == 0:
        return g
    g = g.copy()
    g[:, :, p, :] += g[:, :, :p, :].sum(axis=2)
    g[:, :, -p - 1, :] += g[:, :, -p:, :].sum(axis=2)
    g = g[:, :, p:-p, :]
    g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
    g[:, :, :, -p - 1] += g[:, :, :, -p:].sum(axis=3)
    return g[:, :, :, p:-p]


_IM2COL_BUDGET = 1 << 23  # max elements in one im2col block


def _row_blocks(rows_per_pixel_row: int, h: int):
    step = max(1, min(h, _IM2COL_BUDGET // max(rows_per_pixel_row, 1)))
    for r0 in range(0, h, step):
        yield r0, min(h, r0 + step)


def _im2col(xp: np.ndarray, k: int, r0: int, r1: int, wd: int) -> np.ndarray:
    """(k*k*C, N*(r1-r0)*W) patch matrix for output rows [r0, r1)."""
    c, n = xp.shape[:2]
    cols = np.empty((k, k, c, n, r1 - r0, wd), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[dy, dx] = xp[:, :, r0 + dy:r1 + dy, dx:dx + wd]
    return cols.reshape(k * k * c, -1)


def conv2d_raw(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """Stride-1 'same' cross-correlation with replicate padding.

    x: (C, N, H, W); w: (O, C, k, k) with odd k; returns (O, N, H, W).
    """
    c, n, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ValueError(f"conv shape mismatch: x{x.shape} w{w.shape}")
    p = k // 2
    xp = pad_replicate(x, p)
    wmat = w.transpose(0, 2, 3, 1).reshape(o, -1)
    y = np.empty((o, n, h, wd), dtype=x.dtype)
    for r0, r1 in _row_blocks(k * k * c * n * wd, h):
        y[:, :, r0:r1, :] = (wmat @ _im2col(xp, k, r0, r1, wd)).reshape(o, n, r1 - r0, wd)
    if b is not None:
        y += b[:, None, None, None]
    return y


def conv2d_grads(x: np.ndarray, w: np.ndarray, gy: np.ndarray):
    """Gradients (dx, dw, db) of conv2d_raw given the output gradient ``gy``."""
    c, n, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = pad_replicate(x, p)
    wmat = w.transpose(0, 2, 3, 1).reshape(o, -1)
    gwmat = np.zeros_like(wmat)
    gxp = np.zeros_like(xp)
    for r0, r1 in _row_blocks(k * k * c * n * wd, h):
        g2 = gy[:, :, r0:r1, :].reshape(o, -1)
        gwmat += g2 @ _im2col(xp, k, r0, r1, wd).T
        gcols = (wmat.T @ g2).reshape(k, k, c, n, r1 - r0, wd)
        for dy in range(k):
            for dx in range(k):
                gxp[:, :, r0 + dy:r1 + dy, dx:dx + wd] += gcols[dy, dx]
    gw = gwmat.reshape(o, k, k, c).transpose(0, 3, 1, 2)
    return unpad_replicate(gxp, p), np.ascontiguousarray(gw), gy.sum(axis=(1, 2, 3))


def depthwise_raw(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same fixed 3x3 kernel applied to every channel, replicate padding."""
    _, _, h, w = x.shape
    xp = pad_replicate(x, 1)
    y = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            if kernel[dy, dx] != 0.0:
                y += kernel[dy, dx] * xp[:, :, dy:dy + h, dx:dx + w]
    return y


def depthwise_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    _, _, h, w = g.shape
    gp = np.zeros(g.shape[:2] + (h + 2, w + 2), dtype=g.dtype)
    for dy in range(3):
        for dx in range(3):
            if kernel[dy, dx] != 0.0:
                gp[:, :, dy:dy + h, dx:dx + w] += kernel[dy, dx] * g
    return unpad_replicate(gp, 1)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class Tape:
    """Records ops in execution order; backward walks the record in reverse."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: List[Node] = []

    def _push(self, value, parents, backward_fn, name=None) -> Node:
        check_finite(value, name or "activation")
        node = Node(value, tuple(parents), backward_fn if self.record else None, name)
        if self.record:
            self.nodes.append(node)
        return node

    def leaf(self, value, name=None) -> Node:
        return Node(value, (), None, name)

    def backward(self, *seeds) -> None:
        """Propagate from one or more ``(node, gradient)`` seeds."""
        for out, grad in seeds:
            out.grad = grad if out.grad is None else out.grad + grad
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- ops ---------------------------------------------------------------

    def conv2d(self, x: Node, w: Node, b: Optional[Node] = None, name=None) -> Node:
        y = conv2d_raw(x.value, w.value, None if b is None else b.value)

        def back(g):
            gx, gw, gb = conv2d_grads(x.value, w.value, g)
            return (gx, gw, gb) if b is not None else (gx, gw)

        parents = (x, w, b) if b is not None else (x, w)
        return self._push(y, parents, back, name)

    def lrelu(self, x: Node, slope: float) -> Node:
        pos = x.value > 0
        y = np.where(pos, x.value, slope * x.value)
        return self._push(y, (x,), lambda g: (np.where(pos, g, slope * g),), "lrelu")

    def tanh(self, x: Node) -> Node:
        t = np.tanh(x.value)
        return self._push(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")

    def affine(self, x: Node, scale: float, shift: float) -> Node:
        return self._push(x.value * scale + shift, (x,), lambda g: (g * scale,), "affine")

    def add(self, a: Node, b: Node) -> Node:
        return self._push(a.value + b.value, (a, b), lambda g: (g, g), "add")

    def concat(self, xs: Sequence[Node], axis: int = 0) -> Node:
        sizes = [x.value.shape[axis] for x in xs]
        splits = np.cumsum(sizes)[:-1]
        y = np.concatenate([x.value for x in xs], axis=axis)
        return self._push(y, xs, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")

    def depthwise(self, x: Node, kernel: np.ndarray) -> Node:
        y = depthwise_raw(x.value, kernel)
        return self._push(y, (x,), lambda g: (depthwise_adjoint(g, kernel),), "depthwise")

    def gap(self, x: Node) -> Node:
        """Global average pool: (C, N, H, W) -> (N, C)."""
        c, n, h, w = x.value.shape
        y = x.value.mean(axis=(2, 3)).T

        def back(g):
            return (np.broadcast_to(g.T[:, :, None, None] / (h * w), (c, n, h, w)).copy(),)

        return self._push(y, (x,), back, "gap")

    def linear(self, z: Node, w: Node) -> Node:
        """z (N, in) times w (out, in) transposed."""
        y = z.value @ w.value.T
        return self._push(y, (z, w), lambda g: (g @ w.value, g.T @ z.value), "linear")

    def softmax(self, x: Node) -> Node:
        e = np.exp(x.value - x.value.max(axis=1, keepdims=True))
        s = e / e.sum(axis=1, keepdims=True)

        def back(g):
            return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

        return self._push(s, (x,), back, "softmax")

    def weighted_sum(self, alpha: Node, xs: Sequence[Node]) -> Node:
        """sum_m alpha[n, m] * xs[m][c, n] for (C, N, H, W) maps."""
        a = alpha.value
        y = sum(a[None, :, m, None, None] * x.value for m, x in enumerate(xs))

        def back(g):
            ga = np.stack([(g * x.value).sum(axis=(0, 2, 3)) for x in xs], axis=1)
            return (ga,) + tuple(a[None, :, m, None, None] * g for m in range(len(xs)))

        return self._push(y, (alpha,) + tuple(xs), back, "weighted_sum")
