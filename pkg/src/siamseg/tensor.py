"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive the network and its losses need (convolution, resampling,
reductions, the row-cosine / top-k aggregation ops used by label transfer)
carries an exact backward rule. Data is numpy float64 throughout; given
identical inputs and a single thread, execution is bit-deterministic.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients.

    `grad` accumulates the sum of contributions from every consumer during
    `backward()`. Tensors are treated as immutable after creation; only the
    optimizer mutates `.data` in place, between graph constructions.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data with no graph history."""
        return Tensor(self.data)

    def backward(self, seed=None) -> None:
        """Reverse-mode sweep from this node.

        Operations are revisited in reverse topological order, so a node's
        gradient is fully accumulated before its own rule fires. A tensor
        consumed by k operations therefore receives the sum of k
        contributions.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError(f"seed shape {seed.shape} != tensor shape {self.data.shape}")

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        _accum(self, seed)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _node(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), backward)


def add_n(tensors) -> Tensor:
    """Sum of same-shape tensors; each input receives the output gradient."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("add_n: empty input")
    for t in tensors[1:]:
        _check_same_shape(tensors[0], t, "add_n")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data

    def backward(g):
        for t in tensors:
            _accum(t, g)

    return _node(out, tensors, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        _accum(a, g * s)

    return _node(a.data * s, (a,), backward)


class ReluFreezer:
    """Records relu activation masks on one pass and replays them on later
    passes (gradient-verification aid: replaying pins the kinks to the base
    point, which is exactly the linearization backward uses)."""

    def __init__(self):
        self.masks = []
        self.replaying = False
        self.pos = 0

    def start_replay(self) -> None:
        self.replaying = True
        self.pos = 0

    def mask_for(self, data: np.ndarray) -> np.ndarray:
        if not self.replaying:
            m = data > 0.0
            self.masks.append(m)
            return m
        m = self.masks[self.pos]
        self.pos += 1
        return m


_ACTIVE_RELU_FREEZER = None


@contextmanager
def relu_frozen(freezer: ReluFreezer):
    global _ACTIVE_RELU_FREEZER
    prev = _ACTIVE_RELU_FREEZER
    _ACTIVE_RELU_FREEZER = freezer
    try:
        yield freezer
    finally:
        _ACTIVE_RELU_FREEZER = prev


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if _ACTIVE_RELU_FREEZER is not None:
        mask = _ACTIVE_RELU_FREEZER.mask_for(a.data)
    else:
        mask = a.data > 0.0

    def backward(g):
        _accum(a, g * mask)

    return _node(mask * a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _node(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    """Natural log; the domain is strictly positive values.

    Consumers that may see zeros (the cross-entropy losses) must clamp
    first; an unguarded non-positive input is an error, not a NaN.
    """
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive input outside a clamped context")

    def backward(g):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo) elementwise; gradient passes only where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo

    def backward(g):
        _accum(a, g * mask)

    return _node(np.maximum(a.data, lo), (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), backward)


def tmean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), backward)


def tmax(a: Tensor) -> Tensor:
    """Global maximum. The subgradient routes to the first (row-major)
    occurrence of the max, which keeps backward deterministic under ties."""
    a = as_tensor(a)
    flat_idx = int(np.argmax(a.data))

    def backward(g):
        ga = np.zeros_like(a.data)
        ga.flat[flat_idx] = float(g)
        _accum(a, ga)

    return _node(np.asarray(a.data.max()), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose2d(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose2d: expected 2-d, got {a.data.shape}")

    def backward(g):
        _accum(a, g.T)

    return _node(np.ascontiguousarray(a.data.T), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# softmax / normalization
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along `axis` (max-subtracted before exponentiation)."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _node(y, (x,), backward)


def softmax_channel(x: Tensor) -> Tensor:
    """Per-location channel softmax for NCHW tensors."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"softmax_channel: expected NCHW, got {x.data.shape}")
    return softmax(x, axis=1)


def normalize_channel(x: Tensor, axis: int = 1) -> Tensor:
    """Rescale along `axis` so slices sum to one. Input must be positive."""
    x = as_tensor(x)
    s = x.data.sum(axis=axis, keepdims=True)
    if np.any(s <= 0.0):
        raise ValueError("normalize_channel: non-positive channel sum")
    y = x.data / s

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, (g - dot) / s)

    return _node(y, (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # xp: padded (N, C, Hp, Wp) -> (N, C*k*k, oh*ow)
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k * k, oh * ow), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
            cols[:, :, ki * k + kj, :] = patch.reshape(n, c, oh * ow)
    return cols.reshape(n, c * k * k, oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with OIkk weights plus bias.

    Output spatial extent is floor((H + 2p - k)/stride) + 1. Differentiable
    with respect to input, weight and bias; the input patch matrix is
    recomputed in backward rather than stored.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be NCHW, got {x.data.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d: weight must be OIkk, got {w.data.shape}")
    n, c, h, wid = x.data.shape
    o, i, kh, kw = w.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square odd, got {kh}x{kw}")
    if i != c:
        raise ValueError(f"conv2d: weight expects {i} input channels, input has {c}")
    if b.data.shape != (o,):
        raise ValueError(f"conv2d: bias shape {b.data.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1, padding >= 0")
    k = kh
    if h + 2 * padding < k or wid + 2 * padding < k:
        raise ValueError(
            f"conv2d: spatial dims {h}x{wid} with padding {padding} smaller than kernel {k}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wid + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, oh, ow)
    w2 = w.data.reshape(o, c * k * k)
    out = np.matmul(w2, cols) + b.data[:, None]
    out = out.reshape(n, o, oh, ow)

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        if b.requires_grad:
            _accum(b, g2.sum(axis=(0, 2)))
        if w.requires_grad:
            cols_b = _im2col(np.pad(x.data, ((0, 0), (0, 0), (padding, padding),
                                             (padding, padding))), k, stride, oh, ow)
            gw = np.einsum("nol,nkl->ok", g2, cols_b)
            _accum(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)  # (n, c*k*k, oh*ow)
            dcols = dcols.reshape(n, c, k * k, oh * ow)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                        dcols[:, :, ki * k + kj, :].reshape(n, c, oh, ow)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wid]
            _accum(x, gxp)

    return _node(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

_INTERP_CACHE: dict = {}


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row-stochastic bilinear weights mapping n_in samples to n_in*factor.

    Half-pixel-centre convention: output sample i reads source coordinate
    (i + 0.5)/factor - 0.5, clamped at the borders.
    """
    key = (n_in, factor)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for io in range(n_out):
        src = (io + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        m[io, lo] += 1.0 - t
        m[io, hi] += t
    _INTERP_CACHE[key] = m
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of an NCHW tensor by an integer factor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"upsample_bilinear: expected NCHW, got {x.data.shape}")
    if factor < 1:
        raise ValueError("upsample_bilinear: factor must be >= 1")
    if factor == 1:
        return reshape(x, x.data.shape)
    h, w = x.data.shape[2:]
    wh = _interp_matrix(h, factor)
    ww = _interp_matrix(w, factor)
    out = np.matmul(np.matmul(wh, x.data), ww.T)

    def backward(g):
        _accum(x, np.matmul(np.matmul(wh.T, g), ww))

    return _node(out, (x,), backward)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping factor x factor mean pooling of an NCHW tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"avg_pool: expected NCHW, got {x.data.shape}")
    if factor < 1:
        raise ValueError("avg_pool: factor must be >= 1")
    n, c, h, w = x.data.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool: dims {h}x{w} not divisible by {factor}")
    if factor == 1:
        return reshape(x, x.data.shape)
    oh, ow = h // factor, w // factor
    out = x.data.reshape(n, c, oh, factor, ow, factor).mean(axis=(3, 5))
    inv = 1.0 / (factor * factor)

    def backward(g):
        gx = np.repeat(np.repeat(g * inv, factor, axis=2), factor, axis=3)
        _accum(x, gx)

    return _node(out, (x,), backward)


def downsample_nearest_labels(y: np.ndarray, factor: int) -> np.ndarray:
    """Label-map downsampling; keeps the top-left cell representative."""
    y = np.asarray(y)
    if factor < 1:
        raise ValueError("downsample_nearest_labels: factor must be >= 1")
    if factor == 1:
        return y.copy()
    h, w = y.shape
    if h % factor or w % factor:
        raise ValueError(f"downsample_nearest_labels: dims {h}x{w} not divisible by {factor}")
    return y[0::factor, 0::factor].copy()


# ---------------------------------------------------------------------------
# similarity / aggregation primitives for label transfer
# ---------------------------------------------------------------------------

def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine of the rows of a (Na, D) and b (Nb, D).

    A zero-norm row has cosine 0 against everything (and zero gradient),
    so degenerate constant features never produce NaN.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ValueError(
            f"cosine_rows: incompatible shapes {a.data.shape} vs {b.data.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    inv_a = np.where(na > 0.0, 1.0 / np.where(na > 0.0, na, 1.0), 0.0)
    inv_b = np.where(nb > 0.0, 1.0 / np.where(nb > 0.0, nb, 1.0), 0.0)
    u = a.data * inv_a[:, None]
    v = b.data * inv_b[:, None]
    m = u @ v.T

    def backward(g):
        if a.requires_grad:
            t = (g * m).sum(axis=1, keepdims=True)
            _accum(a, (g @ v - t * u) * inv_a[:, None])
        if b.requires_grad:
            t = (g * m).sum(axis=0)[:, None]
            _accum(b, (g.T @ u - t * v) * inv_b[:, None])

    return _node(m, (a, b), backward)


def topk_rows_aggregate(m: Tensor, y: Tensor, k: int) -> Tensor:
    """Per target row i: mean over its k best-matching source columns of
    score-weighted class vectors, (1/k) * sum_j m[i,j] * y[j].

    Selection uses the stored values only (ties broken by the lower column
    index) and is held constant in backward; gradients flow through the
    selected scores and through y.
    """
    m, y = as_tensor(m), as_tensor(y)
    if m.ndim != 2 or y.ndim != 2 or m.data.shape[1] != y.data.shape[0]:
        raise ValueError(
            f"topk_rows_aggregate: incompatible shapes {m.data.shape} vs {y.data.shape}")
    n_src = m.data.shape[1]
    if not 1 <= k <= n_src:
        raise ValueError(f"topk_rows_aggregate: k={k} out of range [1, {n_src}]")
    # stable argsort of the negated row puts higher scores first, equal
    # scores by ascending column index
    order = np.argsort(-m.data, axis=1, kind="stable")[:, :k]
    scores = np.take_along_axis(m.data, order, axis=1)  # (Nt, k)
    ysel = y.data[order]                                # (Nt, k, C)
    out = (scores[:, :, None] * ysel).sum(axis=1) / k

    def backward(g):
        if m.requires_grad:
            contrib = (ysel * g[:, None, :]).sum(axis=2) / k
            gm = np.zeros_like(m.data)
            np.put_along_axis(gm, order, contrib, axis=1)
            _accum(m, gm)
        if y.requires_grad:
            gy = np.zeros_like(y.data)
            np.add.at(gy, order.ravel(),
                      (scores[:, :, None] * g[:, None, :]).reshape(-1, y.data.shape[1]) / k)
            _accum(y, gy)

    return _node(out, (m, y), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
                      lr: float, momentum: float):
    """Classic momentum: v <- momentum*v + g; p <- p - lr*v. In place."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(
            f"sgd step: shape mismatch p{param.shape} g{grad.shape} v{velocity.shape}")
    velocity *= momentum
    velocity += grad
    param -= lr * velocity
    return param, velocity


class SGD:
    """Momentum SGD over a named parameter dict; lr is supplied per step."""

    def __init__(self, params: dict, momentum: float = 0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            sgd_momentum_step(p.data, p.grad, self.velocity[name], lr, self.momentum)
