"""Differentiable layer primitives: convolution, instance norm, linear, softmax.

Spatial ops accept a single map ``(C, H, W)`` or a batch ``(N, C, H, W)``.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .rng import Rng
from .tensor import Parameter, Tensor, as_tensor, grad_enabled, make_node

INSTANCE_NORM_EPS = 1e-5


def _as_batch(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{what} expects (C,H,W) or (N,C,H,W), got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int | None = None) -> Tensor:
    """Stride-1 cross-correlation with a square kernel of size 1 or 3.

    Padding defaults to ``k // 2`` so the spatial size is preserved.
    """
    cout, cin, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"kernel must be 1x1 or 3x3, got {k}x{k2}")
    pad = k // 2 if padding is None else padding
    if pad != k // 2:
        raise ShapeError(f"a {k}x{k} kernel needs padding {k // 2}, got {pad}")
    xb, single = _as_batch(x.data, "conv2d")
    n, c, h, w = xb.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cin}")

    # columns laid out (N, Cin*k*k, H*W) so the product lands directly in NCHW
    wmat = weight.data.reshape(cout, cin * k * k)
    if k == 1:
        cols = xb.reshape(n, cin, h * w)
    else:
        xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols6 = np.empty((n, cin, k, k, h, w), dtype=xb.dtype)
        for di in range(k):
            for dj in range(k):
                cols6[:, :, di, dj] = xp[:, :, di:di + h, dj:dj + w]
        cols = cols6.reshape(n, cin * k * k, h * w)
    out = np.matmul(wmat, cols)
    out += bias.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, h, w)
    if single:
        out = out[0]

    def backward(g):
        gflat = (g[None] if single else g).reshape(n, cout, h * w)
        gw = np.tensordot(gflat, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gbias = gflat.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gflat)
            if k == 1:
                gx = gcols.reshape(n, cin, h, w)
            else:
                gcols = gcols.reshape(n, cin, k, k, h, w)
                gxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
                for di in range(k):
                    for dj in range(k):
                        gxp[:, :, di:di + h, dj:dj + w] += gcols[:, :, di, dj]
                gx = gxp[:, :, pad:pad + h, pad:pad + w]
            gx = np.ascontiguousarray(gx[0] if single else gx)
        return gx, gw, gbias

    return make_node(out, (x, weight, bias), backward)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Per-instance, per-channel standardization with biased variance, then affine."""
    xb, single = _as_batch(x.data, "instance_norm")
    hw = xb.shape[2] * xb.shape[3]
    if hw < 2:
        raise ShapeError("instance_norm needs at least 2 spatial positions")
    mean = xb.mean(axis=(2, 3), keepdims=True)
    centered = xb - mean
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    g4 = gamma.data.reshape(1, -1, 1, 1)
    b4 = beta.data.reshape(1, -1, 1, 1)
    if grad_enabled() and (x.requires_grad or gamma.requires_grad or beta.requires_grad):
        xhat = centered * inv_std
        out = xhat * g4 + b4
    else:
        # inference: reuse the centered buffer, no xhat kept
        out = centered
        out *= g4 * inv_std
        out += b4
    if single:
        out = out[0]

    def backward(g):
        gb = g[None] if single else g
        ggamma = (gb * xhat).sum(axis=(0, 2, 3))
        gbeta = gb.sum(axis=(0, 2, 3))
        gxhat = gb * g4
        gx = inv_std * (gxhat - gxhat.mean(axis=(2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=(2, 3), keepdims=True))
        return (gx[0] if single else gx), ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map: ``x @ W.T + b`` for ``x`` of shape (N, Din) or (Din,)."""
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear expects {din} input features, got {x.shape[-1]}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, dout)
        x2 = x.data.reshape(-1, din)
        return (g @ weight.data, g2.T @ x2, g2.sum(axis=0))

    return make_node(out, (x, weight, bias), backward)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (logits,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects (..., C, H, W), got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))

    def backward(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

    return make_node(out, (x,), backward)


def dropout(x: Tensor, p: float, rng: Rng | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if p <= 0 or rng is None:
        return x
    if p >= 1:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,))


def tile_vector(v: Tensor, height: int, width: int, reps: int | None = None) -> Tensor:
    """Copy a K-vector (or a (T, K) stack) to every spatial position.

    ``(K,)`` becomes ``(K, H, W)``, or ``(reps, K, H, W)`` when ``reps`` is
    given; ``(T, K)`` becomes ``(T, K, H, W)``.  The gradient sums over copies.
    """
    v = as_tensor(v)
    if v.ndim == 1:
        shape = (v.shape[0], height, width) if reps is None else (reps, v.shape[0], height, width)
        src = v.data[:, None, None]
    elif v.ndim == 2:
        if reps is not None and reps != v.shape[0]:
            raise ShapeError("reps conflicts with the leading axis of a stacked vector")
        shape = (v.shape[0], v.shape[1], height, width)
        src = v.data[:, :, None, None]
    else:
        raise ShapeError(f"tile_vector expects a vector or (T, K) stack, got {v.shape}")
    out = np.broadcast_to(src, shape).copy()
    sum_axes = tuple(range(out.ndim - 2, out.ndim))
    if v.ndim == 1 and reps is not None:
        sum_axes = (0,) + sum_axes
    return make_node(out, (v,), lambda g: (g.sum(axis=sum_axes),))


def _tap_masks(k: int, height: int, width: int, dtype) -> np.ndarray:
    """(k*k, H, W) indicators of which kernel taps land inside the image."""
    pad = k // 2
    ones = np.pad(np.ones((height, width), dtype), pad)
    win = sliding_window_view(ones, (k, k))                    # H, W, k, k
    return np.ascontiguousarray(win.reshape(height, width, k * k).transpose(2, 0, 1))


def tiled_conv2d(vectors: Tensor, weight: Tensor, height: int, width: int) -> Tensor:
    """Zero-padded convolution of spatially constant maps, without building them.

    ``vectors`` is (T, V); the result equals ``conv2d`` of ``tile_vector(vectors)``
    with ``weight`` of shape (Cout, V, k, k) and no bias.  Each output pixel
    only depends on which kernel taps fall inside the image, so the cost is
    one small matmul plus a weighted sum of ``k*k`` masks.
    """
    cout, v, k, _ = weight.shape
    if vectors.ndim != 2 or vectors.shape[1] != v:
        raise ShapeError(f"tiled_conv2d expects (T, {v}) vectors, got {vectors.shape}")
    masks = _tap_masks(k, height, width, vectors.dtype)       # P, H, W
    wtap = weight.data.reshape(cout, v, k * k)
    per_tap = np.einsum("tv,ovp->tpo", vectors.data, wtap)     # T, P, Cout
    t = vectors.shape[0]
    out = (per_tap.transpose(0, 2, 1).reshape(t * cout, k * k) @ masks.reshape(k * k, -1))
    out = out.reshape(t, cout, height, width)

    def backward(g):
        g_tap = (g.reshape(t * cout, -1) @ masks.reshape(k * k, -1).T).reshape(t, cout, k * k)
        g_vec = np.einsum("top,ovp->tv", g_tap, wtap)
        g_w = np.einsum("top,tv->ovp", g_tap, vectors.data).reshape(weight.shape)
        return g_vec, g_w

    return make_node(out, (vectors, weight), backward)


# layers --------------------------------------------------------------------

def _uniform_init(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, rng: Rng, name: str = "conv"):
        if k not in (1, 3):
            raise ShapeError("only 1x1 and 3x3 kernels are supported")
        self.cin, self.cout, self.k = cin, cout, k
        fan_in = cin * k * k
        self.weight = Parameter(_uniform_init(rng.child("weight"), (cout, cin, k, k), fan_in), f"{name}.weight")
        self.bias = Parameter(_uniform_init(rng.child("bias"), (cout,), fan_in), f"{name}.bias")

    @property
    def padding(self) -> int:
        return self.k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.padding)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def describe(self) -> dict:
        return {"type": "Conv2d", "in_c": self.cin, "out_c": self.cout,
                "kernel": (self.k, self.k), "stride": (1, 1), "padding": self.padding}


class InstanceNorm:
    def __init__(self, channels: int, name: str = "norm"):
        self.channels = channels
        self.gamma = Parameter(np.ones(channels, np.float32), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, np.float32), f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gamma, self.beta)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def describe(self) -> dict:
        return {"type": "InstanceNorm", "in_c": self.channels, "out_c": self.channels}


class Linear:
    def __init__(self, din: int, dout: int, rng: Rng, name: str = "linear"):
        self.din, self.dout = din, dout
        self.weight = Parameter(_uniform_init(rng.child("weight"), (dout, din), din), f"{name}.weight")
        self.bias = Parameter(_uniform_init(rng.child("bias"), (dout,), din), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]
