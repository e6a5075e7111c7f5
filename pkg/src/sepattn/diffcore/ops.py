"""Forward operations with reverse-mode gradients.

Every op validates operand shapes up front, computes the forward value with
numpy, and — when any differentiable operand is tracked — wires a gradient
closure onto the output. Convolutions are realized as im2col + matmul;
transposed convolution is the exact adjoint (it reuses the col2im scatter that
conv2d's input gradient uses, so <conv2d(x,w), y> == <x, conv_transpose2d(y,w)>
holds to rounding). Reductions accumulate in float64 and store float32.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import DTYPE, SCALAR_SHAPE, GraphError, ShapeError, Tensor4, backward  # noqa: F401

__all__ = [
    "conv2d",
    "conv_transpose2d",
    "batch_norm",
    "RunningStats",
    "leaky_relu",
    "tanh",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "mean_abs",
    "mean_sq",
    "mean_softplus",
    "wsum",
    "concat_channels",
    "backward",
]


def _make(data: np.ndarray, parents: tuple, grad_fn) -> Tensor4:
    """Wrap a forward result; attach graph edges only if some parent is live."""
    out = Tensor4(data)
    if any(p is not None and (p.requires_grad or p._grad_fn is not None) for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


# ---------------------------------------------------------------------------
# convolution plumbing


def _conv_out_dim(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, oh*ow) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(
    cols: np.ndarray,
    n: int,
    c: int,
    h: int,
    w: int,
    kh: int,
    kw: int,
    stride: int,
    padding: int,
    oh: int,
    ow: int,
) -> np.ndarray:
    """Scatter-add inverse of :func:`_im2col`; returns (N, C, H, W)."""
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def _check_conv_args(stride: int, padding: int) -> None:
    if not (isinstance(stride, int) and stride >= 1):
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    if not (isinstance(padding, int) and padding >= 0):
        raise ValueError(f"padding must be a non-negative int, got {padding!r}")


def conv2d(
    x: Tensor4,
    weight: Tensor4,
    bias: Optional[Tensor4] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor4:
    """Cross-correlation of ``x`` (N,Cin,H,W) with ``weight`` (Cout,Cin,kh,kw).

    ``bias`` is an optional (1,Cout,1,1) tensor added per output channel.
    """
    _check_conv_args(stride, padding)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(
            f"conv2d: input has {cin} channels but weight expects {wcin} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ShapeError(
            f"conv2d: bias shape {bias.shape} must be (1, {cout}, 1, 1) "
            f"for weight {weight.shape}"
        )
    oh = _conv_out_dim(h, kh, stride, padding)
    ow = _conv_out_dim(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: output would be {oh}x{ow} (input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}); spatial dims must stay >= 1"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)  # (N, K, L)
    w_mat = weight.data.reshape(cout, -1)  # (Cout, K)
    out = np.matmul(w_mat, cols).reshape(n, cout, oh, ow)
    if bias is not None:
        out = out + bias.data

    def grad_fn(g: np.ndarray):
        g_mat = g.reshape(n, cout, oh * ow)
        grad_x = None
        if x.requires_grad or x._grad_fn is not None:
            gcols = np.matmul(w_mat.T, g_mat)  # (N, K, L)
            grad_x = _col2im(gcols, n, cin, h, w, kh, kw, stride, padding, oh, ow)
        grad_w = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        grad_b = None
        if bias is not None:
            grad_b = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1).astype(DTYPE)
        return (grad_x, grad_w, grad_b) if bias is not None else (grad_x, grad_w)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out.astype(DTYPE, copy=False), parents, grad_fn)


def conv_transpose2d(y: Tensor4, weight: Tensor4, stride: int = 1, padding: int = 0) -> Tensor4:
    """Adjoint of :func:`conv2d` with the same weight/stride/padding.

    ``weight`` keeps the conv2d layout (Cout, Cin, kh, kw): an input of
    (N, Cout, Hy, Wy) maps to (N, Cin, H, W) with
    H = (Hy - 1) * stride - 2 * padding + kh. No bias by design (a batch-norm
    stage always follows in the networks built here, except the final tanh
    stage, which is deliberately bias-free).
    """
    _check_conv_args(stride, padding)
    n, cy, hy, wy = y.shape
    cout, cin, kh, kw = weight.shape
    if cy != cout:
        raise ShapeError(
            f"conv_transpose2d: input has {cy} channels but weight expects {cout} "
            f"(input {y.shape}, weight {weight.shape})"
        )
    h = (hy - 1) * stride - 2 * padding + kh
    w = (wy - 1) * stride - 2 * padding + kw
    if h < 1 or w < 1:
        raise ShapeError(
            f"conv_transpose2d: output would be {h}x{w} (input {hy}x{wy}, kernel "
            f"{kh}x{kw}, stride {stride}, padding {padding}); dims must stay >= 1"
        )
    w_mat = weight.data.reshape(cout, -1)  # (Cout, K)
    y_mat = y.data.reshape(n, cout, hy * wy)
    cols = np.matmul(w_mat.T, y_mat)  # (N, K, L)
    out = _col2im(cols, n, cin, h, w, kh, kw, stride, padding, hy, wy)

    def grad_fn(g: np.ndarray):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gp, kh, kw, stride, hy, wy)  # (N, K, L)
        grad_y = None
        if y.requires_grad or y._grad_fn is not None:
            grad_y = np.matmul(w_mat, gcols).reshape(n, cout, hy, wy)
        grad_w = np.matmul(y_mat, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        return grad_y, grad_w

    return _make(out.astype(DTYPE, copy=False), (y, weight), grad_fn)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    """Per-channel running moments for one batch-norm stage.

    ``mean``/``var`` are float32 vectors of length C. Updated in train mode
    with momentum ``running <- (1 - momentum) * running + momentum * batch``;
    the running variance uses the unbiased batch estimate.
    """

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        return cls(
            mean=np.zeros(channels, dtype=DTYPE),
            var=np.ones(channels, dtype=DTYPE),
            momentum=momentum,
        )

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.momentum)


def batch_norm(
    x: Tensor4,
    gamma: Tensor4,
    beta: Tensor4,
    stats: RunningStats,
    training: bool,
    epsilon: float = 1e-5,
    update_stats: Optional[bool] = None,
) -> Tensor4:
    """Per-channel normalization over the (batch, height, width) axes.

    Train mode normalizes with biased batch moments; eval mode uses the stored
    running stats. ``update_stats`` defaults to ``training`` and lets callers
    score activations with batch statistics without polluting the running
    buffers (discriminator scoring inside the generator update does this).
    """
    n, c, h, w = x.shape
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (1, c, 1, 1):
            raise ShapeError(
                f"batch_norm: {name} shape {t.shape} must be (1, {c}, 1, 1) for input {x.shape}"
            )
    if stats.mean.shape != (c,) or stats.var.shape != (c,):
        raise ShapeError(
            f"batch_norm: running stats carry {stats.mean.shape[0]} channels, input has {c}"
        )
    if epsilon <= 0:
        raise ValueError(f"batch_norm: epsilon must be positive, got {epsilon}")
    if update_stats is None:
        update_stats = training

    m = n * h * w
    if training:
        if m < 2:
            raise ShapeError(
                f"batch_norm: train mode needs more than one value per channel "
                f"(batch*H*W = {m} for input {x.shape}); variance is undefined"
            )
        mean64 = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var64 = np.square(x.data.astype(np.float64) - mean64.reshape(1, c, 1, 1)).mean(axis=(0, 2, 3))
        mean = mean64.astype(DTYPE).reshape(1, c, 1, 1)
        inv = (1.0 / np.sqrt(var64 + epsilon)).astype(DTYPE).reshape(1, c, 1, 1)
        if update_stats:
            unbiased = var64 * (m / (m - 1))
            mom = stats.momentum
            stats.mean[:] = ((1.0 - mom) * stats.mean + mom * mean64).astype(DTYPE)
            stats.var[:] = ((1.0 - mom) * stats.var + mom * unbiased).astype(DTYPE)
    else:
        mean = stats.mean.astype(DTYPE).reshape(1, c, 1, 1)
        inv = (1.0 / np.sqrt(stats.var.astype(np.float64) + epsilon)).astype(DTYPE).reshape(1, c, 1, 1)

    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data

    def grad_fn(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE).reshape(1, c, 1, 1)
        dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE).reshape(1, c, 1, 1)
        grad_x = None
        if x.requires_grad or x._grad_fn is not None:
            dxhat = g * gamma.data
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE).reshape(1, c, 1, 1)
                s2 = (
                    (dxhat * xhat)
                    .sum(axis=(0, 2, 3), dtype=np.float64)
                    .astype(DTYPE)
                    .reshape(1, c, 1, 1)
                )
                grad_x = (inv / m) * (m * dxhat - s1 - xhat * s2)
            else:
                grad_x = dxhat * inv
        return grad_x, dgamma, dbeta

    return _make(out.astype(DTYPE, copy=False), (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# pointwise


def leaky_relu(x: Tensor4, slope: float = 0.2) -> Tensor4:
    if not (0.0 < slope < 1.0):
        raise ValueError(f"leaky_relu: slope must lie in (0, 1), got {slope}")
    keep = x.data >= 0
    out = np.where(keep, x.data, slope * x.data)

    def grad_fn(g: np.ndarray):
        return (np.where(keep, g, np.float32(slope) * g),)

    return _make(out.astype(DTYPE, copy=False), (x,), grad_fn)


def tanh(x: Tensor4) -> Tensor4:
    out = np.tanh(x.data)

    def grad_fn(g: np.ndarray):
        return (g * (1.0 - out * out),)

    return _make(out.astype(DTYPE, copy=False), (x,), grad_fn)


def _check_same_shape(op: str, a: Tensor4, b: Tensor4) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    """Elementwise (Hadamard) product; shapes must match exactly."""
    _check_same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor4, c: float) -> Tensor4:
    """Multiply by a python constant (the constant is not differentiated)."""
    c32 = np.float32(c)
    return _make(a.data * c32, (a,), lambda g: (g * c32,))


def shift(a: Tensor4, c: float) -> Tensor4:
    """Add a python constant elementwise."""
    return _make(a.data + np.float32(c), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions  (float64 accumulation, float32 result)


def _scalar_out(value64: float) -> np.ndarray:
    return np.full(SCALAR_SHAPE, value64, dtype=DTYPE)


def mean_abs(a: Tensor4) -> Tensor4:
    val = np.mean(np.abs(a.data), dtype=np.float64)
    n = a.data.size

    def grad_fn(g: np.ndarray):
        g0 = g.reshape(())
        return ((np.sign(a.data) * (g0 / np.float32(n))).astype(DTYPE),)

    return _make(_scalar_out(val), (a,), grad_fn)


def mean_sq(a: Tensor4) -> Tensor4:
    val = np.mean(np.square(a.data, dtype=np.float64))
    n = a.data.size

    def grad_fn(g: np.ndarray):
        g0 = g.reshape(())
        return ((a.data * (2.0 * g0 / np.float32(n))).astype(DTYPE),)

    return _make(_scalar_out(val), (a,), grad_fn)


def mean_softplus(a: Tensor4) -> Tensor4:
    """mean(log(1 + exp(a))) — the stable building block for the NLL GAN losses."""
    val = np.mean(np.logaddexp(0.0, a.data.astype(np.float64)))
    n = a.data.size

    def grad_fn(g: np.ndarray):
        g0 = g.reshape(())
        x = a.data
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        return ((sig * (g0 / np.float32(n))).astype(DTYPE),)

    return _make(_scalar_out(val), (a,), grad_fn)


def wsum(a: Tensor4, weights: np.ndarray) -> Tensor4:
    """Weighted sum with a constant weight array; scalarizer for grad checks."""
    wts = np.asarray(weights, dtype=np.float64)
    if wts.shape != a.shape:
        raise ShapeError(f"wsum: weights shape {wts.shape} must match tensor shape {a.shape}")
    val = float(np.sum(a.data.astype(np.float64) * wts))
    w32 = wts.astype(DTYPE)

    def grad_fn(g: np.ndarray):
        return ((w32 * g.reshape(())).astype(DTYPE),)

    return _make(_scalar_out(val), (a,), grad_fn)


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            f"concat_channels: batch/spatial dims differ: {a.shape} vs {b.shape}"
        )
    out = np.concatenate([a.data, b.data], axis=1)

    def grad_fn(g: np.ndarray):
        return g[:, :ca], g[:, ca:]

    return _make(out, (a, b), grad_fn)
