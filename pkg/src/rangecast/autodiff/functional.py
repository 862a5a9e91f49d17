"""Differentiable layer primitives on (C, T, H, W) feature volumes.

Padding is described per spatio-temporal axis (T, H, W) as ``(mode, n)``
with mode one of ``"none"``, ``"zero"`` or ``"circular"``.
"""
from __future__ import annotations

from itertools import product
from typing import Sequence

import numpy as np
from scipy.special import expit

from .tensor import Tensor, make_node

NO_PAD = (("none", 0), ("none", 0), ("none", 0))


def _as_triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def normalize_padding(padding) -> tuple:
    if padding is None:
        return NO_PAD
    out = []
    for ax in padding:
        if ax is None:
            out.append(("none", 0))
        else:
            mode, n = ax
            if mode not in ("none", "zero", "circular"):
                raise ValueError(f"unknown padding mode {mode!r}")
            out.append((mode, int(n) if mode != "none" else 0))
    if len(out) != 3:
        raise ValueError(f"padding needs 3 axes (T, H, W), got {len(out)}")
    return tuple(out)


def pad_array(x: np.ndarray, padding) -> np.ndarray:
    for ax, (mode, n) in enumerate(padding, start=1):
        if mode == "none" or n == 0:
            continue
        if mode == "circular":
            if n >= x.shape[ax]:
                raise ValueError(f"circular padding {n} must be smaller than axis length {x.shape[ax]}")
            width = [(0, 0)] * x.ndim
            width[ax] = (n, n)
            x = np.pad(x, width, mode="wrap")
        else:
            width = [(0, 0)] * x.ndim
            width[ax] = (n, n)
            x = np.pad(x, width)
    return x


def pad_adjoint(g: np.ndarray, padding) -> np.ndarray:
    """Adjoint of ``pad_array``: crop, folding wrapped borders back for circular axes."""
    for ax, (mode, n) in reversed(list(enumerate(padding, start=1))):
        if mode == "none" or n == 0:
            continue
        length = g.shape[ax] - 2 * n
        core = np.take(g, range(n, n + length), axis=ax).copy()
        if mode == "circular":
            lo = [slice(None)] * g.ndim
            hi = [slice(None)] * g.ndim
            # left pad holds the last n columns, right pad the first n
            lo[ax] = slice(length - n, length)
            hi[ax] = slice(0, n)
            core[tuple(lo)] += np.take(g, range(0, n), axis=ax)
            core[tuple(hi)] += np.take(g, range(n + length, 2 * n + length), axis=ax)
        g = core
    return g


def _out_shape(in_shape, kernel, stride):
    return tuple((n - k) // s + 1 for n, k, s in zip(in_shape, kernel, stride))


def _window(offset, count, step):
    return slice(offset, offset + step * (count - 1) + 1, step)


def _taps(w: np.ndarray) -> np.ndarray:
    # (Cout, Cin, kt, kh, kw) -> (kt, kh, kw, Cout, Cin); contiguous slices keep matmul on BLAS
    return np.ascontiguousarray(np.moveaxis(w, (0, 1), (3, 4)))


def conv_forward(xp: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    """Unpadded strided cross-correlation: (Cin, T, H, W) x (Cout, Cin, kt, kh, kw)."""
    cout, cin = w.shape[:2]
    kernel = w.shape[2:]
    osz = _out_shape(xp.shape[1:], kernel, stride)
    out = np.zeros((cout, int(np.prod(osz))), dtype=np.result_type(xp, w))
    taps = _taps(w)
    for a, b, c in product(*(range(k) for k in kernel)):
        patch = xp[:, _window(a, osz[0], stride[0]), _window(b, osz[1], stride[1]), _window(c, osz[2], stride[2])]
        out += taps[a, b, c] @ patch.reshape(cin, -1)
    return out.reshape((cout,) + osz)


def conv_input_grad(g: np.ndarray, w: np.ndarray, stride, in_shape) -> np.ndarray:
    """Adjoint of ``conv_forward`` with respect to its (padded) input."""
    cout, cin = w.shape[:2]
    kernel = w.shape[2:]
    osz = g.shape[1:]
    gx = np.zeros((cin,) + tuple(in_shape), dtype=np.result_type(g, w))
    g2 = g.reshape(cout, -1)
    taps_t = np.ascontiguousarray(np.swapaxes(_taps(w), 3, 4))
    for a, b, c in product(*(range(k) for k in kernel)):
        sl = (slice(None), _window(a, osz[0], stride[0]), _window(b, osz[1], stride[1]), _window(c, osz[2], stride[2]))
        gx[sl] += (taps_t[a, b, c] @ g2).reshape((cin,) + tuple(osz))
    return gx


def conv_weight_grad(xp: np.ndarray, g: np.ndarray, stride, kernel) -> np.ndarray:
    cout = g.shape[0]
    cin = xp.shape[0]
    osz = g.shape[1:]
    gw = np.zeros((cout, cin) + tuple(kernel), dtype=np.result_type(xp, g))
    g2 = g.reshape(cout, -1)
    for a, b, c in product(*(range(k) for k in kernel)):
        patch = xp[:, _window(a, osz[0], stride[0]), _window(b, osz[1], stride[1]), _window(c, osz[2], stride[2])]
        gw[:, :, a, b, c] = g2 @ patch.reshape(cin, -1).T
    return gw


def _check_volume(x: Tensor, channels: int, what: str):
    if x.ndim != 4:
        raise ValueError(f"{what}: expected input (C, T, H, W), got shape {x.shape}")
    if x.shape[0] != channels:
        raise ValueError(f"{what}: expected {channels} input channels, got {x.shape[0]} (input shape {x.shape})")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=None) -> Tensor:
    """3D cross-correlation; ``weight`` is (C_out, C_in, k_t, k_h, k_w)."""
    stride = _as_triple(stride)
    padding = normalize_padding(padding)
    _check_volume(x, weight.shape[1], "conv3d")
    kernel = weight.shape[2:]
    xp = pad_array(x.data, padding)
    for ax, (n, k) in enumerate(zip(xp.shape[1:], kernel)):
        if n < k:
            raise ValueError(f"conv3d: padded axis {ax} has length {n} < kernel {k} (input shape {x.shape})")
    out = conv_forward(xp, weight.data, stride)
    if bias is not None:
        out += bias.data[:, None, None, None]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = pad_adjoint(conv_input_grad(g, weight.data, stride, xp.shape[1:]), padding)
        if weight.requires_grad:
            gw = conv_weight_grad(xp, g, stride, kernel)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv3d")


def conv3d_transposed(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1,
                      padding=None, output_padding=0) -> Tensor:
    """Adjoint of ``conv3d`` for the same weight, stride and padding.

    ``weight`` has shape (C_in, C_out, k_t, k_h, k_w), i.e. it is the weight
    of the forward convolution mapping C_out channels to C_in. Each axis grows
    to (L - 1) * s + k (+ output_padding) minus the padding.
    """
    stride = _as_triple(stride)
    output_padding = _as_triple(output_padding)
    padding = normalize_padding(padding)
    _check_volume(x, weight.shape[0], "conv3d_transposed")
    kernel = weight.shape[2:]
    padded = tuple((o - 1) * s + k + op for o, s, k, op in zip(x.shape[1:], stride, kernel, output_padding))
    for ax, (op, s) in enumerate(zip(output_padding, stride)):
        if not 0 <= op < s:
            raise ValueError(f"conv3d_transposed: output_padding {op} on axis {ax} must be in [0, {s})")
    yp = conv_input_grad(x.data, weight.data, stride, padded)
    out = pad_adjoint(yp, padding)
    if bias is not None:
        out = out + bias.data[:, None, None, None]

    def backward(g):
        gx = gw = gb = None
        gp = pad_array(g, padding)
        if x.requires_grad:
            gx = conv_forward(gp, weight.data, stride)
        if weight.requires_grad:
            gw = conv_weight_grad(gp, x.data, stride, kernel)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv3d_transposed")


def pad(x: Tensor, padding) -> Tensor:
    padding = normalize_padding(padding)
    return make_node(pad_array(x.data, padding), (x,), lambda g: (pad_adjoint(g, padding),), "pad")


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (T, H, W).

    In training mode the running statistics are updated in place (unbiased
    variance, like most frameworks).
    """
    _check_volume(x, gamma.shape[0], "batchnorm3d")
    axes = (1, 2, 3)
    n = int(np.prod(x.shape[1:]))
    xd = x.data
    if training:
        mean = xd.mean(axis=axes, dtype=np.float64)
        var = ((xd - mean[:, None, None, None].astype(xd.dtype)) ** 2).mean(axis=axes, dtype=np.float64)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)[:, None, None, None]
    xhat = (xd - mean.astype(xd.dtype)[:, None, None, None]) * invstd
    g_ = gamma.data[:, None, None, None]
    out = xhat * g_ + beta.data[:, None, None, None]

    def backward(g):
        gx = None
        dgamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(gamma.dtype)
        dbeta = g.sum(axis=axes, dtype=np.float64).astype(beta.dtype)
        if x.requires_grad:
            dxhat = g * g_
            if training:
                s1 = dxhat.sum(axis=axes, dtype=np.float64, keepdims=True).astype(xd.dtype)
                s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64, keepdims=True).astype(xd.dtype)
                gx = invstd / n * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd
        return gx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), backward, "batchnorm3d")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))
    return make_node(out, (x,), lambda g: (np.where(pos, g, g * g.dtype.type(slope)),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ValueError("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for i, t in enumerate(xs):
        if t.ndim != len(ref) or any(a != b for d, (a, b) in enumerate(zip(t.shape, ref)) if d != ax):
            raise ValueError(f"concat: tensor {i} has shape {t.shape}, incompatible with {ref} on axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_node(out, tuple(xs), backward, "concat")
