"""Fused layer ops with hand-written backward rules."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make, _sigmoid, as_tensor


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """v = (|s|^2 / (1 + |s|^2)) * s / |s|, written as s * |s| / (1 + |s|^2).

    The rewritten form has no division by |s|, so s = 0 maps to 0.
    """
    x = s.data
    n2 = (x * x).sum(axis=axis, keepdims=True)
    n = np.sqrt(n2)
    f = n / (1.0 + n2)
    out = x * f

    def bw(g):
        # d/ds [s f(|s|)] = f I + (f'(n)/n) s s^T,  f'(n) = (1 - n^2) / (1 + n^2)^2
        safe = np.where(n > 0, n, 1.0)
        coef = np.where(n > 0, (1.0 - n2) / (1.0 + n2) ** 2 / safe, 0.0)
        return (f * g + coef * x * (x * g).sum(axis=axis, keepdims=True),)

    return _make(out, (s,), bw, "squash")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match "
                         f"feature axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid (no padding) 2-D cross-correlation.

    x: (B, C_in, H, W) or (C_in, H, W); weight: (C_out, C_in, k, k).
    """
    x = as_tensor(x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.ndim != 4 or weight.shape[1] != xd.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {weight.shape}")
    c_out, _, k, k2 = weight.shape
    h, w = xd.shape[2:]
    if k > h or k2 > w:
        raise ShapeError(f"conv2d: kernel {k}x{k2} larger than input {h}x{w}")
    cols = sliding_window_view(xd, (k, k2), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", cols, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    ho, wo = out.shape[2:]

    def bw(g):
        if squeeze:
            g = g[None]
        gw = np.einsum("bohw,bchwij->ocij", g, cols, optimize=True)
        gx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k2):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    "bohw,oc->bchw", g, weight.data[:, :, i, j], optimize=True)
        gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, parents, bw, "conv2d")


def lstm(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Single-layer LSTM over (B, L, F) with zero initial state; returns (B, L, M).

    Gate layout along the 4M axis is [input, forget, candidate, output].
    Backward is truncated nowhere: full BPTT over the L steps.
    """
    xd = x.data
    if xd.ndim == 2:
        xd = xd[None]
    bsz, steps, feat = xd.shape
    m = w_h.shape[0]
    if w_x.shape != (feat, 4 * m) or w_h.shape != (m, 4 * m) or b.shape != (4 * m,):
        raise ShapeError(f"lstm: input {x.shape} with w_x {w_x.shape}, w_h {w_h.shape}, "
                         f"b {b.shape} is inconsistent")
    xw = (xd.reshape(-1, feat) @ w_x.data).reshape(bsz, steps, 4 * m) + b.data
    gates = np.empty((steps, bsz, 4 * m))
    cells = np.zeros((steps + 1, bsz, m))
    hs = np.zeros((steps + 1, bsz, m))
    tcs = np.empty((steps, bsz, m))
    for t in range(steps):
        z = xw[:, t] + hs[t] @ w_h.data
        gt = gates[t]
        gt[:, :2 * m] = _sigmoid(z[:, :2 * m])
        gt[:, 2 * m:3 * m] = np.tanh(z[:, 2 * m:3 * m])
        gt[:, 3 * m:] = _sigmoid(z[:, 3 * m:])
        cells[t + 1] = gt[:, m:2 * m] * cells[t] + gt[:, :m] * gt[:, 2 * m:3 * m]
        tcs[t] = np.tanh(cells[t + 1])
        hs[t + 1] = gt[:, 3 * m:] * tcs[t]
    out = np.transpose(hs[1:], (1, 0, 2))

    def bw(g):
        g = g.reshape(bsz, steps, m)
        dz_all = np.empty((bsz, steps, 4 * m))
        dw_h = np.zeros_like(w_h.data)
        dh_next = np.zeros((bsz, m))
        dc_next = np.zeros((bsz, m))
        for t in reversed(range(steps)):
            gt = gates[t]
            i, f, c_hat, o = gt[:, :m], gt[:, m:2 * m], gt[:, 2 * m:3 * m], gt[:, 3 * m:]
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tcs[t] ** 2)
            dz = dz_all[:, t]
            dz[:, :m] = dc * c_hat * i * (1.0 - i)
            dz[:, m:2 * m] = dc * cells[t] * f * (1.0 - f)
            dz[:, 2 * m:3 * m] = dc * i * (1.0 - c_hat ** 2)
            dz[:, 3 * m:] = dh * tcs[t] * o * (1.0 - o)
            dc_next = dc * f
            dw_h += hs[t].T @ dz
            dh_next = dz @ w_h.data.T
        flat = dz_all.reshape(-1, 4 * m)
        dw_x = xd.reshape(-1, feat).T @ flat
        dx = (flat @ w_x.data.T).reshape(x.shape)
        return dx, dw_x, dw_h, flat.sum(axis=0)

    res = out[0] if x.ndim == 2 else out
    return _make(np.ascontiguousarray(res), (x, w_x, w_h, b), bw, "lstm")
