"""Pure-numpy tiled-convolution kernels (fallback backend).

All arrays are float64. Images are ``(B, H, W)``; per-unit arrays are
``(B, T, F, M, M)``; kernels are ``(T, F, k, k)``. Tiling ``t`` starts at
pixel ``(t, t)`` and tiles an ``M*k`` square with stride ``k``.
"""

from __future__ import annotations

import numpy as np


def _blocks(v, t, k, m):
    # (B, M, k, M, k) view of the area covered by tiling t
    b = v.shape[0]
    span = m * k
    return v[:, t:t + span, t:t + span].reshape(b, m, k, m, k)


def forward(v, w, m):
    b = v.shape[0]
    n_t, n_f, k, _ = w.shape
    out = np.empty((b, n_t, n_f, m, m))
    for t in range(n_t):
        out[:, t] = np.einsum("bricj,fij->bfrc", _blocks(v, t, k, m), w[t], optimize=True)
    return out


def adjoint(c, w, height, width):
    b, n_t, n_f, m, _ = c.shape
    k = w.shape[-1]
    span = m * k
    out = np.zeros((b, height, width))
    for t in range(n_t):
        patch = np.einsum("bfrc,fij->bricj", c[:, t], w[t], optimize=True)
        out[:, t:t + span, t:t + span] += patch.reshape(b, span, span)
    return out


def weight_grad(v, c, k):
    b, n_t, n_f, m, _ = c.shape
    out = np.empty((n_t, n_f, k, k))
    for t in range(n_t):
        out[t] = np.einsum("bricj,bfrc->fij", _blocks(v, t, k, m), c[:, t], optimize=True)
    return out


def field_sumsq(v, n_t, k, m):
    b = v.shape[0]
    out = np.empty((b, n_t, m, m))
    for t in range(n_t):
        blk = _blocks(v, t, k, m)
        out[:, t] = np.einsum("bricj,bricj->brc", blk, blk)
    return out


def field_scatter(c, height, width, k):
    b, n_t, m, _ = c.shape
    span = m * k
    out = np.zeros((b, height, width))
    for t in range(n_t):
        out[:, t:t + span, t:t + span] += np.repeat(np.repeat(c[:, t], k, axis=1), k, axis=2)
    return out
