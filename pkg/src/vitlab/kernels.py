"""Elementwise and row-wise hot kernels.

Every kernel has two implementations with identical signatures: a loop
version compiled by numba (``*_nb``) and a vectorised numpy version
(``*_np``). The public names dispatch to one of them according to
:mod:`vitlab._backend`. Row kernels take C-contiguous 2D arrays and write
into preallocated outputs.
"""
import math

import numpy as np
from scipy.special import erf as _erf

from ._backend import HAVE_NUMBA, njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -- softmax ---------------------------------------------------------------

@njit(cache=True)
def _shift_rows_nb(x, scale, out):
    n, m = x.shape
    for i in range(n):
        mx = -np.inf
        for j in range(m):
            v = x[i, j] * scale
            if v > mx:
                mx = v
        for j in range(m):
            out[i, j] = x[i, j] * scale - mx
    return out


@njit(cache=True)
def _normalize_rows_nb(out):
    n, m = out.shape
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += out[i, j]
        inv = 1.0 / s
        for j in range(m):
            out[i, j] *= inv
    return out


def softmax_rows_nb(x, scale, out):
    # exp stays in numpy: without SVML numba cannot vectorise it
    scale = x.dtype.type(scale)
    _shift_rows_nb(x, scale, out)
    np.exp(out, out=out)
    return _normalize_rows_nb(out)


def softmax_rows_np(x, scale, out):
    np.multiply(x, x.dtype.type(scale), out=out)
    out -= out.max(axis=1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)
    return out


@njit(cache=True)
def softmax_rows_backward_nb(y, g, scale, out):
    n, m = y.shape
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += g[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (g[i, j] - s) * scale
    return out


def softmax_rows_backward_np(y, g, scale, out):
    s = (g * y).sum(axis=1, keepdims=True)
    out[...] = y * (g - s) * scale
    return out


# -- layer norm ------------------------------------------------------------

@njit(cache=True)
def layer_norm_rows_nb(x, gamma, beta, eps, out, xhat, rstd):
    n, m = x.shape
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            c = x[i, j] - mu
            var += c * c
        var /= m
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            xh = (x[i, j] - mu) * r
            xhat[i, j] = xh
            out[i, j] = xh * gamma[j] + beta[j]
    return out


def layer_norm_rows_np(x, gamma, beta, eps, out, xhat, rstd):
    mu = x.mean(axis=1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=1, keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    rstd[:] = r[:, 0]
    xhat[...] = c * r
    out[...] = xhat * gamma + beta
    return out


@njit(cache=True)
def layer_norm_rows_backward_nb(g, xhat, rstd, gamma, dx, dgamma, dbeta):
    n, m = g.shape
    acc_g = np.zeros(m)
    acc_b = np.zeros(m)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            dxh = g[i, j] * gamma[j]
            s1 += dxh
            s2 += dxh * xhat[i, j]
            acc_g[j] += g[i, j] * xhat[i, j]
            acc_b[j] += g[i, j]
        s1 /= m
        s2 /= m
        r = rstd[i]
        for j in range(m):
            dx[i, j] = r * (g[i, j] * gamma[j] - s1 - xhat[i, j] * s2)
    for j in range(m):
        dgamma[j] = acc_g[j]
        dbeta[j] = acc_b[j]
    return dx


def layer_norm_rows_backward_np(g, xhat, rstd, gamma, dx, dgamma, dbeta):
    dxh = g * gamma
    s1 = dxh.mean(axis=1, keepdims=True)
    s2 = (dxh * xhat).mean(axis=1, keepdims=True)
    dx[...] = rstd[:, None] * (dxh - s1 - xhat * s2)
    dgamma[:] = (g * xhat).sum(axis=0)
    dbeta[:] = g.sum(axis=0)
    return dx


# -- GELU (exact erf form) -------------------------------------------------

@njit(cache=True)
def _gelu_flat_nb(x, out):
    for i in range(x.size):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out


def gelu_nb(x, out):
    _gelu_flat_nb(x.reshape(-1), out.reshape(-1))
    return out


def gelu_np(x, out):
    out[...] = 0.5 * x * (1.0 + _erf(x * _INV_SQRT2))
    return out


@njit(cache=True)
def _gelu_backward_flat_nb(x, g, out):
    for i in range(x.size):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = math.exp(-0.5 * v * v) * _INV_SQRT2PI
        out[i] = g[i] * (cdf + v * pdf)
    return out


def gelu_backward_nb(x, g, out):
    _gelu_backward_flat_nb(x.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


def gelu_backward_np(x, g, out):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    out[...] = g * (cdf + x * pdf)
    return out


# -- AdamW -----------------------------------------------------------------

@njit(cache=True)
def _adamw_flat_nb(th, gf, mf, vf, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    for i in range(th.size):
        gi = gf[i]
        mi = beta1 * mf[i] + (1.0 - beta1) * gi
        vi = beta2 * vf[i] + (1.0 - beta2) * gi * gi
        mf[i] = mi
        vf[i] = vi
        mhat = mi / bc1
        vhat = vi / bc2
        th[i] = th[i] - lr * (mhat / (math.sqrt(vhat) + eps) + weight_decay * th[i])
    return th


def adamw_update_nb(theta, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    _adamw_flat_nb(theta.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                   lr, beta1, beta2, eps, weight_decay, bc1, bc2)
    return theta


def adamw_update_np(theta, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    step = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * theta
    theta -= lr * step
    return theta


# -- bilinear warp ---------------------------------------------------------

@njit(cache=True)
def warp_bilinear_nb(img, mat, out):
    # out[i, j] = img sampled at (y, x) = mat @ (i, j, 1), edges clamped
    H, W, C = img.shape
    Ho, Wo, _ = out.shape
    for i in range(Ho):
        for j in range(Wo):
            y = mat[0, 0] * i + mat[0, 1] * j + mat[0, 2]
            x = mat[1, 0] * i + mat[1, 1] * j + mat[1, 2]
            y = min(max(y, 0.0), H - 1.0)
            x = min(max(x, 0.0), W - 1.0)
            y0 = int(math.floor(y))
            x0 = int(math.floor(x))
            y1 = min(y0 + 1, H - 1)
            x1 = min(x0 + 1, W - 1)
            ty = y - y0
            tx = x - x0
            for c in range(C):
                top = img[y0, x0, c] * (1.0 - tx) + img[y0, x1, c] * tx
                bot = img[y1, x0, c] * (1.0 - tx) + img[y1, x1, c] * tx
                out[i, j, c] = top * (1.0 - ty) + bot * ty
    return out


def warp_bilinear_np(img, mat, out):
    H, W, _ = img.shape
    Ho, Wo, _ = out.shape
    ii, jj = np.meshgrid(np.arange(Ho, dtype=np.float64), np.arange(Wo, dtype=np.float64), indexing="ij")
    y = np.clip(mat[0, 0] * ii + mat[0, 1] * jj + mat[0, 2], 0.0, H - 1.0)
    x = np.clip(mat[1, 0] * ii + mat[1, 1] * jj + mat[1, 2], 0.0, W - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    ty = (y - y0)[..., None]
    tx = (x - x0)[..., None]
    top = img[y0, x0] * (1.0 - tx) + img[y0, x1] * tx
    bot = img[y1, x0] * (1.0 - tx) + img[y1, x1] * tx
    out[...] = top * (1.0 - ty) + bot * ty
    return out


if HAVE_NUMBA:
    softmax_rows = softmax_rows_nb
    softmax_rows_backward = softmax_rows_backward_nb
    layer_norm_rows = layer_norm_rows_nb
    layer_norm_rows_backward = layer_norm_rows_backward_nb
    gelu = gelu_nb
    gelu_backward = gelu_backward_nb
    adamw_update = adamw_update_nb
    warp_bilinear = warp_bilinear_nb
else:
    softmax_rows = softmax_rows_np
    softmax_rows_backward = softmax_rows_backward_np
    layer_norm_rows = layer_norm_rows_np
    layer_norm_rows_backward = layer_norm_rows_backward_np
    gelu = gelu_np
    gelu_backward = gelu_backward_np
    adamw_update = adamw_update_np
    warp_bilinear = warp_bilinear_np
