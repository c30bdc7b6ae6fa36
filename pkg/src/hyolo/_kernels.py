"""Hot numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``HYOLO_DISABLE_NUMBA`` is not
set to a truthy value.  Both paths compute the same quantities; summation
order differs, so results agree to rounding, not bitwise.  Within one backend
everything is deterministic.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None

HAVE_NUMBA = numba is not None
_DISABLED = os.environ.get("HYOLO_DISABLE_NUMBA", "").lower() not in ("", "0", "false", "no")
_backend = "numba" if HAVE_NUMBA and not _DISABLED else "numpy"


def backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Switch kernel backend at runtime; returns the previous one."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _backend = _backend, name
    return prev


def conv_out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


# -- numpy path -------------------------------------------------------------

def _im2col(x, k, s, p):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * ho : s, : s * wo : s]
    # (n, ho, wo, c, k, k) -> rows per output pixel
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _conv_forward_np(x, w, b, s, p):
    o, c, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, s, p)
    out = cols @ w.reshape(o, -1).T
    out += b
    return out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2).copy(), cols


def _conv_backward_np(x, w, cols, gout, s, p):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = gout.shape[2], gout.shape[3]
    g2 = gout.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (g2.T @ cols).reshape(w.shape)
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
    return np.ascontiguousarray(gx), gw, gb


def _nms_np(x1, y1, x2, y2, order, thr):
    area = (x2 - x1) * (y2 - y1)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for a in range(len(order)):
        if suppressed[a]:
            continue
        i = order[a]
        keep.append(i)
        rest = order[a + 1 :]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0, None)
        inter = iw * ih
        union = area[i] + area[rest] - inter
        iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        suppressed[a + 1 :] |= iou > thr
    return np.asarray(keep, dtype=np.int64)


# -- numba path -------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _im2col_nb(x, k, s, p, ho, wo):
        n, c, h, wd = x.shape
        cols = np.zeros((n * ho * wo, c * k * k))
        for bi in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (bi * ho + oy) * wo + ox
                    col = 0
                    for ic in range(c):
                        for ky in range(k):
                            iy = oy * s - p + ky
                            for kx in range(k):
                                ix = ox * s - p + kx
                                if iy >= 0 and iy < h and ix >= 0 and ix < wd:
                                    cols[row, col] = x[bi, ic, iy, ix]
                                col += 1
        return cols

    @numba.njit(cache=True)
    def _col2im_nb(gcols, n, c, h, wd, k, s, p, ho, wo):
        gx = np.zeros((n, c, h, wd))
        for bi in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (bi * ho + oy) * wo + ox
                    col = 0
                    for ic in range(c):
                        for ky in range(k):
                            iy = oy * s - p + ky
                            for kx in range(k):
                                ix = ox * s - p + kx
                                if iy >= 0 and iy < h and ix >= 0 and ix < wd:
                                    gx[bi, ic, iy, ix] += gcols[row, col]
                                col += 1
        return gx

    @numba.njit(cache=True)
    def _conv_forward_nb(x, w, b, s, p):
        n, c, h, wd = x.shape
        o, _, k, _ = w.shape
        ho = (h + 2 * p - k) // s + 1
        wo = (wd + 2 * p - k) // s + 1
        cols = _im2col_nb(x, k, s, p, ho, wo)
        flat = np.dot(cols, np.ascontiguousarray(w.reshape(o, c * k * k).T))
        out = np.empty((n, o, ho, wo))
        for bi in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (bi * ho + oy) * wo + ox
                    for oc in range(o):
                        out[bi, oc, oy, ox] = flat[row, oc] + b[oc]
        return out, cols

    @numba.njit(cache=True)
    def _conv_backward_nb(x, w, cols, gout, s, p):
        n, c, h, wd = x.shape
        o, _, k, _ = w.shape
        ho, wo = gout.shape[2], gout.shape[3]
        g2 = np.empty((n * ho * wo, o))
        gb = np.zeros(o)
        for bi in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (bi * ho + oy) * wo + ox
                    for oc in range(o):
                        g = gout[bi, oc, oy, ox]
                        g2[row, oc] = g
                        gb[oc] += g
        gw = np.dot(np.ascontiguousarray(g2.T), cols).reshape(w.shape)
        gcols = np.dot(g2, np.ascontiguousarray(w.reshape(o, c * k * k)))
        gx = _col2im_nb(gcols, n, c, h, wd, k, s, p, ho, wo)
        return gx, gw, gb

    @numba.njit(cache=True)
    def _nms_nb(x1, y1, x2, y2, order, thr):
        m = order.shape[0]
        suppressed = np.zeros(m, dtype=np.bool_)
        keep = np.empty(m, dtype=np.int64)
        nk = 0
        for a in range(m):
            if suppressed[a]:
                continue
            i = order[a]
            keep[nk] = i
            nk += 1
            area_i = (x2[i] - x1[i]) * (y2[i] - y1[i])
            for bb in range(a + 1, m):
                if suppressed[bb]:
                    continue
                j = order[bb]
                iw = min(x2[i], x2[j]) - max(x1[i], x1[j])
                ih = min(y2[i], y2[j]) - max(y1[i], y1[j])
                if iw <= 0.0 or ih <= 0.0:
                    continue
                inter = iw * ih
                union = area_i + (x2[j] - x1[j]) * (y2[j] - y1[j]) - inter
                if union > 0.0 and inter / union > thr:
                    suppressed[bb] = True
        return keep[:nk]


# -- dispatch ---------------------------------------------------------------

def conv2d_forward(x, w, b, stride, padding):
    """Cross-correlation of NCHW ``x`` with OIKK ``w``; returns ``(out, ctx)``."""
    if _backend == "numba":
        out, cols = _conv_forward_nb(x, w, b, stride, padding)
        return out, ("numba", cols)
    out, cols = _conv_forward_np(x, w, b, stride, padding)
    return out, ("numpy", cols)


def conv2d_backward(x, w, gout, stride, padding, ctx):
    """Gradients ``(gx, gw, gb)`` for the forward call that produced ``ctx``."""
    kind, cols = ctx
    gout = np.ascontiguousarray(gout)
    if kind == "numba":
        return _conv_backward_nb(x, w, cols, gout, stride, padding)
    return _conv_backward_np(x, w, cols, gout, stride, padding)


def nms_indices(x1, y1, x2, y2, order, iou_threshold):
    """Greedy suppression over ``order`` (pre-sorted by descending score)."""
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (x1, y1, x2, y2)]
    order = np.ascontiguousarray(order, dtype=np.int64)
    if _backend == "numba":
        return _nms_nb(*args, order, float(iou_threshold))
    return _nms_np(*args, order, float(iou_threshold))
