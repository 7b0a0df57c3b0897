"""Forward/backward primitives on channel-first numpy arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``.  Convolutions work on single items shaped
``(C, H, W)``; batching happens one level up so items may differ in length.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np


class ParamTable:
    """Named parameter arrays backed by one flat vector.

    ``table[name]`` is a writable view into ``table.flat`` so optimisers can
    update everything in one vectorised step.
    """

    def __init__(self, shapes: "OrderedDict[str, tuple[int, ...]]", dtype=np.float32, flat=None):
        self.shapes = OrderedDict((k, tuple(v)) for k, v in shapes.items())
        self.offsets = OrderedDict()
        pos = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (pos, size)
            pos += size
        self.size = pos
        if flat is None:
            flat = np.zeros(pos, dtype=dtype)
        flat = np.asarray(flat)
        if flat.shape != (pos,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({pos},)")
        self.flat = flat

    def __getitem__(self, name: str) -> np.ndarray:
        start, size = self.offsets[name]
        return self.flat[start : start + size].reshape(self.shapes[name])

    def __contains__(self, name: str) -> bool:
        return name in self.shapes

    def names(self):
        return list(self.shapes)

    def zeros_like(self) -> "ParamTable":
        return ParamTable(self.shapes, flat=np.zeros_like(self.flat))

    def copy(self) -> "ParamTable":
        return ParamTable(self.shapes, flat=self.flat.copy())

    def astype(self, dtype) -> "ParamTable":
        return ParamTable(self.shapes, flat=self.flat.astype(dtype))

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        view = self[name]
        view += grad.astype(view.dtype, copy=False)


# -- activations ----------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu_forward(x):
    s = _sigmoid(x)
    return x * s, (x, s)


def silu_backward(dout, cache):
    x, s = cache
    return dout * (s * (1.0 + x * (1.0 - s)))


# -- convolution ----------------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    c = x.shape[0]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    if kh == stride and kw == stride:
        hp, wp = x.shape[1] // stride, x.shape[2] // stride
        x = x[:, : hp * stride, : wp * stride]
        cols = x.reshape(c, hp, kh, wp, kw).transpose(0, 2, 4, 1, 3)
        return np.ascontiguousarray(cols).reshape(c * kh * kw, hp * wp), hp, wp
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    view = view[:, ::stride, ::stride]
    ho, wo = view.shape[1], view.shape[2]
    cols = np.ascontiguousarray(view.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d_forward(x, w, b, stride=1, pad=None):
    """2-D cross-correlation. ``w`` is (O, C, kh, kw); default padding keeps size for odd kernels."""
    o, c, kh, kw = w.shape
    if pad is None:
        pad = (kh - 1) // 2 if stride == 1 else 0
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    wm = w.reshape(o, -1).astype(x.dtype, copy=False)
    out = wm @ cols
    out += b.astype(x.dtype, copy=False)[:, None]
    return out.reshape(o, ho, wo), (x, w, stride, pad)


def conv2d_backward(dout, cache):
    x, w, stride, pad = cache
    o, c, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    d2 = dout.reshape(o, ho * wo)
    dw = (d2 @ cols.T).reshape(w.shape)
    del cols
    db = d2.sum(axis=1)
    dcols = (w.reshape(o, -1).astype(dout.dtype, copy=False).T @ d2).reshape(c, kh, kw, ho, wo)
    hp, wp = x.shape[1] + 2 * pad, x.shape[2] + 2 * pad
    if kh == stride and kw == stride and pad == 0:
        dxp = np.zeros((c, hp, wp), dtype=dout.dtype)
        blk = dcols.transpose(0, 3, 1, 4, 2).reshape(c, ho * stride, wo * stride)
        dxp[:, : ho * stride, : wo * stride] = blk
    else:
        dxp = np.zeros((c, hp, wp), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad]
    return dxp, dw, db


def _time_cols(f, kw):
    """(C, T) -> (C*kw, T) columns for a same-padded 1-D correlation."""
    pad = (kw - 1) // 2
    fp = np.pad(f, ((0, 0), (pad, pad)))
    view = np.lib.stride_tricks.sliding_window_view(fp, kw, axis=1)  # (C, T, kw)
    return np.ascontiguousarray(view.transpose(0, 2, 1)).reshape(-1, f.shape[1])


def broadcast_conv_forward(h, f, w, b):
    """Same-padded 3x3 conv of concat(h, f broadcast over frequency).

    Equivalent to ``conv2d_forward(broadcast_concat(h, f), w, b)``.  Because
    the ``f`` channels are constant along frequency, their contribution is a
    1-D time correlation per kernel row; edge rows lose the kernel row that
    falls on the zero padding.
    """
    o, c_all, kh, kw = w.shape
    c = h.shape[0]
    if kh != 3:
        raise ValueError("broadcast_conv expects a 3-row kernel")
    out, hcache = conv2d_forward(h, w[:, :c], b)
    cols = _time_cols(f.astype(h.dtype, copy=False), kw)
    wf = w[:, c:].astype(h.dtype, copy=False)
    rows = [wf[:, :, i, :].reshape(o, -1) @ cols for i in range(kh)]  # each (O, T)
    out += (rows[0] + rows[1] + rows[2])[:, None, :]
    out[:, 0, :] -= rows[0]
    out[:, -1, :] -= rows[2]
    return out, (hcache, f, w)


def broadcast_conv_backward(dout, cache):
    hcache, f, w = cache
    o, c_all, kh, kw = w.shape
    c = hcache[0].shape[0]
    dh, dw_h, db = conv2d_backward(dout, hcache)
    total = dout.sum(axis=1)
    d_rows = [total - dout[:, 0, :], total, total - dout[:, -1, :]]
    cols = _time_cols(f.astype(dout.dtype, copy=False), kw)
    cf = f.shape[0]
    dw_f = np.empty((o, cf, kh, kw), dtype=dout.dtype)
    dcols = np.zeros((cf * kw, f.shape[1]), dtype=dout.dtype)
    wf = w[:, c:].astype(dout.dtype, copy=False)
    for i in range(kh):
        dw_f[:, :, i, :] = (d_rows[i] @ cols.T).reshape(o, cf, kw)
        dcols += wf[:, :, i, :].reshape(o, -1).T @ d_rows[i]
    dcols = dcols.reshape(cf, kw, -1)
    pad = (kw - 1) // 2
    dfp = np.zeros((cf, f.shape[1] + 2 * pad), dtype=dout.dtype)
    for j in range(kw):
        dfp[:, j : j + f.shape[1]] += dcols[:, j]
    df = dfp[:, pad : pad + f.shape[1]]
    dw = np.concatenate([dw_h, dw_f], axis=1)
    return dh, df, dw, db


# -- resampling / plumbing ----------------------------------------------------------


def upsample_forward(x, r):
    """Nearest-neighbour upsampling of the last two axes by ``r``."""
    return np.repeat(np.repeat(x, r, axis=-2), r, axis=-1), (x.shape, r)


def upsample_backward(dout, cache):
    shape, r = cache
    c, h, w = shape
    return dout.reshape(c, h, r, w, r).sum(axis=(2, 4))


def broadcast_concat_forward(h, f):
    """Concatenate feature map ``h`` (C, F, T) with ``f`` (Cf, T) broadcast over frequency."""
    fb = np.broadcast_to(f[:, None, :].astype(h.dtype, copy=False), (f.shape[0],) + h.shape[1:])
    return np.concatenate([h, fb], axis=0), h.shape[0]


def broadcast_concat_backward(dout, split):
    return dout[:split], dout[split:].sum(axis=1)


def linear_forward(x, w, b):
    """y = w @ x + b for a vector or a (D, T) matrix."""
    wx = w.astype(x.dtype, copy=False) @ x
    bb = b.astype(x.dtype, copy=False)
    return (wx + (bb[:, None] if x.ndim == 2 else bb)), (x, w)


def linear_backward(dout, cache):
    x, w = cache
    if x.ndim == 1:
        dw = np.outer(dout, x)
        db = dout
    else:
        dw = dout @ x.T
        db = dout.sum(axis=1)
    dx = w.astype(dout.dtype, copy=False).T @ dout
    return dx, dw, db


def softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(dw, w):
    """Gradient w.r.t. logits given gradient w.r.t. row-softmax output ``w``."""
    return w * (dw - (dw * w).sum(axis=-1, keepdims=True))
