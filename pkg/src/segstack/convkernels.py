"""Raw ndarray kernels for 2-D convolution and 2x2 max pooling.

Two forward routes are provided and selected by kernel footprint:

* ``direct``: a loop over the kh*kw kernel offsets, each step a single
  channel contraction over a strided view of the padded input.  No
  column matrix is materialized, so it wins for small kernels.
* ``im2col``: gathers all receptive fields into one column matrix and
  performs a single GEMM.  Wins once the kernel footprint (and with it
  the arithmetic intensity per column) grows.

Both routes produce identical results up to float reduction order; the
test suite pins each against a naive nested-loop oracle.  Backward
passes use the offset-loop formulation, which handles every stride
uniformly and keeps scatter operations vectorized per offset.

Everything here is pure ndarray-in/ndarray-out; autodiff wiring lives
in ``nnops``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

# Kernel footprints up to this area use the direct offset-loop route.
_DIRECT_MAX_AREA = 9


def conv_out_extent(extent: int, k: int, pad: int, stride: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, pad: tuple[int, int],
                       stride: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (n,c,h,w), got {x.ndim}-D")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (oc,ic,kh,kw), got {w.ndim}-D")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if c != ic:
        raise ShapeError(
            f"conv2d: channel axis mismatch, input has {c} channels but weight expects {ic}")
    ph, pw = pad
    if h + 2 * ph < kh:
        raise ShapeError(
            f"conv2d: height axis too small, {h}+2*{ph} padded < kernel {kh}")
    if wd + 2 * pw < kw:
        raise ShapeError(
            f"conv2d: width axis too small, {wd}+2*{pw} padded < kernel {kw}")
    return conv_out_extent(h, kh, ph, stride), conv_out_extent(wd, kw, pw, stride)


def _pad_input(x: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    ph, pw = pad
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def select_route(kh: int, kw: int) -> str:
    return "direct" if kh * kw <= _DIRECT_MAX_AREA else "im2col"


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                   pad: tuple[int, int], stride: int = 1,
                   route: str | None = None) -> np.ndarray:
    """Cross-correlation of ``x`` (n,c,h,w) with ``w`` (oc,c,kh,kw)."""
    oh, ow = _check_conv_shapes(x, w, pad, stride)
    oc, _, kh, kw = w.shape
    n = x.shape[0]
    if route is None:
        route = select_route(kh, kw)
    xp = _pad_input(x, pad)

    if route == "direct":
        # accumulate in channels-last layout so each offset step is one GEMM
        acc = np.zeros((n, oh, ow, oc), dtype=x.dtype)
        for ki in range(kh):
            for kj in range(kw):
                xs = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
                # (n,c,oh,ow) x (oc,c) -> (n,oh,ow,oc)
                acc += np.tensordot(xs, w[:, :, ki, kj], axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    elif route == "im2col":
        cols = _im2col(xp, kh, kw, stride, oh, ow)          # (n*oh*ow, c*kh*kw)
        out = cols @ w.reshape(oc, -1).T                     # (n*oh*ow, oc)
        out = np.ascontiguousarray(
            out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))
    else:
        raise ValueError(f"unknown conv route {route!r}")

    if b is not None:
        out += b.reshape(1, oc, 1, 1).astype(x.dtype, copy=False)
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    # windows view: (n, c, oh, ow, kh, kw) without copying
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray,
                    pad: tuple[int, int], stride: int,
                    need_input_grad: bool = True
                    ) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of the conv2d output w.r.t. input, weight and bias.

    ``g`` is the upstream gradient with the output's shape (n,oc,oh,ow).
    Returns (grad_x, grad_w, grad_b); grad_x is None when not requested.
    """
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh, ow = g.shape[2], g.shape[3]
    ph, pw = pad
    xp = _pad_input(x, pad)

    grad_b = g.sum(axis=(0, 2, 3))

    grad_w = np.empty_like(w)
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
            # (n,oc,oh,ow) x (n,c,oh,ow) -> (oc,c)
            grad_w[:, :, ki, kj] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))

    grad_x = None
    if need_input_grad:
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                # (n,oc,oh,ow) x (oc,c) -> (n,oh,ow,c)
                contrib = np.tensordot(g, w[:, :, ki, kj], axes=([1], [0]))
                gxp[:, :, ki:ki + stride * oh:stride,
                    kj:kj + stride * ow:stride] += contrib.transpose(0, 3, 1, 2)
        grad_x = gxp[:, :, ph:ph + h, pw:pw + wd]
        if ph or pw:
            grad_x = np.ascontiguousarray(grad_x)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# 2x2 max pooling with argmax masks


def _window_view(x: np.ndarray) -> np.ndarray:
    """(n,c,h,w) -> (n,c,h/2,w/2,4) with row-major window order."""
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // 2, 2, w // 2, 2)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (pooled, indices); indices are flat offsets 0..3 within each
    2x2 window, row-major, first occurrence winning ties."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2: input must be 4-D, got {x.ndim}-D")
    n, c, h, w = x.shape
    if h % 2:
        raise ShapeError(f"maxpool2: height axis extent {h} is odd")
    if w % 2:
        raise ShapeError(f"maxpool2: width axis extent {w} is odd")
    v = _window_view(x)
    idx = v.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _scatter_windows(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Place ``values`` (n,c,oh,ow) at window offsets ``idx`` in a doubled map."""
    n, c, oh, ow = values.shape
    buf = np.zeros((n, c, oh, ow, 4), dtype=values.dtype)
    np.put_along_axis(buf, idx[..., None].astype(np.intp), values[..., None], axis=-1)
    out = buf.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(out.reshape(n, c, 2 * oh, 2 * ow))


def maxpool2_backward(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return _scatter_windows(g, idx)


def unpool2_forward(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    if x.shape != idx.shape:
        raise ShapeError(
            f"unpool2: input shape {x.shape} does not match mask shape {idx.shape}")
    return _scatter_windows(x, idx)


def unpool2_backward(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    gv = _window_view(g)
    return np.take_along_axis(gv, idx[..., None].astype(np.intp), axis=-1)[..., 0]
