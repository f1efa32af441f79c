"""Dense volume primitives with forward and vector-Jacobian passes.

A volume is a numpy array laid out as ``(channels, X, Y, Z)``; every
primitive also accepts a leading batch axis ``(N, channels, X, Y, Z)``.
Kernels follow the same channel-major convention:

* full 3D kernel: ``(T, S, Kx, Ky, Kz)``
* axis kernel, cross-channel: ``(T, S, K)``; depthwise: ``(C, K)``
* depthwise 3D kernel: ``(C, Kx, Ky, Kz)``
* pointwise matrix: ``(T, S)``

All convolutions use zero "same" padding, stride 1 and no bias. The sum
runs over ``input[x - x'] * w[x']`` with ``x'`` centred on the kernel, i.e.
a true (flipped) convolution rather than a cross-correlation.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "AXES",
    "ShapeError",
    "conv3d_full",
    "conv3d_depthwise",
    "conv_axis",
    "pointwise",
    "relu",
    "concat_channels",
    "split_channels",
    "add",
    "voxel_shuffle",
    "voxel_unshuffle",
    "vjp",
]

AXES = {"X": 0, "Y": 1, "Z": 2}


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ShapeError(f"expected a (C,X,Y,Z) or (N,C,X,Y,Z) array, got shape {x.shape}")


def _unbatch(y, squeeze):
    return y[0] if squeeze else y


def _result_dtype(*arrays):
    dt = np.result_type(*arrays)
    if not np.issubdtype(dt, np.floating):
        dt = np.float64
    return dt


def _check_odd(shape):
    if any(k % 2 == 0 for k in shape):
        raise ShapeError(f"kernel extents must be odd, got {tuple(shape)}")


def _axis_index(axis):
    if isinstance(axis, str):
        try:
            return AXES[axis.upper()]
        except KeyError:
            raise ShapeError(f"unknown axis {axis!r}") from None
    if axis not in (0, 1, 2):
        raise ShapeError(f"unknown axis {axis!r}")
    return int(axis)


def _correlate(xp, w, out_shape):
    """Valid cross-correlation of padded ``xp`` (N,S,...) with ``w`` (T,S,kx,ky,kz).

    Accumulates one matmul per kernel offset in a fixed order, so results
    are reproducible for a fixed BLAS thread count.
    """
    n, s = xp.shape[:2]
    t = w.shape[0]
    X, Y, Z = out_shape
    v = X * Y * Z
    kx, ky, kz = w.shape[2:]
    if s * kx * ky * kz <= 64:
        # few input channels: gather all offsets and do a single matmul
        cols = np.empty((n, kx, ky, kz, s, X, Y, Z), dtype=xp.dtype)
        for a in range(kx):
            for b in range(ky):
                for c in range(kz):
                    cols[:, a, b, c] = xp[:, :, a:a + X, b:b + Y, c:c + Z]
        wm = np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1).reshape(t, -1))
        return np.matmul(wm, cols.reshape(n, -1, v)).reshape(n, t, X, Y, Z)
    out = np.zeros((n, t, v), dtype=_result_dtype(xp, w))
    # contiguous (T,S) slices keep matmul on the BLAS path
    taps = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
    for a in range(w.shape[2]):
        for b in range(w.shape[3]):
            for c in range(w.shape[4]):
                patch = xp[:, :, a:a + X, b:b + Y, c:c + Z].reshape(n, s, v)
                out += np.matmul(taps[a, b, c], patch)
    return out.reshape(n, t, X, Y, Z)


def _pad(x, halves):
    hx, hy, hz = halves
    return np.pad(x, ((0, 0), (0, 0), (hx, hx), (hy, hy), (hz, hz)))


def _flip(w):
    return w[..., ::-1, ::-1, ::-1]


def conv3d_full(x, w):
    """Standard 3D convolution, ``(T,S,Kx,Ky,Kz)`` kernel, zero same-padding."""
    xb, squeeze = _batched(x)
    w = np.asarray(w)
    if w.ndim != 5:
        raise ShapeError(f"kernel must be (T,S,Kx,Ky,Kz), got {w.shape}")
    _check_odd(w.shape[2:])
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {xb.shape[1]} channels, kernel expects {w.shape[1]}")
    halves = tuple(k // 2 for k in w.shape[2:])
    y = _correlate(_pad(xb, halves), _flip(w), xb.shape[2:])
    return _unbatch(y, squeeze)


def conv3d_depthwise(x, w):
    """Per-channel 3D convolution with a ``(C,Kx,Ky,Kz)`` kernel."""
    xb, squeeze = _batched(x)
    w = np.asarray(w)
    if w.ndim != 4 or w.shape[0] != xb.shape[1]:
        raise ShapeError(f"depthwise kernel {w.shape} does not match {xb.shape[1]} channels")
    _check_odd(w.shape[1:])
    halves = tuple(k // 2 for k in w.shape[1:])
    xp = _pad(xb, halves)
    wf = w[:, ::-1, ::-1, ::-1]
    X, Y, Z = xb.shape[2:]
    out = np.zeros(xb.shape, dtype=_result_dtype(xb, w))
    for a in range(w.shape[1]):
        for b in range(w.shape[2]):
            for c in range(w.shape[3]):
                out += wf[None, :, a, b, c, None, None, None] * xp[:, :, a:a + X, b:b + Y, c:c + Z]
    return _unbatch(out, squeeze)


def _axis_pad(x, h, ax):
    pads = [(0, 0)] * 5
    pads[ax + 2] = (h, h)
    return np.pad(x, pads)


def _axis_slice(xp, start, length, ax):
    idx = [slice(None)] * 5
    idx[ax + 2] = slice(start, start + length)
    return xp[tuple(idx)]


def conv_axis(x, w, axis, depthwise=False):
    """1D convolution along one spatial axis.

    Cross-channel mode takes ``w`` of shape ``(T,S,K)`` and sums over all
    input channels. Depthwise mode takes ``(C,K)`` and filters every channel
    on its own.
    """
    xb, squeeze = _batched(x)
    w = np.asarray(w)
    ax = _axis_index(axis)
    n, s = xb.shape[:2]
    length = xb.shape[ax + 2]
    if depthwise:
        if w.ndim != 2 or w.shape[0] != s:
            raise ShapeError(f"depthwise axis kernel {w.shape} does not match {s} channels")
    elif w.ndim != 3 or w.shape[1] != s:
        raise ShapeError(f"axis kernel {w.shape} does not match {s} input channels")
    K = w.shape[-1]
    _check_odd((K,))
    xp = _axis_pad(xb, K // 2, ax)
    wf = w[..., ::-1]
    dt = _result_dtype(xb, w)
    if depthwise:
        out = np.zeros(xb.shape, dtype=dt)
        for k in range(K):
            out += wf[None, :, k, None, None, None] * _axis_slice(xp, k, length, ax)
        return _unbatch(out, squeeze)
    t = w.shape[0]
    v = int(np.prod(xb.shape[2:]))
    out = np.zeros((n, t, v), dtype=dt)
    taps = np.ascontiguousarray(np.moveaxis(wf, -1, 0))
    for k in range(K):
        patch = _axis_slice(xp, k, length, ax).reshape(n, s, v)
        out += np.matmul(taps[k], patch)
    return _unbatch(out.reshape((n, t) + xb.shape[2:]), squeeze)


def pointwise(x, w):
    """Per-voxel linear map of the channel vector by a ``(T,S)`` matrix."""
    xb, squeeze = _batched(x)
    w = np.ascontiguousarray(w)
    if w.ndim != 2 or w.shape[1] != xb.shape[1]:
        raise ShapeError(f"pointwise weights {w.shape} do not match {xb.shape[1]} channels")
    n, s = xb.shape[:2]
    y = np.matmul(w, xb.reshape(n, s, -1)).reshape((n, w.shape[0]) + xb.shape[2:])
    return _unbatch(y, squeeze)


def relu(x):
    return np.maximum(x, 0)


def concat_channels(parts):
    if not parts:
        raise ShapeError("nothing to concatenate")
    arrays = [np.asarray(p) for p in parts]
    ndim = arrays[0].ndim
    spatial = arrays[0].shape[-3:]
    for p in arrays:
        if p.ndim != ndim or p.shape[-3:] != spatial or p.shape[:-4] != arrays[0].shape[:-4]:
            raise ShapeError("concat parts must share batch and spatial dims")
    return np.concatenate(arrays, axis=-4)


def split_channels(x, sizes):
    """Inverse of :func:`concat_channels` for the given channel counts."""
    x = np.asarray(x)
    if sum(sizes) != x.shape[-4]:
        raise ShapeError(f"sizes {sizes} do not add up to {x.shape[-4]} channels")
    return np.split(x, np.cumsum(sizes)[:-1], axis=-4)


def add(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def voxel_shuffle(x, r):
    """Rearrange ``C*r**3`` channels into an r-times larger grid.

    ``out[c, r*x+dx, r*y+dy, r*z+dz] = in[c*r**3 + dx*r**2 + dy*r + dz, x, y, z]``
    """
    xb, squeeze = _batched(x)
    n, ch, X, Y, Z = xb.shape
    r = int(r)
    if r < 1 or ch % r ** 3:
        raise ShapeError(f"{ch} channels are not divisible by r^3 = {r ** 3}")
    c = ch // r ** 3
    y = xb.reshape(n, c, r, r, r, X, Y, Z).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return _unbatch(y.reshape(n, c, X * r, Y * r, Z * r), squeeze)


def voxel_unshuffle(x, r):
    """Exact inverse permutation of :func:`voxel_shuffle`."""
    xb, squeeze = _batched(x)
    n, c, X, Y, Z = xb.shape
    r = int(r)
    if r < 1 or X % r or Y % r or Z % r:
        raise ShapeError(f"spatial dims {(X, Y, Z)} are not divisible by {r}")
    y = xb.reshape(n, c, X // r, r, Y // r, r, Z // r, r).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    return _unbatch(y.reshape(n, c * r ** 3, X // r, Y // r, Z // r), squeeze)


# --- vector-Jacobian products -------------------------------------------------

def _outer_sum(gm, pm):
    """sum_n gm[n] @ pm[n].T for (N,T,V) and (N,S,V) stacks -> (T,S)."""
    return np.matmul(gm, pm.transpose(0, 2, 1)).sum(axis=0)


def _vjp_conv3d_full(inputs, g, needs=(True, True), **_):
    x, w = (np.asarray(a) for a in inputs)
    xb, squeeze = _batched(x)
    gb, _ = _batched(g)
    if gb.shape[0] != xb.shape[0] or gb.shape[1] != w.shape[0] or gb.shape[2:] != xb.shape[2:]:
        raise ShapeError("upstream gradient does not match conv3d_full output")
    gx = gw = None
    if needs[0]:
        gx = _unbatch(conv3d_full(gb, _flip(w).swapaxes(0, 1)), squeeze)
    if needs[1]:
        halves = tuple(k // 2 for k in w.shape[2:])
        xp = _pad(xb, halves)
        n, s = xb.shape[:2]
        X, Y, Z = xb.shape[2:]
        gm = gb.reshape(n, w.shape[0], -1)
        gw = np.empty(w.shape, dtype=_result_dtype(xb, gb))
        kx, ky, kz = w.shape[2:]
        for a in range(kx):
            for b in range(ky):
                for c in range(kz):
                    patch = xp[:, :, a:a + X, b:b + Y, c:c + Z].reshape(n, s, -1)
                    gw[:, :, kx - 1 - a, ky - 1 - b, kz - 1 - c] = _outer_sum(gm, patch)
    return gx, gw


def _vjp_conv3d_depthwise(inputs, g, needs=(True, True), **_):
    x, w = (np.asarray(a) for a in inputs)
    xb, squeeze = _batched(x)
    gb, _ = _batched(g)
    if gb.shape != xb.shape:
        raise ShapeError("upstream gradient does not match conv3d_depthwise output")
    gx = gw = None
    if needs[0]:
        gx = _unbatch(conv3d_depthwise(gb, w[:, ::-1, ::-1, ::-1]), squeeze)
    if needs[1]:
        halves = tuple(k // 2 for k in w.shape[1:])
        xp = _pad(xb, halves)
        X, Y, Z = xb.shape[2:]
        kx, ky, kz = w.shape[1:]
        gw = np.empty(w.shape, dtype=_result_dtype(xb, gb))
        for a in range(kx):
            for b in range(ky):
                for c in range(kz):
                    patch = xp[:, :, a:a + X, b:b + Y, c:c + Z]
                    gw[:, kx - 1 - a, ky - 1 - b, kz - 1 - c] = (gb * patch).sum(axis=(0, 2, 3, 4))
    return gx, gw


def _vjp_conv_axis(inputs, g, axis, depthwise=False, needs=(True, True)):
    x, w = (np.asarray(a) for a in inputs)
    xb, squeeze = _batched(x)
    gb, _ = _batched(g)
    ax = _axis_index(axis)
    K = w.shape[-1]
    if depthwise and gb.shape != xb.shape:
        raise ShapeError("upstream gradient does not match conv_axis output")
    if not depthwise and (gb.shape[1] != w.shape[0] or gb.shape[2:] != xb.shape[2:]):
        raise ShapeError("upstream gradient does not match conv_axis output")
    gx = gw = None
    if needs[0]:
        if depthwise:
            gx = conv_axis(gb, w[:, ::-1], ax, depthwise=True)
        else:
            gx = conv_axis(gb, w[..., ::-1].swapaxes(0, 1), ax)
        gx = _unbatch(gx, squeeze)
    if needs[1]:
        xp = _axis_pad(xb, K // 2, ax)
        length = xb.shape[ax + 2]
        gw = np.empty(w.shape, dtype=_result_dtype(xb, gb))
        n, s = xb.shape[:2]
        gm = gb.reshape(n, gb.shape[1], -1)
        for k in range(K):
            patch = _axis_slice(xp, k, length, ax)
            if depthwise:
                gw[:, K - 1 - k] = (gb * patch).sum(axis=(0, 2, 3, 4))
            else:
                gw[:, :, K - 1 - k] = _outer_sum(gm, patch.reshape(n, s, -1))
    return gx, gw


def _vjp_pointwise(inputs, g, needs=(True, True), **_):
    x, w = (np.asarray(a) for a in inputs)
    xb, squeeze = _batched(x)
    gb, _ = _batched(g)
    if gb.shape[1] != w.shape[0] or gb.shape[2:] != xb.shape[2:]:
        raise ShapeError("upstream gradient does not match pointwise output")
    n = xb.shape[0]
    gm = gb.reshape(n, gb.shape[1], -1)
    gx = gw = None
    if needs[0]:
        gx = _unbatch(np.matmul(np.ascontiguousarray(w.T), gm).reshape(xb.shape), squeeze)
    if needs[1]:
        gw = _outer_sum(gm, xb.reshape(n, xb.shape[1], -1))
    return gx, gw


def _vjp_relu(inputs, g, **_):
    (x,) = inputs
    if np.shape(g) != np.shape(x):
        raise ShapeError("upstream gradient does not match relu output")
    return (np.where(np.asarray(x) > 0, g, 0).astype(np.result_type(g)),)


def _vjp_add(inputs, g, **_):
    a, b = inputs
    if np.shape(g) != np.shape(a) or np.shape(a) != np.shape(b):
        raise ShapeError("upstream gradient does not match add output")
    return g, g


def _vjp_concat(inputs, g, **_):
    sizes = [np.shape(p)[-4] for p in inputs]
    return tuple(split_channels(g, sizes))


def _vjp_voxel_shuffle(inputs, g, r):
    (x,) = inputs
    gx = voxel_unshuffle(g, r)
    if gx.shape != np.shape(x):
        raise ShapeError("upstream gradient does not match voxel_shuffle output")
    return (gx,)


_VJP = {
    "conv3d_full": _vjp_conv3d_full,
    "conv3d_depthwise": _vjp_conv3d_depthwise,
    "conv_axis": _vjp_conv_axis,
    "pointwise": _vjp_pointwise,
    "relu": _vjp_relu,
    "add": _vjp_add,
    "concat_channels": _vjp_concat,
    "voxel_shuffle": _vjp_voxel_shuffle,
}


_WEIGHTED = ("conv3d_full", "conv3d_depthwise", "conv_axis", "pointwise")


def vjp(op, inputs, upstream, needs=None, **params):
    """Pull ``upstream`` back through primitive ``op``.

    ``inputs`` are the forward operands in call order (data first, then
    weights); the result is a tuple of gradients in that same order.
    Extra keyword parameters (``axis``, ``depthwise``, ``r``) are the
    forward call's non-differentiable arguments. ``needs`` optionally
    flags which gradients to compute for weighted ops; skipped entries
    come back as ``None``.
    """
    try:
        fn = _VJP[op]
    except KeyError:
        raise ValueError(f"no vjp registered for {op!r}") from None
    if op in _WEIGHTED and needs is not None:
        params["needs"] = tuple(needs)
    return tuple(fn(tuple(inputs), np.asarray(upstream), **params))
