"""Differentiable primitives: elementwise math, reductions, shape ops,
matmul, 2D/3D convolution, grid sampling and alpha compositing."""

from __future__ import annotations

import numpy as np

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    make_op,
    strict_mode,
)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(op, *tensors):
    if strict_mode():
        for t in tensors:
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"{op}: non-finite input in strict mode")


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op("add", out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op("sub", out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op("mul", out, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("div", a, b)
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op("div", out, (a, b), bwd)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return make_op("pow", out, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return make_op("exp", out, (a,), bwd)


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return make_op("log", out, (a,), bwd)


def sin(a):
    a = as_tensor(a)
    out = np.sin(a.data)

    def bwd(g):
        return (g * np.cos(a.data),)

    return make_op("sin", out, (a,), bwd)


def cos(a):
    a = as_tensor(a)
    out = np.cos(a.data)

    def bwd(g):
        return (-g * np.sin(a.data),)

    return make_op("cos", out, (a,), bwd)


def relu(a):
    """relu with subgradient 0 at the kink."""
    a = as_tensor(a)
    mask = a.data > 0
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return make_op("relu", out, (a,), bwd)


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype)

    def bwd(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return make_op("softplus", out, (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return make_op("sigmoid", out, (a,), bwd)


def clamp(a, lo=None, hi=None):
    """Clip values; gradient is zero where the clip is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi

    def bwd(g):
        return (g * mask,)

    return make_op("clamp", out, (a,), bwd)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_op("softmax", out, (a,), bwd)


# -- reductions ----------------------------------------------------------


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return make_op("sum", np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- shape manipulation --------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return make_op("reshape", out, (a,), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return make_op("transpose", out, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op("concat", out, tuple(tensors), bwd)


def stack(tensors, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in
                   map(as_tensor, tensors)], axis=axis)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)  # basic slices never alias, allowing direct add

    def bwd(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return make_op("getitem", np.asarray(out), (a,), bwd)


def pad(a, pad_width):
    a = as_tensor(a)
    out = np.pad(a.data, pad_width)
    sl = tuple(slice(p0, p0 + s) for (p0, _), s in zip(pad_width, a.shape))

    def bwd(g):
        return (g[sl],)

    return make_op("pad", out, (a,), bwd)


def flip(a, axes):
    a = as_tensor(a)
    out = np.flip(a.data, axes)

    def bwd(g):
        return (np.flip(g, axes).copy(),)

    return make_op("flip", out, (a,), bwd)


def zero_interleave(a, axes, step=2):
    """Insert ``step-1`` zeros between entries along ``axes`` (for transposed conv)."""
    a = as_tensor(a)
    shape = list(a.shape)
    sl = [slice(None)] * a.ndim
    for ax in axes:
        shape[ax] = (shape[ax] - 1) * step + 1
        sl[ax] = slice(None, None, step)
    sl = tuple(sl)
    out = np.zeros(shape, dtype=a.dtype)
    out[sl] = a.data

    def bwd(g):
        return (g[sl].copy(),)

    return make_op("zero_interleave", out, (a,), bwd)


# -- linear algebra ------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    _check_finite("matmul", a, b)
    out = a.data @ b.data
    need_a = a.requires_grad or a.node is not None
    need_b = b.requires_grad or b.node is not None

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if need_b else None
        return ga, gb

    return make_op("matmul", out, (a, b), bwd)


# -- convolution ---------------------------------------------------------


def _im2col2d(x, kh, kw, stride):
    # x: (B, C, H, W) already padded -> (B, C, kh, kw, Ho, Wo)
    B, C, H, W = x.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, (B, C, kh, kw, Ho, Wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return cols, Ho, Wo


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D convolution, NCHW layout; x (B,Ci,H,W), w (Co,Ci,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    _check_finite("conv2d", x, w)
    Co, Ci, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, Ho, Wo = _im2col2d(xp, kh, kw, stride)
    B = x.shape[0]
    col2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, Ci * kh * kw)
    wf = w.data.reshape(Co, -1)
    out = (col2 @ wf.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    if b is not None:
        bt = as_tensor(b)
        out = out + bt.data.reshape(1, Co, 1, 1)
        parents = (x, w, bt)
    else:
        parents = (x, w)

    need_x = x.requires_grad or x.node is not None
    need_w = w.requires_grad or w.node is not None

    def bwd(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gw = (gf.T @ col2).reshape(w.shape) if need_w else None
        gx = None
        if need_x:
            gcol = (gf @ wf).reshape(B, Ho, Wo, Ci, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += \
                        gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            H, W = x.shape[2], x.shape[3]
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return make_op("conv2d", out, parents, bwd)


def conv3d(x, w, b=None, stride=1, padding=0):
    """3D convolution, NCDHW layout; x (B,Ci,D,H,W), w (Co,Ci,kd,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv3d", x.shape, w.shape)
    _check_finite("conv3d", x, w)
    Co, Ci, kd, kh, kw = w.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    B, _, D, H, W = xp.shape
    Do = (D - kd) // stride + 1
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (B, Ci, kd, kh, kw, Do, Ho, Wo),
        (s[0], s[1], s[2], s[3], s[4], s[2] * stride, s[3] * stride, s[4] * stride))
    col2 = cols.transpose(0, 5, 6, 7, 1, 2, 3, 4).reshape(B * Do * Ho * Wo, Ci * kd * kh * kw)
    wf = w.data.reshape(Co, -1)
    out = (col2 @ wf.T).reshape(B, Do, Ho, Wo, Co).transpose(0, 4, 1, 2, 3)
    if b is not None:
        bt = as_tensor(b)
        out = out + bt.data.reshape(1, Co, 1, 1, 1)
        parents = (x, w, bt)
    else:
        parents = (x, w)

    need_x = x.requires_grad or x.node is not None
    need_w = w.requires_grad or w.node is not None

    def bwd(g):
        gf = g.transpose(0, 2, 3, 4, 1).reshape(B * Do * Ho * Wo, Co)
        gw = (gf.T @ col2).reshape(w.shape) if need_w else None
        if not need_x:
            if b is not None:
                return None, gw, g.sum(axis=(0, 2, 3, 4))
            return None, gw
        if stride == 1:
            # backward-data = full correlation of g with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1),
                            (kw - 1, kw - 1)))
            st = gp.strides
            gcols = np.lib.stride_tricks.as_strided(
                gp, (B, Co, kd, kh, kw, D, H, W),
                (st[0], st[1], st[2], st[3], st[4], st[2], st[3], st[4]))
            gcol2 = gcols.transpose(0, 5, 6, 7, 1, 2, 3, 4).reshape(
                B * D * H * W, Co * kd * kh * kw)
            wflip = np.flip(w.data, (2, 3, 4)).transpose(1, 0, 2, 3, 4)  # (Ci,Co,kd,kh,kw)
            gxp = (gcol2 @ wflip.reshape(Ci, -1).T).reshape(B, D, H, W, Ci)
            gxp = gxp.transpose(0, 4, 1, 2, 3)
        else:
            gcol = (gf @ wf).reshape(B, Do, Ho, Wo, Ci, kd, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gxp[:, :, i:i + Do * stride:stride,
                            j:j + Ho * stride:stride,
                            k:k + Wo * stride:stride] += \
                            gcol[:, :, :, :, :, i, j, k].transpose(0, 4, 1, 2, 3)
        D0, H0, W0 = x.shape[2], x.shape[3], x.shape[4]
        gx = gxp[:, :, p:p + D0, p:p + H0, p:p + W0]
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3, 4))
        return gx, gw

    return make_op("conv3d", out, parents, bwd)


def conv3d_transpose(x, w, b=None, stride=2, padding=1):
    """Transposed 3D convolution via zero-stuffing + conv3d.

    x (B,Ci,D,H,W), w (Ci,Co,kd,kh,kw); output spatial size (D-1)*stride - 2*padding + kd.
    """
    x, w = as_tensor(x), as_tensor(w)
    kd = w.shape[2]
    up = zero_interleave(x, axes=(2, 3, 4), step=stride)
    pw = kd - 1 - padding
    up = pad(up, ((0, 0), (0, 0), (pw, pw), (pw, pw), (pw, pw)))
    wz = transpose(flip(w, (2, 3, 4)), (1, 0, 2, 3, 4))
    return conv3d(up, wz, b=b, stride=1, padding=0)


# -- grid sampling -------------------------------------------------------


def bilinear_sample(grid, uv):
    """Sample a (C,H,W) grid at continuous pixel coords uv (P,2), zero padding.

    uv follows the pixel-center convention: (i+0.5, j+0.5) hits the center
    of column i, row j exactly. Differentiable w.r.t. both grid and uv;
    out-of-image corners contribute zero (and zero gradient).
    """
    grid, uv = as_tensor(grid), as_tensor(uv)
    if grid.ndim != 3 or uv.ndim != 2 or uv.shape[1] != 2:
        raise ShapeError("bilinear_sample", grid.shape, uv.shape)
    _check_finite("bilinear_sample", grid, uv)
    C, H, W = grid.shape
    x = uv.data[:, 0] - 0.5  # column coordinate
    y = uv.data[:, 1] - 0.5  # row coordinate
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    P = uv.shape[0]

    vals = []
    infos = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            xc = np.clip(xi, 0, W - 1)
            yc = np.clip(yi, 0, H - 1)
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * valid
            vals.append(grid.data[:, yc, xc] * wgt)  # (C,P)
            infos.append((xc, yc, wgt, valid, dx, dy))
    out = (vals[0] + vals[1] + vals[2] + vals[3]).T.copy()  # (P,C)
    need_grid = grid.requires_grad or grid.node is not None
    need_uv = uv.requires_grad or uv.node is not None

    def bwd(g):
        ggrid = guv = None
        gT = g.T  # (C,P)
        if need_grid:
            offs = (np.arange(C) * (H * W))[:, None]
            flats = np.stack([yc * W + xc for (xc, yc, *_r) in infos])  # (4,P)
            wgts = np.stack([wgt for (_x, _y, wgt, *_r) in infos])  # (4,P)
            idx = flats[:, None, :] + offs[None, :, :]  # (4,C,P)
            ggrid = np.bincount(idx.ravel(),
                                weights=(gT[None] * wgts[:, None, :]).ravel(),
                                minlength=C * H * W).reshape(C, H, W)
        if need_uv:
            guv = np.zeros((P, 2), dtype=g.dtype)
        for (xc, yc, wgt, valid, dx, dy) in infos:
            if need_uv:
                corner = grid.data[:, yc, xc] * valid  # (C,P)
                dot = (gT * corner).sum(axis=0)  # (P,)
                dwx = (1.0 if dx else -1.0) * (fy if dy else 1.0 - fy)
                dwy = (1.0 if dy else -1.0) * (fx if dx else 1.0 - fx)
                guv[:, 0] += dot * dwx
                guv[:, 1] += dot * dwy
        if ggrid is not None:
            ggrid = ggrid.astype(grid.dtype)
        return ggrid, guv

    return make_op("bilinear_sample", out, (grid, uv), bwd)


def trilinear_sample(volume, pts):
    """Sample a (C,Nx,Ny,Nz) volume at continuous index coords pts (P,3).

    Clamp-to-edge: coordinates are clipped into [0, N-1] per axis; the
    coordinate gradient is zero where the clamp is active. Differentiable
    w.r.t. both volume values and coordinates.
    """
    volume, pts = as_tensor(volume), as_tensor(pts)
    if volume.ndim != 4 or pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError("trilinear_sample", volume.shape, pts.shape)
    _check_finite("trilinear_sample", volume, pts)
    C, Nx, Ny, Nz = volume.shape
    P = pts.shape[0]
    dims = (Nx, Ny, Nz)
    coord = [np.clip(pts.data[:, a], 0.0, dims[a] - 1.0) for a in range(3)]
    active = [(pts.data[:, a] > 0.0) & (pts.data[:, a] < dims[a] - 1.0) for a in range(3)]
    lo = [np.minimum(np.floor(c).astype(np.int64), dims[a] - 2) if dims[a] > 1
          else np.zeros(P, np.int64) for a, c in enumerate(coord)]
    fr = [coord[a] - lo[a] for a in range(3)]

    out = np.zeros((P, C), dtype=volume.dtype)
    corners = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                xi = np.clip(lo[0] + dx, 0, Nx - 1)
                yi = np.clip(lo[1] + dy, 0, Ny - 1)
                zi = np.clip(lo[2] + dz, 0, Nz - 1)
                w = ((fr[0] if dx else 1.0 - fr[0])
                     * (fr[1] if dy else 1.0 - fr[1])
                     * (fr[2] if dz else 1.0 - fr[2]))
                v = volume.data[:, xi, yi, zi]  # (C,P)
                out += (v * w).T
                corners.append((xi, yi, zi, w, v, (dx, dy, dz)))

    need_vol = volume.requires_grad or volume.node is not None
    need_pts = pts.requires_grad or pts.node is not None

    def bwd(g):
        gvol = gpts = None
        gT = g.T  # (C,P)
        if need_vol:
            nvox = Nx * Ny * Nz
            offs = (np.arange(C) * nvox)[:, None]
            flats = np.stack([(xi * Ny + yi) * Nz + zi
                              for (xi, yi, zi, *_r) in corners])  # (8,P)
            wgts = np.stack([w for (_x, _y, _z, w, *_r) in corners])  # (8,P)
            idx = flats[:, None, :] + offs[None, :, :]  # (8,C,P)
            gvol = np.bincount(idx.ravel(),
                               weights=(gT[None] * wgts[:, None, :]).ravel(),
                               minlength=C * nvox).reshape(C, Nx, Ny, Nz)
        if need_pts:
            gpts = np.zeros((P, 3), dtype=g.dtype)
        for (xi, yi, zi, w, v, (dx, dy, dz)) in corners:
            if need_pts:
                dot = (gT * v).sum(axis=0)
                d = [dx, dy, dz]
                f = fr
                dw = [
                    (1.0 if d[0] else -1.0) * (f[1] if d[1] else 1 - f[1]) * (f[2] if d[2] else 1 - f[2]),
                    (f[0] if d[0] else 1 - f[0]) * (1.0 if d[1] else -1.0) * (f[2] if d[2] else 1 - f[2]),
                    (f[0] if d[0] else 1 - f[0]) * (f[1] if d[1] else 1 - f[1]) * (1.0 if d[2] else -1.0),
                ]
                for a in range(3):
                    gpts[:, a] += dot * dw[a] * active[a]
        if gvol is not None:
            gvol = gvol.astype(volume.dtype)
        return gvol, gpts

    return make_op("trilinear_sample", out, (volume, pts), bwd)


def mean_pool(tensors):
    """Mean over a list of same-shape tensors (multiview aggregation)."""
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return mul(acc, 1.0 / len(tensors))


# -- compositing ---------------------------------------------------------


def composite(alphas, colors):
    """Front-to-back alpha compositing along the sample axis.

    alphas (R,M) in [0,1], colors (R,M,3). Returns (c_r (R,3), W (R,)) with
    weights w_j = a_j * prod_{k<j}(1 - a_k). The backward division by
    (1 - a_j) is guarded at 1e-12; exact alpha=1 upstream of other samples
    zeroes their weights, so the guarded term is multiplied by ~0 there.
    """
    alphas, colors = as_tensor(alphas), as_tensor(colors)
    if alphas.ndim != 2 or colors.shape != alphas.shape + (3,):
        raise ShapeError("composite", alphas.shape, colors.shape)
    _check_finite("composite", alphas, colors)
    a = alphas.data
    one_m = 1.0 - a
    trans = np.cumprod(one_m, axis=1)
    T = np.concatenate([np.ones_like(a[:, :1]), trans[:, :-1]], axis=1)  # exclusive
    w = a * T  # (R,M)
    c_r = (w[:, :, None] * colors.data).sum(axis=1)  # (R,3)
    acc = w.sum(axis=1)  # (R,)

    # Two outputs: packed as a single (R,4) tensor [c_r | W].
    out = np.concatenate([c_r, acc[:, None]], axis=1)

    def bwd_packed(g):
        gc = g[:, :3]  # (R,3)
        gW = g[:, 3]  # (R,)
        # per-sample scalar gain: h_j = gc . c_j + gW
        h = (colors.data * gc[:, None, :]).sum(axis=2) + gW[:, None]  # (R,M)
        # dL/dc_j = w_j * gc
        gcolors = w[:, :, None] * gc[:, None, :]
        # dL/da_j = T_j h_j - (1/(1-a_j)) * sum_{m>j} h_m w_m
        hw = h * w
        suffix = np.flip(np.cumsum(np.flip(hw, axis=1), axis=1), axis=1) - hw  # sum_{m>j}
        denom = np.where(one_m > 1e-12, one_m, 1e-12)
        galpha = T * h - suffix / denom
        return galpha.astype(a.dtype), gcolors.astype(colors.dtype)

    return make_op("composite", out, (alphas, colors), bwd_packed)


def scatter_rows(values, indices, length):
    """Place rows of ``values`` at ``indices`` within a zero array of ``length`` rows."""
    values = as_tensor(values)
    out = np.zeros((length,) + values.shape[1:], dtype=values.dtype)
    out[indices] = values.data

    def bwd(g):
        return (g[indices].copy(),)

    return make_op("scatter_rows", out, (values,), bwd)
