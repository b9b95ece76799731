"""Hot numeric kernels with a numba path and a pure-numpy path.

Every public function here dispatches on :func:`splitcomp._jit.use_numba`.
Both paths compute the same quantity; the summation order in ``col2im``
differs, so results agree to rounding, not bitwise. Within one backend all
kernels are deterministic.
"""

from __future__ import annotations

import numpy as np

from splitcomp._jit import njit, use_numba


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# --------------------------------------------------------------------------
# im2col / col2im
# --------------------------------------------------------------------------


def _pad(x, ph, pw, value=0.0):
    if not (ph or pw):
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * ph, w + 2 * pw), value, dtype=x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


@njit
def _im2col_nb(xp, kh, kw, sh, sw, ho, wo):
    n, c, hp, wp = xp.shape
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=xp.dtype)
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                dst = cols[(ci * kh + ky) * kw + kx]
                for b in range(n):
                    for oy in range(ho):
                        base = (b * ho + oy) * wo
                        src = xp[b, ci, oy * sh + ky]
                        if sw == 1:
                            for ox in range(wo):
                                dst[base + ox] = src[kx + ox]
                        else:
                            for ox in range(wo):
                                dst[base + ox] = src[ox * sw + kx]
    return cols


def _im2col_np(xp, kh, kw, sh, sw, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, ky, kx] = xt[:, :, ky : ky + sh * (ho - 1) + 1 : sh, kx : kx + sw * (wo - 1) + 1 : sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def im2col(x, kh, kw, stride=(1, 1), pad=(0, 0), pad_value=0.0):
    """Unfold ``x`` (N, C, H, W) into a patch matrix of shape (C*kh*kw, N*Ho*Wo).

    Row order is (c, ky, kx); column order is (n, oy, ox).
    """
    sh, sw = stride
    ph, pw = pad
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, sh, ph)
    wo = conv_out_size(w, kw, sw, pw)
    xp = np.ascontiguousarray(_pad(x, ph, pw, pad_value))
    if use_numba():
        return _im2col_nb(xp, kh, kw, sh, sw, ho, wo)
    return _im2col_np(xp, kh, kw, sh, sw, ho, wo)


@njit
def _col2im_nb(cols, n, c, hp, wp, kh, kw, sh, sw, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                src = cols[(ci * kh + ky) * kw + kx]
                for b in range(n):
                    for oy in range(ho):
                        base = (b * ho + oy) * wo
                        dst = out[b, ci, oy * sh + ky]
                        if sw == 1:
                            for ox in range(wo):
                                dst[kx + ox] += src[base + ox]
                        else:
                            for ox in range(wo):
                                dst[ox * sw + kx] += src[base + ox]
    return out


def _col2im_np(cols, n, c, hp, wp, kh, kw, sh, sw, ho, wo):
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(c, kh, kw, n, ho, wo)
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky : ky + sh * (ho - 1) + 1 : sh, kx : kx + sw * (wo - 1) + 1 : sw] += c6[:, ky, kx]
    return out.transpose(1, 0, 2, 3)


def col2im(cols, x_shape, kh, kw, stride=(1, 1), pad=(0, 0)):
    """Adjoint of :func:`im2col`: scatter-add patch columns back to (N, C, H, W)."""
    n, c, h, w = x_shape
    sh, sw = stride
    ph, pw = pad
    ho = conv_out_size(h, kh, sh, ph)
    wo = conv_out_size(w, kw, sw, pw)
    hp, wp = h + 2 * ph, w + 2 * pw
    cols = np.ascontiguousarray(cols)
    if use_numba():
        out = _col2im_nb(cols, n, c, hp, wp, kh, kw, sh, sw, ho, wo)
    else:
        out = _col2im_np(cols, n, c, hp, wp, kh, kw, sh, sw, ho, wo)
    return np.ascontiguousarray(out[:, :, ph : ph + h, pw : pw + w])


# --------------------------------------------------------------------------
# max pooling
# --------------------------------------------------------------------------


@njit
def _maxpool_fwd_nb(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = -np.inf
                    best_i = -1
                    for ky in range(kh):
                        iy = oy * sh - ph + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * sw - pw + kx
                            if ix < 0 or ix >= w:
                                continue
                            v = x[b, ci, iy, ix]
                            if best_i < 0 or v > best:
                                best = v
                                best_i = iy * w + ix
                    out[b, ci, oy, ox] = best
                    arg[b, ci, oy, ox] = best_i
    return out, arg


def _maxpool_fwd_np(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, sh, ph)
    wo = conv_out_size(w, kw, sw, pw)
    xp = _pad(x.reshape(n * c, 1, h, w), ph, pw, -np.inf)
    ip = _pad(np.arange(h * w, dtype=np.float64).reshape(1, 1, h, w), ph, pw, -1.0)
    cols = _im2col_np(xp, kh, kw, sh, sw, ho, wo)
    icol = _im2col_np(ip, kh, kw, sh, sw, ho, wo)
    # first maximal element in window order, matching the numba loop
    pos = np.argmax(cols, axis=0)
    out = cols[pos, np.arange(cols.shape[1])].reshape(n, c, ho, wo)
    arg = icol[pos, np.tile(np.arange(ho * wo), n * c)].astype(np.int64).reshape(n, c, ho, wo)
    return out, arg


def maxpool_forward(x, kernel, stride, pad):
    """Max pool over (N, C, H, W); returns (out, flat argmax index into H*W)."""
    x = np.ascontiguousarray(x)
    if use_numba():
        return _maxpool_fwd_nb(x, kernel, kernel, stride, stride, pad, pad)
    return _maxpool_fwd_np(x, kernel, kernel, stride, stride, pad, pad)


@njit
def _maxpool_bwd_nb(dy, arg, h, w):
    n, c, ho, wo = dy.shape
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    for b in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    dx[b, ci, arg[b, ci, oy, ox]] += dy[b, ci, oy, ox]
    return dx.reshape(n, c, h, w)


def maxpool_backward(dy, arg, x_shape):
    n, c, h, w = x_shape
    if use_numba():
        return _maxpool_bwd_nb(np.ascontiguousarray(dy), np.ascontiguousarray(arg), h, w)
    dx = np.zeros((n * c, h * w), dtype=dy.dtype)
    rows = np.repeat(np.arange(n * c), dy.shape[2] * dy.shape[3])
    np.add.at(dx, (rows, arg.reshape(-1)), dy.reshape(-1))
    return dx.reshape(n, c, h, w)


# --------------------------------------------------------------------------
# 8-bit symmetric quantization
# --------------------------------------------------------------------------


@njit
def _quantize_nb(flat, scale):
    out = np.empty(flat.shape[0], dtype=np.int8)
    for i in range(flat.shape[0]):
        v = flat[i] / scale
        if v >= 0.0:
            r = np.floor(v + 0.5)
        else:
            r = -np.floor(-v + 0.5)
        if r > 127.0:
            r = 127.0
        elif r < -127.0:
            r = -127.0
        out[i] = np.int8(r)
    return out


def quantize_int8(flat, scale: float) -> np.ndarray:
    """Round ``flat / scale`` half away from zero into int8, clipped to +-127.

    ``flat`` is promoted to float64 so both backends produce identical codes.
    """
    flat = np.ascontiguousarray(flat, dtype=np.float64).reshape(-1)
    scale = float(scale)
    if use_numba():
        return _quantize_nb(flat, scale)
    v = flat / scale
    r = np.copysign(np.floor(np.abs(v) + 0.5), v)
    return np.clip(r, -127.0, 127.0).astype(np.int8)


# --------------------------------------------------------------------------
# trace replay
# --------------------------------------------------------------------------


@njit
def _drain_nb(times, rates, t0s, bits):
    m = times.shape[0]
    out = np.empty(t0s.shape[0], dtype=np.float64)
    for q in range(t0s.shape[0]):
        t0 = t0s[q]
        remaining = bits[q]
        i = 0
        while i + 1 < m and times[i + 1] <= t0:
            i += 1
        t = t0
        done = False
        while i + 1 < m:
            cap = (times[i + 1] - t) * rates[i]
            if cap >= remaining:
                out[q] = (t - t0) + remaining / rates[i]
                done = True
                break
            remaining -= cap
            t = times[i + 1]
            i += 1
        if not done:
            out[q] = (t - t0) + remaining / rates[m - 1]
    return out


def _drain_np(times, rates, t0s, bits):
    out = np.empty(t0s.shape[0], dtype=np.float64)
    m = times.shape[0]
    for q in range(t0s.shape[0]):
        t0, remaining = t0s[q], bits[q]
        i = int(np.searchsorted(times, t0, side="right")) - 1
        starts = np.concatenate(([t0], times[i + 1 :]))
        ends = times[i + 1 :]
        caps = (ends - starts[:-1]) * rates[i : m - 1]
        cum = np.cumsum(caps)
        k = int(np.searchsorted(cum, remaining, side="left"))
        if k < cum.shape[0]:
            before = cum[k - 1] if k > 0 else 0.0
            out[q] = (starts[k] - t0) + (remaining - before) / rates[i + k]
        else:
            before = cum[-1] if cum.shape[0] else 0.0
            out[q] = (starts[-1] - t0) + (remaining - before) / rates[m - 1]
    return out


def trace_transfer_times(times, rates, t0s, bits) -> np.ndarray:
    """Seconds to push ``bits[q]`` bits starting at ``t0s[q]`` over a
    piecewise-constant rate trace. The last rate holds past the final sample.

    Callers validate that every ``t0`` lies inside ``[times[0], times[-1]]``.
    """
    times = np.ascontiguousarray(times, dtype=np.float64)
    rates = np.ascontiguousarray(rates, dtype=np.float64)
    # boundaries between equal rates change nothing but add rounding error
    keep = np.concatenate(([True], rates[1:] != rates[:-1]))
    times, rates = np.ascontiguousarray(times[keep]), np.ascontiguousarray(rates[keep])
    t0s = np.ascontiguousarray(np.atleast_1d(t0s), dtype=np.float64)
    bits = np.ascontiguousarray(np.broadcast_to(bits, t0s.shape), dtype=np.float64)
    if use_numba():
        return _drain_nb(times, rates, t0s, bits)
    return _drain_np(times, rates, t0s, bits)
