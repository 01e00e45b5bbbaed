"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The numba path compiles the scalar inner loops; the numpy path expresses the
same arithmetic with vectorized operations (convolutions go through im2col +
BLAS matmul). Select with the ENVID_BACKEND environment variable:

    ENVID_BACKEND=numba   force numba everywhere (falls back if unavailable)
    ENVID_BACKEND=numpy   force the pure-numpy path
    ENVID_BACKEND=auto    per-kernel default (see _AUTO), the shipped setting

The per-kernel defaults come from benchmarks/bench_kernels.py on a single
core: the image-source renderer and the pooling scatter are loop-bound and
numba wins by a wide margin, while 3x3 convolutions are BLAS-bound and
im2col+matmul wins. Both paths are deterministic run-to-run; conv results
are not bit-identical across backends because summation order differs.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*a, **k):
        def wrap(f):
            return f

        return wrap


_AUTO = {"ism": "numba", "conv": "numpy", "pool": "numba"}

SINC_HALF = 40  # 81-tap windowed sinc for fractional delays


def active_backend(kernel: str) -> str:
    """Backend actually used for `kernel` ('ism', 'conv' or 'pool')."""
    env = os.environ.get("ENVID_BACKEND", "auto").strip().lower()
    choice = env if env in ("numba", "numpy") else _AUTO[kernel]
    if choice == "numba" and not HAVE_NUMBA:
        choice = "numpy"
    return choice


# ---------------------------------------------------------------------------
# image-source rendering
# ---------------------------------------------------------------------------

@njit(cache=True)
def _axis_cap(L, c, beta, thr, max_delay):
    # Smallest order beyond which no image on this axis can pass the
    # amplitude or delay cut: order n has >= 2n-1 bounces and lies at
    # least 2nL - 2L away from the microphone.
    n = 1
    while n < 1_000_000:
        d_lb = 2.0 * n * L - 2.0 * L
        if d_lb > 0.0:
            if d_lb / c > max_delay:
                break
            if beta ** (2 * n - 1) / d_lb < thr:
                break
        n += 1
    return n


@njit(cache=True)
def _ism_render_numba(lx, ly, lz, sx, sy, sz, mx, my, mz,
                      beta, fs, c, n_out, rel_floor, max_delay):
    out = np.zeros(n_out)
    d0 = math.sqrt((sx - mx) ** 2 + (sy - my) ** 2 + (sz - mz) ** 2)
    thr = rel_floor / d0

    cnx = _axis_cap(lx, c, beta, thr, max_delay)
    cny = _axis_cap(ly, c, beta, thr, max_delay)
    cnz = _axis_cap(lz, c, beta, thr, max_delay)

    # per-axis image coordinate offsets (relative to mic) and bounce counts
    nax = 2 * (2 * cnx + 1)
    nay = 2 * (2 * cny + 1)
    naz = 2 * (2 * cnz + 1)
    ax_d = np.empty(nax)
    ax_b = np.empty(nax, np.int64)
    ay_d = np.empty(nay)
    ay_b = np.empty(nay, np.int64)
    az_d = np.empty(naz)
    az_b = np.empty(naz, np.int64)
    i = 0
    for n in range(-cnx, cnx + 1):
        for p in range(2):
            ax_d[i] = (1 - 2 * p) * sx + 2.0 * n * lx - mx
            ax_b[i] = abs(n - p) + abs(n)
            i += 1
    i = 0
    for n in range(-cny, cny + 1):
        for p in range(2):
            ay_d[i] = (1 - 2 * p) * sy + 2.0 * n * ly - my
            ay_b[i] = abs(n - p) + abs(n)
            i += 1
    i = 0
    for n in range(-cnz, cnz + 1):
        for p in range(2):
            az_d[i] = (1 - 2 * p) * sz + 2.0 * n * lz - mz
            az_b[i] = abs(n - p) + abs(n)
            i += 1

    bmax = int(ax_b.max() + ay_b.max() + az_b.max()) + 1
    bpow = np.empty(bmax)
    bpow[0] = 1.0
    for b in range(1, bmax):
        bpow[b] = bpow[b - 1] * beta

    half = SINC_HALF
    wdiv = math.pi / (half + 1)
    for ix in range(nax):
        dx = ax_d[ix]
        bx = ax_b[ix]
        for iy in range(nay):
            dy = ay_d[iy]
            rxy2 = dx * dx + dy * dy
            bxy = bx + ay_b[iy]
            # cheapest amplitude the z loop could still reach
            if rxy2 > d0 * d0 and bpow[bxy] / math.sqrt(rxy2) < thr:
                continue
            for iz in range(naz):
                dz = az_d[iz]
                d = math.sqrt(rxy2 + dz * dz)
                delay = d / c
                if delay > max_delay:
                    continue
                amp = bpow[bxy + az_b[iz]] / d
                if amp < thr:
                    continue
                tau = delay * fs
                k0 = int(round(tau))
                klo = k0 - half
                if klo < 0:
                    klo = 0
                khi = k0 + half
                if khi > n_out - 1:
                    khi = n_out - 1
                for k in range(klo, khi + 1):
                    u = k - tau
                    if u == 0.0:
                        s = 1.0
                    else:
                        pu = math.pi * u
                        s = math.sin(pu) / pu
                    out[k] += amp * s * 0.5 * (1.0 + math.cos(wdiv * u))
    return out


def _axis_terms(L, s, m, cn):
    n = np.arange(-cn, cn + 1)
    d = np.concatenate([(s + 2.0 * n * L - m), (-s + 2.0 * n * L - m)])
    b = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
    return d, b


def _ism_render_numpy(lx, ly, lz, sx, sy, sz, mx, my, mz,
                      beta, fs, c, n_out, rel_floor, max_delay):
    d0 = math.sqrt((sx - mx) ** 2 + (sy - my) ** 2 + (sz - mz) ** 2)
    thr = rel_floor / d0
    cnx = _axis_cap(lx, c, beta, thr, max_delay)
    cny = _axis_cap(ly, c, beta, thr, max_delay)
    cnz = _axis_cap(lz, c, beta, thr, max_delay)

    xd, xb = _axis_terms(lx, sx, mx, cnx)
    yd, yb = _axis_terms(ly, sy, my, cny)
    zd, zb = _axis_terms(lz, sz, mz, cnz)

    offs = np.arange(-SINC_HALF, SINC_HALF + 1)
    out = np.zeros(n_out)
    # outer loop over the x axis keeps the y*z grids at a bounded size
    yy_d, zz_d = np.meshgrid(yd, zd, indexing="ij")
    yy_b, zz_b = np.meshgrid(yb, zb, indexing="ij")
    ryz2 = (yy_d ** 2 + zz_d ** 2).ravel()
    byz = (yy_b + zz_b).ravel()
    for dx, bx in zip(xd, xb):
        d = np.sqrt(dx * dx + ryz2)
        amp = beta ** (bx + byz) / d
        delay = d / c
        keep = (amp >= thr) & (delay <= max_delay)
        if not keep.any():
            continue
        tau = delay[keep] * fs
        a = amp[keep]
        k0 = np.round(tau).astype(np.int64)
        idx = k0[:, None] + offs[None, :]
        u = idx - tau[:, None]
        vals = a[:, None] * np.sinc(u) * 0.5 * (1.0 + np.cos(np.pi * u / (SINC_HALF + 1)))
        ok = (idx >= 0) & (idx < n_out)
        out += np.bincount(idx[ok], weights=vals[ok], minlength=n_out)
    return out


def ism_render(room_dims, source, mic, beta, fs, c, n_out, rel_floor, max_delay):
    """Render a shoebox image-source impulse response.

    Every image contributes an 81-tap Hann-windowed sinc at its fractional
    delay with amplitude beta**bounces / distance. Images are dropped once
    that amplitude falls below `rel_floor` times the direct-path amplitude
    or the delay exceeds `max_delay` seconds.
    """
    f = _ism_render_numba if active_backend("ism") == "numba" else _ism_render_numpy
    lx, ly, lz = (float(v) for v in room_dims)
    sx, sy, sz = (float(v) for v in source)
    mx, my, mz = (float(v) for v in mic)
    return f(lx, ly, lz, sx, sy, sz, mx, my, mz,
             float(beta), float(fs), float(c), int(n_out),
             float(rel_floor), float(max_delay))


# ---------------------------------------------------------------------------
# 3x3 "same" convolution (stride 1, zero padding 1)
# ---------------------------------------------------------------------------

def _im2col(xp, H, W):
    # xp: one padded sample (C, H+2, W+2) -> (C*9, H*W)
    C = xp.shape[0]
    s0, s1, s2 = xp.strides
    v = np.lib.stride_tricks.as_strided(xp, (C, 3, 3, H, W), (s0, s1, s2, s1, s2))
    return np.ascontiguousarray(v).reshape(C * 9, H * W)


def _conv2d_fwd_numpy(x, w):
    N, C, H, W = x.shape
    CO = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wm = w.reshape(CO, -1)
    y = np.empty((N, CO, H, W), x.dtype)
    for n in range(N):
        y[n] = (wm @ _im2col(xp[n], H, W)).reshape(CO, H, W)
    return y


def _conv2d_bwd_numpy(x, w, dy):
    N, C, H, W = x.shape
    CO = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wm = w.reshape(CO, -1)
    dw = np.zeros_like(wm)
    dxp = np.zeros_like(xp)
    for n in range(N):
        cols = _im2col(xp[n], H, W)
        dyn = dy[n].reshape(CO, -1)
        dw += dyn @ cols.T
        dc = (wm.T @ dyn).reshape(C, 3, 3, H, W)
        for ki in range(3):
            for kj in range(3):
                dxp[n, :, ki:ki + H, kj:kj + W] += dc[:, ki, kj]
    return dxp[:, :, 1:H + 1, 1:W + 1], dw.reshape(w.shape)


@njit(cache=True)
def _conv2d_fwd_numba(x, w):
    N, C, H, W = x.shape
    CO = w.shape[0]
    y = np.zeros((N, CO, H, W), x.dtype)
    for n in range(N):
        for co in range(CO):
            for c in range(C):
                for ki in range(3):
                    ii = ki - 1
                    for kj in range(3):
                        jj = kj - 1
                        wv = w[co, c, ki, kj]
                        i0 = max(0, -ii)
                        i1 = min(H, H - ii)
                        j0 = max(0, -jj)
                        j1 = min(W, W - jj)
                        for i in range(i0, i1):
                            for j in range(j0, j1):
                                y[n, co, i, j] += wv * x[n, c, i + ii, j + jj]
    return y


@njit(cache=True)
def _conv2d_bwd_numba(x, w, dy):
    N, C, H, W = x.shape
    CO = w.shape[0]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for n in range(N):
        for co in range(CO):
            for c in range(C):
                for ki in range(3):
                    ii = ki - 1
                    for kj in range(3):
                        jj = kj - 1
                        wv = w[co, c, ki, kj]
                        acc = 0.0
                        i0 = max(0, -ii)
                        i1 = min(H, H - ii)
                        j0 = max(0, -jj)
                        j1 = min(W, W - jj)
                        for i in range(i0, i1):
                            for j in range(j0, j1):
                                g = dy[n, co, i, j]
                                acc += g * x[n, c, i + ii, j + jj]
                                dx[n, c, i + ii, j + jj] += g * wv
                        dw[co, c, ki, kj] += acc
    return dx, dw


def conv2d_forward(x, w):
    """3x3 stride-1 convolution with zero padding 1; x (N,C,H,W), w (CO,C,3,3)."""
    if active_backend("conv") == "numba":
        return _conv2d_fwd_numba(x, w)
    return _conv2d_fwd_numpy(x, w)


def conv2d_backward(x, w, dy):
    if active_backend("conv") == "numba":
        return _conv2d_bwd_numba(x, w, dy)
    return _conv2d_bwd_numpy(x, w, dy)


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2 (trailing odd row/column dropped)
# ---------------------------------------------------------------------------

def _pool_fwd_numpy(x):
    N, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    v = x[:, :, :Ho * 2, :Wo * 2].reshape(N, C, Ho, 2, Wo, 2)
    v = np.ascontiguousarray(v.transpose(0, 1, 2, 4, 3, 5)).reshape(N, C, Ho, Wo, 4)
    idx = v.argmax(4).astype(np.int8)
    y = np.take_along_axis(v, idx[..., None].astype(np.intp), 4)[..., 0]
    return y, idx


def _pool_bwd_numpy(idx, dy, H, W):
    N, C, Ho, Wo = dy.shape
    dv = np.zeros((N, C, Ho, Wo, 4), dy.dtype)
    np.put_along_axis(dv, idx[..., None].astype(np.intp), dy[..., None], 4)
    dx = np.zeros((N, C, H, W), dy.dtype)
    dx[:, :, :Ho * 2, :Wo * 2] = (
        dv.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * 2, Wo * 2)
    )
    return dx


@njit(cache=True)
def _pool_fwd_numba(x):
    N, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    y = np.empty((N, C, Ho, Wo), x.dtype)
    idx = np.empty((N, C, Ho, Wo), np.int8)
    for n in range(N):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = x[n, c, 2 * i, 2 * j]
                    bk = 0
                    k = 1
                    for di in range(2):
                        for dj in range(2):
                            if di == 0 and dj == 0:
                                continue
                            v = x[n, c, 2 * i + di, 2 * j + dj]
                            if v > best:
                                best = v
                                bk = k
                            k += 1
                    y[n, c, i, j] = best
                    idx[n, c, i, j] = bk
    return y, idx


@njit(cache=True)
def _pool_bwd_numba(idx, dy, H, W):
    N, C, Ho, Wo = dy.shape
    dx = np.zeros((N, C, H, W), dy.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    k = idx[n, c, i, j]
                    di = k // 2
                    dj = k % 2
                    dx[n, c, 2 * i + di, 2 * j + dj] = dy[n, c, i, j]
    return dx


def maxpool2_forward(x):
    """2x2/stride-2 max pool; returns (pooled, argmax indices). Ties pick the
    first element in row-major window order on both backends."""
    if active_backend("pool") == "numba":
        return _pool_fwd_numba(x)
    return _pool_fwd_numpy(x)


def maxpool2_backward(idx, dy, H, W):
    if active_backend("pool") == "numba":
        return _pool_bwd_numba(idx, dy, H, W)
    return _pool_bwd_numpy(idx, dy, H, W)
