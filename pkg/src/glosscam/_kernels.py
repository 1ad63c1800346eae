"""Numba kernels for cone rendering through the voxel radiance field.

Density and SH coefficients live on grid vertices spanning ``[bmin, bmax]``.
Every quadrature sample is a conical frustum. Its density is the mean of 7
equally weighted sigma-point taps of the cross-section Gaussian (centre and
+-sqrt(3.5) std along each world axis); the axial extent is covered by the
quadrature itself, so only the radial variance enters the taps. Radiance is
decoded from the SH coefficients averaged over the in-volume taps.

Gradients are accumulated into ``GRAD_CHUNKS`` private buffers (one per block
of cones) and summed in a fixed order, so results do not depend on thread
scheduling.
"""

import math

import numpy as np
from numba import njit, prange

GRAD_CHUNKS = 4
N_TAPS = 7
TAP_SCALE = math.sqrt(3.5)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)


@njit(cache=True)
def sh_eval(d, B, out):
    x, y, z = d[0], d[1], d[2]
    out[0] = SH_C0
    if B > 1:
        out[1] = -SH_C1 * y
        out[2] = SH_C1 * z
        out[3] = -SH_C1 * x
    if B > 4:
        out[4] = 1.0925484305920792 * x * y
        out[5] = -1.0925484305920792 * y * z
        out[6] = 0.31539156525252005 * (2.0 * z * z - x * x - y * y)
        out[7] = -1.0925484305920792 * x * z
        out[8] = 0.5462742152960396 * (x * x - y * y)


@njit(cache=True)
def softplus(x):
    if x > 20.0:
        return x
    return math.log1p(math.exp(x))


@njit(cache=True)
def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, inline="always")
def _axis_coord(x, lo, hi, N):
    return (x - lo) / (hi - lo) * (N - 1)


@njit(cache=True)
def tap_setup(px, py, pz, bmin, bmax, N, contract, idx, wts):
    """Trilinear corner indices and weights of point ``p``; False if outside the volume."""
    if contract:
        gx = (px - 0.5 * (bmin[0] + bmax[0])) / (0.5 * (bmax[0] - bmin[0]))
        gy = (py - 0.5 * (bmin[1] + bmax[1])) / (0.5 * (bmax[1] - bmin[1]))
        gz = (pz - 0.5 * (bmin[2] + bmax[2])) / (0.5 * (bmax[2] - bmin[2]))
        r = math.sqrt(gx * gx + gy * gy + gz * gz)
        if r > 1.0:
            sc = (2.0 - 1.0 / r) / r
            gx *= sc
            gy *= sc
            gz *= sc
        q = 0.25 * (N - 1)
        gx = (gx + 2.0) * q
        gy = (gy + 2.0) * q
        gz = (gz + 2.0) * q
    else:
        gx = _axis_coord(px, bmin[0], bmax[0], N)
        gy = _axis_coord(py, bmin[1], bmax[1], N)
        gz = _axis_coord(pz, bmin[2], bmax[2], N)
        top = N - 1.0
        if gx < 0.0 or gy < 0.0 or gz < 0.0 or gx > top or gy > top or gz > top:
            return False
    ix = min(max(int(math.floor(gx)), 0), N - 2)
    iy = min(max(int(math.floor(gy)), 0), N - 2)
    iz = min(max(int(math.floor(gz)), 0), N - 2)
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    base = (ix * N + iy) * N + iz
    c = 0
    for dx in range(2):
        wx = fx if dx else 1.0 - fx
        for dy in range(2):
            wy = fy if dy else 1.0 - fy
            for dz in range(2):
                wz = fz if dz else 1.0 - fz
                idx[c] = base + (dx * N + dy) * N + dz
                wts[c] = wx * wy * wz
                c += 1
    return True


@njit(cache=True)
def frustum_moments(s, half, rdot):
    """Mean distance and radial variance of a conical frustum centred at ``s``."""
    denom = 3.0 * s * s + half * half
    if denom <= 0.0:
        return s, 0.0
    mu_t = s + 2.0 * s * half * half / denom
    var_r = rdot * rdot * (s * s / 4.0 + 5.0 * half * half / 12.0 - 4.0 * half**4 / (15.0 * denom))
    if var_r < 0.0:
        var_r = 0.0
    return mu_t, var_r


@njit(cache=True)
def setup_taps(apex, axis, mu_t, var_r, bmin, bmax, N, contract, tap_idx, tap_w, tap_in):
    cx = apex[0] + mu_t * axis[0]
    cy = apex[1] + mu_t * axis[1]
    cz = apex[2] + mu_t * axis[2]
    sx = TAP_SCALE * math.sqrt(var_r * max(0.0, 1.0 - axis[0] * axis[0]))
    sy = TAP_SCALE * math.sqrt(var_r * max(0.0, 1.0 - axis[1] * axis[1]))
    sz = TAP_SCALE * math.sqrt(var_r * max(0.0, 1.0 - axis[2] * axis[2]))
    tap_in[0] = tap_setup(cx, cy, cz, bmin, bmax, N, contract, tap_idx[0], tap_w[0])
    tap_in[1] = tap_setup(cx + sx, cy, cz, bmin, bmax, N, contract, tap_idx[1], tap_w[1])
    tap_in[2] = tap_setup(cx - sx, cy, cz, bmin, bmax, N, contract, tap_idx[2], tap_w[2])
    tap_in[3] = tap_setup(cx, cy + sy, cz, bmin, bmax, N, contract, tap_idx[3], tap_w[3])
    tap_in[4] = tap_setup(cx, cy - sy, cz, bmin, bmax, N, contract, tap_idx[4], tap_w[4])
    tap_in[5] = tap_setup(cx, cy, cz + sz, bmin, bmax, N, contract, tap_idx[5], tap_w[5])
    tap_in[6] = tap_setup(cx, cy, cz - sz, bmin, bmax, N, contract, tap_idx[6], tap_w[6])


@njit(cache=True)
def _density_at(dens, tap_idx, tap_w, tap_in, raw_out):
    sigma = 0.0
    for tap in range(N_TAPS):
        if tap_in[tap]:
            raw = 0.0
            for c in range(8):
                raw += tap_w[tap, c] * dens[tap_idx[tap, c]]
            raw_out[tap] = raw
            sigma += softplus(raw)
    return sigma / N_TAPS


@njit(cache=True)
def _color_at(sh, B, basis, tap_idx, tap_w, tap_in, pre):
    """SH decode of coefficients averaged over the in-volume taps; returns that tap count."""
    for ch in range(3):
        pre[ch] = 0.0
    n_in = 0
    for tap in range(N_TAPS):
        if tap_in[tap]:
            n_in += 1
            for c in range(8):
                w = tap_w[tap, c]
                row = tap_idx[tap, c]
                for b in range(B):
                    yb = basis[b] * w
                    for ch in range(3):
                        pre[ch] += yb * sh[row, b * 3 + ch]
    if n_in > 0:
        for ch in range(3):
            pre[ch] /= n_in
    return n_in


@njit(cache=True)
def _render_one(m, dens, sh, B, bmin, bmax, N, contract, apex, axis, rdot, near, far, n, jitter,
                bg, w_eps, t_eps, opaque_far, rgb, depth, opacity, weights, store_weights):
    tap_idx = np.empty((N_TAPS, 8), np.int64)
    tap_w = np.empty((N_TAPS, 8))
    tap_in = np.empty(N_TAPS, np.bool_)
    raw = np.empty(N_TAPS)
    basis = np.empty(9)
    pre = np.empty(3)
    sh_eval(axis[m], B, basis)
    T = 1.0
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    dsum = 0.0
    wsum = 0.0
    span = far[m] - near[m]
    if span > 0.0:
        dt = span / n
        for k in range(n):
            u = 0.5 if jitter.shape[0] == 0 else jitter[m, k]
            s = near[m] + (k + u) * dt
            mu_t, var_r = frustum_moments(s, 0.5 * dt, rdot[m])
            setup_taps(apex[m], axis[m], mu_t, var_r, bmin, bmax, N, contract, tap_idx, tap_w, tap_in)
            sigma = _density_at(dens, tap_idx, tap_w, tap_in, raw)
            # an opaque far end closes the volume: the last interval absorbs what is left
            alpha = 1.0 if opaque_far and k == n - 1 else 1.0 - math.exp(-sigma * dt)
            w = T * alpha
            if store_weights:
                weights[m, k] = w
            if w > w_eps:
                _color_at(sh, B, basis, tap_idx, tap_w, tap_in, pre)
                c0 += w * max(pre[0], 0.0)
                c1 += w * max(pre[1], 0.0)
                c2 += w * max(pre[2], 0.0)
            dsum += w * s
            wsum += w
            T *= 1.0 - alpha
            if T < t_eps:
                break
    rgb[m, 0] = c0 + T * bg[0]
    rgb[m, 1] = c1 + T * bg[1]
    rgb[m, 2] = c2 + T * bg[2]
    depth[m] = dsum / max(wsum, 1e-10)
    opacity[m] = wsum


@njit(cache=True, parallel=True)
def render_cones(dens, sh, B, bmin, bmax, N, contract, apex, axis, rdot, near, far, n, jitter,
                 bg, w_eps, t_eps, opaque_far, store_weights):
    M = apex.shape[0]
    rgb = np.empty((M, 3))
    depth = np.empty(M)
    opacity = np.empty(M)
    weights = np.zeros((M if store_weights else 0, n))
    for m in prange(M):
        _render_one(m, dens, sh, B, bmin, bmax, N, contract, apex, axis, rdot, near, far, n, jitter,
                    bg, w_eps, t_eps, opaque_far, rgb, depth, opacity, weights, store_weights)
    return rgb, depth, opacity, weights


@njit(cache=True)
def _backward_one(m, dens, sh, B, bmin, bmax, N, contract, apex, axis, rdot, near, far, n, jitter,
                  bg, w_eps, t_eps, opaque_far, grad_rgb, gd, gs, buf_s, buf_sigma, buf_T, buf_w, buf_c, buf_on):
    span = far[m] - near[m]
    if not span > 0.0:
        return
    tap_idx = np.empty((N_TAPS, 8), np.int64)
    tap_w = np.empty((N_TAPS, 8))
    tap_in = np.empty(N_TAPS, np.bool_)
    raw = np.empty(N_TAPS)
    basis = np.empty(9)
    pre = np.empty(3)
    sh_eval(axis[m], B, basis)
    dt = span / n
    T = 1.0
    K = 0
    for k in range(n):
        u = 0.5 if jitter.shape[0] == 0 else jitter[m, k]
        s = near[m] + (k + u) * dt
        mu_t, var_r = frustum_moments(s, 0.5 * dt, rdot[m])
        setup_taps(apex[m], axis[m], mu_t, var_r, bmin, bmax, N, contract, tap_idx, tap_w, tap_in)
        sigma = _density_at(dens, tap_idx, tap_w, tap_in, raw)
        alpha = 1.0 if opaque_far and k == n - 1 else 1.0 - math.exp(-sigma * dt)
        w = T * alpha
        buf_s[k] = s
        buf_sigma[k] = sigma
        buf_T[k] = T
        buf_w[k] = w
        buf_on[k] = w > w_eps
        if buf_on[k]:
            _color_at(sh, B, basis, tap_idx, tap_w, tap_in, pre)
            for ch in range(3):
                buf_c[k, ch] = pre[ch]
        else:
            for ch in range(3):
                buf_c[k, ch] = 0.0
        T *= 1.0 - alpha
        K = k + 1
        if T < t_eps:
            break

    S0 = T * bg[0]
    S1 = T * bg[1]
    S2 = T * bg[2]
    g0 = grad_rgb[m, 0]
    g1 = grad_rgb[m, 1]
    g2 = grad_rgb[m, 2]
    for k in range(K - 1, -1, -1):
        c0 = max(buf_c[k, 0], 0.0)
        c1 = max(buf_c[k, 1], 0.0)
        c2 = max(buf_c[k, 2], 0.0)
        if opaque_far and k == n - 1:
            g_sigma = 0.0
        else:
            T_next = buf_T[k] * math.exp(-buf_sigma[k] * dt)
            g_sigma = dt * (g0 * (T_next * c0 - S0) + g1 * (T_next * c1 - S1) + g2 * (T_next * c2 - S2))
        w = buf_w[k]
        S0 += w * c0
        S1 += w * c1
        S2 += w * c2

        mu_t, var_r = frustum_moments(buf_s[k], 0.5 * dt, rdot[m])
        setup_taps(apex[m], axis[m], mu_t, var_r, bmin, bmax, N, contract, tap_idx, tap_w, tap_in)
        _density_at(dens, tap_idx, tap_w, tap_in, raw)
        for tap in range(N_TAPS):
            if tap_in[tap]:
                gr = g_sigma * sigmoid(raw[tap]) / N_TAPS
                for c in range(8):
                    gd[tap_idx[tap, c]] += gr * tap_w[tap, c]
        if buf_on[k]:
            n_in = 0
            for tap in range(N_TAPS):
                if tap_in[tap]:
                    n_in += 1
            gc0 = g0 * w if buf_c[k, 0] > 0.0 else 0.0
            gc1 = g1 * w if buf_c[k, 1] > 0.0 else 0.0
            gc2 = g2 * w if buf_c[k, 2] > 0.0 else 0.0
            if n_in > 0 and (gc0 != 0.0 or gc1 != 0.0 or gc2 != 0.0):
                for tap in range(N_TAPS):
                    if not tap_in[tap]:
                        continue
                    for c in range(8):
                        row = tap_idx[tap, c]
                        tw = tap_w[tap, c] / n_in
                        for b in range(B):
                            yb = basis[b] * tw
                            gs[row, b * 3 + 0] += gc0 * yb
                            gs[row, b * 3 + 1] += gc1 * yb
                            gs[row, b * 3 + 2] += gc2 * yb


@njit(cache=True, parallel=True)
def backward_cones(dens, sh, B, bmin, bmax, N, contract, apex, axis, rdot, near, far, n, jitter,
                   bg, w_eps, t_eps, opaque_far, grad_rgb):
    M = apex.shape[0]
    V = dens.shape[0]
    gd = np.zeros((GRAD_CHUNKS, V))
    gs = np.zeros((GRAD_CHUNKS, V, 3 * B))
    for chunk in prange(GRAD_CHUNKS):
        lo = chunk * M // GRAD_CHUNKS
        hi = (chunk + 1) * M // GRAD_CHUNKS
        buf_s = np.empty(n)
        buf_sigma = np.empty(n)
        buf_T = np.empty(n)
        buf_w = np.empty(n)
        buf_c = np.empty((n, 3))
        buf_on = np.empty(n, np.bool_)
        for m in range(lo, hi):
            _backward_one(m, dens, sh, B, bmin, bmax, N, contract, apex, axis, rdot, near, far, n, jitter,
                          bg, w_eps, t_eps, opaque_far, grad_rgb, gd[chunk], gs[chunk], buf_s, buf_sigma, buf_T, buf_w,
                          buf_c, buf_on)
    out_d = np.zeros(V)
    out_s = np.zeros((V, 3 * B))
    for chunk in range(GRAD_CHUNKS):
        out_d += gd[chunk]
        out_s += gs[chunk]
    return out_d, out_s


@njit(cache=True)
def sample_frustums(dens, sh, B, bmin, bmax, N, contract, mean_pos, axis, var_r):
    """Density and decoded radiance for frustums given by mean position + radial variance."""
    M = mean_pos.shape[0]
    sigma = np.zeros(M)
    rgb = np.zeros((M, 3))
    inside = np.zeros(M, np.bool_)
    tap_idx = np.empty((N_TAPS, 8), np.int64)
    tap_w = np.empty((N_TAPS, 8))
    tap_in = np.empty(N_TAPS, np.bool_)
    raw = np.empty(N_TAPS)
    basis = np.empty(9)
    pre = np.empty(3)
    for m in range(M):
        setup_taps(mean_pos[m], axis[m], 0.0, var_r[m], bmin, bmax, N, contract, tap_idx, tap_w, tap_in)
        inside[m] = tap_in[0]
        if not inside[m]:
            continue
        sigma[m] = _density_at(dens, tap_idx, tap_w, tap_in, raw)
        sh_eval(axis[m], B, basis)
        _color_at(sh, B, basis, tap_idx, tap_w, tap_in, pre)
        for ch in range(3):
            rgb[m, ch] = max(pre[ch], 0.0)
    return sigma, rgb, inside
