"""Compiled inner loops: PSF forward/adjoint projection and patch registration.

Conventions shared by every kernel:

* ``pos`` (P, 3) are scanner-frame world positions of pixels, grouped by
  patch through ``ptr`` (M + 1 offsets).
* ``poses`` (M, 3, 4) map scanner-frame points into reconstruction world.
* ``frames`` (M, 3, 3) hold each patch's slice axes (u, v, normal) as columns.
* ``psf`` (M, 6) rows are ``su, sv, sigma, ru, rv, rw`` (see :class:`pvr.psf.PSF`).
* ``aff`` / ``inv`` are the 3x4 index<->world matrices of the volume.
"""

import math

import numpy as np
from numba import njit, prange

MIN_VALID = 32
# rows keeping less than this share of their untruncated kernel mass inside the
# volume count as unobserved (edge rows dominated by negative lobes)
MIN_ROW_BALANCE = 0.5
_IDX_TOL = 1e-9


@njit(cache=True, inline="always")
def _sinc_lookup(x, table, step):
    x = abs(x) / step
    i = int(x)
    n = table.shape[0]
    if i >= n - 1:
        return table[n - 1]
    f = x - i
    return table[i] * (1.0 - f) + table[i + 1] * f


@njit(cache=True)
def _pixel_weights(shape, aff, inv, c, F, prm, table, tstep, idx_buf, w_buf):
    """PSF weights of voxels around world point ``c``; returns (count, weight sum).

    The sum is reported as 0 for rows truncated by the volume edge beyond
    ``MIN_ROW_BALANCE``.
    """
    su, sv, sig = prm[0], prm[1], prm[2]
    ru, rv, rw = prm[3], prm[4], prm[5]
    nx, ny, nz = shape[0], shape[1], shape[2]
    ci = np.empty(3)
    ext = np.empty(3)
    for a in range(3):
        ci[a] = inv[a, 0] * c[0] + inv[a, 1] * c[1] + inv[a, 2] * c[2] + inv[a, 3]
        e = 0.0
        for l in range(3):
            r = ru if l == 0 else (rv if l == 1 else rw)
            d = inv[a, 0] * F[0, l] + inv[a, 1] * F[1, l] + inv[a, 2] * F[2, l]
            e += abs(d) * r
        ext[a] = e
    lo0 = int(math.ceil(ci[0] - ext[0] - 1e-9))
    hi0 = int(math.floor(ci[0] + ext[0] + 1e-9))
    lo1 = int(math.ceil(ci[1] - ext[1] - 1e-9))
    hi1 = int(math.floor(ci[1] + ext[1] + 1e-9))
    lo2 = int(math.ceil(ci[2] - ext[2] - 1e-9))
    hi2 = int(math.floor(ci[2] + ext[2] + 1e-9))
    # local coordinates: L0 + i*La[0] + j*La[1] + k*La[2]
    L0 = np.empty(3)
    La = np.empty((3, 3))
    for l in range(3):
        L0[l] = F[0, l] * (aff[0, 3] - c[0]) + F[1, l] * (aff[1, 3] - c[1]) + F[2, l] * (aff[2, 3] - c[2])
        for a in range(3):
            La[a, l] = F[0, l] * aff[0, a] + F[1, l] * aff[1, a] + F[2, l] * aff[2, a]
    inv2s2 = 0.5 / (sig * sig)
    n = 0
    total = 0.0
    full = 0.0
    for i in range(lo0, hi0 + 1):
        for j in range(lo1, hi1 + 1):
            for k in range(lo2, hi2 + 1):
                u = L0[0] + i * La[0, 0] + j * La[1, 0] + k * La[2, 0]
                if abs(u) > ru:
                    continue
                v = L0[1] + i * La[0, 1] + j * La[1, 1] + k * La[2, 1]
                if abs(v) > rv:
                    continue
                w = L0[2] + i * La[0, 2] + j * La[1, 2] + k * La[2, 2]
                if abs(w) > rw:
                    continue
                wt = (_sinc_lookup(u / su, table, tstep) * _sinc_lookup(v / sv, table, tstep)
                      * math.exp(-w * w * inv2s2))
                if wt == 0.0:
                    continue
                full += wt
                if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
                    continue
                idx_buf[n] = (i * ny + j) * nz + k
                w_buf[n] = wt
                total += wt
                n += 1
    if total < MIN_ROW_BALANCE * full:
        return n, 0.0
    return n, total


@njit(cache=True)
def _buffer_size(inv, F, prm):
    size = 1
    for a in range(3):
        e = 0.0
        for l in range(3):
            d = inv[a, 0] * F[0, l] + inv[a, 1] * F[1, l] + inv[a, 2] * F[2, l]
            e += abs(d) * prm[3 + l]
        size *= int(2 * e + 3)
    return size


@njit(cache=True)
def _world_frame(pose, frame):
    F = np.empty((3, 3))
    for a in range(3):
        for l in range(3):
            F[a, l] = pose[a, 0] * frame[0, l] + pose[a, 1] * frame[1, l] + pose[a, 2] * frame[2, l]
    return F


@njit(cache=True)
def _map_point(pose, p, c):
    for a in range(3):
        c[a] = pose[a, 0] * p[0] + pose[a, 1] * p[1] + pose[a, 2] * p[2] + pose[a, 3]


@njit(parallel=True, cache=True)
def simulate(data, aff, inv, pos, ptr, poses, frames, psf, table, tstep, use, out, wsum):
    """out[j] = sum_k W_jk X_k with rows normalised; NaN where the row is empty or sums <= 0."""
    shape = data.shape
    flat = data.ravel()
    M = ptr.shape[0] - 1
    for m in prange(M):
        F = _world_frame(poses[m], frames[m])
        size = _buffer_size(inv, F, psf[m])
        idx = np.empty(size, np.int64)
        w = np.empty(size)
        c = np.empty(3)
        for j in range(ptr[m], ptr[m + 1]):
            if not use[j]:
                out[j] = np.nan
                wsum[j] = 0.0
                continue
            _map_point(poses[m], pos[j], c)
            n, tot = _pixel_weights(shape, aff, inv, c, F, psf[m], table, tstep, idx, w)
            wsum[j] = tot
            if n == 0 or tot <= 0.0:
                out[j] = np.nan
                continue
            acc = 0.0
            for l in range(n):
                acc += w[l] * flat[idx[l]]
            out[j] = acc / tot


@njit(parallel=True, cache=True)
def scatter(shape, aff, inv, pos, ptr, poses, frames, psf, table, tstep, q, scale, chunk_ptr, acc, conf,
            absolute):
    """Adjoint of :func:`simulate`: acc[c] += W^T (scale * q), conf[c] += W^T scale.

    With ``absolute`` the confidence accumulates |W|^T scale instead.

    Patches are split into fixed chunks (``chunk_ptr`` over patch indices),
    each accumulating into its own partial volume row; callers sum the rows
    in chunk order, which makes the result independent of thread count.
    """
    C = chunk_ptr.shape[0] - 1
    for ch in prange(C):
        for m in range(chunk_ptr[ch], chunk_ptr[ch + 1]):
            F = _world_frame(poses[m], frames[m])
            size = _buffer_size(inv, F, psf[m])
            idx = np.empty(size, np.int64)
            w = np.empty(size)
            c = np.empty(3)
            for j in range(ptr[m], ptr[m + 1]):
                s = scale[j]
                if s == 0.0:
                    continue
                _map_point(poses[m], pos[j], c)
                n, tot = _pixel_weights(shape, aff, inv, c, F, psf[m], table, tstep, idx, w)
                if n == 0 or tot <= 0.0:
                    continue
                sq = s * q[j] / tot
                sc = s / tot
                for l in range(n):
                    acc[ch, idx[l]] += w[l] * sq
                    if absolute:
                        conf[ch, idx[l]] += abs(w[l]) * sc
                    else:
                        conf[ch, idx[l]] += w[l] * sc


@njit(cache=True, inline="always")
def _trilinear(vol, x, y, z):
    nx, ny, nz = vol.shape
    if x < -_IDX_TOL or y < -_IDX_TOL or z < -_IDX_TOL:
        return np.nan
    if x > nx - 1 + _IDX_TOL or y > ny - 1 + _IDX_TOL or z > nz - 1 + _IDX_TOL:
        return np.nan
    x = min(max(x, 0.0), nx - 1.0)
    y = min(max(y, 0.0), ny - 1.0)
    z = min(max(z, 0.0), nz - 1.0)
    i = min(int(x), max(nx - 2, 0))
    j = min(int(y), max(ny - 2, 0))
    k = min(int(z), max(nz - 2, 0))
    fx, fy, fz = x - i, y - j, z - k
    i1, j1, k1 = min(i + 1, nx - 1), min(j + 1, ny - 1), min(k + 1, nz - 1)
    c00 = vol[i, j, k] * (1 - fx) + vol[i1, j, k] * fx
    c10 = vol[i, j1, k] * (1 - fx) + vol[i1, j1, k] * fx
    c01 = vol[i, j, k1] * (1 - fx) + vol[i1, j, k1] * fx
    c11 = vol[i, j1, k1] * (1 - fx) + vol[i1, j1, k1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@njit(cache=True)
def _delta_matrix(x, g, F, out):
    """Pose increment about centroid ``g`` in the slice frame ``F``: rotation (deg) then translation (mm)."""
    rx, ry, rz = math.radians(x[0]), math.radians(x[1]), math.radians(x[2])
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rl = np.empty((3, 3))
    Rl[0, 0] = cz * cy
    Rl[0, 1] = cz * sy * sx - sz * cx
    Rl[0, 2] = cz * sy * cx + sz * sx
    Rl[1, 0] = sz * cy
    Rl[1, 1] = sz * sy * sx + cz * cx
    Rl[1, 2] = sz * sy * cx - cz * sx
    Rl[2, 0] = -sy
    Rl[2, 1] = cy * sx
    Rl[2, 2] = cy * cx
    # D = F Rl F^T, offset g - D g + F t
    T = F @ Rl @ F.T
    t = np.empty(3)
    for a in range(3):
        t[a] = g[a] - (T[a, 0] * g[0] + T[a, 1] * g[1] + T[a, 2] * g[2])
        t[a] += F[a, 0] * x[3] + F[a, 1] * x[4] + F[a, 2] * x[5]
    for a in range(3):
        for b in range(3):
            out[a, b] = T[a, b]
        out[a, 3] = t[a]


@njit(cache=True)
def _compose(A, B, out):
    """3x4 affine product A o B."""
    for a in range(3):
        for b in range(4):
            s = A[a, 0] * B[0, b] + A[a, 1] * B[1, b] + A[a, 2] * B[2, b]
            if b == 3:
                s += A[a, 3]
            out[a, b] = s


@njit(cache=True)
def _cc_at(vol, inv, pose, x, g, F, pts, vals, D, PD, IM):
    _delta_matrix(x, g, F, D)
    _compose(pose, D, PD)
    _compose(inv, PD, IM)
    n = 0
    sy = 0.0
    ss = 0.0
    syy = 0.0
    sss = 0.0
    sys = 0.0
    for j in range(pts.shape[0]):
        p0, p1, p2 = pts[j, 0], pts[j, 1], pts[j, 2]
        xi = IM[0, 0] * p0 + IM[0, 1] * p1 + IM[0, 2] * p2 + IM[0, 3]
        yi = IM[1, 0] * p0 + IM[1, 1] * p1 + IM[1, 2] * p2 + IM[1, 3]
        zi = IM[2, 0] * p0 + IM[2, 1] * p1 + IM[2, 2] * p2 + IM[2, 3]
        s = _trilinear(vol, xi, yi, zi)
        if np.isnan(s):
            continue
        yv = vals[j]
        n += 1
        sy += yv
        ss += s
        syy += yv * yv
        sss += s * s
        sys += yv * s
    if n < MIN_VALID:
        return -np.inf, n
    vy = n * syy - sy * sy
    vs = n * sss - ss * ss
    if vy <= 1e-12 * max(n * syy, 1e-300) or vs <= 1e-12 * max(n * sss, 1e-300):
        return -np.inf, n
    return (n * sys - sy * ss) / math.sqrt(vy * vs), n


@njit(parallel=True, cache=True)
def register(levels, inv, pos, vals, ptr, poses, frames, centroids,
             rot_steps, trans_steps, max_iter, min_frac, eps,
             out_poses, out_cc, out_flag, trace):
    """Gradient ascent of CC per patch with step halving, coarse to fine over blurred ``levels``.

    Each iteration probes every parameter at +-step, moves along the normalised
    finite-difference gradient (in step units) and keeps the best candidate
    among the probes and that move; without improvement the steps halve.

    ``out_flag``: 0 registered, 1 too few valid pixels, 2 zero-variance patch or
    undefined similarity at the start. ``trace[m]`` records the accepted CC
    values (first ``trace.shape[1]`` of them), NaN-padded.
    """
    M = ptr.shape[0] - 1
    L = levels.shape[0]
    for m in prange(M):
        pts = pos[ptr[m]:ptr[m + 1]]
        v = vals[ptr[m]:ptr[m + 1]]
        pose = poses[m]
        F = frames[m]
        g = centroids[m]
        D = np.empty((3, 4))
        PD = np.empty((3, 4))
        IM = np.empty((3, 4))
        x = np.zeros(6)
        for a in range(trace.shape[1]):
            trace[m, a] = np.nan
        out_poses[m] = pose
        out_cc[m] = np.nan
        if pts.shape[0] < MIN_VALID:
            out_flag[m] = 1
            continue
        mean = 0.0
        for j in range(v.shape[0]):
            mean += v[j]
        mean /= v.shape[0]
        var = 0.0
        for j in range(v.shape[0]):
            var += (v[j] - mean) ** 2
        if var <= 1e-12 * max(mean * mean, 1e-300) * v.shape[0]:
            out_flag[m] = 2
            continue
        f, n = _cc_at(levels[0], inv, pose, x, g, F, pts, v, D, PD, IM)
        if n < MIN_VALID:
            out_flag[m] = 1
            continue
        if not np.isfinite(f):
            out_flag[m] = 2
            continue
        ntr = 0
        xt = np.empty(6)
        xb = np.empty(6)
        grad = np.empty(6)
        sc = np.empty(6)
        for lev in range(L):
            vol = levels[lev]
            f, n = _cc_at(vol, inv, pose, x, g, F, pts, v, D, PD, IM)
            rs = rot_steps[lev]
            ts = trans_steps[lev]
            rs_min = rs * min_frac
            ts_min = ts * min_frac
            accepted = 0
            while accepted < max_iter:
                for d in range(6):
                    sc[d] = rs if d < 3 else ts
                # central differences per axis, in units of the current step
                fb = f
                gn = 0.0
                for d in range(6):
                    x[d] += sc[d]
                    fp, _ = _cc_at(vol, inv, pose, x, g, F, pts, v, D, PD, IM)
                    if fp > fb:
                        fb = fp
                        xb[:] = x
                    x[d] -= 2.0 * sc[d]
                    fm, _ = _cc_at(vol, inv, pose, x, g, F, pts, v, D, PD, IM)
                    if fm > fb:
                        fb = fm
                        xb[:] = x
                    x[d] += sc[d]
                    if np.isfinite(fp) and np.isfinite(fm):
                        grad[d] = 0.5 * (fp - fm)
                    else:
                        grad[d] = 0.0
                    gn += grad[d] * grad[d]
                if gn > 0.0:
                    gn = math.sqrt(gn)
                    for d in range(6):
                        xt[d] = x[d] + sc[d] * grad[d] / gn
                    ft, _ = _cc_at(vol, inv, pose, xt, g, F, pts, v, D, PD, IM)
                    if ft > fb:
                        fb = ft
                        xb[:] = xt
                if fb > f + eps:
                    f = fb
                    x[:] = xb
                    accepted += 1
                    if ntr < trace.shape[1]:
                        trace[m, ntr] = f
                        ntr += 1
                else:
                    rs *= 0.5
                    ts *= 0.5
                    if ts < ts_min and rs < rs_min:
                        break
        # coarse levels may trade fine-level similarity away; never end below the start
        x0 = np.zeros(6)
        f0, n0 = _cc_at(levels[L - 1], inv, pose, x0, g, F, pts, v, D, PD, IM)
        if f0 > f:
            f = f0
            for d in range(6):
                x[d] = 0.0
        _delta_matrix(x, g, F, D)
        _compose(pose, D, PD)
        out_poses[m] = PD
        out_cc[m] = f
        out_flag[m] = 0


@njit(parallel=True, cache=True)
def sample_points(vol, inv, pts, out):
    for j in prange(pts.shape[0]):
        p0, p1, p2 = pts[j, 0], pts[j, 1], pts[j, 2]
        out[j] = _trilinear(vol,
                            inv[0, 0] * p0 + inv[0, 1] * p1 + inv[0, 2] * p2 + inv[0, 3],
                            inv[1, 0] * p0 + inv[1, 1] * p1 + inv[1, 2] * p2 + inv[1, 3],
                            inv[2, 0] * p0 + inv[2, 1] * p1 + inv[2, 2] * p2 + inv[2, 3])
