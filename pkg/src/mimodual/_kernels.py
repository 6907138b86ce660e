"""Hot iteration kernels with an optional numba backend.

Every kernel is written once, in a numba-compatible numpy subset, and wrapped
with @njit when acceleration is on.  Setting MIMODUAL_NO_NUMBA=1 (or not
having numba installed) selects the identical pure-numpy code path, so both
backends run the same source and must agree bitwise up to BLAS reduction
order.  scripts/bench_kernels.py times one against the other.

Array arguments are plain float64 / complex128 ndarrays; no dataclasses cross
this boundary.
"""

from __future__ import annotations

import os

import numpy as np

NUMBA_DISABLED = os.environ.get("MIMODUAL_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

HAS_NUMBA = False
if not NUMBA_DISABLED:
    try:
        import numba

        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False


def jit_decorator(func):
    """no-python jit when the accelerated backend is active, identity otherwise."""
    if HAS_NUMBA:
        return numba.njit(cache=True, fastmath=False)(func)
    return func


def backend_name():
    return "numba" if HAS_NUMBA else "numpy"


@jit_decorator
def fp_iterate(terms, caps, energy, x0, floor, tol, max_iter):
    """Scaled multiplicative fixed-point update with frozen decoder norms.

    Iterates x_i <- max(floor, (energy / caps_i) * x_i * terms_i / sum_j x_j terms_j)
    until the sup-norm step is below tol * max|x|.  Returns (x, iterations,
    residual) where residual is the last step size measured against the
    clamped map, so a floored coordinate contributes zero once it sits at
    the floor.
    """
    n = x0.shape[0]
    x = x0.copy()
    resid = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        denom = 0.0
        for i in range(n):
            denom += x[i] * terms[i]
        if denom <= 0.0:
            return x, it, np.inf
        resid = 0.0
        xmax = 0.0
        for i in range(n):
            xi = energy / caps[i] * x[i] * terms[i] / denom
            if xi < floor:
                xi = floor
            d = abs(xi - x[i])
            if d > resid:
                resid = d
            x[i] = xi
            if xi > xmax:
                xmax = xi
        if resid <= tol * xmax:
            break
    return x, it, resid


@jit_decorator
def noise_weight_iterate_grouped(gram, rhs, group, n_groups, caps_a, caps_g,
                                 energy, x0_a, x0_g, floor, tol, max_iter):
    """Joint noise-weight / interference-decoder iteration, grouped caps.

    gram is the fixed precoder-side interference covariance (N x N, includes
    the transfer scale and input variances); rhs column l is the matching
    right-hand side for stream l's decoder solve.  Each sweep recomputes the
    decoders at the current weights, then applies one multiplicative update
    that redistributes the interference-noise energy budget across the
    antenna caps (caps_a) and the per-group caps (caps_g).

    Returns (antenna weights, group weights, decoder matrix, iterations,
    residual).
    """
    n = gram.shape[0]
    n_streams = rhs.shape[1]
    aw = x0_a.copy()
    gw = x0_g.copy()
    t = np.zeros((n, n_streams), dtype=np.complex128)
    a_mat = np.zeros((n, n), dtype=np.complex128)
    resid = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        for l in range(n_streams):
            for i in range(n):
                for j in range(n):
                    a_mat[i, j] = gram[i, j]
                a_mat[i, i] = a_mat[i, i] + aw[i] + gw[group[l]]
            t[:, l] = np.linalg.solve(a_mat, rhs[:, l])
        # squared decoder row norms per antenna, squared column norms per group
        at = np.zeros(n)
        gt = np.zeros(n_groups)
        for l in range(n_streams):
            g = group[l]
            for i in range(n):
                m = t[i, l].real * t[i, l].real + t[i, l].imag * t[i, l].imag
                at[i] += m
                gt[g] += m
        denom = 0.0
        for i in range(n):
            denom += aw[i] * at[i]
        for g in range(n_groups):
            denom += gw[g] * gt[g]
        if denom <= 0.0:
            return aw, gw, t, it, np.inf
        resid = 0.0
        xmax = 0.0
        for i in range(n):
            xi = energy / caps_a[i] * aw[i] * at[i] / denom
            if xi < floor:
                xi = floor
            d = abs(xi - aw[i])
            if d > resid:
                resid = d
            aw[i] = xi
            if xi > xmax:
                xmax = xi
        for g in range(n_groups):
            xg = energy / caps_g[g] * gw[g] * gt[g] / denom
            if xg < floor:
                xg = floor
            d = abs(xg - gw[g])
            if d > resid:
                resid = d
            gw[g] = xg
            if xg > xmax:
                xmax = xg
        if resid <= tol * xmax:
            break
    return aw, gw, t, it, resid


@jit_decorator
def noise_weight_iterate_entrywise(gram, rhs, caps_e, energy, x0_e, floor, tol, max_iter):
    """Entrywise-cap variant: one noise weight per (stream, antenna) entry.

    caps_e and the weight state are (S x N); stream l's decoder sees the
    diagonal noise ew[l, :].
    """
    n = gram.shape[0]
    n_streams = rhs.shape[1]
    ew = x0_e.copy()
    t = np.zeros((n, n_streams), dtype=np.complex128)
    a_mat = np.zeros((n, n), dtype=np.complex128)
    resid = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        for l in range(n_streams):
            for i in range(n):
                for j in range(n):
                    a_mat[i, j] = gram[i, j]
                a_mat[i, i] = a_mat[i, i] + ew[l, i]
            t[:, l] = np.linalg.solve(a_mat, rhs[:, l])
        denom = 0.0
        for l in range(n_streams):
            for i in range(n):
                m = t[i, l].real * t[i, l].real + t[i, l].imag * t[i, l].imag
                denom += ew[l, i] * m
        if denom <= 0.0:
            return ew, t, it, np.inf
        resid = 0.0
        xmax = 0.0
        for l in range(n_streams):
            for i in range(n):
                m = t[i, l].real * t[i, l].real + t[i, l].imag * t[i, l].imag
                xe = energy / caps_e[l, i] * ew[l, i] * m / denom
                if xe < floor:
                    xe = floor
                d = abs(xe - ew[l, i])
                if d > resid:
                    resid = d
                ew[l, i] = xe
                if xe > xmax:
                    xmax = xe
        if resid <= tol * xmax:
            break
    return ew, t, it, resid


@jit_decorator
def switched_iterate(hw, theta, group, n_groups, m1, c1mp, caps, x0, tol, max_iter):
    """Switched-system iteration for the min-max noise-weight solve.

    hw column l is the channel-precoder product for downlink stream l, theta
    its receiver noise quadratic form.  m1 maps stacked normalized weights to
    the squared downlink scales; c1mp is the precomputed downlink-side factor
    of the per-iterate update matrix, used only for its one-norm certificate.
    State x lives on the cap scale (caps * weights).

    Returns (x, iterations, residual, jnorms, xs, resids, flag): jnorms[i],
    xs[i], resids[i] record the update-matrix one-norm, the state, and the
    step size at iterate i (rows beyond the last iterate are zero); flag is
    1 if a decoder column had to be floored.
    """
    n = hw.shape[0]
    n_streams = hw.shape[1]
    dim = caps.shape[0]
    x = x0.copy()
    # the update is degree-1 homogeneous, so only the ray matters: keep the
    # state max-normalized and measure convergence on the normalized pair
    x0max = 0.0
    for i in range(dim):
        if x[i] > x0max:
            x0max = x[i]
    for i in range(dim):
        x[i] /= x0max
    jnorms = np.zeros(max_iter)
    xs = np.zeros((max_iter, dim))
    resids = np.zeros(max_iter)
    t = np.zeros((n, n_streams), dtype=np.complex128)
    a_mat = np.zeros((n, n), dtype=np.complex128)
    flag = 0
    resid = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        aw = x[:n] / caps[:n]
        gw = x[n:] / caps[n:]
        bb2 = m1 @ np.concatenate((aw, gw))
        # interference-side covariance of the scaled precoders
        gamma = np.zeros((n, n), dtype=np.complex128)
        for l in range(n_streams):
            s = bb2[group[l]]
            for i in range(n):
                for j in range(n):
                    gamma[i, j] += s * hw[i, l] * np.conj(hw[j, l])
        for l in range(n_streams):
            for i in range(n):
                for j in range(n):
                    a_mat[i, j] = gamma[i, j]
                a_mat[i, i] = a_mat[i, i] + aw[i] + gw[group[l]]
            t[:, l] = np.linalg.solve(a_mat, hw[:, l]) * np.sqrt(bb2[group[l]])
            tnorm = 0.0
            for i in range(n):
                tnorm += t[i, l].real * t[i, l].real + t[i, l].imag * t[i, l].imag
            if tnorm < 1e-24:
                t[0, l] = 1e-12
                flag = 1
        # crossmag[a, b] = |t_a^H hw_b|^2 * bb2[group[b]]
        cross = np.abs(t.conj().T @ hw) ** 2
        for b in range(n_streams):
            cross[:, b] *= bb2[group[b]]
        coup = np.zeros((n_groups, n_groups))
        for a in range(n_streams):
            for b in range(n_streams):
                ga = group[a]
                gb = group[b]
                if ga != gb:
                    coup[ga, ga] += cross[a, b]
                    coup[gb, ga] -= cross[a, b]
        rhs_g = np.zeros(n_groups)
        tn_g = np.zeros(n_groups)
        for l in range(n_streams):
            g = group[l]
            rhs_g[g] += bb2[g] * theta[l]
            quad = 0.0
            tn = 0.0
            for i in range(n):
                m = t[i, l].real * t[i, l].real + t[i, l].imag * t[i, l].imag
                quad += aw[i] * m
                tn += m
            coup[g, g] += quad + gw[g] * tn
            tn_g[g] += tn
        aug = np.zeros((n_groups, 1 + dim))
        aug[:, 0] = rhs_g
        aug[:, 1:] = c1mp
        sol = np.linalg.solve(coup, aug)
        b2 = sol[:, 0]
        # cap-scale update and the update-matrix one-norm certificate
        rowpow = np.zeros((n, n_groups))
        for l in range(n_streams):
            g = group[l]
            for i in range(n):
                rowpow[i, g] += t[i, l].real * t[i, l].real + t[i, l].imag * t[i, l].imag
        x_new = np.zeros(dim)
        for i in range(n):
            acc = 0.0
            for g in range(n_groups):
                acc += rowpow[i, g] * b2[g]
            x_new[i] = aw[i] * acc
        for g in range(n_groups):
            x_new[n + g] = gw[g] * tn_g[g] * b2[g]
        jn = 0.0
        for c in range(dim):
            col = 0.0
            for i in range(n):
                acc = 0.0
                for g in range(n_groups):
                    acc += rowpow[i, g] * sol[g, 1 + c]
                col += abs(aw[i] * acc)
            for g in range(n_groups):
                col += abs(gw[g] * tn_g[g] * sol[g, 1 + c])
            if col > jn:
                jn = col
        jnorms[it - 1] = jn
        xmax = 0.0
        for i in range(dim):
            if x_new[i] > xmax:
                xmax = x_new[i]
        if not (xmax > 0.0 and np.isfinite(xmax)):
            flag = 2
            resids[it - 1] = np.inf
            break
        resid = 0.0
        for i in range(dim):
            x_new[i] /= xmax
            d = abs(x_new[i] - x[i])
            if d > resid:
                resid = d
            x[i] = x_new[i]
            xs[it - 1, i] = x_new[i]
        resids[it - 1] = resid
        if resid <= tol:
            break
    return x, it, resid, jnorms, xs, resids, flag


@jit_decorator
def posy_batch_eval(coefs, expo, starts, y):
    """Values, gradients, Hessians of a block of posynomials at log-point y.

    coefs stacks every monomial coefficient; expo the matching exponent rows;
    starts[i]:starts[i+1] delimits posynomial i.  Returns (vals, grads,
    hessians) with shapes (P,), (P, n), (P, n, n).
    """
    n_posy = starts.shape[0] - 1
    n = y.shape[0]
    vals = np.zeros(n_posy)
    grads = np.zeros((n_posy, n))
    hess = np.zeros((n_posy, n, n))
    w_all = coefs * np.exp(expo @ y)
    for p in range(n_posy):
        for m in range(starts[p], starts[p + 1]):
            w = w_all[m]
            vals[p] += w
            for i in range(n):
                ei = expo[m, i]
                grads[p, i] += w * ei
                for j in range(n):
                    hess[p, i, j] += w * ei * expo[m, j]
    return vals, grads, hess
