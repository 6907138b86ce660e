"""WSMSE-preserving transfers between the downlink and its dual channel.

Covers symbol-weighted and user-weighted objectives with per-antenna plus
per-symbol / per-user caps (noise weights from a multiplicative fixed
point), the entrywise-cap variant, and the total-power specialization that
needs only one scalar.

The downlink-to-dual direction never increases the weighted MSE sum once the
noise weights exhaust the cap budget; the reverse direction preserves it
exactly by construction of the scaling factor, and lands inside the caps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .mse import DownlinkTransceiver, InterferenceTransceiver, real_part

__all__ = [
    "FixedPointInputs",
    "FixedPointSolution",
    "fixed_point_floor",
    "fixed_point_solve",
    "budget_identity_residual",
    "solve_noise_weights",
    "equality_noise_weights",
    "dl_to_if_symbolwise",
    "dl_to_if_userwise",
    "dl_to_if_entrywise",
    "if_to_dl_symbolwise",
    "if_to_dl_userwise",
    "if_to_dl_entrywise",
    "total_power_transfer_wsmse",
]


@dataclass(frozen=True)
class FixedPointInputs:
    """Static data of the noise-weight fixed point at frozen decoder norms."""

    energy: float                # scaled receiver-noise trace of the source state
    antenna_terms: np.ndarray    # squared decoder row norms, length N
    stream_terms: np.ndarray     # squared decoder column norms per symbol or user
    antenna_caps: np.ndarray
    stream_caps: np.ndarray

    def __post_init__(self):
        for name in ("antenna_terms", "stream_terms", "antenna_caps", "stream_caps"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not self.energy > 0:
            raise ValueError("energy must be strictly positive")
        if np.any(self.antenna_terms < 0) or np.any(self.stream_terms < 0):
            raise ValueError("decoder norm terms must be nonnegative")
        if np.any(self.antenna_caps <= 0) or np.any(self.stream_caps <= 0):
            raise ValueError("caps must be strictly positive")
        if self.antenna_terms.shape != self.antenna_caps.shape:
            raise ValueError("antenna terms and caps must match")
        if self.stream_terms.shape != self.stream_caps.shape:
            raise ValueError("stream terms and caps must match")


@dataclass(frozen=True)
class FixedPointSolution:
    antenna_noise: np.ndarray
    stream_noise: np.ndarray
    residual: float
    iterations: int

    @property
    def converged(self):
        return np.isfinite(self.residual)


def fixed_point_floor(energy, caps):
    """Lower clamp for the noise weights.

    Small enough that floored coordinates cannot disturb the cap-budget
    identity beyond a 1e-9 relative contribution, and never above the scale
    energy / max(caps) that an active coordinate would take.
    """
    caps = np.asarray(caps, dtype=float)
    return float(min(1e-6, energy / caps.max(), 1e-9 * energy / caps.sum()))


def fixed_point_solve(inputs, eps=None, tol=1e-10, max_iter=5000):
    """Noise weights from the multiplicative fixed point at frozen norms.

    Iterates the cap-normalized redistribution map from an all-equal start
    until the sup-norm step is within tol relative; iterates are clamped
    below at eps.  After the first sweep every iterate satisfies the budget
    identity sum(weights * caps) = energy up to floor dust, so the returned
    weights always make the reverse transfer respect the caps.
    """
    terms = np.concatenate((inputs.antenna_terms, inputs.stream_terms))
    caps = np.concatenate((inputs.antenna_caps, inputs.stream_caps))
    if eps is None:
        eps = fixed_point_floor(inputs.energy, caps)
    x0 = np.full(caps.size, inputs.energy / caps.sum())
    x, iters, resid = _kernels.fp_iterate(terms, caps, inputs.energy, x0,
                                          float(eps), float(tol), int(max_iter))
    n = inputs.antenna_terms.size
    return FixedPointSolution(x[:n], x[n:], float(resid), int(iters))


def budget_identity_residual(inputs, solution):
    """Relative deviation of the cap-budget identity at a solution."""
    spent = (solution.antenna_noise @ inputs.antenna_caps
             + solution.stream_noise @ inputs.stream_caps)
    return abs(spent - inputs.energy) / inputs.energy


def _flat_input_var(config_weights, granularity, stream_counts):
    w = np.asarray(config_weights, dtype=float)
    if granularity == "user":
        return np.repeat(w, stream_counts)
    return w


def _stream_noise_quadratics(w_blocks, noise):
    vals = []
    for k, wk in enumerate(w_blocks):
        rw = noise.blocks[k] @ wk
        for s in range(wk.shape[1]):
            vals.append(real_part(np.vdot(wk[:, s], rw[:, s]), "receiver noise quadratic"))
    return np.array(vals)


def _channel_times_decoder(ch, w_blocks):
    return np.hstack([ch.per_user[k] @ wk for k, wk in enumerate(w_blocks)])


def _weighted_noise_trace(w_blocks, noise, input_var):
    tau = float(input_var @ _stream_noise_quadratics(w_blocks, noise))
    if not tau > 0:
        raise ValueError("zero decoder: the noise trace does not define a transfer")
    return tau


def _newton_polish(map_fn, x, floor, tol, max_steps=25):
    """Drive a clamped fixed point to tolerance by damped Newton steps.

    map_fn performs one sweep of the underlying iteration; the Jacobian is
    taken by finite differences over the coordinates away from the floor
    clamp.  Falls back to the best iterate seen if a step cannot improve
    the sup-norm residual.
    """
    x = x.copy()
    fx = map_fn(x)
    extra_evals = 1
    best_x, best_r = x.copy(), float(np.max(np.abs(fx - x)))
    for _ in range(max_steps):
        g = fx - x
        r = float(np.max(np.abs(g)))
        if r < best_r:
            best_x, best_r = x.copy(), r
        if r <= tol * np.max(x):
            return x, r, extra_evals
        free = np.nonzero((x > floor * 1.000001) | (fx > floor * 1.000001))[0]
        if free.size == 0:
            break
        jac = np.empty((free.size, free.size))
        for col, j in enumerate(free):
            h = 1e-6 * x[j]
            x_pert = x.copy()
            x_pert[j] += h
            jac[:, col] = (map_fn(x_pert)[free] - fx[free]) / h
            extra_evals += 1
        a_mat = jac - np.eye(free.size)
        try:
            dx = np.linalg.solve(a_mat, -g[free])
        except np.linalg.LinAlgError:
            break
        alpha = 1.0
        improved = False
        for _ in range(30):
            x_try = x.copy()
            x_try[free] = np.maximum(floor, x[free] + alpha * dx)
            fx_try = map_fn(x_try)
            extra_evals += 1
            if float(np.max(np.abs(fx_try - x_try))) < r:
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        x, fx = x_try, fx_try
    r = float(np.max(np.abs(fx - x)))
    if r < best_r:
        return x, r, extra_evals
    return best_x, best_r, extra_evals


def solve_noise_weights(dl, ch, noise, weights, budget, granularity="symbol",
                        beta_bar=1.0, tol=1e-10, max_iter=5000):
    """Noise weights consistent with the dual MMSE decoder they induce.

    Runs the cap-budget fixed point jointly with the dual-channel decoder
    refresh: each sweep recomputes the MMSE decoders at the current weights
    and then redistributes the budget across the caps using those decoder
    norms.  At the joint limit the weights, the decoders, and the budget
    identity are mutually consistent, which is what makes the subsequent
    reverse transfer both exact on the caps and monotone in the objective.

    Returns (antenna_noise, stream_noise_or_entry_table, decoder, solution),
    where the decoder is the dual MMSE decoder at the returned weights.
    """
    streams = dl.streams
    zeta = _flat_input_var(weights, granularity, streams)
    tau = _weighted_noise_trace(dl.W, noise, zeta)
    energy = beta_bar ** 2 * tau
    hw = _channel_times_decoder(ch, dl.W)
    gram = beta_bar ** 2 * ((hw * zeta) @ hw.conj().T)
    rhs = beta_bar * zeta * hw
    n = hw.shape[0]
    if granularity == "entrywise":
        budget.require("entrywise")
        caps = np.asarray(budget.entrywise, dtype=float)
        eps = fixed_point_floor(energy, caps.ravel())
        x0 = np.full(caps.shape, energy / caps.sum())
        ew, t, iters, resid = _kernels.noise_weight_iterate_entrywise(
            gram, rhs, caps, energy, x0, eps, float(tol), int(max_iter))
        if resid > tol * np.max(ew):

            def one_sweep_entry(x_flat):
                out, _, _, _ = _kernels.noise_weight_iterate_entrywise(
                    gram, rhs, caps, energy, x_flat.reshape(caps.shape),
                    eps, 0.0, 1)
                return out.ravel()

            x_pol, resid, evals = _newton_polish(one_sweep_entry, ew.ravel(),
                                                 eps, tol)
            ew = x_pol.reshape(caps.shape)
            _, t, _, _ = _kernels.noise_weight_iterate_entrywise(
                gram, rhs, caps, energy, ew, eps, 0.0, 1)
            iters += evals + 1
        sol = FixedPointSolution(np.full(n, np.nan), ew.ravel().copy(), float(resid), int(iters))
        return None, ew, t, sol
    if granularity == "symbol":
        budget.require("per_antenna", "per_symbol")
        caps_g = np.asarray(budget.per_symbol, dtype=float)
        group = np.arange(sum(streams), dtype=np.int64)
    elif granularity == "user":
        budget.require("per_antenna", "per_user")
        caps_g = np.asarray(budget.per_user, dtype=float)
        group = np.repeat(np.arange(len(streams), dtype=np.int64),
                          np.asarray(streams, dtype=np.int64))
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    caps_a = np.asarray(budget.per_antenna, dtype=float)
    eps = fixed_point_floor(energy, np.concatenate((caps_a, caps_g)))
    x0 = energy / (caps_a.sum() + caps_g.sum())
    aw, gw, t, iters, resid = _kernels.noise_weight_iterate_grouped(
        gram, rhs, group, caps_g.size, caps_a, caps_g, energy,
        np.full(caps_a.size, x0), np.full(caps_g.size, x0),
        eps, float(tol), int(max_iter))
    if resid > tol * max(np.max(aw), np.max(gw)):

        def one_sweep(x_flat):
            out_a, out_g, _, _, _ = _kernels.noise_weight_iterate_grouped(
                gram, rhs, group, caps_g.size, caps_a, caps_g, energy,
                x_flat[:n].copy(), x_flat[n:].copy(), eps, 0.0, 1)
            return np.concatenate((out_a, out_g))

        x_pol, resid, evals = _newton_polish(
            one_sweep, np.concatenate((aw, gw)), eps, tol)
        aw, gw = x_pol[:n], x_pol[n:]
        _, _, t, _, _ = _kernels.noise_weight_iterate_grouped(
            gram, rhs, group, caps_g.size, caps_a, caps_g, energy,
            aw.copy(), gw.copy(), eps, 0.0, 1)
        iters += evals + 1
    sol = FixedPointSolution(aw.copy(), gw.copy(), float(resid), int(iters))
    return aw, gw, t, sol


def equality_noise_weights(dl, ch, noise, weights, granularity="symbol", beta_bar=1.0):
    """Noise weights that make the transfer an exact equality.

    Uniform weights scaled so the budget identity holds with the precoder's
    actual powers in place of the caps; any such scaling gives equality of
    the two weighted MSE sums, making the round trip the identity map.
    """
    streams = dl.streams
    zeta = _flat_input_var(weights, granularity, streams)
    energy = beta_bar ** 2 * _weighted_noise_trace(dl.W, noise, zeta)
    mag = np.abs(dl.B) ** 2
    p_antenna = mag.sum(axis=1)
    p_symbol = mag.sum(axis=0)
    if granularity == "user":
        offsets = np.concatenate(([0], np.cumsum(streams)))
        p_group = np.array([p_symbol[offsets[k]:offsets[k + 1]].sum() for k in range(len(streams))])
    elif granularity == "entrywise":
        p_group = mag.T.ravel()
    else:
        p_group = p_symbol
    if granularity == "entrywise":
        # the entrywise identity carries no antenna component
        return None, np.full(mag.T.shape, energy / p_group.sum())
    scale = energy / (p_antenna.sum() + p_group.sum())
    return np.full(p_antenna.size, scale), np.full(p_group.size, scale)


def _forward_transfer(dl, ch, noise, weights, budget, granularity, beta_bar,
                      antenna_noise, stream_noise, tol, max_iter):
    if (antenna_noise is None) != (stream_noise is None) and granularity != "entrywise":
        raise ValueError("supply both noise weight vectors or neither")
    if stream_noise is None:
        antenna_noise, stream_noise, _, _ = solve_noise_weights(
            dl, ch, noise, weights, budget, granularity, beta_bar, tol, max_iter)
    streams = dl.streams
    zeta = _flat_input_var(weights, granularity, streams)
    v_blocks = tuple(beta_bar * dl.W[k] for k in range(len(streams)))
    t_mat = dl.B / beta_bar
    if granularity == "entrywise":
        return InterferenceTransceiver(
            V=v_blocks, T=t_mat, antenna_noise=np.ones(t_mat.shape[0]),
            stream_noise=np.ones(t_mat.shape[1]),
            input_var=zeta, scale=beta_bar, noise_mode="entrywise",
            entry_noise=np.asarray(stream_noise, dtype=float))
    mode = "per_stream" if granularity == "symbol" else "per_user"
    return InterferenceTransceiver(
        V=v_blocks, T=t_mat, antenna_noise=antenna_noise, stream_noise=stream_noise,
        input_var=zeta, scale=beta_bar, noise_mode=mode)


def dl_to_if_symbolwise(dl, ch, noise, weights, budget, beta_bar=1.0,
                        antenna_noise=None, stream_noise=None,
                        tol=1e-10, max_iter=5000):
    """Downlink state to dual-channel state, symbol-weighted objective.

    Precoders become the scaled decoders and vice versa; the dual receiver
    noise is diag(antenna weights) + per-symbol weight * I, solved from the
    cap-budget fixed point when not supplied.  With fixed-point weights the
    dual weighted MSE sum never exceeds the downlink one.
    """
    return _forward_transfer(dl, ch, noise, weights, budget, "symbol", beta_bar,
                             antenna_noise, stream_noise, tol, max_iter)


def dl_to_if_userwise(dl, ch, noise, weights, budget, beta_bar=1.0,
                      antenna_noise=None, stream_noise=None,
                      tol=1e-10, max_iter=5000):
    """User-weighted twin of dl_to_if_symbolwise; per-user caps and weights."""
    return _forward_transfer(dl, ch, noise, weights, budget, "user", beta_bar,
                             antenna_noise, stream_noise, tol, max_iter)


def dl_to_if_entrywise(dl, ch, noise, weights, budget, beta_bar=1.0,
                       entry_noise=None, tol=1e-10, max_iter=5000):
    """Entrywise-cap variant: one noise weight per (stream, antenna) entry."""
    return _forward_transfer(dl, ch, noise, weights, budget, "entrywise", beta_bar,
                             None, entry_noise, tol, max_iter)


def _backward_transfer(ifc, ch, noise):
    """Scale factor and downlink state reversing a WSMSE-mode transfer."""
    t_mat = ifc.T
    numer = 0.0
    for k, vk in enumerate(ifc.V):
        rv = noise.blocks[k] @ vk
        for s in range(vk.shape[1]):
            l = ifc.column(k, s)
            numer += ifc.input_var[l] * real_part(np.vdot(vk[:, s], rv[:, s]),
                                                  "receiver noise quadratic")
    denom = 0.0
    for l in range(t_mat.shape[1]):
        denom += float(ifc.noise_diagonal(l) @ (np.abs(t_mat[:, l]) ** 2))
    if not denom > 0:
        raise ValueError("zero dual decoder: the reverse scaling is undefined")
    beta = float(np.sqrt(numer / denom))
    b_new = beta * t_mat
    w_new = tuple(vk / beta for vk in ifc.V)
    return DownlinkTransceiver(b_new, w_new), beta


def if_to_dl_symbolwise(ifc, ch, noise, weights, budget):
    """Dual-channel state back to the downlink, symbol-weighted objective.

    The scaling factor equates the two weighted MSE sums exactly; with
    fixed-point noise weights the resulting precoder meets the per-antenna
    and per-symbol caps.
    """
    del weights, budget  # determined by the stored dual state
    return _backward_transfer(ifc, ch, noise)


def if_to_dl_userwise(ifc, ch, noise, weights, budget):
    """User-weighted reverse transfer; per-user caps hold at the result."""
    del weights, budget
    return _backward_transfer(ifc, ch, noise)


def if_to_dl_entrywise(ifc, ch, noise, weights, budget):
    """Entrywise-cap reverse transfer."""
    del weights, budget
    return _backward_transfer(ifc, ch, noise)


def total_power_transfer_wsmse(state, ch, noise, weights, p_max, direction,
                               granularity="symbol"):
    """Single-scalar transfer for the total-BS-power constraint.

    No fixed point is involved: the forward scale spends the whole power
    budget on the noise trace, the dual receiver noise is the identity, and
    the round trip returns a precoder of total power exactly p_max.
    Returns the transformed state; the reverse direction returns (state,
    scale) like the cap-mode transfers.
    """
    if direction == "dl_to_if":
        dl = state
        zeta = _flat_input_var(weights, granularity, dl.streams)
        tau = _weighted_noise_trace(dl.W, noise, zeta)
        beta_bar = float(np.sqrt(p_max / tau))
        return InterferenceTransceiver(
            V=tuple(beta_bar * wk for wk in dl.W), T=dl.B / beta_bar,
            antenna_noise=np.ones(dl.B.shape[0]),
            stream_noise=np.zeros(dl.B.shape[1]),
            input_var=zeta, scale=beta_bar, noise_mode="identity")
    if direction == "if_to_dl":
        return _backward_transfer(state, ch, noise)
    raise ValueError(f"unknown direction {direction!r}")
