"""Exact per-stream / per-user MSE-preserving transfers via linear systems.

Unlike the weighted-sum transfers, the balancing-mode transfers preserve
every individual MSE.  Both directions reduce to small linear systems whose
matrices carry a special sign structure: nonpositive off-diagonals with unit
column sums after diagonal normalization.  That structure (checked by
theorem2_check) makes the solutions elementwise positive and gives the
noise-weight switched iteration its one-norm non-expansion certificate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .mse import DownlinkTransceiver, InterferenceTransceiver, NumericalError, real_part

__all__ = [
    "CertificateError",
    "SwitchedIterate",
    "solve_beta_bar_symbolwise",
    "solve_beta_bar_userwise",
    "solve_beta_symbolwise",
    "solve_beta_userwise",
    "transfer_dl_to_if_minmax",
    "transfer_if_to_dl_minmax",
    "switched_iteration_symbolwise",
    "switched_iteration_userwise",
    "theorem2_check",
    "total_power_transfer_minmax",
]


class CertificateError(RuntimeError):
    """The switched-iteration one-norm certificate failed; construction bug."""


@dataclass(frozen=True)
class SwitchedIterate:
    """One step of the noise-weight switched iteration."""

    x: np.ndarray       # cap-scaled weight state, antennas first
    j_norm: float       # one-norm of the update matrix at this state
    residual: float     # sup-norm step from the previous state


def _groups(streams, granularity):
    streams = np.asarray(streams, dtype=np.int64)
    if granularity == "symbol":
        return np.arange(streams.sum(), dtype=np.int64), int(streams.sum())
    if granularity == "user":
        return np.repeat(np.arange(streams.size, dtype=np.int64), streams), int(streams.size)
    raise ValueError(f"unknown granularity {granularity!r}")


def _stream_quadratics(blocks, noise):
    """Per-stream receiver noise quadratic forms w_l^H R w_l (or v_l^H R v_l)."""
    vals = []
    for k, blk in enumerate(blocks):
        rb = noise.blocks[k] @ blk
        for s in range(blk.shape[1]):
            vals.append(real_part(np.vdot(blk[:, s], rb[:, s]), "noise quadratic form"))
    return np.array(vals)


def _grouped_coupling(cross, group, n_groups):
    """Grouped coupling matrix from the per-stream squared cross gains.

    cross[a, b] is the squared magnitude of decoder/precoder pair (a, b);
    same-group pairs cancel out of the system.  Column sums are zero by
    construction.
    """
    coup = np.zeros((n_groups, n_groups))
    n_streams = cross.shape[0]
    for a in range(n_streams):
        ga = group[a]
        for b in range(n_streams):
            gb = group[b]
            if ga != gb:
                coup[ga, ga] += cross[a, b]
                coup[gb, ga] -= cross[a, b]
    return coup


def _group_sums(values, group, n_groups):
    out = np.zeros(n_groups)
    np.add.at(out, group, values)
    return out


def _downlink_system(dl, ch, noise, granularity):
    """Coupling matrix, grouped noise quadratics, and power data of a downlink state."""
    group, n_groups = _groups(dl.streams, granularity)
    hw = np.hstack([ch.per_user[k] @ wk for k, wk in enumerate(dl.W)])
    # cross[m, l] = |b_m^H H_l w_l|^2: interference of precoder column m at decoder l
    cross = np.abs(dl.B.conj().T @ hw) ** 2
    theta = _stream_quadratics(dl.W, noise)
    # row r of the stream-level system: coefficient of scale_c is -cross[r, c];
    # its diagonal collects +cross[c, r], so swap axes for the pair loop
    coup = _grouped_coupling(cross.T, group, n_groups)
    theta_g = _group_sums(theta, group, n_groups)
    return coup + np.diag(theta_g), theta, theta_g, group, n_groups


def _downlink_rhs(dl, antenna_noise, stream_noise, group, n_groups):
    """Grouped noise prices of the precoder: psi-weighted row power plus mu-weighted column power."""
    mag = np.abs(dl.B) ** 2
    per_stream = antenna_noise @ mag
    rhs = _group_sums(per_stream, group, n_groups)
    rhs += stream_noise * _group_sums(mag.sum(axis=0), group, n_groups)
    return rhs


def solve_beta_bar_symbolwise(dl, ch, noise, antenna_noise, stream_noise):
    """Squared per-symbol transfer scales making every dual MSE match.

    Solves the stream-coupled linear system; Theorem-2 structure guarantees
    a strictly positive solution for positive noise weights.
    """
    return _solve_beta_bar(dl, ch, noise, antenna_noise, stream_noise, "symbol")


def solve_beta_bar_userwise(dl, ch, noise, antenna_noise, user_noise):
    """Squared per-user transfer scales (one shared scale per user)."""
    return _solve_beta_bar(dl, ch, noise, antenna_noise, user_noise, "user")


def _solve_beta_bar(dl, ch, noise, antenna_noise, stream_noise, granularity):
    antenna_noise = np.asarray(antenna_noise, dtype=float)
    stream_noise = np.asarray(stream_noise, dtype=float)
    if np.any(antenna_noise <= 0) or np.any(stream_noise <= 0):
        raise ValueError("noise weights must be strictly positive")
    a_mat, _, _, group, n_groups = _downlink_system(dl, ch, noise, granularity)
    rhs = _downlink_rhs(dl, antenna_noise, stream_noise, group, n_groups)
    scales = np.linalg.solve(a_mat, rhs)
    if np.any(scales <= 0):
        raise ValueError("transfer scales came out nonpositive; system structure broken")
    return scales


def _interference_system(ifc, ch, noise, antenna_noise, stream_noise, granularity,
                         identity_noise=False):
    group, n_groups = _groups(ifc.streams, granularity)
    hv = np.hstack([ch.per_user[k] @ vk for k, vk in enumerate(ifc.V)])
    # cross[a, b] = |t_a^H H_b v_b|^2
    cross = np.abs(ifc.T.conj().T @ hv) ** 2
    coup = _grouped_coupling(cross, group, n_groups)
    tmag = np.abs(ifc.T) ** 2
    if identity_noise:
        quad = tmag.sum(axis=0)
    else:
        quad = antenna_noise @ tmag + stream_noise[group] * tmag.sum(axis=0)
    coup += np.diag(_group_sums(quad, group, n_groups))
    rhs = _group_sums(_stream_quadratics(ifc.V, noise), group, n_groups)
    return coup, rhs, group, n_groups


def solve_beta_symbolwise(ifc, ch, noise, antenna_noise, stream_noise,
                          dl=None, method="direct"):
    """Squared per-symbol scales for the dual-to-downlink direction.

    method="direct" solves the coupled system against the dual precoder
    noise quadratics; method="factored" chains the two diagonal-normalized
    inverses against the downlink power prices (requires dl) and must agree
    with the direct path to rounding.
    """
    return _solve_beta(ifc, ch, noise, antenna_noise, stream_noise, "symbol", dl, method)


def solve_beta_userwise(ifc, ch, noise, antenna_noise, user_noise,
                        dl=None, method="direct"):
    """Per-user twin of solve_beta_symbolwise."""
    return _solve_beta(ifc, ch, noise, antenna_noise, user_noise, "user", dl, method)


def _solve_beta(ifc, ch, noise, antenna_noise, stream_noise, granularity, dl, method):
    antenna_noise = np.asarray(antenna_noise, dtype=float)
    stream_noise = np.asarray(stream_noise, dtype=float)
    colnorms = np.abs(ifc.T).sum(axis=0)
    if np.any(colnorms == 0):
        raise ValueError("dual decoder has a zero column; transfer undefined")
    coup, rhs, group, n_groups = _interference_system(
        ifc, ch, noise, antenna_noise, stream_noise, granularity)
    if method == "direct":
        scales = np.linalg.solve(coup, rhs)
    elif method == "factored":
        if dl is None:
            raise ValueError("factored method needs the matching downlink state")
        a_dl, _, theta_g, group_dl, n_dl = _downlink_system(dl, ch, noise, granularity)
        rhs_dl = _downlink_rhs(dl, antenna_noise, stream_noise, group_dl, n_dl)
        omega = np.diag(coup).copy()
        coup_off = coup - np.diag(omega)
        inv_one = np.linalg.inv(np.eye(n_groups) + coup_off / omega)
        inv_two = np.linalg.inv(np.eye(n_dl) + (a_dl - np.diag(theta_g)) / theta_g)
        scales = (inv_one @ (inv_two @ rhs_dl)) / omega
    else:
        raise ValueError(f"unknown method {method!r}")
    if np.any(scales <= 0):
        raise ValueError("transfer scales came out nonpositive; system structure broken")
    return scales


def transfer_dl_to_if_minmax(dl, ch, noise, antenna_noise, stream_noise,
                             granularity="symbol"):
    """Downlink to dual channel preserving each stream (or user) MSE exactly.

    Every stream of a group shares one scale: its precoder column is the
    scaled downlink decoder column and vice versa.
    """
    scales = _solve_beta_bar(dl, ch, noise, antenna_noise, stream_noise, granularity)
    group, _ = _groups(dl.streams, granularity)
    per_stream = np.sqrt(scales[group])
    offsets = np.concatenate(([0], np.cumsum(dl.streams)))
    v_blocks = tuple(
        dl.W[k] * per_stream[offsets[k]:offsets[k + 1]] for k in range(len(dl.W))
    )
    t_mat = dl.B / per_stream
    mode = "per_stream" if granularity == "symbol" else "per_user"
    return InterferenceTransceiver(
        V=v_blocks, T=t_mat, antenna_noise=np.asarray(antenna_noise, dtype=float),
        stream_noise=np.asarray(stream_noise, dtype=float),
        input_var=np.ones(t_mat.shape[1]), scale=per_stream, noise_mode=mode)


def transfer_if_to_dl_minmax(ifc, ch, noise, granularity="symbol", method="direct",
                             dl=None):
    """Dual channel back to the downlink, preserving each MSE exactly.

    Returns (downlink state, per-stream scale vector).  Uses the noise
    weights stored in the dual state.
    """
    if ifc.noise_mode == "identity":
        scales = _solve_beta_identity(ifc, ch, noise, granularity)
    else:
        scales = _solve_beta(ifc, ch, noise, ifc.antenna_noise, ifc.stream_noise,
                             granularity, dl, method)
    group, _ = _groups(ifc.streams, granularity)
    per_stream = np.sqrt(scales[group])
    offsets = np.concatenate(([0], np.cumsum(ifc.streams)))
    b_new = ifc.T * per_stream
    w_blocks = tuple(
        ifc.V[k] / per_stream[offsets[k]:offsets[k + 1]] for k in range(len(ifc.V))
    )
    return DownlinkTransceiver(b_new, w_blocks), per_stream


def _solve_beta_identity(ifc, ch, noise, granularity):
    coup, rhs, _, _ = _interference_system(
        ifc, ch, noise, None, None, granularity, identity_noise=True)
    scales = np.linalg.solve(coup, rhs)
    if np.any(scales <= 0):
        raise ValueError("transfer scales came out nonpositive; system structure broken")
    return scales


def _switched_iteration(dl, ch, noise, budget, granularity, x0, tol, max_iter):
    group, n_groups = _groups(dl.streams, granularity)
    if granularity == "symbol":
        budget.require("per_antenna", "per_symbol")
        caps_g = np.asarray(budget.per_symbol, dtype=float)
    else:
        budget.require("per_antenna", "per_user")
        caps_g = np.asarray(budget.per_user, dtype=float)
    caps_a = np.asarray(budget.per_antenna, dtype=float)
    caps = np.concatenate((caps_a, caps_g))
    n = dl.B.shape[0]
    mag = np.abs(dl.B) ** 2
    p_antenna = mag.sum(axis=1)
    p_group = _group_sums(mag.sum(axis=0), group, n_groups)
    slack_tol = 1e-9 + 1e-9 * caps
    if np.any(p_antenna > caps_a + slack_tol[:n]) or np.any(p_group > caps_g + slack_tol[n:]):
        raise ValueError("precoder violates the caps; the one-norm certificate needs feasibility")
    a_mat, theta, theta_g, _, _ = _downlink_system(dl, ch, noise, granularity)
    # price matrix columns: per-antenna then per-group powers of each precoder group
    price = np.zeros((n_groups, n + n_groups))
    for l in range(mag.shape[1]):
        price[group[l], :n] += mag[:, l]
    price[np.arange(n_groups), n + np.arange(n_groups)] = p_group
    m1 = np.linalg.solve(a_mat, price)
    c1mp = theta_g[:, None] * m1 / caps[None, :]
    hw = np.hstack([ch.per_user[k] @ wk for k, wk in enumerate(dl.W)])
    if x0 is None:
        x0 = caps.copy()
    else:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != caps.shape or np.any(x0 <= 0):
            raise ValueError("starting state must be strictly positive with one entry per cap")
    x, iters, resid, jnorms, xs, resids, flag = _kernels.switched_iterate(
        hw.astype(complex), theta, group, n_groups, m1, c1mp, caps, x0,
        float(tol), int(max_iter))
    trace = [SwitchedIterate(xs[i].copy(), float(jnorms[i]), float(resids[i]))
             for i in range(iters)]
    worst = max((it.j_norm for it in trace), default=0.0)
    if worst > 1.0 + 1e-8:
        raise CertificateError(
            f"update-matrix one-norm reached {worst:.12f} > 1; coupling construction is wrong")
    if flag == 2:
        raise NumericalError("switched iteration state collapsed to zero")
    if flag:
        import warnings

        warnings.warn("a dual decoder column collapsed and was floored at norm 1e-12",
                      RuntimeWarning, stacklevel=3)
    antenna_noise = x[:n] / caps_a
    stream_noise = x[n:] / caps_g
    return antenna_noise, stream_noise, trace


def switched_iteration_symbolwise(dl, ch, noise, budget, x0=None, tol=1e-10,
                                  max_iter=5000):
    """Noise weights for the per-symbol balancing transfer.

    Repeats: solve the forward scales, refresh the dual MMSE decoders,
    solve the reverse scales, and re-price the caps — a linear switched
    system whose update matrix always has one-norm at most one.  At the
    returned weights the reverse transfer meets every cap.

    Returns (antenna weights, per-symbol weights, iterate trace).
    """
    return _switched_iteration(dl, ch, noise, budget, "symbol", x0, tol, max_iter)


def switched_iteration_userwise(dl, ch, noise, budget, x0=None, tol=1e-10,
                                max_iter=5000):
    """Per-user twin of switched_iteration_symbolwise."""
    return _switched_iteration(dl, ch, noise, budget, "user", x0, tol, max_iter)


def theorem2_check(a_mat):
    """Inverse nonnegativity and one-norm report for a unit-column-sum matrix.

    For a real square matrix with nonpositive off-diagonals whose columns
    each sum to one, the inverse is entrywise nonnegative with one-norm
    exactly one.  Returns (min inverse entry, inverse one-norm, max column
    sum deviation); the first two are the checked properties, the third
    measures how well the input honors the structure.
    """
    a_mat = np.asarray(a_mat, dtype=float)
    if a_mat.ndim != 2 or a_mat.shape[0] != a_mat.shape[1]:
        raise ValueError("need a square matrix")
    off = a_mat - np.diag(np.diag(a_mat))
    if np.max(off) > 1e-12:
        raise ValueError("off-diagonal entries must be nonpositive")
    col_resid = float(np.max(np.abs(a_mat.sum(axis=0) - 1.0)))
    if col_resid > 1e-6:
        raise ValueError("column sums must equal one")
    inv = np.linalg.inv(a_mat)
    return float(inv.min()), float(np.max(np.abs(inv).sum(axis=0))), col_resid


def total_power_transfer_minmax(state, ch, noise, p_max, direction,
                                granularity="symbol"):
    """Balancing-mode transfer under a single total-power cap.

    The dual receiver noise is the identity, so no noise weights and no
    switched iteration are involved; both directions are single linear
    solves and the round trip reproduces the precoder's total power, which
    equals p_max whenever the budget is saturated.
    """
    if direction == "dl_to_if":
        dl = state
        group, n_groups = _groups(dl.streams, granularity)
        a_mat, _, _, _, _ = _downlink_system(dl, ch, noise, granularity)
        mag = np.abs(dl.B) ** 2
        rhs = _group_sums(mag.sum(axis=0), group, n_groups)
        scales = np.linalg.solve(a_mat, rhs)
        if np.any(scales <= 0):
            raise ValueError("transfer scales came out nonpositive; system structure broken")
        per_stream = np.sqrt(scales[group])
        offsets = np.concatenate(([0], np.cumsum(dl.streams)))
        v_blocks = tuple(
            dl.W[k] * per_stream[offsets[k]:offsets[k + 1]] for k in range(len(dl.W))
        )
        return InterferenceTransceiver(
            V=v_blocks, T=dl.B / per_stream,
            antenna_noise=np.ones(dl.B.shape[0]),
            stream_noise=np.zeros(dl.B.shape[1]),
            input_var=np.ones(dl.B.shape[1]), scale=per_stream, noise_mode="identity")
    if direction == "if_to_dl":
        return transfer_if_to_dl_minmax(state, ch, noise, granularity)
    raise ValueError(f"unknown direction {direction!r}")
