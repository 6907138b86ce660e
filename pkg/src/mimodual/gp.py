"""Power allocation as a geometric program over the stream powers.

The downlink transceiver is split into unit directions, gains, and powers;
each stream MSE is then a posynomial in the power vector, every cap is a
posynomial constraint, and the allocation step is a GP solved globally in
the log domain by a self-contained barrier method.  A brute-force grid
oracle bounds the solver's gap on small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .mse import DownlinkTransceiver, NumericalError, real_part

__all__ = [
    "POWER_FLOOR",
    "Monomial",
    "Posynomial",
    "GpProblem",
    "GpResult",
    "PowerDecomposition",
    "MseCoefficients",
    "decompose",
    "recompose",
    "build_mse_coefficients",
    "eval_symbol_mse",
    "build_gp",
    "solve_gp",
    "grid_oracle",
    "posy_value",
]

POWER_FLOOR = 1e-6  # mW; zero stream powers are lifted here to keep log p finite


@dataclass(frozen=True)
class Monomial:
    """coefficient * prod_i x_i^exponents[i]; coefficient >= 0."""

    coefficient: float
    exponents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "exponents", np.asarray(self.exponents, dtype=float))
        if not np.isfinite(self.coefficient) or self.coefficient < 0:
            raise ValueError("monomial coefficient must be finite and nonnegative")


@dataclass(frozen=True)
class Posynomial:
    """Sum of monomials over a shared variable set; zero coefficients dropped."""

    monomials: tuple

    def __post_init__(self):
        kept = tuple(m for m in self.monomials if m.coefficient > 0)
        if not kept:
            raise ValueError("posynomial needs at least one positive monomial")
        object.__setattr__(self, "monomials", kept)

    @property
    def n_vars(self):
        return self.monomials[0].exponents.size

    def arrays(self):
        coefs = np.array([m.coefficient for m in self.monomials])
        expos = np.vstack([m.exponents for m in self.monomials])
        return coefs, expos


def posy_value(posy, x):
    """Evaluate a posynomial at a positive point in the power domain."""
    coefs, expos = posy.arrays()
    return float(coefs @ np.exp(expos @ np.log(np.asarray(x, dtype=float))))


@dataclass(frozen=True)
class GpProblem:
    """min objective s.t. every constraint posynomial <= 1.

    Variables are the S stream powers, plus one trailing epigraph variable
    for balancing problems.  warm_start is a full-length feasible point.
    """

    objective: Posynomial
    constraints: tuple
    n_vars: int
    has_epigraph: bool
    warm_start: np.ndarray
    problem_id: str
    floor: float = POWER_FLOOR

    def __post_init__(self):
        ws = np.asarray(self.warm_start, dtype=float)
        if ws.shape != (self.n_vars,) or np.any(ws <= 0):
            raise ValueError("warm start must be strictly positive, one entry per variable")
        object.__setattr__(self, "warm_start", ws)
        worst = max(posy_value(c, ws) for c in self.constraints)
        if worst > 1.0 + 1e-9:
            raise ValueError(f"infeasible warm start: constraint value {worst:.12f} > 1")

    @property
    def n_powers(self):
        return self.n_vars - (1 if self.has_epigraph else 0)


@dataclass(frozen=True)
class GpResult:
    p: np.ndarray            # optimal powers (epigraph variable excluded)
    objective: float
    status: str              # optimal | warm_start | max_iter
    kkt_residual: float
    iterations: int


@dataclass(frozen=True)
class PowerDecomposition:
    """B = G sqrt(P), W = U alpha / sqrt(P) with unit-column G and U."""

    p: np.ndarray            # stream powers, length S
    directions: np.ndarray   # N x S, unit columns
    rx_directions: tuple     # per-user M_k x S_k, unit columns
    gains: np.ndarray        # alpha, length S, >= 0
    floored: np.ndarray      # bool length S: power or direction was degenerate

    @property
    def streams(self):
        return tuple(u.shape[1] for u in self.rx_directions)

    @property
    def stream_users(self):
        return np.repeat(np.arange(len(self.rx_directions)), self.streams)


def decompose(dl):
    """Split a downlink transceiver into powers, directions, and gains.

    Zero precoder columns get the power floor and a canonical direction;
    zero decoder columns get zero gain and a canonical receive direction.
    Both cases are flagged.
    """
    n, n_streams = dl.B.shape
    p = np.empty(n_streams)
    g_mat = np.empty((n, n_streams), dtype=complex)
    gains = np.empty(n_streams)
    floored = np.zeros(n_streams, dtype=bool)
    u_blocks = []
    for k, wk in enumerate(dl.W):
        uk = np.empty_like(wk)
        for s in range(wk.shape[1]):
            l = dl.column(k, s)
            b_col = dl.B[:, l]
            bn = float(np.linalg.norm(b_col))
            if bn ** 2 < POWER_FLOOR:
                p[l] = POWER_FLOOR
                floored[l] = True
                g_mat[:, l] = 0.0
                g_mat[0, l] = 1.0 if bn == 0 else 0.0
                if bn > 0:
                    g_mat[:, l] = b_col / bn
            else:
                p[l] = bn ** 2
                g_mat[:, l] = b_col / bn
            wn = float(np.linalg.norm(wk[:, s]))
            if wn == 0.0:
                gains[l] = 0.0
                uk[:, s] = 0.0
                uk[0, s] = 1.0
                floored[l] = True
            else:
                gains[l] = wn * np.sqrt(p[l])
                uk[:, s] = wk[:, s] / wn
        u_blocks.append(uk)
    return PowerDecomposition(p, g_mat, tuple(u_blocks), gains, floored)


def recompose(dec):
    """Inverse of decompose (exact when nothing was floored)."""
    root_p = np.sqrt(dec.p)
    b_mat = dec.directions * root_p
    offsets = np.concatenate(([0], np.cumsum(dec.streams)))
    w_blocks = tuple(
        uk * (dec.gains[offsets[k]:offsets[k + 1]] / root_p[offsets[k]:offsets[k + 1]])
        for k, uk in enumerate(dec.rx_directions)
    )
    return DownlinkTransceiver(b_mat, w_blocks)


@dataclass(frozen=True)
class MseCoefficients:
    """Stream MSEs as functions of the powers:

    mse_l(p) = offset[l] + (gain_sq[l] * sum_{j != l} interference[j, l] p_j
               + noise[l]) / p_l
    """

    interference: np.ndarray   # S x S, zero diagonal: |g_l^H H u_j|^2 at (l, j)
    offset: np.ndarray         # length S, >= 0
    noise: np.ndarray          # length S: alpha_l^2 u_l^H R u_l
    gain_sq: np.ndarray        # alpha_l^2


def build_mse_coefficients(dec, ch, noise):
    """Interference gains, constant offsets, and noise terms of the power model."""
    group = dec.stream_users
    n_streams = dec.p.size
    offsets = np.concatenate(([0], np.cumsum(dec.streams)))
    # hu column j = H_{user(j)} u_j
    hu = np.hstack([ch.per_user[k] @ uk for k, uk in enumerate(dec.rx_directions)])
    inner = dec.directions.conj().T @ hu       # inner[l, j] = g_l^H H u_j
    interference = np.abs(inner) ** 2
    offset = np.empty(n_streams)
    noise_terms = np.empty(n_streams)
    for l in range(n_streams):
        z = inner[l, l]
        d_val = dec.gains[l] ** 2 * abs(z) ** 2 - 2.0 * dec.gains[l] * z.real + 1.0
        if d_val < -1e-12:
            raise NumericalError(f"negative constant MSE term {d_val:.3e}")
        offset[l] = max(d_val, 0.0)
        k = group[l]
        u_col = dec.rx_directions[k][:, l - offsets[k]]
        noise_terms[l] = dec.gains[l] ** 2 * real_part(
            np.vdot(u_col, noise.blocks[k] @ u_col), "receiver noise quadratic")
    np.fill_diagonal(interference, 0.0)
    return MseCoefficients(interference, offset, noise_terms, dec.gains ** 2)


def eval_symbol_mse(coeffs, p):
    """All stream MSEs of the power model at powers p."""
    p = np.asarray(p, dtype=float)
    return coeffs.offset + (coeffs.gain_sq * (coeffs.interference.T @ p)
                            + coeffs.noise) / p


def _unit(n_vars, idx, power=1.0):
    e = np.zeros(n_vars)
    e[idx] = power
    return e


def _stream_mse_monomials(coeffs, l, n_vars, scale, t_idx=None):
    """Monomials of scale * mse_l(p), optionally divided by the epigraph var."""
    t_expo = np.zeros(n_vars)
    if t_idx is not None:
        t_expo[t_idx] = -1.0
    monos = []
    if coeffs.offset[l] > 0:
        monos.append(Monomial(scale * coeffs.offset[l], t_expo.copy()))
    n_streams = coeffs.offset.size
    for j in range(n_streams):
        c = coeffs.gain_sq[l] * coeffs.interference[j, l]
        if j != l and c > 0:
            e = t_expo.copy()
            e[j] += 1.0
            e[l] -= 1.0
            monos.append(Monomial(scale * c, e))
    if coeffs.noise[l] > 0:
        e = t_expo.copy()
        e[l] -= 1.0
        monos.append(Monomial(scale * coeffs.noise[l], e))
    return monos


def _power_constraints(problem_id, dec, budget, n_vars):
    """Cap constraints of the active budget mode, normalized to <= 1."""
    n, n_streams = dec.directions.shape
    group = dec.stream_users
    smag = np.abs(dec.directions) ** 2      # antenna share of each unit direction
    cons = []
    if budget.mode == "total":
        budget.require("total")
        monos = [Monomial(1.0 / budget.total, _unit(n_vars, l)) for l in range(n_streams)]
        cons.append(Posynomial(tuple(monos)))
    elif problem_id == "P5":
        budget.require("entrywise")
        caps = np.asarray(budget.entrywise, dtype=float)
        for l in range(n_streams):
            for i in range(n):
                if smag[i, l] > 0:
                    cons.append(Posynomial((Monomial(smag[i, l] / caps[l, i],
                                                     _unit(n_vars, l)),)))
    else:
        budget.require("per_antenna")
        for i in range(n):
            monos = [Monomial(smag[i, l] / budget.per_antenna[i], _unit(n_vars, l))
                     for l in range(n_streams) if smag[i, l] > 0]
            if monos:
                cons.append(Posynomial(tuple(monos)))
        if problem_id in ("P1", "P3"):
            budget.require("per_symbol")
            for l in range(n_streams):
                cons.append(Posynomial((Monomial(1.0 / budget.per_symbol[l],
                                                 _unit(n_vars, l)),)))
        else:
            budget.require("per_user")
            for k in range(len(dec.streams)):
                monos = [Monomial(1.0 / budget.per_user[k], _unit(n_vars, l))
                         for l in range(n_streams) if group[l] == k]
                cons.append(Posynomial(tuple(monos)))
    for l in range(n_streams):
        cons.append(Posynomial((Monomial(POWER_FLOOR, _unit(n_vars, l, -1.0)),)))
    return cons


def build_gp(problem_id, dec, coeffs, weights, budget, warm_start=None):
    """GP for the power-allocation step of one problem family.

    Weighted-sum problems minimize the weighted posynomial MSE sum under
    the cap constraints; balancing problems minimize an epigraph variable
    bounding every balance-weighted MSE (per stream for P3, per user for
    P4).  The warm start defaults to the decomposition's own powers.
    """
    if problem_id not in ("P1", "P2", "P3", "P4", "P5"):
        raise ValueError(f"unknown problem id {problem_id!r}")
    n_streams = dec.p.size
    group = dec.stream_users
    weights = np.asarray(weights, dtype=float)
    has_epigraph = problem_id in ("P3", "P4")
    n_vars = n_streams + (1 if has_epigraph else 0)
    per_stream_w = weights[group] if problem_id in ("P2", "P4") else weights
    if per_stream_w.shape != (n_streams,):
        raise ValueError("weight length does not match the problem granularity")
    p_warm = dec.p if warm_start is None else np.asarray(warm_start, dtype=float)
    if has_epigraph:
        objective = Posynomial((Monomial(1.0, _unit(n_vars, n_streams)),))
        cons = _power_constraints(problem_id, dec, budget, n_vars)
        mse_at_warm = eval_symbol_mse(coeffs, p_warm)
        if problem_id == "P3":
            for l in range(n_streams):
                cons.append(Posynomial(tuple(
                    _stream_mse_monomials(coeffs, l, n_vars, weights[l], t_idx=n_streams))))
            t_warm = float(np.max(weights * mse_at_warm))
        else:
            for k in range(len(dec.streams)):
                monos = []
                for l in range(n_streams):
                    if group[l] == k:
                        monos.extend(_stream_mse_monomials(coeffs, l, n_vars,
                                                           weights[k], t_idx=n_streams))
                cons.append(Posynomial(tuple(monos)))
            user_mse = np.array([mse_at_warm[group == k].sum()
                                 for k in range(len(dec.streams))])
            t_warm = float(np.max(weights * user_mse))
        full_warm = np.concatenate((p_warm, [t_warm]))
    else:
        monos = []
        for l in range(n_streams):
            monos.extend(_stream_mse_monomials(coeffs, l, n_vars, per_stream_w[l]))
        objective = Posynomial(tuple(monos))
        cons = _power_constraints(problem_id, dec, budget, n_vars)
        full_warm = p_warm.copy()
    return GpProblem(objective, tuple(cons), n_vars, has_epigraph, full_warm, problem_id)


def _compile(posys):
    coefs, expos, starts = [], [], [0]
    for posy in posys:
        c, e = posy.arrays()
        coefs.append(c)
        expos.append(e)
        starts.append(starts[-1] + c.size)
    return (np.concatenate(coefs), np.vstack(expos),
            np.array(starts, dtype=np.int64))


def _interior_start(gp):
    """Strictly feasible log-domain start near the warm start.

    Powers shrink a hair (or lift off the floor), and the epigraph variable
    grows a hair, so every cap and epigraph constraint has positive slack.
    """
    y = np.log(gp.warm_start)
    n_p = gp.n_powers
    y[:n_p] = np.log(np.maximum(gp.warm_start[:n_p] * (1.0 - 1e-6),
                                gp.floor * (1.0 + 1e-6)))
    if gp.has_epigraph:
        y[n_p] = np.log(gp.warm_start[n_p] * (1.0 + 1e-5))
    return y


def _kkt_residual(arrays, y):
    """Stationarity norm at y with best-fit nonnegative multipliers.

    Multipliers for near-tight constraints come from a nonnegative least
    squares fit of the Lagrangian gradient; the complementarity defect of
    that fit is folded into the residual.
    """
    from scipy.optimize import nnls

    (c_obj, e_obj, s_obj), (c_con, e_con, s_con) = arrays
    _, og, _ = _kernels.posy_batch_eval(c_obj, e_obj, s_obj, y)
    gv, gg, _ = _kernels.posy_batch_eval(c_con, e_con, s_con, y)
    slack = 1.0 - gv
    active = np.nonzero(slack <= 1e-5)[0]
    if active.size == 0:
        return float(np.max(np.abs(og[0])))
    a_mat = gg[active].T
    lam, _ = nnls(a_mat, -og[0])
    stat = float(np.max(np.abs(og[0] + a_mat @ lam)))
    comp = float(np.max(lam * slack[active]))
    return max(stat, comp)


def solve_gp(gp, tol=1e-9, max_iter=200):
    """Barrier solve of the GP in the log domain.

    Follows the central path with a x10 barrier schedule, damped Newton
    steps, and Armijo backtracking; returns the best feasible point seen,
    which by construction is never worse than the warm start.  The KKT
    residual is the stationarity norm at the returned point with best-fit
    nonnegative multipliers on the near-tight constraints.
    """
    c_obj, e_obj, s_obj = _compile([gp.objective])
    c_con, e_con, s_con = _compile(gp.constraints)
    m = len(gp.constraints)

    def f0(y):
        vals, _, _ = _kernels.posy_batch_eval(c_obj, e_obj, s_obj, y)
        return float(vals[0])

    best_y = np.log(gp.warm_start)
    best_f = f0(best_y)
    y = _interior_start(gp)
    gvals, _, _ = _kernels.posy_batch_eval(c_con, e_con, s_con, y)
    if np.max(gvals) >= 1.0:
        # warm start pinned to a cap from outside the log-domain interior
        y = best_y.copy()
        shrink = 1.0 - 1e-7
        for _ in range(60):
            y[:gp.n_powers] += np.log(shrink)
            if gp.has_epigraph:
                y[gp.n_powers] -= 2.0 * np.log(shrink)
            gvals, _, _ = _kernels.posy_batch_eval(c_con, e_con, s_con, y)
            if np.max(gvals) < 1.0:
                break
            shrink *= 0.5
        else:
            return GpResult(gp.warm_start[:gp.n_powers].copy(), best_f,
                            "warm_start", np.inf, 0)

    tau = 1.0
    newton_total = 0
    status = "optimal"
    while True:
        stalls = 0
        grad_floor = np.inf
        for _ in range(max_iter):
            ov, og, oh = _kernels.posy_batch_eval(c_obj, e_obj, s_obj, y)
            gv, gg, gh = _kernels.posy_batch_eval(c_con, e_con, s_con, y)
            slack = 1.0 - gv
            if np.min(slack) <= 0:
                raise NumericalError("barrier iterate left the feasible region")
            grad = tau * og[0] + (gg / slack[:, None]).sum(axis=0)
            g_inf = float(np.max(np.abs(grad)))
            if g_inf <= 1e-9 * tau * max(1.0, float(ov[0])):
                break
            # stop at the conditioning floor once the gradient stops shrinking
            if g_inf < 0.98 * grad_floor:
                grad_floor = g_inf
                stalls = 0
            else:
                stalls += 1
                if stalls >= 5:
                    break
            hess = tau * oh[0]
            for i in range(m):
                hess = hess + gh[i] / slack[i] + np.outer(gg[i], gg[i]) / slack[i] ** 2
            newton_total += 1
            ridge = 0.0
            while True:
                try:
                    step = np.linalg.solve(hess + ridge * np.eye(gp.n_vars), -grad)
                except np.linalg.LinAlgError:
                    step = None
                if step is not None and grad @ step < 0:
                    break
                ridge = 1e-8 * (1.0 + np.trace(hess).real / gp.n_vars) if ridge == 0 else ridge * 100
                if ridge > 1e12:
                    step = -grad
                    break
            phi0 = tau * ov[0] - np.sum(np.log(slack))
            t_ls = 1.0
            accepted = False
            for _ in range(60):
                y_try = y + t_ls * step
                gv_try, _, _ = _kernels.posy_batch_eval(c_con, e_con, s_con, y_try)
                if np.max(gv_try) < 1.0:
                    ov_try, _, _ = _kernels.posy_batch_eval(c_obj, e_obj, s_obj, y_try)
                    phi_try = tau * ov_try[0] - np.sum(np.log(1.0 - gv_try))
                    if phi_try <= phi0 + 1e-4 * t_ls * (grad @ step):
                        accepted = True
                        break
                t_ls *= 0.5
            if not accepted:
                break
            y = y_try
            if ov_try[0] < best_f:
                best_f = float(ov_try[0])
                best_y = y.copy()
        else:
            status = "max_iter"
        f_now = f0(y)
        if f_now < best_f:
            best_f = f_now
            best_y = y.copy()
        if m / tau <= tol * max(1.0, abs(f_now)) or status == "max_iter" or tau > 1e14:
            break
        tau *= 10.0

    warm_f = f0(np.log(gp.warm_start))
    if warm_f <= best_f:
        best_f = warm_f
        best_y = np.log(gp.warm_start)
        if status == "optimal":
            status = "warm_start"
    kkt = _kkt_residual(((c_obj, e_obj, s_obj), (c_con, e_con, s_con)), best_y)
    return GpResult(np.exp(best_y[:gp.n_powers]), float(best_f), status,
                    kkt, newton_total)


def grid_oracle(gp, points_per_dim=200):
    """Brute-force reference optimum over a log-spaced feasible grid.

    Only the powers are gridded; for balancing problems the epigraph
    variable is resolved analytically as the largest epigraph posynomial
    value at each grid point.  Small instances only.
    """
    n_p = gp.n_powers
    if gp.n_vars > 3:
        raise ValueError("grid oracle limited to at most three variables")
    uppers = np.full(n_p, np.inf)
    power_cons, epi_cons = [], []
    for con in gp.constraints:
        coefs, expos = con.arrays()
        if gp.has_epigraph and np.any(expos[:, n_p] != 0):
            if np.any(expos[:, n_p] != -1.0):
                raise ValueError("unexpected epigraph exponent in constraint")
            epi_cons.append((coefs, expos[:, :n_p]))
            continue
        power_cons.append((coefs, expos[:, :n_p]))
        for c, e in zip(coefs, expos):
            nz = np.nonzero(e[:n_p])[0]
            if nz.size == 1 and e[nz[0]] == 1.0:
                uppers[nz[0]] = min(uppers[nz[0]], 1.0 / c)
    if not np.all(np.isfinite(uppers)):
        raise ValueError("could not bound every power from the constraints")
    lowers = np.maximum(gp.floor, uppers * 1e-5)
    c_obj, e_obj = gp.objective.arrays()

    def scan(lo_vec, hi_vec):
        axes = [np.geomspace(lo_vec[i], hi_vec[i], points_per_dim) for i in range(n_p)]
        mesh = np.meshgrid(*axes, indexing="ij")
        logs = np.log(np.stack([m.ravel() for m in mesh], axis=1))
        best_f, best_p = np.inf, None
        chunk = 200000
        for start in range(0, logs.shape[0], chunk):
            block = logs[start:start + chunk]
            mask = np.ones(block.shape[0], dtype=bool)
            for coefs, expos in power_cons:
                mask &= np.exp(block @ expos.T) @ coefs <= 1.0 + 1e-12
            if not np.any(mask):
                continue
            sub = block[mask]
            if gp.has_epigraph:
                obj = np.zeros(sub.shape[0])
                for coefs, expos in epi_cons:
                    np.maximum(obj, np.exp(sub @ expos.T) @ coefs, out=obj)
            else:
                obj = np.exp(sub @ e_obj[:, :n_p].T) @ c_obj
            i_best = int(np.argmin(obj))
            if obj[i_best] < best_f:
                best_f = float(obj[i_best])
                best_p = np.exp(sub[i_best])
        return best_p, best_f

    best_p, best_f = scan(lowers, uppers)
    if best_p is None:
        raise ValueError("no feasible grid point found")
    # zoom pass: rescan a few coarse steps around the coarse argmin
    ratio = (uppers / lowers) ** (4.0 / (points_per_dim - 1))
    zoom_p, zoom_f = scan(np.maximum(lowers, best_p / ratio),
                          np.minimum(uppers, best_p * ratio))
    if zoom_p is not None and zoom_f < best_f:
        best_p, best_f = zoom_p, zoom_f
    return best_p, best_f
