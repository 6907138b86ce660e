"""Randomized oracles for the transfer, allocation, and identity machinery.

Every check here recomputes its target quantity through a route disjoint
from the implementation it judges: sampling against closed forms, exhaustive
grids against the barrier solver, dense inversion against the iterative
certificates, and a plain numpy sweep against the compiled fixed point.

Multi-metric suites normalize each deviation by its own allowance and report
the worst fraction, so a report passes exactly when max_deviation <= 1.
Single-metric suites keep natural units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from . import mse
from . import duality_minmax as dm
from . import duality_wsmse as dw
from . import gp
from . import solver as _solver
from .mse import DownlinkTransceiver, InterferenceTransceiver

__all__ = [
    "OracleReport",
    "monte_carlo_mse",
    "duality_roundtrip_suite",
    "theorem2_suite",
    "gp_oracle_suite",
    "identity_suite",
    "fixed_point_suite",
]


@dataclass(frozen=True)
class OracleReport:
    """One-line verdict of a randomized suite."""

    name: str
    instances: int
    max_deviation: float
    tolerance: float
    seeds: tuple
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.max_deviation <= self.tolerance)

    def as_row(self):
        return {
            "suite": self.name,
            "instances": self.instances,
            "max_deviation": self.max_deviation,
            "tolerance": self.tolerance,
            "passed": int(self.passed),
        }

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"{self.name}: {verdict} (max deviation {self.max_deviation:.3e} "
                f"vs tolerance {self.tolerance:.0e}, {self.instances} instances)")


def _sample_complex(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def monte_carlo_mse(state, ch, noise, k, s, n_samples=1_000_000, seed=0,
                    chunk=100_000):
    """Sampled MSE of one stream and its standard error.

    Draws symbols and receiver noise from the model the analytic formulas
    assume: unit-variance symbols plus covariance-R noise in the downlink,
    per-stream variances plus the stored diagonal noise in the dual channel.
    """
    if n_samples < 10_000:
        raise ValueError("need at least 10^4 samples for a stable estimate")
    rng = model.rng_for(seed, model.ORACLE_STREAM, k, s)
    if isinstance(state, DownlinkTransceiver):
        l = state.column(k, s)
        w = state.W[k][:, s]
        sig = state.B.conj().T @ (ch.per_user[k] @ w)
        chol = np.linalg.cholesky(noise.blocks[k])
        mix = chol.conj().T @ w.conj()
        n_streams = state.B.shape[1]
        var = np.ones(n_streams)
        coef = sig.conj()
    elif isinstance(state, InterferenceTransceiver):
        l = state.column(k, s)
        t = state.T[:, l]
        hv = np.hstack([ch.per_user[i] @ vi for i, vi in enumerate(state.V)])
        coef = (hv.conj().T @ t).conj()
        mix = np.sqrt(state.noise_diagonal(l)) * t.conj()
        var = np.asarray(state.input_var, dtype=float)
        n_streams = hv.shape[1]
    else:
        raise TypeError("state must be a downlink or dual-channel transceiver")
    scale = np.sqrt(var)
    total, total_sq, done = 0.0, 0.0, 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        d = _sample_complex(rng, (m, n_streams)) * scale
        z = _sample_complex(rng, (m, mix.size))
        err = d @ coef + z @ mix - d[:, l]
        e2 = np.abs(err) ** 2
        total += float(e2.sum())
        total_sq += float((e2 ** 2).sum())
        done += m
    estimate = total / n_samples
    variance = max(total_sq / n_samples - estimate ** 2, 0.0)
    return estimate, float(np.sqrt(variance / n_samples))


def _symbol_mse_vector(dl, ch, noise):
    return np.array([
        mse.symbol_mse_dl(dl, ch, noise, k, s)
        for k in range(len(dl.W)) for s in range(dl.streams[k])
    ])


def _roundtrip_wsmse(spec, dl, ch, noise, budget):
    """Equality-mode round trip plus the budgeted forward inequality."""
    gran = spec.granularity
    weights = spec.weights
    # the transfer folds the weights into the dual input variances, so the
    # dual objective to compare is the unit-weighted dual sum
    unit = np.ones_like(weights)
    before = mse.wsmse_dl(dl, ch, noise, weights, gran)
    if spec.effective_id == "P5":
        _, entry = dw.equality_noise_weights(dl, ch, noise, weights, "entrywise")
        ifc = dw.dl_to_if_entrywise(dl, ch, noise, weights, budget,
                                    entry_noise=entry)
        back, _ = dw.if_to_dl_entrywise(ifc, ch, noise, weights, budget)
        mid = mse.wsmse_if(ifc, ch, unit, gran)
        _, entry_fp, _, _ = dw.solve_noise_weights(dl, ch, noise, weights,
                                                   budget, "entrywise")
        fwd = dw.dl_to_if_entrywise(dl, ch, noise, weights, budget,
                                    entry_noise=entry_fp)
    else:
        aw, gw = dw.equality_noise_weights(dl, ch, noise, weights, gran)
        forward = dw.dl_to_if_symbolwise if gran == "symbol" else dw.dl_to_if_userwise
        backward = dw.if_to_dl_symbolwise if gran == "symbol" else dw.if_to_dl_userwise
        ifc = forward(dl, ch, noise, weights, budget, 1.0,
                      antenna_noise=aw, stream_noise=gw)
        back, _ = backward(ifc, ch, noise, weights, budget)
        mid = mse.wsmse_if(ifc, ch, unit, gran)
        aw_fp, gw_fp, _, _ = dw.solve_noise_weights(dl, ch, noise, weights,
                                                    budget, gran)
        fwd = forward(dl, ch, noise, weights, budget, 1.0,
                      antenna_noise=aw_fp, stream_noise=gw_fp)
    after = mse.wsmse_dl(back, ch, noise, weights, gran)
    hop = abs(mid - before) / before
    trip = abs(after - before) / before
    bounded = mse.wsmse_if(fwd, ch, unit, gran)
    overshoot = max(bounded - before - 1e-12, 0.0) / before
    return back, max(hop, trip), overshoot


def _roundtrip_minmax(spec, dl, ch, noise, budget):
    # the balancing transfer preserves MSEs at its own granularity:
    # one value per symbol or one value per user
    gran = spec.granularity
    n_users = len(dl.W)
    if gran == "symbol":
        before = _symbol_mse_vector(dl, ch, noise)
    else:
        before = np.array([mse.user_mse_dl(dl, ch, noise, k)
                           for k in range(n_users)])
    iterate = (dm.switched_iteration_symbolwise if gran == "symbol"
               else dm.switched_iteration_userwise)
    aw, sw, _ = iterate(dl, ch, noise, budget)
    ifc = dm.transfer_dl_to_if_minmax(dl, ch, noise, aw, sw, gran)
    if gran == "symbol":
        mid = np.array([
            mse.symbol_mse_if(ifc, ch, k, s)
            for k in range(n_users) for s in range(ifc.streams[k])
        ])
    else:
        mid = np.array([mse.user_mse_if(ifc, ch, k) for k in range(n_users)])
    back, _ = dm.transfer_if_to_dl_minmax(ifc, ch, noise, gran)
    if gran == "symbol":
        after = _symbol_mse_vector(back, ch, noise)
    else:
        after = np.array([mse.user_mse_dl(back, ch, noise, k)
                          for k in range(n_users)])
    dev = max(np.max(np.abs(mid - before) / before),
              np.max(np.abs(after - before) / before))
    return back, float(dev), 0.0


def _roundtrip_total(spec, dl, ch, noise, budget):
    gran = spec.granularity
    if spec.objective_kind == "wsmse":
        before = mse.wsmse_dl(dl, ch, noise, spec.weights, gran)
        ifc = dw.total_power_transfer_wsmse(dl, ch, noise, spec.weights,
                                            budget.total, "dl_to_if", gran)
        mid = mse.wsmse_if(ifc, ch, np.ones_like(spec.weights), gran)
        back, _ = dw.total_power_transfer_wsmse(ifc, ch, noise, spec.weights,
                                                budget.total, "if_to_dl", gran)
        after = mse.wsmse_dl(back, ch, noise, spec.weights, gran)
        dev = max(abs(mid - before), abs(after - before)) / before
    else:
        n_users = len(dl.W)
        if gran == "symbol":
            before = _symbol_mse_vector(dl, ch, noise)
        else:
            before = np.array([mse.user_mse_dl(dl, ch, noise, k)
                               for k in range(n_users)])
        ifc = dm.total_power_transfer_minmax(dl, ch, noise, budget.total,
                                             "dl_to_if", gran)
        if gran == "symbol":
            mid = np.array([
                mse.symbol_mse_if(ifc, ch, k, s)
                for k in range(n_users) for s in range(ifc.streams[k])
            ])
        else:
            mid = np.array([mse.user_mse_if(ifc, ch, k) for k in range(n_users)])
        back, _ = dm.total_power_transfer_minmax(ifc, ch, noise, budget.total,
                                                 "if_to_dl", gran)
        if gran == "symbol":
            after = _symbol_mse_vector(back, ch, noise)
        else:
            after = np.array([mse.user_mse_dl(back, ch, noise, k)
                              for k in range(n_users)])
        dev = float(max(np.max(np.abs(mid - before) / before),
                        np.max(np.abs(after - before) / before)))
    used = mse.powers(back.B, back.streams)[3]
    power_dev = abs(used - budget.total) / budget.total
    return back, dev, power_dev


def duality_roundtrip_suite(spec, seeds, snr_db=10.0, config=None, budget=None):
    """Transfer out and back once per seed; measure what must be preserved.

    Weighted-sum modes check the equality-mode round trip, the budgeted
    forward inequality, and cap feasibility of the returned state; balancing
    modes check every per-stream MSE both ways; total-power modes check the
    exact budget use.  Deviations are fractions of each check's allowance.
    """
    if isinstance(spec, str):
        spec = _solver.ProblemSpec(
            spec, _default_weights(spec),
            budget_mode=budget.mode if budget is not None else "combined")
    config = config or model.reference_config()
    budget = budget or model.reference_budget()
    worst = 0.0
    for seed in seeds:
        ch = model.generate_channels(config, seed)
        noise = model.noise_for_snr(config, budget.total, snr_db)
        spec.resolve_streams(ch, noise)
        dl = _solver.init_transceiver(spec, ch, noise, budget)
        if budget.mode == "total":
            back, dev, extra = _roundtrip_total(spec, dl, ch, noise, budget)
            worst = max(worst, dev / 1e-10, extra / 1e-9)
        elif spec.objective_kind == "wsmse":
            back, dev, overshoot = _roundtrip_wsmse(spec, dl, ch, noise, budget)
            worst = max(worst, dev / 1e-10, overshoot / 1e-12)
        else:
            back, dev, _ = _roundtrip_minmax(spec, dl, ch, noise, budget)
            worst = max(worst, dev / 1e-10)
        feas, _ = _solver._feasibility(spec, back.B, back.streams, budget)
        worst = max(worst, max(-feas.min_slack, 0.0) / 1e-9)
    return OracleReport(f"roundtrip[{spec.id},{budget.mode}]", len(list(seeds)),
                        float(worst), 1.0, tuple(seeds))


def _default_weights(problem_id):
    if problem_id in ("P2", "P4"):
        return np.ones(2)
    return np.ones(4)


def theorem2_suite(n_matrices=500, seed=0, min_size=2, max_size=12):
    """Random column-stochastic-complement matrices against dense inversion.

    Builds matrices with nonpositive off-diagonals and unit column sums,
    inverts them directly, and measures entrywise nonnegativity of the
    inverse and its one-norm pinned at one.
    """
    rng = model.rng_for(seed, model.ORACLE_STREAM, 2)
    worst = 0.0
    sizes = []
    for _ in range(n_matrices):
        n = int(rng.integers(min_size, max_size + 1))
        sizes.append(n)
        off = 10.0 ** rng.uniform(-3.0, 2.0, (n, n))
        off[np.diag_indices(n)] = 0.0
        a = -off
        a[np.diag_indices(n)] = 1.0 + off.sum(axis=0)
        min_inv, one_norm, _ = dm.theorem2_check(a)
        worst = max(worst, max(-min_inv, 0.0) / 1e-12, abs(one_norm - 1.0) / 1e-9)
    return OracleReport("theorem2", n_matrices, float(worst), 1.0, (seed,),
                        {"sizes": (min(sizes), max(sizes))})


def _random_small_instance(rng, problem_id):
    if problem_id in ("P3", "P4"):
        total_streams = 2
    else:
        total_streams = int(rng.integers(2, 4))
    if total_streams == 2:
        layouts = [(2,), (1, 1)]
    else:
        layouts = [(3,), (2, 1)]
    streams = layouts[int(rng.integers(len(layouts)))]
    if problem_id in ("P2", "P4") and len(streams) == 1:
        streams = layouts[-1]
    n_tx = int(rng.integers(total_streams, 5))
    rx = tuple(int(s + rng.integers(0, 2)) for s in streams)
    config = model.SystemConfig(n_tx=n_tx, rx_antennas=rx, streams=tuple(streams))
    caps_a = rng.uniform(1.0, 3.0, n_tx)
    caps_s = rng.uniform(1.0, 3.0, total_streams)
    caps_u = np.array([caps_s[sum(streams[:k]):sum(streams[:k + 1])].sum()
                       for k in range(len(streams))]) * rng.uniform(0.8, 1.2)
    budget = model.PowerBudget(per_antenna=caps_a, per_symbol=caps_s,
                               per_user=caps_u, total=float(caps_a.sum()),
                               mode="combined")
    return config, budget


def gp_oracle_suite(n_instances=50, seed=0, points_per_dim=200):
    """Barrier solves against exhaustive log-grid search on small problems.

    Each instance draws a random small system, a random feasible transceiver,
    and one of the four problem forms, then compares the barrier optimum with
    the grid optimum and checks the stationarity residual.
    """
    rng = model.rng_for(seed, model.ORACLE_STREAM, 3)
    worst = 0.0
    gaps = []
    for idx in range(n_instances):
        problem_id = ("P1", "P2", "P3", "P4")[int(rng.integers(4))]
        config, budget = _random_small_instance(rng, problem_id)
        ch = model.generate_channels(config, int(rng.integers(2 ** 31)))
        noise = model.noise_for_snr(config, budget.total,
                                    float(rng.uniform(0.0, 20.0)))
        n_streams = sum(config.streams)
        b = _sample_complex(rng, (config.n_tx, n_streams))
        per_a, per_s, per_u, _ = mse.powers(b, config.streams)
        scale = np.sqrt(min(
            np.min(budget.per_antenna / per_a),
            np.min(budget.per_symbol / per_s),
            np.min(budget.per_user / per_u),
        )) * rng.uniform(0.5, 1.0)
        b = b * scale
        w = mse.mmse_receiver_dl(b, ch, noise, config.streams)
        dl = DownlinkTransceiver(b, w)
        gran = "user" if problem_id in ("P2", "P4") else "symbol"
        n_weights = len(config.streams) if gran == "user" else n_streams
        weights = rng.uniform(0.5, 2.0, n_weights)
        dec = gp.decompose(dl)
        coeffs = gp.build_mse_coefficients(dec, ch, noise)
        problem = gp.build_gp(problem_id, dec, coeffs, weights, budget)
        result = gp.solve_gp(problem)
        _, oracle_best = gp.grid_oracle(problem, points_per_dim)
        gap = abs(result.objective - oracle_best) / abs(oracle_best)
        gaps.append(gap)
        worst = max(worst, gap / 0.01, result.kkt_residual / 1e-7)
    return OracleReport("gp_oracle", n_instances, float(worst), 1.0, (seed,),
                        {"max_gap": float(max(gaps))})


def identity_suite(n_instances=100, seed=0, config=None):
    """MSE against 1/(1+SINR) at MMSE receivers on random instances."""
    config = config or model.reference_config()
    budget = model.reference_budget()
    rng = model.rng_for(seed, model.ORACLE_STREAM, 4)
    worst = 0.0
    for idx in range(n_instances):
        ch = model.generate_channels(config, seed + idx)
        noise = model.noise_for_snr(config, budget.total,
                                    float(rng.uniform(0.0, 25.0)))
        b = _sample_complex(rng, (config.n_tx, sum(config.streams)))
        b *= np.sqrt(np.min(budget.per_antenna / np.abs(b ** 2).sum(axis=1)))
        dl = DownlinkTransceiver(
            b, mse.mmse_receiver_dl(b, ch, noise, config.streams))
        for k in range(config.n_users):
            for s in range(config.streams[k]):
                _, _, resid = mse.mse_sinr_identity(dl, ch, noise, k, s)
                worst = max(worst, resid)
    return OracleReport("mse_sinr_identity", n_instances, float(worst), 1e-10,
                        (seed,))


def _fp_map_reference(terms, caps, energy, x, floor):
    denom = float(x @ terms)
    return np.maximum(floor, energy / caps * x * terms / denom)


def fixed_point_suite(n_instances=1000, seed=0):
    """Frozen-norm weight iteration on random budgets.

    Convergence is measured by one independent numpy sweep at the returned
    point (absolute sup-norm step), the budget identity by direct evaluation.
    At least 99% of instances must land below 1e-8 on both counts.
    """
    rng = model.rng_for(seed, model.ORACLE_STREAM, 5)
    bad = 0
    worst_identity = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 9))
        energy = 10.0 ** rng.uniform(-2.0, 2.0)
        terms = 10.0 ** rng.uniform(-3.0, 1.0, n + m)
        caps = 10.0 ** rng.uniform(-1.0, 1.0, n + m)
        inputs = dw.FixedPointInputs(energy, terms[:n], terms[n:],
                                     caps[:n], caps[n:])
        sol = dw.fixed_point_solve(inputs, tol=1e-13)
        x = np.concatenate((sol.antenna_noise, sol.stream_noise))
        floor = dw.fixed_point_floor(energy, caps)
        step = np.max(np.abs(_fp_map_reference(terms, caps, energy, x, floor) - x))
        budget_dev = dw.budget_identity_residual(inputs, sol)
        if step > 1e-8 or budget_dev > 1e-8:
            bad += 1
        worst_identity = max(worst_identity, budget_dev)
    fraction_bad = bad / n_instances
    return OracleReport("fixed_point", n_instances, float(fraction_bad), 0.01,
                        (seed,), {"worst_identity": worst_identity})
