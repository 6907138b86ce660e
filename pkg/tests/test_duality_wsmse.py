"""Weighted-sum-MSE duality transfers.

Equality weights must make the round trip an identity, fixed-point weights
must make the forward direction an inequality and the reverse direction
cap-feasible, and the fixed point itself is checked against a plain
reference iteration.
"""

import numpy as np
import pytest

from mimodual import duality_wsmse as dw
from mimodual import model, mse

from conftest import random_feasible_dl


def simple_fixed_point(terms, caps, energy, floor, n_iter=6000):
    """Straightforward iteration of the redistribution map, no kernels."""
    x = np.full(caps.size, energy / caps.sum())
    for _ in range(n_iter):
        x = np.maximum(floor, energy / caps * x * terms / (x @ terms))
    return x


class TestFixedPoint:
    def test_inputs_validation(self):
        good = dict(energy=1.0, antenna_terms=np.ones(2),
                    stream_terms=np.ones(3), antenna_caps=np.ones(2),
                    stream_caps=np.ones(3))
        dw.FixedPointInputs(**good)
        with pytest.raises(ValueError):
            dw.FixedPointInputs(**{**good, "energy": 0.0})
        with pytest.raises(ValueError):
            dw.FixedPointInputs(**{**good, "antenna_terms": -np.ones(2)})
        with pytest.raises(ValueError):
            dw.FixedPointInputs(**{**good, "stream_caps": np.ones(4)})
        with pytest.raises(ValueError):
            dw.FixedPointInputs(**{**good, "antenna_caps": np.zeros(2)})

    def test_floor_formula(self):
        caps = np.array([2.0, 4.0])
        assert dw.fixed_point_floor(8.0, caps) == pytest.approx(
            min(1e-6, 8.0 / 4.0, 1e-9 * 8.0 / 6.0))

    def test_matches_reference_iteration(self):
        rng = np.random.default_rng(77)
        for _ in range(20):
            n, m = rng.integers(2, 6), rng.integers(1, 5)
            inp = dw.FixedPointInputs(
                energy=float(rng.uniform(0.5, 20.0)),
                antenna_terms=rng.uniform(0.05, 3.0, n),
                stream_terms=rng.uniform(0.05, 3.0, m),
                antenna_caps=rng.uniform(0.5, 4.0, n),
                stream_caps=rng.uniform(0.5, 4.0, m))
            sol = dw.fixed_point_solve(inp, tol=1e-13)
            terms = np.concatenate((inp.antenna_terms, inp.stream_terms))
            caps = np.concatenate((inp.antenna_caps, inp.stream_caps))
            floor = dw.fixed_point_floor(inp.energy, caps)
            ref = simple_fixed_point(terms, caps, inp.energy, floor)
            got = np.concatenate((sol.antenna_noise, sol.stream_noise))
            np.testing.assert_allclose(got, ref, rtol=1e-7, atol=1e-12)
            assert dw.budget_identity_residual(inp, sol) <= 1e-8
            assert sol.converged

    def test_budget_identity_direct(self):
        inp = dw.FixedPointInputs(energy=3.0,
                                  antenna_terms=np.array([0.4, 1.1]),
                                  stream_terms=np.array([0.7]),
                                  antenna_caps=np.array([1.0, 2.0]),
                                  stream_caps=np.array([1.5]))
        sol = dw.fixed_point_solve(inp)
        spent = (sol.antenna_noise @ inp.antenna_caps
                 + sol.stream_noise @ inp.stream_caps)
        assert spent == pytest.approx(3.0, rel=1e-8)


def _wsmse_energy(dl, noise, zeta):
    total = 0.0
    for k, wk in enumerate(dl.W):
        rw = noise.blocks[k] @ wk
        off = 2 * k
        for s in range(wk.shape[1]):
            total += zeta[off + s] * np.vdot(wk[:, s], rw[:, s]).real
    return total


class TestJointNoiseWeights:
    def test_budget_identity_and_decoder_consistency(self, ref_budget):
        dl, ch, noise = random_feasible_dl(21)
        w = np.array([1.0, 2.0, 1.5, 0.5])
        aw, gw, t, sol = dw.solve_noise_weights(dl, ch, noise, w, ref_budget)
        energy = _wsmse_energy(dl, noise, w)
        spent = aw @ ref_budget.per_antenna + gw @ ref_budget.per_symbol
        assert spent == pytest.approx(energy, rel=1e-8)
        # the returned decoder is the columnwise MMSE receiver of the dual
        # state built from the returned weights
        ifc = dw.dl_to_if_symbolwise(dl, ch, noise, w, ref_budget,
                                     antenna_noise=aw, stream_noise=gw)
        for k in range(2):
            for s in range(2):
                l = ifc.column(k, s)
                np.testing.assert_allclose(
                    t[:, l], mse.mmse_receiver_if(ifc, ch, k, s),
                    rtol=1e-8, atol=1e-12)

    def test_requires_matching_budget_fields(self, ref_config):
        dl, ch, noise = random_feasible_dl(22)
        total_only = model.PowerBudget(total=10.0, mode="total")
        with pytest.raises(ValueError):
            dw.solve_noise_weights(dl, ch, noise, np.ones(4), total_only)
        with pytest.raises(ValueError):
            dw.solve_noise_weights(dl, ch, noise, np.ones(4),
                                   model.reference_budget(), granularity="bogus")

    def test_forward_transfer_rejects_half_supplied_noise(self, ref_budget):
        dl, ch, noise = random_feasible_dl(23)
        with pytest.raises(ValueError):
            dw.dl_to_if_symbolwise(dl, ch, noise, np.ones(4), ref_budget,
                                   antenna_noise=np.ones(4))


class TestEqualityRoundTrip:
    def test_symbolwise_identity(self, ref_budget):
        dl, ch, noise = random_feasible_dl(24)
        w = np.array([1.0, 0.5, 2.0, 1.5])
        aw, gw = dw.equality_noise_weights(dl, ch, noise, w)
        ifc = dw.dl_to_if_symbolwise(dl, ch, noise, w, ref_budget,
                                     antenna_noise=aw, stream_noise=gw)
        # the dual state folds w into its input variances, so its
        # unit-weighted MSE sum is the downlink weighted objective
        assert mse.wsmse_if(ifc, ch, np.ones(4)) == pytest.approx(
            mse.wsmse_dl(dl, ch, noise, w), rel=1e-11)
        back, beta = dw.if_to_dl_symbolwise(ifc, ch, noise, w, ref_budget)
        assert beta == pytest.approx(1.0, rel=1e-10)
        np.testing.assert_allclose(back.B, dl.B, rtol=1e-9, atol=1e-12)
        assert mse.wsmse_dl(back, ch, noise, w) == pytest.approx(
            mse.wsmse_dl(dl, ch, noise, w), rel=1e-11)

    def test_userwise_identity(self, ref_budget):
        dl, ch, noise = random_feasible_dl(25)
        w = np.array([1.0, 3.0])
        aw, gw = dw.equality_noise_weights(dl, ch, noise, w, granularity="user")
        ifc = dw.dl_to_if_userwise(dl, ch, noise, w, ref_budget,
                                   antenna_noise=aw, stream_noise=gw)
        assert mse.wsmse_if(ifc, ch, np.ones(2), granularity="user") == pytest.approx(
            mse.wsmse_dl(dl, ch, noise, w, granularity="user"), rel=1e-11)
        back, beta = dw.if_to_dl_userwise(ifc, ch, noise, w, ref_budget)
        np.testing.assert_allclose(back.B, dl.B, rtol=1e-9, atol=1e-12)

    def test_entrywise_identity_skips_antenna_noise(self, ref_budget):
        dl, ch, noise = random_feasible_dl(26)
        w = np.ones(4)
        aw, entry = dw.equality_noise_weights(dl, ch, noise, w,
                                              granularity="entrywise")
        assert aw is None
        assert entry.shape == (4, 4)
        ifc = dw.dl_to_if_entrywise(dl, ch, noise, w, ref_budget,
                                    entry_noise=entry)
        assert mse.wsmse_if(ifc, ch, w) == pytest.approx(
            mse.wsmse_dl(dl, ch, noise, w), rel=1e-11)
        back, _ = dw.if_to_dl_entrywise(ifc, ch, noise, w, ref_budget)
        np.testing.assert_allclose(back.B, dl.B, rtol=1e-9, atol=1e-12)


class TestFixedPointRoundTrip:
    # the transfers run at tol=1e-12 here, matching the solver loop: the
    # back-transfer cap tightness inherits the fixed-point residual

    def test_symbolwise_forward_inequality_and_caps(self, ref_budget):
        for seed in range(6):
            dl, ch, noise = random_feasible_dl(30 + seed)
            w = np.array([1.0, 2.0, 0.5, 1.5])
            ifc = dw.dl_to_if_symbolwise(dl, ch, noise, w, ref_budget,
                                         tol=1e-12)
            assert (mse.wsmse_if(ifc, ch, np.ones(4))
                    <= mse.wsmse_dl(dl, ch, noise, w) + 1e-12)
            refreshed = mse.with_mmse_decoder(ifc, ch)
            back, _ = dw.if_to_dl_symbolwise(refreshed, ch, noise, w, ref_budget)
            per_a, per_s, _, _ = mse.powers(back.B, back.streams)
            assert np.all(per_a <= ref_budget.per_antenna + 1e-9)
            assert np.all(per_s <= ref_budget.per_symbol + 1e-9)

    def test_userwise_forward_inequality_and_caps(self, ref_budget):
        for seed in range(4):
            dl, ch, noise = random_feasible_dl(40 + seed)
            w = np.array([2.0, 1.0])
            ifc = dw.dl_to_if_userwise(dl, ch, noise, w, ref_budget, tol=1e-12)
            assert (mse.wsmse_if(ifc, ch, np.ones(2), granularity="user")
                    <= mse.wsmse_dl(dl, ch, noise, w, granularity="user") + 1e-12)
            refreshed = mse.with_mmse_decoder(ifc, ch)
            back, _ = dw.if_to_dl_userwise(refreshed, ch, noise, w, ref_budget)
            per_a, _, per_u, _ = mse.powers(back.B, back.streams)
            assert np.all(per_a <= ref_budget.per_antenna + 1e-9)
            assert np.all(per_u <= ref_budget.per_user + 1e-9)

    def test_entrywise_forward_inequality_and_caps(self, ref_budget):
        for seed in range(4):
            dl, ch, noise = random_feasible_dl(50 + seed)
            # the forward bound needs a source inside the entry caps too
            over = np.max(np.abs(dl.B.T) ** 2 / ref_budget.entrywise)
            b = dl.B * np.sqrt(0.9 / over)
            dl = mse.DownlinkTransceiver(
                b, mse.mmse_receiver_dl(b, ch, noise, dl.streams))
            w = np.ones(4)
            ifc = dw.dl_to_if_entrywise(dl, ch, noise, w, ref_budget, tol=1e-12)
            assert (mse.wsmse_if(ifc, ch, w)
                    <= mse.wsmse_dl(dl, ch, noise, w) + 1e-12)
            refreshed = mse.with_mmse_decoder(ifc, ch)
            back, _ = dw.if_to_dl_entrywise(refreshed, ch, noise, w, ref_budget)
            # entry cap applies per (antenna, stream) magnitude
            assert np.all(np.abs(back.B) ** 2 <= ref_budget.entrywise.T + 1e-9)


class TestTotalPowerTransfer:
    def test_saturated_roundtrip_is_identity(self):
        dl, ch, noise = random_feasible_dl(60)
        w = np.array([1.0, 1.0, 2.0, 2.0])
        # equality of the two objectives needs the full budget spent
        scale = np.sqrt(10.0 / (np.abs(dl.B) ** 2).sum())
        full = mse.DownlinkTransceiver(scale * dl.B, dl.W)
        ifc = dw.total_power_transfer_wsmse(full, ch, noise, w, 10.0, "dl_to_if")
        assert ifc.noise_mode == "identity"
        assert mse.wsmse_if(ifc, ch, np.ones(4)) == pytest.approx(
            mse.wsmse_dl(full, ch, noise, w), rel=1e-11)
        back, beta = dw.total_power_transfer_wsmse(ifc, ch, noise, w, 10.0,
                                                   "if_to_dl")
        np.testing.assert_allclose(back.B, full.B, rtol=1e-10, atol=1e-13)
        assert mse.wsmse_dl(back, ch, noise, w) == pytest.approx(
            mse.wsmse_dl(full, ch, noise, w), rel=1e-11)

    def test_underbudget_forward_improves_and_reverse_saturates(self):
        dl, ch, noise = random_feasible_dl(62)
        w = np.ones(4)
        ifc = dw.total_power_transfer_wsmse(dl, ch, noise, w, 10.0, "dl_to_if")
        assert (mse.wsmse_if(ifc, ch, w)
                <= mse.wsmse_dl(dl, ch, noise, w) + 1e-12)
        refreshed = mse.with_mmse_decoder(ifc, ch)
        back, _ = dw.total_power_transfer_wsmse(refreshed, ch, noise, w, 10.0,
                                                "if_to_dl")
        _, _, _, total = mse.powers(back.B, back.streams)
        assert total == pytest.approx(10.0, rel=1e-12)
        assert (mse.wsmse_dl(back, ch, noise, w)
                <= mse.wsmse_dl(dl, ch, noise, w) + 1e-12)

    def test_unknown_direction(self):
        dl, ch, noise = random_feasible_dl(61)
        with pytest.raises(ValueError):
            dw.total_power_transfer_wsmse(dl, ch, noise, np.ones(4), 10.0,
                                          "sideways")
