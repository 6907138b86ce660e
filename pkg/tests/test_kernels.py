"""Iteration kernels: semantics against plain-numpy references, and agreement
between the accelerated and fallback backends run in separate processes."""

import json
import os
import subprocess
import sys
import tempfile

import numpy as np
import pytest

from mimodual import _kernels


def ref_fp_map(terms, caps, energy, x, floor):
    # one sweep of the clamped multiplicative update, written independently
    return np.maximum(floor, energy / caps * x * terms / (x @ terms))


class TestFpIterate:
    def test_single_sweep_matches_reference(self):
        rng = np.random.default_rng(5)
        terms = 10.0 ** rng.uniform(-2, 1, 6)
        caps = 10.0 ** rng.uniform(-1, 1, 6)
        x0 = 10.0 ** rng.uniform(-1, 0, 6)
        x, it, resid = _kernels.fp_iterate(terms, caps, 2.0, x0.copy(),
                                           1e-9, 0.0, 1)
        assert it == 1
        np.testing.assert_allclose(x, ref_fp_map(terms, caps, 2.0, x0, 1e-9),
                                   rtol=1e-14)

    def test_winner_take_all_limit(self):
        # with frozen terms the map concentrates the budget on the coordinate
        # maximizing terms/caps: x* = energy/caps there, floor elsewhere
        terms = np.array([1.0, 2.0])
        caps = np.array([1.0, 1.0])
        x0 = np.full(2, 1.0)
        x, it, resid = _kernels.fp_iterate(terms, caps, 2.0, x0, 1e-9,
                                           1e-14, 10000)
        # the floored coordinate feeds the denominator, shifting the winner
        # down by floor * t_other / t_win: tolerance at the floor scale
        np.testing.assert_allclose(x, [1e-9, 2.0], rtol=1e-9)
        assert resid <= 1e-14 * x.max()

    def test_winner_take_all_mixed(self):
        terms = np.array([0.5, 1.5, 0.2, 0.9, 1.1])
        caps = np.array([2.0, 1.0, 0.5, 1.5, 2.5])
        floor = 4e-10
        x, _, _ = _kernels.fp_iterate(terms, caps, 3.0, np.full(5, 0.4),
                                      floor, 1e-14, 10000)
        expect = np.full(5, floor)
        expect[np.argmax(terms / caps)] = 3.0 / caps[np.argmax(terms / caps)]
        np.testing.assert_allclose(x, expect, rtol=1e-8)
        # budget identity up to floor dust
        assert x @ caps == pytest.approx(3.0, rel=1e-8)

    def test_zero_denominator_flagged(self):
        x, it, resid = _kernels.fp_iterate(np.zeros(2), np.ones(2), 1.0,
                                           np.ones(2), 1e-9, 1e-10, 50)
        assert np.isinf(resid)


class TestGroupedIterate:
    def test_single_sweep_matches_reference(self):
        # one sweep = decoders at current weights, then the clamped update
        # with squared decoder row/column norms as terms
        rng = np.random.default_rng(9)
        n, n_streams = 3, 3
        hv = (rng.standard_normal((n, n_streams))
              + 1j * rng.standard_normal((n, n_streams)))
        gram = hv @ hv.conj().T + 0.1 * np.eye(n)
        rhs = hv.copy()
        group = np.array([0, 0, 1], dtype=np.int64)
        caps_a = np.array([1.0, 2.0, 1.5])
        caps_g = np.array([2.0, 1.0])
        aw0 = np.array([0.3, 0.4, 0.5])
        gw0 = np.array([0.2, 0.6])
        energy = 2.5
        aw, gw, t, it, resid = _kernels.noise_weight_iterate_grouped(
            gram, rhs, group, 2, caps_a, caps_g, energy,
            aw0.copy(), gw0.copy(), 1e-10, 0.0, 1)
        t_ref = np.empty_like(rhs)
        for l in range(n_streams):
            diag = np.diag(aw0 + gw0[group[l]])
            t_ref[:, l] = np.linalg.solve(gram + diag, rhs[:, l])
        np.testing.assert_allclose(t, t_ref, rtol=1e-12)
        at = (np.abs(t_ref) ** 2).sum(axis=1)
        gt = np.zeros(2)
        for l in range(n_streams):
            gt[group[l]] += np.abs(t_ref[:, l]) ** 2 @ np.ones(n)
        denom = aw0 @ at + gw0 @ gt
        np.testing.assert_allclose(
            aw, np.maximum(1e-10, energy / caps_a * aw0 * at / denom), rtol=1e-12)
        np.testing.assert_allclose(
            gw, np.maximum(1e-10, energy / caps_g * gw0 * gt / denom), rtol=1e-12)


class TestPosyBatchEval:
    def test_values_gradients_hessians(self):
        rng = np.random.default_rng(3)
        coefs = rng.uniform(0.5, 2.0, 5)
        expo = rng.uniform(-2.0, 2.0, (5, 3))
        starts = np.array([0, 2, 5], dtype=np.int64)
        y = rng.standard_normal(3)
        vals, grads, hess = _kernels.posy_batch_eval(coefs, expo, starts, y)
        for p, (lo, hi) in enumerate([(0, 2), (2, 5)]):
            direct = coefs[lo:hi] @ np.exp(expo[lo:hi] @ y)
            assert vals[p] == pytest.approx(direct, rel=1e-13)
        # finite differences in the log domain
        h = 1e-6
        for i in range(3):
            yp = y.copy()
            yp[i] += h
            ym = y.copy()
            ym[i] -= h
            vp, gp_, _ = _kernels.posy_batch_eval(coefs, expo, starts, yp)
            vm, gm, _ = _kernels.posy_batch_eval(coefs, expo, starts, ym)
            np.testing.assert_allclose(grads[:, i], (vp - vm) / (2 * h),
                                       rtol=2e-6, atol=1e-8)
            np.testing.assert_allclose(hess[:, :, i], (gp_ - gm) / (2 * h),
                                       rtol=2e-5, atol=1e-7)


PROBE = r"""
import json, sys
import numpy as np
from mimodual import _kernels

rng = np.random.default_rng(1234)
out = {"backend": _kernels.backend_name()}

terms = 10.0 ** rng.uniform(-2, 1, 8)
caps = 10.0 ** rng.uniform(-1, 1, 8)
x, it, resid = _kernels.fp_iterate(terms, caps, 3.0, np.full(8, 0.3), 1e-9, 1e-12, 5000)
out["fp"] = x.tolist() + [float(it)]

n, ns = 4, 4
hv = rng.standard_normal((n, ns)) + 1j * rng.standard_normal((n, ns))
gram = (hv @ hv.conj().T + 0.2 * np.eye(n)).astype(complex)
group = np.array([0, 0, 1, 1], dtype=np.int64)
aw, gw, t, it2, r2 = _kernels.noise_weight_iterate_grouped(
    gram, hv.copy(), group, 2, np.full(n, 1.2), np.array([1.0, 2.0]), 2.0,
    np.full(n, 0.4), np.full(2, 0.4), 1e-10, 1e-12, 5000)
out["grouped"] = aw.tolist() + gw.tolist() + [float(np.abs(t).sum()), float(it2)]

ew, te, it3, r3 = _kernels.noise_weight_iterate_entrywise(
    gram, hv.copy(), np.full((ns, n), 0.8), 2.0, np.full((ns, n), 0.1),
    1e-10, 1e-12, 5000)
out["entry"] = ew.ravel().tolist() + [float(np.abs(te).sum()), float(it3)]

coefs = rng.uniform(0.5, 2.0, 6)
expo = rng.uniform(-2.0, 2.0, (6, 3))
starts = np.array([0, 3, 6], dtype=np.int64)
y = rng.standard_normal(3)
vals, grads, hess = _kernels.posy_batch_eval(coefs, expo, starts, y)
out["posy"] = vals.tolist() + grads.ravel().tolist() + hess.ravel().tolist()

json.dump(out, open(sys.argv[1], "w"))
"""


def _run_probe(disable_numba):
    env = dict(os.environ)
    env["MIMODUAL_NO_NUMBA"] = "1" if disable_numba else ""
    with tempfile.NamedTemporaryFile("r", suffix=".json") as fh:
        subprocess.run([sys.executable, "-c", PROBE, fh.name],
                       check=True, env=env, timeout=300)
        return json.load(open(fh.name))


@pytest.mark.slow
def test_backends_agree():
    """The env-selected numpy path and the jit path compute the same numbers.

    Both run the identical source; agreement is required to near machine
    precision (BLAS reduction order may differ inside linalg.solve).
    """
    fast = _run_probe(disable_numba=False)
    slow = _run_probe(disable_numba=True)
    assert slow["backend"] == "numpy"
    for key in ("fp", "grouped", "entry", "posy"):
        a = np.asarray(fast[key])
        b = np.asarray(slow[key])
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12,
                                   err_msg=f"backend mismatch in {key}")


def test_backend_name_reports_env():
    assert _kernels.backend_name() in ("numba", "numpy")
    if _kernels.NUMBA_DISABLED:
        assert _kernels.backend_name() == "numpy"
