"""Shared builders for the test suite.

Channels and reference states are deterministic in the seed so every test
failure is reproducible from its parametrization alone.
"""

import numpy as np
import pytest

from mimodual import model, mse, solver


@pytest.fixture(scope="session")
def ref_config():
    return model.reference_config()


@pytest.fixture(scope="session")
def ref_budget():
    return model.reference_budget()


def make_instance(seed, snr_db=10.0, config=None, p_max=10.0):
    """Channels plus white noise at the given SNR for the reference system."""
    config = config or model.reference_config()
    ch = model.generate_channels(config, seed)
    noise = model.noise_for_snr(config, p_max, snr_db)
    return ch, noise


def random_feasible_dl(seed, config=None, budget=None, fill=0.9):
    """Random precoder scaled inside every cap family, with MMSE receivers."""
    config = config or model.reference_config()
    budget = budget or model.reference_budget()
    ch, noise = make_instance(seed, config=config)
    rng = model.rng_for(seed, model.ORACLE_STREAM, 90)
    s = sum(config.streams)
    b = (rng.standard_normal((config.n_tx, s))
         + 1j * rng.standard_normal((config.n_tx, s))) / np.sqrt(2.0)
    per_a, per_s, per_u, _ = mse.powers(b, config.streams)
    scale = min(np.min(budget.per_antenna / per_a),
                np.min(budget.per_symbol / per_s),
                np.min(budget.per_user / per_u))
    b = b * np.sqrt(fill * scale)
    w = mse.mmse_receiver_dl(b, ch, noise, config.streams)
    return mse.DownlinkTransceiver(b, w), ch, noise


def problem(pid, budget_mode="combined", streams=(2, 2)):
    """ProblemSpec with unit weights at the right granularity."""
    n = len(streams) if pid in ("P2", "P4") else sum(streams)
    mode = "entrywise" if pid == "P5" else budget_mode
    return solver.ProblemSpec(pid, np.ones(n), budget_mode=mode,
                              streams=streams)
