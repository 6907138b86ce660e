"""MSE duality toolkit for multiuser MIMO downlink transceiver design.

The package solves weighted-sum and min-max MSE precoder/receiver designs
under per-antenna, per-symbol, per-user, entrywise, or total power caps by
iterating between the downlink and its dual interference channel.  Submodules:

``model``
    System dimensions, channel generation, noise models, power budgets.
``mse``
    Transceiver containers, MSE evaluation, MMSE receivers on both links.
``duality_wsmse``
    Weighted-sum-MSE conversions between the two links, including the
    noise-weight fixed point that makes the reverse transfer cap-tight.
``duality_minmax``
    Min-max conversions via the switched eigen-iteration and the column
    stochastic matrix certificates behind them.
``gp``
    Stream-power re-allocation at fixed beam directions by a log-domain
    barrier method with a grid oracle for small instances.
``solver``
    The outer loops tying transfer, power allocation, and receiver updates
    together, with per-iteration traces.
``verify``
    Independent oracles: Monte-Carlo MSE sampling, roundtrip preservation,
    matrix-structure checks, fixed-point and GP cross-validation.
``cli``
    Experiment runner writing deterministic CSV artifacts.

Set ``MIMODUAL_NO_NUMBA=1`` before import to run the pure-numpy kernel path.
"""

from . import cli, duality_minmax, duality_wsmse, gp, model, mse, solver, verify
from ._kernels import NUMBA_DISABLED
from .model import (
    ChannelSet,
    NoiseModel,
    PowerBudget,
    SystemConfig,
    default_noise,
    generate_channels,
    noise_for_snr,
    reference_budget,
    reference_config,
    rng_for,
    sigma_av_db,
    snr_to_sigma,
)
from .mse import DownlinkTransceiver, InterferenceTransceiver, NumericalError
from .solver import (
    IterationTrace,
    MonotonicityError,
    ProblemSpec,
    SolveOptions,
    evaluate,
    init_transceiver,
    rates_from_mse,
    run_algorithm1,
    run_algorithm2,
)
from .verify import OracleReport

__version__ = "0.1.0"

__all__ = [
    "ChannelSet",
    "DownlinkTransceiver",
    "InterferenceTransceiver",
    "IterationTrace",
    "MonotonicityError",
    "NoiseModel",
    "NumericalError",
    "NUMBA_DISABLED",
    "OracleReport",
    "PowerBudget",
    "ProblemSpec",
    "SolveOptions",
    "SystemConfig",
    "cli",
    "default_noise",
    "duality_minmax",
    "duality_wsmse",
    "evaluate",
    "generate_channels",
    "gp",
    "init_transceiver",
    "model",
    "mse",
    "noise_for_snr",
    "rates_from_mse",
    "reference_budget",
    "reference_config",
    "rng_for",
    "run_algorithm1",
    "run_algorithm2",
    "sigma_av_db",
    "snr_to_sigma",
    "solver",
    "verify",
]
