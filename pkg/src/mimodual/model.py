"""Problem-instance definition: dimensions, channels, noise, power caps.

A base station with N transmit antennas sends S = sum(S_k) independent
symbol streams to K receivers; receiver k has M_k antennas and decodes its
own S_k streams linearly.  All powers are in milliwatts internally; decibel
conversions happen only at the CLI boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SystemConfig",
    "ChannelSet",
    "NoiseModel",
    "PowerBudget",
    "rng_for",
    "generate_channels",
    "default_noise",
    "noise_for_snr",
    "snr_to_sigma",
    "sigma_to_snr",
    "sigma_av_db",
    "per_user_variances",
    "reference_config",
    "reference_budget",
]

# RNG stream tags.  Channel draws and verification-oracle draws come from
# disjoint streams so they can never alias.
CHANNEL_STREAM = 0
ORACLE_STREAM = 1


def rng_for(seed, stream, *subkey):
    """Generator for (seed, stream, *subkey), independent of call order.

    Built on SeedSequence spawn keys, so realization r of a sweep gets the
    same draws no matter which worker runs it or in what order.
    """
    key = (int(stream),) + tuple(int(k) for k in subkey)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


@dataclass(frozen=True)
class SystemConfig:
    """Dimensions and weight vectors of one multiuser downlink instance."""

    n_tx: int                      # BS antennas N
    rx_antennas: tuple             # M_k per user
    streams: tuple                 # S_k per user
    symbol_weights: np.ndarray = None       # per-symbol WSMSE weights, length S
    user_weights: np.ndarray = None         # per-user WSMSE weights, length K
    balance_weights: np.ndarray = None      # per-symbol min-max weights, length S
    user_balance_weights: np.ndarray = None  # per-user min-max weights, length K

    def __post_init__(self):
        object.__setattr__(self, "rx_antennas", tuple(int(m) for m in self.rx_antennas))
        object.__setattr__(self, "streams", tuple(int(s) for s in self.streams))
        if self.n_tx < 1 or len(self.rx_antennas) != len(self.streams):
            raise ValueError("inconsistent dimensions")
        if any(m < 1 for m in self.rx_antennas):
            raise ValueError("receive antenna counts must be >= 1")
        for m_k, s_k in zip(self.rx_antennas, self.streams):
            if not 1 <= s_k <= m_k:
                raise ValueError("need 1 <= S_k <= M_k for every user")
        if self.total_streams > self.n_tx:
            raise ValueError("total stream count exceeds transmit antennas")
        for name, size in (
            ("symbol_weights", self.total_streams),
            ("user_weights", self.n_users),
            ("balance_weights", self.total_streams),
            ("user_balance_weights", self.n_users),
        ):
            w = getattr(self, name)
            w = np.ones(size) if w is None else np.asarray(w, dtype=float)
            if w.shape != (size,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ValueError(f"{name} must be {size} strictly positive finite entries")
            object.__setattr__(self, name, w)

    @property
    def n_users(self):
        return len(self.streams)

    @property
    def total_streams(self):
        return int(sum(self.streams))

    @property
    def total_rx(self):
        return int(sum(self.rx_antennas))

    @property
    def stream_users(self):
        """Flat stream index -> owning user index (users outer, streams inner)."""
        return np.repeat(np.arange(self.n_users), self.streams)

    @property
    def stream_offsets(self):
        """Start offset of each user's stream block in the flat ordering."""
        return np.concatenate(([0], np.cumsum(self.streams)))

    def stream_index(self, k, s):
        if not 0 <= s < self.streams[k]:
            raise IndexError("stream index out of range for user")
        return int(self.stream_offsets[k] + s)


@dataclass(frozen=True)
class ChannelSet:
    """Per-user channel matrices H_k (N x M_k); H_k^H is the BS->MS link."""

    per_user: tuple

    def __post_init__(self):
        blocks = tuple(np.asarray(h, dtype=complex) for h in self.per_user)
        if not blocks or any(h.ndim != 2 for h in blocks):
            raise ValueError("channels must be a nonempty list of matrices")
        n = blocks[0].shape[0]
        if any(h.shape[0] != n for h in blocks):
            raise ValueError("all channel blocks must share the antenna dimension")
        if any(not np.all(np.isfinite(h)) for h in blocks):
            raise ValueError("channel entries must be finite")
        object.__setattr__(self, "per_user", blocks)

    @property
    def n_tx(self):
        return self.per_user[0].shape[0]

    @property
    def stacked(self):
        """Horizontal concatenation [H_1 ... H_K], N x M."""
        return np.hstack(self.per_user)


@dataclass(frozen=True)
class NoiseModel:
    """Per-user receive noise covariances, Hermitian positive definite."""

    blocks: tuple

    def __post_init__(self):
        mats = tuple(np.asarray(r, dtype=complex) for r in self.blocks)
        for r in mats:
            if r.ndim != 2 or r.shape[0] != r.shape[1]:
                raise ValueError("noise covariances must be square")
            if np.max(np.abs(r - r.conj().T)) > 1e-12 * max(1.0, np.max(np.abs(r))):
                raise ValueError("noise covariance is not Hermitian")
            if np.min(np.linalg.eigvalsh(0.5 * (r + r.conj().T))) <= 0:
                raise ValueError("noise covariance must be positive definite")
        object.__setattr__(self, "blocks", mats)

    @property
    def block_diag(self):
        m = sum(r.shape[0] for r in self.blocks)
        out = np.zeros((m, m), dtype=complex)
        i = 0
        for r in self.blocks:
            j = i + r.shape[0]
            out[i:j, i:j] = r
            i = j
        return out


@dataclass(frozen=True)
class PowerBudget:
    """Active power caps in mW.  `mode` picks which caps a solve consults.

    combined  - per-antenna plus per-symbol (symbol-granularity problems) or
                per-user (user-granularity problems) caps
    total     - only the total BS power cap
    entrywise - per-symbol-per-antenna caps only
    """

    per_antenna: np.ndarray = None   # length N
    per_symbol: np.ndarray = None    # length S
    per_user: np.ndarray = None      # length K
    entrywise: np.ndarray = None     # S x N, optional
    total: float = None              # P_max, optional
    mode: str = "combined"

    def __post_init__(self):
        if self.mode not in ("combined", "total", "entrywise"):
            raise ValueError(f"unknown budget mode {self.mode!r}")
        for name in ("per_antenna", "per_symbol", "per_user", "entrywise"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if not np.all(np.isfinite(v)) or np.any(v <= 0):
                    raise ValueError(f"{name} caps must be strictly positive")
                object.__setattr__(self, name, v)
        if self.total is not None and not self.total > 0:
            raise ValueError("total power cap must be strictly positive")

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise ValueError(f"budget is missing the {name} cap required by this mode")


def generate_channels(config, seed, realization=0):
    """Draw i.i.d. CN(0,1) channel blocks, deterministic in (seed, realization)."""
    rng = rng_for(seed, CHANNEL_STREAM, realization)
    blocks = []
    for m_k in config.rx_antennas:
        re = rng.standard_normal((config.n_tx, m_k))
        im = rng.standard_normal((config.n_tx, m_k))
        blocks.append((re + 1j * im) / np.sqrt(2.0))
    return ChannelSet(tuple(blocks))


def default_noise(config, sigma1_sq, ratios=None):
    """White per-user noise R_nk = ratio_k * sigma1_sq * I_{M_k}.

    Default ratios are 1, 2, ..., K, which for two users gives the second
    receiver twice the noise power of the first.
    """
    if not sigma1_sq > 0:
        raise ValueError("noise variance must be strictly positive")
    if ratios is None:
        ratios = 1.0 + np.arange(config.n_users, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (config.n_users,) or np.any(ratios <= 0):
        raise ValueError("need one strictly positive ratio per user")
    blocks = tuple(
        ratios[k] * sigma1_sq * np.eye(config.rx_antennas[k], dtype=complex)
        for k in range(config.n_users)
    )
    return NoiseModel(blocks)


def snr_to_sigma(p_max, k_users, snr_db):
    """Average noise variance giving SNR = P_max / (K * sigma_av^2)."""
    if not p_max > 0 or k_users < 1:
        raise ValueError("need p_max > 0 and k_users >= 1")
    return p_max / (k_users * 10.0 ** (snr_db / 10.0))


def sigma_to_snr(p_max, k_users, sigma_av_sq):
    """Inverse of snr_to_sigma."""
    return 10.0 * np.log10(p_max / (k_users * sigma_av_sq))


def sigma_av_db(sigma_av_sq):
    """Average noise variance in dB relative to 1 mW."""
    return 10.0 * np.log10(sigma_av_sq / 1.0)


def per_user_variances(sigma_av_sq, ratios):
    """Split an average variance into per-user variances preserving the ratios."""
    ratios = np.asarray(ratios, dtype=float)
    sigma1_sq = sigma_av_sq / np.mean(ratios)
    return ratios * sigma1_sq


def noise_for_snr(config, p_max, snr_db, ratios=None):
    """White per-user noise at a given SNR.

    The SNR convention divides the total power budget by K times the average
    per-user variance, so the first user's variance is the average divided by
    the mean of the ratios (default ratios 1, ..., K).
    """
    if ratios is None:
        ratios = 1.0 + np.arange(config.n_users, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    sigma_av_sq = snr_to_sigma(p_max, config.n_users, snr_db)
    return default_noise(config, sigma_av_sq / np.mean(ratios), ratios)


def reference_config():
    """Two users, four BS antennas, two antennas and two streams each, unit weights."""
    return SystemConfig(n_tx=4, rx_antennas=(2, 2), streams=(2, 2))


def reference_budget():
    """2.5 mW per antenna and per symbol, 5 mW per user, 10 mW total.

    The entrywise caps split each symbol cap evenly across the four antennas.
    """
    return PowerBudget(
        per_antenna=np.full(4, 2.5),
        per_symbol=np.full(4, 2.5),
        per_user=np.full(2, 5.0),
        entrywise=np.full((4, 4), 0.625),
        total=10.0,
        mode="combined",
    )
