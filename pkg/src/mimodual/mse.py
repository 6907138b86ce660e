"""MSE algebra for the downlink and its dual interference channel.

Symbol and user MSEs, weighted sums, MMSE receivers, power accounting, and
the MSE-SINR identity used by the rate-oriented balancing problem.  Every
function here is pure; transceivers are immutable value objects.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "NumericalError",
    "DownlinkTransceiver",
    "InterferenceTransceiver",
    "MseReport",
    "real_part",
    "symbol_mse_dl",
    "user_mse_dl",
    "wsmse_dl",
    "symbol_mse_if",
    "user_mse_if",
    "wsmse_if",
    "mmse_receiver_dl",
    "mmse_receiver_if",
    "powers",
    "mse_sinr_identity",
    "mse_report_dl",
    "with_mmse_decoder",
    "herm_solve",
    "interference_gram",
]


class NumericalError(RuntimeError):
    """A theoretically-real or finite quantity came out numerically broken."""


def real_part(value, what="value"):
    """Cast a theoretically-real scalar to float, policing the imaginary dust."""
    value = complex(value)
    if abs(value.imag) > 1e-10 * (1.0 + abs(value.real)):
        raise NumericalError(f"{what} should be real, got imaginary part {value.imag:.3e}")
    return value.real


def herm_solve(a_mat, b_mat):
    """Solve a Hermitian positive-definite system via Cholesky."""
    return cho_solve(cho_factor(a_mat, lower=True, check_finite=False), b_mat,
                     check_finite=False)


@dataclass(frozen=True)
class DownlinkTransceiver:
    """BS precoder B (N x S) plus per-user decoder blocks W_k (M_k x S_k)."""

    B: np.ndarray
    W: tuple

    def __post_init__(self):
        b = np.asarray(self.B, dtype=complex)
        w = tuple(np.asarray(wk, dtype=complex) for wk in self.W)
        if b.ndim != 2 or any(wk.ndim != 2 for wk in w):
            raise ValueError("precoder and decoders must be matrices")
        if sum(wk.shape[1] for wk in w) != b.shape[1]:
            raise ValueError("decoder stream count does not match precoder columns")
        if not np.all(np.isfinite(b)) or any(not np.all(np.isfinite(wk)) for wk in w):
            raise ValueError("transceiver entries must be finite")
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "W", w)

    @property
    def streams(self):
        return tuple(wk.shape[1] for wk in self.W)

    @property
    def offsets(self):
        return np.concatenate(([0], np.cumsum(self.streams)))

    def column(self, k, s):
        return int(self.offsets[k] + s)

    def user_block(self, k):
        o = self.offsets
        return self.B[:, o[k]:o[k + 1]]


@dataclass(frozen=True)
class InterferenceTransceiver:
    """Dual-channel state: per-user precoders V_k, shared decoder T.

    The receiver noise of stream (k,s) is the diagonal matrix
    diag(antenna_noise) + stream_noise[.]*I, where stream_noise is indexed
    per stream or per user depending on noise_mode; entrywise mode stores a
    full (S x N) diagonal table instead, and identity mode fixes the noise
    to I (total-power duality).  input_var holds the symbol variances,
    scale the precoder scaling of the originating transfer (scalar for
    WSMSE modes, per-stream vector for min-max modes).
    """

    V: tuple
    T: np.ndarray
    antenna_noise: np.ndarray
    stream_noise: np.ndarray
    input_var: np.ndarray
    scale: object
    noise_mode: str = "per_stream"
    entry_noise: np.ndarray = None

    def __post_init__(self):
        v = tuple(np.asarray(vk, dtype=complex) for vk in self.V)
        t = np.asarray(self.T, dtype=complex)
        n_streams = sum(vk.shape[1] for vk in v)
        n = t.shape[0]
        if t.shape[1] != n_streams:
            raise ValueError("decoder column count does not match precoder streams")
        aw = np.asarray(self.antenna_noise, dtype=float)
        sw = np.asarray(self.stream_noise, dtype=float)
        zeta = np.asarray(self.input_var, dtype=float)
        if zeta.shape != (n_streams,) or np.any(zeta <= 0):
            raise ValueError("input variances must be strictly positive, one per stream")
        if self.noise_mode in ("per_stream", "per_user"):
            want = n_streams if self.noise_mode == "per_stream" else len(v)
            if aw.shape != (n,) or np.any(aw <= 0):
                raise ValueError("antenna noise weights must be strictly positive length N")
            if sw.shape != (want,) or np.any(sw <= 0):
                raise ValueError(f"stream noise weights must be strictly positive length {want}")
        elif self.noise_mode == "entrywise":
            en = np.asarray(self.entry_noise, dtype=float)
            if en.shape != (n_streams, n) or np.any(en <= 0):
                raise ValueError("entrywise noise table must be strictly positive S x N")
            object.__setattr__(self, "entry_noise", en)
        elif self.noise_mode == "identity":
            aw = np.ones(n)
            sw = np.zeros(n_streams)
        else:
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")
        scale = self.scale
        scale = float(scale) if np.ndim(scale) == 0 else np.asarray(scale, dtype=float)
        if np.any(np.asarray(scale) <= 0):
            raise ValueError("transfer scale must be strictly positive")
        object.__setattr__(self, "V", v)
        object.__setattr__(self, "T", t)
        object.__setattr__(self, "antenna_noise", aw)
        object.__setattr__(self, "stream_noise", sw)
        object.__setattr__(self, "input_var", zeta)
        object.__setattr__(self, "scale", scale)

    @property
    def streams(self):
        return tuple(vk.shape[1] for vk in self.V)

    @property
    def offsets(self):
        return np.concatenate(([0], np.cumsum(self.streams)))

    @property
    def stream_users(self):
        return np.repeat(np.arange(len(self.V)), self.streams)

    def column(self, k, s):
        return int(self.offsets[k] + s)

    def noise_diagonal(self, l):
        """Diagonal of the stream-l receiver noise matrix, length N."""
        if self.noise_mode == "per_stream":
            return self.antenna_noise + self.stream_noise[l]
        if self.noise_mode == "per_user":
            return self.antenna_noise + self.stream_noise[self.stream_users[l]]
        if self.noise_mode == "entrywise":
            return self.entry_noise[l]
        return np.ones(self.T.shape[0])


def interference_gram(ifc, ch):
    """Covariance of the superimposed dual-channel transmissions, N x N.

    Rank-S accumulation sum_l input_var[l] (H_l v_l)(H_l v_l)^H, rebuilt per
    call because V changes every outer iteration.
    """
    hv = np.hstack([ch.per_user[k] @ vk for k, vk in enumerate(ifc.V)])
    return (hv * ifc.input_var) @ hv.conj().T


def symbol_mse_dl(dl, ch, noise, k, s):
    """Downlink MSE of user k's stream s under unit-variance symbols."""
    h_k = ch.per_user[k]
    w = dl.W[k][:, s]
    b = dl.B[:, dl.column(k, s)]
    hw = h_k @ w
    sig = dl.B.conj().T @ hw
    quad = real_part(np.vdot(sig, sig) + np.vdot(w, noise.blocks[k] @ w), "downlink MSE quad")
    cross = np.vdot(hw, b)
    return quad - 2.0 * cross.real + 1.0


def user_mse_dl(dl, ch, noise, k):
    """Downlink MSE of user k, trace form (equals the sum over its streams)."""
    h_k = ch.per_user[k]
    w_k = dl.W[k]
    hw = h_k @ w_k
    sig = dl.B.conj().T @ hw
    quad = real_part(
        np.sum(np.abs(sig) ** 2) + np.sum(w_k.conj() * (noise.blocks[k] @ w_k)),
        "downlink user-MSE quad",
    )
    cross = np.sum(hw.conj() * dl.user_block(k))
    return quad - 2.0 * cross.real + w_k.shape[1]


def wsmse_dl(dl, ch, noise, weights, granularity="symbol"):
    """Weighted sum of downlink MSEs at symbol or user granularity."""
    weights = np.asarray(weights, dtype=float)
    if granularity == "symbol":
        vals = np.array([
            symbol_mse_dl(dl, ch, noise, k, s)
            for k in range(len(dl.W)) for s in range(dl.streams[k])
        ])
    elif granularity == "user":
        vals = np.array([user_mse_dl(dl, ch, noise, k) for k in range(len(dl.W))])
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    if weights.shape != vals.shape:
        raise ValueError("weight length does not match granularity")
    return float(weights @ vals)


def symbol_mse_if(ifc, ch, k, s):
    """Dual interference-channel MSE of the (k, s) stream."""
    l = ifc.column(k, s)
    t = ifc.T[:, l]
    zeta = ifc.input_var[l]
    gram = interference_gram(ifc, ch)
    quad = real_part(
        np.vdot(t, gram @ t) + np.vdot(t * ifc.noise_diagonal(l), t),
        "interference MSE quad",
    )
    cross = zeta * np.vdot(t, ch.per_user[k] @ ifc.V[k][:, s])
    return quad - 2.0 * cross.real + zeta


def user_mse_if(ifc, ch, k):
    """Dual-channel MSE of user k (sum of its stream MSEs)."""
    return float(sum(symbol_mse_if(ifc, ch, k, s) for s in range(ifc.streams[k])))


def wsmse_if(ifc, ch, weights, granularity="symbol"):
    """Weighted sum of dual-channel MSEs at symbol or user granularity."""
    weights = np.asarray(weights, dtype=float)
    if granularity == "symbol":
        vals = np.array([
            symbol_mse_if(ifc, ch, k, s)
            for k in range(len(ifc.V)) for s in range(ifc.streams[k])
        ])
    elif granularity == "user":
        vals = np.array([user_mse_if(ifc, ch, k) for k in range(len(ifc.V))])
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    if weights.shape != vals.shape:
        raise ValueError("weight length does not match granularity")
    return float(weights @ vals)


def mmse_receiver_dl(b_mat, ch, noise, streams):
    """Per-user MMSE decoder blocks for precoder b_mat.

    streams gives the per-user stream counts that partition the precoder
    columns (not recoverable from the matrix itself).
    """
    b_mat = np.asarray(b_mat, dtype=complex)
    offsets = np.concatenate(([0], np.cumsum(streams)))
    blocks = []
    for k, h_k in enumerate(ch.per_user):
        recv = h_k.conj().T @ b_mat
        cov = recv @ recv.conj().T + noise.blocks[k]
        blocks.append(herm_solve(cov, recv[:, offsets[k]:offsets[k + 1]]))
    return tuple(blocks)


def mmse_receiver_if(ifc, ch, k, s):
    """Dual-channel MMSE decoder for the (k, s) stream at the stored noise."""
    l = ifc.column(k, s)
    diag = ifc.noise_diagonal(l)
    if np.any(diag <= 0):
        raise ValueError("receiver noise diagonal must be strictly positive")
    cov = interference_gram(ifc, ch) + np.diag(diag.astype(complex))
    return herm_solve(cov, ch.per_user[k] @ ifc.V[k][:, s]) * ifc.input_var[l]


def with_mmse_decoder(ifc, ch):
    """Copy of a dual-channel state with every decoder column replaced by its MMSE.

    The shared transmission covariance is assembled once; each stream then
    solves against its own diagonal noise.
    """
    hv = np.hstack([ch.per_user[k] @ vk for k, vk in enumerate(ifc.V)])
    gram = (hv * ifc.input_var) @ hv.conj().T
    n = gram.shape[0]
    t_new = np.empty_like(ifc.T)
    for l in range(t_new.shape[1]):
        cov = gram + np.diag(ifc.noise_diagonal(l).astype(complex))
        t_new[:, l] = herm_solve(cov, hv[:, l]) * ifc.input_var[l]
    return replace(ifc, T=t_new)


def powers(b_mat, streams):
    """Power accounting of a precoder: per antenna, per symbol, per user, total."""
    b_mat = np.asarray(b_mat, dtype=complex)
    mag = np.abs(b_mat) ** 2
    per_antenna = mag.sum(axis=1)
    per_symbol = mag.sum(axis=0)
    offsets = np.concatenate(([0], np.cumsum(streams)))
    per_user = np.array([
        per_symbol[offsets[k]:offsets[k + 1]].sum() for k in range(len(streams))
    ])
    return per_antenna, per_symbol, per_user, float(per_symbol.sum())


def mse_sinr_identity(dl, ch, noise, k, s):
    """MSE, per-stream SINR, and the residual of mse = 1/(1 + sinr).

    The residual is only guaranteed small when W is the MMSE receiver.
    """
    h_k = ch.per_user[k]
    w = dl.W[k][:, s]
    b = dl.B[:, dl.column(k, s)]
    hb_all = h_k.conj().T @ dl.B
    hb = h_k.conj().T @ b
    signal = np.vdot(w, hb)
    interf = hb_all @ (hb_all.conj().T @ w) - hb * np.vdot(hb, w) + noise.blocks[k] @ w
    denom = real_part(np.vdot(w, interf), "SINR denominator")
    sinr = float(np.abs(signal) ** 2 / denom)
    mse = symbol_mse_dl(dl, ch, noise, k, s)
    return mse, sinr, abs(mse - 1.0 / (1.0 + sinr))


@dataclass(frozen=True)
class MseReport:
    """Aggregated downlink MSEs plus the weighted objective views."""

    symbol_mse: np.ndarray
    user_mse: np.ndarray
    wsmse: float
    max_weighted: float
    argmax: int


def mse_report_dl(dl, ch, noise, weights, granularity, balance_weights=None):
    """Report of all MSEs with the weighted sum under (weights, granularity).

    max_weighted is the largest balance-weighted MSE at the same granularity;
    balance weights default to one.
    """
    n_users = len(dl.W)
    symbol = np.array([
        symbol_mse_dl(dl, ch, noise, k, s)
        for k in range(n_users) for s in range(dl.streams[k])
    ])
    offsets = np.concatenate(([0], np.cumsum(dl.streams)))
    user = np.array([symbol[offsets[k]:offsets[k + 1]].sum() for k in range(n_users)])
    vals = symbol if granularity == "symbol" else user
    weights = np.asarray(weights, dtype=float)
    if weights.shape != vals.shape:
        raise ValueError("weight length does not match granularity")
    balance = np.ones_like(vals) if balance_weights is None else np.asarray(balance_weights, dtype=float)
    weighted = balance * vals
    arg = int(np.argmax(weighted))
    return MseReport(symbol, user, float(weights @ vals), float(weighted[arg]), arg)
