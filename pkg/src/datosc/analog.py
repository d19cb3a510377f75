"""Linear analog branch: power-weighted coefficient transmission and MMSE decoding.

Coefficients are packed two per complex use (I/Q). Power is accounted per
real dimension: per_use_power below is the average power assigned to one
packed coefficient, i.e. half of the complex per-use budget. Gains follow
g_i proportional to prior_var_i^(-1/4), the minimum-total-MSE linear
allocation for independent Gaussian coefficients, normalized so the
expected frame power over the source ensemble meets the budget exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelState
from .codec import SemanticFeature, synthesize_full
from .errors import AllocationError, ParameterError


@dataclass(frozen=True)
class AnalogFrame:
    symbols: np.ndarray     # (N_a,) complex, I/Q-packed scaled coefficients
    gains: np.ndarray       # (k,) per-coefficient scaling g_i > 0
    indices: np.ndarray     # (k,) positions in the full coefficient vector
    prior_vars: np.ndarray  # (k,) priors the gains were built from
    n_full: int             # full coefficient dimension n
    n_uses: int


@dataclass(frozen=True)
class Ieo:
    """Intermediate estimates: MMSE coefficient values and posterior variances."""

    est: np.ndarray
    err_var: np.ndarray


def analog_gains(prior_vars: np.ndarray, per_use_power: float) -> np.ndarray:
    """g_i = c * prior_var_i^(-1/4) with sum(g_i^2 prior_var_i) = budget * k."""
    prior = np.asarray(prior_vars, dtype=np.float64)
    if np.any(prior <= 0):
        raise ParameterError("prior variances must be positive")
    if per_use_power <= 0:
        raise ParameterError("per-use power must be positive")
    shape = prior ** -0.25
    energy = np.sum(shape * shape * prior)
    c = np.sqrt(per_use_power * prior.size / energy)
    return c * shape


def pack_iq(values: np.ndarray) -> np.ndarray:
    """Pair consecutive reals into complex uses; odd length pads one zero."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] % 2:
        pad = np.zeros(v.shape[:-1] + (1,))
        v = np.concatenate([v, pad], axis=-1)
    return v[..., 0::2] + 1j * v[..., 1::2]


def unpack_iq(symbols: np.ndarray, k: int) -> np.ndarray:
    s = np.asarray(symbols, dtype=np.complex128)
    flat = np.empty(s.shape[:-1] + (2 * s.shape[-1],))
    flat[..., 0::2] = s.real
    flat[..., 1::2] = s.imag
    return flat[..., :k]


def encode_analog(
    feature: SemanticFeature, per_use_power: float, n_uses: int | None = None
) -> AnalogFrame:
    """Scale and I/Q-pack the feature; n_uses defaults to ceil(k/2)."""
    k = feature.k
    if n_uses is None:
        n_uses = -(-k // 2)
    if k > 2 * n_uses:
        raise AllocationError(f"{k} coefficients exceed {n_uses} complex uses")
    gains = analog_gains(feature.prior_vars, per_use_power)
    return AnalogFrame(
        symbols=pack_iq(gains * feature.coeffs),
        gains=gains,
        indices=feature.indices,
        prior_vars=feature.prior_vars,
        n_full=feature.n,
        n_uses=n_uses,
    )


def mmse_estimate(
    observations: np.ndarray,
    gains: np.ndarray,
    prior_vars: np.ndarray,
    h_sq: float | np.ndarray,
    noise_var_dim: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-coefficient MMSE estimate and posterior error variance.

    observations are the real matched-filter outputs Re/Im of conj(h)*y per
    packed dimension; the equivalent scalar model is obs = |h|^2 g x + noise
    with noise variance |h|^2 * noise_var_dim.
    """
    denom = gains * gains * h_sq * prior_vars + noise_var_dim
    est = gains * prior_vars * observations / denom
    err_var = prior_vars * noise_var_dim / denom
    return est, err_var


def mmse_error_vars(
    gains: np.ndarray,
    prior_vars: np.ndarray,
    h_sq: float | np.ndarray,
    noise_var_dim: float,
) -> np.ndarray:
    """Closed-form posterior variances without observations (model use)."""
    g2 = np.asarray(gains) ** 2
    return prior_vars * noise_var_dim / (g2 * np.asarray(h_sq) * prior_vars + noise_var_dim)


def decode_analog(
    received: np.ndarray, state: ChannelState, frame: AnalogFrame
) -> tuple[Ieo, np.ndarray]:
    """MMSE-decode one analog frame.

    Returns the intermediate estimates (per-coefficient value and posterior
    variance) and the ultimate block estimate, the inverse transform with
    zeros at indices the analog branch did not carry.
    """
    k = len(frame.gains)
    h_sq = abs(state.h) ** 2
    matched = np.conj(state.h) * np.asarray(received, dtype=np.complex128)
    obs = unpack_iq(matched, k)
    est, err_var = mmse_estimate(
        obs, frame.gains, frame.prior_vars, h_sq, state.noise_var / 2.0
    )
    full = np.zeros(frame.n_full)
    full[frame.indices] = est
    ueo = synthesize_full(full)
    return Ieo(est=est, err_var=err_var), ueo


def extend_ieo(ieo: Ieo, indices: np.ndarray, full_prior_vars: np.ndarray) -> Ieo:
    """Spread an IEO over all n coefficients; indices the analog branch never
    carried fall back to the prior (estimate 0, error variance = prior)."""
    n = len(full_prior_vars)
    est = np.zeros(n)
    err = np.asarray(full_prior_vars, dtype=np.float64).copy()
    est[indices] = ieo.est
    err[indices] = ieo.err_var
    return Ieo(est=est, err_var=err)
