"""Shared domain types, entropy/statistics primitives and finite-size helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import ndtri

# Slop tolerated on probability arguments before declaring a domain error;
# rate formulas can land a hair outside [0,1] through float cancellation.
_DOMAIN_SLOP = 1e-12


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


@dataclass(frozen=True)
class ExperimentParams:
    """Fixed device/channel environment, shared by all protocols.

    Intensities and send probabilities are deliberately NOT here; those are
    the optimization variables and live in per-protocol parameter types.
    """

    dark_count_rate: float            # Y0, background/dark count probability per pulse
    detector_efficiency: float        # eta_d in (0, 1]
    misalignment: float               # e_d in [0, 0.5)
    error_correction_efficiency: float  # f >= 1
    total_pulses: float = 1e12        # N
    failure_probability: float = 1e-7  # epsilon for finite-size bounds
    fibre_loss_coeff: float = 0.2     # alpha, dB/km

    def __post_init__(self) -> None:
        if not 0.0 <= self.dark_count_rate <= 1.0:
            raise ValueError(f"dark_count_rate must be in [0,1], got {self.dark_count_rate}")
        if not 0.0 < self.detector_efficiency <= 1.0:
            raise ValueError(f"detector_efficiency must be in (0,1], got {self.detector_efficiency}")
        if not 0.0 <= self.misalignment < 0.5:
            raise ValueError(f"misalignment must be in [0,0.5), got {self.misalignment}")
        if self.error_correction_efficiency < 1.0:
            raise ValueError("error_correction_efficiency must be >= 1")
        if self.total_pulses < 1:
            raise ValueError("total_pulses must be >= 1")
        if not 0.0 < self.failure_probability < 1.0:
            raise ValueError("failure_probability must be in (0,1)")
        if self.fibre_loss_coeff <= 0.0:
            raise ValueError("fibre_loss_coeff must be positive")

    @property
    def gamma(self) -> float:
        """Standard-deviation multiple matching failure_probability."""
        return gamma_from_epsilon(self.failure_probability)


def distance_to_transmittance(distance_km: float, loss_coeff_db_per_km: float = 0.2) -> float:
    """Channel transmittance of a fibre of the given length."""
    if distance_km < 0:
        raise ValueError("distance must be non-negative")
    return 10.0 ** (-loss_coeff_db_per_km * distance_km / 10.0)


def db_to_transmittance(loss_db: float) -> float:
    """Transmittance of a channel with the given total loss in dB."""
    return 10.0 ** (-loss_db / 10.0)


@dataclass(frozen=True)
class ChannelSpec:
    """One channel arm, specified by distance or by transmittance directly.

    ``transmittance`` is the channel-only value; ``system_transmittance``
    folds in the detector efficiency (the product that rate formulas call
    eta_sys).
    """

    transmittance: float
    distance_km: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.transmittance <= 1.0:
            raise ValueError(f"transmittance must be in (0,1], got {self.transmittance}")

    @classmethod
    def from_distance(cls, distance_km: float, params: ExperimentParams) -> "ChannelSpec":
        eta = distance_to_transmittance(distance_km, params.fibre_loss_coeff)
        return cls(transmittance=eta, distance_km=distance_km)

    @classmethod
    def from_db(cls, loss_db: float) -> "ChannelSpec":
        return cls(transmittance=db_to_transmittance(loss_db))

    def system_transmittance(self, params: ExperimentParams) -> float:
        return self.transmittance * params.detector_efficiency


def mismatch(channel_a: ChannelSpec, channel_b: ChannelSpec) -> float:
    """Transmittance ratio x = eta_A / eta_B of two arms."""
    return channel_a.transmittance / channel_b.transmittance


@dataclass(frozen=True)
class ConfidenceBound:
    """An observed value with its statistical upper/lower bounds.

    Fields are scalars in the common case but may hold numpy arrays when a
    whole transmittance grid is bounded in one call.
    """

    observed: Any
    lower: Any
    upper: Any
    gamma: float

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.lower) > np.asarray(self.observed)) or np.any(
            np.asarray(self.observed) > np.asarray(self.upper)
        ):
            raise ValueError(
                f"bounds must bracket the observation: {self.lower} <= {self.observed} <= {self.upper}"
            )

    @classmethod
    def exact(cls, value: float) -> "ConfidenceBound":
        """Degenerate bound for asymptotic (infinite-data) quantities."""
        return cls(observed=value, lower=value, upper=value, gamma=0.0)


@dataclass
class KeyRateResult:
    """A key rate per pulse plus the intermediate quantities that produced it."""

    rate_per_pulse: float
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def clamped(cls, raw_rate, **diagnostics: Any) -> "KeyRateResult":
        """Clamp negative formula output to zero, keeping the raw value visible.

        Works elementwise when `raw_rate` is an array (batched evaluation).
        """
        diagnostics["raw_rate"] = raw_rate
        rate = np.maximum(raw_rate, 0.0)
        if np.ndim(rate) == 0:
            rate = float(rate)
        return cls(rate_per_pulse=rate, diagnostics=diagnostics)


def binary_entropy(x):
    """Binary entropy h2(x) = -x log2 x - (1-x) log2 (1-x), with 0 log 0 = 0.

    Accepts scalars or numpy arrays; raises DomainError outside [0,1]
    (beyond float slop).

    >>> binary_entropy(0.5)
    1.0
    >>> binary_entropy(0.0)
    0.0
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr < -_DOMAIN_SLOP) or np.any(arr > 1.0 + _DOMAIN_SLOP):
        raise DomainError(f"binary_entropy argument outside [0,1]: {x}")
    arr = np.clip(arr, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -arr * np.log2(arr) - (1.0 - arr) * np.log2(1.0 - arr)
    h = np.where((arr == 0.0) | (arr == 1.0), 0.0, h)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(h)
    return h


def gamma_from_epsilon(epsilon: float) -> float:
    """Standard-deviation multiple gamma with two-sided tail probability epsilon.

    Inverts 1 - erf(gamma / sqrt(2)) = epsilon, i.e. the probability that a
    normal deviate falls more than gamma standard deviations from its mean.
    """
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"epsilon must be in (0,1), got {epsilon}")
    # 1 - erf(g/sqrt(2)) = 2 Phi(-g), so g = -Phi^-1(eps/2); evaluating the
    # inverse CDF near 0 rather than near 1 keeps full relative precision for
    # the tiny tail probabilities this is used with.
    return float(-ndtri(epsilon / 2.0))


def stderr_bounds(observed_count, scale: float, gamma: float) -> ConfidenceBound:
    """Standard-error bounds on a gain estimated from `observed_count` events.

    `scale` is the number of trials behind the estimate (N * P_i * P_j for a
    two-party intensity pair). Returns Q +- gamma * sqrt(Q / scale) with the
    lower bound clamped at zero. `observed_count` may be an array.
    """
    if scale <= 0:
        raise ValueError("scale must be positive (check probability assignment)")
    if np.any(np.asarray(observed_count) < 0):
        raise ValueError("observed_count must be non-negative")
    q = np.asarray(observed_count, dtype=float) / scale
    half_width = gamma * np.sqrt(q / scale)
    lower = np.maximum(q - half_width, 0.0)
    upper = q + half_width
    if np.ndim(observed_count) == 0:
        q, lower, upper = float(q), float(lower), float(upper)
    return ConfidenceBound(observed=q, lower=lower, upper=upper, gamma=gamma)


def gain_bounds(gain, scale: float, gamma: float) -> ConfidenceBound:
    """Bounds for an already-normalized gain Q observed over `scale` trials."""
    return stderr_bounds(np.asarray(gain) * scale if np.ndim(gain) else gain * scale, scale, gamma)


def poisson_pn(mu: float, n: int):
    """Photon-number probability P(n | mu) = e^-mu mu^n / n! of a weak coherent pulse.

    `mu` may be a scalar or a numpy array; `n` is a non-negative integer.
    """
    if n < 0:
        raise DomainError("photon number must be non-negative")
    if int(n) != n:
        raise DomainError("photon number must be an integer")
    n = int(n)
    mu_arr = np.asarray(mu, dtype=float)
    if np.any(mu_arr < 0):
        raise DomainError("intensity must be non-negative")
    # mu^n with the 0^0 = 1 convention handled by numpy's power.
    p = np.exp(-mu_arr) * mu_arr**n / math.factorial(n)
    if np.isscalar(mu) or np.ndim(mu) == 0:
        return float(p)
    return p
