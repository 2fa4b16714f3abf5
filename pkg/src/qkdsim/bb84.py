"""Decoy-state BB84: channel model, vacuum+weak decoy bounds, key rates.

All rate functions take the channel transmittance eta (detector efficiency
is folded in internally, eta_sys = eta * eta_d) and broadcast over numpy
arrays of eta, so a whole transmittance grid costs one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any

import numpy as np

from .core import (
    DomainError,
    ExperimentParams,
    KeyRateResult,
    binary_entropy,
    gain_bounds,
)

E0 = 0.5  # error rate of a dark count: random click, either outcome equally likely


@dataclass(frozen=True)
class Bb84Params:
    """Intensity settings and send probabilities for vacuum+weak decoy BB84.

    Defaults are the fixed high-loss configuration used for the finite-size
    studies; the asymptotic critical-transmittance runs override mu and nu.
    """

    signal_intensity: float = 0.31   # mu
    decoy_intensity: float = 0.165   # nu
    vacuum_intensity: float = 2e-4   # omega, ~0 but nonzero in practice
    p_signal: float = 0.5
    p_decoy: float = 0.36
    basis_prob: float = 0.75         # q_x, probability of choosing the key basis
    basis_factor: float = 1.0        # q, sifting prefactor (1 = efficient BB84)

    def __post_init__(self) -> None:
        if not self.signal_intensity > self.decoy_intensity >= self.vacuum_intensity >= 0.0:
            raise ValueError("need mu > nu >= omega >= 0")
        if not (0.0 <= self.p_signal <= 1.0 and 0.0 <= self.p_decoy <= 1.0):
            raise ValueError("send probabilities must be in [0,1]")
        if self.p_signal + self.p_decoy > 1.0:
            raise ValueError("p_signal + p_decoy must leave room for the vacuum state")
        if not 0.0 < self.basis_prob <= 1.0:
            raise ValueError("basis_prob must be in (0,1]")
        if not 0.0 < self.basis_factor <= 1.0:
            raise ValueError("basis_factor must be in (0,1]")

    @property
    def p_vacuum(self) -> float:
        return 1.0 - self.p_signal - self.p_decoy


@dataclass(frozen=True)
class Bb84Observables:
    """Per-intensity gain and QBER, as simulated or measured."""

    Q_mu: Any
    E_mu: Any
    Q_nu: Any
    E_nu: Any
    Q_om: Any
    E_om: Any


def _observables(eta_sys, mu: float, params: ExperimentParams, strict: bool):
    if np.any(np.asarray(eta_sys) < 0) or np.any(np.asarray(eta_sys) > 1):
        raise DomainError(f"eta_sys must be in [0,1], got {eta_sys}")
    if mu < 0:
        raise DomainError("intensity must be non-negative")
    y0 = params.dark_count_rate
    detected = 1.0 - np.exp(-mu * np.asarray(eta_sys, dtype=float))
    gain = y0 + detected
    if np.any(gain == 0.0):
        if strict:
            raise DomainError("zero gain: no dark counts and no transmittance")
        # QBER conditioned on a click that never happens; E0 by convention.
        qber = np.where(gain > 0.0,
                        (E0 * y0 + params.misalignment * detected) / np.where(gain > 0, gain, 1.0),
                        E0)
    else:
        qber = (E0 * y0 + params.misalignment * detected) / gain
    if np.ndim(eta_sys) == 0:
        return float(gain), float(qber)
    return gain, qber


def bb84_observables(eta_sys, mu: float, params: ExperimentParams):
    """Gain and QBER of one intensity through the standard channel model.

    Q = Y0 + 1 - exp(-mu eta_sys); the QBER mixes the dark-count errors (E0)
    with misalignment on the detected fraction. `eta_sys` may be an array.
    Zero gain (possible only with Y0 = 0 and mu eta_sys = 0) is signaled.
    """
    return _observables(eta_sys, mu, params, strict=True)


def make_observables(eta_sys, bb84: Bb84Params, params: ExperimentParams) -> Bb84Observables:
    """Observables for all three intensity settings at once.

    Unlike the single-intensity form this tolerates a zero vacuum gain
    (omega = 0 with no dark counts); downstream bounds handle it as no data.
    """
    q_mu, e_mu = _observables(eta_sys, bb84.signal_intensity, params, strict=False)
    q_nu, e_nu = _observables(eta_sys, bb84.decoy_intensity, params, strict=False)
    q_om, e_om = _observables(eta_sys, bb84.vacuum_intensity, params, strict=False)
    return Bb84Observables(q_mu, e_mu, q_nu, e_nu, q_om, e_om)


def decoy_bounds_vw(observables: Bb84Observables, mu: float, nu: float,
                    params: ExperimentParams):
    """Vacuum+weak analytical bounds on the single-photon yield and error.

    Returns (Y1_lower, e1_upper). Y1_lower is clamped at 0; when it vanishes
    there is no single-photon information and e1_upper is reported as 1.
    """
    if not mu > nu > 0:
        raise DomainError(f"need mu > nu > 0, got mu={mu}, nu={nu}")
    q_mu = np.asarray(observables.Q_mu, dtype=float)
    q_nu = np.asarray(observables.Q_nu, dtype=float)
    y0 = np.asarray(observables.Q_om, dtype=float)  # vacuum gain estimates Y0
    t_nu = q_nu * np.asarray(observables.E_nu, dtype=float)

    y1l = (mu / (mu * nu - nu**2)) * (
        q_nu * math.exp(nu)
        - q_mu * math.exp(mu) * nu**2 / mu**2
        - (mu**2 - nu**2) / mu**2 * y0
    )
    y1l = np.maximum(y1l, 0.0)
    safe = np.where(y1l > 0.0, y1l, 1.0)
    e1u = np.where(y1l > 0.0, (t_nu * math.exp(nu) - E0 * y0) / (safe * nu), 1.0)
    e1u = np.clip(e1u, 0.0, 1.0)
    if np.ndim(y1l) == 0:
        return float(y1l), float(e1u)
    return y1l, e1u


def _y1l_from_bounds(q_mu_hi, q_nu_lo, y0_hi, mu: float, nu: float):
    """Worst-case Y1 lower bound: adversarial direction for every observable."""
    y1l = (mu / (mu * nu - nu**2)) * (
        q_nu_lo * math.exp(nu)
        - q_mu_hi * math.exp(mu) * nu**2 / mu**2
        - (mu**2 - nu**2) / mu**2 * y0_hi
    )
    return np.maximum(y1l, 0.0)


def _e1u_from_bounds(t_nu_hi, y0_lo, y1l, nu: float):
    safe = np.where(y1l > 0.0, y1l, 1.0)
    e1u = np.where(y1l > 0.0, (t_nu_hi * math.exp(nu) - E0 * y0_lo) / (safe * nu), 1.0)
    return np.clip(e1u, 0.0, 1.0)


def _gllp_combine(q_mu, e_mu_for_ec, y1l, e1u, mu: float, params: ExperimentParams,
                  bb84: Bb84Params, **extra_diag) -> KeyRateResult:
    """R = q { -f Qmu h2(Emu) + P(1|mu) Y1L [1 - h2(e1U)] }, clamped at 0."""
    p1 = mu * math.exp(-mu)
    raw = bb84.basis_factor * (
        -params.error_correction_efficiency * q_mu * binary_entropy(e_mu_for_ec)
        + p1 * y1l * (1.0 - binary_entropy(e1u))
    )
    return KeyRateResult.clamped(
        raw, Q_mu=q_mu, y1_lower=y1l, e1_upper=e1u, **extra_diag
    )


def gllp_rate(eta, params: ExperimentParams, bb84: Bb84Params) -> KeyRateResult:
    """Asymptotic decoy-state key rate at channel transmittance eta."""
    eta_sys = np.asarray(eta, dtype=float) * params.detector_efficiency
    if np.ndim(eta) == 0:
        eta_sys = float(eta_sys)
    obs = make_observables(eta_sys, bb84, params)
    y1l, e1u = decoy_bounds_vw(obs, bb84.signal_intensity, bb84.decoy_intensity, params)
    return _gllp_combine(obs.Q_mu, obs.E_mu, y1l, e1u,
                         bb84.signal_intensity, params, bb84, E_mu=obs.E_mu)


def shor_preskill_rate(eta, params: ExperimentParams) -> KeyRateResult:
    """Single-photon-source rate R = (Y0 + eta_sys)(1 - 2 h2(e))."""
    eta_sys = np.asarray(eta, dtype=float) * params.detector_efficiency
    y0 = params.dark_count_rate
    yield1 = y0 + eta_sys
    if np.any(yield1 == 0.0):
        raise DomainError("no detections: Y0 = 0 and eta = 0")
    e1 = (E0 * y0 + params.misalignment * eta_sys) / yield1
    raw = yield1 * (1.0 - 2.0 * binary_entropy(e1))
    if np.ndim(eta) == 0:
        raw = float(raw)
    return KeyRateResult.clamped(raw, e1=e1, yield1=yield1)


@lru_cache(maxsize=1)
def entropy_half_point() -> float:
    """The error rate where h2(e) = 1/2, i.e. where 1 - 2 h2(e) crosses zero.

    This is the ~11% threshold below which the single-photon rate is positive.
    """
    lo, hi = 1e-9, 0.5
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if binary_entropy(mid) < 0.5:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def critical_eta_single_photon(params: ExperimentParams) -> float:
    """Closed-form critical channel transmittance of the single-photon rate.

    eta_crit = (Y0 / eta_d) (0.5 - e_crit) / (e_crit - e_d) with e_crit the
    11% entropy threshold; below this the rate is exactly zero.
    """
    e_crit = entropy_half_point()
    if params.misalignment >= e_crit:
        raise DomainError(
            f"misalignment {params.misalignment} at or above the {e_crit:.4f} threshold: "
            "no positive-rate region exists"
        )
    y0 = params.dark_count_rate
    return (y0 / params.detector_efficiency) * (E0 - e_crit) / (e_crit - params.misalignment)


def critical_eta_decoy(params: ExperimentParams, bb84: Bb84Params,
                       rel_tol: float = 1e-4) -> float:
    """Smallest channel transmittance with positive decoy-state rate.

    Brackets the zero crossing on a 200-point log grid over [1e-7, 1], then
    bisects in log space to the requested relative tolerance.
    """
    grid = np.logspace(-7.0, 0.0, 200)
    rates = gllp_rate(grid, params, bb84).rate_per_pulse
    positive = rates > 0.0
    if not positive.any():
        raise DomainError("rate is zero over the whole transmittance range")
    first = int(np.argmax(positive))
    if first == 0:
        return float(grid[0])
    lo, hi = float(grid[first - 1]), float(grid[first])
    while hi / lo - 1.0 > rel_tol:
        mid = math.sqrt(lo * hi)
        if gllp_rate(mid, params, bb84).rate_per_pulse > 0.0:
            hi = mid
        else:
            lo = mid
    return hi


def finite_size_bb84_rate(eta, params: ExperimentParams, bb84: Bb84Params) -> KeyRateResult:
    """Decoy-state rate with standard-error bounds on every observable.

    Each gain/error-gain is replaced by its worst-case confidence bound
    before the vacuum+weak analysis. Key-basis statistics accumulate over
    N p_i qx^2 pulses, the phase-error estimate over the conjugate basis
    (N p_nu (1-qx)^2), and vacuum counts over N p_omega.
    """
    if bb84.p_vacuum <= 0.0:
        raise DomainError("finite-size analysis needs a nonzero vacuum probability")
    if bb84.basis_prob >= 1.0:
        raise DomainError("finite-size analysis needs conjugate-basis data (q_x < 1)")
    mu, nu = bb84.signal_intensity, bb84.decoy_intensity
    n, g = params.total_pulses, params.gamma
    qx = bb84.basis_prob

    eta_sys = np.asarray(eta, dtype=float) * params.detector_efficiency
    if np.ndim(eta) == 0:
        eta_sys = float(eta_sys)
    obs = make_observables(eta_sys, bb84, params)

    scale_mu = n * bb84.p_signal * qx**2
    scale_nu = n * bb84.p_decoy * qx**2
    scale_nu_conj = n * bb84.p_decoy * (1.0 - qx) ** 2
    scale_om = n * bb84.p_vacuum

    q_mu_b = gain_bounds(obs.Q_mu, scale_mu, g)
    t_mu_b = gain_bounds(obs.Q_mu * obs.E_mu, scale_mu, g)
    q_nu_b = gain_bounds(obs.Q_nu, scale_nu, g)
    t_nu_b = gain_bounds(obs.Q_nu * obs.E_nu, scale_nu_conj, g)
    y0_b = gain_bounds(obs.Q_om, scale_om, g)

    y1l = _y1l_from_bounds(q_mu_b.upper, q_nu_b.lower, y0_b.upper, mu, nu)
    e1u = _e1u_from_bounds(t_nu_b.upper, y0_b.lower, y1l, nu)
    # Worst case for the error-correction cost: most gain at the highest
    # consistent QBER (h2 peaks at 1/2, so cap there).
    e_mu_ec = np.minimum(t_mu_b.upper / np.maximum(q_mu_b.lower, 1e-300), E0)
    return _gllp_combine(q_mu_b.upper, e_mu_ec, y1l, e1u, mu, params, bb84,
                         e_mu_ec=e_mu_ec, gamma=g)


def pulse_wise_yields(pdtc, eta_t: float, i: int, params: ExperimentParams) -> float:
    """Mean i-photon yield <Y_i(eta)> over the post-selected transmittance distribution.

    `pdtc` is any distribution object exposing expect(fn, eta_t). For i = 0
    this is Y0 exactly and for i = 1 it equals Y0 + <eta_sys> (linearity);
    for i >= 2 it sits strictly below the simplified Y_i(<eta>).
    """
    if i < 0 or int(i) != i:
        raise DomainError("photon number must be a non-negative integer")
    y0 = params.dark_count_rate
    eta_d = params.detector_efficiency

    def yield_i(eta):
        return y0 + 1.0 - (1.0 - np.asarray(eta) * eta_d) ** int(i)

    return float(pdtc.expect(yield_i, eta_t))
