"""Twin-field QKD: single-photon interference model, cat-state phase error, rate.

Both parties send dim coherent pulses to a middle beamsplitter and key bits
are read off which single detector clicked. Because a click needs only one
photon to survive either arm, the rate falls with the square root of the
total transmittance, half the exponent of a direct link; that is the whole
point of the protocol and what the slope checks pin down.

Security rests on the phase-error rate of the X-basis (encoding) rounds.
The encoding states split into even/odd photon-number (cat) components, and
the phase-error probability is bounded by a Cauchy-Schwarz combination of
the Z-basis yields of small photon-number pairs: five estimated pairs,
(0,0), (0,2), (2,0), (1,1), (2,2), with every other pair pessimistically
assigned yield 1 (the cat amplitudes decay fast enough that the neglected
pairs cost little at working intensities). The yields come either from the
closed-form detector model (infinite-decoy limit) or from linear programs
constrained by the phase-randomized decoy gains.

Misalignment is carried as physical rotation angles of the two arms; a
fractional error rate e_d maps to a relative angle 2 asin(sqrt(e_d)). The
environment's `misalignment` field is not consulted here: the angles live
in TfParams so both arms' rotations can be set independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from scipy.special import i0e

from . import lp
from .core import (
    DomainError,
    ExperimentParams,
    KeyRateResult,
    binary_entropy,
    gain_bounds,
    poisson_pn,
)

_SLOP = 1e-12
_S_CUT = 10  # photon-number truncation of the LP yield estimator
N_CAT = 10  # cat-state coefficient truncation

# Yield pairs estimated individually; everything else falls to the tail policy.
TARGET_PAIRS = ((0, 0), (0, 2), (2, 0), (1, 1), (2, 2))

Mode = Literal["infinite_decoy", "lp", "lp_finite"]


def misalignment_angle(ed: float) -> float:
    """Relative polarization angle between the arms giving error fraction ed.

    A fraction ed of interference visibility is lost when the arms are
    rotated by asin(sqrt(ed)) each, in opposite directions.
    """
    if not 0.0 <= ed <= 1.0:
        raise DomainError(f"misalignment fraction must be in [0,1], got {ed}")
    return 2.0 * math.asin(math.sqrt(ed))


# ----------------------------------------------------------------- settings

@dataclass(frozen=True)
class TfParams:
    """Per-party signal/decoy intensities, send probabilities and arm angles.

    s is the X-basis encoding intensity (alpha^2); mu > nu > 0 are the
    phase-randomized Z-basis decoys, with the vacuum decoy omega = 0 always
    included. The remainder of each party's probability budget goes to the
    vacuum slot. phi is a deterministic phase mismatch between the arms;
    theta_a/theta_b are polarization rotations (use `with_misalignment` to
    set them from an error fraction).
    """

    s_a: float
    s_b: float
    mu_a: float = 0.1
    nu_a: float = 0.01
    mu_b: float = 0.1
    nu_b: float = 0.01
    p_s_a: float = 0.6
    p_mu_a: float = 0.2
    p_nu_a: float = 0.1
    p_s_b: float = 0.6
    p_mu_b: float = 0.2
    p_nu_b: float = 0.1
    phi: float = 0.0
    theta_a: float = 0.0
    theta_b: float = 0.0

    def __post_init__(self) -> None:
        for party in ("a", "b"):
            s = getattr(self, f"s_{party}")
            mu = getattr(self, f"mu_{party}")
            nu = getattr(self, f"nu_{party}")
            if s < 0.0:
                raise ValueError(f"signal intensity must be non-negative, got s_{party}={s}")
            if not mu > nu > 0.0:
                raise ValueError(f"decoys must satisfy mu > nu > 0 for party {party}")
            probs = [getattr(self, f"p_{k}_{party}") for k in ("s", "mu", "nu")]
            if any(p < 0.0 for p in probs):
                raise ValueError("send probabilities must be non-negative")
            if sum(probs) > 1.0 + _SLOP:
                raise ValueError(f"send probabilities of party {party} exceed 1")

    @classmethod
    def symmetric(cls, s: float, mu: float = 0.1, nu: float = 0.01, **kwargs) -> "TfParams":
        return cls(s_a=s, s_b=s, mu_a=mu, nu_a=nu, mu_b=mu, nu_b=nu, **kwargs)

    def with_misalignment(self, ed_a: float, ed_b: float | None = None) -> "TfParams":
        """Rotate the arms in opposite directions by asin(sqrt(ed)) each."""
        if ed_b is None:
            ed_b = ed_a
        return replace(
            self,
            theta_a=math.asin(math.sqrt(ed_a)),
            theta_b=-math.asin(math.sqrt(ed_b)),
        )

    @property
    def theta(self) -> float:
        """Total relative angle between the arms."""
        return self.theta_a - self.theta_b

    @property
    def decoys_a(self) -> tuple[float, float, float]:
        return (self.mu_a, self.nu_a, 0.0)

    @property
    def decoys_b(self) -> tuple[float, float, float]:
        return (self.mu_b, self.nu_b, 0.0)

    @property
    def p_omega_a(self) -> float:
        return 1.0 - self.p_s_a - self.p_mu_a - self.p_nu_a

    @property
    def p_omega_b(self) -> float:
        return 1.0 - self.p_s_b - self.p_mu_b - self.p_nu_b


# ----------------------------------------------------------- X-basis model

def tf_x_observables(
    gamma_a: float, gamma_b: float, pd: float, theta: float, phi: float = 0.0
) -> tuple[float, float]:
    """Gain and QBER of the encoding rounds for the (1,0)/(0,1) patterns.

    gamma_a/gamma_b are the intensities arriving at the beamsplitter. With
    x = 1 - pd, S = gA + gB and c = sqrt(gA gB) cos(phi) cos(theta):

        p_XX = x e^{-S/2} cosh(c) - x^2 e^{-S}
        e_XX = (e^{-c} - x e^{-S/2}) / (e^{-c} + e^{c} - 2 x e^{-S/2})

    Raises DomainError when no detections occur (p_XX = 0), since the QBER
    is then undefined.
    """
    if gamma_a < 0.0 or gamma_b < 0.0:
        raise DomainError("arriving intensities must be non-negative")
    if not 0.0 <= pd < 1.0:
        raise DomainError(f"dark-count probability must be in [0,1), got {pd}")
    x = 1.0 - pd
    s = gamma_a + gamma_b
    c = math.sqrt(gamma_a * gamma_b) * math.cos(phi) * math.cos(theta)
    p = x * math.exp(-0.5 * s) * math.cosh(c) - x * x * math.exp(-s)
    if p <= 0.0:
        raise DomainError("X-basis gain is zero; QBER undefined")
    num = math.exp(-c) - x * math.exp(-0.5 * s)
    den = math.exp(-c) + math.exp(c) - 2.0 * x * math.exp(-0.5 * s)
    e = min(max(num / den, 0.0), 1.0)
    return p, e


def tf_z_gain(gamma_a: float, gamma_b: float, pd: float, theta: float) -> float:
    """Click-pattern probability for a pair of phase-randomized pulses.

    Averaging the interference over the uniform relative phase turns the
    cosh of the X-basis gain into a Bessel function:

        p_ZZ = x [e^{-S/2} I0(sqrt(gA gB) cos theta) - e^{-S}] + pd x e^{-S}

    The exponentially scaled i0e keeps the product stable for any intensity.
    """
    if gamma_a < 0.0 or gamma_b < 0.0:
        raise DomainError("arriving intensities must be non-negative")
    if not 0.0 <= pd < 1.0:
        raise DomainError(f"dark-count probability must be in [0,1), got {pd}")
    x = 1.0 - pd
    s = gamma_a + gamma_b
    z = math.sqrt(gamma_a * gamma_b) * math.cos(theta)
    bright = float(i0e(z)) * math.exp(abs(z) - 0.5 * s)
    return x * (bright - math.exp(-s)) + pd * x * math.exp(-s)


# ------------------------------------------------------ photon-number yields

def _split_detection(n_a: int, n_b: int, eta_a: float, eta_b: float,
                     theta_a: float, theta_b: float) -> float:
    """P(detector c clicks, detector d silent | nA, nB photons sent), no darks.

    Each photon independently survives its arm, then the surviving bosons
    interfere at the balanced beamsplitter; the sum runs over the polarized
    occupation patterns that leave port d empty.
    """
    ca, sa = math.cos(theta_a), math.sin(theta_a)
    cb, sb = math.cos(theta_b), math.sin(theta_b)
    total = 0.0
    for k in range(n_a + 1):
        w_a = math.comb(n_a, k) * eta_a**k * (1.0 - eta_a) ** (n_a - k)
        for l in range(n_b + 1):
            w_b = math.comb(n_b, l) * eta_b**l * (1.0 - eta_b) ** (n_b - l)
            inner = 0.0
            for m in range(k + 1):
                for p in range(l + 1):
                    for q in range(max(0, m + p - l), min(k, m + p) + 1):
                        inner += (
                            math.comb(k, m) * math.comb(l, p)
                            * math.comb(k, q) * math.comb(l, m + p - q)
                            * math.factorial(m + p) * math.factorial(k + l - m - p)
                            * ca ** (m + q) * cb ** (m + 2 * p - q)
                            * sa ** (2 * k - m - q) * sb ** (2 * l - m - 2 * p + q)
                        )
            total += w_a * w_b * inner / (2 ** (k + l) * math.factorial(k) * math.factorial(l))
    # subtract the all-lost term counted by the k = l = 0 branch
    return total - (1.0 - eta_a) ** n_a * (1.0 - eta_b) ** n_b


def tf_yields_infinite_decoy(
    n_a: int, n_b: int, eta_a: float, eta_b: float, pd: float,
    theta_a: float = 0.0, theta_b: float = 0.0,
) -> float:
    """Exact yield of the photon-number pair (nA, nB) under loss and darks.

    Dark counts enter the single-detector pattern in two ways: a genuine
    click with the other detector staying dark, or all photons lost and one
    dark count firing:

        Y = (1 - pd) q + (1 - pd) pd (1 - etaA)^nA (1 - etaB)^nB
    """
    if int(n_a) != n_a or int(n_b) != n_b or n_a < 0 or n_b < 0:
        raise DomainError("photon numbers must be non-negative integers")
    if not 0.0 <= eta_a <= 1.0 or not 0.0 <= eta_b <= 1.0:
        raise DomainError("arm transmittances must be in [0,1]")
    if not 0.0 <= pd < 1.0:
        raise DomainError(f"dark-count probability must be in [0,1), got {pd}")
    q = _split_detection(int(n_a), int(n_b), eta_a, eta_b, theta_a, theta_b)
    lost = (1.0 - eta_a) ** n_a * (1.0 - eta_b) ** n_b
    y = (1.0 - pd) * q + (1.0 - pd) * pd * lost
    return min(max(y, 0.0), 1.0)


# ----------------------------------------------------------------- cat states

@dataclass(frozen=True)
class CatCoefficients:
    """Photon-number amplitudes of one (sub-normalized) parity component.

    c[n] is the coefficient of |n> in (|alpha> + (-1)^parity |-alpha>)/2;
    entries of the wrong parity are exactly zero and the total mass never
    exceeds the coherent-state weight 1.
    """

    alpha: float
    parity: str
    c: np.ndarray

    def __post_init__(self) -> None:
        offset = 0 if self.parity == "even" else 1
        wrong = self.c[1 - offset :: 2]
        if wrong.size and np.any(wrong != 0.0):
            raise ValueError(f"{self.parity} cat has nonzero opposite-parity terms")
        if self.mass > 1.0 + _SLOP:
            raise ValueError("cat coefficient mass exceeds 1")

    @property
    def mass(self) -> float:
        return float(self.c @ self.c)


def cat_coefficients(alpha: float, parity: str, n_cat: int = N_CAT) -> CatCoefficients:
    """Coefficients e^{-alpha^2/2} alpha^n / sqrt(n!) on the matching parity."""
    if parity not in ("even", "odd"):
        raise ValueError(f"parity must be 'even' or 'odd', got {parity!r}")
    if alpha < 0.0:
        raise DomainError(f"cat amplitude must be non-negative, got {alpha}")
    if n_cat < 1:
        raise ValueError("n_cat must be at least 1")
    offset = 0 if parity == "even" else 1
    c = np.zeros(n_cat + 1)
    norm = math.exp(-0.5 * alpha * alpha)
    for n in range(offset, n_cat + 1, 2):
        c[n] = norm * alpha**n / math.sqrt(math.factorial(n))
    return CatCoefficients(alpha=alpha, parity=parity, c=c)


def cat_pair(alpha: float, n_cat: int = N_CAT) -> tuple[CatCoefficients, CatCoefficients]:
    """Even and odd components of a coherent state of amplitude alpha."""
    return cat_coefficients(alpha, "even", n_cat), cat_coefficients(alpha, "odd", n_cat)


# ----------------------------------------------------------- yield container

@dataclass(frozen=True)
class TfYields:
    """Upper bounds on the five estimated yields plus the tail policy.

    Any pair outside the estimated five is assigned `tail_yield` (1 by
    default, the pessimistic choice that keeps the phase-error bound valid).
    """

    y00: float
    y02: float
    y20: float
    y11: float
    y22: float
    tail_yield: float = 1.0

    def __post_init__(self) -> None:
        for name in ("y00", "y02", "y20", "y11", "y22", "tail_yield"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")

    def get(self, n: int, m: int) -> float:
        named = {
            (0, 0): self.y00, (0, 2): self.y02, (2, 0): self.y20,
            (1, 1): self.y11, (2, 2): self.y22,
        }
        return named.get((n, m), self.tail_yield)


def phase_error_bound(
    yields: TfYields,
    cat_a: tuple[CatCoefficients, CatCoefficients],
    cat_b: tuple[CatCoefficients, CatCoefficients],
    p_xx: float,
) -> float:
    """Cauchy-Schwarz upper bound on the phase-error rate of the X rounds.

    Matched-parity cat components on the two arms feed the same detector
    statistics, so the phase-error gain is bounded by
    sum_i [ sum_{n,m} c^A_n c^B_m sqrt(Y_nm) ]^2 with i the common parity.
    The coefficient grids are truncated; the neglected amplitude mass is the
    caller's to check (tf_key_rate surfaces it as a diagnostic) and is
    negligible for the dim pulses the protocol uses. Clamped to 1.
    """
    if p_xx <= 0.0:
        raise DomainError("phase-error rate undefined at zero X-basis gain")
    total = 0.0
    for comp_a, comp_b in zip(cat_a, cat_b):
        amp = 0.0
        for n in np.flatnonzero(comp_a.c):
            for m in np.flatnonzero(comp_b.c):
                amp += comp_a.c[n] * comp_b.c[m] * math.sqrt(yields.get(int(n), int(m)))
        total += amp * amp
    return min(total / p_xx, 1.0)


# -------------------------------------------------------------- LP estimation

def tf_yield_bounds_lp(
    gains,
    decoys_a: tuple[float, float, float],
    decoys_b: tuple[float, float, float],
    *,
    scales=None,
    gamma: float = 0.0,
    s_cut: int = _S_CUT,
) -> TfYields:
    """Upper-bound the five target yields from the 3x3 decoy gain table.

    gains[i][j] is the Z-basis click-pattern gain when party A sends decoy
    decoys_a[i] and party B sends decoys_b[j]. Each decoy ladder must end in
    the vacuum (the vacuum-vacuum row pins Y00 exactly). Variables are the
    yields up to s_cut photons per arm, boxed in [0,1]; the Poisson mass
    beyond the cut widens each constraint downward by its tail. When
    `scales` (trial counts per pair) is given, the observations are widened
    to gamma-standard-error intervals first. One LP per target, maximized,
    warm-starting each solve from the previous basis.
    """
    da = tuple(float(v) for v in decoys_a)
    db = tuple(float(v) for v in decoys_b)
    for name, d in (("decoys_a", da), ("decoys_b", db)):
        if len(d) != 3 or d[2] != 0.0 or d[0] <= 0.0 or not d[0] >= d[1] >= d[2]:
            raise ValueError(f"{name} must be three non-increasing intensities ending in 0")
    q = np.asarray(gains, dtype=float)
    if q.shape != (3, 3):
        raise ValueError(f"gains must be a 3x3 table, got shape {q.shape}")
    if np.any(q < -_SLOP) or np.any(q > 1.0 + _SLOP):
        raise DomainError("gains must be probabilities")
    if scales is not None:
        scales = np.asarray(scales, dtype=float)
        if scales.shape != (3, 3):
            raise ValueError("scales must match the 3x3 gain table")

    n_var = s_cut * s_cut
    rows, lo, hi = [], [], []
    for i, mu in enumerate(da):
        pa = np.array([poisson_pn(mu, n) for n in range(s_cut)])
        for j, nu in enumerate(db):
            pb = np.array([poisson_pn(nu, m) for m in range(s_cut)])
            coeff = np.outer(pa, pb).ravel()
            tail = 1.0 - coeff.sum()
            if scales is None:
                q_lo, q_hi = q[i, j], q[i, j]
            else:
                bound = gain_bounds(q[i, j], scales[i, j], gamma)
                q_lo, q_hi = bound.lower, bound.upper
            rows.append(coeff)
            lo.append(q_lo - tail)
            hi.append(q_hi)

    problem_rows = np.asarray(rows)
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    out = {}
    basis = None
    for n, m in TARGET_PAIRS:
        c = np.zeros(n_var)
        c[n * s_cut + m] = 1.0
        sol = lp.solve(
            lp.LpProblem(objective=c, rows=problem_rows, row_lower=lo, row_upper=hi),
            warm_basis=basis,
        ).require_optimal()
        basis = sol.basis
        out[(n, m)] = min(max(sol.objective_value, 0.0), 1.0)
    return TfYields(
        y00=out[(0, 0)], y02=out[(0, 2)], y20=out[(2, 0)],
        y11=out[(1, 1)], y22=out[(2, 2)],
    )


# ------------------------------------------------------------------ key rate

def plob_bound(eta_total: float) -> float:
    """Repeaterless secret-key capacity -log2(1 - eta) of a lossy channel."""
    if not 0.0 < eta_total < 1.0:
        raise DomainError(f"transmittance must be in (0,1), got {eta_total}")
    return -math.log2(1.0 - eta_total)


def tf_key_rate(
    eta_a: float,
    eta_b: float,
    tf: TfParams,
    params: ExperimentParams,
    mode: Mode = "infinite_decoy",
) -> KeyRateResult:
    """Secret-key rate per pulse of the twin-field protocol.

    eta_a/eta_b are the channel transmittances of the two arms; the
    detector efficiency folds into each arm. Both single-click patterns
    contribute, so the rate is twice the per-pattern value

        p_XX [1 - h2(e_XX) - h2(e_ZZ^U)].

    `mode` selects the yield estimator behind the phase-error bound:
    closed-form yields (infinite_decoy), decoy LPs on exact gains (lp), or
    decoy LPs on gamma-widened finite-sample gains (lp_finite). A phase or
    bit error bound past 1/2 certifies nothing, so the rate is zero there
    rather than trusting the entropy formula outside its monotone range.
    Error-correction inefficiency is not part of this model's rate.
    """
    if not 0.0 < eta_a <= 1.0 or not 0.0 < eta_b <= 1.0:
        raise DomainError("channel transmittances must be in (0,1]")
    if mode not in ("infinite_decoy", "lp", "lp_finite"):
        raise ValueError(f"unknown mode {mode!r}")
    ea = eta_a * params.detector_efficiency
    eb = eta_b * params.detector_efficiency
    pd = params.dark_count_rate
    g_a = tf.s_a * ea
    g_b = tf.s_b * eb
    p_xx, e_xx = tf_x_observables(g_a, g_b, pd, tf.theta, tf.phi)

    if mode == "infinite_decoy":
        vals = [
            tf_yields_infinite_decoy(n, m, ea, eb, pd, tf.theta_a, tf.theta_b)
            for n, m in TARGET_PAIRS
        ]
        yields = TfYields(*vals)
    else:
        table = [
            [tf_z_gain(xa * ea, xb * eb, pd, tf.theta) for xb in tf.decoys_b]
            for xa in tf.decoys_a
        ]
        if mode == "lp":
            yields = tf_yield_bounds_lp(table, tf.decoys_a, tf.decoys_b)
        else:
            probs_a = (tf.p_mu_a, tf.p_nu_a, tf.p_omega_a)
            probs_b = (tf.p_mu_b, tf.p_nu_b, tf.p_omega_b)
            scales = params.total_pulses * np.outer(probs_a, probs_b)
            yields = tf_yield_bounds_lp(
                table, tf.decoys_a, tf.decoys_b, scales=scales, gamma=params.gamma
            )

    cat_a = cat_pair(math.sqrt(tf.s_a))
    cat_b = cat_pair(math.sqrt(tf.s_b))
    e_zz = phase_error_bound(yields, cat_a, cat_b, p_xx)

    no_key = e_xx > 0.5 or e_zz > 0.5
    if no_key:
        raw = 0.0
    else:
        raw = 2.0 * p_xx * (1.0 - binary_entropy(e_xx) - binary_entropy(e_zz))
    return KeyRateResult.clamped(
        raw,
        mode=mode,
        p_xx=p_xx,
        e_xx=e_xx,
        e_zz_upper=e_zz,
        gamma_a=g_a,
        gamma_b=g_b,
        yields=yields,
        cat_tail_mass_a=1.0 - cat_a[0].mass - cat_a[1].mass,
        cat_tail_mass_b=1.0 - cat_b[0].mass - cat_b[1].mass,
        no_key=no_key,
    )
