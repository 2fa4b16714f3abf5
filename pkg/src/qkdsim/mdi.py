"""MDI-QKD with a relay: coincidence model, decoy bounds, asymmetric key rate.

Both parties send weak coherent pulses to an untrusted middle node that
announces Bell-state coincidences. The channel model keeps gains to second
order in the arriving intensities a = mu_A eta_A eta_d and b = mu_B eta_B
eta_d (warned about past 0.5): a cross-party photon pair yields a usable
coincidence at rate a*b/2, while a same-party pair fires both detectors at
a^2/4 (or b^2/4) per basis. In the Z basis same-party events additionally
need a misalignment error to split, so they enter suppressed by
eps = e_d (2 - e_d); in the X basis they split at the analyzer at full
strength and err half the time, which is what pins the raw two-photon QBER
near 25% on a balanced link, and what the decoy combinations must cancel.

Everything downstream (decoy estimation, the key-rate assembly, the
asymptotic shape function G) is written against per-pair gains Q and
error-gains T, so it works identically for simulated and measured inputs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import lp
from .core import (
    ConfidenceBound,
    DomainError,
    ExperimentParams,
    KeyRateResult,
    binary_entropy,
    gain_bounds,
    poisson_pn,
)

_SLOP = 1e-12
_S_CUT = 10  # photon-number truncation of the LP decoy estimator


def _eps(params: ExperimentParams) -> float:
    # probability that a misaligned qubit flips at least one analyzer outcome
    ed = params.misalignment
    return ed * (2.0 - ed)


# ------------------------------------------------------------------ settings

@dataclass(frozen=True)
class MdiParams:
    """Per-party intensity settings and send probabilities.

    Each party runs a signal s plus a decoy ladder mu > nu (> nu2) > omega,
    with omega = 0 the vacuum. decoy_count selects the ladder actually sent:
    2 drops the vacuum, 3 is the standard set, 4 adds a second weak decoy.
    Defaults for the probabilities mirror the fixed working points used in
    the rate studies; the remainder of the budget goes to the vacuum.
    """

    s_a: float
    mu_a: float
    nu_a: float
    s_b: float
    mu_b: float
    nu_b: float
    p_s_a: float = 0.6
    p_mu_a: float = 0.05
    p_nu_a: float = 0.25
    p_s_b: float = 0.6
    p_mu_b: float = 0.05
    p_nu_b: float = 0.25
    nu2_a: float = 0.0
    nu2_b: float = 0.0
    p_nu2_a: float = 0.0
    p_nu2_b: float = 0.0
    decoy_count: int = 3

    def __post_init__(self) -> None:
        if self.decoy_count not in (2, 3, 4):
            raise ValueError(f"decoy_count must be 2, 3 or 4, got {self.decoy_count}")
        for party in ("a", "b"):
            s = getattr(self, f"s_{party}")
            mu = getattr(self, f"mu_{party}")
            nu = getattr(self, f"nu_{party}")
            if not 0.0 < s < 1.0:
                raise ValueError(f"signal intensity must be in (0,1), got s_{party}={s}")
            if not mu < 1.0:
                raise ValueError(f"decoy intensities must be below 1, got mu_{party}={mu}")
            if not mu > nu > 0.0:
                raise ValueError(f"need mu > nu > 0 for party {party}")
            if self.decoy_count == 4:
                nu2 = getattr(self, f"nu2_{party}")
                if not nu > nu2 > 0.0:
                    raise ValueError(f"need nu > nu2 > 0 for party {party}")
            probs = [getattr(self, f"p_{k}_{party}")
                     for k in ("s", "mu", "nu", "nu2")]
            if any(p < 0.0 for p in probs):
                raise ValueError("send probabilities must be non-negative")
            used = probs[0] + probs[1] + probs[2]
            if self.decoy_count == 4:
                used += probs[3]
            if used > 1.0 + _SLOP:
                raise ValueError(f"send probabilities of party {party} exceed 1")

    @classmethod
    def symmetric(cls, s: float, mu: float, nu: float, p_s: float = 0.6,
                  p_mu: float = 0.05, p_nu: float = 0.25, nu2: float = 0.0,
                  p_nu2: float = 0.0, decoy_count: int = 3) -> "MdiParams":
        """Same settings on both arms."""
        return cls(s_a=s, mu_a=mu, nu_a=nu, s_b=s, mu_b=mu, nu_b=nu,
                   p_s_a=p_s, p_mu_a=p_mu, p_nu_a=p_nu,
                   p_s_b=p_s, p_mu_b=p_mu, p_nu_b=p_nu,
                   nu2_a=nu2, nu2_b=nu2, p_nu2_a=p_nu2, p_nu2_b=p_nu2,
                   decoy_count=decoy_count)

    def decoy_names(self) -> tuple[str, ...]:
        if self.decoy_count == 2:
            return ("mu", "nu")
        if self.decoy_count == 3:
            return ("mu", "nu", "omega")
        return ("mu", "nu", "nu2", "omega")

    def intensities(self, party: str) -> dict[str, float]:
        return {
            "s": getattr(self, f"s_{party}"),
            "mu": getattr(self, f"mu_{party}"),
            "nu": getattr(self, f"nu_{party}"),
            "nu2": getattr(self, f"nu2_{party}"),
            "omega": 0.0,
        }

    def probabilities(self, party: str) -> dict[str, float]:
        out = {"s": getattr(self, f"p_s_{party}")}
        used = out["s"]
        for name in self.decoy_names():
            if name == "omega":
                continue
            p = getattr(self, f"p_{name}_{party}")
            out[name] = p
            used += p
        if "omega" in self.decoy_names():
            out["omega"] = max(1.0 - used, 0.0)
        return out


# ---------------------------------------------------------------- observables

def mdi_observables(eta_a, eta_b, mu_a, mu_b, params: ExperimentParams,
                    basis: str = "X"):
    """Gain and error-gain of one intensity pair, (Q, T) with T = Q * QBER.

    eta_a/eta_b are the arm transmittances and broadcast over numpy arrays;
    mu_a/mu_b the sent intensities. Dark counts contribute params.dark_count_rate
    to the gain and half of it to the error-gain (a dark coincidence is random).
    """
    if basis not in ("X", "Z"):
        raise ValueError(f"basis must be 'X' or 'Z', got {basis!r}")
    ea = np.asarray(eta_a, dtype=float)
    eb = np.asarray(eta_b, dtype=float)
    if np.any(ea < -_SLOP) or np.any(ea > 1.0 + _SLOP) or \
            np.any(eb < -_SLOP) or np.any(eb > 1.0 + _SLOP):
        raise DomainError("transmittance outside [0,1]")
    if np.any(np.asarray(mu_a) < 0) or np.any(np.asarray(mu_b) < 0):
        raise DomainError("intensity must be non-negative")

    a = np.asarray(mu_a) * ea * params.detector_efficiency
    b = np.asarray(mu_b) * eb * params.detector_efficiency
    if np.any(a > 0.5) or np.any(b > 0.5):
        warnings.warn("arriving intensity above 0.5: the quadratic coincidence "
                      "model is past its validity range", UserWarning, stacklevel=2)
    eps = _eps(params)
    y0 = params.dark_count_rate
    if basis == "X":
        q = (a + b) ** 2 / 4.0 + y0
        t = eps * a * b / 4.0 + (a * a + b * b) / 8.0 + y0 / 2.0
    else:
        q = a * b / 2.0 + eps * (a * a + b * b) / 4.0 + y0
        t = eps * (a + b) ** 2 / 8.0 + y0 / 2.0
    if np.ndim(q) == 0:
        return float(q), float(t)
    return q, t


@dataclass(frozen=True)
class MdiObservables:
    """Everything the decoy estimators consume, per intensity pair.

    x_gain/x_error_gain are keyed by (name_a, name_b) over the decoy ladder;
    z_gain/z_error_gain belong to the signal pair that makes key.
    """

    x_gain: dict[tuple[str, str], ConfidenceBound]
    x_error_gain: dict[tuple[str, str], ConfidenceBound]
    z_gain: ConfidenceBound
    z_error_gain: ConfidenceBound

    def __post_init__(self) -> None:
        if set(self.x_gain) != set(self.x_error_gain):
            raise ValueError("gain and error-gain must cover the same pairs")
        pairs = list(self.x_gain.items()) + [(("z", "z"), self.z_gain)]
        errs = list(self.x_error_gain.items()) + [(("z", "z"), self.z_error_gain)]
        for (key, q), (_, t) in zip(pairs, errs):
            for v in (q.observed, q.lower, q.upper, t.observed, t.lower, t.upper):
                if v < -_SLOP or v > 1.0 + _SLOP:
                    raise ValueError(f"observable {key} outside [0,1]: {v}")
            if t.observed > q.observed + _SLOP:
                raise ValueError(f"error-gain exceeds gain for pair {key}")


def make_observables(eta_a: float, eta_b: float, mdi: MdiParams,
                     params: ExperimentParams) -> MdiObservables:
    """Simulate the full observable set at one channel working point.

    Statistical bounds follow the gaussian counting model with
    N * P_i(A) * P_j(B) trials behind each pair; upper bounds are capped at 1.
    """
    n_pulses = params.total_pulses
    gamma = params.gamma
    ia, ib = mdi.intensities("a"), mdi.intensities("b")
    pa, pb = mdi.probabilities("a"), mdi.probabilities("b")

    def bounded(q: float, scale: float) -> ConfidenceBound:
        if math.isinf(n_pulses):
            return ConfidenceBound.exact(q)
        cb = gain_bounds(q, scale, gamma)
        return ConfidenceBound(cb.observed, cb.lower, min(cb.upper, 1.0), cb.gamma)

    x_gain: dict[tuple[str, str], ConfidenceBound] = {}
    x_err: dict[tuple[str, str], ConfidenceBound] = {}
    for i in mdi.decoy_names():
        for j in mdi.decoy_names():
            q, t = mdi_observables(eta_a, eta_b, ia[i], ib[j], params, "X")
            scale = n_pulses * pa[i] * pb[j]
            x_gain[(i, j)] = bounded(q, scale)
            x_err[(i, j)] = bounded(t, scale)
    qz, tz = mdi_observables(eta_a, eta_b, ia["s"], ib["s"], params, "Z")
    scale_z = n_pulses * pa["s"] * pb["s"]
    return MdiObservables(x_gain=x_gain, x_error_gain=x_err,
                          z_gain=bounded(qz, scale_z),
                          z_error_gain=bounded(tz, scale_z))


# --------------------------------------------------------------- decoy bounds

@dataclass(frozen=True)
class SinglePhotonBounds:
    """Certified single-photon-pair quantities: yield floor and error ceiling."""

    y11_lower: float
    e11_upper: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.y11_lower <= 1.0:
            raise ValueError(f"y11_lower outside [0,1]: {self.y11_lower}")
        if not 0.0 <= self.e11_upper <= 0.5:
            raise ValueError(f"e11_upper outside [0,0.5]: {self.e11_upper}")


def _pick(bound: ConfidenceBound, finite_size: bool, side: str) -> float:
    if not finite_size:
        return bound.observed
    return bound.lower if side == "lo" else bound.upper


def _decoy_combinations(observables: MdiObservables, mdi: MdiParams,
                        finite_size: bool) -> tuple[float, float, float]:
    """Worst-case M1 (low), M2 (high) and TM1 (high) vacuum+weak combinations.

    M1 strips the multiphoton background out of the nu pair, M2 out of the
    mu pair; TM1 is M1 on the error-gains. Exponential prefactors undo the
    Poisson normalization so each combination is a clean power series with
    only n,m >= 1 terms left.
    """
    if "omega" not in mdi.decoy_names():
        raise DomainError("analytic decoy estimation needs a vacuum setting")
    na, nb, ma, mb = mdi.nu_a, mdi.nu_b, mdi.mu_a, mdi.mu_b
    q, t = observables.x_gain, observables.x_error_gain
    m1 = (math.exp(na + nb) * _pick(q[("nu", "nu")], finite_size, "lo")
          - math.exp(na) * _pick(q[("nu", "omega")], finite_size, "hi")
          - math.exp(nb) * _pick(q[("omega", "nu")], finite_size, "hi")
          + _pick(q[("omega", "omega")], finite_size, "lo"))
    m2 = (math.exp(ma + mb) * _pick(q[("mu", "mu")], finite_size, "hi")
          - math.exp(ma) * _pick(q[("mu", "omega")], finite_size, "lo")
          - math.exp(mb) * _pick(q[("omega", "mu")], finite_size, "lo")
          + _pick(q[("omega", "omega")], finite_size, "lo"))
    tm1 = (math.exp(na + nb) * _pick(t[("nu", "nu")], finite_size, "hi")
           - math.exp(na) * _pick(t[("nu", "omega")], finite_size, "lo")
           - math.exp(nb) * _pick(t[("omega", "nu")], finite_size, "lo")
           + _pick(t[("omega", "omega")], finite_size, "hi"))
    return m1, m2, tm1


def y11_branches(observables: MdiObservables, mdi: MdiParams,
                 finite_size: bool = False) -> tuple[float, float]:
    """Both case formulas for the Y11 floor, unclamped.

    Branch a is valid when mu_a/mu_b <= nu_a/nu_b (the surviving two-photon
    coefficients are then all non-positive), branch b in the opposite case;
    on the ridge mu_a/mu_b = nu_a/nu_b they coincide identically.
    """
    m1, m2, _ = _decoy_combinations(observables, mdi, finite_size)
    na, nb, ma, mb = mdi.nu_a, mdi.nu_b, mdi.mu_a, mdi.mu_b
    y_a = (ma * m1 / (na * nb) - na * m2 / (ma * mb)) / (ma - na)
    y_b = (mb * m1 / (na * nb) - nb * m2 / (ma * mb)) / (mb - nb)
    return y_a, y_b


def decoy_bounds_analytic(observables: MdiObservables, mdi: MdiParams,
                          finite_size: bool = False) -> SinglePhotonBounds:
    """Closed-form vacuum+weak decoy bounds on the single-photon pair."""
    y_a, y_b = y11_branches(observables, mdi, finite_size)
    case_a = mdi.mu_a * mdi.nu_b <= mdi.nu_a * mdi.mu_b
    y11 = min(max(y_a if case_a else y_b, 0.0), 1.0)
    _, _, tm1 = _decoy_combinations(observables, mdi, finite_size)
    if y11 <= 0.0:
        e11 = 0.5
    else:
        e11 = min(max(tm1 / (mdi.nu_a * mdi.nu_b * y11), 0.0), 0.5)
    return SinglePhotonBounds(y11_lower=y11, e11_upper=e11)


def _lp_rows(observables: MdiObservables, mdi: MdiParams, names: tuple[str, ...],
             which: str, finite_size: bool):
    """Constraint rows over the truncated photon-number grid for one basis.

    Row sums run over n,m < _S_CUT only, so the unseen tail (total Poisson
    mass `tail`) is granted its extremes: 0 against the lower side, its full
    mass against the upper side.
    """
    ia, ib = mdi.intensities("a"), mdi.intensities("b")
    mass_a = {k: np.array([poisson_pn(ia[k], n) for n in range(_S_CUT)]) for k in names}
    mass_b = {k: np.array([poisson_pn(ib[k], n) for n in range(_S_CUT)]) for k in names}
    data = observables.x_gain if which == "gain" else observables.x_error_gain
    rows, lo, hi = [], [], []
    for i in names:
        for j in names:
            coeff = np.outer(mass_a[i], mass_b[j]).ravel()
            tail = 1.0 - mass_a[i].sum() * mass_b[j].sum()
            # Sub-roundoff coefficients get the same extreme-value treatment
            # as the truncated tail; keeping them around only feeds the
            # solver nearly dependent columns.
            tiny = coeff < 1e-12
            tail += coeff[tiny].sum()
            coeff = np.where(tiny, 0.0, coeff)
            rows.append(coeff)
            lo.append(_pick(data[(i, j)], finite_size, "lo") - tail)
            hi.append(_pick(data[(i, j)], finite_size, "hi"))
    return np.asarray(rows), np.asarray(lo), np.asarray(hi)


def decoy_bounds_lp(observables: MdiObservables, mdi: MdiParams,
                    decoy_count: int | None = None,
                    finite_size: bool = False) -> SinglePhotonBounds:
    """Numerical decoy bounds: box-constrained LPs over yields up to 10 photons.

    The yield floor and the error ceiling are optimized separately (the
    ceiling is then conservative). With a vacuum in the ladder the two
    programs are independent; the two-decoy ladder has no vacuum row, so the
    error program is tied to the yield program through the dark-count
    identities t_{0m} = y_{0m}/2 and t_{n0} = y_{n0}/2 and both blocks are
    solved jointly. Contradictory observables raise lp.InfeasibleProblem.
    """
    dc = mdi.decoy_count if decoy_count is None else decoy_count
    if dc not in (2, 3, 4):
        raise ValueError(f"decoy_count must be 2, 3 or 4, got {dc}")
    names = ("mu", "nu") if dc == 2 else (("mu", "nu", "omega") if dc == 3
                                          else ("mu", "nu", "nu2", "omega"))
    for i in names:
        for j in names:
            if (i, j) not in observables.x_gain:
                raise ValueError(f"observables missing intensity pair {(i, j)}")
    nvar = _S_CUT * _S_CUT
    idx11 = _S_CUT + 1  # flattened (n=1, m=1)
    g_rows, g_lo, g_hi = _lp_rows(observables, mdi, names, "gain", finite_size)
    e_rows, e_lo, e_hi = _lp_rows(observables, mdi, names, "error", finite_size)

    if dc == 2:
        # joint block [ y | t ] with vacuum-pair errors pinned to half-gains
        k = g_rows.shape[0]
        rows = np.zeros((2 * k + 2 * _S_CUT - 1, 2 * nvar))
        rows[:k, :nvar] = g_rows
        rows[k:2 * k, nvar:] = e_rows
        lo = np.concatenate([g_lo, e_lo, np.zeros(2 * _S_CUT - 1)])
        hi = np.concatenate([g_hi, e_hi, np.zeros(2 * _S_CUT - 1)])
        r = 2 * k
        for m in range(_S_CUT):  # t_{0m} = y_{0m} / 2
            rows[r, nvar + m] = 1.0
            rows[r, m] = -0.5
            r += 1
        for n in range(1, _S_CUT):  # t_{n0} = y_{n0} / 2
            rows[r, nvar + n * _S_CUT] = 1.0
            rows[r, n * _S_CUT] = -0.5
            r += 1
        c_y = np.zeros(2 * nvar)
        c_y[idx11] = 1.0
        c_t = np.zeros(2 * nvar)
        c_t[nvar + idx11] = 1.0
        sol_y = lp.solve(lp.LpProblem(c_y, rows, lo, hi, sense="min")).require_optimal()
        sol_t = lp.solve(lp.LpProblem(c_t, rows, lo, hi, sense="max"),
                         warm_basis=sol_y.basis).require_optimal()
        y11 = sol_y.objective_value
        t11 = sol_t.objective_value
    else:
        c = np.zeros(nvar)
        c[idx11] = 1.0
        sol_y = lp.solve(lp.LpProblem(c, g_rows, g_lo, g_hi, sense="min")).require_optimal()
        sol_t = lp.solve(lp.LpProblem(c, e_rows, e_lo, e_hi, sense="max")).require_optimal()
        y11 = sol_y.objective_value
        t11 = sol_t.objective_value

    y11 = min(max(y11, 0.0), 1.0)
    e11 = 0.5 if y11 <= 0.0 else min(max(t11 / y11, 0.0), 0.5)
    return SinglePhotonBounds(y11_lower=y11, e11_upper=e11)


# ------------------------------------------------------------------- key rate

def key_rate_from_bounds(bounds: SinglePhotonBounds, z_gain: float,
                         z_qber: float, mdi: MdiParams,
                         params: ExperimentParams) -> KeyRateResult:
    """Assemble the secure rate from certified bounds plus the sifted-key cost.

    R = P_sA P_sB { sA e^-sA sB e^-sB Y11_low [1 - h2(e11_up)]
                    - f Q_ss^Z h2(E_ss^Z) },  clamped at zero.
    """
    sa, sb = mdi.s_a, mdi.s_b
    h2 = binary_entropy
    single = (sa * np.exp(-sa) * sb * np.exp(-sb)
              * bounds.y11_lower * (1.0 - h2(bounds.e11_upper)))
    ec = params.error_correction_efficiency * z_gain * h2(z_qber)
    raw = mdi.p_s_a * mdi.p_s_b * (single - ec)
    return KeyRateResult.clamped(raw, y11_lower=bounds.y11_lower,
                                 e11_upper=bounds.e11_upper,
                                 z_gain=z_gain, z_qber=z_qber)


def mdi_key_rate(eta_a: float, eta_b: float, mdi: MdiParams,
                 params: ExperimentParams, finite_size: bool = False,
                 method: str = "auto") -> KeyRateResult:
    """Secure key rate per pulse at one working point of the two arms.

    method "analytic" needs a vacuum in the ladder; "lp" works for any
    decoy_count; "auto" picks analytic for the standard three-intensity
    ladder and the LP otherwise.
    """
    if method not in ("auto", "analytic", "lp"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        method = "analytic" if mdi.decoy_count == 3 else "lp"
    obs = make_observables(eta_a, eta_b, mdi, params)
    if method == "analytic":
        bounds = decoy_bounds_analytic(obs, mdi, finite_size=finite_size)
    else:
        bounds = decoy_bounds_lp(obs, mdi, finite_size=finite_size)
    qz = obs.z_gain.observed
    if qz <= 0.0:
        raise DomainError("zero signal gain: QBER undefined at this working point")
    out = key_rate_from_bounds(bounds, qz, obs.z_error_gain.observed / qz,
                               mdi, params)
    out.diagnostics["method"] = method
    return out


def mdi_rate(eta_a, eta_b, mdi_params: MdiParams,
             params: ExperimentParams) -> KeyRateResult:
    """Asymptotic analytic rate, broadcasting over transmittance arrays.

    The grid-friendly path used by the turbulence integrators: closed-form
    gains, vacuum+weak bounds and the rate assembly evaluated elementwise
    with no statistical machinery.
    """
    mdi = mdi_params
    if "omega" not in mdi.decoy_names():
        raise DomainError("the analytic rate needs a vacuum setting in the ladder")
    ea, eb = np.broadcast_arrays(np.asarray(eta_a, dtype=float),
                                 np.asarray(eta_b, dtype=float))
    ia, ib = mdi.intensities("a"), mdi.intensities("b")
    q = {}
    t = {}
    for i in ("mu", "nu", "omega"):
        for j in ("mu", "nu", "omega"):
            q[(i, j)], t[(i, j)] = mdi_observables(ea, eb, ia[i], ib[j], params, "X")
    na, nb, ma, mb = mdi.nu_a, mdi.nu_b, mdi.mu_a, mdi.mu_b
    m1 = (math.exp(na + nb) * q[("nu", "nu")]
          - math.exp(na) * q[("nu", "omega")]
          - math.exp(nb) * q[("omega", "nu")] + q[("omega", "omega")])
    m2 = (math.exp(ma + mb) * q[("mu", "mu")]
          - math.exp(ma) * q[("mu", "omega")]
          - math.exp(mb) * q[("omega", "mu")] + q[("omega", "omega")])
    tm1 = (math.exp(na + nb) * t[("nu", "nu")]
           - math.exp(na) * t[("nu", "omega")]
           - math.exp(nb) * t[("omega", "nu")] + t[("omega", "omega")])
    if ma * nb <= na * mb:
        y11 = (ma * m1 / (na * nb) - na * m2 / (ma * mb)) / (ma - na)
    else:
        y11 = (mb * m1 / (na * nb) - nb * m2 / (ma * mb)) / (mb - nb)
    y11 = np.clip(y11, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        e11 = np.where(y11 > 0.0, tm1 / (na * nb * np.where(y11 > 0.0, y11, 1.0)), 0.5)
    e11 = np.clip(e11, 0.0, 0.5)

    qz, tz = mdi_observables(ea, eb, ia["s"], ib["s"], params, "Z")
    qz = np.asarray(qz, dtype=float)
    tz = np.asarray(tz, dtype=float)
    if np.any(qz <= 0.0):
        raise DomainError("zero signal gain: QBER undefined at this working point")
    sa, sb = mdi.s_a, mdi.s_b
    h2 = binary_entropy
    single = sa * math.exp(-sa) * sb * math.exp(-sb) * y11 * (1.0 - h2(e11))
    ec = params.error_correction_efficiency * qz * h2(tz / qz)
    raw = mdi.p_s_a * mdi.p_s_b * (single - ec)
    return KeyRateResult.clamped(raw, y11_lower=y11, e11_upper=e11)


# -------------------------------------------- observable averaging interface

def observable_stack(mdi_params: MdiParams, params: ExperimentParams):
    """Row names plus a batched evaluator of every observable the rate needs.

    The returned stack_fn(eta_a, eta_b_array) gives a (rows, len(eta_b_array))
    array, one row per named observable, suitable for averaging over a channel
    distribution before a single rate evaluation on the means.
    """
    mdi = mdi_params
    names_a = mdi.decoy_names()
    ia, ib = mdi.intensities("a"), mdi.intensities("b")
    names: list[str] = []
    for i in names_a:
        for j in names_a:
            names.append(f"q_{i}_{j}")
            names.append(f"t_{i}_{j}")
    names += ["q_z", "t_z"]

    def stack_fn(eta_a, eta_b) -> np.ndarray:
        eb = np.atleast_1d(np.asarray(eta_b, dtype=float))
        rows = []
        for i in names_a:
            for j in names_a:
                q, t = mdi_observables(eta_a, eb, ia[i], ib[j], params, "X")
                rows.append(np.broadcast_to(np.asarray(q, dtype=float), eb.shape))
                rows.append(np.broadcast_to(np.asarray(t, dtype=float), eb.shape))
        qz, tz = mdi_observables(eta_a, eb, ia["s"], ib["s"], params, "Z")
        rows.append(np.broadcast_to(np.asarray(qz, dtype=float), eb.shape))
        rows.append(np.broadcast_to(np.asarray(tz, dtype=float), eb.shape))
        return np.vstack(rows)

    return tuple(names), stack_fn


def rate_from_observable_means(means: dict[str, float], mdi_params: MdiParams,
                               params: ExperimentParams) -> KeyRateResult:
    """Rate of a channel summarized by its mean observables.

    Means are linear in the per-pulse observables, so feeding averages through
    the same decoy estimators models a receiver that accumulates counts over
    the fluctuating channel instead of resolving it pulse by pulse.
    """
    mdi = mdi_params
    x_gain: dict[tuple[str, str], ConfidenceBound] = {}
    x_err: dict[tuple[str, str], ConfidenceBound] = {}
    for i in mdi.decoy_names():
        for j in mdi.decoy_names():
            q = min(max(float(means[f"q_{i}_{j}"]), 0.0), 1.0)
            t = min(max(float(means[f"t_{i}_{j}"]), 0.0), q)
            x_gain[(i, j)] = ConfidenceBound.exact(q)
            x_err[(i, j)] = ConfidenceBound.exact(t)
    qz = min(max(float(means["q_z"]), 0.0), 1.0)
    tz = min(max(float(means["t_z"]), 0.0), qz)
    obs = MdiObservables(x_gain=x_gain, x_error_gain=x_err,
                         z_gain=ConfidenceBound.exact(qz),
                         z_error_gain=ConfidenceBound.exact(tz))
    if mdi.decoy_count == 3:
        bounds = decoy_bounds_analytic(obs, mdi)
    else:
        bounds = decoy_bounds_lp(obs, mdi)
    if qz <= 0.0:
        raise DomainError("zero signal gain: QBER undefined for these means")
    return key_rate_from_bounds(bounds, qz, tz / qz, mdi, params)


# ------------------------------------------------------------- shape function

def asymptotic_G(x, s_a, s_b, ed: float, fe: float):
    """Perfect-decoy asymptotic rate shape: R = (eta_B eta_d)^2 / 2 * G.

    x = eta_A / eta_B is the arm mismatch; s_a, s_b the signal intensities.
    G collects everything that survives when the overall eta_B^2 scale is
    factored out, so working points can be compared across distances.
    """
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr <= 0.0):
        raise DomainError(f"mismatch x must be positive, got {x}")
    sa = np.asarray(s_a, dtype=float)
    sb = np.asarray(s_b, dtype=float)
    eps = ed * (2.0 - ed)
    h2 = binary_entropy
    q = 2.0 * x_arr * sa * sb + eps * (sb * sb + x_arr * x_arr * sa * sa)
    e_z = eps * (sb + x_arr * sa) ** 2 / (2.0 * q)
    g = (x_arr * sa * sb * np.exp(-(sa + sb)) * (1.0 - h2(ed - ed * ed / 2.0))
         - q / 2.0 * fe * h2(e_z))
    if np.ndim(g) == 0:
        return float(g)
    return g
