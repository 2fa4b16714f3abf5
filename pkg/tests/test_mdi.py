"""MDI-QKD: coincidence model, decoy bounds (analytic and LP), key rate.

Oracle values in this file come from plain math.* arithmetic and truncated
double-Poisson photon-number expansions, computed independently of the
module under test.
"""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdsim.core import (
    ConfidenceBound,
    DomainError,
    ExperimentParams,
    binary_entropy,
    distance_to_transmittance,
)
from qkdsim.lp import InfeasibleProblem
from qkdsim.mdi import (
    MdiObservables,
    MdiParams,
    SinglePhotonBounds,
    asymptotic_G,
    decoy_bounds_analytic,
    decoy_bounds_lp,
    key_rate_from_bounds,
    make_observables,
    mdi_key_rate,
    mdi_observables,
    mdi_rate,
    observable_stack,
    rate_from_observable_means,
    y11_branches,
)
from qkdsim.turbulence import (
    JointPdtc,
    Pdtc,
    mdi_integration_rate,
    mdi_observable_rate,
    rate_boundary_domain,
)

# Near-optimal working point for a strongly asymmetric link (x around 0.1).
ASYM = MdiParams(
    s_a=0.662, mu_a=0.522, nu_a=0.100,
    s_b=0.202, mu_b=0.058, nu_b=0.011,
    p_s_a=0.600, p_mu_a=0.033, p_nu_a=0.255,
    p_s_b=0.600, p_mu_b=0.031, p_nu_b=0.256,
)
# Balanced working point for equal arms.
SYM = MdiParams.symmetric(s=0.402, mu=0.305, nu=0.063,
                          p_s=0.478, p_mu=0.047, p_nu=0.330)

ETA_60 = distance_to_transmittance(60.0)
ETA_10 = distance_to_transmittance(10.0)

# Inline copy of the mdi_env fixture for the hypothesis tests, which cannot
# take function-scoped fixtures.
ENV = ExperimentParams(
    dark_count_rate=8e-7,
    detector_efficiency=0.65,
    misalignment=0.005,
    error_correction_efficiency=1.16,
)


def no_dark(env: ExperimentParams) -> ExperimentParams:
    return dataclasses.replace(env, dark_count_rate=0.0)


# ------------------------------------------------------------ expansion oracle

def pair_yield(n, m, eta_a, eta_b, env, basis="X"):
    """Yield and error-yield of an (n, m) photon-number pair.

    Quadratic coincidence model: a cross-party pair contributes 2*al*be per
    photon pair, a same-party pair al^2 (or be^2). In the X basis same-party
    pairs split at the analyzer at full strength and err half the time,
    while cross-party pairs err at eps/2; in the Z basis same-party
    coincidences need a misalignment event (factor eps) and cross-party
    errors carry the full eps weight of E_ss^Z.
    """
    al = eta_a * env.detector_efficiency
    be = eta_b * env.detector_efficiency
    eps = env.misalignment * (2.0 - env.misalignment)
    y0 = env.dark_count_rate
    cross = 2.0 * n * m * al * be
    same = n * (n - 1) * al * al + m * (m - 1) * be * be
    if basis == "X":
        q = (cross + same) / 4.0 + y0
        t = eps * n * m * al * be / 4.0 + same / 8.0 + y0 / 2.0
    else:
        q = (cross + eps * same) / 4.0 + y0
        t = eps * (cross + same) / 8.0 + y0 / 2.0
    return q, t


def poisson(mu, n):
    return math.exp(-mu) * mu ** n / math.factorial(n)


def series_gain(mu_a, mu_b, eta_a, eta_b, env, basis="X", nmax=60):
    """Double-Poisson mixture of pair_yield, truncated far into the tail."""
    q_sum = 0.0
    t_sum = 0.0
    for n in range(nmax):
        pa = poisson(mu_a, n)
        for m in range(nmax):
            w = pa * poisson(mu_b, m)
            q, t = pair_yield(n, m, eta_a, eta_b, env, basis)
            q_sum += w * q
            t_sum += w * t
    return q_sum, t_sum


# --------------------------------------------------------------- observables

def test_gain_series_oracle(mdi_env):
    # Closed forms must match the photon-number expansion in both bases.
    for eta_a, eta_b in ((0.01, 0.1), (0.2, 0.2), (0.5, 0.05)):
        for mu_a, mu_b in ((0.5, 0.06), (0.3, 0.3), (0.05, 0.4)):
            for basis in ("X", "Z"):
                q_ref, t_ref = series_gain(mu_a, mu_b, eta_a, eta_b, mdi_env, basis)
                q, t = mdi_observables(eta_a, eta_b, mu_a, mu_b, mdi_env, basis)
                assert q == pytest.approx(q_ref, rel=1e-9)
                assert t == pytest.approx(t_ref, rel=1e-9)


def test_dark_counts_only(mdi_env):
    for basis in ("X", "Z"):
        q, t = mdi_observables(0.3, 0.3, 0.0, 0.0, mdi_env, basis)
        assert q == pytest.approx(mdi_env.dark_count_rate, rel=1e-12)
        assert t == pytest.approx(mdi_env.dark_count_rate / 2.0, rel=1e-12)


def test_z_error_vanishes_when_aligned(mdi_env):
    env = dataclasses.replace(mdi_env, misalignment=0.0, dark_count_rate=0.0)
    q, t = mdi_observables(0.1, 0.2, 0.4, 0.2, env, "Z")
    assert q > 0.0
    assert t == 0.0


def test_z_qber_symmetric_identity(mdi_env):
    # Equal arms and equal signals: E_ss^Z reduces to 4*eps / (2*(2 + 2*eps)).
    env = no_dark(mdi_env)
    eps = env.misalignment * (2.0 - env.misalignment)
    q, t = mdi_observables(0.1, 0.1, 0.4, 0.4, env, "Z")
    assert t / q == pytest.approx(4.0 * eps / (2.0 * (2.0 + 2.0 * eps)), rel=1e-12)


def test_z_qber_imbalance_values(mdi_env):
    # E_ss^Z depends only on the arriving-intensity ratio u.
    env = no_dark(mdi_env)
    eps = env.misalignment * (2.0 - env.misalignment)
    for u, quoted, tol in ((0.35, 0.013, 0.02), (0.1, 0.029, 0.015)):
        # arrange intensities so that u = (sA etaA) / (sB etaB)
        eta_a, eta_b, s_b = 0.04, 0.4, 0.25
        s_a = u * s_b * eta_b / eta_a
        q, t = mdi_observables(eta_a, eta_b, s_a, s_b, env, "Z")
        closed = eps * (1.0 + u) ** 2 / (2.0 * (2.0 * u + eps * (1.0 + u * u)))
        assert t / q == pytest.approx(closed, rel=1e-12)
        assert t / q == pytest.approx(quoted, rel=tol)


def test_x_qber_floor_at_balance(mdi_env):
    # Balanced arriving intensities: E^X = (1 + eps) / 4, about 25%.
    env = no_dark(mdi_env)
    eps = env.misalignment * (2.0 - env.misalignment)
    q, t = mdi_observables(0.05, 0.5, 0.4, 0.04, env, "X")
    assert t / q == pytest.approx((1.0 + eps) / 4.0, rel=1e-12)
    assert 0.25 < t / q < 0.26


def test_x_qber_closed_form(mdi_env):
    env = no_dark(mdi_env)
    eps = env.misalignment * (2.0 - env.misalignment)
    for eta_a, eta_b, mu_a, mu_b in ((0.02, 0.3, 0.5, 0.07), (0.2, 0.1, 0.1, 0.3)):
        u = mu_a * eta_a / (mu_b * eta_b)
        q, t = mdi_observables(eta_a, eta_b, mu_a, mu_b, env, "X")
        closed = (1.0 + u * u + 2.0 * eps * u) / (2.0 * (1.0 + u) ** 2)
        assert t / q == pytest.approx(closed, rel=1e-12)


@pytest.mark.filterwarnings("ignore:arriving intensity above 0.5")
def test_x_qber_rises_with_imbalance(mdi_env):
    # Symmetric in log(u), monotone away from balance, saturating at 1/2.
    env = no_dark(mdi_env)
    eta_a, eta_b, mu_b = 0.05, 0.5, 0.04

    def qber(u):
        mu_a = u * mu_b * eta_b / eta_a
        q, t = mdi_observables(eta_a, eta_b, mu_a, mu_b, env, "X")
        return t / q

    us = [1.0, 2.0, 5.0, 20.0, 100.0]
    vals = [qber(u) for u in us]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert vals[0] == pytest.approx(0.2525, abs=5e-4)
    # quoted rise: almost 42% by a tenfold mismatch
    assert qber(10.0) == pytest.approx(0.42, abs=0.01)
    assert qber(1e4) == pytest.approx(0.5, abs=1e-3)
    # party swap mirrors u to 1/u
    q, t = mdi_observables(eta_b, eta_a, mu_b, 5.0 * mu_b * eta_b / eta_a, env, "X")
    assert t / q == pytest.approx(qber(5.0), rel=1e-12)


def test_second_order_warning(mdi_env):
    with pytest.warns(UserWarning):
        mdi_observables(1.0, 1.0, 0.9, 0.9, mdi_env, "X")
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        mdi_observables(0.1, 0.1, 0.3, 0.3, mdi_env, "X")


def test_basis_validation(mdi_env):
    with pytest.raises(ValueError):
        mdi_observables(0.1, 0.1, 0.3, 0.3, mdi_env, "Y")


@settings(max_examples=150, deadline=None)
@given(
    eta_a=st.floats(1e-4, 0.9),
    eta_b=st.floats(1e-4, 0.9),
    mu_a=st.floats(0.0, 0.7),
    mu_b=st.floats(0.0, 0.7),
)
def test_error_gain_bounded_by_gain(eta_a, eta_b, mu_a, mu_b):
    for basis in ("X", "Z"):
        q, t = mdi_observables(eta_a, eta_b, mu_a, mu_b, ENV, basis)
        assert 0.0 <= t <= q <= 1.0


# ------------------------------------------------------------ parameter types

def test_params_validation():
    with pytest.raises(ValueError):
        MdiParams.symmetric(s=0.4, mu=0.05, nu=0.1)  # mu <= nu
    with pytest.raises(ValueError):
        MdiParams.symmetric(s=0.4, mu=0.3, nu=0.05, p_s=0.8, p_mu=0.3, p_nu=0.1)
    with pytest.raises(ValueError):
        MdiParams.symmetric(s=1.2, mu=0.3, nu=0.05)
    with pytest.raises(ValueError):
        MdiParams.symmetric(s=0.4, mu=0.3, nu=0.05, decoy_count=5)
    with pytest.raises(ValueError):
        # four decoys need 0 < nu2 < nu
        MdiParams.symmetric(s=0.4, mu=0.3, nu=0.05, nu2=0.07,
                            p_nu2=0.02, decoy_count=4)
    four = MdiParams.symmetric(s=0.4, mu=0.3, nu=0.05, nu2=0.01,
                               p_nu2=0.02, decoy_count=4)
    assert four.decoy_names() == ("mu", "nu", "nu2", "omega")
    assert MdiParams.symmetric(s=0.4, mu=0.3, nu=0.05, decoy_count=2).decoy_names() == ("mu", "nu")


def test_params_probability_remainder():
    p = SYM
    probs = p.probabilities("a")
    total = probs["s"] + probs["mu"] + probs["nu"] + probs["omega"]
    assert total == pytest.approx(1.0, abs=1e-12)
    assert probs["omega"] > 0.0


def test_make_observables_matches_pointwise(mdi_env):
    obs = make_observables(ETA_60, ETA_10, ASYM, mdi_env)
    assert set(obs.x_gain) == {(i, j) for i in ("mu", "nu", "omega")
                               for j in ("mu", "nu", "omega")}
    q, t = mdi_observables(ETA_60, ETA_10, ASYM.mu_a, ASYM.nu_b, mdi_env, "X")
    assert obs.x_gain[("mu", "nu")].observed == pytest.approx(q, rel=1e-12)
    assert obs.x_error_gain[("mu", "nu")].observed == pytest.approx(t, rel=1e-12)
    qz, tz = mdi_observables(ETA_60, ETA_10, ASYM.s_a, ASYM.s_b, mdi_env, "Z")
    assert obs.z_gain.observed == pytest.approx(qz, rel=1e-12)
    assert obs.z_error_gain.observed == pytest.approx(tz, rel=1e-12)
    # finite data: statistical bounds strictly bracket each observation
    pair = obs.x_gain[("nu", "nu")]
    assert pair.lower < pair.observed < pair.upper


def test_observables_validation(mdi_env):
    good = make_observables(0.05, 0.3, SYM, mdi_env)
    bad_errors = dict(good.x_error_gain)
    key = ("mu", "mu")
    bad_errors[key] = ConfidenceBound.exact(good.x_gain[key].observed * 1.5)
    with pytest.raises(ValueError):
        MdiObservables(x_gain=good.x_gain, x_error_gain=bad_errors,
                       z_gain=good.z_gain, z_error_gain=good.z_error_gain)


# ------------------------------------------------------------ analytic bounds

def test_analytic_y11_tightness():
    # Symmetric channels and intensities, no noise: the bound lands within
    # 10% of the true single-photon yield from the expansion oracle.
    env = ExperimentParams(dark_count_rate=0.0, detector_efficiency=0.65,
                           misalignment=0.0, error_correction_efficiency=1.16)
    p = MdiParams.symmetric(s=0.4, mu=0.3, nu=0.05)
    for eta in (0.02, 0.1, 0.5):
        obs = make_observables(eta, eta, p, env)
        got = decoy_bounds_analytic(obs, p)
        y_true, _ = pair_yield(1, 1, eta, eta, env, "X")
        assert got.y11_lower <= y_true + 1e-12
        assert got.y11_lower >= 0.9 * y_true


@settings(max_examples=80, deadline=None)
@given(
    eta_a=st.floats(1e-3, 0.9),
    eta_b=st.floats(1e-3, 0.9),
    mu_a=st.floats(0.15, 0.6),
    mu_b=st.floats(0.15, 0.6),
    frac_a=st.floats(0.05, 0.6),
    frac_b=st.floats(0.05, 0.6),
)
def test_analytic_bounds_are_valid(eta_a, eta_b, mu_a, mu_b, frac_a, frac_b):
    # Y11L never exceeds the true yield; e11U never undershoots the true error.
    p = MdiParams(s_a=0.4, mu_a=mu_a, nu_a=frac_a * mu_a,
                  s_b=0.4, mu_b=mu_b, nu_b=frac_b * mu_b)
    obs = make_observables(eta_a, eta_b, p, ENV)
    got = decoy_bounds_analytic(obs, p)
    y_true, t_true = pair_yield(1, 1, eta_a, eta_b, ENV, "X")
    assert got.y11_lower <= y_true + 1e-12
    assert got.e11_upper >= min(t_true / y_true, 0.5) - 1e-12


def test_single_photon_error_stays_small(mdi_env):
    # The decoy combination cancels the same-party background, so the
    # single-photon phase error tracks the misalignment scale, not the
    # 25% floor of the raw pair QBER.
    obs = make_observables(ETA_60, ETA_10, ASYM, mdi_env)
    got = decoy_bounds_analytic(obs, ASYM)
    eps = mdi_env.misalignment * (2.0 - mdi_env.misalignment)
    assert got.e11_upper >= eps / 2.0 - 1e-12
    assert got.e11_upper < 0.08


def test_e11_clamped_to_half():
    exact = ConfidenceBound.exact
    names = ("mu", "nu", "omega")
    gains = {(i, j): exact(1e-4) for i in names for j in names}
    errors = {(i, j): exact(5e-5) for i in names for j in names}
    obs = MdiObservables(x_gain=gains, x_error_gain=errors,
                         z_gain=exact(1e-4), z_error_gain=exact(5e-5))
    p = MdiParams.symmetric(s=0.4, mu=0.3, nu=0.05)
    got = decoy_bounds_analytic(obs, p)
    assert got.e11_upper == 0.5

    # negative error combination clamps at zero instead
    errors = {(i, j): exact(0.0) for i in names for j in names}
    errors[("nu", "omega")] = exact(5e-5)
    gains = {(i, j): exact(1e-4 if i == "nu" and j in ("nu", "omega") else 1e-6)
             for i in names for j in names}
    obs = MdiObservables(x_gain=gains, x_error_gain=errors,
                         z_gain=exact(1e-4), z_error_gain=exact(5e-5))
    got = decoy_bounds_analytic(obs, p)
    assert got.e11_upper >= 0.0


def test_bounds_type_validation():
    with pytest.raises(ValueError):
        SinglePhotonBounds(y11_lower=1.2, e11_upper=0.1)
    with pytest.raises(ValueError):
        SinglePhotonBounds(y11_lower=0.5, e11_upper=0.7)


def test_finite_size_infinite_data(mdi_env):
    env = dataclasses.replace(mdi_env, total_pulses=math.inf)
    obs = make_observables(ETA_60, ETA_10, ASYM, env)
    asym = decoy_bounds_analytic(obs, ASYM, finite_size=False)
    fs = decoy_bounds_analytic(obs, ASYM, finite_size=True)
    assert fs.y11_lower == asym.y11_lower
    assert fs.e11_upper == asym.e11_upper


def test_finite_size_widens_bounds(mdi_env):
    env = dataclasses.replace(mdi_env, total_pulses=1e11)
    obs = make_observables(ETA_60, ETA_10, ASYM, env)
    asym = decoy_bounds_analytic(obs, ASYM, finite_size=False)
    fs = decoy_bounds_analytic(obs, ASYM, finite_size=True)
    assert fs.y11_lower < asym.y11_lower
    assert fs.e11_upper > asym.e11_upper


def test_finite_size_monotone_in_pulses(mdi_env):
    vals = []
    for n in (1e10, 1e11, 1e13):
        env = dataclasses.replace(mdi_env, total_pulses=n)
        obs = make_observables(ETA_60, ETA_10, ASYM, env)
        vals.append(decoy_bounds_analytic(obs, ASYM, finite_size=True).y11_lower)
    assert vals[0] <= vals[1] <= vals[2]


# ---------------------------------------------------------- ridge and branches

RIDGE = MdiParams(s_a=0.4, mu_a=0.5, nu_a=0.2, s_b=0.3, mu_b=0.25, nu_b=0.1)


def _y11_at(mu_a, mu_b, env, eta_a=0.1, eta_b=0.1):
    p = dataclasses.replace(RIDGE, mu_a=mu_a, mu_b=mu_b)
    obs = make_observables(eta_a, eta_b, p, env)
    return decoy_bounds_analytic(obs, p).y11_lower


def test_branches_agree_on_ridge(mdi_env):
    # mu_a/mu_b equal to nu_a/nu_b: both case formulas coincide.
    obs = make_observables(0.1, 0.1, RIDGE, mdi_env)
    y_a, y_b = y11_branches(obs, RIDGE)
    assert y_a == pytest.approx(y_b, rel=1e-12)


def test_ridge_derivative_jump(mdi_env):
    # One-sided slopes of Y11L across the ridge differ by more than 1%.
    h = 1e-5
    up = (_y11_at(0.5 + h, 0.25, mdi_env) - _y11_at(0.5, 0.25, mdi_env)) / h
    dn = (_y11_at(0.5, 0.25, mdi_env) - _y11_at(0.5 - h, 0.25, mdi_env)) / h
    assert abs(up - dn) / abs(dn) > 0.01


def test_branch_a_decreases_in_mu_b(mdi_env):
    # The below-ridge branch loses yield as mu_b grows, everywhere in its case.
    h = 1e-6
    for mu_a in (0.25, 0.35, 0.45):
        for mu_b in (0.25, 0.3, 0.4):
            if mu_a / mu_b > RIDGE.nu_a / RIDGE.nu_b:
                continue

            def branch_a(mb):
                p = dataclasses.replace(RIDGE, mu_a=mu_a, mu_b=mb)
                obs = make_observables(0.1, 0.1, p, mdi_env)
                return y11_branches(obs, p)[0]

            assert branch_a(mu_b + h) < branch_a(mu_b)


def test_y11_peaks_on_ridge(mdi_env):
    # Scanning mu_b at fixed mu_a, the bound is best where the mu ratio
    # matches the nu ratio.
    grid = np.linspace(0.15, 0.6, 181)
    vals = [_y11_at(0.5, float(mb), mdi_env) for mb in grid]
    best = grid[int(np.argmax(vals))]
    ridge = 0.5 * RIDGE.nu_b / RIDGE.nu_a
    step = grid[1] - grid[0]
    assert abs(best - ridge) <= step + 1e-12


# -------------------------------------------------------------------- LP bounds

def test_lp_at_least_as_tight_as_analytic(mdi_env):
    for eta_a, eta_b, p in ((ETA_60, ETA_10, ASYM), (0.05, 0.05, SYM)):
        obs = make_observables(eta_a, eta_b, p, mdi_env)
        ana = decoy_bounds_analytic(obs, p)
        got = decoy_bounds_lp(obs, p)
        assert got.y11_lower >= ana.y11_lower - 1e-6
        y_true, t_true = pair_yield(1, 1, eta_a, eta_b, mdi_env, "X")
        assert got.y11_lower <= y_true + 1e-9
        assert got.e11_upper >= min(t_true / y_true, 0.5) - 1e-9
        assert 0.0 <= got.e11_upper <= 0.5


def test_lp_finite_size_never_tightens(mdi_env):
    ys = []
    for n in (1e10, 1e12, math.inf):
        env = dataclasses.replace(mdi_env, total_pulses=n)
        obs = make_observables(ETA_60, ETA_10, ASYM, env)
        ys.append(decoy_bounds_lp(obs, ASYM, finite_size=True).y11_lower)
    assert ys[0] <= ys[1] + 1e-12 <= ys[2] + 2e-12
    obs = make_observables(ETA_60, ETA_10, ASYM, mdi_env)
    asym = decoy_bounds_lp(obs, ASYM, finite_size=False).y11_lower
    assert ys[2] == pytest.approx(asym, abs=1e-12)


def _rate_with_decoys(decoy_count, env):
    # Shared decoy ladder viable even for the two-decoy variant: both decoy
    # ratios sit near the channel mismatch, which is what keeps e11U small
    # when no vacuum anchors the low end.
    extra = {}
    if decoy_count == 4:
        extra = dict(nu2_a=0.010, nu2_b=0.0007, p_nu2_a=0.05, p_nu2_b=0.05)
    p = dataclasses.replace(ASYM, decoy_count=decoy_count,
                            mu_a=0.171, mu_b=0.0092, nu_a=0.029, nu_b=0.0021,
                            p_nu_a=0.2, p_nu_b=0.2, **extra)
    obs = make_observables(ETA_60, ETA_10, p, env)
    bounds = decoy_bounds_lp(obs, p)
    e_z = obs.z_error_gain.observed / obs.z_gain.observed
    return key_rate_from_bounds(bounds, obs.z_gain.observed, e_z, p, env)


def test_decoy_count_rate_ordering(mdi_env):
    r2, r3, r4 = (_rate_with_decoys(k, mdi_env).rate_per_pulse for k in (2, 3, 4))
    assert 0.0 < r2 <= r3 + 1e-15 <= r4 + 2e-15


def test_lp_infeasible_observables_signaled():
    exact = ConfidenceBound.exact
    names = ("mu", "nu", "omega")
    gains = {(i, j): exact(1e-9) for i in names for j in names}
    gains[("nu", "nu")] = exact(0.5)  # cannot be half when mu pairs are empty
    errors = {(i, j): exact(0.0) for i in names for j in names}
    obs = MdiObservables(x_gain=gains, x_error_gain=errors,
                         z_gain=exact(1e-4), z_error_gain=exact(1e-5))
    p = MdiParams.symmetric(s=0.4, mu=0.3, nu=0.05)
    with pytest.raises(InfeasibleProblem):
        decoy_bounds_lp(obs, p)


# ------------------------------------------------------------------- key rate

def test_rate_hand_oracle(mdi_env):
    # Direct arithmetic on the rate formula with pinned component values.
    p = MdiParams.symmetric(s=0.4, mu=0.3, nu=0.05, p_s=0.5, p_mu=0.2, p_nu=0.2)
    bounds = SinglePhotonBounds(y11_lower=1e-3, e11_upper=0.02)
    got = key_rate_from_bounds(bounds, z_gain=5e-4, z_qber=0.01,
                               mdi=p, params=mdi_env)

    def h2(v):
        return -v * math.log2(v) - (1.0 - v) * math.log2(1.0 - v)

    single = 0.4 * math.exp(-0.4) * 0.4 * math.exp(-0.4) * 1e-3 * (1.0 - h2(0.02))
    ec = 1.16 * 5e-4 * h2(0.01)
    assert got.rate_per_pulse == pytest.approx(0.25 * (single - ec), rel=1e-12)
    assert got.rate_per_pulse > 0.0


def test_rate_clamps_at_zero(mdi_env):
    p = MdiParams.symmetric(s=0.4, mu=0.3, nu=0.05, p_s=0.5, p_mu=0.2, p_nu=0.2)
    bounds = SinglePhotonBounds(y11_lower=1e-3, e11_upper=0.02)
    got = key_rate_from_bounds(bounds, z_gain=5e-3, z_qber=0.25, mdi=p, params=mdi_env)
    assert got.rate_per_pulse == 0.0
    assert got.diagnostics["raw_rate"] < 0.0


def test_zero_gain_signals(mdi_env):
    env = no_dark(mdi_env)
    with pytest.raises(DomainError):
        mdi_key_rate(0.0, 0.0, ASYM, env)


def test_rate_pipeline_asymmetric_link(mdi_env):
    got = mdi_key_rate(ETA_60, ETA_10, ASYM, mdi_env)
    assert 1e-5 < got.rate_per_pulse < 5e-4
    assert 0.0 < got.diagnostics["e11_upper"] < 0.08


def test_rate_finite_size_order_of_magnitude(mdi_env):
    # At the asymmetric working point with 1e11 pulses the secure rate lands
    # within an order of magnitude of 3.1e-5 per pulse.
    env = dataclasses.replace(mdi_env, total_pulses=1e11)
    got = mdi_key_rate(ETA_60, ETA_10, ASYM, env, finite_size=True)
    asym = mdi_key_rate(ETA_60, ETA_10, ASYM, env, finite_size=False)
    assert 3.106e-6 < got.rate_per_pulse < 3.106e-4
    assert got.rate_per_pulse < asym.rate_per_pulse


def test_mdi_rate_broadcasts(mdi_env):
    grid = np.linspace(0.005, 0.08, 9)
    out = mdi_rate(0.05, grid, SYM, mdi_env)
    rates = out.rate_per_pulse
    assert rates.shape == grid.shape
    for k, eb in enumerate(grid):
        single = mdi_rate(0.05, float(eb), SYM, mdi_env)
        assert rates[k] == pytest.approx(single.rate_per_pulse, rel=1e-12, abs=1e-300)
    both = mdi_rate(grid, grid, SYM, mdi_env)
    assert both.rate_per_pulse.shape == grid.shape


# ------------------------------------------------------------- asymptotic G

def _g_prime(x, sa_p, sb, ed, fe):
    """The equivalent-intensity form: x enters only through exp(-sa_p/x)."""
    eps = ed * (2.0 - ed)
    q = 2.0 * sa_p * sb + (sb * sb + sa_p * sa_p) * eps
    e_z = eps * (sb + sa_p) ** 2 / (2.0 * q)
    h2 = binary_entropy
    return (sa_p * sb * math.exp(-sa_p / x) * math.exp(-sb)
            * (1.0 - h2(ed - ed * ed / 2.0))
            - q / 2.0 * fe * h2(e_z))


def test_g_substitution_identity():
    for x in (0.05, 0.3, 1.0, 2.0):
        for sa, sb in ((0.4, 0.2), (1.0, 0.5), (0.1, 0.9)):
            want = _g_prime(x, x * sa, sb, 0.005, 1.16)
            assert asymptotic_G(x, sa, sb, 0.005, 1.16) == pytest.approx(want, rel=1e-12)


def test_g_monotone_in_mismatch():
    # Fixed arriving signal sa_p: more transmissive A-arm helps, strictly.
    xs = [0.2, 0.5, 1.0, 2.0, 4.0]
    vals = [asymptotic_G(x, 0.25 / x, 0.2, 0.005, 1.16) for x in xs]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_g_extreme_mismatch_kills_rate(mdi_env):
    env = no_dark(mdi_env)
    for x in (1e-6, 1e6):
        assert asymptotic_G(x, 0.3, 0.3, 0.005, 1.16) <= 0.0
        q, t = mdi_observables(0.3 * x / (1 + x), 0.3 / (1 + x), 0.3, 0.3, env, "Z")
        assert t / q == pytest.approx(0.5, abs=1e-3)


def test_g_rejects_nonpositive_mismatch():
    with pytest.raises(DomainError):
        asymptotic_G(0.0, 0.3, 0.3, 0.005, 1.16)


def _g_max(x, ed=0.005, fe=1.16, s_grid=np.linspace(0.02, 1.5, 250)):
    return max(asymptotic_G(x, float(s), float(s), ed, fe) for s in s_grid)


def test_symmetric_intensity_cutoffs():
    # With s_a = s_b forced, the rate dies beyond two mismatch cut-offs that
    # are reciprocal to each other; inside, it stays positive.
    from scipy.optimize import brentq

    assert _g_max(1.0) > 0.0
    x_min = brentq(_g_max, 1e-3, 1.0, xtol=1e-12, rtol=1e-14)
    x_max = brentq(_g_max, 1.0, 1e3, xtol=1e-10, rtol=1e-14)
    assert x_min * x_max == pytest.approx(1.0, rel=1e-5)
    for x in (1.3 * x_min, 1.0, 0.7 * x_max):
        assert _g_max(x) > 0.0
    assert _g_max(0.7 * x_min) < 0.0
    assert _g_max(1.5 * x_max) < 0.0


def test_free_intensities_remove_cutoffs():
    # Free per-party signals keep the rate positive far beyond the
    # symmetric-intensity cut-offs (near x = 80 and its reciprocal here):
    # the favoured arm just dials its source down as 1/x.
    s_grid = np.geomspace(5e-4, 2.5, 160)
    for x in (120.0, 500.0):
        best = max(asymptotic_G(x, float(sa), 0.2, 0.005, 1.16) for sa in s_grid)
        assert best > 0.0
        mirrored = max(asymptotic_G(1.0 / x, 0.2, float(sb), 0.005, 1.16)
                       for sb in s_grid)
        assert mirrored > 0.0


def test_never_add_fibre():
    # Above x = 1, trimming A-side loss (larger x) only helps the optimum.
    sa_grid = np.linspace(0.02, 2.5, 160)
    sb_grid = np.linspace(0.02, 1.0, 80)

    def g_opt(x):
        return max(asymptotic_G(x, float(sa), float(sb), 0.005, 1.16)
                   for sa in sa_grid for sb in sb_grid)

    vals = [g_opt(x) for x in (1.0, 1.5, 2.5, 5.0)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))


def test_rate_scaling_in_distance(mdi_env):
    # At fixed mismatch x and fixed intensities the whole pipeline scales as
    # eta_B squared: -0.04 decades per km of B-side fibre at 0.2 dB/km.
    env = no_dark(mdi_env)

    def rate(l_b):
        eta_b = distance_to_transmittance(l_b)
        return mdi_key_rate(0.1 * eta_b, eta_b, ASYM, env).rate_per_pulse

    r10, r35, r60 = rate(10.0), rate(35.0), rate(60.0)
    assert r60 > 0.0
    assert (math.log10(r35) - math.log10(r10)) / 25.0 == pytest.approx(-0.04, rel=1e-9)
    assert (math.log10(r60) - math.log10(r35)) / 25.0 == pytest.approx(-0.04, rel=1e-9)


# -------------------------------------------------- observable stack and means

def test_observable_stack_shape(mdi_env):
    names, stack_fn = observable_stack(SYM, mdi_env)
    assert len(names) == len(set(names)) == 2 * 9 + 2
    grid = np.linspace(0.01, 0.2, 7)
    vals = stack_fn(0.05, grid)
    assert vals.shape == (len(names), grid.size)
    row = dict(zip(names, vals))
    q, t = mdi_observables(0.05, grid, SYM.mu_a, SYM.nu_b, mdi_env, "X")
    assert row["q_mu_nu"] == pytest.approx(q, rel=1e-12)
    assert row["t_mu_nu"] == pytest.approx(t, rel=1e-12)
    qz, tz = mdi_observables(0.05, grid, SYM.s_a, SYM.s_b, mdi_env, "Z")
    assert row["q_z"] == pytest.approx(qz, rel=1e-12)
    assert row["t_z"] == pytest.approx(tz, rel=1e-12)


def test_observable_means_round_trip(mdi_env):
    names, stack_fn = observable_stack(SYM, mdi_env)
    col = stack_fn(0.04, np.array([0.06]))[:, 0]
    means = dict(zip(names, col.tolist()))
    via_means = rate_from_observable_means(means, SYM, mdi_env)
    direct = mdi_key_rate(0.04, 0.06, SYM, mdi_env)
    assert via_means.rate_per_pulse == pytest.approx(direct.rate_per_pulse, rel=1e-10)


# -------------------------------------------------------- turbulent relay links

def test_integration_rate_delta_limit(mdi_env):
    joint = JointPdtc(Pdtc(0.04, 0.0), Pdtc(0.06, 0.0))
    got = mdi_integration_rate(joint, SYM, mdi_env)
    want = mdi_key_rate(0.04, 0.06, SYM, mdi_env)
    assert got.rate_per_pulse == pytest.approx(want.rate_per_pulse, rel=1e-9)


def test_observable_rate_delta_limit(mdi_env):
    joint = JointPdtc(Pdtc(0.04, 0.0), Pdtc(0.06, 0.0))
    got = mdi_observable_rate(joint, None, SYM, mdi_env)
    want = mdi_key_rate(0.04, 0.06, SYM, mdi_env)
    assert got.rate_per_pulse == pytest.approx(want.rate_per_pulse, rel=1e-9)
    assert got.diagnostics["fraction"] == pytest.approx(1.0, rel=1e-9)


def test_observable_rate_below_static(mdi_env):
    # Averaging the observables over a fluctuating channel costs key.
    static = mdi_key_rate(0.1, 0.1, SYM, mdi_env).rate_per_pulse
    assert static > 0.0
    for sigma in (0.3, 0.9):
        joint = JointPdtc(Pdtc(0.1, sigma), Pdtc(0.1, sigma))
        got = mdi_observable_rate(joint, None, SYM, mdi_env, rel_tol=1e-5)
        assert got.rate_per_pulse < static


def test_boundary_selection_sandwich(mdi_env):
    # Restricting to the positive-rate region recovers key relative to no
    # selection, but never beats pulse-wise integration.
    joint = JointPdtc(Pdtc(0.1, 0.6), Pdtc(0.1, 0.6))
    extraction = rate_boundary_domain(
        lambda ea, eb: mdi_rate(ea, eb, SYM, mdi_env), grid_lo=1e-4, grid_n=120)
    r_none = mdi_observable_rate(joint, None, SYM, mdi_env, rel_tol=1e-5)
    r_sel = mdi_observable_rate(joint, extraction.domain, SYM, mdi_env, rel_tol=1e-5)
    r_int = mdi_integration_rate(joint, SYM, mdi_env, rel_tol=1e-5)
    assert r_sel.rate_per_pulse >= r_none.rate_per_pulse - 1e-12
    assert r_sel.rate_per_pulse <= r_int.rate_per_pulse + 1e-12
