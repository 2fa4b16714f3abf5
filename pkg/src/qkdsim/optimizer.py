"""Box-constrained parameter search for the key-rate functions.

Coordinate descent with an iteratively refined line search is enough for
these rate landscapes: they are smooth, low-dimensional and close to
unimodal in each coordinate. The one structural trap is the decoy-ratio
ridge of the asymmetric MDI protocol, where the single-photon bound is
non-smooth along mu_A/mu_B = nu_A/nu_B and axis-aligned moves stall; the
polar descent walks that ridge by construction, replacing the four decoy
intensities with two radii and a shared angle whose tangent is the ratio.

Rate functions are treated as pure scalar maximization targets. Parameter
vectors that violate a protocol's feasibility constraints are rejected at
the sample level (the rate functions are never called on them) rather than
repaired, so the landscape the optimizer sees is exactly the constrained
one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .bb84 import Bb84Params, finite_size_bb84_rate
from .core import ExperimentParams
from .lp import InfeasibleProblem
from .mdi import MdiParams, mdi_key_rate
from .tfqkd import TfParams, tf_key_rate

PROTOCOLS = ("bb84", "mdi4", "mdi7", "tf_sym", "tf_asym_signal", "tf_asym_full")

# Starting values by dimension name; probabilities begin at 1/3, unmatched
# names at the box midpoint.
_START_BY_NAME = {
    "s": 0.4, "s_a": 0.4, "s_b": 0.4,
    "mu": 0.3, "mu_a": 0.3, "mu_b": 0.3,
    "nu": 0.05, "nu_a": 0.05, "nu_b": 0.05,
    "r_mu": 0.3 * math.sqrt(2.0), "r_nu": 0.05 * math.sqrt(2.0),
    "theta_munu": math.pi / 4.0,
    "added_loss_db": 0.0,
}


@dataclass(frozen=True)
class SearchConfig:
    """Line-search and descent resolution knobs."""

    coarse_samples: int = 100
    refine_samples: int = 10
    resolution: float = 1e-4
    rel_tol: float = 1e-6
    max_cycles: int = 30

    def __post_init__(self) -> None:
        if self.coarse_samples < 2:
            raise ValueError("coarse_samples must be at least 2")
        if self.refine_samples < 4:
            raise ValueError("refine_samples must be at least 4 to shrink the window")
        if self.resolution <= 0 or self.rel_tol < 0 or self.max_cycles < 1:
            raise ValueError("resolution/rel_tol/max_cycles out of range")


_DEFAULT = SearchConfig()


@dataclass(frozen=True)
class SearchSpace:
    """Named box with an optional feasibility filter and descent order.

    `polar_group` names four dimensions (mu_a, mu_b, nu_a, nu_b) that
    polar descent replaces with (r_mu, r_nu, theta_munu).
    """

    names: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    feasible: Callable[[np.ndarray], bool] | None = None
    descent_order: tuple[int, ...] | None = None
    polar_group: tuple[str, str, str, str] | None = None

    def __post_init__(self) -> None:
        if not self.names:
            raise ValueError("search space needs at least one dimension")
        if len(set(self.names)) != len(self.names):
            raise ValueError("dimension names must be unique")
        if len(self.lower) != len(self.names) or len(self.upper) != len(self.names):
            raise ValueError("bounds must match the dimension count")
        for name, lo, hi in zip(self.names, self.lower, self.upper):
            if not lo < hi:
                raise ValueError(f"empty interval for {name}: [{lo}, {hi}]")
        if self.descent_order is not None and sorted(self.descent_order) != list(
            range(len(self.names))
        ):
            raise ValueError("descent_order must be a permutation of the dimensions")
        if self.polar_group is not None:
            missing = [n for n in self.polar_group if n not in self.names]
            if len(self.polar_group) != 4 or missing:
                raise ValueError(f"polar_group must name four existing dims, missing {missing}")

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def order(self) -> tuple[int, ...]:
        return self.descent_order if self.descent_order is not None else tuple(range(self.dim))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def default_start(self) -> np.ndarray:
        x = np.empty(self.dim)
        for i, name in enumerate(self.names):
            if name.startswith("p_") or name.startswith("q_"):
                v = 1.0 / 3.0
            else:
                v = _START_BY_NAME.get(name, 0.5 * (self.lower[i] + self.upper[i]))
            x[i] = min(max(v, self.lower[i]), self.upper[i])
        return x


@dataclass
class OptimResult:
    """Best point (by name), its re-checked rate, and the search trace."""

    x: dict[str, float]
    rate: float
    evaluations: int
    converged: bool
    trace: list[float] = field(default_factory=list)


def line_search(
    fn: Callable[[float], float],
    bounds: tuple[float, float],
    config: SearchConfig | None = None,
) -> tuple[float, float]:
    """Maximize a 1D function: coarse scan, then refine around the incumbent.

    Each refinement resamples the interval between the incumbent's two
    neighbors until the sample spacing drops below `resolution`. Ties break
    toward the lower coordinate, so a flat function returns the interval's
    left edge.
    """
    cfg = config or _DEFAULT
    lo, hi = float(bounds[0]), float(bounds[1])
    if not lo <= hi:
        raise ValueError(f"invalid interval [{lo}, {hi}]")
    if lo == hi:
        return lo, fn(lo)
    xs = np.linspace(lo, hi, cfg.coarse_samples)
    vals = [fn(float(x)) for x in xs]
    k = int(np.argmax(vals))
    best_x, best_v = float(xs[k]), vals[k]
    spacing = (hi - lo) / (cfg.coarse_samples - 1)
    while spacing > cfg.resolution:
        w_lo = max(lo, best_x - spacing)
        w_hi = min(hi, best_x + spacing)
        xs = np.linspace(w_lo, w_hi, cfg.refine_samples)
        vals = [fn(float(x)) for x in xs]
        k = int(np.argmax(vals))
        if vals[k] > best_v or (vals[k] == best_v and float(xs[k]) < best_x):
            best_x, best_v = float(xs[k]), vals[k]
        spacing = (w_hi - w_lo) / (cfg.refine_samples - 1)
    return best_x, best_v


def coordinate_descent(
    rate_fn: Callable[[np.ndarray], float],
    space: SearchSpace,
    config: SearchConfig | None = None,
    x0: Sequence[float] | None = None,
) -> OptimResult:
    """Cyclic per-coordinate maximization with monotone incumbent.

    Each cycle line-searches every dimension in order, moving only on
    strict improvement; stops when a cycle improves the rate by less than
    `rel_tol` relative or after `max_cycles`. If nothing positive is ever
    sampled the result carries rate 0 and converged=False.
    """
    cfg = config or _DEFAULT
    evals = 0

    def guarded(vec: np.ndarray) -> float:
        nonlocal evals
        if space.feasible is not None and not space.feasible(vec):
            return -math.inf
        evals += 1
        return rate_fn(vec)

    x = np.array(x0 if x0 is not None else space.default_start(), dtype=float)
    if x.shape != (space.dim,):
        raise ValueError(f"start point must have {space.dim} entries")
    cur = guarded(x)
    trace: list[float] = []
    converged = False
    for _ in range(cfg.max_cycles):
        prev = cur
        for i in space.order:
            def along(t: float, i: int = i) -> float:
                vec = x.copy()
                vec[i] = t
                return guarded(vec)

            arg, val = line_search(along, (space.lower[i], space.upper[i]), cfg)
            if val > cur:
                x[i] = arg
                cur = val
        trace.append(max(cur, 0.0))
        if cur == -math.inf:
            break  # no feasible sample anywhere; a second cycle would repeat it
        if prev > 0.0 and cur - prev <= cfg.rel_tol * prev:
            converged = True
            break
    final = guarded(x)
    if not math.isfinite(final) or final <= 0.0:
        return OptimResult(
            x=dict(zip(space.names, x)), rate=0.0, evaluations=evals,
            converged=False, trace=trace,
        )
    return OptimResult(
        x=dict(zip(space.names, x)), rate=final, evaluations=evals,
        converged=converged, trace=trace,
    )


# ------------------------------------------------------------ polar descent

def _polar_view(space: SearchSpace):
    """Swap the four coupled decoy dims for (r_mu, r_nu, theta_munu).

    Returns the transformed space, the polar->cartesian map, and a wrapper
    turning a cartesian rate function into a polar one. The angle's tangent
    is the common ratio mu_a/mu_b = nu_a/nu_b, so every point the descent
    visits satisfies the ridge constraint by construction.
    """
    if space.polar_group is None:
        raise ValueError("space has no polar_group")
    g = [space.index(n) for n in space.polar_group]  # mu_a, mu_b, nu_a, nu_b
    keep = [i for i in range(space.dim) if i not in g]
    insert_at = sum(1 for i in keep if i < g[0])
    names = [space.names[i] for i in keep]
    lower = [space.lower[i] for i in keep]
    upper = [space.upper[i] for i in keep]
    r_mu_hi = math.hypot(space.upper[g[0]], space.upper[g[1]])
    r_nu_hi = math.hypot(space.upper[g[2]], space.upper[g[3]])
    r_mu_lo = max(space.lower[g[0]], space.lower[g[1]])
    r_nu_lo = max(space.lower[g[2]], space.lower[g[3]])
    for off, (n, lo, hi) in enumerate(
        [
            ("r_mu", r_mu_lo, r_mu_hi),
            ("r_nu", r_nu_lo, r_nu_hi),
            ("theta_munu", 0.05, math.pi / 2.0 - 0.05),
        ]
    ):
        names.insert(insert_at + off, n)
        lower.insert(insert_at + off, lo)
        upper.insert(insert_at + off, hi)
    polar_idx = (insert_at, insert_at + 1, insert_at + 2)
    src = [j for j in range(len(names)) if j not in polar_idx]

    def to_cartesian(pvec: np.ndarray) -> np.ndarray:
        vec = np.empty(space.dim)
        r_mu, r_nu, theta = (pvec[j] for j in polar_idx)
        sin_t, cos_t = math.sin(theta), math.cos(theta)
        vec[g[0]] = r_mu * sin_t
        vec[g[1]] = r_mu * cos_t
        vec[g[2]] = r_nu * sin_t
        vec[g[3]] = r_nu * cos_t
        for dst, j in zip(keep, src):
            vec[dst] = pvec[j]
        return vec

    def feasible(pvec: np.ndarray) -> bool:
        vec = to_cartesian(pvec)
        for i in g:
            if not space.lower[i] <= vec[i] <= space.upper[i]:
                return False
        return space.feasible is None or space.feasible(vec)

    polar_space = SearchSpace(
        names=tuple(names), lower=tuple(lower), upper=tuple(upper), feasible=feasible
    )
    return polar_space, to_cartesian


def polar_coupled_descent(
    rate_fn: Callable[[np.ndarray], float],
    space: SearchSpace,
    config: SearchConfig | None = None,
    x0: Sequence[float] | None = None,
) -> OptimResult:
    """Coordinate descent over [.., r_mu, r_nu, theta_munu, ..] for spaces
    with a polar_group; the emitted point is cartesian and satisfies
    mu_a/mu_b = nu_a/nu_b up to float rounding."""
    polar_space, to_cartesian = _polar_view(space)
    result = coordinate_descent(
        lambda p: rate_fn(to_cartesian(p)), polar_space, config, x0
    )
    cart = to_cartesian(np.array([result.x[n] for n in polar_space.names]))
    result.x = dict(zip(space.names, cart))
    return result


def multistart(
    rate_fn: Callable[[np.ndarray], float],
    space: SearchSpace,
    n_starts: int,
    seed: int = 0,
    config: SearchConfig | None = None,
) -> OptimResult:
    """Best of coordinate descents from the default start plus random ones.

    Extra starting points are drawn uniformly from the box, preferring
    feasible points with a strictly positive rate (up to 200 draws each);
    if the budget runs out, merely-feasible points fill the remainder.
    Deterministic for a given seed; ties resolve to the earliest start.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    rng = np.random.default_rng(seed)
    starts: list[np.ndarray] = [space.default_start()]
    fallbacks: list[np.ndarray] = []
    probe_evals = 0
    tries = 0
    while len(starts) < n_starts and tries < 200 * n_starts:
        tries += 1
        cand = rng.uniform(space.lower, space.upper)
        if space.feasible is not None and not space.feasible(cand):
            continue
        probe_evals += 1
        if rate_fn(cand) > 0.0:
            starts.append(cand)
        else:
            fallbacks.append(cand)
    while len(starts) < n_starts and fallbacks:
        starts.append(fallbacks.pop(0))

    best: OptimResult | None = None
    total = probe_evals
    for x0 in starts:
        res = coordinate_descent(rate_fn, space, config, x0=x0)
        total += res.evaluations
        if best is None or res.rate > best.rate:
            best = res
    assert best is not None
    best.evaluations = total
    return best


# ------------------------------------------------------- protocol dispatch

def _prob_budget_ok(*probs: float) -> bool:
    return all(p > 0.0 for p in probs) and sum(probs) < 0.999


def _bb84_setup(eta: float, params: ExperimentParams):
    space = SearchSpace(
        names=("mu", "nu", "p_mu", "p_nu", "q_x"),
        lower=(1e-3, 1e-4, 1e-3, 1e-3, 0.01),
        upper=(0.99, 0.5, 0.99, 0.99, 0.99),
        feasible=lambda v: v[0] > v[1] and _prob_budget_ok(v[2], v[3]),
    )

    def rate(v: np.ndarray) -> float:
        try:
            bp = Bb84Params(
                signal_intensity=v[0], decoy_intensity=v[1],
                p_signal=v[2], p_decoy=v[3], basis_prob=v[4],
            )
            return finite_size_bb84_rate(eta, params, bp).rate_per_pulse
        except ValueError:
            return -math.inf

    return space, rate


def _mdi_feasible(v: np.ndarray, asym: bool) -> bool:
    if asym:
        return (
            v[2] > v[4] and v[3] > v[5]
            and _prob_budget_ok(v[6], v[7], v[8]) and _prob_budget_ok(v[9], v[10], v[11])
        )
    return v[1] > v[2] and _prob_budget_ok(v[3], v[4], v[5])


def _mdi_setup(protocol: str, eta_a: float, eta_b: float, params: ExperimentParams,
               finite_size: bool, extra_loss_dim: bool):
    asym = protocol == "mdi7"
    if asym:
        names = ["s_a", "s_b", "mu_a", "mu_b", "nu_a", "nu_b",
                 "p_s_a", "p_mu_a", "p_nu_a", "p_s_b", "p_mu_b", "p_nu_b"]
        lower = [1e-3] * 2 + [1e-3, 1e-3, 1e-4, 1e-4] + [1e-3] * 6
        upper = [0.99] * 4 + [0.5] * 2 + [0.99] * 6
        polar = ("mu_a", "mu_b", "nu_a", "nu_b")
    else:
        names = ["s", "mu", "nu", "p_s", "p_mu", "p_nu"]
        lower = [1e-3, 1e-3, 1e-4, 1e-3, 1e-3, 1e-3]
        upper = [0.99, 0.99, 0.5, 0.99, 0.99, 0.99]
        polar = None
    if extra_loss_dim:
        names.append("added_loss_db")
        lower.append(0.0)
        upper.append(10.0)
    n_base = len(names) - (1 if extra_loss_dim else 0)

    def feasible(v: np.ndarray) -> bool:
        return _mdi_feasible(v, asym)

    space = SearchSpace(
        names=tuple(names), lower=tuple(lower), upper=tuple(upper),
        feasible=feasible, polar_group=polar,
    )

    def rate(v: np.ndarray) -> float:
        ea, eb = eta_a, eta_b
        if extra_loss_dim:
            damp = 10.0 ** (-v[n_base] / 10.0)
            if ea >= eb:
                ea = ea * damp
            else:
                eb = eb * damp
        try:
            if asym:
                m = MdiParams(
                    s_a=v[0], s_b=v[1], mu_a=v[2], mu_b=v[3], nu_a=v[4], nu_b=v[5],
                    p_s_a=v[6], p_mu_a=v[7], p_nu_a=v[8],
                    p_s_b=v[9], p_mu_b=v[10], p_nu_b=v[11],
                )
            else:
                m = MdiParams.symmetric(v[0], v[1], v[2], p_s=v[3], p_mu=v[4], p_nu=v[5])
            return mdi_key_rate(ea, eb, m, params, finite_size=finite_size).rate_per_pulse
        except ValueError:
            return -math.inf

    return space, rate


def _tf_setup(protocol: str, eta_a: float, eta_b: float, params: ExperimentParams,
              mode: str):
    ed = params.misalignment
    if protocol == "tf_sym":
        names = ("s", "mu", "nu", "p_s", "p_mu", "p_nu")
        lower = (1e-3, 1e-3, 1e-4, 1e-3, 1e-3, 1e-3)
        upper = (0.5, 0.5, 0.2, 0.99, 0.99, 0.99)

        def build(v: np.ndarray) -> TfParams:
            return TfParams.symmetric(
                v[0], v[1], v[2],
                p_s_a=v[3], p_mu_a=v[4], p_nu_a=v[5],
                p_s_b=v[3], p_mu_b=v[4], p_nu_b=v[5],
            ).with_misalignment(ed)

        def feasible(v: np.ndarray) -> bool:
            return v[1] > v[2] and _prob_budget_ok(v[3], v[4], v[5])

    elif protocol == "tf_asym_signal":
        names = ("s_a", "s_b", "mu", "nu", "p_s", "p_mu", "p_nu")
        lower = (1e-3, 1e-3, 1e-3, 1e-4, 1e-3, 1e-3, 1e-3)
        upper = (0.5, 0.5, 0.5, 0.2, 0.99, 0.99, 0.99)

        def build(v: np.ndarray) -> TfParams:
            return TfParams(
                s_a=v[0], s_b=v[1], mu_a=v[2], nu_a=v[3], mu_b=v[2], nu_b=v[3],
                p_s_a=v[4], p_mu_a=v[5], p_nu_a=v[6],
                p_s_b=v[4], p_mu_b=v[5], p_nu_b=v[6],
            ).with_misalignment(ed)

        def feasible(v: np.ndarray) -> bool:
            return v[2] > v[3] and _prob_budget_ok(v[4], v[5], v[6])

    else:  # tf_asym_full
        names = ("s_a", "s_b", "mu_a", "nu_a", "mu_b", "nu_b",
                 "p_s_a", "p_mu_a", "p_nu_a", "p_s_b", "p_mu_b", "p_nu_b")
        lower = (1e-3, 1e-3, 1e-3, 1e-4, 1e-3, 1e-4) + (1e-3,) * 6
        upper = (0.5, 0.5, 0.5, 0.2, 0.5, 0.2) + (0.99,) * 6

        def build(v: np.ndarray) -> TfParams:
            return TfParams(
                s_a=v[0], s_b=v[1], mu_a=v[2], nu_a=v[3], mu_b=v[4], nu_b=v[5],
                p_s_a=v[6], p_mu_a=v[7], p_nu_a=v[8],
                p_s_b=v[9], p_mu_b=v[10], p_nu_b=v[11],
            ).with_misalignment(ed)

        def feasible(v: np.ndarray) -> bool:
            return (
                v[2] > v[3] and v[4] > v[5]
                and _prob_budget_ok(v[6], v[7], v[8]) and _prob_budget_ok(v[9], v[10], v[11])
            )

    space = SearchSpace(names=names, lower=lower, upper=upper, feasible=feasible)

    def rate(v: np.ndarray) -> float:
        try:
            tf = build(v)
            return tf_key_rate(eta_a, eta_b, tf, params, mode=mode).rate_per_pulse
        except (ValueError, InfeasibleProblem):
            return -math.inf

    return space, rate


def optimize_protocol(
    protocol: str,
    channel,
    params: ExperimentParams,
    *,
    mode: str | None = None,
    n_starts: int | None = None,
    seed: int = 0,
    config: SearchConfig | None = None,
    extra_loss_dim: bool = False,
) -> OptimResult:
    """Optimize a protocol's controllable parameters for one environment.

    `channel` is a single transmittance for bb84 and an (eta_a, eta_b) pair
    for the two-channel protocols. `mode` selects the rate analysis:
    "finite" (default) or "asymptotic" for MDI, and the tf_key_rate modes
    for TF (default "lp"). MDI-7 descends in polar decoy coordinates; TF
    protocols default to 10 starts because the LP-backed landscape has more
    than one basin. `extra_loss_dim` (mdi7 only) appends an added-loss
    variable on the better arm, used to check that deliberately wasting
    transmittance never helps.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if extra_loss_dim and protocol != "mdi7":
        raise ValueError("extra_loss_dim is only meaningful for mdi7")

    if protocol == "bb84":
        eta = float(channel)
        space, rate = _bb84_setup(eta, params)
        starts = n_starts if n_starts is not None else 1
        return multistart(rate, space, starts, seed=seed, config=config)

    eta_a, eta_b = (float(channel[0]), float(channel[1]))
    if protocol in ("mdi4", "mdi7"):
        if mode is None:
            mode = "finite"
        if mode not in ("finite", "asymptotic"):
            raise ValueError(f"unknown MDI mode {mode!r}")
        space, rate = _mdi_setup(
            protocol, eta_a, eta_b, params, mode == "finite", extra_loss_dim
        )
        if protocol == "mdi7":
            polar_space, to_cartesian = _polar_view(space)
            starts = n_starts if n_starts is not None else 1
            res = multistart(
                lambda p: rate(to_cartesian(p)), polar_space, starts,
                seed=seed, config=config,
            )
            cart = to_cartesian(np.array([res.x[n] for n in polar_space.names]))
            res.x = dict(zip(space.names, cart))
            return res
        starts = n_starts if n_starts is not None else 1
        return multistart(rate, space, starts, seed=seed, config=config)

    if mode is None:
        mode = "lp"
    if mode not in ("infinite_decoy", "lp", "lp_finite"):
        raise ValueError(f"unknown TF mode {mode!r}")
    space, rate = _tf_setup(protocol, eta_a, eta_b, params, mode)
    starts = n_starts if n_starts is not None else 10
    return multistart(rate, space, starts, seed=seed, config=config)
