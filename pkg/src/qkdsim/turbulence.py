"""Log-normal turbulence channels and real-time post-selection rate models.

Transmittance statistics are integrated with adaptive Gauss-Legendre
panels on u = ln(eta), where the truncated log-normal weight is exactly
a Gaussian. Panels are merged in a fixed left-to-right order, so results
are deterministic. Nothing here depends on scipy; the test suite checks
the quadrature against the closed erf expressions instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable

import numpy as np

from .core import DomainError, ExperimentParams, KeyRateResult

_GL10 = np.polynomial.legendre.leggauss(10)
_GL20 = np.polynomial.legendre.leggauss(20)
_TAIL = 13.0            # integrate ln(eta) over log_mean +- _TAIL sigma
_SQRT2PI = math.sqrt(2.0 * math.pi)
_EMPTY = (1.0, 0.0)     # empty eta_B section, lo > hi


def _panel(fn, lo: float, hi: float, nodes, weights):
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    vals = np.asarray(fn(mid + half * nodes), dtype=float)
    return half * (vals @ weights)


def _adaptive(fn, a: float, b: float, *, rel_tol: float = 1e-9,
              breakpoints=(), max_depth: int = 40):
    """Adaptive Gauss-Legendre on [a, b] with a GL20-vs-GL10 error gauge.

    fn is vectorized over the node array and may return (n,) values or a
    (K, n) stack; the stack is refined on its worst component.
    """
    if not a < b:
        return 0.0
    edges = [a]
    for p in sorted({float(x) for x in breakpoints}):
        if edges[-1] < p < b:
            edges.append(p)
    edges.append(b)
    panels = list(zip(edges[:-1], edges[1:]))

    coarse = None
    for lo, hi in panels:
        q = _panel(fn, lo, hi, *_GL20)
        coarse = q if coarse is None else coarse + q
    scale = float(np.max(np.abs(coarse)))
    if not math.isfinite(scale) or scale < 1e-300:
        scale = 1e-300
    width = b - a

    total = None
    stack = [(lo, hi, 0) for lo, hi in reversed(panels)]
    while stack:
        lo, hi, depth = stack.pop()
        i20 = _panel(fn, lo, hi, *_GL20)
        i10 = _panel(fn, lo, hi, *_GL10)
        err = float(np.max(np.abs(i20 - i10)))
        # the 1e-14*scale term is the roundoff floor; without it a kink
        # panel can split exponentially chasing noise below the gauge
        budget = scale * (rel_tol * (hi - lo) / width + 1e-14)
        if err <= budget or depth >= max_depth:
            total = i20 if total is None else total + i20
        else:
            mid = 0.5 * (lo + hi)
            stack.append((mid, hi, depth + 1))
            stack.append((lo, mid, depth + 1))
    return total


def _ones(e):
    return np.ones_like(e)


def _ident(e):
    return np.asarray(e, dtype=float)


@dataclass(frozen=True)
class Pdtc:
    """Transmittance distribution of a turbulent channel.

    Log-normal in eta with mean parameter eta0, truncated to (0, 1] and
    renormalized. sigma = 0 degenerates to a point mass at eta0, which is
    the static-channel limit.
    """

    eta0: float
    sigma: float

    def __post_init__(self) -> None:
        if not 0.0 < self.eta0 <= 1.0:
            raise ValueError(f"eta0 must be in (0,1], got {self.eta0}")
        if not 0.0 <= self.sigma <= 1.5:
            raise ValueError(f"sigma must be in [0,1.5], got {self.sigma}")

    @property
    def log_mean(self) -> float:
        """Location parameter of ln(eta): ln(eta0) - sigma^2/2."""
        return math.log(self.eta0) - 0.5 * self.sigma ** 2

    @cached_property
    def _norm(self) -> float:
        # mass the untruncated log-normal leaves inside (0, 1]
        if self.sigma == 0.0:
            return 1.0
        return float(self._raw(_ones, 0.0, 1.0, _skip_norm=True))

    def _raw(self, fn, eta_lo: float = 0.0, eta_hi: float = 1.0,
             rel_tol: float = 1e-9, _skip_norm: bool = False):
        """Integral of fn(eta) against the untruncated log-normal weight.

        Runs over [eta_lo, eta_hi] intersected with (0, 1]. fn must accept
        an eta array and may return (n,) or (K, n).
        """
        if self.sigma == 0.0:
            v = np.asarray(fn(np.array([self.eta0])), dtype=float)
            v0 = v[..., 0]
            if not eta_lo <= self.eta0 <= eta_hi:
                v0 = np.zeros_like(v0)
            return float(v0) if v0.ndim == 0 else v0
        m, s = self.log_mean, self.sigma
        lo = m - _TAIL * s
        if eta_lo > 0.0:
            lo = max(lo, math.log(eta_lo))
        hi = min(0.0, m + _TAIL * s)
        if eta_hi < 1.0:
            hi = min(hi, math.log(eta_hi))
        if lo >= hi:
            v = np.asarray(fn(np.array([self.eta0])), dtype=float)
            z = np.zeros_like(v[..., 0])
            return float(z) if z.ndim == 0 else z
        c = 1.0 / (s * _SQRT2PI)

        def weighted(u):
            w = c * np.exp(-0.5 * ((u - m) / s) ** 2)
            return np.asarray(fn(np.exp(u)), dtype=float) * w

        brk = [m + k * s for k in (-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0)]
        return _adaptive(weighted, lo, hi, rel_tol=rel_tol, breakpoints=brk)

    def density(self, eta):
        """Renormalized truncated density; zero outside (0, 1]."""
        e = np.asarray(eta, dtype=float)
        if self.sigma == 0.0:
            out = np.where(e == self.eta0, np.inf, 0.0)
        else:
            m, s = self.log_mean, self.sigma
            ok = (e > 0.0) & (e <= 1.0)
            safe = np.where(ok, e, 1.0)
            pdf = np.exp(-0.5 * ((np.log(safe) - m) / s) ** 2) / (safe * s * _SQRT2PI)
            out = np.where(ok, pdf / self._norm, 0.0)
        return float(out) if np.ndim(eta) == 0 else out

    def fraction(self, eta_t: float) -> float:
        """Post-selected mass P(eta >= eta_t)."""
        return float(self._raw(_ones, eta_t)) / self._norm

    def expect(self, fn, eta_t: float):
        """Conditional mean of fn(eta) over the selected region eta >= eta_t."""
        mass = self._raw(_ones, eta_t)
        if mass / self._norm < 1e-12:
            raise DomainError(f"selection at threshold {eta_t} keeps no mass")
        val = self._raw(fn, eta_t)
        return val / mass

    def selected_mean(self, eta_t: float) -> float:
        return float(self.expect(_ident, eta_t))


def pdtc_density(pdtc: Pdtc, eta):
    return pdtc.density(eta)


def selected_stats(pdtc: Pdtc, eta_t: float) -> tuple:
    """Selected fraction and conditional mean transmittance above eta_t."""
    frac = pdtc.fraction(eta_t)
    if frac < 1e-12:
        raise DomainError(f"selection at threshold {eta_t} keeps no mass")
    return frac, pdtc.selected_mean(eta_t)


def _rate_value(out) -> Any:
    return out.rate_per_pulse if isinstance(out, KeyRateResult) else out


def _rate_array(rate_fn, etas) -> np.ndarray:
    etas = np.asarray(etas, dtype=float)
    try:
        vals = np.asarray(_rate_value(rate_fn(etas)), dtype=float)
        return np.broadcast_to(vals, etas.shape).astype(float)
    except (TypeError, ValueError, DomainError):
        flat = [float(_rate_value(rate_fn(float(e)))) for e in etas.ravel()]
        return np.array(flat).reshape(etas.shape)


def simplified_rate(rate_fn, pdtc: Pdtc, eta_t: float,
                    finite_size: bool = False) -> KeyRateResult:
    """Post-selection rate model: fraction times the rate at the selected mean.

    With finite_size the rate function is called as rate_fn(mean, fraction)
    so the caller can shrink its pulse budget to N * fraction.
    """
    try:
        frac, mean = selected_stats(pdtc, eta_t)
    except DomainError:
        return KeyRateResult.clamped(0.0, fraction=0.0, threshold=eta_t)
    out = rate_fn(mean, frac) if finite_size else rate_fn(mean)
    raw = frac * float(_rate_value(out))
    return KeyRateResult.clamped(raw, fraction=frac, selected_mean=mean,
                                 threshold=eta_t)


def rate_wise_rate(rate_fn, pdtc: Pdtc, eta_t: float,
                   rel_tol: float = 1e-9) -> KeyRateResult:
    """Upper-bound model: integral of rate_fn(eta) over the selected density."""
    if pdtc.sigma == 0.0:
        if pdtc.eta0 >= eta_t:
            raw = float(_rate_value(rate_fn(pdtc.eta0)))
        else:
            raw = 0.0
        return KeyRateResult.clamped(raw, threshold=eta_t)
    val = pdtc._raw(lambda e: _rate_array(rate_fn, e), eta_t, rel_tol=rel_tol)
    return KeyRateResult.clamped(float(val) / pdtc._norm, threshold=eta_t)


def prefixed_threshold(rate_fn, rel_tol: float = 1e-4, grid=None) -> float:
    """Critical transmittance of a rate function: the optimal fixed threshold.

    By construction this depends only on the rate function, not on any
    channel distribution. Brackets on a log grid, then bisects
    geometrically.
    """
    if grid is None:
        grid = np.logspace(-7.0, 0.0, 200)
    vals = _rate_array(rate_fn, grid)
    positive = vals > 0.0
    if not positive.any():
        raise DomainError("rate is nonpositive over the whole grid")
    first = int(np.argmax(positive))
    if first == 0:
        return float(grid[0])
    lo, hi = float(grid[first - 1]), float(grid[first])
    while hi / lo - 1.0 > rel_tol:
        mid = math.sqrt(lo * hi)
        if float(_rate_value(rate_fn(mid))) > 0.0:
            hi = mid
        else:
            lo = mid
    return hi


def rytov_sigma(cn2: float, k: float, path_length: float) -> float:
    """Scintillation parameter of a horizontal path in weak turbulence."""
    if cn2 < 0 or k <= 0 or path_length <= 0:
        raise ValueError("cn2 must be >= 0; k and path_length positive")
    return math.sqrt(1.23 * cn2 * k ** (7.0 / 6.0) * path_length ** (11.0 / 6.0))


def fuzzy_threshold_stats(pdtc: Pdtc, threshold_distribution) -> tuple:
    """Selection stats when the threshold itself fluctuates.

    threshold_distribution is (eta_t0, sigma_t): a Gaussian threshold
    density, truncated to [0, 1). Averages the selected mass and the
    selected first moment over that density; sigma_t = 0 reproduces the
    sharp-threshold statistics exactly.
    """
    t0, st = threshold_distribution
    if st < 0:
        raise ValueError("threshold spread must be nonnegative")
    if st == 0.0:
        return selected_stats(pdtc, t0)
    lo = max(0.0, t0 - 10.0 * st)
    hi = min(1.0 - 1e-12, t0 + 10.0 * st)
    if lo >= hi:
        raise DomainError("threshold distribution has no mass inside [0,1)")
    c = 1.0 / (st * _SQRT2PI)

    def gauss(t):
        return c * np.exp(-0.5 * ((t - t0) / st) ** 2)

    brk = [t0 + k * st for k in (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0)]
    brk.append(pdtc.eta0)
    qz = float(_adaptive(gauss, lo, hi, breakpoints=brk))

    def mass_rows(ts):
        ts = np.atleast_1d(ts)
        rows = np.array([(float(pdtc._raw(_ones, float(t))),
                          float(pdtc._raw(_ident, float(t)))) for t in ts]).T
        return rows * gauss(ts)

    out = _adaptive(mass_rows, lo, hi, rel_tol=1e-7, breakpoints=brk)
    mass_avg, m1_avg = float(out[0]), float(out[1])
    frac = mass_avg / (qz * pdtc._norm)
    if frac < 1e-12:
        raise DomainError("fuzzy selection keeps no mass")
    return frac, m1_avg / mass_avg


# --------------------------------------------------------------- two channels

@dataclass(frozen=True)
class JointPdtc:
    """Independent transmittance distributions of the two arms."""

    a: Pdtc
    b: Pdtc

    def density(self, eta_a, eta_b):
        return self.a.density(eta_a) * self.b.density(eta_b)


@dataclass(frozen=True)
class SelectionDomain:
    """Post-selection region over one or two arm transmittances.

    Variants: "threshold" (single arm), "all" (keep everything), "square"
    (per-arm thresholds), "band" (per-arm thresholds plus bounds on the
    mismatch x = eta_A/eta_B) and "boundary" (the positive-rate region of
    some rate surface, stored as a log-log polyline and interpolated).
    """

    kind: str
    eta_t: float = 0.0
    eta_at: float = 0.0
    eta_bt: float = 0.0
    x_min: float = 0.0
    x_max: float = math.inf
    grid_log_a: tuple = ()
    lo_log_b: tuple = ()
    hi_log_b: tuple = ()

    @classmethod
    def no_selection(cls) -> "SelectionDomain":
        return cls("all")

    @classmethod
    def threshold(cls, eta_t: float) -> "SelectionDomain":
        return cls("threshold", eta_t=eta_t)

    @classmethod
    def square(cls, eta_at: float, eta_bt: float) -> "SelectionDomain":
        return cls("square", eta_at=eta_at, eta_bt=eta_bt)

    @classmethod
    def ratio_band(cls, eta_at: float, eta_bt: float, x_min: float,
                   x_max: float) -> "SelectionDomain":
        if not 0.0 <= x_min < x_max:
            raise ValueError("need 0 <= x_min < x_max")
        return cls("band", eta_at=eta_at, eta_bt=eta_bt, x_min=x_min, x_max=x_max)

    @cached_property
    def _ga(self) -> np.ndarray:
        return np.asarray(self.grid_log_a, dtype=float)

    @cached_property
    def _lb(self) -> np.ndarray:
        return np.asarray(self.lo_log_b, dtype=float)

    @cached_property
    def _hb(self) -> np.ndarray:
        return np.asarray(self.hi_log_b, dtype=float)

    def section(self, eta_a: float) -> tuple:
        """eta_B interval selected at fixed eta_A; lo > hi when empty."""
        if self.kind == "all":
            return 0.0, 1.0
        if self.kind == "square":
            return (self.eta_bt, 1.0) if eta_a >= self.eta_at else _EMPTY
        if self.kind == "band":
            if eta_a < self.eta_at:
                return _EMPTY
            lo = self.eta_bt
            if math.isfinite(self.x_max):
                lo = max(lo, eta_a / self.x_max)
            hi = 1.0 if self.x_min <= 0.0 else min(1.0, eta_a / self.x_min)
            return (lo, hi) if lo < hi else _EMPTY
        if self.kind == "boundary":
            la = math.log(eta_a) if eta_a > 0 else -math.inf
            if la < self._ga[0] or la > self._ga[-1]:
                return _EMPTY
            lo = math.exp(float(np.interp(la, self._ga, self._lb)))
            hi = math.exp(float(np.interp(la, self._ga, self._hb)))
            return (lo, hi) if lo < hi else _EMPTY
        raise ValueError(f"no two-arm section for domain kind {self.kind!r}")

    def contains(self, eta_a, eta_b=None):
        ea = np.asarray(eta_a, dtype=float)
        if self.kind == "threshold":
            out = ea >= self.eta_t
            return bool(out) if out.ndim == 0 else out
        eb = np.asarray(eta_b, dtype=float)
        if self.kind == "all":
            out = np.broadcast_arrays(ea, eb)[0] == np.broadcast_arrays(ea, eb)[0]
        elif self.kind == "square":
            out = (ea >= self.eta_at) & (eb >= self.eta_bt)
        elif self.kind == "band":
            lo = np.full_like(eb, self.eta_bt)
            if math.isfinite(self.x_max):
                lo = np.maximum(lo, ea / self.x_max)
            hi = np.ones_like(eb)
            if self.x_min > 0.0:
                hi = np.minimum(hi, ea / self.x_min)
            out = (ea >= self.eta_at) & (eb >= lo) & (eb <= hi)
        elif self.kind == "boundary":
            la = np.log(np.maximum(ea, 1e-300))
            lb = np.log(np.maximum(eb, 1e-300))
            inside = (la >= self._ga[0]) & (la <= self._ga[-1])
            lo = np.interp(la, self._ga, self._lb)
            hi = np.interp(la, self._ga, self._hb)
            out = inside & (lb >= lo) & (lb <= hi)
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        return bool(out) if out.ndim == 0 else out

    def outer_limits(self) -> tuple:
        """eta_A range with possibly nonempty sections, plus break etas."""
        if self.kind in ("all", "threshold"):
            return 0.0, 1.0, ()
        if self.kind == "square":
            return self.eta_at, 1.0, (self.eta_at,)
        if self.kind == "band":
            lo = max(self.eta_at, self.eta_bt * self.x_min)
            hi = min(1.0, self.x_max)
            return lo, hi, (lo, hi)
        if self.kind == "boundary":
            lo, hi = math.exp(self._ga[0]), math.exp(self._ga[-1])
            return lo, hi, (lo, hi)
        raise ValueError(f"unknown domain kind {self.kind!r}")


def domain_integral(joint: JointPdtc, fn, domain: SelectionDomain | None = None,
                    *, rel_tol: float = 1e-7, inner_rel_tol: float = 1e-9):
    """Iterated integral of fn against the joint density over a domain.

    fn(eta_a: float, eta_b: array) -> (n,) values or a (K, n) stack; the
    same stack shape comes back as the integral. The nested quadratures
    accumulate panels left to right, so the value is deterministic.
    """
    pa, pb = joint.a, joint.b

    def section(ea: float) -> tuple:
        return (0.0, 1.0) if domain is None else domain.section(ea)

    probe = np.asarray(fn(pa.eta0, np.array([pb.eta0])), dtype=float)
    zero_row = np.zeros(probe.shape[:-1])

    def inner(ea: float):
        lo, hi = section(ea)
        if lo >= hi:
            return zero_row
        if pb.sigma == 0.0:
            if lo <= pb.eta0 <= hi:
                return np.asarray(fn(ea, np.array([pb.eta0])), dtype=float)[..., 0]
            return zero_row
        return pb._raw(lambda eb: fn(ea, eb), lo, hi, rel_tol=inner_rel_tol)

    if pa.sigma == 0.0:
        val = np.asarray(inner(pa.eta0), dtype=float) / pb._norm
        return float(val) if val.ndim == 0 else val

    m, s = pa.log_mean, pa.sigma
    lo_u, hi_u = m - _TAIL * s, min(0.0, m + _TAIL * s)
    brk = [m + k * s for k in (-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0)]
    if domain is not None:
        lim_lo, lim_hi, edges = domain.outer_limits()
        if lim_lo > 0.0:
            lo_u = max(lo_u, math.log(lim_lo))
        hi_u = min(hi_u, math.log(lim_hi)) if lim_hi > 0 else lo_u
        brk.extend(math.log(e) for e in edges if e > 0.0)
    if lo_u >= hi_u:
        out = zero_row
        return float(out) if out.ndim == 0 else out

    c = 1.0 / (s * _SQRT2PI)

    def outer(us):
        us = np.atleast_1d(us)
        rows = [np.asarray(inner(float(np.exp(u))), dtype=float) for u in us]
        arr = np.stack(rows, axis=-1)
        w = c * np.exp(-0.5 * ((us - m) / s) ** 2)
        return arr * w

    total = _adaptive(outer, lo_u, hi_u, rel_tol=rel_tol, breakpoints=brk)
    out = np.asarray(total, dtype=float) / (pa._norm * pb._norm)
    return float(out) if out.ndim == 0 else out


def domain_fraction(joint: JointPdtc, domain: SelectionDomain | None = None) -> float:
    """Joint probability mass the selection domain keeps."""
    return float(domain_integral(joint, lambda ea, eb: np.ones_like(eb), domain))


# ----------------------------------------------------------- rate boundary

@dataclass(frozen=True)
class BoundaryExtraction:
    """Positive-rate region of a two-arm rate surface plus its summaries.

    eta_a_crit/eta_b_crit are the per-arm cut-offs (tangents of the zero
    contour); x_min/x_max the extreme mismatch ratios reached inside the
    region, which approximate the contour's straight asymptotes.
    """

    domain: SelectionDomain
    eta_a_crit: float
    eta_b_crit: float
    x_min: float
    x_max: float


def _rate_pair_array(rate_fn_2d, ea, eb) -> np.ndarray:
    shape = np.broadcast_shapes(np.shape(ea), np.shape(eb))
    try:
        vals = np.asarray(_rate_value(rate_fn_2d(ea, eb)), dtype=float)
        return np.broadcast_to(vals, shape).astype(float)
    except (TypeError, ValueError, DomainError):
        ea_b, eb_b = np.broadcast_arrays(np.asarray(ea, float), np.asarray(eb, float))
        flat = [float(_rate_value(rate_fn_2d(float(x), float(y))))
                for x, y in zip(ea_b.ravel(), eb_b.ravel())]
        return np.array(flat).reshape(shape)


def rate_boundary_domain(rate_fn_2d, *, grid_lo: float = 1e-5,
                         grid_n: int = 200) -> BoundaryExtraction:
    """Trace the R = 0 contour of a two-arm rate on a log-spaced grid.

    Grid edges are sharpened by geometric bisection along eta_B before the
    contour is stored, so membership interpolation stays within a fraction
    of a grid cell of the true boundary.
    """
    g = np.logspace(math.log10(grid_lo), 0.0, grid_n)
    rate = np.stack([_rate_pair_array(rate_fn_2d, float(ea), g) for ea in g])
    pos = rate > 0.0
    if not pos.any():
        raise DomainError("rate is nonpositive everywhere on the grid")

    arows = np.flatnonzero(pos.any(axis=1))
    acols = np.flatnonzero(pos.any(axis=0))
    first = np.array([int(np.argmax(pos[i])) for i in arows])
    last = np.array([grid_n - 1 - int(np.argmax(pos[i][::-1])) for i in arows])
    ea_rows = g[arows]

    def refine(lo, hi, mask):
        lo = lo.copy()
        hi = hi.copy()
        for _ in range(25):
            mid = np.sqrt(lo * hi)
            neg = _rate_pair_array(rate_fn_2d, ea_rows, mid) <= 0.0
            lo = np.where(mask & neg, mid, lo)
            hi = np.where(mask & ~neg, mid, hi)
        return lo, hi

    # first positive eta_B per row, pushed down toward the true crossing
    lo_edge = g[first].astype(float)
    _, lo_edge = refine(g[np.maximum(first - 1, 0)].astype(float), lo_edge,
                        first > 0)
    # last positive eta_B per row, pushed up likewise
    hi_edge = g[last].astype(float)
    hi_edge, _ = refine(hi_edge, g[np.minimum(last + 1, grid_n - 1)].astype(float),
                        last < grid_n - 1)

    domain = SelectionDomain(
        "boundary",
        grid_log_a=tuple(np.log(ea_rows)),
        lo_log_b=tuple(np.log(lo_edge)),
        hi_log_b=tuple(np.log(hi_edge)),
    )
    return BoundaryExtraction(
        domain=domain,
        eta_a_crit=float(g[arows[0]]),
        eta_b_crit=float(g[acols[0]]),
        x_min=float(np.min(ea_rows / hi_edge)),
        x_max=float(np.max(ea_rows / lo_edge)),
    )


# ------------------------------------------------------- two-arm rate models

def mdi_integration_rate(joint_pdtc: JointPdtc, mdi_params,
                         params: ExperimentParams, *,
                         rel_tol: float = 1e-6) -> KeyRateResult:
    """Rate-wise upper bound for a relay protocol: integral of R over both arms."""
    from . import mdi as _mdi

    def fn(ea, eb):
        out = _mdi.mdi_rate(ea, eb, mdi_params, params)
        return np.asarray(_rate_value(out), dtype=float)

    raw = domain_integral(joint_pdtc, fn, None, rel_tol=rel_tol)
    return KeyRateResult.clamped(float(raw))


def mdi_observable_rate(joint_pdtc: JointPdtc, domain: SelectionDomain | None,
                        mdi_params, params: ExperimentParams, *,
                        rel_tol: float = 1e-6) -> KeyRateResult:
    """Observable-averaging rate model for a relay protocol.

    Averages the raw gains and error-gains over the selected region of the
    joint distribution, evaluates the rate once on those averages, and
    scales by the selected fraction.
    """
    from . import mdi as _mdi

    names, stack_fn = _mdi.observable_stack(mdi_params, params)

    def with_mass(ea, eb):
        eb = np.asarray(eb, dtype=float)
        vals = np.asarray(stack_fn(ea, eb), dtype=float)
        return np.vstack([np.ones((1, eb.size)), vals])

    out = domain_integral(joint_pdtc, with_mass, domain, rel_tol=rel_tol)
    frac = float(out[0])
    if frac < 1e-12:
        return KeyRateResult.clamped(0.0, fraction=0.0)
    means = dict(zip(names, (out[1:] / frac).tolist()))
    res = _mdi.rate_from_observable_means(means, mdi_params, params)
    return KeyRateResult.clamped(frac * float(_rate_value(res)),
                                 fraction=frac, observable_means=means)
