"""Deformed Marchenko-Pastur law for the noise ``U = Sigma_e^{1/2} E``.

Everything here lives on the eigenvalue (covariance) scale: the law describes
the eigenvalues of ``Sigma_e^{1/2} E E' Sigma_e^{1/2} / T``. Use
:func:`to_singular_scale` to move to singular values of ``U``.

The Stieltjes transform ``m`` solves

    1/m = -z + phi * sum_i w_i s_i / (1 + m s_i)

equivalently ``z = f(m)`` with ``f(x) = -1/x + sum_i r_i / (x + 1/s_i)`` and
``r_i = phi * w_i``. The edges of the support are the critical values of
``f``. ``m`` is the transform of the T x T companion matrix, so
``Im m / pi`` integrates to ``min(1, phi)`` over ``(0, inf)``;
:func:`density` divides by ``phi`` to give the density of the N eigenvalues.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Chebyshev
from scipy.optimize import brentq, minimize_scalar

from .errors import DimensionError, InputError, NumericError, PoleError, UnsupportedRegimeError

# |f''| below this multiple of its term magnitude marks a degenerate critical point.
DEGENERATE_RTOL = 1e-8
FIXED_POINT_DAMPING = 0.5
FIXED_POINT_MAX_ITER = 10_000
FIXED_POINT_TOL = 1e-12
DEFAULT_ETA_REL = 1e-6


@dataclass(frozen=True, eq=False)
class SpectralMeasure:
    """Discrete spectral measure of ``Sigma_e``: atoms ``s_1 > ... > s_n`` with weights."""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.array(self.values, dtype=np.float64).ravel()
        w = np.array(self.weights, dtype=np.float64).ravel()
        if s.size == 0 or s.shape != w.shape:
            raise InputError("atoms and weights must be non-empty and of equal length")
        if not (np.all(np.isfinite(s)) and np.all(s > 0)):
            raise InputError("atoms must be finite and positive")
        if np.any(np.diff(s) >= 0):
            raise InputError("atoms must be strictly decreasing")
        if np.any(w <= 0) or np.any(w > 1):
            raise InputError("weights must lie in (0, 1]")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InputError(f"weights must sum to 1, got {w.sum()!r}")
        s.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "values", s)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_atoms(cls, atoms) -> SpectralMeasure:
        """Build from ``[(s, w), ...]`` in any order; weights are not renormalized."""
        pairs = sorted(((float(s), float(w)) for s, w in atoms), key=lambda p: -p[0])
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    @classmethod
    def from_samples(cls, sigmas, decimals: int | None = None) -> SpectralMeasure:
        """Empirical measure ``(1/N) sum delta_{sigma_i}`` of eigenvalues of ``Sigma_e``."""
        v = np.asarray(sigmas, dtype=np.float64).ravel()
        if decimals is not None:
            v = np.round(v, decimals)
        vals, counts = np.unique(v, return_counts=True)
        w = counts / counts.sum()
        w = w / w.sum()
        return cls(vals[::-1], w[::-1])

    def scaled(self, c: float) -> SpectralMeasure:
        return SpectralMeasure(self.values * c, self.weights)

    @property
    def n_atoms(self) -> int:
        return self.values.size


def _coeffs(measure, phi):
    return phi * measure.weights, 1.0 / measure.values


def _check_pole(measure, x):
    c = 1.0 / measure.values
    if x == 0 or np.any(x + c == 0):
        raise PoleError(f"f has a pole at x = {x!r}")


def evaluate_f(measure: SpectralMeasure, phi: float, x: float) -> float:
    """``f(x) = -1/x + sum_i r_i / (x + 1/s_i)``."""
    _check_pole(measure, x)
    r, c = _coeffs(measure, phi)
    return float(-1.0 / x + np.sum(r / (x + c)))


def evaluate_f_prime(measure: SpectralMeasure, phi: float, x: float) -> float:
    _check_pole(measure, x)
    r, c = _coeffs(measure, phi)
    return float(1.0 / x**2 - np.sum(r / (x + c) ** 2))


def evaluate_f_second(measure: SpectralMeasure, phi: float, x: float) -> float:
    _check_pole(measure, x)
    r, c = _coeffs(measure, phi)
    return float(-2.0 / x**3 + 2.0 * np.sum(r / (x + c) ** 3))


class _F:
    """Vectorized f, f', f'' for one (measure, phi)."""

    def __init__(self, measure, phi):
        self.r, self.c = _coeffs(measure, phi)

    def f(self, x):
        x = np.asarray(x, dtype=np.float64)
        return -1.0 / x + np.sum(self.r / (x[..., None] + self.c), axis=-1)

    def fp(self, x):
        x = np.asarray(x, dtype=np.float64)
        return 1.0 / x**2 - np.sum(self.r / (x[..., None] + self.c) ** 2, axis=-1)

    def fp_scale(self, x):
        x = np.asarray(x, dtype=np.float64)
        return 1.0 / x**2 + np.sum(self.r / (x[..., None] + self.c) ** 2, axis=-1)

    def fpp(self, x):
        return -2.0 / x**3 + 2.0 * np.sum(self.r / (x + self.c) ** 3)

    def fpp_scale(self, x):
        return 2.0 / abs(x) ** 3 + 2.0 * np.sum(self.r / np.abs(x + self.c) ** 3)


@dataclass(frozen=True, eq=False)
class MpLaw:
    """Solved law: critical points ``x_k``, edges ``a_k = f(x_k)`` and bulks.

    ``critical_points[:-1]`` are the ``2p - 1`` points in ``I_1 ... I_n`` in
    nonincreasing order and ``critical_points[-1]`` is the point in ``I_0``.
    A degenerate critical point appears twice with ``degenerate`` set.
    """

    measure: SpectralMeasure
    phi: float
    critical_points: np.ndarray
    edges: np.ndarray
    degenerate: np.ndarray
    interval_index: np.ndarray = field(repr=False)

    @property
    def p(self) -> int:
        return self.edges.size // 2

    @property
    def bulks(self) -> list[tuple[float, float]]:
        """Intervals ``[a_{2k}, a_{2k-1}]``, k = 1..p, from the top down."""
        a = self.edges
        return [(float(a[2 * k + 1]), float(a[2 * k])) for k in range(self.p)]

    @property
    def upper_edge(self) -> float:
        return float(self.edges[0])

    def in_support(self, x, inflate: float = 0.0):
        """Whether ``x`` lies in the support with each bulk widened by ``inflate`` (relative)."""
        x = np.asarray(x, dtype=np.float64)
        inside = np.zeros(x.shape, dtype=bool)
        for lo, hi in self.bulks:
            inside |= (x >= lo * (1 - inflate)) & (x <= hi * (1 + inflate))
        return inside


def _near_pole_point(fp, pole, inner, want_sign):
    """Point between ``pole`` and ``inner`` close enough to ``pole`` that ``sign(fp) == want_sign``."""
    gap = inner - pole
    for k in range(1, 60):
        x = pole + gap * 2.0 ** (-k)
        if x == pole:
            break
        if np.sign(fp(x)) == want_sign:
            return x
    raise NumericError(f"could not bracket f' near pole {pole!r}")


def _root(fp, lo, hi, scale):
    try:
        return brentq(fp, lo, hi, xtol=1e-15 * max(scale, 1e-300), rtol=4 * np.finfo(float).eps,
                      maxiter=500)
    except (ValueError, RuntimeError) as exc:
        raise NumericError(f"root bracketing failed on [{lo!r}, {hi!r}]: {exc}") from None


def _grid(lo, hi, n=400):
    u = np.concatenate([
        np.linspace(0.0, 1.0, n + 1)[1:-1],
        10.0 ** -np.arange(3, 13),
        1 - 10.0 ** -np.arange(3, 13),
    ])
    u = np.unique(u)
    return lo + (hi - lo) * u


def _interior_interval_roots(F, lo, hi):
    """Critical points of f on the open interval (lo, hi) between two poles.

    Returns a list of (x, degenerate) with degenerate points listed twice.
    """
    xs = _grid(lo, hi)
    vals = F.fp(xs)
    width = hi - lo
    # Refine every sampled local maximum of f'.
    peaks = []
    for j in range(1, len(xs) - 1):
        if vals[j] >= vals[j - 1] and vals[j] >= vals[j + 1]:
            res = minimize_scalar(lambda t: -F.fp(t), bounds=(xs[j - 1], xs[j + 1]),
                                  method="bounded", options={"xatol": 1e-15 * width})
            peaks.append(float(res.x))
    out = []
    for xm in peaks:
        vm = float(F.fp(xm))
        tol = 1e-10 * float(F.fp_scale(xm))
        if abs(vm) <= tol:
            out += [(xm, True), (xm, True)]
            continue
        if vm < 0:
            continue
        # f' -> -inf at both poles, so a positive peak is flanked by two roots.
        left = xs[(xs < xm) & (vals < 0)]
        right = xs[(xs > xm) & (vals < 0)]
        a = left.max() if left.size else _near_pole_point(F.fp, lo, xm, -1.0)
        b = right.min() if right.size else _near_pole_point(F.fp, hi, xm, -1.0)
        x1 = _root(F.fp, a, xm, width)
        x2 = _root(F.fp, xm, b, width)
        d1 = abs(F.fpp(x1)) < DEGENERATE_RTOL * F.fpp_scale(x1)
        d2 = abs(F.fpp(x2)) < DEGENERATE_RTOL * F.fpp_scale(x2)
        if d1 and d2:
            out += [(xm, True), (xm, True)]
        else:
            out += [(x2, False), (x1, False)]
    return sorted(out, key=lambda t: -t[0])


def solve_law(measure: SpectralMeasure, phi: float) -> MpLaw:
    """Critical points, edges and bulks of the deformed MP law.

    Raises
    ------
    UnsupportedRegimeError
        If ``phi == 1``: the incoherence theory requires ``N/T -> phi != 1``.
    NumericError
        If a root cannot be bracketed.
    """
    phi = float(phi)
    if not np.isfinite(phi) or phi <= 0:
        raise InputError(f"phi must be positive, got {phi!r}")
    if phi == 1.0:
        raise UnsupportedRegimeError(
            "phi = 1 is not supported: the aspect ratio N/T must converge to a limit other than 1"
        )
    F = _F(measure, phi)
    poles = -1.0 / measure.values  # p_1 > p_2 > ... > p_n, all negative

    pts, degen, where = [], [], []
    # I_1 = (p_1, 0): f' -> -inf at p_1, +inf at 0.
    lo = _near_pole_point(F.fp, poles[0], poles[0] / 2, -1.0)
    hi = _near_pole_point(F.fp, 0.0, poles[0] / 2, 1.0)
    pts.append(_root(F.fp, lo, hi, -poles[0]))
    degen.append(False)
    where.append(1)
    for i in range(1, measure.n_atoms):
        for x, d in _interior_interval_roots(F, poles[i], poles[i - 1]):
            pts.append(x)
            degen.append(d)
            where.append(i + 1)

    # I_0: the root sits left of p_n when phi < 1, right of 0 when phi > 1.
    pn = poles[-1]
    if phi < 1:
        far = pn
        for _ in range(200):
            far = pn - 2.0 * (pn - far) - abs(pn)
            if F.fp(far) > 0:
                break
        else:
            raise NumericError("could not bracket the critical point in I_0")
        near = _near_pole_point(F.fp, pn, (pn + far) / 2, -1.0)
        x0 = _root(F.fp, far, near, abs(pn))
    else:
        near = _near_pole_point(F.fp, 0.0, abs(pn), 1.0)
        far = abs(pn)
        for _ in range(200):
            if F.fp(far) < 0:
                break
            far *= 2.0
        else:
            raise NumericError("could not bracket the critical point in I_0")
        x0 = _root(F.fp, near, far, abs(pn))
    pts.append(x0)
    degen.append(False)
    where.append(0)

    x = np.array(pts)
    inner = np.argsort(-x[:-1], kind="stable")
    order = np.concatenate([inner, [len(x) - 1]])
    x = x[order]
    edges = F.f(x)
    for arr in (x, edges):
        arr.setflags(write=False)
    return MpLaw(measure, phi, x, edges, np.array(degen)[order], np.array(where)[order])


# ----------------------------------------------------------------- Stieltjes / density


def _g(measure, phi, m, z):
    s, w = measure.values, measure.weights
    return 1.0 / (-z + phi * np.sum(w * s / (1.0 + m[..., None] * s), axis=-1))


def stieltjes(law: MpLaw, z, *, omega: float = FIXED_POINT_DAMPING,
              max_iter: int = FIXED_POINT_MAX_ITER, tol: float = FIXED_POINT_TOL):
    """Solve the self-consistent equation for ``m(z)``, ``Im z > 0``.

    Damped fixed-point iteration ``m <- (1 - omega) m + omega g(m)`` started
    at ``i / |z|``. Points that have not met ``tol`` after ``max_iter`` steps
    get a few Newton steps on ``f(m) = z``; a :class:`NumericError` reports
    the residual if that also fails.
    """
    z = np.asarray(z, dtype=np.complex128)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    if np.any(z.imag <= 0):
        raise InputError("stieltjes needs Im z > 0")
    measure, phi = law.measure, law.phi
    m = 1j / np.abs(z)
    res = np.full(z.shape, np.inf)
    active = np.ones(z.shape, dtype=bool)
    for _ in range(max_iter):
        ma = m[active]
        new = (1 - omega) * ma + omega * _g(measure, phi, ma, z[active])
        step = np.abs(new - ma)
        m[active] = new
        res[active] = step
        done = step <= tol * np.maximum(1.0, np.abs(new))
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not active.any():
            break
    if active.any():
        r, c = _coeffs(measure, phi)
        for _ in range(50):
            ma = m[active]
            val = -1.0 / ma + np.sum(r / (ma[..., None] + c), axis=-1) - z[active]
            der = 1.0 / ma**2 - np.sum(r / (ma[..., None] + c) ** 2, axis=-1)
            m[active] = ma - val / der
        resid = np.abs(m - _g(measure, phi, m, z))
        bad = active & ((resid > 1e3 * tol * np.maximum(1.0, np.abs(m))) | (m.imag < 0))
        if bad.any():
            raise NumericError(
                f"fixed point did not converge at z = {z[bad][0]!r}; last residual {resid[bad].max():.3e}"
            )
    return m[0] if scalar else m


def _default_eta(law):
    return DEFAULT_ETA_REL * law.upper_edge


def companion_density(law: MpLaw, x, eta: float | None = None):
    """``Im m(x + i eta) / pi``: density normalized over the T companion eigenvalues."""
    eta = _default_eta(law) if eta is None else float(eta)
    if not eta > 0:
        raise InputError("eta must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(stieltjes(law, x + 1j * eta).imag / np.pi, 0.0)
    return float(out) if out.ndim == 0 else out


def density(law: MpLaw, x, eta: float | None = None):
    """Density of the eigenvalues of ``Sigma_e^{1/2} E E' Sigma_e^{1/2} / T``.

    Normalized per the N eigenvalues, so it integrates to ``min(1, 1/phi)``
    over ``(0, inf)`` (the rest sits at zero when ``phi > 1``).
    """
    return companion_density(law, x, eta) / law.phi


# ------------------------------------------------------------- typical locations

_CHEB_DEG = 160


def _bulk_tail_antiderivative(law, lo, hi, eta):
    # x(theta) = hi - (hi - lo)(1 - cos theta)/2 removes the square-root edges.
    half = (hi - lo) / 2

    def integrand(theta):
        x = hi - half * (1 - np.cos(theta))
        return companion_density(law, x, eta) * half * np.sin(theta)

    cheb = Chebyshev.interpolate(integrand, _CHEB_DEG, domain=[0.0, np.pi])
    return cheb.integ(lbnd=0.0)


@dataclass(frozen=True, eq=False)
class _TailTable:
    bulks: list
    antiderivs: list
    masses: np.ndarray

    @property
    def total(self) -> float:
        return float(self.masses.sum())


def _tail_table(law, eta=None):
    eta = _default_eta(law) if eta is None else eta
    anti = [_bulk_tail_antiderivative(law, lo, hi, eta) for lo, hi in law.bulks]
    masses = np.array([float(a(np.pi)) for a in anti])
    return _TailTable(law.bulks, anti, masses)


def tail_mass(law: MpLaw, y: float, eta: float | None = None) -> float:
    """Companion mass above ``y``: ``int_y^inf Im m / pi``."""
    table = _tail_table(law, eta)
    return _tail_from_table(table, y)


def _tail_from_table(table, y):
    total = 0.0
    for (lo, hi), anti, mass in zip(table.bulks, table.antiderivs, table.masses):
        if y <= lo:
            total += mass
        elif y < hi:
            theta = np.arccos(np.clip(1 - 2 * (hi - y) / (hi - lo), -1.0, 1.0))
            total += float(anti(theta))
    return total


def typical_locations(law: MpLaw, T: int, ks, eta: float | None = None) -> list[float]:
    """Locations ``gamma_{T,k}`` with ``int_gamma^inf rho_T = k/T - 1/(2T)``.

    ``rho_T`` is the companion density (mass ``min(1, phi)``); results are on
    the eigenvalue scale.
    """
    T = int(T)
    if T < 1:
        raise DimensionError("T must be positive")
    table = _tail_table(law, eta)
    out = []
    for k in ks:
        k = int(k)
        if k < 1:
            raise DimensionError(f"k must be positive, got {k}")
        target = k / T - 1 / (2 * T)
        if target >= table.total:
            raise DimensionError(
                f"quantile mass {target:.6g} exceeds the bulk mass {table.total:.6g}"
            )
        acc = 0.0
        for (lo, hi), anti, mass in zip(table.bulks, table.antiderivs, table.masses):
            if acc + mass < target:
                acc += mass
                continue
            need = target - acc
            theta = brentq(lambda th: float(anti(th)) - need, 0.0, np.pi, xtol=1e-14)
            out.append(float(hi - (hi - lo) * (1 - np.cos(theta)) / 2))
            break
        else:  # rounding at the very bottom of the last bulk
            out.append(float(table.bulks[-1][0]))
    return out


def to_singular_scale(eigenvalues, T: int | None = None):
    """Eigenvalue-scale quantities to singular values.

    Without ``T`` this is ``sqrt(x)`` (singular values of ``U / sqrt(T)``);
    with ``T`` it is ``sqrt(T x)`` (singular values of ``U`` itself).
    """
    x = np.asarray(eigenvalues, dtype=np.float64)
    return np.sqrt(x if T is None else T * x)


def to_eigen_scale(singular_values, T: int | None = None):
    s = np.asarray(singular_values, dtype=np.float64)
    return s**2 if T is None else s**2 / T


# ------------------------------------------------------------------- regularity


@dataclass(frozen=True)
class EdgeVerdict:
    index: int
    edge: float
    above_delta: bool
    separated: bool
    away_from_poles: bool

    @property
    def regular(self) -> bool:
        return self.above_delta and self.separated and self.away_from_poles


@dataclass(frozen=True)
class BulkVerdict:
    index: int
    interval: tuple[float, float]
    min_density: float
    threshold: float

    @property
    def regular(self) -> bool:
        return self.min_density >= self.threshold


@dataclass(frozen=True)
class RegularityReport:
    delta: float
    delta_prime: float
    edge_verdicts: list[EdgeVerdict]
    bulk_verdicts: list[BulkVerdict]

    @property
    def regular(self) -> bool:
        return all(e.regular for e in self.edge_verdicts) and all(
            b.regular for b in self.bulk_verdicts
        )


def check_regularity(law: MpLaw, delta: float, delta_prime: float,
                     density_floor: float = 1e-6, n_grid: int = 201) -> RegularityReport:
    """Edge conditions ``a_k >= delta``, ``min_l |a_k - a_l| >= delta``,
    ``min_i |x_k + 1/s_i| >= delta``, and the minimum density on each bulk
    interior ``[a_{2k} + delta', a_{2k-1} - delta']`` compared to ``density_floor``.
    """
    if not (delta > 0 and delta_prime > 0):
        raise InputError("delta and delta_prime must be positive")
    a, x = law.edges, law.critical_points
    inv_s = 1.0 / law.measure.values
    edges = []
    for k in range(a.size):
        others = np.delete(a, k)
        sep = float(np.min(np.abs(a[k] - others))) if others.size else np.inf
        edges.append(EdgeVerdict(
            k + 1,
            float(a[k]),
            bool(a[k] >= delta),
            bool(sep >= delta),
            bool(np.min(np.abs(x[k] + inv_s)) >= delta),
        ))
    bulks = []
    for k, (lo, hi) in enumerate(law.bulks):
        if delta_prime >= (hi - lo) / 2:
            raise DimensionError(
                f"delta' = {delta_prime} leaves an empty interior in bulk {k + 1} [{lo}, {hi}]"
            )
        grid = np.linspace(lo + delta_prime, hi - delta_prime, n_grid)
        dmin = float(np.min(density(law, grid)))
        bulks.append(BulkVerdict(k + 1, (lo + delta_prime, hi - delta_prime), dmin, density_floor))
    return RegularityReport(delta, delta_prime, edges, bulks)
