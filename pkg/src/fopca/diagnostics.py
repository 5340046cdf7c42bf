"""Finite-sample checks on the extra singular vectors and on estimation rates.

All statistics are spectral norms unless stated otherwise. Probe vectors
must be independent of the noise; :func:`make_probes` guarantees this by
drawing them from their own keyed stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import linregress

from . import rng
from .errors import DimensionError, InputError, RequiresSyntheticError, UnsupportedRegimeError
from .mplaw import MpLaw, SpectralMeasure, solve_law
from .panel import FactorStructure, _as_matrix, full_svd, singular_values
from .pca import PcaFit


@dataclass(frozen=True, eq=False)
class ProbeSet:
    """Unit probe vectors, one per column: ``left`` is N x m, ``right`` is T x m."""

    left: np.ndarray
    right: np.ndarray


def _unit_columns(A):
    return A / np.linalg.norm(A, axis=0)


def make_probes(N: int, T: int, seed: int = 0, n_canonical: int = 10, n_random: int = 10) -> ProbeSet:
    """First ``n_canonical`` basis vectors plus ``n_random`` Gaussian unit vectors."""
    def family(dim, obj):
        k = min(n_canonical, dim)
        parts = [np.eye(dim)[:, :k]]
        if n_random:
            parts.append(_unit_columns(rng.stream(seed, 0, obj).normal((dim, n_random))))
        return np.hstack(parts)

    return ProbeSet(family(N, rng.PROBES), family(T, rng.PROBES_RIGHT))


def probe_incoherence(vectors, probes) -> float:
    """``max_j ||p_j' V||`` over probe columns ``p_j``; zero if ``V`` has no columns."""
    V = np.asarray(vectors, dtype=np.float64)
    P = np.asarray(probes, dtype=np.float64)
    if V.shape[0] != P.shape[0]:
        raise DimensionError(f"vectors have {V.shape[0]} rows, probes {P.shape[0]}")
    if V.shape[1] == 0 or P.shape[1] == 0:
        return 0.0
    return float(np.max(np.linalg.norm(P.T @ V, axis=1)))


def _ortho(M, V):
    fro = np.linalg.norm(M)
    if M.shape[1] == 0 or V.shape[1] == 0 or fro == 0:
        return 0.0
    return float(np.linalg.norm(M.T @ V, 2) / fro)


@dataclass(frozen=True)
class ExtraSpectrumReport:
    """Statistics on the ``R - r`` extra singular components.

    ``gaps[k-1] = lambda_k(U)^2 - lambda_{r+k}(X)^2``; the incoherence fields
    are maxima over probes of ``||eta' Xi_extra||`` and ``||zeta' V_extra||``;
    the orthogonality fields are ``||B' Xi_extra|| / ||B||_F`` and
    ``||F' V_extra|| / ||F||_F``.
    """

    gaps: np.ndarray
    incoherence_left: float
    incoherence_right: float
    ortho_left: float
    ortho_right: float
    r: int
    R: int
    nu_m: float


def extra_spectrum(X, truth: FactorStructure, R: int, probes: ProbeSet) -> ExtraSpectrumReport:
    if truth.noise is None:
        raise RequiresSyntheticError("extra_spectrum needs the noise matrix U")
    a = _as_matrix(X)
    N, T = a.shape
    r = truth.rank
    if truth.n_rows != N or truth.n_cols != T:
        raise DimensionError("truth does not match the panel dimensions")
    if not r <= R <= min(N, T):
        raise DimensionError(f"need r = {r} <= R <= {min(N, T)}, got R = {R}")
    if probes.left.shape[0] != N or probes.right.shape[0] != T:
        raise DimensionError("probe dimensions do not match the panel")
    svd = full_svd(a)
    su = singular_values(truth.noise)
    k = R - r
    gaps = su[:k] ** 2 - svd.singular_values[r:R] ** 2
    xi, v = svd.left[:, r:R], svd.right[:, r:R]
    return ExtraSpectrumReport(
        gaps=gaps,
        incoherence_left=probe_incoherence(xi, probes.left),
        incoherence_right=probe_incoherence(v, probes.right),
        ortho_left=_ortho(truth.loadings, xi),
        ortho_right=_ortho(truth.factors, v),
        r=r,
        R=R,
        nu_m=truth.nu_m(),
    )


def weyl_margins(X, U, r: int) -> np.ndarray:
    """``lambda_k(U) - lambda_{r+k}(X)`` for every available k (nonnegative in exact arithmetic)."""
    sx = singular_values(X)
    su = singular_values(U)
    k = sx.size - r
    if k < 0:
        raise DimensionError(f"r = {r} exceeds min(N, T) = {sx.size}")
    return su[:k] - sx[r:]


def noise_cross_terms(pca_fit: PcaFit, truth: FactorStructure, G_N, G_T) -> tuple[float, float]:
    """``||B_hat' U G_T|| / (NT)`` and ``||F_hat' U' G_N|| / (NT)``."""
    if truth.noise is None:
        raise RequiresSyntheticError("cross terms need the noise matrix U")
    U = truth.noise
    N, T = U.shape
    G_N = np.asarray(G_N, dtype=np.float64).reshape(N, -1)
    G_T = np.asarray(G_T, dtype=np.float64).reshape(T, -1)
    if pca_fit.n_rows != N or pca_fit.n_cols != T:
        raise DimensionError("fit does not match the noise dimensions")
    left = np.linalg.norm(pca_fit.b_hat.T @ (U @ G_T), 2) / (N * T)
    right = np.linalg.norm(pca_fit.f_hat.T @ (U.T @ G_N), 2) / (N * T)
    return float(left), float(right)


def lowrank_error(pca_fit: PcaFit, truth: FactorStructure) -> float:
    """``||M_hat - M||_F / sqrt(NT)``."""
    if truth.n_rows != pca_fit.n_rows or truth.n_cols != pca_fit.n_cols:
        raise DimensionError("truth does not match the fitted panel dimensions")
    return float(np.linalg.norm(pca_fit.m_hat - truth.signal) / np.sqrt(truth.n_rows * truth.n_cols))


@dataclass(frozen=True)
class RateFit:
    grid: tuple
    slope: float
    stderr: float
    intercept: float


def rate_regression(points) -> RateFit:
    """OLS slope of ``log(statistic)`` on ``log(scale)``."""
    pts = [(float(a), float(b)) for a, b in points]
    if len(pts) < 3:
        raise InputError("rate regression needs at least 3 points")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(x) & np.isfinite(y)):
        raise InputError("rate regression needs positive finite scales and statistics")
    if np.ptp(np.log(x)) == 0:
        raise InputError("rate regression needs at least two distinct scales")
    fit = linregress(np.log(x), np.log(y))
    return RateFit(tuple(pts), float(fit.slope), float(fit.stderr), float(fit.intercept))


@dataclass(frozen=True)
class BoundaryReport:
    incoherence_left: float
    incoherence_right: float
    R: int


def boundary_case_r0(X, R: int, probes: ProbeSet) -> BoundaryReport:
    """Probe alignment of all ``R`` leading singular vectors of a pure-noise panel."""
    a = _as_matrix(X)
    if not 1 <= R <= min(a.shape):
        raise DimensionError(f"R must lie in [1, {min(a.shape)}]")
    svd = full_svd(a).columns(0, R)
    return BoundaryReport(
        probe_incoherence(svd.left, probes.left),
        probe_incoherence(svd.right, probes.right),
        R,
    )


# ------------------------------------------------------------- real-data screen

MAX_FIT_ATOMS = 32


@dataclass(frozen=True)
class BulkFit:
    """MP law fitted to the trailing spectrum and the scree checked against its upper edge."""

    law: MpLaw
    eigenvalues: np.ndarray   # lambda_k(X)^2 / T
    spike: np.ndarray         # eigenvalue above the inflated upper edge
    margin: float


def fit_bulk(X, R: int, margin: float = 0.1, n_atoms: int = MAX_FIT_ATOMS) -> BulkFit:
    """Fit the noise law from row variances of ``X`` minus its top-``R`` components.

    Row variances are inflated by ``NT / (NT - R(N + T - R))`` to undo the
    noise energy removed with the rank-``R`` fit, then grouped into at most
    ``n_atoms`` equal-width bins; each bin becomes an atom at its mean with
    weight equal to its share.
    """
    a = _as_matrix(X)
    N, T = a.shape
    if N == T:
        raise UnsupportedRegimeError("square panels (N == T) have no deformed MP law here")
    if not 0 <= R < min(N, T):
        raise DimensionError(f"R must lie in [0, {min(N, T) - 1}]")
    svd = full_svd(a)
    resid = a - svd.columns(0, R).reconstruct() if R > 0 else a
    var = np.mean(resid**2, axis=1) * (N * T) / (N * T - R * (N + T - R))
    var = var[var > 0]
    if var.size == 0:
        raise InputError("residual panel is identically zero")
    edges = np.linspace(var.min(), var.max(), n_atoms + 1)
    idx = np.clip(np.searchsorted(edges, var, side="right") - 1, 0, n_atoms - 1)
    atoms = [(float(var[idx == b].mean()), np.count_nonzero(idx == b) / var.size)
             for b in range(n_atoms) if np.any(idx == b)]
    total = sum(w for _, w in atoms)
    measure = SpectralMeasure.from_atoms([(s, w / total) for s, w in atoms])
    law = solve_law(measure, N / T)
    eig = svd.singular_values**2 / T
    return BulkFit(law, eig, eig > law.upper_edge * (1 + margin), margin)
