"""Factor-augmented IV / OLS slope with HC0 standard errors.

The outcome, treatment and instrument are residualized on ``[1_T, F_hat]``
where ``F_hat`` holds the top-``R`` PCA factors of the control panel. The slope
is ``beta_hat = (e_z' e_g)^{-1} e_z' e_y`` and its HC0 variance is

    sigma_hat^2 = (e_z'e_g / T)^{-2} * mean(e_z^2 * eta_hat^2),
    eta_hat = e_y - beta_hat * e_g,

with no degrees-of-freedom correction. OLS is the special case ``z = g``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import (
    DegeneracyWarning,
    DegreesOfFreedomError,
    DimensionError,
    InputError,
    SingularityError,
    SingularVarianceError,
    WeakInstrumentError,
)
from .panel import RANK_RTOL, Panel, full_svd
from .pca import fit_from_triple

# |gamma_hat| below this multiple of sqrt(mean e_z^2 * mean e_g^2) counts as irrelevance.
RELEVANCE_RTOL = 1e-10
# ||eta_hat|| below this multiple of ||e_y|| + |beta_hat| ||e_g|| counts as an exact fit.
EXACT_FIT_RTOL = 1e-12


def _vector(a, name, T=None):
    v = np.asarray(a, dtype=np.float64)
    if v.ndim == 2 and 1 in v.shape:
        v = v.ravel()
    if v.ndim != 1:
        raise InputError(f"{name} must be a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InputError(f"{name} contains non-finite entries")
    if T is not None and v.size != T:
        raise DimensionError(f"{name} has length {v.size}, expected {T}")
    return v


@dataclass(frozen=True, eq=False)
class RegressionData:
    """Outcome ``y``, treatment ``g``, optional instrument ``z`` and the control panel.

    When ``z`` is omitted only OLS (``z = g``) is available.
    """

    y: np.ndarray
    g: np.ndarray
    panel: Panel
    z: np.ndarray | None = None

    def __post_init__(self):
        T = self.panel.n_cols
        for name in ("y", "g"):
            v = _vector(getattr(self, name), name, T)
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if self.z is not None:
            v = _vector(self.z, "z", T)
            v.setflags(write=False)
            object.__setattr__(self, "z", v)

    @property
    def n_obs(self) -> int:
        return self.panel.n_cols

    def instrument(self, mode: str) -> np.ndarray:
        if mode == "ols":
            return self.g
        if mode == "iv":
            if self.z is None:
                raise InputError("IV mode needs an instrument z")
            return self.z
        raise InputError(f"mode must be 'ols' or 'iv', got {mode!r}")


@dataclass(frozen=True)
class InferenceResult:
    """Point estimate and HC0 inference for one working dimension.

    ``t_stat`` tests ``beta = 0``; :meth:`t_at` gives ``sqrt(T)(beta_hat - beta)/sigma_hat``.
    ``sigma_hat`` is on the ``sqrt(T)`` scale, so ``se = sigma_hat / sqrt(T)``.
    """

    beta_hat: float
    sigma_hat: float
    t_stat: float
    first_stage_t: float
    r_used: int
    gamma_hat: float
    n_obs: int
    mode: str = "iv"
    warnings: tuple[str, ...] = field(default=())

    @property
    def se(self) -> float:
        return self.sigma_hat / np.sqrt(self.n_obs)

    def t_at(self, beta: float) -> float:
        return float(np.sqrt(self.n_obs) * (self.beta_hat - beta) / self.sigma_hat)


def control_basis(f_hat, T: int | None = None) -> tuple[np.ndarray, list[str]]:
    """Orthonormal basis of ``span[1_T, F_hat]``.

    Uses pivoted QR; columns whose pivot falls below the rank tolerance are
    dropped and reported in the returned messages.
    """
    if f_hat is None:
        f = np.zeros((T, 0))
    else:
        f = np.asarray(f_hat, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
    T = f.shape[0]
    R = f.shape[1]
    if R + 1 >= T:
        raise DegreesOfFreedomError(f"R + 1 = {R + 1} regressors leave no residual degrees of freedom with T = {T}")
    A = np.column_stack([np.ones(T), f])
    Q, Rm, piv = sla.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(Rm))
    keep = d > RANK_RTOL * max(d[0], np.finfo(float).tiny)
    k = int(keep.sum())
    notes = []
    if k < A.shape[1]:
        dropped = sorted(int(p) for p in piv[k:])
        msg = f"dropped {len(dropped)} collinear control column(s) {dropped}"
        warnings.warn(msg, DegeneracyWarning, stacklevel=2)
        notes.append(msg)
    return Q[:, :k], notes


def residualize(a, f_hat) -> np.ndarray:
    """``(I - P_[1_T, F_hat]) a`` computed through an orthonormal basis."""
    v = np.asarray(a, dtype=np.float64)
    Q, _ = control_basis(f_hat, v.shape[0])
    return v - Q @ (Q.T @ v)


def hc0_sandwich(eps_z, eps_g, eta_hat) -> float:
    """``sigma_hat`` from the HC0 sandwich; zero when ``eta_hat`` vanishes."""
    ez = _vector(eps_z, "eps_z")
    eg = _vector(eps_g, "eps_g", ez.size)
    eta = _vector(eta_hat, "eta_hat", ez.size)
    bread = ez @ eg / ez.size
    if bread == 0:
        raise SingularityError("e_z' e_g = 0: the sandwich bread is not invertible")
    meat = np.mean(ez**2 * eta**2)
    return float(np.sqrt(meat) / abs(bread))


def first_stage_t(eps_g, eps_z) -> float:
    """HC0 t-statistic of the slope in the residualized regression of ``e_g`` on ``e_z``.

    Infinite when ``e_g`` is an exact multiple of ``e_z`` (in particular in OLS mode).
    """
    szz = eps_z @ eps_z
    if szz == 0:
        return 0.0
    gam = (eps_z @ eps_g) / szz
    u = eps_g - gam * eps_z
    meat = np.sum(eps_z**2 * u**2)
    if meat <= (EXACT_FIT_RTOL * np.linalg.norm(eps_g)) ** 2 * szz:
        return float(np.copysign(np.inf, gam)) if gam != 0 else 0.0
    return float(gam * szz / np.sqrt(meat))


def estimate_from_factors(y, g, z, f_hat, mode: str = "iv") -> InferenceResult:
    """Estimate with given factors (``f_hat`` of shape T x R, R possibly 0)."""
    y = _vector(y, "y")
    T = y.size
    g = _vector(g, "g", T)
    z = _vector(z, "z", T)
    Q, notes = control_basis(f_hat, T)
    stacked = np.column_stack([y, g, z])
    resid = stacked - Q @ (Q.T @ stacked)
    ey, eg, ez = resid[:, 0], resid[:, 1], resid[:, 2]
    R = 0 if f_hat is None else np.asarray(f_hat).reshape(T, -1).shape[1]

    gamma_hat = float(ez @ eg / T)
    fs_t = first_stage_t(eg, ez)
    scale = np.sqrt(np.mean(ez**2) * np.mean(eg**2))
    if not abs(gamma_hat) > RELEVANCE_RTOL * scale:
        raise WeakInstrumentError(
            f"residualized instrument is irrelevant (gamma_hat = {gamma_hat:.3e})",
            first_stage_t=fs_t,
            gamma_hat=gamma_hat,
        )
    beta_hat = float((ez @ ey) / (ez @ eg))
    eta = ey - beta_hat * eg
    if np.linalg.norm(eta) <= EXACT_FIT_RTOL * (np.linalg.norm(ey) + abs(beta_hat) * np.linalg.norm(eg)):
        raise SingularVarianceError(
            "residuals vanish: the HC0 variance is zero", beta_hat=beta_hat, r_used=R
        )
    sigma = hc0_sandwich(ez, eg, eta)
    return InferenceResult(
        beta_hat=beta_hat,
        sigma_hat=sigma,
        t_stat=float(np.sqrt(T) * beta_hat / sigma),
        first_stage_t=fs_t,
        r_used=R,
        gamma_hat=gamma_hat,
        n_obs=T,
        mode=mode,
        warnings=tuple(notes),
    )


def _check_R(R, panel):
    limit = min(panel.n_rows, panel.n_cols) - 2
    if not isinstance(R, (int, np.integer)) or R < 0 or R > limit:
        raise DimensionError(f"R must be an integer in [0, {limit}], got {R!r}")


def iv_estimate(data: RegressionData, R: int, mode: str = "iv") -> InferenceResult:
    """Residualize on ``[1_T, F_hat_R]`` and estimate the slope with HC0 inference.

    Parameters
    ----------
    data : RegressionData
    R : int
        Working dimension, ``0 <= R <= min(N, T) - 2``. ``R = 0`` projects on
        the intercept only.
    mode : {"iv", "ols"}
        ``"ols"`` uses ``z = g``.

    Raises
    ------
    WeakInstrumentError
        If the residualized instrument and treatment are uncorrelated; carries
        ``first_stage_t``.
    SingularVarianceError
        If the residuals vanish; carries ``beta_hat``.
    """
    _check_R(R, data.panel)
    z = data.instrument(mode)
    f_hat = None
    if R > 0:
        triple = full_svd(data.panel).columns(0, int(R))
        f_hat = fit_from_triple(triple, data.panel.n_rows, data.panel.n_cols).f_hat
    return estimate_from_factors(data.y, data.g, z, f_hat, mode)


def ols_estimate(data: RegressionData, R: int) -> InferenceResult:
    return iv_estimate(data, R, mode="ols")


@dataclass(frozen=True)
class ProfileRow:
    R: int
    result: InferenceResult | None
    error: str | None = None


def robustness_profile(data: RegressionData, R_list, mode: str = "iv") -> list[ProfileRow]:
    """Estimates over a grid of working dimensions sharing one SVD, sorted by R.

    Per-R failures (weak instrument, vanishing variance) are recorded in the
    row instead of aborting the profile.
    """
    Rs = sorted({int(R) for R in R_list})
    for R in Rs:
        _check_R(R, data.panel)
    z = data.instrument(mode)
    N, T = data.panel.n_rows, data.panel.n_cols
    triple = full_svd(data.panel) if Rs and Rs[-1] > 0 else None
    rows = []
    for R in Rs:
        f_hat = fit_from_triple(triple.columns(0, R), N, T).f_hat if R > 0 else None
        try:
            rows.append(ProfileRow(R, estimate_from_factors(data.y, data.g, z, f_hat, mode)))
        except (WeakInstrumentError, SingularVarianceError) as exc:
            rows.append(ProfileRow(R, None, str(exc)))
    return rows
