"""Simulation design, replication driver and distributional summaries of ``t_beta``."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.special import ndtr

from . import rng
from .errors import (
    DimensionError,
    ExperimentError,
    InputError,
    SingularVarianceError,
    WeakInstrumentError,
)
from .inference import RegressionData, estimate_from_factors
from .panel import FactorStructure, Panel, fmt_float, full_svd
from .pca import fit_from_triple

KS_TERM_TOL = 1e-12
# Below this value of sqrt(n) D the Jacobi theta form of the Kolmogorov CDF is used.
KS_THETA_SWITCH = 1.0


@dataclass(frozen=True)
class DgpConfig:
    """Simulation design.

    ``g = mu_g + F alpha_g + e_g`` and ``y = mu_y + beta g + F rho + eta``; the
    panel is ``X = B F' + diag(D)^{1/2} E`` with loadings nonzero with
    probability ``n^-alpha`` and ``D_ii ~ U(sigma_low, sigma_high)``.

    In ``mode="iv"`` an instrument ``z = mu_z + F alpha_z + e_z`` enters the
    treatment as ``g = ... + strength * e_z`` and ``eta`` picks up
    ``endogeneity * e_g``. ``fix_sigma_e`` draws ``D`` once for all replications.
    """

    n: int
    t: int
    r: int = 3
    alpha: float = 0.0
    beta: float = 0.0
    mu_g: float = 2.0
    mu_y: float = 3.0
    sigma_low: float = 0.5
    sigma_high: float = 1.5
    seed: int = 0
    replications: int = 1000
    fix_sigma_e: bool = False
    mode: str = "ols"
    mu_z: float = 1.0
    strength: float = 1.0
    endogeneity: float = 0.0

    def __post_init__(self):
        for name in ("n", "t", "r", "seed", "replications"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise InputError(f"{name} must be an integer, got {v!r}")
        if self.n < 1 or self.t < 2:
            raise InputError("need n >= 1 and t >= 2")
        if self.r < 0:
            raise InputError("r must be non-negative")
        if not 0.0 <= self.alpha < 1.0:
            raise InputError(f"alpha must lie in [0, 1), got {self.alpha!r}")
        if self.replications < 1:
            raise InputError("replications must be positive")
        if not 0 <= self.seed < 2**64:
            raise InputError("seed must fit in 64 bits")
        if not 0 < self.sigma_low <= self.sigma_high:
            raise InputError("need 0 < sigma_low <= sigma_high")
        if self.mode not in ("ols", "iv"):
            raise InputError(f"mode must be 'ols' or 'iv', got {self.mode!r}")
        for name in ("alpha", "beta", "mu_g", "mu_y", "mu_z", "strength", "endogeneity"):
            if not math.isfinite(getattr(self, name)):
                raise InputError(f"{name} must be finite")

    @property
    def p_n(self) -> float:
        return float(self.n) ** (-self.alpha)

    @classmethod
    def from_dict(cls, d: dict) -> DgpConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown DGP fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InputError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


def generate(config: DgpConfig, rep: int) -> tuple[Panel, FactorStructure, RegressionData]:
    """Draw one replication; each random object has its own keyed stream."""
    N, T, r, seed = config.n, config.t, config.r, config.seed

    def s(obj, rep_key=rep):
        return rng.stream(seed, rep_key, obj)

    if r > 0:
        values = s(rng.LOADINGS).normal((N, r))
        mask = s(rng.LOADING_MASK).uniform((N, r)) < config.p_n
        B = np.where(mask, values, 0.0)
        F = s(rng.FACTORS).normal((T, r))
        rho = s(rng.RHO).normal(r)
        alpha_g = s(rng.ALPHA_G).normal(r)
    else:
        B, F = np.zeros((N, 0)), np.zeros((T, 0))
        rho = alpha_g = np.zeros(0)
    D = s(rng.SIGMA_E, 0 if config.fix_sigma_e else rep).uniform_range(
        config.sigma_low, config.sigma_high, N
    )
    U = np.sqrt(D)[:, None] * s(rng.NOISE).normal((N, T))
    eps_g = s(rng.EPS_G).normal(T)
    eta = s(rng.ETA).normal(T)

    g = config.mu_g + F @ alpha_g + eps_g
    z = None
    if config.mode == "iv":
        alpha_z = s(rng.ALPHA_Z).normal(r) if r > 0 else np.zeros(0)
        eps_z = s(rng.EPS_Z).normal(T)
        z = config.mu_z + F @ alpha_z + eps_z
        g = g + config.strength * eps_z
        eta = eta + config.endogeneity * eps_g
    y = config.mu_y + config.beta * g + F @ rho + eta

    truth = FactorStructure(B, F, U)
    panel = truth.panel()
    return panel, truth, RegressionData(y, g, panel, z)


# ----------------------------------------------------------------- statistics


def kolmogorov_sf(x: float) -> float:
    """``P(sqrt(n) D_n > x)`` under the asymptotic Kolmogorov law.

    For ``x >= 1`` the alternating series ``2 sum (-1)^{j-1} exp(-2 j^2 x^2)``
    is summed until a term drops below ``KS_TERM_TOL``. Below that the
    equivalent theta-function form
    ``K(x) = sqrt(2 pi)/x sum exp(-(2j-1)^2 pi^2 / (8 x^2))`` is used, since
    the alternating series converges slowly and cancels badly there.
    """
    if x <= 0:
        return 1.0
    if x < KS_THETA_SWITCH:
        c = -(np.pi**2) / (8 * x * x)
        total, j = 0.0, 1
        while True:
            term = math.exp(c * (2 * j - 1) ** 2)
            total += term
            if term < KS_TERM_TOL:
                break
            j += 1
        return float(min(1.0, max(0.0, 1.0 - math.sqrt(2 * np.pi) / x * total)))
    total, j = 0.0, 1
    while True:
        term = math.exp(-2.0 * j * j * x * x)
        total += term if j % 2 else -term
        if term < KS_TERM_TOL:
            break
        j += 1
    return float(min(1.0, max(0.0, 2.0 * total)))


def ks_statistic(samples) -> float:
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    cdf = ndtr(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))


def ks_test_normal(samples) -> float:
    """Two-sided KS p-value of ``samples`` against N(0, 1), asymptotic law."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 10:
        raise InputError(f"KS test needs at least 10 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise InputError("KS test samples must be finite")
    return kolmogorov_sf(math.sqrt(x.size) * ks_statistic(x))


@dataclass(frozen=True)
class McSummary:
    """Mean, sd (ddof 1), type-7 quantiles and KS p-value of a sample of ``t_beta``.

    ``sd`` is NaN for a single observation and ``ks_p`` is NaN below 10.
    """

    mean: float
    sd: float
    q025: float
    q975: float
    ks_p: float
    n_reps: int
    n_degenerate: int = 0


def summarize(samples, n_degenerate: int = 0) -> McSummary:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 1:
        raise InputError("cannot summarize an empty sample")
    sd = float(np.std(x, ddof=1)) if x.size > 1 else float("nan")
    q025, q975 = np.quantile(x, [0.025, 0.975], method="linear")
    ks_p = ks_test_normal(x) if x.size >= 10 else float("nan")
    return McSummary(float(np.mean(x)), sd, float(q025), float(q975), ks_p, int(x.size), n_degenerate)


# ------------------------------------------------------------------- driver


@dataclass(frozen=True)
class RepOutcome:
    rep: int
    t_stats: dict          # R -> t or None when degenerate
    beta_hats: dict        # R -> beta_hat or None


def run_replication(config: DgpConfig, rep: int, R_list, mode: str | None = None) -> RepOutcome:
    """One replication analyzed at every R in ``R_list`` from a single SVD."""
    mode = mode or config.mode
    panel, _, data = generate(config, rep)
    z = data.instrument(mode)
    R_max = max(R_list)
    triple = full_svd(panel) if R_max > 0 else None
    t_stats, betas = {}, {}
    for R in R_list:
        f_hat = (
            fit_from_triple(triple.columns(0, R), config.n, config.t).f_hat if R > 0 else None
        )
        try:
            res = estimate_from_factors(data.y, data.g, z, f_hat, mode)
        except (WeakInstrumentError, SingularVarianceError):
            t_stats[R] = betas[R] = None
            continue
        t_stats[R] = res.t_at(config.beta)
        betas[R] = res.beta_hat
    return RepOutcome(rep, t_stats, betas)


@dataclass(frozen=True)
class ExperimentResult:
    config: DgpConfig
    R_list: tuple
    summaries: dict        # R -> McSummary
    t_stats: dict          # R -> array over replications (NaN where degenerate)


def _check_R_list(config, R_list):
    Rs = [int(R) for R in R_list]
    if not Rs:
        raise InputError("R_list is empty")
    if len(set(Rs)) != len(Rs):
        raise InputError("R_list has duplicates")
    limit = min(config.n, config.t) - 2
    for R in Rs:
        if not 0 <= R <= limit:
            raise DimensionError(f"R = {R} outside [0, {limit}]")
    return tuple(Rs)


def run_experiment(config: DgpConfig, R_list, threads: int = 1, mode: str | None = None,
                   progress=None) -> ExperimentResult:
    """Run ``config.replications`` replications and summarize ``t_beta`` per R.

    Replications are independent and may run on ``threads`` workers; results
    are gathered in replication order so the output does not depend on the
    worker count. Degenerate replications are excluded per R and counted.
    """
    Rs = _check_R_list(config, R_list)
    reps = range(config.replications)

    def one(rep):
        out = run_replication(config, rep, Rs, mode)
        if progress is not None:
            progress(rep)
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, reps))
    else:
        outcomes = [one(rep) for rep in reps]

    summaries, t_all = {}, {}
    for R in Rs:
        ts = np.array([np.nan if o.t_stats[R] is None else o.t_stats[R] for o in outcomes])
        good = ts[np.isfinite(ts)]
        n_bad = int(ts.size - good.size)
        if good.size == 0:
            raise ExperimentError(f"all {ts.size} replications degenerate at R = {R}")
        summaries[R] = summarize(good, n_bad)
        t_all[R] = ts
    return ExperimentResult(config, Rs, summaries, t_all)


# ------------------------------------------------------------ sweeps and tables

TABLE_COLUMNS = ("T", "alpha", "R", "mean", "sd", "q025", "q975", "ks_p", "n_reps", "n_degenerate")


@dataclass(frozen=True)
class ExperimentSpec:
    """A DGP plus R grid, optionally swept over ``t`` or ``alpha``."""

    dgp: DgpConfig
    R_list: tuple
    mode: str = "ols"
    sweep_field: str | None = None
    sweep_values: tuple = ()

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        if not isinstance(d, dict):
            raise InputError("experiment spec must be a JSON object")
        unknown = set(d) - {"dgp", "R_list", "mode", "sweep"}
        if unknown:
            raise InputError(f"unknown spec fields: {sorted(unknown)}")
        if "dgp" not in d or "R_list" not in d:
            raise InputError("experiment spec needs 'dgp' and 'R_list'")
        mode = d.get("mode", "ols")
        dgp_dict = dict(d["dgp"])
        dgp_dict.setdefault("mode", mode)
        dgp = DgpConfig.from_dict(dgp_dict)
        R_list = d["R_list"]
        if not isinstance(R_list, list) or not all(
            isinstance(R, int) and not isinstance(R, bool) for R in R_list
        ):
            raise InputError("R_list must be a list of integers")
        field_name, values = None, ()
        sweep = d.get("sweep")
        if sweep is not None:
            if not isinstance(sweep, dict) or len(sweep) != 1:
                raise InputError("sweep must be an object with a single key 't' or 'alpha'")
            field_name, vals = next(iter(sweep.items()))
            if field_name not in ("t", "alpha") or not isinstance(vals, list) or not vals:
                raise InputError("sweep must be {'t': [...]} or {'alpha': [...]}")
            values = tuple(vals)
            for v in values:
                _check_R_list(replace(dgp, **{field_name: v}), R_list)
        else:
            _check_R_list(dgp, R_list)
        if mode not in ("ols", "iv"):
            raise InputError(f"mode must be 'ols' or 'iv', got {mode!r}")
        return cls(dgp, tuple(R_list), mode, field_name, values)

    def cells(self) -> list[DgpConfig]:
        if self.sweep_field is None:
            return [self.dgp]
        return [replace(self.dgp, **{self.sweep_field: v}) for v in self.sweep_values]

    def with_overrides(self, replications=None, seed=None) -> ExperimentSpec:
        kw = {}
        if replications is not None:
            kw["replications"] = int(replications)
        if seed is not None:
            kw["seed"] = int(seed)
        return replace(self, dgp=replace(self.dgp, **kw)) if kw else self


def run_spec(spec: ExperimentSpec, threads: int = 1, progress=None) -> list[ExperimentResult]:
    return [run_experiment(c, spec.R_list, threads, spec.mode, progress) for c in spec.cells()]


def table_rows(results) -> list[list[str]]:
    rows = []
    for res in results:
        for R in res.R_list:
            s = res.summaries[R]
            rows.append([
                str(res.config.t),
                fmt_float(res.config.alpha),
                str(R),
                fmt_float(s.mean),
                fmt_float(s.sd),
                fmt_float(s.q025),
                fmt_float(s.q975),
                fmt_float(s.ks_p),
                str(s.n_reps),
                str(s.n_degenerate),
            ])
    return rows


def table_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    w.writerows(table_rows(results))
    return buf.getvalue()


def t_dump_csv(results) -> str:
    """Per-replication ``t_beta`` in long format (T, alpha, R, rep, t)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("T", "alpha", "R", "rep", "t"))
    for res in results:
        for R in res.R_list:
            for rep, t in enumerate(res.t_stats[R]):
                w.writerow((res.config.t, fmt_float(res.config.alpha), R, rep, fmt_float(t)))
    return buf.getvalue()


# Reduced-scale presets of the three simulation designs.
EXPERIMENT_1 = {
    "dgp": {"n": 200, "t": 400, "r": 3, "alpha": 0.0, "replications": 1000, "seed": 1},
    "R_list": [1, 2, 3, 6, 12, 30],
    "mode": "ols",
    "sweep": {"t": [100, 400, 800]},
}
EXPERIMENT_2 = {
    "dgp": {"n": 200, "t": 400, "r": 3, "alpha": 0.0, "replications": 1000, "seed": 2},
    "R_list": [1, 2, 3, 6, 12],
    "mode": "ols",
    "sweep": {"alpha": [0.0, 0.1, 0.2, 0.3, 0.4]},
}
EXPERIMENT_3 = {
    "dgp": {"n": 200, "t": 400, "r": 0, "alpha": 0.0, "replications": 1000, "seed": 3},
    "R_list": [0, 3, 6, 12, 30],
    "mode": "ols",
    "sweep": {"t": [100, 400, 800]},
}
