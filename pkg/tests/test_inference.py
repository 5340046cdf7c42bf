import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fopca.diagnostics import rate_regression
from fopca.errors import (
    DegeneracyWarning,
    DegreesOfFreedomError,
    DimensionError,
    InputError,
    SingularVarianceError,
    WeakInstrumentError,
)
from fopca.inference import (
    RegressionData,
    control_basis,
    estimate_from_factors,
    first_stage_t,
    hc0_sandwich,
    iv_estimate,
    ols_estimate,
    residualize,
    robustness_profile,
)
from fopca.montecarlo import DgpConfig, generate
from fopca.panel import Panel
from fopca.pca import fit


def iv_data(seed, n=40, t=80, r=2, **kw):
    cfg = DgpConfig(n=n, t=t, r=r, seed=seed, replications=1, mode="iv", endogeneity=0.5, **kw)
    return generate(cfg, 0)


def normal_eq_iv(y, g, z, W):
    """Just-identified 2SLS with exogenous controls W from the normal equations."""
    Z = np.column_stack([z, W])
    G = np.column_stack([g, W])
    coef = np.linalg.solve(Z.T @ G, Z.T @ y)
    return coef[0], y - G @ coef


def test_residualize_r0_is_demeaning():
    a = np.array([1.0, 2.0, 6.0])
    assert np.allclose(residualize(a, None), a - 3.0)


def test_residualize_annihilates_controls_and_matches_lstsq():
    g = np.random.default_rng(0)
    F = g.standard_normal((50, 3))
    a = g.standard_normal(50)
    W = np.column_stack([np.ones(50), F])
    e = residualize(a, F)
    assert np.allclose(W.T @ e, 0, atol=1e-12)
    coef = np.linalg.solve(W.T @ W, W.T @ a)
    assert np.allclose(e, a - W @ coef, atol=1e-12)
    assert np.allclose(residualize(W @ [1, 2, 3, 4], F), 0, atol=1e-12)


def test_collinear_control_dropped_with_warning():
    g = np.random.default_rng(1)
    f = g.standard_normal((30, 1))
    F = np.column_stack([f, 2 * f])
    with pytest.warns(DegeneracyWarning):
        Q, notes = control_basis(F)
    assert Q.shape == (30, 2) and notes


def test_dof_error():
    with pytest.raises(DegreesOfFreedomError):
        control_basis(np.ones((4, 3)))


def test_hc0_hand_formula():
    ez = np.array([1.0, -1.0, 2.0, -2.0])
    eg = np.array([1.0, -2.0, 1.0, -1.0])
    eta = np.array([0.5, 1.0, -1.0, 0.0])
    bread = (1 + 2 + 2 + 2) / 4
    meat = (0.25 + 1 + 4 + 0) / 4
    assert np.isclose(hc0_sandwich(ez, eg, eta), np.sqrt(meat) / bread)
    assert hc0_sandwich(ez, eg, np.zeros(4)) == 0.0


def test_hc0_matches_population_variance():
    # heteroskedastic design with known asymptotic variance E[z^2 e^2] / E[z g]^2
    T = 10_000
    g = np.random.default_rng(2)
    z = g.standard_normal(T)
    x = z + g.standard_normal(T)
    eta = g.standard_normal(T) * np.sqrt(0.5 + z**2)
    y = 1.5 * x + eta
    res = estimate_from_factors(y, x, z, None, mode="iv")
    # E[z^2 (0.5 + z^2)] = 0.5 + 3, E[z x] = 1
    assert abs(res.sigma_hat / np.sqrt(3.5) - 1) < 0.05


@pytest.mark.parametrize("seed", range(20))
def test_iv_and_ols_match_normal_equations(seed):
    panel, _, data = iv_data(seed)
    for R in (0, 1, 3, 7):
        W = np.ones((panel.n_cols, 1))
        if R:
            W = np.column_stack([W, fit(panel, R).f_hat])
        for mode, z in (("iv", data.z), ("ols", data.g)):
            res = iv_estimate(data, R, mode=mode)
            beta, u = normal_eq_iv(data.y, data.g, z, W)
            assert abs(res.beta_hat - beta) <= 1e-9 * max(1, abs(beta))
            # HC0 from the untransformed residuals (FWL: identical residuals)
            ez = residualize(z, W[:, 1:])
            eg = residualize(data.g, W[:, 1:])
            sig = np.sqrt(np.mean(ez**2 * u**2)) / abs(ez @ eg / len(u))
            assert abs(res.sigma_hat - sig) <= 1e-9 * sig


def test_ols_alias_and_first_stage_inf():
    _, _, data = iv_data(3)
    a, b = ols_estimate(data, 2), iv_estimate(data, 2, mode="ols")
    assert a == b and np.isinf(a.first_stage_t)
    assert np.isfinite(iv_estimate(data, 2).first_stage_t)


def test_first_stage_t_hand_value():
    ez = np.array([1.0, -1.0, 1.0, -1.0])
    eg = np.array([2.0, -1.0, 1.0, -2.0])
    gam = (ez @ eg) / 4
    u = eg - gam * ez
    assert np.isclose(first_stage_t(eg, ez), gam * 4 / np.sqrt(np.sum(ez**2 * u**2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5000), st.floats(0.1, 50), st.floats(0.1, 50), st.floats(-5, 5))
def test_scale_and_sign_equivariance(seed, cy, cg, shift):
    _, _, data = iv_data(seed, n=20, t=40)
    base = iv_estimate(data, 2)
    scaled = RegressionData(cy * data.y + shift, cg * data.g, data.panel, -data.z)
    res = iv_estimate(scaled, 2)
    assert np.isclose(res.beta_hat, base.beta_hat * cy / cg, rtol=1e-8, atol=1e-12)
    assert np.isclose(res.t_stat, base.t_stat, rtol=1e-7, atol=1e-9)


def test_residual_norm_monotone_in_R():
    panel, _, data = iv_data(4, n=30, t=60)
    norms = [np.linalg.norm(residualize(data.y, fit(panel, R).f_hat if R else None))
             for R in range(0, 25)]
    assert all(b <= a + 1e-10 for a, b in zip(norms, norms[1:]))


def test_exact_fit_raises_with_beta():
    g = np.random.default_rng(5)
    T = 30
    gv = g.standard_normal(T)
    data = RegressionData(2.0 * gv + 1.0, gv, Panel(g.standard_normal((8, T))))
    with pytest.raises(SingularVarianceError) as info:
        ols_estimate(data, 0)
    assert np.isclose(info.value.beta_hat, 2.0)


def test_weak_instrument():
    g = np.random.default_rng(6)
    T = 40
    gv = g.standard_normal(T)
    W = np.column_stack([np.ones(T), gv])
    z = g.standard_normal(T)
    z = z - W @ np.linalg.lstsq(W, z, rcond=None)[0]  # z orthogonal to [1, g]
    data = RegressionData(g.standard_normal(T), gv, Panel(g.standard_normal((6, T))), z)
    with pytest.raises(WeakInstrumentError) as info:
        iv_estimate(data, 0)
    assert np.isfinite(info.value.first_stage_t)


def test_input_errors():
    panel = Panel(np.random.default_rng(7).standard_normal((10, 20)))
    y = np.zeros(20)
    with pytest.raises(DimensionError):
        RegressionData(np.zeros(19), y, panel)
    data = RegressionData(y, y, panel)
    with pytest.raises(InputError):
        iv_estimate(data, 1)          # no instrument
    for R in (-1, 9, 2.0):
        with pytest.raises(DimensionError):
            ols_estimate(data, R)


def test_robustness_profile_sorted_and_consistent():
    _, _, data = iv_data(8)
    rows = robustness_profile(data, [6, 2, 4, 2])
    assert [r.R for r in rows] == [2, 4, 6]
    for row in rows:
        assert row.result.beta_hat == iv_estimate(data, row.R).beta_hat


def test_overestimation_gap_shrinks_with_T():
    # beta_hat(R) - beta_hat(r) is O_p(1/T) up to logs: slope well below -1/2
    pts = []
    for T in (100, 200, 400, 800):
        d = []
        for s in range(40):
            cfg = DgpConfig(n=T // 2, t=T, r=2, seed=100 + s, replications=1)
            _, _, data = generate(cfg, 0)
            rows = robustness_profile(data, [2, 6], mode="ols")
            d.append(abs(rows[1].result.beta_hat - rows[0].result.beta_hat))
        pts.append((T, np.median(d)))
    assert rate_regression(pts).slope < -0.6
