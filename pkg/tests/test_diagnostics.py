import numpy as np
import pytest

from fopca.diagnostics import (
    ProbeSet,
    boundary_case_r0,
    noise_cross_terms,
    extra_spectrum,
    fit_bulk,
    lowrank_error,
    make_probes,
    probe_incoherence,
    rate_regression,
    weyl_margins,
)
from fopca.errors import DimensionError, InputError, RequiresSyntheticError, UnsupportedRegimeError
from fopca.montecarlo import DgpConfig, generate
from fopca.panel import FactorStructure, full_svd
from fopca.pca import fit


def draw(N, T, r, seed, alpha=0.0):
    panel, truth, _ = generate(DgpConfig(n=N, t=T, r=r, alpha=alpha, seed=seed, replications=1), 0)
    return panel, truth


def test_probes_are_unit_and_deterministic():
    p = make_probes(30, 40, seed=3)
    assert p.left.shape == (30, 20) and p.right.shape == (40, 20)
    assert np.allclose(np.linalg.norm(p.left, axis=0), 1)
    assert np.array_equal(p.left, make_probes(30, 40, seed=3).left)
    assert not np.array_equal(p.left, make_probes(30, 40, seed=4).left)


def test_localized_vector_has_incoherence_one():
    V = np.zeros((30, 1))
    V[0, 0] = 1.0
    assert np.isclose(probe_incoherence(V, make_probes(30, 40).left), 1.0)
    assert probe_incoherence(np.zeros((30, 0)), make_probes(30, 40).left) == 0.0


def test_noiseless_gaps_zero():
    g = np.random.default_rng(0)
    B, F = g.standard_normal((20, 2)), g.standard_normal((30, 2))
    truth = FactorStructure(B, F, np.zeros((20, 30)))
    rep = extra_spectrum(truth.panel().data, truth, 5, make_probes(20, 30))
    assert np.allclose(rep.gaps, 0, atol=1e-12)


def test_extra_spectrum_r_equals_R_is_empty():
    panel, truth = draw(20, 30, 2, 1)
    rep = extra_spectrum(panel, truth, 2, make_probes(20, 30))
    assert rep.gaps.size == 0 and rep.ortho_left == 0 and rep.incoherence_left == 0


def test_extra_spectrum_errors():
    panel, truth = draw(20, 30, 2, 1)
    with pytest.raises(RequiresSyntheticError):
        extra_spectrum(panel, FactorStructure(truth.loadings, truth.factors), 4, make_probes(20, 30))
    with pytest.raises(DimensionError):
        extra_spectrum(panel, truth, 1, make_probes(20, 30))


def test_gaps_nonnegative():
    panel, truth = draw(40, 60, 3, 2)
    rep = extra_spectrum(panel, truth, 10, make_probes(40, 60))
    assert np.all(rep.gaps >= -1e-9)


def test_extra_vectors_nearly_orthogonal_to_loadings():
    hits = 0
    probes = make_probes(300, 300)
    for seed in range(200):
        panel, truth = draw(300, 300, 2, seed)
        rep = extra_spectrum(panel, truth, 5, probes)
        hits += rep.ortho_left < rep.incoherence_left
    assert hits >= 190


def test_cross_terms_zero_without_noise_and_close_to_infeasible():
    g = np.random.default_rng(3)
    N, T = 100, 200
    B, F = g.standard_normal((N, 2)), g.standard_normal((T, 2))
    truth0 = FactorStructure(B, F, np.zeros((N, T)))
    G_N, G_T = g.standard_normal((N, 2)), g.standard_normal((T, 2))
    assert noise_cross_terms(fit(truth0.panel(), 4), truth0, G_N, G_T) == (0.0, 0.0)
    panel, truth = draw(N, T, 2, 4)
    f = fit(panel, 2)
    left, right = noise_cross_terms(f, truth, G_N, G_T)
    # infeasible version with true loadings / factors rotated into the fitted frame
    U = truth.noise
    inf_left = np.linalg.norm(truth.loadings.T @ U @ G_T, 2) / (N * T)
    inf_right = np.linalg.norm(truth.factors.T @ U.T @ G_N, 2) / (N * T)
    assert 1 / 3 < left / inf_left < 3
    assert 1 / 3 < right / inf_right < 3


def test_lowrank_error_uniform_over_R_and_rate():
    errs = {R: [] for R in (3, 6, 12)}
    for seed in range(30):
        panel, truth = draw(100, 200, 3, seed)
        for R in errs:
            errs[R].append(lowrank_error(fit(panel, R), truth))
    med = {R: np.median(v) for R, v in errs.items()}
    assert max(med.values()) / min(med.values()) < 1.25 * np.sqrt(12 / 3)
    pts = []
    for T in (100, 200, 400):
        pts.append((T, np.median([lowrank_error(fit(p, 6), t)
                                  for p, t in (draw(T // 2, T, 3, 500 + s) for s in range(20))])))
    assert -0.7 <= rate_regression(pts).slope <= -0.3


def test_rate_regression_examples():
    fit_ = rate_regression([(T, 3 * T**-0.5) for T in (100, 200, 400, 800)])
    assert np.isclose(fit_.slope, -0.5) and fit_.stderr < 1e-12
    assert np.isclose(rate_regression([(1, 1), (2, 4), (4, 16)]).slope, 2)
    with pytest.raises(InputError):
        rate_regression([(1, 1), (2, 2)])
    with pytest.raises(InputError):
        rate_regression([(1, 1), (2, 0), (3, 1)])
    with pytest.raises(InputError):
        rate_regression([(2, 1), (2, 2), (2, 3)])


def test_boundary_case_probes():
    probes = make_probes(400, 400)
    small = 0
    for seed in range(200):
        panel, _ = draw(400, 400, 0, seed)
        rep = boundary_case_r0(panel, 3, probes)
        small += rep.incoherence_left < 0.25
    assert small >= 190
    panel, _ = draw(50, 80, 0, 1)
    svd = full_svd(panel)
    self_probe = ProbeSet(svd.left[:, :1], svd.right[:, :1])
    assert np.isclose(boundary_case_r0(panel, 1, self_probe).incoherence_left, 1.0)
    with pytest.raises(DimensionError):
        boundary_case_r0(panel, 0, probes)


def test_weyl_margins_nonnegative():
    for seed in range(20):
        panel, truth = draw(30, 50, 3, seed)
        assert np.all(weyl_margins(panel.data, truth.noise, 3) >= -1e-9)
    with pytest.raises(DimensionError):
        weyl_margins(np.ones((3, 4)), np.ones((3, 4)), 5)


def test_fit_bulk_pure_noise_and_spikes():
    panel, _ = draw(200, 400, 0, 5)
    bf = fit_bulk(panel, 0)
    assert not bf.spike.any()
    panel, _ = draw(200, 400, 3, 5)
    bf = fit_bulk(panel, 3)
    assert bf.spike[:3].all() and not bf.spike[3:].any()
    with pytest.raises(UnsupportedRegimeError):
        fit_bulk(np.ones((5, 5)), 0)
