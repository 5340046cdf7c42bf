"""Fixed-order PCA estimators and the expanded / compressed rotations."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .errors import DimensionError, SingularityError
from .panel import (
    RANK_RTOL,
    FactorStructure,
    SvdTriple,
    _as_matrix,
    read_matrix_csv,
    svd_top,
    write_matrix_csv,
)


@dataclass(frozen=True, eq=False)
class PcaFit:
    """PCA fit of a panel with working dimension ``R``.

    Attributes
    ----------
    triple : SvdTriple
        Top-R singular triple of X.
    b_hat : ndarray (N, R)
        Estimated loadings ``sqrt(N) * Xi_R``.
    f_hat : ndarray (T, R)
        Estimated factors ``V_R L_R / sqrt(N)``, equal to ``X' b_hat / N``.
    m_hat : ndarray (N, T)
        Low-rank estimate ``Xi_R L_R V_R'``.
    s_f_hat : ndarray (R, R)
        ``f_hat' f_hat / T = L_R^2 / (N T)``.
    """

    triple: SvdTriple
    b_hat: np.ndarray
    f_hat: np.ndarray
    m_hat: np.ndarray
    s_f_hat: np.ndarray
    working_dim: int

    @property
    def n_rows(self) -> int:
        return self.b_hat.shape[0]

    @property
    def n_cols(self) -> int:
        return self.f_hat.shape[0]


def fit_from_triple(triple: SvdTriple, n_rows: int, n_cols: int) -> PcaFit:
    left, s, right = triple.left, triple.singular_values, triple.right
    sqrt_n = np.sqrt(n_rows)
    b_hat = sqrt_n * left
    f_hat = right * (s / sqrt_n)
    m_hat = (left * s) @ right.T
    s_f_hat = np.diag(s**2 / (n_rows * n_cols))
    return PcaFit(triple, b_hat, f_hat, m_hat, s_f_hat, triple.k)


def fit(X, R: int) -> PcaFit:
    """Fixed-order PCA of ``X`` keeping the top ``R`` singular components."""
    a = _as_matrix(X)
    N, T = a.shape
    if not isinstance(R, (int, np.integer)) or not 1 <= R <= min(N, T):
        raise DimensionError(f"R must be an integer in [1, {min(N, T)}], got {R!r}")
    return fit_from_triple(svd_top(a, int(R)), N, T)


@dataclass(frozen=True, eq=False)
class SplitFit:
    """Spiked (first ``r``) and extra (``r+1..R``) singular components."""

    spiked: SvdTriple
    extra: SvdTriple
    assumed_rank: int


def split(pca_fit: PcaFit, r: int) -> SplitFit:
    R = pca_fit.working_dim
    if not 0 <= r <= R:
        raise DimensionError(f"assumed rank r={r} must lie in [0, R={R}]")
    t = pca_fit.triple
    return SplitFit(t.columns(0, r), t.columns(r, R), r)


@dataclass(frozen=True, eq=False)
class RotationPair:
    """Expanded rotation ``H`` (R x r) and its compressed inverse ``H+``."""

    h: np.ndarray
    h_plus: np.ndarray
    smallest_singular: float

    @property
    def degenerate(self) -> bool:
        return self.h.shape[1] == 0 or not self.smallest_singular > _h_tol(self.h)


def _h_tol(h):
    if h.size == 0:
        return 0.0
    return RANK_RTOL * max(np.linalg.norm(h, 2), np.finfo(float).tiny)


def _sym_pinv(S):
    # Pseudo-inverse of a symmetric PSD matrix through its eigendecomposition.
    w, Q = np.linalg.eigh((S + S.T) / 2)
    cut = RANK_RTOL * max(abs(w).max(), np.finfo(float).tiny)
    inv = np.zeros_like(w)
    keep = w > cut
    inv[keep] = 1.0 / w[keep]
    return (Q * inv) @ Q.T


def expanded_rotation(B, pca_fit: PcaFit) -> RotationPair:
    """``H' = B' b_hat / N`` together with ``H+ = (H H')^+ H``.

    For ``r = 0`` an empty pair is returned. A pair whose smallest singular
    value is below the rank tolerance is returned with ``degenerate`` set.
    """
    B = _as_matrix(B)
    if B.shape[0] != pca_fit.n_rows:
        raise DimensionError(f"B has {B.shape[0]} rows, fit has {pca_fit.n_rows}")
    R, r = pca_fit.working_dim, B.shape[1]
    if r == 0:
        empty = np.zeros((R, 0))
        return RotationPair(empty, empty.copy(), 0.0)
    h = pca_fit.b_hat.T @ B / pca_fit.n_rows
    sv = np.linalg.svd(h, compute_uv=False)
    smallest = float(sv[r - 1]) if r <= R else 0.0
    h_plus = _sym_pinv(h @ h.T) @ h
    return RotationPair(h, h_plus, smallest)


def compressed_rotation(pair: RotationPair) -> np.ndarray:
    """Return ``H+`` after checking that ``H' H+ = I_r`` is attainable."""
    if pair.degenerate:
        raise SingularityError(
            f"expanded rotation is degenerate (lambda_r(H) = {pair.smallest_singular:.3e})"
        )
    return pair.h_plus


@dataclass(frozen=True, eq=False)
class AlignmentReport:
    """Factor-space errors against known factors.

    Needs ground truth, so it is only produced on synthetic panels. All fields
    are ``None`` when ``r = 0``; a degenerate rotation leaves the compressed
    and sandwich fields ``None``.
    """

    requires_truth: ClassVar[bool] = True

    expanded: float | None = None
    expanded_cross: float | None = None
    compressed: float | None = None
    compressed_cross: float | None = None
    sandwich: float | None = None
    degenerate: bool = False

    @property
    def empty(self) -> bool:
        return self.expanded is None


def factor_alignment(pca_fit: PcaFit, truth: FactorStructure) -> AlignmentReport:
    """Spectral-norm errors of the two rotations and of the inverse covariance.

    Reports ``|F_hat - F H'| / sqrt(T)``, ``|F'(F_hat - F H')| / T``,
    ``|F_hat H+ - F| / sqrt(T)``, ``|F'(F_hat H+ - F)| / T`` and
    ``|H' (F_hat'F_hat/T)^{-1} H - (F'F/T)^{-1}|``.
    """
    if truth.rank == 0:
        return AlignmentReport()
    if truth.n_rows != pca_fit.n_rows or truth.n_cols != pca_fit.n_cols:
        raise DimensionError("truth does not match the fitted panel dimensions")
    pair = expanded_rotation(truth.loadings, pca_fit)
    F, f_hat, T = truth.factors, pca_fit.f_hat, pca_fit.n_cols
    resid = f_hat - F @ pair.h.T
    expanded = np.linalg.norm(resid, 2) / np.sqrt(T)
    expanded_cross = np.linalg.norm(F.T @ resid, 2) / T
    if pair.degenerate:
        return AlignmentReport(expanded, expanded_cross, degenerate=True)
    h_plus = compressed_rotation(pair)
    cresid = f_hat @ h_plus - F
    sandwich = pair.h.T @ _sym_pinv(pca_fit.s_f_hat) @ pair.h - np.linalg.inv(F.T @ F / T)
    return AlignmentReport(
        float(expanded),
        float(expanded_cross),
        float(np.linalg.norm(cresid, 2) / np.sqrt(T)),
        float(np.linalg.norm(F.T @ cresid, 2) / T),
        float(np.linalg.norm(sandwich, 2)),
    )


def save_fit(pca_fit: PcaFit, directory) -> None:
    """Write ``b_hat.csv``, ``f_hat.csv``, ``singular_values.csv`` and ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    write_matrix_csv(os.path.join(directory, "b_hat.csv"), pca_fit.b_hat)
    write_matrix_csv(os.path.join(directory, "f_hat.csv"), pca_fit.f_hat)
    write_matrix_csv(
        os.path.join(directory, "singular_values.csv"),
        pca_fit.triple.singular_values.reshape(-1, 1),
    )
    manifest = {"N": pca_fit.n_rows, "T": pca_fit.n_cols, "R": pca_fit.working_dim}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_fit(directory) -> dict:
    """Read back what ``save_fit`` wrote (arrays plus the manifest)."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    return {
        "manifest": manifest,
        "b_hat": read_matrix_csv(os.path.join(directory, "b_hat.csv")),
        "f_hat": read_matrix_csv(os.path.join(directory, "f_hat.csv")),
        "singular_values": read_matrix_csv(os.path.join(directory, "singular_values.csv")).ravel(),
    }
