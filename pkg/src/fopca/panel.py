"""Panel containers, truncated SVD and the canonical rotation of a factor model.

Matrices are dense ``float64`` arrays. A panel ``X`` is stored with one row
per cross-section unit ``i`` and one column per period ``t`` (shape N x T).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .errors import DegeneracyWarning, DimensionError, InputError, RankError

# Singular values below RANK_RTOL * largest are treated as zero.
RANK_RTOL = 1e-12
# Relative eigenvalue gap below which canonical_normalization reports a tie.
TIE_RTOL = 1e-8


def _frozen(a, name):
    arr = np.array(a, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Panel:
    """Observed N x T panel (rows = units, columns = periods)."""

    data: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.data, "panel")
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InputError(f"panel must be a non-empty 2-D matrix, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]

    @property
    def phi(self) -> float:
        """Aspect ratio N / T."""
        return self.n_rows / self.n_cols


@dataclass(frozen=True, eq=False)
class FactorStructure:
    """Known decomposition ``X = B F' + U`` of a synthetic panel."""

    loadings: np.ndarray
    factors: np.ndarray
    noise: np.ndarray | None = None

    def __post_init__(self):
        b = _frozen(self.loadings, "loadings")
        f = _frozen(self.factors, "factors")
        if b.ndim != 2 or f.ndim != 2:
            raise InputError("loadings and factors must be 2-D")
        if b.shape[1] != f.shape[1]:
            raise DimensionError(
                f"loadings have {b.shape[1]} columns but factors have {f.shape[1]}"
            )
        object.__setattr__(self, "loadings", b)
        object.__setattr__(self, "factors", f)
        if self.noise is not None:
            u = _frozen(self.noise, "noise")
            if u.shape != (b.shape[0], f.shape[0]):
                raise DimensionError(
                    f"noise shape {u.shape} does not match ({b.shape[0]}, {f.shape[0]})"
                )
            object.__setattr__(self, "noise", u)

    @property
    def rank(self) -> int:
        return self.loadings.shape[1]

    @property
    def n_rows(self) -> int:
        return self.loadings.shape[0]

    @property
    def n_cols(self) -> int:
        return self.factors.shape[0]

    @property
    def signal(self) -> np.ndarray:
        """Low-rank component ``M = B F'``."""
        return self.loadings @ self.factors.T

    def panel(self) -> Panel:
        if self.noise is None:
            return Panel(self.signal)
        return Panel(self.signal + self.noise)

    def nu_m(self) -> float:
        """Signal strength sqrt(lambda_r(B'B)); zero when r = 0."""
        if self.rank == 0:
            return 0.0
        return float(np.sqrt(max(np.linalg.eigvalsh(self.loadings.T @ self.loadings)[0], 0.0)))


@dataclass(frozen=True, eq=False)
class SvdTriple:
    """Top-k singular triple ``(left, singular_values, right)``."""

    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray

    @property
    def k(self) -> int:
        return self.singular_values.shape[0]

    def columns(self, start: int, stop: int) -> SvdTriple:
        """View of columns ``start:stop`` (no copy)."""
        return SvdTriple(
            self.left[:, start:stop],
            self.singular_values[start:stop],
            self.right[:, start:stop],
        )

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular_values) @ self.right.T


def _as_matrix(X) -> np.ndarray:
    if isinstance(X, Panel):
        return X.data
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("matrix contains non-finite entries")
    return arr


def _fix_signs(left, right):
    # Largest-magnitude entry of each left vector made positive (first one on ties).
    if left.shape[1] == 0:
        return left, right
    idx = np.argmax(np.abs(left), axis=0)
    signs = np.sign(left[idx, np.arange(left.shape[1])])
    signs[signs == 0] = 1.0
    return left * signs, right * signs


def full_svd(X) -> SvdTriple:
    """Thin SVD of all ``min(N, T)`` components under the sign convention."""
    a = np.ascontiguousarray(_as_matrix(X))
    u, s, vt = sla.svd(a, full_matrices=False, lapack_driver="gesdd")
    u, v = _fix_signs(u, vt.T)
    return SvdTriple(u, s, v)


def svd_top(X, k: int) -> SvdTriple:
    """Top-``k`` singular triple of ``X``.

    The full thin SVD is computed and truncated, so the first ``j`` columns of
    ``svd_top(X, k)`` do not depend on ``k``. Each left singular vector is
    flipped so that its entry of largest absolute value is positive, and the
    right vector is flipped with it.
    """
    a = _as_matrix(X)
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= min(a.shape):
        raise DimensionError(f"k must be an integer in [1, {min(a.shape)}], got {k!r}")
    return full_svd(a).columns(0, int(k))


def singular_values(X) -> np.ndarray:
    """All singular values of ``X`` in nonincreasing order."""
    return sla.svdvals(np.ascontiguousarray(_as_matrix(X)))


def numerical_rank(s, rtol: float = RANK_RTOL) -> int:
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0 or s.max() <= 0:
        return 0
    return int(np.sum(s > rtol * s.max()))


def pinv(A, rtol: float = RANK_RTOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with relative singular-value cutoff."""
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return np.zeros(A.shape[::-1])
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rtol * s.max() if s.size and s.max() > 0 else np.zeros_like(s, dtype=bool)
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


def demean_columns(A) -> np.ndarray:
    """Subtract the column means, i.e. apply ``I - P_{1_T}`` to ``A``.

    Vectors are treated as a single column and returned with their input shape.
    """
    a = np.asarray(A, dtype=np.float64)
    if a.shape[0] < 2:
        raise InputError(f"need at least 2 rows to demean, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise InputError("matrix contains non-finite entries")
    return a - a.mean(axis=0)


@dataclass(frozen=True, eq=False)
class CanonicalRotation:
    """Rotations tying (B, F) to the singular vectors of ``M = B F'``.

    ``B @ h_b / sqrt(N)`` equals the left singular vectors of ``M``,
    ``F @ h_f / sqrt(T)`` its right singular vectors, and
    ``inv(h_f.T @ h_b) == diag(sqrt(j))`` (the singular values over sqrt(NT)).
    """

    h_b: np.ndarray
    h_f: np.ndarray
    j: np.ndarray
    s_b: np.ndarray
    s_f: np.ndarray
    tie: bool = False


def _psd_sqrt(S, name):
    w, Q = np.linalg.eigh(S)
    if w[0] <= RANK_RTOL * max(w[-1], 0.0) or w[-1] <= 0:
        raise RankError(f"{name} is singular (eigenvalues {w})")
    root = (Q * np.sqrt(w)) @ Q.T
    inv_root = (Q / np.sqrt(w)) @ Q.T
    return root, inv_root


def _sorted_eigh(K):
    w, G = np.linalg.eigh((K + K.T) / 2)
    order = np.argsort(-w, kind="stable")
    return w[order], G[:, order]


def _tie_groups(w):
    groups, start = [], 0
    for i in range(1, len(w) + 1):
        if i == len(w) or abs(w[i - 1] - w[i]) >= TIE_RTOL * max(abs(w[0]), 1e-300):
            groups.append(list(range(start, i)))
            start = i
    return groups


def _first_nonzero_sign(v):
    nz = np.flatnonzero(np.abs(v) > RANK_RTOL * np.abs(v).max())
    return np.sign(v[nz[0]]) if nz.size else 1.0


def canonical_normalization(B, F) -> CanonicalRotation:
    """Build ``H_B = S_B^{-1/2} G_B`` and ``H_F = S_f^{-1/2} G_F``.

    ``G_B`` and ``G_F`` are eigenvectors of ``S_B^{1/2} S_f S_B^{1/2}`` and
    ``S_f^{1/2} S_B S_f^{1/2}`` with eigenvalues ``j`` in nonincreasing order.
    Columns of ``G_B`` are signed so that ``B H_B / sqrt(N)`` follows the
    ``svd_top`` sign convention; columns of ``G_F`` are then signed so that
    ``H_F' H_B`` has a positive diagonal.

    When two eigenvalues tie (relative gap below ``TIE_RTOL``) a
    ``DegeneracyWarning`` is emitted, tied eigenvectors are ordered with
    positive leading coordinate first and then by index, and ``H_F`` is
    derived from ``H_B`` through ``H_F = H_B^{-T} J^{-1/2}`` so that the
    identities still hold.
    """
    B = _as_matrix(B)
    F = _as_matrix(F)
    N, r = B.shape
    T = F.shape[0]
    if r < 1:
        raise DimensionError("canonical normalization needs r >= 1")
    if F.shape[1] != r:
        raise DimensionError(f"B has {r} columns but F has {F.shape[1]}")
    S_B = B.T @ B / N
    S_f = F.T @ F / T
    sb_half, sb_inv_half = _psd_sqrt(S_B, "S_B")
    sf_half, sf_inv_half = _psd_sqrt(S_f, "S_f")

    j, G_B = _sorted_eigh(sb_half @ S_f @ sb_half)
    groups = _tie_groups(j)
    tie = any(len(g) > 1 for g in groups)
    if tie:
        warnings.warn(
            f"tied eigenvalues in canonical normalization: {j}", DegeneracyWarning, stacklevel=2
        )
        order = []
        for g in groups:
            order.extend(sorted(g, key=lambda i: (-_first_nonzero_sign(G_B[:, i]), i)))
        j, G_B = j[order], G_B[:, order]

    H_B = sb_inv_half @ G_B
    xi = B @ H_B / np.sqrt(N)
    idx = np.argmax(np.abs(xi), axis=0)
    flip = np.sign(xi[idx, np.arange(r)])
    flip[flip == 0] = 1.0
    G_B = G_B * flip
    H_B = H_B * flip

    if tie:
        H_F = np.linalg.inv(H_B).T / np.sqrt(j)
    else:
        _, G_F = _sorted_eigh(sf_half @ S_B @ sf_half)
        H_F = sf_inv_half @ G_F
        d = np.sign(np.einsum("ij,ij->j", H_F, H_B))
        d[d == 0] = 1.0
        H_F = H_F * d
    return CanonicalRotation(H_B, H_F, j, S_B, S_f, tie)


# --------------------------------------------------------------------------- I/O


def fmt_float(x) -> str:
    """Shortest round-trip representation; NaN becomes an empty field."""
    x = float(x)
    if np.isnan(x):
        return ""
    return repr(x)


def write_matrix_csv(path, A) -> None:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        for row in A:
            fh.write(",".join(fmt_float(v) for v in row))
            fh.write("\n")


def read_matrix_csv(path, header: bool = False) -> np.ndarray:
    rows = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if header and lines:
        lines = lines[1:]
    for lineno, line in enumerate(lines, start=2 if header else 1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise InputError(f"{path}: no data rows")
    if len({len(r) for r in rows}) != 1:
        raise InputError(f"{path}: rows have differing column counts")
    return np.array(rows, dtype=np.float64)


def read_panel_csv(path, header: bool = False) -> Panel:
    """Read a panel CSV (rows = units, columns = periods)."""
    return Panel(read_matrix_csv(path, header=header))


def write_panel_csv(path, panel: Panel) -> None:
    write_matrix_csv(path, panel.data)


_HEADER = struct.Struct("<QQ")


def write_panel_binary(path, panel: Panel) -> None:
    """Little-endian ``u64 N, u64 T`` followed by ``N*T`` float64 in column-major order."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(panel.n_rows, panel.n_cols))
        fh.write(np.asarray(panel.data, dtype="<f8").tobytes(order="F"))


def read_panel_binary(path) -> Panel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InputError(f"{path}: truncated header")
    n, t = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    if len(body) != 8 * n * t:
        raise InputError(f"{path}: expected {8 * n * t} payload bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f8").reshape((n, t), order="F")
    return Panel(data.astype(np.float64))
