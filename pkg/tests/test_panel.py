import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fopca.errors import DegeneracyWarning, DimensionError, InputError, RankError
from fopca.panel import (
    FactorStructure,
    Panel,
    canonical_normalization,
    demean_columns,
    numerical_rank,
    pinv,
    read_panel_binary,
    read_panel_csv,
    singular_values,
    svd_top,
    write_panel_binary,
    write_panel_csv,
)


def rs(seed=0):
    return np.random.default_rng(seed)


def test_panel_validates():
    with pytest.raises(InputError):
        Panel(np.array([[1.0, np.nan]]))
    with pytest.raises(InputError):
        Panel(np.ones(3))
    p = Panel(np.ones((4, 8)))
    assert (p.n_rows, p.n_cols, p.phi) == (4, 8, 0.5)
    with pytest.raises(ValueError):
        p.data[0, 0] = 2.0


def test_factor_structure_reconstructs_panel():
    r = rs(1)
    B, F, U = r.standard_normal((6, 2)), r.standard_normal((9, 2)), r.standard_normal((6, 9))
    fs = FactorStructure(B, F, U)
    assert np.array_equal(fs.panel().data, B @ F.T + U)
    empty = FactorStructure(np.zeros((6, 0)), np.zeros((9, 0)), U)
    assert empty.rank == 0 and np.array_equal(empty.panel().data, U)
    with pytest.raises(DimensionError):
        FactorStructure(B, r.standard_normal((9, 3)))


def test_svd_top_diagonal():
    t = svd_top(np.diag([3.0, 2.0, 1.0]), 2)
    assert np.allclose(t.singular_values, [3, 2])


def test_svd_top_rank_one():
    r = rs(2)
    u = r.standard_normal(7)
    v = r.standard_normal(5)
    u /= np.linalg.norm(u)
    v /= np.linalg.norm(v)
    t = svd_top(5 * np.outer(u, v), 1)
    assert np.allclose(t.singular_values, [5])
    assert np.isclose(abs(t.left[:, 0] @ u), 1.0)


def test_svd_top_matches_independent_oracle():
    # oracle: eigen-decomposition of X X' (a different algorithm from the gesdd SVD)
    X = rs(3).standard_normal((8, 12))
    t = svd_top(X, 3)
    w, Q = np.linalg.eigh(X @ X.T)
    order = np.argsort(-w)[:3]
    assert np.allclose(t.singular_values, np.sqrt(w[order]), atol=1e-10)
    for k, j in enumerate(order):
        q = Q[:, j] * np.sign(Q[np.argmax(np.abs(Q[:, j])), j])
        assert np.allclose(t.left[:, k], q, atol=1e-10)
        assert np.allclose(t.right[:, k], X.T @ q / t.singular_values[k], atol=1e-10)


def test_svd_top_errors_and_determinism():
    X = rs(4).standard_normal((5, 6))
    for k in (0, 6, 2.0):
        with pytest.raises(DimensionError):
            svd_top(X, k)
    with pytest.raises(InputError):
        svd_top(np.array([[np.inf, 1.0], [0.0, 1.0]]), 1)
    a, b = svd_top(X, 3), svd_top(X, 3)
    assert np.array_equal(a.left, b.left) and np.array_equal(a.singular_values, b.singular_values)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 9), st.integers(2, 9)),
              elements=st.floats(-10, 10, allow_nan=False)),
       st.integers(1, 9))
def test_svd_top_invariants(X, k):
    k = min(k, min(X.shape))
    t = svd_top(X, k)
    assert np.allclose(t.left.T @ t.left, np.eye(k), atol=1e-10)
    assert np.allclose(t.right.T @ t.right, np.eye(k), atol=1e-10)
    assert np.all(np.diff(t.singular_values) <= 1e-12)
    idx = np.argmax(np.abs(t.left), axis=0)
    assert np.all(t.left[idx, np.arange(k)] >= 0)
    # truncation error equals the tail of the spectrum
    s = singular_values(X)
    err = np.linalg.norm(X - t.reconstruct())
    assert np.isclose(err, np.sqrt(np.sum(s[k:] ** 2)), atol=1e-8 * max(1.0, s[0]))


def test_demean_columns():
    assert np.allclose(demean_columns(np.array([1.0, 2.0, 3.0])), [-1, 0, 1])
    c = np.array([[-1.0], [0.0], [1.0]])
    assert np.array_equal(demean_columns(c), c)
    A = rs(5).standard_normal((10, 2))
    naive = np.empty_like(A)
    for j in range(2):
        m = sum(A[i, j] for i in range(10)) / 10
        for i in range(10):
            naive[i, j] = A[i, j] - m
    assert np.allclose(demean_columns(A), naive, atol=1e-14)
    with pytest.raises(InputError):
        demean_columns(np.ones((1, 3)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 4)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_demean_columns_sum_zero(A):
    out = demean_columns(A)
    T = A.shape[0]
    assert np.all(np.abs(out.sum(axis=0)) <= 1e-12 * T * max(np.abs(A).max(), 1.0) * 10)


def _check_canonical(B, F, rot):
    N, T = B.shape[0], F.shape[0]
    r = B.shape[1]
    t = svd_top(B @ F.T, r)
    assert np.allclose(B @ rot.h_b / np.sqrt(N), t.left, atol=1e-8)
    lhs = np.linalg.inv(rot.h_f.T @ rot.h_b)
    assert np.allclose(lhs, np.diag(t.singular_values) / np.sqrt(N * T), atol=1e-8)


def test_canonical_normalization_diag_example():
    N, T = 40, 50
    B = np.zeros((N, 2))
    B[: N // 2, 0] = 2 * np.sqrt(2)   # S_B = diag(4, 1)
    B[N // 2:, 1] = np.sqrt(2)
    F = np.zeros((T, 2))
    F[:25, 0] = np.sqrt(2)
    F[25:, 1] = np.sqrt(2)
    assert np.allclose(B.T @ B / N, np.diag([4.0, 1.0]))
    assert np.allclose(F.T @ F / T, np.eye(2))
    rot = canonical_normalization(B, F)
    assert np.allclose(rot.j, [4, 1])
    _check_canonical(B, F, rot)
    assert np.allclose(np.linalg.inv(rot.h_f.T @ rot.h_b), np.diag(np.sqrt(rot.j)), atol=1e-10)


def test_canonical_normalization_scalar():
    N, T = 16, 9
    B = np.full((N, 1), 2.0)
    F = np.ones((T, 1))
    rot = canonical_normalization(B, F)
    assert np.allclose(rot.h_b, [[0.5]]) and np.allclose(np.abs(rot.h_f), [[1.0]])
    assert np.allclose(rot.j, [4.0])


def test_canonical_normalization_random():
    r = rs(6)
    B, F = r.standard_normal((30, 3)), r.standard_normal((45, 3))
    rot = canonical_normalization(B, F)
    assert np.all(np.diff(rot.j) < 0)
    _check_canonical(B, F, rot)


def test_canonical_normalization_tie_warns_and_still_satisfies_identity():
    N = 20
    B = np.zeros((N, 2))
    B[:10, 0] = np.sqrt(2)
    B[10:, 1] = np.sqrt(2)
    F = B.copy()
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        rot = canonical_normalization(B, F)
    assert any(issubclass(x.category, DegeneracyWarning) for x in w)
    assert rot.tie
    assert np.allclose(np.linalg.inv(rot.h_f.T @ rot.h_b), np.diag(np.sqrt(rot.j)), atol=1e-10)
    with pytest.warns(DegeneracyWarning):
        again = canonical_normalization(B, F)
    assert np.array_equal(rot.h_b, again.h_b)


def test_canonical_normalization_rank_error():
    B = np.ones((10, 2))
    F = rs(7).standard_normal((12, 2))
    with pytest.raises(RankError):
        canonical_normalization(B, F)


def test_singular_value_product_inequality():
    r = rs(8)
    for _ in range(100):
        n, K, p = r.integers(3, 8), r.integers(1, 3), r.integers(3, 8)
        A, B = r.standard_normal((n, K)), r.standard_normal((K, p))
        sa, sb, sab = singular_values(A), singular_values(B), singular_values(A @ B)
        assert sab[K - 1] >= sa[K - 1] * sb[K - 1] - 1e-10
        assert sab[0] <= sa[0] * sb[0] + 1e-10


def test_weyl_primitive():
    r = rs(9)
    for _ in range(50):
        rank = int(r.integers(0, 3))
        M = r.standard_normal((12, rank)) @ r.standard_normal((rank, 15)) * 3
        U = r.standard_normal((12, 15))
        sx, su, sm = singular_values(M + U), singular_values(U), singular_values(M)
        for k in range(12 - rank):
            assert sx[rank + k] <= su[k] + sm[rank] + 1e-9


def test_pinv_and_rank():
    A = rs(10).standard_normal((5, 3))
    assert np.allclose(pinv(A), np.linalg.pinv(A), atol=1e-12)
    assert numerical_rank([3.0, 1.0, 1e-14]) == 2
    assert numerical_rank([]) == 0


def test_csv_and_binary_round_trip(tmp_path):
    X = rs(11).standard_normal((4, 7)) * 1e3
    p = Panel(X)
    write_panel_csv(tmp_path / "x.csv", p)
    assert np.array_equal(read_panel_csv(tmp_path / "x.csv").data, X)
    write_panel_binary(tmp_path / "x.bin", p)
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:16] == (4).to_bytes(8, "little") + (7).to_bytes(8, "little")
    assert np.frombuffer(raw[16:24], "<f8")[0] == X[0, 0]
    assert np.frombuffer(raw[24:32], "<f8")[0] == X[1, 0]  # column-major
    assert np.array_equal(read_panel_binary(tmp_path / "x.bin").data, X)


def test_csv_header_and_errors(tmp_path):
    f = tmp_path / "h.csv"
    f.write_text("a,b\n1,2\n3,4\n")
    assert np.array_equal(read_panel_csv(f, header=True).data, [[1, 2], [3, 4]])
    with pytest.raises(InputError):
        read_panel_csv(f)
    g = tmp_path / "ragged.csv"
    g.write_text("1,2\n3\n")
    with pytest.raises(InputError):
        read_panel_csv(g)
    h = tmp_path / "short.bin"
    h.write_bytes(b"\x01")
    with pytest.raises(InputError):
        read_panel_binary(h)
