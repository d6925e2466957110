import numpy as np
import pytest

from voxcrf.kernels import BRUTEFORCE_MAX_POINTS, PermutohedralLattice, bruteforce_filter


def dense_kernel(f):
    d2 = ((f[:, None, :] - f[None, :, :]) ** 2).sum(-1)
    k = np.exp(-0.5 * d2)
    np.fill_diagonal(k, 0.0)
    return k


@pytest.mark.parametrize("use_numba", [True, False])
def test_bruteforce_matches_dense_matrix(use_numba):
    rng = np.random.default_rng(0)
    f = rng.normal(size=(300, 4))
    v = rng.normal(size=(300, 3))
    np.testing.assert_allclose(bruteforce_filter(f, v, use_numba), dense_kernel(f) @ v, atol=1e-12)


def test_bruteforce_cap():
    assert BRUTEFORCE_MAX_POINTS >= 2000


@pytest.mark.parametrize("d", [2, 3, 6])
def test_lattice_is_close_to_exact(d):
    rng = np.random.default_rng(d)
    f = rng.random((1500, d)) * 4
    v = rng.random((1500, 2))
    exact = dense_kernel(f) @ v + v
    approx = PermutohedralLattice(f).filter(v)
    assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) < 0.1


def test_numba_and_numpy_lattices_agree():
    rng = np.random.default_rng(1)
    f = rng.random((800, 5)) * 3
    v = rng.normal(size=(800, 3))
    a = PermutohedralLattice(f, use_numba=True)
    b = PermutohedralLattice(f, use_numba=False)
    assert a.size == b.size
    assert a.gain == pytest.approx(b.gain, rel=1e-12)
    np.testing.assert_allclose(a.filter(v), b.filter(v), atol=1e-10)
    np.testing.assert_allclose(a.filter(v, True), b.filter(v, True), atol=1e-10)


@pytest.mark.parametrize("use_numba", [True, False])
def test_transpose_is_the_adjoint(use_numba):
    rng = np.random.default_rng(2)
    f = rng.random((400, 3)) * 5
    lat = PermutohedralLattice(f, use_numba=use_numba)
    x, y = rng.normal(size=(400, 2)), rng.normal(size=(400, 2))
    assert abs((lat.filter(x) * y).sum() - (x * lat.filter(y, True)).sum()) < 1e-9


def test_filter_is_linear_and_checks_rows():
    rng = np.random.default_rng(3)
    lat = PermutohedralLattice(rng.random((100, 3)))
    a, b = rng.normal(size=(100, 1)), rng.normal(size=(100, 1))
    np.testing.assert_allclose(lat.filter(2 * a + b), 2 * lat.filter(a) + lat.filter(b), atol=1e-12)
    with pytest.raises(ValueError):
        lat.filter(np.zeros((99, 1)))
    with pytest.raises(ValueError):
        PermutohedralLattice(np.zeros((0, 3)))


@pytest.mark.parametrize("use_numba", [True, False])
@pytest.mark.parametrize("d", [3, 6])
def test_exclude_self_removes_the_exact_diagonal(use_numba, d):
    # oracle: diagonal of the full operator read off by filtering impulses
    rng = np.random.default_rng(10 + d)
    f = rng.normal(size=(50, d)) * 0.7
    full = PermutohedralLattice(f, use_numba=use_numba, n_probes=0)
    lat = PermutohedralLattice(f, use_numba=use_numba, n_probes=0, exclude_self=True)
    eye = np.eye(50)
    np.testing.assert_allclose(lat.diagonal, np.diag(full.filter(eye)), atol=1e-14)
    k = lat.filter(eye)
    assert np.abs(np.diag(k)).max() < 1e-14
    np.testing.assert_allclose(k, full.filter(eye) - np.diag(np.diag(full.filter(eye))), atol=1e-14)


def test_exclude_self_numba_and_numpy_agree():
    rng = np.random.default_rng(4)
    f = rng.random((600, 5)) * 3
    v = rng.normal(size=(600, 2))
    a = PermutohedralLattice(f, use_numba=True, exclude_self=True)
    b = PermutohedralLattice(f, use_numba=False, exclude_self=True)
    np.testing.assert_allclose(a.diagonal, b.diagonal, atol=1e-14)
    assert a.gain == pytest.approx(b.gain, rel=1e-12)
    np.testing.assert_allclose(a.filter(v, True), b.filter(v, True), atol=1e-10)


def test_exclude_self_is_close_to_off_diagonal_sum():
    rng = np.random.default_rng(5)
    f = rng.random((1500, 3)) * 4
    v = rng.random((1500, 2))
    exact = dense_kernel(f) @ v
    approx = PermutohedralLattice(f, exclude_self=True).filter(v)
    assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) < 0.1
