import numpy as np
import pytest

from eigenuq.field_model import (
    EPS_STREAM,
    MU_STREAM,
    KernelSpec,
    KLExpansion,
    NotSPSDError,
    RankExhaustedError,
    build_kl,
    field_from_z,
    kl_from_json,
    kl_to_json,
    nodal_gram_entry,
    pivoted_cholesky,
    sample_field,
    stream_for,
)
from eigenuq.mesh_fem import assemble_mass, build_unit_square_mesh


def dense_entry(C):
    C = np.asarray(C, dtype=float)
    return lambda i, j: C[i, j]


def test_kernel_values():
    kern = KernelSpec()
    assert kern.scale == 20.0
    assert kern.evaluate(0.0) == pytest.approx(1.0 / np.sqrt(20.0 * np.pi))
    r = np.array([0.5, 1.0])
    expect = np.exp(-r**2 / 20.0) / np.sqrt(20.0 * np.pi)
    assert kern.evaluate(r) == pytest.approx(expect, rel=1e-15)
    with pytest.raises(ValueError):
        KernelSpec(scale=-1.0)


def test_pivoted_cholesky_diagonal_exact():
    L, err = pivoted_cholesky(dense_entry(np.diag([3.0, 2.0, 1.0])), 3, 0.0)
    assert L.shape == (3, 3)
    # greedy pivots follow the diagonal ordering
    expect = np.diag(np.sqrt([3.0, 2.0, 1.0]))
    assert L == pytest.approx(expect, abs=1e-15)
    assert err == 0.0


def test_pivoted_cholesky_rank_one():
    rng = np.random.default_rng(5)
    v = rng.standard_normal(40)
    L, err = pivoted_cholesky(dense_entry(np.outer(v, v)), 40, 0.0)
    assert L.shape == (40, 1)
    assert np.outer(v, v) == pytest.approx(L @ L.T, abs=1e-12)
    assert err <= 128 * np.finfo(float).eps * (v @ v)


def test_pivoted_cholesky_dense_verification():
    # kernel Gram on the full N=24 node set (n=576), verified against the
    # densely computed residual trace
    mesh = build_unit_square_mesh(24)
    kern = KernelSpec()
    entry = nodal_gram_entry(kern, mesh.nodes)
    n = mesh.n_nodes
    L, err = pivoted_cholesky(entry, n, 1e-5)
    C = entry(np.arange(n)[:, None], np.arange(n)[None, :])
    dense_residual = np.trace(C - L @ L.T)
    assert dense_residual <= 1e-5 * 1.01
    assert err == pytest.approx(dense_residual, abs=1e-10)
    # achieved rank is recorded, far below full
    assert 10 <= L.shape[1] < n


def test_pivoted_cholesky_monotone_residual():
    mesh = build_unit_square_mesh(8)
    entry = nodal_gram_entry(KernelSpec(), mesh.nodes)
    n = mesh.n_nodes
    errs = []
    for cap in range(1, 12):
        with pytest.raises(RankExhaustedError) as excinfo:
            pivoted_cholesky(entry, n, 0.0, max_rank=cap)
        errs.append(excinfo.value.achieved_error)
    assert all(a >= b - 1e-14 for a, b in zip(errs, errs[1:]))


def test_pivoted_cholesky_not_spsd():
    C = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
    with pytest.raises(NotSPSDError):
        pivoted_cholesky(dense_entry(C), 2, 1e-12)


def test_pivoted_cholesky_single_support():
    # synthetic gram with one active node
    C = np.zeros((6, 6))
    C[4, 4] = 2.5
    L, err = pivoted_cholesky(dense_entry(C), 6, 0.0)
    assert L.shape == (6, 1)
    assert L[:, 0] == pytest.approx(np.sqrt(2.5) * np.eye(6)[:, 4])
    assert err == 0.0


def test_build_kl_trace_oracle():
    # sum of sigmas matches the trace of the Galerkin kernel operator
    # tr(K M) computed densely, within the pivoted-Cholesky tolerance
    mesh = build_unit_square_mesh(8)
    kern = KernelSpec()
    mass = assemble_mass(mesh, np.ones(mesh.n_nodes), constrain=False)
    tol = 1e-7
    kl = build_kl(mesh, kern, mass, tol)
    n = mesh.n_nodes
    C = nodal_gram_entry(kern, mesh.nodes)(
        np.arange(n)[:, None], np.arange(n)[None, :])
    trace_full = np.trace(C @ mass.toarray())
    assert abs(kl.sigmas.sum() - trace_full) <= 2.0 * tol


def test_build_kl_modes_m_orthogonal():
    mesh = build_unit_square_mesh(10)
    mass = assemble_mass(mesh, np.ones(mesh.n_nodes), constrain=False)
    tol = 1e-6
    kl = build_kl(mesh, KernelSpec(), mass, tol)
    assert np.all(kl.sigmas > 0)
    assert np.all(np.diff(kl.sigmas) <= 0)
    phi = kl.modes / np.sqrt(kl.sigmas)[None, :]
    gram = phi.T @ (mass @ phi)
    assert np.abs(gram - np.eye(kl.k)).max() <= 10 * tol
    assert np.abs(np.diag(gram) - 1.0).max() < 1e-8


def test_build_kl_validates_mass():
    mesh = build_unit_square_mesh(6)
    mass_free = assemble_mass(mesh, np.ones(mesh.n_nodes), constrain=True)
    with pytest.raises(ValueError):
        build_kl(mesh, KernelSpec(), mass_free, 1e-5)


def test_sample_field_zero_amplitude_and_antithetic():
    mesh = build_unit_square_mesh(8)
    mass = assemble_mass(mesh, np.ones(mesh.n_nodes), constrain=False)
    kl = build_kl(mesh, KernelSpec(), mass, 1e-6, mean=1.0, amplitude=0.0)
    field, z = sample_field(kl, stream_for(7, 0))
    assert np.all(field.values == 1.0)

    kl2 = KLExpansion(kl.mean, 0.3, kl.modes, kl.sigmas)
    f_plus = field_from_z(kl2, z)
    f_minus = field_from_z(kl2, -z)
    assert f_plus.values + f_minus.values == pytest.approx(
        2.0 * kl2.mean * np.ones(kl2.n_nodes), abs=1e-14)


def test_sample_field_variance_oracle():
    # 1e5 draws: nodal variance approaches amplitude^2/12 * sum_i modes_i^2
    mesh = build_unit_square_mesh(8)
    mass = assemble_mass(mesh, np.ones(mesh.n_nodes), constrain=False)
    amp = 0.5
    kl = build_kl(mesh, KernelSpec(), mass, 1e-6, mean=2.0, amplitude=amp)
    node = int(np.argmax((kl.modes**2).sum(axis=1)))
    rng = np.random.default_rng(42)
    draws = 100_000
    Z = rng.random((draws, kl.k)) - 0.5
    vals = kl.mean + amp * (Z @ kl.modes[node])
    var_mc = vals.var()
    var_pred = amp**2 / 12.0 * (kl.modes[node] ** 2).sum()
    assert var_mc == pytest.approx(var_pred, rel=0.05)


def test_sample_field_covariance_oracle():
    # empirical Cov[field(x*), field(y*)] ~ (amp^2/12) sum_i L_i(x*) L_i(y*)
    mesh = build_unit_square_mesh(8)
    mass = assemble_mass(mesh, np.ones(mesh.n_nodes), constrain=False)
    amp = 1.0
    kl = build_kl(mesh, KernelSpec(), mass, 1e-6, mean=0.0, amplitude=amp)
    order = np.argsort(-(kl.modes**2).sum(axis=1))
    a, b = int(order[0]), int(order[3])
    rng = np.random.default_rng(9)
    draws = 100_000
    Z = rng.random((draws, kl.k)) - 0.5
    va = Z @ kl.modes[a]
    vb = Z @ kl.modes[b]
    cov_mc = np.mean(va * vb) - va.mean() * vb.mean()
    cov_pred = 1.0 / 12.0 * (kl.modes[a] * kl.modes[b]).sum()
    assert cov_mc == pytest.approx(cov_pred, rel=0.05)


def test_streams_reproducible_and_disjoint():
    z1 = stream_for(123, 17, MU_STREAM).random(5)
    z2 = stream_for(123, 17, MU_STREAM).random(5)
    assert np.array_equal(z1, z2)
    z3 = stream_for(123, 18, MU_STREAM).random(5)
    z4 = stream_for(123, 17, EPS_STREAM).random(5)
    z5 = stream_for(124, 17, MU_STREAM).random(5)
    for other in (z3, z4, z5):
        assert not np.array_equal(z1, other)


def test_sup_bound_is_as_bound():
    mesh = build_unit_square_mesh(8)
    mass = assemble_mass(mesh, np.ones(mesh.n_nodes), constrain=False)
    kl = build_kl(mesh, KernelSpec(), mass, 1e-6, mean=1.0, amplitude=0.4)
    bound = kl.sup_bound()
    rng = np.random.default_rng(2)
    for _ in range(200):
        z = rng.random(kl.k) - 0.5
        field = field_from_z(kl, z)
        assert np.abs(field.values - kl.mean).max() <= bound + 1e-12


def test_kl_json_roundtrip(tmp_path):
    mesh = build_unit_square_mesh(6)
    mass = assemble_mass(mesh, np.ones(mesh.n_nodes), constrain=False)
    kl = build_kl(mesh, KernelSpec(), mass, 1e-6, mean=1.0, amplitude=0.2)
    text = kl_to_json(kl)
    back = kl_from_json(text)
    assert back.k == kl.k
    assert back.mean == kl.mean and back.amplitude == kl.amplitude
    assert np.array_equal(back.modes, kl.modes)
    assert np.array_equal(back.sigmas, kl.sigmas)
    assert back.law == "uniform"

    path = tmp_path / "kl.json"
    kl_to_json(kl, path=str(path))
    back2 = kl_from_json(str(path))
    assert np.array_equal(back2.modes, kl.modes)


def test_klexpansion_validates_sigmas():
    with pytest.raises(ValueError):
        KLExpansion(1.0, 0.1, np.ones((3, 2)), [1.0, 2.0])
    with pytest.raises(ValueError):
        KLExpansion(1.0, 0.1, np.ones((3, 2)), [1.0, -0.5])
