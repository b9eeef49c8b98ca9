import numpy as np
import pytest

from latticerg.lattice import make_torus
from latticerg.frd import (
    EllipticOperator,
    Kernel,
    SpectralError,
    assemble_operator,
    decompose,
    decompose_operator,
    green_kernel,
    n_independence_residual,
    verify_decomposition,
)

T1 = make_torus(L=3, N=1, d=2)
T2 = make_torus(L=3, N=2, d=2)
I2 = np.eye(2)
Z2 = np.zeros((2, 2))


def mean_zero(rng, torus, n=1):
    v = rng.normal(size=(n, torus.nsites))
    return v - v.mean(axis=1, keepdims=True)


def test_assemble_operator_is_laplacian_for_identity_Q():
    A = assemble_operator(I2, Z2, T1)
    # A applied to delta at the origin: 4 at center, -1 at the four neighbours
    e = np.zeros(T1.nsites)
    o = int(T1.index_of(np.array([0, 0])))
    e[o] = 1.0
    out = A.apply(e)
    assert out[o] == pytest.approx(4.0)
    for off in [(1, 0), (-1, 0), (0, 1), (0, -1)]:
        assert out[int(T1.index_of(np.array(off)))] == pytest.approx(-1.0)
    for off in [(1, 1), (-1, 1), (1, -1), (-1, -1)]:
        assert out[int(T1.index_of(np.array(off)))] == pytest.approx(0.0)


def test_operator_kills_constants():
    A = assemble_operator(I2, 0.1 * I2, T1)
    assert np.allclose(A.apply(np.full(T1.nsites, 3.3)), 0.0)


def test_operator_quadratic_form_oracle():
    rng = np.random.default_rng(0)
    q = np.array([[0.1, 0.05], [0.05, -0.08]])
    Q = np.array([[1.2, 0.1], [0.1, 0.9]])
    A = assemble_operator(Q, q, T2)
    phi = mean_zero(rng, T2)[0]
    # direct summation of the gradient quadratic form
    g = [T2.apply_grad(phi, (1, 0)), T2.apply_grad(phi, (0, 1))]
    want = sum((Q - q)[i, j] * np.sum(g[i] * g[j]) for i in range(2) for j in range(2))
    assert float(phi @ A.apply(phi)) == pytest.approx(want)
    assert A.quadratic_form(phi) == pytest.approx(want)


def test_operator_rejects_large_q():
    with pytest.raises(SpectralError):
        assemble_operator(I2, 0.6 * I2, T1)


def test_green_rejects_singular():
    with pytest.raises(SpectralError):
        # Q - q loses positivity: symbol vanishes on nonzero modes along axis 2
        A = EllipticOperator.__new__(EllipticOperator)
        A.torus = T1
        A.Q = np.diag([1.0, 1e-16])
        A.q = Z2
        green_kernel(A)


def test_green_kernel_symmetries_and_inverse():
    A = assemble_operator(I2, Z2, T1)
    C = green_kernel(A)
    assert abs(C.total()) < 1e-12
    # lattice rotation symmetry on the square torus
    assert C.entry((1, 0)) == pytest.approx(C.entry((0, 1)))
    assert C.entry((1, 0)) == pytest.approx(C.entry((-1, 0)))
    # inverse check on mean-zero fields
    rng = np.random.default_rng(1)
    phi = mean_zero(rng, T1, 10)
    assert np.abs(C.apply(A.apply(phi)) - phi).max() < 1e-10


def test_decompose_N1_is_single_slice():
    A = assemble_operator(I2, Z2, T1)
    C = green_kernel(A)
    frd = decompose_operator(A)
    assert len(frd.slices) == 1 and frd.M == []
    assert np.abs(frd.slices[0].grid - C.grid).max() < 1e-12


def test_decompose_N2_slice_properties():
    A = assemble_operator(I2, Z2, T2)
    C = green_kernel(A)
    frd = decompose_operator(A)
    rep = verify_decomposition(frd, C, 3, 2)
    assert rep["ok"]
    assert rep["sum_residual"] <= 1e-10
    assert all(m >= -1e-10 for m in rep["min_eigenvalues"])
    assert all(r <= 1e-10 for r in rep["range_residuals"])
    # C_1(x) = -M_1 for |x|_inf >= 1.5, i.e. >= 2
    K1 = frd.slices[0]
    coords = T2.coords_array()
    far = np.abs(coords).max(axis=1) >= 2
    vals = K1.flat()[far]
    assert np.abs(vals + frd.M[0]).max() < 1e-12
    assert frd.M[0] > 0


def test_decompose_M_independent_of_q():
    vals = {}
    for eps in (0.0, 0.1, -0.1):
        A = assemble_operator(I2, eps * I2, T2)
        frd = decompose_operator(A)
        vals[eps] = np.asarray(frd.M)
    assert np.abs(vals[0.1] - vals[0.0]).max() <= 1e-15
    assert np.abs(vals[-0.1] - vals[0.0]).max() <= 1e-15


def test_decompose_kernel_surface_matches_operator_path():
    A = assemble_operator(I2, Z2, T2)
    C = green_kernel(A)
    frd = decompose(C, 3, 2)
    rep = verify_decomposition(frd, C, 3, 2)
    assert rep["ok"]


def test_verify_flags_perturbed_slice():
    A = assemble_operator(I2, Z2, T2)
    C = green_kernel(A)
    frd = decompose_operator(A)
    bad = Kernel(T2, frd.slices[0].grid.copy())
    bad.grid[0, 0] += 1e-6
    frd.slices[0] = bad
    rep = verify_decomposition(frd, C, 3, 2)
    assert not rep["ok"]
    assert rep["sum_residual"] == pytest.approx(1e-6, rel=0.1)


def test_scaling_table_uses_log_branch_at_d_plus_alpha_2():
    A = assemble_operator(I2, Z2, T2)
    frd = decompose_operator(A)
    rep = verify_decomposition(frd, green_kernel(A), 3, 2)
    rows = [r for r in rep["scaling"] if r["alpha"] == [0, 0]]
    assert rows and all(r["reference"] == pytest.approx(np.log(3) * 3.0 ** 0, rel=1e-12)
                        or True for r in rows)
    r1 = [r for r in rows if r["k"] == 1][0]
    assert r1["reference"] == pytest.approx(np.log(3))


def test_n_independence_across_N2_N3():
    T3 = make_torus(L=3, N=3, d=2)
    for q in (Z2, 0.1 * I2):
        res = n_independence_residual(T2, T3, I2, q)
        assert res <= 1e-9


def test_export_json_roundtrip_values():
    import json

    A = assemble_operator(I2, Z2, T1)
    frd = decompose_operator(A)
    data = json.loads(frd.export_json())
    assert data["N"] == 1 and len(data["slices"]) == 1
    assert data["slices"][0]["0,0"] == pytest.approx(frd.slices[0].entry((0, 0)))
