import numpy as np
import pytest

from latticerg.lattice import make_torus
from latticerg.oracle import (
    OracleError,
    brute_partition,
    closed_form_gaussian_laplace,
    continuum_prediction,
    free_energy_scan,
    gaussian_ratio,
    lattice_source,
    log_gaussian_partition,
    scaling_limit_check,
)
from latticerg.potentials import PotentialSpec, Quadratic, build_potential, mayer_build

T1 = make_torus(L=3, N=1, d=2)
T2 = make_torus(L=3, N=2, d=2)
I2 = np.eye(2)

SPEC_Q = PotentialSpec(Quadratic(I2), omega0=0.9, omega=0.05, family="quadratic")
SPEC_B = PotentialSpec(build_potential("nonconvex_bump", 2), omega0=0.85,
                       omega=0.05, family="nonconvex_bump")


def test_brute_zero_K_no_source_is_exactly_one():
    est = brute_partition(None, I2, None, T1, n_samples=1000, seed=0)
    assert est.value == 1.0 and est.stderr == 0.0


def test_brute_zero_K_with_source_matches_gaussian():
    rng = np.random.default_rng(0)
    f = rng.normal(size=T1.nsites)
    f -= f.mean()
    f *= 0.4
    est = brute_partition(None, I2, f, T1, n_samples=400_000, seed=1)
    want = closed_form_gaussian_laplace(I2, f, T1)
    assert abs(est.value - want) < 3.5 * est.stderr


def test_brute_rejects_huge_torus():
    big = make_torus(L=3, N=5, d=2)
    with pytest.raises(OracleError):
        brute_partition(None, I2, None, big, n_samples=10)


def test_gaussian_ratio_identity_and_monotone():
    assert gaussian_ratio(np.zeros((2, 2)), T1) == pytest.approx(1.0)
    vals = [gaussian_ratio(t * I2, T1) for t in (-0.2, -0.1, 0.0, 0.1, 0.2)]
    assert all(b > a for a, b in zip(vals, vals[1:]))  # softer measure, larger Z


def test_gaussian_ratio_vs_reweighting_mc():
    q = np.array([[0.12, 0.03], [0.03, -0.05]])

    def kq(z):
        # per-site reweighting factor e^{z.qz/2} - 1
        return np.expm1(0.5 * np.einsum("...i,ij,...j->...", z, q, z))

    est = brute_partition(kq, I2, None, T1, n_samples=600_000, seed=2)
    want = gaussian_ratio(q, T1)
    assert abs(est.value - want) < 3.5 * est.stderr


def test_log_gaussian_partition_beta_scaling():
    a = log_gaussian_partition(I2, T1, beta=1.0)
    b = log_gaussian_partition(I2, T1, beta=50.0)
    n = T1.nsites - 1
    assert a - b == pytest.approx(0.5 * n * np.log(50.0))


def test_free_energy_quadratic_second_differences_constant():
    ts = np.linspace(-0.2, 0.2, 5)
    rows = free_energy_scan(SPEC_Q, beta=50.0, torus=T1, tilts=ts,
                            n_samples=20_000, seed=3)
    # K = 0 exactly: W(F) = |F|^2/2 + const, second difference = 1
    d2 = [r["second_difference"] for r in rows if "second_difference" in r]
    assert np.allclose(d2, 1.0, atol=1e-3)


def test_free_energy_symmetry_even_potential():
    ts = [-0.1, 0.0, 0.1]
    rows = free_energy_scan(SPEC_B, beta=50.0, torus=T1, tilts=ts,
                            n_samples=200_000, seed=4)
    wminus, wplus = rows[0], rows[2]
    tol = 3 * np.hypot(wminus["stderr"], wplus["stderr"])
    assert abs(wminus["W"] - wplus["W"]) < tol


def test_free_energy_convexity_bump_small():
    ts = np.linspace(-0.1, 0.1, 5)
    rows = free_energy_scan(SPEC_B, beta=50.0, torus=T1, tilts=ts,
                            n_samples=150_000, seed=5)
    for r in rows:
        if "second_difference" in r:
            assert r["second_difference"] > 3 * r["second_difference_stderr"]


def test_nongaussian_log_correction_beta_scaling():
    # ln Zcal scales like 1/beta between beta=50 and beta=200 (within 20%).
    # At F = 0 the even potential has no beta-independent Mayer component;
    # a deformation would add one (the delta-part of the smallness bound).
    out = {}
    for beta in (50.0, 200.0):
        K = mayer_build(SPEC_B, F=(0.0, 0.0), beta=beta)
        est = brute_partition(K.eval, I2, None, T1, n_samples=400_000, seed=6)
        out[beta] = np.log(est.value)
    ratio = out[50.0] / out[200.0]
    assert 4.0 * 0.8 <= ratio <= 4.0 * 1.2


def test_lattice_source_mean_zero_and_mode():
    modes = {(1, 0): 0.3}
    f = lattice_source(modes, T2, scaling_power=2.0)
    assert abs(f.sum()) < 1e-9
    # pure cosine at the right wavenumber
    coords = T2.coords_array()
    want = 2 * 0.3 * np.cos(2 * np.pi * coords[:, 0] / T2.side) * T2.side ** -2.0
    assert np.allclose(f, want - want.mean(), atol=1e-12)


def test_continuum_prediction_single_mode_closed_form():
    modes = {(1, 0): 0.3}
    beta = 50.0
    pred = continuum_prediction(modes, I2, np.zeros((2, 2)), beta)
    qf = (2 * np.pi) ** 2
    assert pred == pytest.approx(np.exp(2 * 0.3 ** 2 / qf / (2 * beta)))
    # zero source -> prediction 1
    assert continuum_prediction({}, I2, np.zeros((2, 2)), beta) == 1.0


def test_scaling_limit_gaussian_decreasing():
    rows = scaling_limit_check(SPEC_Q, beta=50.0, F=(0.0, 0.0),
                               g_modes={(1, 0): 0.5}, n_list=[1, 2, 3],
                               torus_builder=lambda n: make_torus(L=3, N=n, d=2),
                               n_samples=20_000, seed=7)
    disc = [r["discrepancy"] for r in rows]
    assert disc[0] > disc[1] > disc[2]
    assert disc[2] <= 0.05
    # MC column agrees with the closed form at 4 sigma
    for r in rows:
        if r["mc_stderr"] > 0:
            assert abs(r["mc_value"] - r["laplace"]) < 4 * r["mc_stderr"]
