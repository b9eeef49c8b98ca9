"""Brute-force references: direct partition-function integration, exact
Gaussian ratios, the free-energy grid, and the scaling-limit check.

Everything here integrates against the exact Gaussian measure mu_Q (sampled
spectrally) with no renormalisation machinery, so it can certify the flow.
"""

from dataclasses import dataclass
import itertools

import numpy as np

from . import rng as rngmod
from .frd import assemble_operator, green_kernel, operator_symbol
from .gaussians import GaussianLayer
from .lattice import gradient_coordinates
from .potentials import mayer_build


class OracleError(ValueError):
    pass


@dataclass
class OracleEstimate:
    value: float
    stderr: float
    method: str
    n_samples: int

    def as_dict(self):
        return {"value": self.value, "stderr": self.stderr,
                "method": self.method, "n_samples": self.n_samples}


def _mu_Q_layer(Q, torus):
    A = assemble_operator(np.asarray(Q, float), np.zeros_like(np.asarray(Q, float)),
                          torus)
    return GaussianLayer(green_kernel(A), tag="muQ")


def brute_partition(kfun, Q, f, torus, n_samples=1_000_000, seed=0,
                    antithetic=True, chunk=100_000, context=("brute",)):
    """Z_N(K, Q, f) = E_{mu_Q}[ e^{(f, phi)} prod_x (1 + K(D phi(x))) ].

    ``kfun`` is evaluated on nearest-neighbour gradient coordinates
    (..., nsites, d); None means K = 0.
    """
    if torus.nsites > 10_000:
        raise OracleError("torus too large for the brute-force oracle")
    f = None if f is None else np.asarray(f, float)
    layer = _mu_Q_layer(Q, torus)
    nn = torus.nearest_neighbour_indices()
    total = 0.0
    batch_means = []
    done = 0
    half = n_samples // 2 if antithetic else n_samples
    gen_count = 0
    while done < n_samples:
        m = min(chunk // (2 if antithetic else 1), half - done // (2 if antithetic else 1))
        if m <= 0:
            break
        phi = layer.sample(m, seed, "oracle", *context, gen_count)
        gen_count += 1
        if antithetic:
            phi = np.concatenate([phi, -phi])
        vals = np.ones(phi.shape[0])
        if kfun is not None:
            z = gradient_coordinates(torus, phi, nn)
            vals = (1.0 + kfun(z)).prod(axis=-1)
        if f is not None and np.any(f):
            vals = vals * np.exp(phi @ f)
        total += vals.sum()
        batch_means.append(vals.mean())
        done += phi.shape[0]
    value = total / done
    bm = np.asarray(batch_means)
    stderr = float(bm.std(ddof=1) / np.sqrt(len(bm))) if len(bm) > 1 else 0.0
    return OracleEstimate(value=float(value), stderr=stderr,
                          method="monte_carlo", n_samples=done)


def closed_form_gaussian_laplace(Q, f, torus, beta=1.0):
    """exp((f, C f)/2) with C = (beta A_Q)^{-1}: exact Gaussian transform."""
    A = assemble_operator(np.asarray(Q, float), np.zeros((torus.d, torus.d)), torus)
    C = green_kernel(A)
    f = np.asarray(f, float)
    return float(np.exp(0.5 * (f @ C.apply(f[None, :])[0]) / beta))


def gaussian_ratio(q, torus, Q=None):
    """Z^{(q)} / Z^{(0)} via log-determinants over nonzero Fourier modes."""
    d = torus.d
    Q = np.eye(d) if Q is None else np.asarray(Q, float)
    q = np.asarray(q, float)
    if np.linalg.norm(q, 2) > 0.5 + 1e-12:
        raise OracleError("need |q| <= 1/2")
    lam0 = operator_symbol(torus, Q).ravel()[1:]
    lamq = operator_symbol(torus, Q - q).ravel()[1:]
    if lamq.min() <= 0 or lam0.min() <= 0:
        raise OracleError("singular mode in the Gaussian ratio")
    return float(np.exp(0.5 * (np.log(lam0) - np.log(lamq)).sum()))


def log_gaussian_partition(Q, torus, beta):
    """ln of int exp(-beta/2 sum_x Q(D phi)) over the mean-zero subspace."""
    lam = operator_symbol(torus, np.asarray(Q, float)).ravel()[1:]
    if lam.min() <= 0:
        raise OracleError("quadratic form is singular on mean-zero fields")
    n = torus.nsites - 1
    return float(0.5 * n * np.log(2 * np.pi) - 0.5 * np.log(beta * lam).sum())


def free_energy_scan(spec, beta, torus, tilts, direction=None,
                     n_samples=1_000_000, seed=0):
    """W_{N,beta}(F) over a tilt grid, with second central differences.

    Uses the prefactor decomposition W = U(F_bar) - ln Z^{Q_U}/(beta L^{Nd})
    - ln Zcal / (beta L^{Nd}); common random numbers across grid points keep
    the differences clean.
    """
    d = torus.d
    u = np.zeros(d)
    u[0] = 1.0
    if direction is not None:
        u = np.asarray(direction, float)
    pot = spec.potential
    QU = spec.Q_U
    vol = beta * torus.nsites
    lnZQ = log_gaussian_partition(QU, torus, beta)
    rows = []
    for t in tilts:
        F = t * u
        K = mayer_build(spec, F, beta, validate=False)
        est = brute_partition(K.eval, QU, None, torus, n_samples=n_samples,
                              seed=seed, context=("fe",))  # CRN across t
        W = float(pot.eval(F)) - lnZQ / vol - np.log(est.value) / vol
        rows.append({"F": float(t), "W": W,
                     "stderr": est.stderr / max(est.value, 1e-12) / vol,
                     "zcal": est.value, "zcal_stderr": est.stderr})
    # second central differences
    for i in range(1, len(rows) - 1):
        h = rows[i + 1]["F"] - rows[i]["F"]
        d2 = (rows[i + 1]["W"] - 2 * rows[i]["W"] + rows[i - 1]["W"]) / h ** 2
        err = np.sqrt(rows[i + 1]["stderr"] ** 2 + 4 * rows[i]["stderr"] ** 2
                      + rows[i - 1]["stderr"] ** 2) / h ** 2
        rows[i]["second_difference"] = float(d2)
        rows[i]["second_difference_stderr"] = float(err)
    return rows


def lattice_source(g_modes, torus, scaling_power):
    """Real lattice field from torus Fourier modes of g, scaled by
    L^{-N * scaling_power} with argument x / L^N, then mean-zero shifted."""
    coords = torus.coords_array()
    theta = coords / torus.side  # in the unit torus
    f = np.zeros(torus.nsites)
    for n_vec, c in g_modes.items():
        # entry n stands for c e^{2 pi i n.theta} + conjugate
        phase = 2.0 * np.pi * (theta @ np.asarray(n_vec, float))
        f += 2.0 * (np.real(c) * np.cos(phase) - np.imag(c) * np.sin(phase))
    f *= torus.side ** (-scaling_power)
    return f - f.mean()  # the c_N shift


def continuum_prediction(g_modes, Q, q, beta):
    """exp((f, C f)_{L^2} / (2 beta)) for the continuum covariance."""
    M = np.asarray(Q, float) - np.asarray(q, float)
    total = 0.0
    for n_vec, c in g_modes.items():
        p = 2.0 * np.pi * np.asarray(n_vec, float)
        qf = p @ M @ p
        if qf <= 0:
            raise OracleError("continuum operator singular at a source mode")
        total += abs(c) ** 2 / qf
        total += abs(c) ** 2 / qf  # the conjugate mode -n
    return float(np.exp(total / (2.0 * beta)))


def scaling_limit_check(spec, beta, F, g_modes, n_list, torus_builder,
                        q=None, n_samples=200_000, seed=0):
    """Lattice Laplace transforms against the continuum prediction.

    The test function scales with exponent (d+2)/2 so that (f_N, phi) pairs a
    continuum test function with the rescaled field (see the ledger for the
    exponent bookkeeping); for the Gaussian potential the lattice value is
    also computed in closed form.
    """
    d = torus_builder(n_list[0]).d
    q = np.zeros((d, d)) if q is None else np.asarray(q, float)
    QU = spec.Q_U
    pred = continuum_prediction(g_modes, QU, q, beta)
    rows = []
    gaussian = spec.family == "quadratic" or spec.potential.psi_bound(1.0, 5) == 0.0
    for N in n_list:
        torus = torus_builder(N)
        fN = lattice_source(g_modes, torus, scaling_power=(d + 2) / 2.0)
        if gaussian:
            val = closed_form_gaussian_laplace(QU, fN, torus, beta=beta)
            err = 0.0
            # Monte-Carlo cross-check at reduced budget
            layer = _mu_Q_layer(QU, torus)
            phi = layer.sample(min(n_samples, 200_000), seed, "slim", N)
            mc = np.exp((phi @ fN) / np.sqrt(beta))
            mc_val = float(mc.mean())
            mc_err = float(mc.std(ddof=1) / np.sqrt(len(mc)))
        else:
            K = mayer_build(spec, F, beta, validate=False)
            num = brute_partition(K.eval, QU, fN / np.sqrt(beta), torus,
                                  n_samples=n_samples, seed=seed,
                                  context=("slim", N))
            den = brute_partition(K.eval, QU, None, torus,
                                  n_samples=n_samples, seed=seed,
                                  context=("slim", N))
            val = num.value / den.value
            err = val * np.hypot(num.stderr / num.value, den.stderr / den.value)
            mc_val, mc_err = val, err
        rows.append({"N": N, "laplace": float(val), "laplace_stderr": float(err),
                     "mc_value": mc_val, "mc_stderr": mc_err,
                     "prediction": pred,
                     "discrepancy": float(abs(val - pred) / pred)})
    return rows
