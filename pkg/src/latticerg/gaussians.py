"""Gaussian layers: sampling, local marginals, fluctuation integration, and
exact polynomial integration via Isserlis pairings.

A layer wraps one covariance kernel (an FRD slice or the full Green kernel).
Fields are sampled spectrally on the whole torus or densely on small marginal
regions; all randomness flows through counter-based streams so results are
reproducible for a fixed seed regardless of evaluation order.
"""

from dataclasses import dataclass
import itertools

import numpy as np

from . import rng as rngmod
from .frd import Kernel
from .functionals import TaylorPolynomial
from .polymers import Polymer, star_neighbourhood

PSD_CLIP = -1e-12


class GaussianError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureSpec:
    """How fluctuation integrals are evaluated."""

    mode: str = "monte_carlo"  # or "gauss_hermite"
    n_samples: int = 200_000
    seed: int = 0
    antithetic: bool = True
    gh_nodes: int = 0  # 0 = choose by dimension

    def __post_init__(self):
        if self.mode not in ("monte_carlo", "gauss_hermite"):
            raise GaussianError(f"unknown quadrature mode {self.mode!r}")

    def nodes_for(self, dim):
        if self.gh_nodes:
            return self.gh_nodes
        return {1: 64, 2: 40, 3: 16, 4: 10, 5: 8, 6: 6, 7: 5, 8: 4}.get(dim, 4)


class GaussianLayer:
    """One Gaussian integration layer with its factor caches."""

    def __init__(self, kernel: Kernel, tag=""):
        self.kernel = kernel
        self.torus = kernel.torus
        if self.torus.m != 1:
            raise GaussianError("Gaussian layers implemented for m = 1")
        self.tag = tag
        sym = kernel.symbol().ravel()
        scale = max(1.0, float(np.abs(sym).max()))
        if sym[1:].min() < -1e-10 * scale:
            raise GaussianError("kernel is not PSD on the mean-zero subspace")
        self._sqrt_sym = np.sqrt(np.maximum(sym, 0.0)).reshape(kernel.grid.shape)
        self._marginal_cache = {}
        self._grad_cov_cache = {}

    # -- sampling -------------------------------------------------------------

    def sample(self, n, seed, *context):
        """n full-torus samples, shape (n, nsites); exact spectral sampling."""
        t = self.torus
        eta = rngmod.normals(seed, (n,) + (t.side,) * t.d, "field", self.tag, *context)
        f = np.fft.fftn(eta, axes=range(-t.d, 0))
        f *= self._sqrt_sym
        out = np.real(np.fft.ifftn(f, axes=range(-t.d, 0)))
        return out.reshape(n, t.nsites)

    def marginal_covariance(self, sites):
        """Covariance of the field restricted to a site tuple."""
        sites = tuple(int(s) for s in sites)
        if not sites:
            raise GaussianError("marginal region must be non-empty")
        got = self._marginal_cache.get(sites)
        if got is not None:
            return got[0]
        t = self.torus
        coords = t.coords_array()
        kflat = self.kernel.flat()
        idx = np.asarray(sites)
        offs = coords[idx][:, None, :] - coords[idx][None, :, :]
        M = kflat[t.index_of(offs)]
        self._marginal_cache[sites] = (M, None)
        return M

    def marginal_factor(self, sites):
        sites = tuple(int(s) for s in sites)
        M, fac = self._marginal_cache.get(sites, (None, None))
        if fac is None:
            M = self.marginal_covariance(sites)
            w, V = np.linalg.eigh(M)
            if w.min() < -1e-8 * max(1.0, w.max()):
                raise GaussianError("marginal covariance is not PSD")
            fac = V * np.sqrt(np.maximum(w, 0.0))  # eigenvalue clip at the PSD tolerance
            self._marginal_cache[sites] = (M, fac)
        return self._marginal_cache[sites][1]

    def grad_covariance(self, var_a, var_b):
        """Cov(D^beta phi(x), D^gamma phi(y)) for vars (site, beta)."""
        key = (var_a, var_b)
        got = self._grad_cov_cache.get(key)
        if got is not None:
            return got
        (xa, ba), (xb, bb) = var_a, var_b
        t = self.torus
        g = t.apply_grad(self.kernel.flat(), ba)
        g = t.apply_grad_star(g, bb)
        coords = t.coords_array()
        off = coords[xa] - coords[xb]
        val = float(g[t.index_of(off)])
        self._grad_cov_cache[key] = val
        self._grad_cov_cache[(var_b, var_a)] = val
        return val

    def stencil_covariance(self, variables):
        """Covariance matrix of a list of gradient coordinates."""
        n = len(variables)
        M = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                M[i, j] = M[j, i] = self.grad_covariance(variables[i], variables[j])
        return M

    def plus(self, other, tag=""):
        return GaussianLayer(self.kernel.plus(other.kernel), tag=tag)


def sample_field(layer, seed, n=1, context=()):
    """Mean-zero Gaussian fields with the layer covariance, shape (n, nsites)."""
    return layer.sample(n, seed, *context)


def marginal_covariance(layer, region):
    return layer.marginal_covariance(tuple(int(s) for s in region))


def gh_rule(dim, nodes_per_axis):
    """Tensor Gauss-Hermite rule for E[f(u)], u ~ N(0, I_dim)."""
    t, w = np.polynomial.hermite.hermgauss(nodes_per_axis)
    pts = np.sqrt(2.0) * t
    wts = w / np.sqrt(np.pi)
    grids = np.meshgrid(*([pts] * dim), indexing="ij")
    U = np.stack([g.ravel() for g in grids], axis=-1)
    W = np.ones(U.shape[0])
    for ws in np.meshgrid(*([wts] * dim), indexing="ij"):
        W = W * ws.ravel()
    return U, W


def _batch_stderr(values, nbatch=32):
    n = len(values)
    nbatch = min(nbatch, n)
    cut = (n // nbatch) * nbatch
    b = values[:cut].reshape(nbatch, -1).mean(axis=1)
    return float(b.std(ddof=1) / np.sqrt(nbatch)) if nbatch > 1 else float("nan")


def convolve(F, X: Polymer, phi, layer, quad: QuadratureSpec):
    """R F(phi) = int F(phi + xi) mu(d xi), xi drawn only on X^*.

    Returns (value, stderr); stderr is 0 in gauss_hermite mode.
    """
    torus = layer.torus
    phi = np.asarray(phi, float)
    sites = star_neighbourhood(X).sites() if not X.is_empty() else np.empty(0, int)
    if X.is_empty() or len(sites) == 0:
        return float(F.eval(X, phi[None, :])[0]), 0.0
    if quad.mode == "gauss_hermite":
        dim = len(sites)
        if dim > 8:
            raise GaussianError("gauss_hermite limited to marginal dimension <= 8")
        fac = layer.marginal_factor(tuple(sites))
        U, W = gh_rule(dim, quad.nodes_for(dim))
        fields = np.zeros((len(W), torus.nsites))
        fields[:, sites] = U @ fac.T
        vals = F.eval(X, phi[None, :] + fields)
        return float(np.dot(W, vals)), 0.0
    n = quad.n_samples
    fac = layer.marginal_factor(tuple(sites))
    half = (n + 1) // 2 if quad.antithetic else n
    z = rngmod.normals(quad.seed, (half, len(sites)), "convolve", layer.tag,
                       X.k, X.bits)
    if quad.antithetic:
        z = np.concatenate([z, -z])[:n]
    fields = np.zeros((len(z), torus.nsites))
    fields[:, sites] = z @ fac.T
    vals = F.eval(X, phi[None, :] + fields)
    return float(vals.mean()), _batch_stderr(vals)


def _isserlis(variables, cov):
    """E[prod xi_v] over a list of variables (with multiplicity)."""
    n = len(variables)
    if n % 2:
        return 0.0
    if n == 0:
        return 1.0
    v0 = variables[0]
    rest = variables[1:]
    total = 0.0
    for i, vi in enumerate(rest):
        sub = rest[:i] + rest[i + 1:]
        total += cov(v0, vi) * _isserlis(sub, cov)
    return total


def wick_convolve(P: TaylorPolynomial, layer, max_degree=8):
    """Exact Gaussian integration of a gradient-coordinate polynomial.

    (R P)(phi) = E[P(phi + xi)]: expand each monomial over which factors are
    integrated and contract those by Isserlis pairings.
    """
    if P.degree() > max_degree:
        raise GaussianError(f"polynomial degree {P.degree()} exceeds cap {max_degree}")
    out = TaylorPolynomial(P.torus)
    for key, c in P.coeffs.items():
        r = len(key)
        for mask in range(1 << r):
            integrated = [key[i] for i in range(r) if mask >> i & 1]
            kept = tuple(key[i] for i in range(r) if not mask >> i & 1)
            moment = _isserlis(integrated, layer.grad_covariance)
            if moment != 0.0:
                out.add_term(kept, c * moment)
    return out.cleaned(tol=0.0)
