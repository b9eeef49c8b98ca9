"""Polymer functionals, relevant Hamiltonians, the circ product, the
second-order projection and the simplified norms/weights.

Relevant Hamiltonians are stored as per-site densities: a constant, linear
coefficients over the multi-index set v1 = {beta : 1 <= |beta| <= floor(d/2)+1}
and a symmetric matrix A for the first-order quadratic part, with

    H(B, phi) = sum_{x in B} [ a_const + sum_b a_lin[b] D^b phi(x)
                               + sum_{ij} A[i,j] grad_i phi(x) grad_j phi(x) ].

The measure parameter associated with H is q(H) = 2 A (so that the quadratic
density equals (1/2) sum_{ij} q_ij grad_i phi grad_j phi).
"""

from dataclasses import dataclass, field
import itertools

import numpy as np

from .lattice import TorusParams, gradient_coordinates
from .polymers import Polymer, connected_components


class FunctionalError(ValueError):
    pass


def linear_index_set(d):
    """v1: multi-indices beta with 1 <= |beta| <= floor(d/2)+1, sorted."""
    top = d // 2 + 1
    out = [b for b in itertools.product(range(top + 1), repeat=d)
           if 1 <= sum(b) <= top]
    out.sort(key=lambda b: (sum(b), b))
    return out


def quad_pair_set(d):
    """v2 with the diagonal included: pairs (e_i, e_j), i <= j."""
    return [(i, j) for i in range(d) for j in range(i, d)]


def unit_positions(d, v1):
    """Position of each unit vector e_i inside v1."""
    pos = []
    for i in range(d):
        e = tuple(1 if j == i else 0 for j in range(d))
        pos.append(v1.index(e))
    return pos


@dataclass
class RelevantHamiltonian:
    torus: TorusParams
    a_const: float = 0.0
    a_lin: np.ndarray = None  # (len(v1),)
    a_quad: np.ndarray = None  # (d, d) symmetric

    def __post_init__(self):
        d = self.torus.d
        self.v1 = linear_index_set(d)
        if self.a_lin is None:
            self.a_lin = np.zeros(len(self.v1))
        self.a_lin = np.asarray(self.a_lin, float)
        if self.a_quad is None:
            self.a_quad = np.zeros((d, d))
        self.a_quad = np.asarray(self.a_quad, float)
        if not np.allclose(self.a_quad, self.a_quad.T):
            raise FunctionalError("quadratic part must be symmetric")
        self._upos = unit_positions(d, self.v1)

    @staticmethod
    def from_measure_q(torus, e=0.0, lin=None, q=None):
        d = torus.d
        q = np.zeros((d, d)) if q is None else np.asarray(q, float)
        H = RelevantHamiltonian(torus, a_const=e, a_quad=q / 2.0)
        if lin is not None:
            H.a_lin = np.asarray(lin, float).copy()
        return H

    def q_matrix(self):
        return 2.0 * self.a_quad

    def is_zero(self, tol=0.0):
        return (abs(self.a_const) <= tol and np.all(np.abs(self.a_lin) <= tol)
                and np.all(np.abs(self.a_quad) <= tol))

    def copy(self):
        return RelevantHamiltonian(self.torus, self.a_const, self.a_lin.copy(),
                                   self.a_quad.copy())

    def scaled(self, c):
        return RelevantHamiltonian(self.torus, c * self.a_const, c * self.a_lin,
                                   c * self.a_quad)

    def plus(self, other):
        return RelevantHamiltonian(self.torus, self.a_const + other.a_const,
                                   self.a_lin + other.a_lin,
                                   self.a_quad + other.a_quad)

    # -- evaluation ----------------------------------------------------------

    def density(self, values):
        """Per-site density for field arrays shaped (..., nsites)."""
        t = self.torus
        out = np.full(values.shape, self.a_const, dtype=float)
        for j, b in enumerate(self.v1):
            if self.a_lin[j] != 0.0:
                out += self.a_lin[j] * t.apply_grad(values, b)
        if np.any(self.a_quad):
            g = [t.apply_grad(values, tuple(1 if jj == i else 0 for jj in range(t.d)))
                 for i in range(t.d)]
            for i in range(t.d):
                for j in range(t.d):
                    if self.a_quad[i, j] != 0.0:
                        out += self.a_quad[i, j] * g[i] * g[j]
        return out

    def density_from_coords(self, coords, upos=None):
        """Density from precomputed v1 gradient coordinates (..., nsites, len(v1))."""
        upos = upos if upos is not None else self._upos
        out = self.a_const + coords @ self.a_lin
        g = coords[..., upos]
        out = out + np.einsum("...i,ij,...j->...", g, self.a_quad, g)
        return out

    def eval_block(self, sites, values):
        """H(B, phi) = sum over the block's sites of the density."""
        return self.density(values)[..., sites].sum(axis=-1)


def relevant_eval(H, B: Polymer, values):
    """Exact monomial sum of H over the sites of block/polymer B."""
    return H.eval_block(B.sites(), np.asarray(values, float))


def h_norm(H, k, params):
    """Scale-k norm of a relevant Hamiltonian (per-site coefficient weights)."""
    t = H.torus
    L, d = t.L, t.d
    hk = params.h_j(k)
    out = L ** (d * k) * abs(H.a_const)
    for j, b in enumerate(H.v1):
        out += hk * L ** (k * d) * L ** (-k * (d - 2) / 2.0) * L ** (-k * sum(b)) \
            * abs(H.a_lin[j])
    for (i, j) in quad_pair_set(d):
        coeff = H.a_quad[i, i] if i == j else 2.0 * H.a_quad[i, j]
        out += hk ** 2 * abs(coeff)
    return float(out)


# -- polymer functionals ------------------------------------------------------


class PolymerFunctional:
    """An evaluable map (X, phi) -> R with locality/invariance flags.

    ``evaluator(X, values)`` receives field arrays shaped (..., nsites) and
    must return matching (...) values; the empty polymer always evaluates to 1.
    """

    def __init__(self, torus, evaluator, local=True, translation_invariant=True,
                 shift_invariant=True, factorizes=True, taylor=None, name=""):
        self.torus = torus
        self.evaluator = evaluator
        self.local = local
        self.translation_invariant = translation_invariant
        self.shift_invariant = shift_invariant
        self.factorizes = factorizes
        self._taylor = taylor
        self.name = name

    def eval(self, X: Polymer, values):
        values = np.asarray(values, float)
        if X.is_empty():
            return np.ones(values.shape[:-1])
        return self.evaluator(X, values)

    def taylor(self, X: Polymer):
        if self._taylor is None:
            raise FunctionalError(f"{self.name or 'functional'} has no polynomial form")
        return self._taylor(X)

    def has_taylor(self):
        return self._taylor is not None


def circ(F, G, X: Polymer, values, max_exact=16):
    """(F o G)(X) = sum over sub-polymers Y of F(Y) G(X \\ Y).

    Exact enumeration for |X| <= max_exact; beyond that, factorization over
    connected components is used when both functionals factorize.
    """
    values = np.asarray(values, float)
    if X.size > max_exact:
        if not (F.factorizes and G.factorizes):
            raise FunctionalError("polymer too large for exact circ enumeration")
        out = np.ones(values.shape[:-1])
        for comp in connected_components(X):
            out = out * circ(F, G, comp, values, max_exact=max_exact)
        return out
    bits = X.bits
    lat = X.lattice
    total = 0.0
    sub = bits
    while True:
        Y = Polymer(lat, sub)
        total = total + F.eval(Y, values) * G.eval(Polymer(lat, bits & ~sub), values)
        if sub == 0:
            break
        sub = (sub - 1) & bits
    return total


# -- Taylor polynomials -------------------------------------------------------


@dataclass
class TaylorPolynomial:
    """Polynomial in gradient coordinates; keys are sorted tuples of
    (site_index, beta) variables, the empty tuple being the constant."""

    torus: TorusParams
    coeffs: dict = field(default_factory=dict)

    def degree(self):
        return max((len(k) for k in self.coeffs), default=0)

    def variables(self):
        vs = set()
        for k in self.coeffs:
            vs.update(k)
        return sorted(vs)

    def cleaned(self, tol=0.0):
        return TaylorPolynomial(self.torus,
                                {k: c for k, c in self.coeffs.items() if abs(c) > tol})

    def add_term(self, variables, coeff):
        key = tuple(sorted(variables))
        self.coeffs[key] = self.coeffs.get(key, 0.0) + coeff

    def plus(self, other):
        out = TaylorPolynomial(self.torus, dict(self.coeffs))
        for k, c in other.coeffs.items():
            out.coeffs[k] = out.coeffs.get(k, 0.0) + c
        return out

    def scaled(self, c):
        return TaylorPolynomial(self.torus, {k: c * v for k, v in self.coeffs.items()})

    def eval(self, values):
        values = np.asarray(values, float)
        cache = {}
        out = np.zeros(values.shape[:-1])
        for key, c in self.coeffs.items():
            term = c
            for (site, beta) in key:
                vb = cache.get((site, beta))
                if vb is None:
                    vb = self.torus.apply_grad(values, beta)[..., site]
                    cache[(site, beta)] = vb
                term = term * vb
            out = out + term
        return out

    def shifted(self, values0):
        """Taylor polynomial around phi0: expand each variable as z + z(phi0)."""
        values0 = np.asarray(values0, float)
        base = {}
        out = TaylorPolynomial(self.torus)
        for key, c in self.coeffs.items():
            vals = []
            for (site, beta) in key:
                v = base.get((site, beta))
                if v is None:
                    v = float(self.torus.apply_grad(values0, beta)[site])
                    base[(site, beta)] = v
                vals.append(((site, beta), v))
            n = len(vals)
            for pick in itertools.product((0, 1), repeat=n):
                const = 1.0
                variables = []
                for bit, (var, v0) in zip(pick, vals):
                    if bit:
                        variables.append(var)
                    else:
                        const *= v0
                out.add_term(variables, c * const)
        return out.cleaned()


# -- second-order projection --------------------------------------------------


def _relative_coords(torus, center_site_coords):
    c = torus.coords_array() - np.asarray(center_site_coords)
    return (c + torus.halfwidth) % torus.side - torus.halfwidth


def _poly_test_fields(torus, B: Polymer, scale=1.0):
    """Polynomial test fields x^kappa on coordinates relative to B's center."""
    lat = B.lattice
    bi = B.block_indices()[0]
    center = lat.coords[bi] * lat.block_side
    rel = _relative_coords(torus, center).astype(float)
    tests = []
    for kappa in linear_index_set(torus.d):
        f = np.ones(torus.nsites)
        for i, p in enumerate(kappa):
            f = f * rel[:, i] ** p
        m = np.abs(f).max()
        tests.append((kappa, f * (scale / m if m else scale)))
    return tests, rel


def _affine_battery(d):
    us = [tuple(1 if j == i else 0 for j in range(d)) for i in range(d)]
    for i in range(d):
        for j in range(i + 1, d):
            for s in (1, -1):
                u = [0] * d
                u[i], u[j] = 1, s
                us.append(tuple(u))
    return us


def pi2_project(F, B: Polymer, fd_step=1e-4):
    """Project F at phi = 0 onto the relevant Hamiltonians.

    Constant part from F(B, 0); linear part matched on discrete polynomial
    test fields of order floor(d/2)+1; quadratic part matched on affine test
    fields.  Derivatives via central differences (exact when F carries a
    polynomial form).
    """
    torus = F.torus
    lat = B.lattice
    if lat.k >= torus.N:
        raise FunctionalError("projection is not defined at the top scale")
    if B.size != 1:
        raise FunctionalError("pi2_project expects a single block")
    nsites_B = len(B.sites())
    d = torus.d
    v1 = linear_index_set(d)

    tests, rel = _poly_test_fields(torus, B)
    us = _affine_battery(d)
    u_fields = [rel @ np.asarray(u, float) for u in us]

    if F.has_taylor():
        P = F.taylor(B)
        a0 = P.coeffs.get((), 0.0)

        def DF(tfield):
            out = 0.0
            for key, c in P.coeffs.items():
                if len(key) == 1:
                    (site, beta), = key
                    out += c * torus.apply_grad(tfield, beta)[site]
            return out

        def D2F(tfield):
            out = 0.0
            cache = {}
            for key, c in P.coeffs.items():
                if len(key) == 2:
                    prod = 1.0
                    for (site, beta) in key:
                        if (site, beta) not in cache:
                            cache[(site, beta)] = torus.apply_grad(tfield, beta)[site]
                        prod *= cache[(site, beta)]
                    out += 2.0 * c * prod
            return out

        a_const = a0 / nsites_B
        rhs_lin = np.array([DF(t) for (_, t) in tests])
        d2 = {u: D2F(uf) for u, uf in zip(us, u_fields)}
    else:
        eps = fd_step
        eps2 = max(fd_step, 2e-3)
        battery = [np.zeros(torus.nsites)]
        for (_, t) in tests:
            battery.append(eps * t)
            battery.append(-eps * t)
        for uf in u_fields:
            battery.append(eps2 * uf)
            battery.append(-eps2 * uf)
        vals = F.eval(B, np.stack(battery))
        a_const = float(vals[0]) / nsites_B
        rhs_lin = np.array([(vals[1 + 2 * i] - vals[2 + 2 * i]) / (2 * eps)
                            for i in range(len(tests))])
        off = 1 + 2 * len(tests)
        d2 = {}
        for i, u in enumerate(us):
            d2[u] = float(vals[off + 2 * i] + vals[off + 2 * i + 1] - 2 * vals[0]) / eps2 ** 2

    # linear matching system over the polynomial tests
    M = np.zeros((len(tests), len(v1)))
    for r, (_, t) in enumerate(tests):
        for c, beta in enumerate(v1):
            M[r, c] = torus.apply_grad(t, beta)[B.sites()].sum()
    try:
        a_lin = np.linalg.solve(M, rhs_lin)
    except np.linalg.LinAlgError as exc:
        raise FunctionalError(
            f"singular linear matching system (rank {np.linalg.matrix_rank(M)}"
            f" of {len(v1)})") from exc

    # quadratic matching on affine fields: (1/2) D^2 F = |B| u.A u
    A = np.zeros((d, d))
    for i in range(d):
        e = tuple(1 if j == i else 0 for j in range(d))
        A[i, i] = 0.5 * d2[e] / nsites_B
    idx = d
    for i in range(d):
        for j in range(i + 1, d):
            up = us[idx]
            um = us[idx + 1]
            idx += 2
            cross_p = 0.5 * d2[up] / nsites_B - A[i, i] - A[j, j]
            cross_m = A[i, i] + A[j, j] - 0.5 * d2[um] / nsites_B
            A[i, j] = A[j, i] = 0.25 * (cross_p + cross_m)
    return RelevantHamiltonian(torus, a_const=a_const, a_lin=a_lin, a_quad=A)


def relevant_functional(H, lattice):
    """Wrap a relevant Hamiltonian as the polymer functional X -> H(X, .)."""

    def ev(X, values):
        return H.eval_block(X.sites(), values)

    def tay(X):
        P = TaylorPolynomial(H.torus)
        sites = X.sites()
        P.add_term((), H.a_const * len(sites))
        for s in sites:
            for j, b in enumerate(H.v1):
                if H.a_lin[j] != 0.0:
                    P.add_term(((int(s), b),), H.a_lin[j])
            for i in range(H.torus.d):
                for j2 in range(H.torus.d):
                    if H.a_quad[i, j2] != 0.0:
                        bi = tuple(1 if t == i else 0 for t in range(H.torus.d))
                        bj = tuple(1 if t == j2 else 0 for t in range(H.torus.d))
                        P.add_term(((int(s), bi), (int(s), bj)), H.a_quad[i, j2])
        return P.cleaned()

    return PolymerFunctional(H.torus, ev, taylor=tay, name="relevant")


# -- norms and weights --------------------------------------------------------


@dataclass(frozen=True)
class WeightParams:
    h: float = 1.5
    zeta: float = 0.5
    lam_w: float = None
    A: float = 2.0
    L: int = 3
    d: int = 2

    def __post_init__(self):
        if self.lam_w is None:
            object.__setattr__(self, "lam_w", 0.25 * (1.0 - self.zeta))
        if self.A < 1.0:
            raise FunctionalError("polymer penalty base A must be >= 1")

    def h_j(self, j):
        return 2.0 ** j * self.h

    @property
    def p_phi(self):
        return self.d // 2 + 2

    def w_alpha(self, j, alpha):
        return (self.h_j(j) * self.L ** (-j * sum(alpha))
                * self.L ** (-j * (self.d - 2) / 2.0))


def taylor_norm(F, X: Polymer, k, params, values0=None):
    """Weighted-coefficient l1 surrogate for the scale-k Taylor pairing norm.

    Requires a polynomial form (the coefficients); this is an upper bound for
    the sup-pairing norm with the same scaling weights.
    """
    if isinstance(F, TaylorPolynomial):
        P = F
    else:
        P = F.taylor(X)
    if values0 is not None:
        P = P.shifted(values0)
    out = 0.0
    for key, c in P.coeffs.items():
        w = 1.0
        for (_, beta) in key:
            w *= params.w_alpha(k, beta)
        out += abs(c) * w
    return float(out)


def _weight_index_set(d, p_phi):
    out = [a for a in itertools.product(range(p_phi + 1), repeat=d)
           if 1 <= sum(a) <= p_phi]
    out.sort(key=lambda a: (sum(a), a))
    return out


def weight_eval(flavor, X: Polymer, values, k, params):
    """Simplified weights: local Gaussians in the scaled gradient coordinates.

    w uses the sites of X^*, W the sites of X (with half the coefficient),
    w_mixed interpolates the k and k+1 scaling weights geometrically.
    All flavors are >= 1 and factorize over polymers with disjoint site sets.
    """
    torus = X.lattice.torus
    values = np.asarray(values, float)
    if X.is_empty():
        return np.ones(values.shape[:-1])
    if flavor == "W":
        sites = X.sites()
        lam = 0.5 * params.lam_w
        weights = [params.w_alpha(k, a) for a in _weight_index_set(torus.d, params.p_phi)]
    elif flavor in ("w", "w_mixed"):
        from .polymers import star_neighbourhood
        sites = star_neighbourhood(X).sites()
        lam = params.lam_w
        alphas = _weight_index_set(torus.d, params.p_phi)
        if flavor == "w":
            weights = [params.w_alpha(k, a) for a in alphas]
        else:
            weights = [np.sqrt(params.w_alpha(k, a) * params.w_alpha(k + 1, a))
                       for a in alphas]
    else:
        raise FunctionalError(f"unknown weight flavor {flavor!r}")
    alphas = _weight_index_set(torus.d, params.p_phi)
    total = np.zeros(values.shape[:-1])
    for a, w in zip(alphas, weights):
        g = torus.apply_grad(values, a)[..., sites]
        total = total + (g ** 2).sum(axis=-1) / w ** 2
    # exponent clamp: beyond exp(700) the weight is numerically infinite anyway
    return np.exp(np.minimum(lam * total, 700.0))
