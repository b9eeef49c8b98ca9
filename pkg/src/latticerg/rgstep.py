"""One renormalisation step: the relevant flow H -> H_+, the irrelevant map
K -> K_+, its linearization, and the conservation residual that certifies a
step.

The step is organised around the per-block functional

    htilde(B) = Pi2 R_+ H(B) - Pi2 R_+ K(B),

computed once per scale (translation invariance).  The next relevant
Hamiltonian is the block sum of htilde, and the next irrelevant functional is

    K_+(U, phi) = sum_X chi(X, U) (e^{-htilde})^{U\\X} (e^{-htilde})^{-X\\U}
                  int [ (1 - e^{-htilde(phi)}) o (e^{-H(phi+xi)} - 1)
                        o K(phi+xi) ] (X)  mu_+(d xi),

which together satisfy R_+(e^{-H} o K)(Lambda) = (e^{-H_+} o K_+)(Lambda)
identically in phi (the defining property of the step; conservation_residual
measures it at sample fields).

Quadrature notes: scale-0 step integrals draw per-polymer stencil samples
from counter-based streams keyed by shape and anchor offsets, so a fixed seed
gives bit-identical values and translating (U, phi) by a block vector leaves
the evaluation unchanged bit for bit.  Steps from scale >= 1 share one
fluctuation batch across the polymer sum (enabling component caching) and are
translation covariant statistically.  Nested scales draw fresh inner samples
per outer sample, which keeps every estimator unbiased; inner noise averages
out in the outer mean and is charged to the reported stderr.
"""

from dataclasses import dataclass, field
import numpy as np

from . import rng as rngmod
from .frd import FRDecomposition
from .functionals import (
    PolymerFunctional,
    RelevantHamiltonian,
    TaylorPolynomial,
    linear_index_set,
    pi2_project,
    unit_positions,
)
from .gaussians import GaussianLayer, QuadratureSpec, gh_rule, wick_convolve
from .lattice import TorusParams
from .polymers import (
    Polymer,
    block_lattice,
    connected_components,
    closure,
    empty_polymer,
    enumerate_preimage,
    star_neighbourhood,
    whole_torus,
)

_CHUNK = 4_000_000  # max floats per stencil-sample block


class StepError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepParams:
    """Per-scale knobs of the RG step."""

    cutoff: int = 9
    n_quad: int = 4096  # samples per evaluated K_+ integral
    n_pi2: int = 4096   # battery samples for Pi2(R K) at scales >= 1
    gh_nodes: int = 8   # per-axis nodes for the scale-0 moment route
    fd_step: float = 1e-4
    enum_budget: int = 5_000_000
    comp_cap: int = 0   # if > 0, parent components above this size count as 0
    inner_n: int = 4    # antithetic samples per nested parent-K estimate


@dataclass
class StepReport:
    scale: int
    h_next_norm: float = 0.0
    k_next_norm: float = 0.0
    largest_X: int = 0
    tail_estimate: float = 0.0
    residuals: list = field(default_factory=list)  # (value, stderr) pairs
    extras: dict = field(default_factory=dict)

    def as_dict(self):
        return {"scale": self.scale, "h_next_norm": self.h_next_norm,
                "k_next_norm": self.k_next_norm, "largest_X": self.largest_X,
                "tail_estimate": self.tail_estimate,
                "residuals": [[float(a), float(b)] for a, b in self.residuals],
                "extras": self.extras}


# --------------------------------------------------------------------------
# K functionals


class ZeroK:
    """K identically zero off the empty polymer."""

    def __init__(self, torus, scale=0):
        self.torus = torus
        self.scale = scale
        self.local = self.translation_invariant = True
        self.shift_invariant = self.factorizes = True

    def eval_batch(self, Y, values, ctx=(), ref_anchor=None, n_override=None):
        values = np.asarray(values, float)
        if Y.is_empty():
            return np.ones(values.shape[:-1]), np.zeros(values.shape[:-1])
        return np.zeros(values.shape[:-1]), np.zeros(values.shape[:-1])

    def site_model(self):
        return None


class MayerK0:
    """Initial irrelevant functional K_0(Y) = e^{-H_0(Y)} prod_{x in Y} Kcal(D phi(x)).

    Sitewise multiplicative, which the scale-0 step exploits heavily.
    """

    def __init__(self, torus: TorusParams, H0: RelevantHamiltonian, mayer,
                 site_scale=None):
        if torus.m != 1:
            raise StepError("flow engine implemented for m = 1")
        self.torus = torus
        self.scale = 0
        self.H0 = H0
        self.mayer = mayer
        # per-site multiplier on the Mayer site factor; lets tests modify K
        # on chosen sites (the restriction property keeps evaluations away
        # from sites outside U^*)
        self.site_scale = site_scale
        self.v1 = linear_index_set(torus.d)
        self.upos = unit_positions(torus.d, self.v1)
        self.local = self.translation_invariant = True
        self.shift_invariant = self.factorizes = True

    # coords: (..., len(v1)) array of gradient coordinates at one site
    def site_value_from_coords(self, coords):
        h = (self.H0.a_const + coords @ self.H0.a_lin
             + np.einsum("...i,ij,...j->...", coords[..., self.upos],
                         self.H0.a_quad, coords[..., self.upos]))
        g = self.mayer.log1p_eval(coords[..., self.upos])
        return np.exp(g - h) - np.exp(-h)

    def h0_density_from_coords(self, coords):
        return (self.H0.a_const + coords @ self.H0.a_lin
                + np.einsum("...i,ij,...j->...", coords[..., self.upos],
                            self.H0.a_quad, coords[..., self.upos]))

    def coords_of(self, values):
        """(..., nsites, len(v1)) gradient coordinates of field arrays."""
        cols = [self.torus.apply_grad(values, b) for b in self.v1]
        return np.stack(cols, axis=-1)

    def site_values(self, values):
        """(..., nsites) sitewise factors e^{-H0({x})} Kcal(D phi(x))."""
        out = self.site_value_from_coords(self.coords_of(values))
        if self.site_scale is not None:
            out = out * self.site_scale
        return out

    def site_scale_at(self, sites):
        if self.site_scale is None:
            return None
        return np.asarray(self.site_scale, float)[sites]

    def eval_batch(self, Y, values, ctx=(), ref_anchor=None, n_override=None):
        values = np.asarray(values, float)
        if Y.is_empty():
            return np.ones(values.shape[:-1]), np.zeros(values.shape[:-1])
        sv = self.site_values(values)
        out = np.ones(values.shape[:-1])
        for s in Y.sites():
            out = out * sv[..., s]
        return out, np.zeros(values.shape[:-1])

    def site_model(self):
        return self


class StepK:
    """The irrelevant functional produced by one RG step (scale k -> k+1)."""

    def __init__(self, data):
        self.data = data
        self.torus = data.torus
        self.scale = data.k + 1
        self.local = self.translation_invariant = True
        self.shift_invariant = self.factorizes = True

    # -- public evaluation ---------------------------------------------------

    def eval_batch(self, U, values, ctx=(), ref_anchor=None, n_override=None,
                   direct=False):
        """(values, stderr) of K_+(U, phi) over a field batch (nb, nsites).

        Disconnected U factorizes over components by default (each with its
        own quadrature); ``direct=True`` forces the raw polymer-sum formula,
        which the factorization test compares against.
        """
        values = np.atleast_2d(np.asarray(values, float))
        if U.is_empty():
            return np.ones(values.shape[0]), np.zeros(values.shape[0])
        comps = connected_components(U)
        if len(comps) == 1 or direct:
            return self.eval_connected(U, values, ctx, ref_anchor, n_override)
        val = np.ones(values.shape[0])
        rel = np.zeros(values.shape[0])
        for comp in comps:
            v, e = self.eval_connected(comp, values, ctx, ref_anchor, n_override)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = rel + np.where(v != 0, (e / np.where(v == 0, 1.0, v)) ** 2, 0.0)
            val = val * v
        return val, np.abs(val) * np.sqrt(rel)

    def eval_connected(self, U, values, ctx=(), ref_anchor=None, n_override=None):
        data = self.data
        ref = U.anchor() if ref_anchor is None else np.asarray(ref_anchor)
        Xs = data.preimages(U)
        nb = values.shape[0]
        if not Xs:
            return np.zeros(nb), np.zeros(nb)
        dens_ht = data.htilde_density(values)  # (nb, nsites)
        u_mask_sites = U.site_mask()
        if data.parent_scale == 0:
            if nb == 1 and len(Xs) >= 16:
                return self._scale0_shared(U, Xs, values, u_mask_sites, dens_ht,
                                           ctx, n_override)
            total = np.zeros(nb)
            err2 = np.zeros(nb)
            for X in Xs:
                w = self._weight(X, u_mask_sites, dens_ht)
                v, e = self._integral_scale0(U, X, values, ref, ctx, n_override)
                total += w * v
                err2 += (w * e) ** 2
            return total, np.sqrt(err2)
        return self._sum_general(U, Xs, values, u_mask_sites, dens_ht, ref, ctx,
                                 n_override)

    # -- pieces ----------------------------------------------------------------

    def _weight(self, X, u_mask_sites, dens_ht):
        x_mask = X.site_mask()
        only_u = u_mask_sites & ~x_mask
        only_x = x_mask & ~u_mask_sites
        ln_w = -dens_ht[:, only_u].sum(axis=1) + dens_ht[:, only_x].sum(axis=1)
        return np.exp(ln_w)

    def _integral_scale0(self, U, X, values, ref, ctx, n_override):
        """Sitewise-collapsed integrand: prod_x [u + v + w](x).

        Fresh antithetic stencil draws per batch entry keep nested estimates
        independent across outer samples.
        """
        data = self.data
        K0 = data._K0
        sites = data.anchored_sites(X)
        nact = len(data.active)
        nb = values.shape[0]
        n = n_override or data.params.n_quad
        n_half = max(1, n // 2)
        n = 2 * n_half
        coords_phi = data.site_coords(values)[:, sites, :][..., data.active]
        dens_ht = data.htilde_density(values)
        u_fact = 1.0 - np.exp(-dens_ht[:, sites])  # (nb, |X|)
        ss = K0.site_scale_at(sites) if K0 is not None else None

        nvars = len(sites) * nact
        fac = data.stencil_factor(X)

        key = ("K", self.scale, int(U.normalized_bits()), int(X.normalized_bits()),
               tuple(int(a) for a in (X.anchor() - ref)), *ctx)
        mean = np.zeros(nb)
        merr = np.zeros(nb)
        chunk = max(1, min(nb, _CHUNK // max(1, n * nvars)))
        gen = rngmod.stream(data.seed, *key)
        for lo in range(0, nb, chunk):
            hi = min(nb, lo + chunk)
            z = gen.standard_normal((hi - lo, n_half, nvars))
            z = np.concatenate([z, -z], axis=1)
            xi = (z @ fac.T).reshape(hi - lo, n, len(sites), nact)
            c = coords_phi[lo:hi, None, :, :] + xi
            site_vals = data.site_terms_from_active(c)
            if ss is not None:
                # site-dependent tamper acts only on the w-part
                h0 = (K0.H0.a_const + c @ data._lin0_active
                      + np.einsum("...i,ij,...j->...", c[..., data.u_in_active],
                                  K0.H0.a_quad, c[..., data.u_in_active]))
                w_term = (np.exp(K0.mayer.log1p_eval(c[..., data.u_in_active]) - h0)
                          - np.exp(-h0))
                site_vals = site_vals + (ss - 1.0) * w_term
            site_vals += u_fact[lo:hi, None, :]
            prod = site_vals.prod(axis=-1)  # (chunk, n)
            mean[lo:hi] = prod.mean(axis=1)
            if n >= 32:
                b = prod[:, : (n // 16) * 16].reshape(hi - lo, 16, -1).mean(axis=2)
                merr[lo:hi] = b.std(axis=1, ddof=1) / np.sqrt(16)
            else:
                merr[lo:hi] = np.inf
        return mean, merr

    def _scale0_shared(self, U, Xs, values, u_mask_sites, dens_ht, ctx,
                       n_override):
        """Single-field polymer sum over one shared fluctuation batch.

        Used for exhaustive-style evaluations (many X, one field): one
        translation-covariant full-torus sample batch serves every X, and the
        per-sample totals give an honest stderr of the whole sum.
        """
        data = self.data
        K0 = data.K.site_model()
        torus = self.torus
        n = n_override or data.params.n_quad
        a_site = U.anchor() * U.lattice.block_side
        key = ("K0s", self.scale, int(U.normalized_bits()), *ctx)
        xi = data.layer_samples(n, key)
        perm = torus.shift_index(tuple(-int(x) for x in a_site))
        xi = xi[:, perm]
        coords_xi = np.stack([torus.apply_grad(xi, b) for b in data.v1], axis=-1)
        coords_phi = data.site_coords(values)[0]  # (nsites, nv)
        c_all = coords_phi[None, :, :] + coords_xi  # (n, nsites, nv)
        site_vals = np.expm1(-data.H.density_from_coords(c_all))
        if K0 is not None:
            w_term = K0.site_value_from_coords(c_all)
            if K0.site_scale is not None:
                w_term = w_term * np.asarray(K0.site_scale, float)
            site_vals += w_term
        u_all = 1.0 - np.exp(-dens_ht[0])  # (nsites,)
        site_vals = site_vals + u_all[None, :]

        total = np.zeros(n)
        for X in Xs:
            w = self._weight(X, u_mask_sites, dens_ht)[0]
            total += w * site_vals[:, X.sites()].prod(axis=-1)
        mean = float(total.mean())
        if n >= 32:
            bm = total[: (n // 16) * 16].reshape(16, -1).mean(axis=1)
            err = float(bm.std(ddof=1) / np.sqrt(16))
        else:
            err = np.inf
        return np.array([mean]), np.array([err])

    def _sum_general(self, U, Xs, values, u_mask_sites, dens_ht, ref, ctx,
                     n_override):
        """Polymer sum for parents at scale >= 1: one shared fluctuation batch,
        per-sample totals, and a component cache across all X.

        Terms without a parent-K factor are Gaussian expectations of
        exponentials of quadratics and are integrated in closed form; only
        K-bearing terms go through Monte Carlo.
        """
        data = self.data
        nb = values.shape[0]
        n = n_override or data.params.n_quad
        lat = block_lattice(self.torus, data.parent_scale)
        key = ("K", self.scale, int(U.normalized_bits()), *ctx)
        xi = data.layer_samples(n, key)  # (n, nsites)
        fields = (values[:, None, :] + xi[None, :, :]).reshape(nb * n, -1)
        dens_H = data.H_density(fields)  # (nb*n, nsites)

        all_blocks = set()
        for X in Xs:
            all_blocks.update(X.block_indices())
        u_fact = {}
        v_fact = {}
        for b in all_blocks:
            bs = lat.sites_of_block(b)
            u_fact[b] = (1.0 - np.exp(-dens_ht[:, bs].sum(axis=1)))[:, None]
            v_fact[b] = np.expm1(-dens_H[:, bs].sum(axis=1)).reshape(nb, n)

        # closed-form part: for each X, E[prod_B (u + v)] via the binomial
        # prod(u + v) = sum_R prod_{B in R} e^{-H(B)} prod_{B not in R} (u - 1)
        gauss = data.expquad(lat)
        exact = np.zeros(nb)
        neg_eh = {b: -np.exp(-dens_ht[:, lat.sites_of_block(b)].sum(axis=1))
                  for b in all_blocks}
        for X in Xs:
            wX = self._weight(X, u_mask_sites, dens_ht)
            term = np.zeros(nb)
            sub = X.bits
            while True:
                g = gauss.expectation(sub, values)  # (nb,)
                rest = X.bits & ~sub
                fac = g
                bb = rest
                while bb:
                    low = bb & -bb
                    bb ^= low
                    fac = fac * neg_eh[low.bit_length() - 1]
                term = term + fac
                if sub == 0:
                    break
                sub = (sub - 1) & X.bits
            exact += wX * term

        comp_cache = {}
        cap = data.params.comp_cap

        def K_of(bits):
            if bits == 0:
                return 1.0
            out = 1.0
            for comp in connected_components(Polymer(lat, bits)):
                if cap and comp.size > cap:
                    return 0.0  # truncated parent component, reported via tail
                got = comp_cache.get(comp.bits)
                if got is None:
                    # translation covariance: evaluate the anchored shape on
                    # back-translated fields, one evaluation per shape class
                    a = comp.anchor()
                    comp_n = comp.translate(-a)
                    perm = self.torus.shift_index(tuple(int(x) for x in
                                                        a * lat.block_side))
                    v, _ = data.K.eval_batch(comp_n, fields[:, perm], ctx=key,
                                             ref_anchor=comp_n.anchor(),
                                             n_override=data.inner_n)
                    got = v.reshape(nb, n)
                    comp_cache[comp.bits] = got
                out = out * got
            return out

        total = np.zeros((nb, n))
        for X in Xs:
            w = self._weight(X, u_mask_sites, dens_ht)[:, None]
            part = np.zeros((nb, n))
            sub = X.bits
            while True:
                if sub != 0:  # Z3 = empty is covered by the closed form
                    term = K_of(sub)
                    rest = X.bits & ~sub
                    b = rest
                    while b:
                        low = b & -b
                        b ^= low
                        blk = low.bit_length() - 1
                        term = term * (u_fact[blk] + v_fact[blk])
                    part = part + term
                if sub == 0:
                    break
                sub = (sub - 1) & X.bits
            total = total + w * part
        mean = exact + total.mean(axis=1)
        if n >= 32:
            bm = total[:, : (n // 16) * 16].reshape(nb, 16, -1).mean(axis=2)
            err = bm.std(axis=1, ddof=1) / np.sqrt(16)
        else:
            err = np.full(nb, np.inf)
        return mean, err

    def site_model(self):
        return None


class _ExpQuadGaussian:
    """Closed-form E[exp(-sum_{x in R} h(x, phi + xi))] over the step layer.

    h is the per-site density of the flow Hamiltonian (constant + linear in
    active gradient coordinates + quadratic in the unit ones), so the
    integrand is exp of a quadratic in the stencil Gaussian and the integral
    is a determinant formula.  Factors are cached per block set.
    """

    def __init__(self, data, lat):
        self.data = data
        self.lat = lat
        self._cache = {}
        self._phi_ref = None
        self._su_phi = None

    def _phi_units(self, values):
        if self._phi_ref is not values:
            self._su_phi = self.data.site_coords(values)[..., self.data.upos]
            self._phi_ref = values
        return self._su_phi

    def _factors(self, bits):
        got = self._cache.get(bits)
        if got is not None:
            return got
        data = self.data
        R = Polymer(self.lat, bits)
        sites = data.anchored_sites(R)
        F = data.stencil_factor(R)
        nact = len(data.active)
        ns = len(sites)
        Q = np.zeros((ns * nact, ns * nact))
        A = data.H.a_quad
        for s in range(ns):
            for ai, i in enumerate(data.u_in_active):
                for aj, j in enumerate(data.u_in_active):
                    Q[s * nact + i, s * nact + j] = A[ai, aj]
        M = np.eye(F.shape[1]) + 2.0 * F.T @ Q @ F
        w, V = np.linalg.eigh(M)
        if w.min() <= 1e-12:
            raise StepError("Gaussian exponential-quadratic integral diverges")
        logdet = float(np.log(w).sum())
        Minv = (V / w) @ V.T
        got = (sites, F, Minv, logdet)
        self._cache[bits] = got
        return got

    def expectation(self, bits, values):
        nb = values.shape[0]
        if bits == 0:
            return np.ones(nb)
        data = self.data
        sites, F, Minv, logdet = self._factors(bits)
        dens_phi = data.H.density_from_coords(data.site_coords(values))
        C = dens_phi[:, sites].sum(axis=1)  # (nb,)
        su = self._phi_units(values)[:, sites, :]  # (nb, ns, d)
        nact = len(data.active)
        b = np.zeros((nb, len(sites), nact))
        b += data._linH_active
        cross = 2.0 * su @ data.H.a_quad  # (nb, ns, d)
        for ai, j in enumerate(data.u_in_active):
            b[..., j] += cross[..., ai]
        bflat = b.reshape(nb, -1)
        a = bflat @ F  # (nb, r)
        quad = 0.5 * np.einsum("ni,ij,nj->n", a, Minv, a)
        return np.exp(-C - 0.5 * logdet + quad)


# --------------------------------------------------------------------------
# step preparation


@dataclass
class FlowState:
    """State advanced by the RG step."""

    k: int
    H: RelevantHamiltonian
    K: object
    q: np.ndarray
    torus: TorusParams
    frd: FRDecomposition
    params: StepParams
    seed: int = 0

    def lattice(self):
        return block_lattice(self.torus, self.k)


class StepData:
    """Everything the step k -> k+1 needs, computed once per scale."""

    def __init__(self, state: FlowState, htilde, layer):
        self.torus = state.torus
        self.k = state.k
        self.parent_scale = state.k
        self.H = state.H
        self.K = state.K
        self.params = state.params
        self.seed = state.seed
        self.htilde = htilde
        self.layer = layer
        self.v1 = linear_index_set(state.torus.d)
        self.upos = unit_positions(state.torus.d, self.v1)
        self.inner_n = max(2, state.params.inner_n)
        self._preimage_cache = {}
        self._stencil_factors = {}
        self._coord_cache = (None, None)  # (array ref, coords)
        self._htilde_cache = (None, None)
        # active gradient coordinates of the scale-0 site factors: unit
        # vectors always, higher multi-indices only when a linear part
        # couples to them
        active = set(self.upos)
        K0 = self.K.site_model() if hasattr(self.K, "site_model") else None
        for j in range(len(self.v1)):
            if self.H.a_lin[j] != 0.0:
                active.add(j)
            if K0 is not None and K0.H0.a_lin[j] != 0.0:
                active.add(j)
        self.active = sorted(active)
        self.u_in_active = [self.active.index(p) for p in self.upos]
        self._linH_active = self.H.a_lin[self.active]
        self._lin0_active = (K0.H0.a_lin[self.active] if K0 is not None else None)
        self._K0 = K0

    def site_terms_from_active(self, c):
        """v + w site factors from active-coordinate arrays (..., nactive)."""
        su = c[..., self.u_in_active]
        hH = (self.H.a_const + c @ self._linH_active
              + np.einsum("...i,ij,...j->...", su, self.H.a_quad, su))
        out = np.expm1(-hH)
        K0 = self._K0
        if K0 is not None:
            h0 = (K0.H0.a_const + c @ self._lin0_active
                  + np.einsum("...i,ij,...j->...", su, K0.H0.a_quad, su))
            G = K0.mayer.log1p_eval(su)
            out = out + np.exp(G - h0) - np.exp(-h0)
        return out

    # memoized geometry/field helpers ---------------------------------------

    def preimages(self, U):
        got = self._preimage_cache.get(U.bits)
        if got is None:
            got = [X for X in enumerate_preimage(U, self.params.cutoff,
                                                 self.params.enum_budget)
                   if not X.is_empty()]
            star = star_neighbourhood(U)
            star_sites = set(star.sites())
            for X in got:
                if not set(X.sites()) <= star_sites:
                    raise StepError("preimage polymer escapes U^*")
            got.sort(key=lambda X: (int(X.normalized_bits()),
                                    tuple(int(a) for a in (X.anchor() - U.anchor()))))
            self._preimage_cache[U.bits] = got
        return self._preimage_cache[U.bits]

    def site_coords(self, values):
        ref, got = self._coord_cache
        if ref is not values:
            cols = [self.torus.apply_grad(values, b) for b in self.v1]
            got = np.stack(cols, axis=-1)
            self._coord_cache = (values, got)  # keep only the latest batch
        return got

    def htilde_density(self, values):
        ref, got = self._htilde_cache
        if ref is not values:
            got = self.htilde.density_from_coords(self.site_coords(values))
            self._htilde_cache = (values, got)
        return got

    def H_density(self, fields):
        return self.H.density(fields)

    def anchored_sites(self, X):
        """X's sites ordered by displacement from the anchor corner.

        The order is translation covariant (wrapping included), which keeps
        the pairing with the normalized-shape stencil factor exact.
        """
        torus = self.torus
        lat = X.lattice
        sites = X.sites()
        corner = X.anchor() * lat.block_side - (lat.block_side - 1) // 2
        rel = torus.coords_array()[sites] - corner
        rel = (rel + torus.halfwidth) % torus.side - torus.halfwidth
        order = np.lexsort(rel.T[::-1])
        return sites[order]

    def stencil_factor(self, X):
        """Square root of the active-coordinate stencil covariance, per shape."""
        key = int(X.normalized_bits())
        got = self._stencil_factors.get(key)
        if got is None:
            Xn = X.translate(-X.anchor())
            betas = [self.v1[j] for j in self.active]
            vars_n = [(int(s), b) for s in self.anchored_sites(Xn) for b in betas]
            M = self.layer.stencil_covariance(vars_n)
            w, V = np.linalg.eigh(M)
            got = V * np.sqrt(np.maximum(w, 0.0))
            self._stencil_factors[key] = got
        return got

    def layer_samples(self, n, key):
        t = self.torus
        eta = rngmod.normals(self.seed, (n,) + (t.side,) * t.d, "layerxi", *key)
        f = np.fft.fftn(eta, axes=range(-t.d, 0))
        f *= self.layer._sqrt_sym
        return np.real(np.fft.ifftn(f, axes=range(-t.d, 0))).reshape(n, t.nsites)

    def expquad(self, lat):
        got = getattr(self, "_expquad", None)
        if got is None or got.lat is not lat:
            got = _ExpQuadGaussian(self, lat)
            self._expquad = got
        return got


def step_layer(state: FlowState):
    return GaussianLayer(state.frd.layer_kernel(state.k), tag=f"L{state.k + 1}")


def _wick_const_of_H(H, layer, torus):
    """E[H(B, xi)] - H(B, 0) per site: the quadratic Wick constant."""
    o = int(torus.index_of(np.zeros(torus.d, dtype=int)))
    c = 0.0
    d = torus.d
    for i in range(d):
        for j in range(d):
            if H.a_quad[i, j] != 0.0:
                ei = tuple(1 if a == i else 0 for a in range(d))
                ej = tuple(1 if a == j else 0 for a in range(d))
                c += H.a_quad[i, j] * layer.grad_covariance((o, ei), (o, ej))
    return c


def pi2_of_RH(H, layer, torus):
    """Pi2 R_+ H: exact (R adds the Wick constant; lin/quad pass through)."""
    out = H.copy()
    out.a_const = H.a_const + _wick_const_of_H(H, layer, torus)
    return out


def _pi2_moment_route(state, layer):
    """Pi2 R_+ K_0 for the sitewise K via Gauss-Hermite moments (exact)."""
    torus = state.torus
    K0 = state.K.site_model()
    d = torus.d
    v1 = linear_index_set(d)
    upos = unit_positions(d, v1)
    o = int(torus.index_of(np.zeros(d, dtype=int)))
    variables = [(o, b) for b in v1]
    Sigma = layer.stencil_covariance(variables)

    # active coordinates: units always; others only if H couples to them
    active = sorted(set(upos) | {j for j, a in enumerate(state.K.site_model().H0.a_lin)
                                 if a != 0.0})
    Sa = Sigma[np.ix_(active, active)]
    w, V = np.linalg.eigh(Sa)
    fac = V * np.sqrt(np.maximum(w, 0.0))
    dim = len(active)
    nodes = state.params.gh_nodes or QuadratureSpec().nodes_for(dim)
    U, W = gh_rule(dim, nodes)
    s_active = U @ fac.T  # (npts, dim)
    s = np.zeros((len(W), len(v1)))
    s[:, active] = s_active

    H0 = K0.H0
    mayer = K0.mayer
    su = s[:, upos]
    h = H0.a_const + s @ H0.a_lin + np.einsum("ni,ij,nj->n", su, H0.a_quad, su)
    G = mayer.log1p_eval(su)
    t = np.exp(G - h) - np.exp(-h)

    # gradients of t in the 5 coordinates
    dh = np.zeros((len(W), len(v1)))
    dh += H0.a_lin[None, :]
    dh[:, upos] += 2.0 * su @ H0.a_quad
    dG = np.zeros((len(W), len(v1)))
    dG[:, upos] = mayer.grad_g(su)
    egh = np.exp(G - h)
    eh = np.exp(-h)
    dt = egh[:, None] * (dG - dh) + eh[:, None] * dh

    # Hessian pieces
    d2h = np.zeros((len(v1), len(v1)))
    for a, i in enumerate(upos):
        for b, j in enumerate(upos):
            d2h[i, j] += 2.0 * H0.a_quad[a, b]
    hessG = mayer.hess_g(su)  # (npts, d, d)
    val = np.einsum("n,n->", W, t)
    grad = np.einsum("n,ni->i", W, dt)
    gmh = dG - dh
    term1 = np.einsum("n,ni,nj->ij", W * egh, gmh, gmh)
    term2 = np.zeros((len(v1), len(v1)))
    term2[np.ix_(upos, upos)] = np.einsum("n,nab->ab", W * egh, hessG)
    term2 -= np.einsum("n->", W * egh) * d2h
    term3 = (np.einsum("n,ni,nj->ij", W * eh, dh, dh)
             - np.einsum("n->", W * eh) * d2h)
    hess = term1 + term2 - term3

    out = RelevantHamiltonian(torus, a_const=float(val), a_lin=grad,
                              a_quad=0.5 * hess[np.ix_(upos, upos)])
    # symmetrize roundoff
    out.a_quad = 0.5 * (out.a_quad + out.a_quad.T)
    return out


def _pi2_mc_route(state, layer):
    """Pi2 R_+ K at scales >= 1: battery evaluation with common random numbers."""
    torus = state.torus
    lat = state.lattice()
    o = int(lat.index_of(np.zeros(torus.d, dtype=int)))
    B = Polymer(lat, 1 << o)
    n = state.params.n_pi2
    xi = StepDataShim(state, layer).layer_samples(n, ("pi2", state.k))

    class RK:
        torus_ = torus

        def __init__(self):
            self.torus = torus

        def has_taylor(self):
            return False

        def eval(self, Bp, battery):
            battery = np.atleast_2d(battery)
            nt = battery.shape[0]
            fields = (battery[:, None, :] + xi[None, :, :]).reshape(nt * n, -1)
            v, _ = state.K.eval_batch(Bp, fields, ctx=("pi2", state.k),
                                      ref_anchor=Bp.anchor(),
                                      n_override=max(4, n // 128))
            return v.reshape(nt, n).mean(axis=1)

    return pi2_project(RK(), B, fd_step=state.params.fd_step)


class StepDataShim:
    def __init__(self, state, layer):
        self.torus = state.torus
        self.seed = state.seed
        self.layer = layer

    layer_samples = StepData.layer_samples


def prepare_step(state: FlowState):
    """Compute htilde and package the step data (one call per scale)."""
    if state.k + 1 > state.torus.N:
        raise StepError("no scales left")
    layer = step_layer(state)
    piH = pi2_of_RH(state.H, layer, state.torus)
    if isinstance(state.K, ZeroK):
        piK = RelevantHamiltonian(state.torus)
    elif state.K.site_model() is not None:
        piK = _pi2_moment_route(state, layer)
    else:
        piK = _pi2_mc_route(state, layer)
    htilde = piH.plus(piK.scaled(-1.0))
    return StepData(_StateView(state, htilde, layer), htilde, layer)


class _StateView:
    """Light view binding htilde/layer into StepData's constructor signature."""

    def __init__(self, state, htilde, layer):
        self.torus = state.torus
        self.k = state.k
        self.H = state.H
        self.K = state.K
        self.params = state.params
        self.seed = state.seed


def next_H(state: FlowState, data: StepData = None):
    """H_{k+1}: per-site density equal to htilde (block sums of htilde)."""
    data = data or prepare_step(state)
    return data.htilde.copy(), data


def build_next_K(state: FlowState, data: StepData = None):
    data = data or prepare_step(state)
    return StepK(data), data


def next_K(state: FlowState, U: Polymer, phi, data: StepData = None,
           n_override=None):
    """(value, stderr) of K_+(U, phi) per the polymer-sum formula."""
    K = StepK(data or prepare_step(state))
    v, e = K.eval_batch(U, np.atleast_2d(np.asarray(phi, float)),
                        n_override=n_override)
    return float(v[0]), float(e[0])


# --------------------------------------------------------------------------
# circ products on the full torus and the conservation residual


def circ_pair_on_torus(H, K, lat, fields, inner_n=None, ctx=("circ",)):
    """(e^{-H} o K)(Lambda, phi) for a field batch, at K's scale."""
    fields = np.atleast_2d(np.asarray(fields, float))
    site_model = K.site_model() if hasattr(K, "site_model") else None
    if site_model is not None:
        # sitewise collapse: prod_x (e^{-h(x)} + w(x))
        dens = H.density(fields)
        sv = site_model.site_values(fields)
        return (np.exp(-dens) + sv).prod(axis=-1)
    dens = H.density(fields)
    Lam = whole_torus(lat)
    total = np.zeros(fields.shape[0])
    comp_cache = {}

    def K_of(bits):
        if bits == 0:
            return 1.0
        out = 1.0
        for comp in connected_components(Polymer(lat, bits)):
            got = comp_cache.get(comp.bits)
            if got is None:
                got, _ = K.eval_batch(comp, fields, ctx=ctx,
                                      ref_anchor=comp.anchor(),
                                      n_override=inner_n)
                comp_cache[comp.bits] = got
            out = out * got
        return out

    sub = Lam.bits
    while True:
        rest = Polymer(lat, Lam.bits & ~sub)
        hval = dens[:, rest.sites()].sum(axis=1) if not rest.is_empty() else 0.0
        total = total + np.exp(-hval) * K_of(sub)
        if sub == 0:
            break
        sub = (sub - 1) & Lam.bits
    return total


def conservation_residual(state: FlowState, data: StepData, H_next, K_next,
                          phis, n_lhs=200_000, seed_shift=1, inner_n=None):
    """LHS - RHS of the defining identity at each sample field.

    LHS: Monte-Carlo integral of (e^{-H} o K)(Lambda, phi + xi) over the step
    covariance; RHS: (e^{-H_+} o K_+)(Lambda, phi) with independent streams.
    Returns a list of (residual, stderr).
    """
    torus = state.torus
    lat_k = block_lattice(torus, state.k)
    lat_next = block_lattice(torus, state.k + 1)
    out = []
    for idx, phi in enumerate(phis):
        phi = np.asarray(phi, float)
        xi = data.layer_samples(n_lhs, ("cons", idx, seed_shift))
        lhs_vals = circ_pair_on_torus(state.H, state.K, lat_k, phi[None, :] + xi,
                                      inner_n=inner_n, ctx=("cons-lhs", idx))
        lhs = float(lhs_vals.mean())
        nb = 16
        bm = lhs_vals[: (n_lhs // nb) * nb].reshape(nb, -1).mean(axis=1)
        lhs_err = float(bm.std(ddof=1) / np.sqrt(nb))

        dens_next = H_next.density(phi[None, :])
        rhs = 0.0
        rhs_err2 = 0.0
        Lam = whole_torus(lat_next)
        sub = Lam.bits
        while True:
            U = Polymer(lat_next, sub)
            rest = Polymer(lat_next, Lam.bits & ~sub)
            hval = dens_next[:, rest.sites()].sum(axis=1)[0] if not rest.is_empty() else 0.0
            v, e = K_next.eval_batch(U, phi[None, :],
                                     ctx=("cons-rhs", idx, seed_shift))
            rhs += np.exp(-hval) * float(v[0])
            rhs_err2 += (np.exp(-hval) * float(e[0])) ** 2
            if sub == 0:
                break
            sub = (sub - 1) & Lam.bits
        out.append((lhs - rhs, float(np.sqrt(lhs_err ** 2 + rhs_err2))))
    return out


# --------------------------------------------------------------------------
# linearized irrelevant map


def linearized_C(K_dot, U: Polymer, state: FlowState, data: StepData, phi):
    """C_k Kdot (U, phi): the K-block of the linearized step at (H, K) = (0, 0).

    Kdot must carry polynomial forms; the fluctuation integral is then Wick
    exact.
    """
    torus = state.torus
    layer = data.layer
    phi = np.asarray(phi, float)
    total = 0.0
    lat = block_lattice(torus, state.k)
    # single blocks with closure U: (1 - Pi2) R K
    for b in range(lat.nblocks):
        B = Polymer(lat, 1 << b)
        if closure(B).bits != U.bits:
            continue
        P = wick_convolve(K_dot.taylor(B), layer)
        RK = PolymerFunctional(torus, lambda X, v, P=P: P.eval(v),
                               taylor=lambda X, P=P: P)
        rel = pi2_project(RK, B)
        total += float(P.eval(phi[None, :])[0]) - rel.eval_block(B.sites(), phi[None, :])[0]
    # connected multi-block preimages: R K
    for X in data.preimages(U):
        comps = connected_components(X)
        if len(comps) != 1 or X.size < 2:
            continue
        P = wick_convolve(K_dot.taylor(X), layer)
        total += float(P.eval(phi[None, :])[0])
    return float(total)


def surrogate_K_norm(K, torus, scale, params_weights, seed=0, nprobe=2,
                     n_eval=2048):
    """Cheap size proxy for K: max over a small polymer panel and probe fields
    of |K| times the polymer penalty A^{|Y|}."""
    lat = block_lattice(torus, scale)
    o = int(lat.index_of(np.zeros(torus.d, dtype=int)))
    panel = [Polymer(lat, 1 << o)]
    if lat.nblocks > 1:
        nb = int(lat.index_of(np.asarray([1] + [0] * (torus.d - 1))))
        panel.append(Polymer(lat, (1 << o) | (1 << nb)))
    fields = [np.zeros(torus.nsites)]
    for i in range(nprobe):
        f = rngmod.normals(seed, (torus.nsites,), "probe", scale, i)
        fields.append(0.5 * (f - f.mean()))
    batch = np.stack(fields)
    out = 0.0
    for Y in panel:
        v, _ = K.eval_batch(Y, batch, ctx=("norm",), n_override=n_eval)
        out = max(out, float(np.abs(v).max()) * params_weights.A ** Y.size)
    return out
