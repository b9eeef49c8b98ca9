"""Discrete torus geometry, mean-zero fields and discrete difference calculus.

The torus of side ``L**N`` is represented by the centered cube
``{x : |x|_inf <= (L**N - 1)/2}`` with the periodic metric.  Sites are indexed
row-major over that cube; all field arrays are flat ``(..., nsites)`` (one
component) or ``(..., nsites, m)``.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import itertools

import numpy as np

MEAN_ZERO_TOL = 1e-12


class LatticeError(ValueError):
    pass


def multi_index_weight(beta):
    return sum(beta)


def _stencil(beta):
    """Offsets/weights of the iterated forward difference ``prod_j nabla_j^beta_j``.

    Returns a dict offset-tuple -> integer weight with
    ``(D^beta f)(x) = sum_o w_o f(x + o)``.
    """
    d = len(beta)
    st = {(0,) * d: 1.0}
    for j, power in enumerate(beta):
        for _ in range(power):
            new = {}
            for off, w in st.items():
                op = list(off)
                op[j] += 1
                op = tuple(op)
                new[op] = new.get(op, 0.0) + w
                new[off] = new.get(off, 0.0) - w
            st = {o: w for o, w in new.items() if w != 0.0}
    return st


@dataclass(frozen=True)
class TorusParams:
    """Geometry of the discrete torus and the difference-index bookkeeping."""

    L: int
    N: int
    d: int
    m: int = 1
    R0: int = 1
    r0: int = 3

    def __post_init__(self):
        if self.L < 3:
            raise LatticeError("block base L must be an integer >= 3")
        if self.L % 2 == 0:
            # centered-cube site indexing needs an odd side; see design notes
            raise LatticeError("block base L must be odd for the centered representation")
        if self.N < 1 or self.d < 2 or self.m < 1:
            raise LatticeError("need N >= 1, d >= 2, m >= 1")
        if self.R0 < 1 or self.r0 < 3:
            raise LatticeError("need R0 >= 1, r0 >= 3")

    @property
    def R(self):
        return max(self.R0, 2 * (self.d // 2) + 3)

    @property
    def side(self):
        return self.L ** self.N

    @property
    def nsites(self):
        return self.side ** self.d

    @property
    def halfwidth(self):
        return (self.side - 1) // 2

    def nearest_neighbour_indices(self):
        """The index set {e_1, ..., e_d}."""
        out = []
        for i in range(self.d):
            e = [0] * self.d
            e[i] = 1
            out.append(tuple(e))
        return out

    def full_index_set(self):
        """I_{R0}: all alpha != 0 with |alpha|_inf <= R0."""
        rng = range(0, self.R0 + 1)
        out = [a for a in itertools.product(rng, repeat=self.d) if any(a)]
        out.sort(key=lambda a: (sum(a), a))
        return out

    # -- site indexing -----------------------------------------------------

    @property
    def _shape(self):
        return (self.side,) * self.d

    def coords_array(self):
        """(nsites, d) array of canonical coordinates, row-major order."""
        return _coords_array(self.L, self.N, self.d)

    def index_of(self, coords):
        """Site index of canonical (or any periodic) coordinates."""
        coords = np.asarray(coords)
        shifted = np.mod(coords + self.halfwidth, self.side)
        return np.ravel_multi_index(tuple(np.moveaxis(shifted, -1, 0)), self._shape)

    def shift_index(self, offset):
        """Permutation p with (f shifted by offset)(x) = f[p][x], i.e. p[s] = index(x_s + offset)."""
        return _shift_index(self.L, self.N, self.d, tuple(int(o) for o in offset))

    def grad_matrix(self, beta):
        """Sparse action of D^beta as (offsets list, weights list) of shift permutations."""
        return _grad_data(self.L, self.N, self.d, tuple(int(b) for b in beta))

    def apply_grad(self, values, beta):
        """D^beta applied to arrays with site index on the last axis."""
        offs, wts = self.grad_matrix(beta)
        out = None
        for p, w in zip(offs, wts):
            term = w * np.take(values, p, axis=-1)
            out = term if out is None else out + term
        return out

    def apply_grad_star(self, values, beta):
        """Backward-difference analogue: prod_j (nabla_j^*)^beta_j."""
        out = None
        for off, w in _stencil(tuple(int(b) for b in beta)).items():
            p = self.shift_index(tuple(-x for x in off))
            term = w * np.take(values, p, axis=-1)
            out = term if out is None else out + term
        return out


@lru_cache(maxsize=None)
def _coords_array(L, N, d):
    side = L ** N
    half = (side - 1) // 2
    axes = [np.arange(side) - half for _ in range(d)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=-1)


@lru_cache(maxsize=None)
def _shift_index(L, N, d, offset):
    side = L ** N
    half = (side - 1) // 2
    coords = _coords_array(L, N, d)
    shifted = np.mod(coords + np.asarray(offset) + half, side)
    return np.ravel_multi_index(tuple(shifted.T), (side,) * d)


@lru_cache(maxsize=None)
def _grad_data(L, N, d, beta):
    st = _stencil(beta)
    offs = sorted(st.keys())
    perms = [_shift_index(L, N, d, o) for o in offs]
    wts = [st[o] for o in offs]
    return perms, np.asarray(wts)


def make_torus(L, N, d, m=1, R0=1, r0=3):
    """Construct torus geometry; rejects L < 3 and other bad parameters."""
    return TorusParams(L=L, N=N, d=d, m=m, R0=R0, r0=r0)


@dataclass
class Field:
    """A mean-zero field on the torus; values shaped (nsites, m)."""

    torus: TorusParams
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape != (self.torus.nsites, self.torus.m):
            raise LatticeError(f"field shape {v.shape} does not match torus")
        if not np.all(np.isfinite(v)):
            raise LatticeError("field values must be finite")
        sums = np.abs(v.sum(axis=0))
        if np.any(sums > MEAN_ZERO_TOL * max(1.0, np.abs(v).max()) * self.torus.nsites):
            raise LatticeError("field is not mean-zero; use project_zero_mean")
        self.values = v

    def flat(self):
        """One-component view (m = 1 only), shape (nsites,)."""
        if self.torus.m != 1:
            raise LatticeError("flat() requires m = 1")
        return self.values[:, 0]

    def to_csv(self):
        """Flat CSV: site coordinates then component values, row-major."""
        coords = self.torus.coords_array()
        header = ",".join([f"x{i+1}" for i in range(self.torus.d)]
                          + [f"phi{s+1}" for s in range(self.torus.m)])
        lines = [header]
        for c, v in zip(coords, self.values):
            lines.append(",".join(str(int(ci)) for ci in c) + ","
                         + ",".join(format(vi, ".17g") for vi in v))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(torus, text):
        rows = [r for r in text.strip().splitlines()[1:] if r]
        vals = np.zeros((torus.nsites, torus.m))
        for r in rows:
            parts = r.split(",")
            c = [int(x) for x in parts[: torus.d]]
            vals[torus.index_of(np.asarray(c))] = [float(x) for x in parts[torus.d:]]
        return Field(torus, vals)


def project_zero_mean(torus, raw):
    """Subtract the per-component mean; idempotent."""
    v = np.asarray(raw, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if not np.all(np.isfinite(v)):
        raise LatticeError("non-finite input")
    return Field(torus, v - v.mean(axis=0, keepdims=True))


@dataclass
class GradientVector:
    """Values of the extended gradient at one site: entries alpha -> R^m."""

    index_set: tuple
    entries: np.ndarray  # (len(index_set), m)

    def __getitem__(self, alpha):
        return self.entries[self.index_set.index(tuple(alpha))]


def extended_gradient(phi, x, index_set=None):
    """Extended gradient (D^alpha phi)(x) for alpha in the index set.

    ``x`` is a site index or canonical coordinate tuple.
    """
    torus = phi.torus
    if index_set is None:
        index_set = torus.nearest_neighbour_indices()
    index_set = tuple(tuple(a) for a in index_set)
    nn = set(torus.nearest_neighbour_indices())
    if not nn.issubset(index_set):
        raise LatticeError("index set must contain all unit vectors")
    full = set(torus.full_index_set())
    if not set(index_set).issubset(full):
        raise LatticeError("index set must be contained in I_R0")
    s = int(x) if np.isscalar(x) or isinstance(x, (int, np.integer)) else int(torus.index_of(np.asarray(x)))
    rows = []
    for alpha in index_set:
        g = torus.apply_grad(phi.values.T, alpha)  # (m, nsites)
        rows.append(g[:, s])
    return GradientVector(index_set, np.stack(rows, axis=0))


def gradient_coordinates(torus, values, index_set):
    """All extended-gradient coordinates at once.

    ``values``: (..., nsites) single-component arrays.  Returns an array of
    shape (..., nsites, len(index_set)) with entry alpha = D^alpha values.
    """
    cols = [torus.apply_grad(values, tuple(a)) for a in index_set]
    return np.stack(cols, axis=-1)


def hamiltonian_eval(U, phi, F=None, index_set=None):
    """H^F(phi) = sum_x U(D phi(x) + F_bar) for a deformation F (d-vector, m = 1).

    ``U`` maps arrays (..., |I|) -> (...); F enters through its extended
    gradient, which is F_i on the unit vectors and 0 on higher indices.
    """
    torus = phi.torus
    if torus.m != 1:
        raise LatticeError("hamiltonian_eval implemented for m = 1")
    if index_set is None:
        index_set = torus.nearest_neighbour_indices()
    z = gradient_coordinates(torus, phi.flat(), index_set)
    if F is not None:
        fbar = deformation_coordinates(F, index_set)
        z = z + fbar
    return float(np.sum(U(z)))


def deformation_coordinates(F, index_set):
    """Extended gradient of the linear profile x -> F.x (m = 1)."""
    F = np.asarray(F, dtype=float)
    out = np.zeros(len(index_set))
    for j, alpha in enumerate(index_set):
        if sum(alpha) == 1:
            out[j] = F[list(alpha).index(1)]
    return out
