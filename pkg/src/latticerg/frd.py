"""Elliptic gradient operators, their Green kernels, and the finite-range
decomposition of the covariance.

Construction recipe
-------------------
Write the covariance spectrally, C = 1/lambda over the nonzero Fourier modes
of A.  Expand 1/lambda in the geometric (Neumann) series

    1/lambda = (1/Lam) sum_{j>=0} (1 - lambda/Lam)^j,   0 < lambda <= Lam,

and group consecutive powers into degree bands: band k collects the degrees
j in (D_{k-1}, D_k] with D_k = (L^k - 1)/2 (band 1 also takes j = 0).  A
degree-j polynomial in a range-1 operator has kernel range j, so the band-k
kernel vanishes beyond |x|_inf <= D_k < L^k/2; excluding the zero mode shifts
it by the constant -M_k with M_k = g_k(0) / L^{Nd}.  Each band is pointwise
nonnegative on [0, Lam] (every term is), partial sums stay below 1/lambda,
and the exact residual goes to the final slice C_{N,N}.  All required slice
properties therefore hold at machine precision, with no PSD repair step; the
remaining approximation quality (how much mass early slices capture) is
reported by verify_decomposition, never assumed.

The uniform bound Lam is computed from Q alone (with the |q| <= 1/2 margin),
which makes the band polynomials, hence the constants M_k, independent of q
and of the torus size exactly.
"""

from dataclasses import dataclass, field
import itertools

import numpy as np

from .lattice import TorusParams

PSD_TOL = 1e-10
SUM_TOL = 1e-10
RANGE_TOL = 1e-10


class SpectralError(ValueError):
    pass


def _mode_grid(torus):
    p = 2.0 * np.pi * np.fft.fftfreq(torus.side)
    axes = np.meshgrid(*([p] * torus.d), indexing="ij")
    return axes


def operator_symbol(torus, M):
    """Symbol of sum_ij M_ij nabla_j^* nabla_i (m = 1): lambda(p) >= 0."""
    axes = _mode_grid(torus)
    lam_i = [np.exp(1j * a) - 1.0 for a in axes]
    out = np.zeros((torus.side,) * torus.d)
    for i in range(torus.d):
        for j in range(torus.d):
            if M[i, j] != 0.0:
                out += M[i, j] * np.real(lam_i[i] * np.conj(lam_i[j]))
    return out


@dataclass
class EllipticOperator:
    """A^q = sum_ij (Q_ij - q_ij) nabla_j^* nabla_i on mean-zero fields."""

    torus: TorusParams
    Q: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        d = self.torus.d
        self.Q = np.asarray(self.Q, float).reshape(d, d)
        self.q = np.asarray(self.q, float).reshape(d, d)
        if not np.allclose(self.Q, self.Q.T) or not np.allclose(self.q, self.q.T):
            raise SpectralError("Q and q must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() <= 0:
            raise SpectralError("Q must be positive definite")
        if np.linalg.norm(self.q, 2) > 0.5 + 1e-12:
            raise SpectralError("perturbation too large: need |q| <= 1/2")

    @property
    def M(self):
        return self.Q - self.q

    def symbol(self):
        return operator_symbol(self.torus, self.M)

    def apply(self, values):
        """Real-space action on (..., nsites) arrays via difference stencils."""
        t = self.torus
        out = np.zeros_like(np.asarray(values, float))
        for i in range(t.d):
            ei = tuple(1 if a == i else 0 for a in range(t.d))
            gi = t.apply_grad(values, ei)
            for j in range(t.d):
                if self.M[i, j] == 0.0:
                    continue
                # nabla_j^* f(x) = f(x - e_j) - f(x)
                pj = t.shift_index(tuple(-1 if a == j else 0 for a in range(t.d)))
                out += self.M[i, j] * (np.take(gi, pj, axis=-1) - gi)
        return out

    def quadratic_form(self, values):
        """(phi, A phi) computed by direct summation of the gradient form."""
        t = self.torus
        g = [t.apply_grad(values, tuple(1 if a == i else 0 for a in range(t.d)))
             for i in range(t.d)]
        out = 0.0
        for i in range(t.d):
            for j in range(t.d):
                out += self.M[i, j] * np.sum(g[j] * g[i], axis=-1)
        return out


def assemble_operator(Q, q, torus):
    return EllipticOperator(torus, Q, q)


@dataclass
class Kernel:
    """Translation-invariant kernel on the torus.

    ``grid`` follows the centered site layout (flat index = site index of the
    offset), so difference stencils apply directly; spectral operations roll
    to FFT layout internally.
    """

    torus: TorusParams
    grid: np.ndarray = field(repr=False)  # shape (side,)*d, centered layout

    def _fft_layout(self):
        h = self.torus.halfwidth
        return np.roll(self.grid, (-h,) * self.torus.d, axis=range(self.torus.d))

    def symbol(self):
        return np.real(np.fft.fftn(self._fft_layout()))

    def flat(self):
        return self.grid.reshape(-1)

    def entry(self, offset):
        return float(self.flat()[self.torus.index_of(np.asarray(offset))])

    def total(self):
        return float(self.grid.sum())

    def apply(self, values):
        """Convolution action on (..., nsites) arrays (via FFT)."""
        t = self.torus
        values = np.asarray(values, float)
        shp = values.shape[:-1] + (t.side,) * t.d
        f = np.fft.fftn(values.reshape(shp), axes=range(-t.d, 0))
        f *= np.fft.fftn(self._fft_layout())
        out = np.real(np.fft.ifftn(f, axes=range(-t.d, 0)))
        return out.reshape(values.shape)

    def plus(self, other):
        return Kernel(self.torus, self.grid + other.grid)

    def grad_grad_entry(self, i, j, offset):
        """(nabla_i nabla_j^* K)(offset): covariance of forward gradients."""
        t = self.torus
        gi = t.apply_grad(self.flat(), tuple(1 if a == i else 0 for a in range(t.d)))
        pj = t.shift_index(tuple(-1 if a == j else 0 for a in range(t.d)))
        gij = np.take(gi, pj) - gi
        return float(gij[t.index_of(np.asarray(offset))])


def kernel_from_symbol(torus, sym):
    h = torus.halfwidth
    grid = np.roll(np.real(np.fft.ifftn(sym)), (h,) * torus.d, axis=range(torus.d))
    return Kernel(torus, grid)


def green_kernel(A: EllipticOperator):
    """Green kernel of A on the mean-zero subspace, normalized to sum 0."""
    sym = A.symbol()
    flat = sym.ravel()
    nz = np.ones(flat.shape, bool)
    nz[0] = False
    if flat[nz].min() <= 1e-12 * max(1.0, flat.max()):
        raise SpectralError("operator is singular on the mean-zero subspace")
    inv = np.zeros_like(flat)
    inv[nz] = 1.0 / flat[nz]
    return kernel_from_symbol(A.torus, inv.reshape(sym.shape))


def uniform_symbol_bound(torus, Q, q_margin=0.5):
    """q-independent upper bound for the symbol: 4 d (|Q| + margin)."""
    return 4.0 * torus.d * (np.linalg.norm(np.asarray(Q, float), 2) + q_margin)


def band_degree_bounds(L, k):
    lo = 0 if k == 1 else (L ** (k - 1) - 1) // 2 + 1
    hi = (L ** k - 1) // 2
    return lo, hi


def _band_value(L, k, lam, Lam):
    """g_k(lambda): the band-k chunk of the Neumann series, evaluated pointwise."""
    lo, hi = band_degree_bounds(L, k)
    t = 1.0 - lam / Lam
    # sum_{j=lo..hi} t^j = t^lo (1 - t^{hi-lo+1}) / (1 - t); stable direct sum
    out = np.zeros_like(np.asarray(lam, float))
    tp = t ** lo
    for _ in range(lo, hi + 1):
        out += tp
        tp = tp * t
    return out / Lam


@dataclass
class FRDecomposition:
    """Slices C_1 ... C_{N-1}, C_{N,N} with constants M_k >= 0."""

    torus: TorusParams
    slices: list  # of Kernel, length N
    M: list  # of float (m = 1), length N-1
    lam_max: float

    @property
    def N(self):
        return self.torus.N

    def layer_kernel(self, step):
        """Covariance used by the integration step k -> k+1 (step = k, 0-based)."""
        return self.slices[step]

    def export_json(self):
        import json

        t = self.torus
        coords = t.coords_array()
        out = {"L": t.L, "N": t.N, "d": t.d, "lam_max": self.lam_max,
               "M": [float(m) for m in self.M], "slices": []}
        for K in self.slices:
            flat = K.grid.reshape(-1)
            tab = {}
            for s in range(t.nsites):
                off = tuple(int(x) for x in coords[s])
                v = float(flat[t.index_of(np.asarray(off))])
                tab[",".join(map(str, off))] = v
            out["slices"].append(tab)
        return json.dumps(out, sort_keys=True)


def decompose_operator(A: EllipticOperator, lam_max=None):
    """Finite-range decomposition of A's Green kernel via Neumann bands."""
    torus = A.torus
    L, N = torus.L, torus.N
    if lam_max is None:
        lam_max = uniform_symbol_bound(torus, A.Q)
    sym = A.symbol()
    flat = sym.ravel()
    if flat.max() > lam_max + 1e-12:
        raise SpectralError("symbol exceeds the configured uniform bound")
    nz = np.ones(flat.shape, bool)
    nz[0] = False
    if flat[nz].min() <= 1e-12 * max(1.0, flat.max()):
        raise SpectralError("operator is singular on the mean-zero subspace")
    ginv = np.zeros_like(flat)
    ginv[nz] = 1.0 / flat[nz]

    slices = []
    consts = []
    acc = np.zeros_like(flat)
    for k in range(1, N):
        band = _band_value(L, k, flat, lam_max)
        band[0] = 0.0  # zero mode excluded
        band[nz] = np.maximum(band[nz], 0.0)  # clip roundoff only; bands are >= 0
        slices.append(kernel_from_symbol(torus, band.reshape(sym.shape)))
        consts.append(float(_band_value(L, k, 0.0, lam_max)) / torus.nsites)
        acc += band
    last = ginv - acc
    last[0] = 0.0
    slices.append(kernel_from_symbol(torus, last.reshape(sym.shape)))
    frd = FRDecomposition(torus, slices, consts, float(lam_max))
    _check_construction(frd, ginv.reshape(sym.shape))
    return frd


def _check_construction(frd, ginv_sym):
    rep = verify_decomposition(frd, kernel_from_symbol(frd.torus, ginv_sym),
                               frd.torus.L, frd.torus.N)
    if not rep["ok"]:
        raise SpectralError(f"decomposition failed its own tolerances: {rep}")


def decompose(C: Kernel, L, N):
    """Spec surface: decompose a Green kernel directly.

    The uniform spectral bound is extracted from the kernel and quantized to
    the next power of two so that small measure perturbations cannot move it;
    exact q-independence of the M_k holds whenever the bound bucket agrees
    (decompose_operator guarantees it by construction from Q).
    """
    torus = C.torus
    if (L, N) != (torus.L, torus.N):
        raise SpectralError("kernel lives on a different torus")
    sym = C.symbol().ravel()
    nz = np.ones(sym.shape, bool)
    nz[0] = False
    if np.any(sym[nz] <= 0):
        raise SpectralError("kernel is not positive definite on mean-zero fields")
    lam = np.zeros_like(sym)
    lam[nz] = 1.0 / sym[nz]
    lam_max = 2.0 ** np.ceil(np.log2(1.5 * lam[nz].max()))
    A_sym = lam.reshape(C.grid.shape)

    # reuse the operator path through a thin shim
    class _Shim:
        torus = C.torus
        Q = np.eye(C.torus.d)

        def symbol(self):
            return A_sym

    return decompose_operator(_Shim(), lam_max=lam_max)


def verify_decomposition(frd: FRDecomposition, C: Kernel, L, N):
    """Residual report: exact resummation, slice positivity, finite range,
    and the empirical scaling table against L^{-(k-1)(d-2+|alpha|)}."""
    torus = frd.torus
    d = torus.d
    report = {"sum_residual": None, "min_eigenvalues": [], "range_residuals": [],
              "M": [float(m) for m in frd.M], "scaling": [], "ok": True}

    total = frd.slices[0]
    for K in frd.slices[1:]:
        total = total.plus(K)
    # compare as operators on mean-zero fields: match symbols off the zero mode
    diff_sym = (total.symbol() - C.symbol()).ravel()
    diff_sym[0] = 0.0
    report["sum_residual"] = float(np.abs(diff_sym).max()) / max(1.0, np.abs(C.grid).max())

    coords = torus.coords_array()
    for k, K in enumerate(frd.slices, start=1):
        sym = K.symbol().ravel()  # zero mode sits at flat position 0
        report["min_eigenvalues"].append(float(sym[1:].min()))
        if k <= N - 1:
            far = np.abs(coords).max(axis=1) >= L ** k / 2.0
            vals = K.flat()[far]
            report["range_residuals"].append(float(np.abs(vals + frd.M[k - 1]).max()))

    for k, K in enumerate(frd.slices, start=1):
        for alpha in [tuple([0] * d)] + [tuple(1 if i == j else 0 for i in range(d))
                                         for j in range(d)]:
            a = sum(alpha)
            g = torus.apply_grad(K.grid.reshape(-1), alpha) if a else K.grid.reshape(-1)
            sup = float(np.abs(g).max())
            ref = L ** (-(k - 1) * (d - 2 + a))
            if d + a == 2:
                ref *= np.log(L)
            report["scaling"].append({"k": k, "alpha": list(alpha), "sup": sup,
                                      "reference": ref, "ratio": sup / ref})

    report["ok"] = (report["sum_residual"] <= SUM_TOL
                    and all(m >= -PSD_TOL for m in report["min_eigenvalues"])
                    and all(r <= RANGE_TOL for r in report["range_residuals"])
                    and all(m >= 0.0 for m in report["M"]))
    return report


def n_independence_residual(torus_small, torus_big, Q, q):
    """max |grad grad^* C_k^N - grad grad^* C_k^N'| over the common window."""
    A_s = EllipticOperator(torus_small, Q, q)
    A_b = EllipticOperator(torus_big, Q, q)
    f_s = decompose_operator(A_s)
    f_b = decompose_operator(A_b)
    out = 0.0
    d = torus_small.d
    half = torus_small.halfwidth
    window = [c for c in itertools.product(range(-half // 2, half // 2 + 1), repeat=d)]
    for k in range(1, torus_small.N):
        Ks, Kb = f_s.slices[k - 1], f_b.slices[k - 1]
        for i in range(d):
            for j in range(d):
                for off in window:
                    out = max(out, abs(Ks.grad_grad_entry(i, j, off)
                                       - Kb.grad_grad_entry(i, j, off)))
    return out
