"""Potential families, assumption validation, and the Mayer function.

Potentials act on the extended-gradient space (nearest-neighbour indices for
the families shipped here, so z has d components).  The shipped families:

* ``quadratic``: U(z) = z.Q z / 2.
* ``nonconvex_sine``: U(z) = z.Q z / 2 + amp * sin(freq * z_axis); genuinely
  non-convex for amp * freq**2 > 1 while keeping D^2 U(0) = Q (the sine has
  vanishing curvature at the origin) and, for moderate amplitudes, the global
  quadratic lower bound required of admissible perturbations.  Its Mayer
  factor grows exponentially along the softened direction, so Monte-Carlo
  tails are heavy; fine for validation, poor for production flows.
* ``nonconvex_bump``: U(z) = z.Q z / 2 + amp * z_axis^4 exp(-z_axis^2/width^2);
  the perturbation is nonnegative and second-order flat at the origin, so the
  Mayer factor is bounded in (-1, 0] while the curvature still goes negative.
  This is the default family for flow experiments.
"""

from dataclasses import dataclass, field
import itertools
import math

import numpy as np


class PotentialError(ValueError):
    pass


class Potential:
    dim = None

    def eval(self, z):
        raise NotImplementedError

    def grad(self, z):
        raise NotImplementedError

    def hess(self, z):
        raise NotImplementedError

    def psi_bound(self, t, order_top):
        """Upper bound for sum_{3<=|a|<=order_top} |d^a U(z)| / a! over |z| <= t."""
        raise NotImplementedError

    def __call__(self, z):
        return self.eval(np.asarray(z, float))


class Quadratic(Potential):
    def __init__(self, Q):
        self.Q = np.asarray(Q, float)
        self.dim = self.Q.shape[0]

    def eval(self, z):
        return 0.5 * np.einsum("...i,ij,...j->...", z, self.Q, z)

    def grad(self, z):
        return z @ self.Q

    def hess(self, z):
        shape = np.asarray(z).shape[:-1]
        return np.broadcast_to(self.Q, shape + self.Q.shape).copy()

    def psi_bound(self, t, order_top):
        return np.zeros_like(np.asarray(t, float))


class NonconvexSine(Potential):
    def __init__(self, dim, amp=0.08, freq=4.0, axis=0, Q=None):
        self.dim = dim
        self.amp = float(amp)
        self.freq = float(freq)
        self.axis = int(axis)
        self.Q = np.eye(dim) if Q is None else np.asarray(Q, float)

    def eval(self, z):
        quad = 0.5 * np.einsum("...i,ij,...j->...", z, self.Q, z)
        return quad + self.amp * np.sin(self.freq * z[..., self.axis])

    def grad(self, z):
        out = z @ self.Q
        out = np.array(out, float, copy=True)
        out[..., self.axis] += self.amp * self.freq * np.cos(self.freq * z[..., self.axis])
        return out

    def hess(self, z):
        shape = np.asarray(z).shape[:-1]
        H = np.broadcast_to(self.Q, shape + self.Q.shape).copy()
        H[..., self.axis, self.axis] += (-self.amp * self.freq ** 2
                                         * np.sin(self.freq * z[..., self.axis]))
        return H

    def psi_bound(self, t, order_top):
        # all derivatives of order n >= 3 are bounded by amp * freq^n
        total = sum(self.amp * self.freq ** n / math.factorial(n)
                    for n in range(3, order_top + 1))
        return np.full_like(np.asarray(t, float), total)


class NonconvexBump(Potential):
    """U(z) = z.Q z / 2 + amp * z_axis^4 exp(-z_axis^2 / width^2).

    The bump vanishes to second order at the origin (D^2 U(0) = Q) and is
    nonnegative, so the induced Mayer function stays in (-1, 0]; curvature
    along the axis dips below zero once amp * width^2 > 1/2.16 or so.
    """

    def __init__(self, dim, amp=0.6, width=1.0, axis=0, Q=None):
        self.dim = dim
        self.amp = float(amp)
        self.width = float(width)
        self.axis = int(axis)
        self.Q = np.eye(dim) if Q is None else np.asarray(Q, float)

    def _bump(self, t):
        return self.amp * t ** 4 * np.exp(-((t / self.width) ** 2))

    def eval(self, z):
        quad = 0.5 * np.einsum("...i,ij,...j->...", z, self.Q, z)
        return quad + self._bump(z[..., self.axis])

    def grad(self, z):
        out = np.array(z @ self.Q, float, copy=True)
        t = z[..., self.axis]
        w2 = self.width ** 2
        out[..., self.axis] += self.amp * np.exp(-(t ** 2) / w2) \
            * (4 * t ** 3 - 2 * t ** 5 / w2)
        return out

    def hess(self, z):
        shape = np.asarray(z).shape[:-1]
        H = np.broadcast_to(self.Q, shape + self.Q.shape).copy()
        t = z[..., self.axis]
        w2 = self.width ** 2
        H[..., self.axis, self.axis] += self.amp * np.exp(-(t ** 2) / w2) * (
            12 * t ** 2 - 18 * t ** 4 / w2 + 4 * t ** 6 / w2 ** 2)
        return H

    def psi_bound(self, t, order_top):
        # derivatives of t^4 e^{-t^2/w^2} are globally bounded; crude uniform cap
        total = sum(self.amp * (6.0 / self.width) ** n / math.factorial(n)
                    for n in range(3, order_top + 1))
        return np.full_like(np.asarray(t, float), total)


FAMILIES = {}


def register_family(name, builder):
    FAMILIES[name] = builder


register_family("quadratic", lambda d, params: Quadratic(
    np.asarray(params.get("Q", np.eye(d)), float)))
register_family("nonconvex_sine", lambda d, params: NonconvexSine(
    d, amp=params.get("amp", 0.08), freq=params.get("freq", 4.0),
    axis=params.get("axis", 0),
    Q=np.asarray(params.get("Q", np.eye(d)), float)))
register_family("nonconvex_bump", lambda d, params: NonconvexBump(
    d, amp=params.get("amp", 0.6), width=params.get("width", 1.0),
    axis=params.get("axis", 0),
    Q=np.asarray(params.get("Q", np.eye(d)), float)))


def build_potential(family, d, params=None):
    if family not in FAMILIES:
        raise PotentialError(f"unknown potential family {family!r}")
    return FAMILIES[family](d, params or {})


@dataclass
class PotentialSpec:
    """Potential plus the constants entering the admissibility assumptions."""

    potential: Potential
    omega0: float = 0.8
    omega: float = 0.04
    r0: int = 3
    r1: int = 2
    delta: float = 0.25  # radius of the validated deformation ball
    family: str = ""
    params: dict = field(default_factory=dict)

    @property
    def Q_U(self):
        z0 = np.zeros(self.potential.dim)
        return self.potential.hess(z0)


def probe_grid(dim, radius, n):
    axes = [np.linspace(-radius, radius, n)] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def validate_potential(spec: PotentialSpec, grid_radius=6.0, grid_n=41):
    """Check the admissibility assumptions on a probe grid.

    Returns a report dict with ``ok`` plus a witness point for any violated
    bound; also tabulates the growth trend t^{-2} log Psi(t).
    """
    pot = spec.potential
    d = pot.dim
    report = {"ok": True, "failures": [], "omega0": spec.omega0, "omega": spec.omega}

    QU = spec.Q_U
    eigs = np.linalg.eigvalsh(QU)
    report["Q_U_eigs"] = [float(e) for e in eigs]
    if eigs.min() < spec.omega0 - 1e-12 or eigs.max() > 1.0 / spec.omega0 + 1e-12:
        report["ok"] = False
        report["failures"].append({"bound": "omega0 spectral", "eigs": list(map(float, eigs))})

    if not (0 < spec.omega < spec.omega0 / 8):
        report["ok"] = False
        report["failures"].append({"bound": "omega < omega0/8",
                                   "omega": spec.omega, "omega0": spec.omega0})

    z = probe_grid(d, grid_radius, grid_n)
    z0 = np.zeros(d)
    lhs = pot.eval(z) - z @ pot.grad(z0) - pot.eval(z0)
    rhs = spec.omega * np.sum(z ** 2, axis=-1)
    bad = lhs < rhs - 1e-12
    if np.any(bad):
        w = z[np.argmax(rhs - lhs)]
        report["ok"] = False
        report["failures"].append({"bound": "omega lower bound",
                                   "witness": [float(x) for x in w],
                                   "gap": float((rhs - lhs).max())})

    ts = np.array([grid_radius * s for s in (0.25, 0.5, 1.0, 2.0, 4.0)])
    psi = np.maximum(pot.psi_bound(ts, spec.r0 + spec.r1), 1e-300)
    report["psi_trend"] = [{"t": float(t), "t2_log_psi": float(np.log(p) / t ** 2)}
                           for t, p in zip(ts, psi)]
    trend = [row["t2_log_psi"] for row in report["psi_trend"]]
    report["psi_trend_ok"] = bool(trend[-1] <= max(trend[0], 0.0) + 1e-12)
    return report


@dataclass
class MayerFunction:
    """Per-site perturbative factor K(z) = exp(-beta Ubar(z/sqrt(beta), F)) - 1."""

    spec: PotentialSpec
    F: np.ndarray
    beta: float
    zeta_tilde: float = 0.5

    def __post_init__(self):
        self.F = np.asarray(self.F, float)
        pot = self.spec.potential
        if self.F.shape != (pot.dim,):
            raise PotentialError("deformation must be a d-vector (m = 1)")
        if np.linalg.norm(self.F) >= self.spec.delta:
            raise PotentialError("deformation outside the validated delta-ball")
        self.QU = self.spec.Q_U
        self._U_F = float(pot.eval(self.F))
        self._DU_F = pot.grad(self.F)
        self.clamped = False

    def ubar(self, y):
        pot = self.spec.potential
        return (pot.eval(y + self.F) - self._U_F - y @ self._DU_F
                - 0.5 * np.einsum("...i,ij,...j->...", y, self.QU, y))

    def log1p_eval(self, z):
        """g(z) with K = e^g - 1; clamped at +-700 (clamps are recorded)."""
        g = -self.beta * self.ubar(np.asarray(z, float) / np.sqrt(self.beta))
        if np.any(np.abs(g) > 700.0):
            self.clamped = True
            g = np.clip(g, -700.0, 700.0)
        return g

    def eval(self, z):
        return np.expm1(self.log1p_eval(z))

    __call__ = eval

    def grad_g(self, z):
        """Gradient of g(z) = -beta Ubar(z/sqrt(beta))."""
        z = np.asarray(z, float)
        y = z / np.sqrt(self.beta)
        pot = self.spec.potential
        dub = pot.grad(y + self.F) - self._DU_F - y @ self.QU
        return -np.sqrt(self.beta) * dub

    def hess_g(self, z):
        z = np.asarray(z, float)
        y = z / np.sqrt(self.beta)
        return -(self.spec.potential.hess(y + self.F) - self.QU)


def mayer_build(spec: PotentialSpec, F, beta, zeta_tilde=0.5, validate=True):
    """Construct the Mayer function; the potential must pass validation."""
    if validate:
        rep = validate_potential(spec)
        if not rep["ok"]:
            raise PotentialError(f"potential fails admissibility: {rep['failures']}")
    return MayerFunction(spec, np.asarray(F, float), float(beta), zeta_tilde)


def mayer_norm(K: MayerFunction, zeta=None, grid_radius=4.0, grid_n=33, r0=None):
    """Surrogate for the weighted C^{r0} norm of the Mayer function.

    sup over a probe grid of sum_{|a| <= r0} |d^a K(z)| / a! weighted by
    exp(-(1-zeta) Q(z) / 2); derivatives by nested central differences.
    """
    d = K.spec.potential.dim
    zeta = K.zeta_tilde if zeta is None else zeta
    r0 = K.spec.r0 if r0 is None else r0
    h = 2.0 * grid_radius / (grid_n - 1)
    z = probe_grid(d, grid_radius, grid_n)
    vals = K.eval(z).reshape((grid_n,) * d)

    def diff(arr, axis):
        out = np.zeros_like(arr)
        sl_p = [slice(None)] * d
        sl_m = [slice(None)] * d
        sl_c = [slice(None)] * d
        sl_p[axis], sl_m[axis], sl_c[axis] = slice(2, None), slice(0, -2), slice(1, -1)
        out[tuple(sl_c)] = (arr[tuple(sl_p)] - arr[tuple(sl_m)]) / (2 * h)
        return out

    total = np.zeros_like(vals)
    for alpha in itertools.product(range(r0 + 1), repeat=d):
        if sum(alpha) > r0:
            continue
        arr = vals
        for ax, p in enumerate(alpha):
            for _ in range(p):
                arr = diff(arr, ax)
        fact = 1.0
        for a in alpha:
            fact *= math.factorial(a)
        total += np.abs(arr) / fact
    q = 0.5 * np.einsum("...i,ij,...j->...", z, K.QU, z).reshape((grid_n,) * d)
    weighted = total * np.exp(-(1.0 - zeta) * q)
    # trim the boundary ring where the stencils are one-sided zeros
    core = weighted[(slice(r0, -r0),) * d]
    return float(core.max())
