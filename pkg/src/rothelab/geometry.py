"""Moving-domain geometry: deformations of a reference rectangle and their metrics.

Conventions used throughout the package
---------------------------------------
* The reference domain is the rectangle (0, L) x (0, 1) with coordinates
  ``x = (z, r)``.  Physical configurations are images ``Phi(t, x)`` of the
  reference rectangle under a time-dependent bi-Lipschitz deformation.
* Points are passed around as float arrays of shape ``(n, 2)``.
* ``jacobian`` means the matrix ``F = dPhi/dx`` (shape ``(n, 2, 2)``),
  ``det`` its determinant, and ``G = F^{-T}`` the *transformed-gradient*
  coefficients: for a scalar ``f`` with pullback ``fh = f o Phi``,
  ``grad f = G @ grad fh``.  Everything downstream (weighted divergence,
  deformed viscous forms, H^1 norms on the moving domain) is written in
  terms of ``(det, G)`` evaluated at quadrature points.
* Two prescribed motion families are provided:

  - ``ShearMotion``: (x, y) -> (x + g(t) y, y), volume preserving with
    det F = 1 exactly; the domain slides into a parallelogram.
  - ``ChannelMotion``: (z, r) -> (z, (R + eta(t, z)) r) for a prescribed
    interface displacement eta; det F = R + eta.

  ``EvolvedMotion`` wraps a displacement table produced by the coupled
  solver so trajectories can be fed back through the same geometry API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ReferenceDomain",
    "ShearMotion",
    "ChannelMotion",
    "EvolvedMotion",
    "AleMap",
    "LipschitzData",
    "DomainEnvelope",
    "ale_apply",
    "ale_inverse",
    "ale_jacobian_and_gradient",
    "estimate_lipschitz",
    "shrunk_domain_inclusion",
    "envelope",
]


# ──────────────────────────────────────────────────────────────────────
#  reference domain and motions
# ──────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ReferenceDomain:
    """The fixed reference rectangle (0, L) x (0, 1), plus the base radius R.

    R enters only through channel-type maps (physical height R + eta); the
    shear family ignores it.
    """

    L: float = 1.0
    R: float = 1.0

    def contains(self, pts, tol=0.0):
        """Boolean mask of points inside the closed rectangle (with slack tol)."""
        pts = np.asarray(pts, float)
        return (
            (pts[:, 0] >= -tol)
            & (pts[:, 0] <= self.L + tol)
            & (pts[:, 1] >= -tol)
            & (pts[:, 1] <= 1.0 + tol)
        )


class ShearMotion:
    """Volume-preserving shear (x, y) -> (x + g(t) * y, y), g(t) = amp*sin(omega*t + phase).

    det(grad Phi) == 1 identically, so reference-rectangle quadrature weights
    carry over to the physical parallelogram unchanged.
    """

    is_volume_preserving = True
    kind = "shear"

    def __init__(self, domain: ReferenceDomain, amp=0.1, omega=1.0, phase=0.0):
        self.domain = domain
        self.amp = float(amp)
        self.omega = float(omega)
        self.phase = float(phase)

    def g(self, t):
        return self.amp * math.sin(self.omega * t + self.phase)

    def gdot(self, t):
        return self.amp * self.omega * math.cos(self.omega * t + self.phase)

    def map(self, t, pts):
        pts = np.asarray(pts, float)
        out = pts.copy()
        out[:, 0] += self.g(t) * pts[:, 1]
        return out

    def inverse(self, t, pts):
        pts = np.asarray(pts, float)
        out = pts.copy()
        out[:, 0] -= self.g(t) * pts[:, 1]
        return out

    def jacobian(self, t, pts):
        n = len(np.asarray(pts))
        F = np.tile(np.eye(2), (n, 1, 1))
        F[:, 0, 1] = self.g(t)
        return F

    def velocity(self, t, pts):
        """d/dt Phi(t, x) at fixed reference points."""
        pts = np.asarray(pts, float)
        out = np.zeros_like(pts)
        out[:, 0] = self.gdot(t) * pts[:, 1]
        return out

    def bounding_box(self, t_max):
        """Axis-aligned box containing Phi(t, Omega) for all |t| <= t_max."""
        a = self.amp  # |g| <= amp regardless of t
        return (min(0.0, -a), self.domain.L + a, 0.0, 1.0)


class ChannelMotion:
    """Prescribed channel dilation (z, r) -> (z, (R + eta(t, z)) r).

    eta(t, z) = amp * sin(pi * mode * z / L) * sin(omega * t) vanishes at both
    ends for every mode, so the lateral walls stay flat.
    """

    is_volume_preserving = False
    kind = "channel"

    def __init__(self, domain: ReferenceDomain, amp=0.2, omega=1.0, mode=1):
        self.domain = domain
        self.amp = float(amp)
        self.omega = float(omega)
        self.mode = int(mode)
        if self.amp <= -domain.R:
            raise ValueError(f"amp={amp} would collapse the channel (R={domain.R})")

    def eta(self, t, z):
        z = np.asarray(z, float)
        return self.amp * np.sin(math.pi * self.mode * z / self.domain.L) * math.sin(self.omega * t)

    def eta_z(self, t, z):
        z = np.asarray(z, float)
        k = math.pi * self.mode / self.domain.L
        return self.amp * k * np.cos(k * z) * math.sin(self.omega * t)

    def eta_t(self, t, z):
        z = np.asarray(z, float)
        return self.amp * np.sin(math.pi * self.mode * z / self.domain.L) * self.omega * math.cos(self.omega * t)

    def map(self, t, pts):
        pts = np.asarray(pts, float)
        out = pts.copy()
        out[:, 1] = (self.domain.R + self.eta(t, pts[:, 0])) * pts[:, 1]
        return out

    def inverse(self, t, pts):
        pts = np.asarray(pts, float)
        out = pts.copy()
        out[:, 1] = pts[:, 1] / (self.domain.R + self.eta(t, pts[:, 0]))
        return out

    def jacobian(self, t, pts):
        pts = np.asarray(pts, float)
        n = len(pts)
        F = np.tile(np.eye(2), (n, 1, 1))
        F[:, 1, 0] = self.eta_z(t, pts[:, 0]) * pts[:, 1]
        F[:, 1, 1] = self.domain.R + self.eta(t, pts[:, 0])
        return F

    def velocity(self, t, pts):
        pts = np.asarray(pts, float)
        out = np.zeros_like(pts)
        out[:, 1] = self.eta_t(t, pts[:, 0]) * pts[:, 1]
        return out

    def bounding_box(self, t_max):
        return (0.0, self.domain.L, 0.0, self.domain.R + abs(self.amp))


class EvolvedMotion:
    """Channel-type motion backed by a displacement table from a coupled run.

    eta_table has shape (n_steps + 1, nz + 1): row n is the interface
    displacement at time n*dt on uniform z-nodes.  Between nodes the
    displacement is piecewise linear; between time levels, linear as well
    (queries in this package land exactly on step times).
    """

    is_volume_preserving = False
    kind = "evolved"

    def __init__(self, domain: ReferenceDomain, eta_table, dt):
        self.domain = domain
        self.eta_table = np.asarray(eta_table, float)
        self.dt = float(dt)
        self.nz = self.eta_table.shape[1] - 1
        self.z_nodes = np.linspace(0.0, domain.L, self.nz + 1)

    def _row(self, t):
        """Time-interpolated displacement row (weights of the two bracketing levels)."""
        s = t / self.dt
        n0 = int(np.clip(math.floor(s + 1e-12), 0, self.eta_table.shape[0] - 1))
        n1 = min(n0 + 1, self.eta_table.shape[0] - 1)
        w = np.clip(s - n0, 0.0, 1.0)
        return (1.0 - w) * self.eta_table[n0] + w * self.eta_table[n1]

    def eta(self, t, z):
        return np.interp(np.asarray(z, float), self.z_nodes, self._row(t))

    def eta_z(self, t, z):
        row = self._row(t)
        # derivative of the piecewise-linear interpolant, averaged onto nodes
        hz = self.z_nodes[1] - self.z_nodes[0]
        slopes = np.diff(row) / hz                      # per-interval
        node_slope = np.empty_like(row)
        node_slope[1:-1] = 0.5 * (slopes[:-1] + slopes[1:])
        node_slope[0] = slopes[0]
        node_slope[-1] = slopes[-1]
        return np.interp(np.asarray(z, float), self.z_nodes, node_slope)

    def eta_t(self, t, z):
        n = int(round(t / self.dt))
        n = np.clip(n, 0, self.eta_table.shape[0] - 1)
        lo = max(n - 1, 0)
        hi = min(n + 1, self.eta_table.shape[0] - 1)
        row = (self.eta_table[hi] - self.eta_table[lo]) / ((hi - lo) * self.dt)
        return np.interp(np.asarray(z, float), self.z_nodes, row)

    def map(self, t, pts):
        pts = np.asarray(pts, float)
        out = pts.copy()
        out[:, 1] = (self.domain.R + self.eta(t, pts[:, 0])) * pts[:, 1]
        return out

    def inverse(self, t, pts):
        pts = np.asarray(pts, float)
        out = pts.copy()
        out[:, 1] = pts[:, 1] / (self.domain.R + self.eta(t, pts[:, 0]))
        return out

    def jacobian(self, t, pts):
        pts = np.asarray(pts, float)
        n = len(pts)
        F = np.tile(np.eye(2), (n, 1, 1))
        F[:, 1, 0] = self.eta_z(t, pts[:, 0]) * pts[:, 1]
        F[:, 1, 1] = self.domain.R + self.eta(t, pts[:, 0])
        return F

    def velocity(self, t, pts):
        pts = np.asarray(pts, float)
        out = np.zeros_like(pts)
        out[:, 1] = self.eta_t(t, pts[:, 0]) * pts[:, 1]
        return out

    def bounding_box(self, t_max=None):
        return (0.0, self.domain.L, 0.0, self.domain.R + max(0.0, self.eta_table.max()))


# ──────────────────────────────────────────────────────────────────────
#  ALE map view + module-level ops
# ──────────────────────────────────────────────────────────────────────

@dataclass
class AleMap:
    """A motion frozen at one time level: the map the discrete operators see."""

    motion: object
    t: float

    def apply(self, pts):
        return self.motion.map(self.t, pts)

    def inverse(self, pts):
        return self.motion.inverse(self.t, pts)

    def jacobian_and_gradient(self, pts):
        return ale_jacobian_and_gradient(self.motion, self.t, pts)

    def domain_velocity(self, pts):
        """Domain velocity pulled back to reference points: d/dt Phi(t, x)."""
        return self.motion.velocity(self.t, pts)


def ale_apply(motion, t, pts):
    """Map reference points into the time-t physical configuration."""
    return motion.map(t, pts)


def ale_inverse(motion, t, pts):
    """Pull physical points back to reference coordinates."""
    return motion.inverse(t, pts)


def ale_jacobian_and_gradient(motion, t, pts):
    """Return (det F, G) at reference points, G = F^{-T} row-wise.

    det is clipped-checked: a degenerate or orientation-reversing map is a
    caller error, not something to patch over.
    """
    F = motion.jacobian(t, pts)
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(det <= 0.0):
        raise ValueError(
            f"ALE map degenerate at t={t}: min det = {det.min():.3e} (must stay positive)"
        )
    G = np.empty_like(F)
    # F^{-T} = [[d, -c], [-b, a]] / det  for F = [[a, b], [c, d]]
    G[:, 0, 0] = F[:, 1, 1] / det
    G[:, 0, 1] = -F[:, 1, 0] / det
    G[:, 1, 0] = -F[:, 0, 1] / det
    G[:, 1, 1] = F[:, 0, 0] / det
    return det, G


# ──────────────────────────────────────────────────────────────────────
#  Lipschitz estimation
# ──────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class LipschitzData:
    """Sampled bi-Lipschitz data of a motion over [0, t_max].

    c_lower: largest constant with  c|x-y| <= |Phi(t,x)-Phi(t,y)|  seen in the sample
    c_upper: smallest constant with |Phi(s,x)-Phi(t,y)| <= C(|x-y| + |s-t|)
    """

    c_lower: float
    c_upper: float
    n_space: int
    n_time: int

    @property
    def ratio(self):
        return self.c_upper / self.c_lower


def _singular_values_2x2(F):
    """Vectorized singular values of (n,2,2) matrices: returns (smin, smax)."""
    a = np.einsum("nij,nij->n", F, F)  # Frobenius norm squared
    d = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    root = np.sqrt(np.maximum(a * a - 4.0 * d * d, 0.0))
    smax = np.sqrt(0.5 * (a + root))
    smin = np.sqrt(np.maximum(0.5 * (a - root), 0.0))
    return smin, smax


def estimate_lipschitz(motion, t_max, n_space=33, n_time=17, fd_step=1e-6):
    """Sample bi-Lipschitz constants of a motion on a (time x space) grid.

    Spatial constants come from singular values of a centered finite-difference
    Jacobian (so the routine measures the map itself, not the motion class's
    own formulas); the time constant from |Phi(t+dt,x)-Phi(t,x)|/dt.  Estimates
    are monotone under sample refinement: more points can only shrink c_lower
    and grow c_upper.
    """
    dom = motion.domain
    zs = np.linspace(0.0, dom.L, n_space)
    rs = np.linspace(0.0, 1.0, n_space)
    Z, Rr = np.meshgrid(zs, rs, indexing="ij")
    pts = np.column_stack([Z.ravel(), Rr.ravel()])
    ts = np.linspace(0.0, t_max, n_time)

    c_lo = np.inf
    c_hi = 0.0
    hz = fd_step * max(dom.L, 1.0)
    ez = np.array([hz, 0.0])
    er = np.array([0.0, fd_step])
    for t in ts:
        # FD Jacobian columns (clamp offsets into the rectangle is unnecessary:
        # every motion here extends smoothly a hair past the closure)
        col_z = (motion.map(t, pts + ez) - motion.map(t, pts - ez)) / (2 * hz)
        col_r = (motion.map(t, pts + er) - motion.map(t, pts - er)) / (2 * fd_step)
        F = np.stack([col_z, col_r], axis=2)
        smin, smax = _singular_values_2x2(F)
        c_lo = min(c_lo, smin.min())
        c_hi = max(c_hi, smax.max())
        dt_fd = fd_step * max(t_max, 1.0)
        vel = (motion.map(t + dt_fd, pts) - motion.map(t - dt_fd, pts)) / (2 * dt_fd)
        c_hi = max(c_hi, np.abs(np.linalg.norm(vel, axis=1)).max())
    return LipschitzData(c_lower=float(c_lo), c_upper=float(c_hi),
                         n_space=n_space, n_time=n_time)


# ──────────────────────────────────────────────────────────────────────
#  shrunk-domain inclusion
# ──────────────────────────────────────────────────────────────────────

@dataclass
class InclusionReport:
    gamma: float
    n_samples: int
    n_violations: int
    worst_margin: float  # most negative distance-to-inside seen (>= 0 means all inside)

    @property
    def ok(self):
        return self.n_violations == 0


def shrunk_domain_inclusion(motion, lip: LipschitzData, t, s, h,
                            n_samples=1000, rng=None, convention="proof"):
    """Check Phi(t, Omega_gamma) inside Phi(s, Omega) by random sampling.

    Omega_gamma = reference points farther than gamma from the boundary,
    gamma = 2 (C/c) h by default.  ``convention="display"`` flips the ratio to
    2 (c/C) h, which is tighter than the supporting argument allows; it is kept
    selectable for comparison runs.  Requires |s - t| < h.
    """
    if abs(s - t) >= h:
        raise ValueError(f"need |s-t| < h, got |{s}-{t}| >= {h}")
    if convention == "proof":
        gamma = 2.0 * (lip.c_upper / lip.c_lower) * h
    elif convention == "display":
        gamma = 2.0 * (lip.c_lower / lip.c_upper) * h
    else:
        raise ValueError(f"unknown gamma convention {convention!r}")

    dom = motion.domain
    if gamma >= min(dom.L, 1.0) / 2:
        # shrunk set empty -> inclusion holds vacuously
        return InclusionReport(gamma=gamma, n_samples=0, n_violations=0, worst_margin=np.inf)

    rng = np.random.default_rng(rng)
    z = rng.uniform(gamma, dom.L - gamma, n_samples)
    r = rng.uniform(gamma, 1.0 - gamma, n_samples)
    pts = np.column_stack([z, r])
    phys = motion.map(t, pts)
    back = motion.inverse(s, phys)
    margin = np.minimum.reduce([
        back[:, 0], dom.L - back[:, 0], back[:, 1], 1.0 - back[:, 1],
    ])
    bad = margin < -1e-12
    return InclusionReport(
        gamma=gamma,
        n_samples=n_samples,
        n_violations=int(bad.sum()),
        worst_margin=float(margin.min()),
    )


# ──────────────────────────────────────────────────────────────────────
#  interface envelopes
# ──────────────────────────────────────────────────────────────────────

@dataclass
class DomainEnvelope:
    """Windowed min/max interface envelopes over steps n..n+l (node arrays)."""

    z: np.ndarray
    lower: np.ndarray        # smoothed m^{n,l}, still <= every eta in the window
    upper: np.ndarray        # smoothed M^{n,l}, still >= every eta in the window
    raw_lower: np.ndarray
    raw_upper: np.ndarray
    n: int
    l: int

    @property
    def gap_max(self):
        return float(np.max(self.upper - self.lower))

    def gap_l2(self, L):
        g = self.upper - self.lower
        hz = L / (len(g) - 1)
        w = np.full_like(g, hz)
        w[0] = w[-1] = hz / 2
        return float(np.sqrt(np.sum(w * g * g)))


def _moving_average(a, width):
    if width <= 1:
        return a.copy()
    k = np.ones(width) / width
    # reflect-pad so the ends keep their level
    pad = width // 2
    ap = np.concatenate([a[pad:0:-1], a, a[-2:-2 - pad:-1]])
    out = np.convolve(ap, k, mode="valid")
    return out[: len(a)] if len(out) > len(a) else out


def envelope(eta_table, n, l, smoothing_width=3, L=1.0):
    """Envelopes of the displacement rows n..n+l with gentle smoothing.

    The smoothed upper envelope is max(moving average, raw max) and the lower
    one min(moving average, raw min), so the sandwich
    lower <= eta^{n+i} <= upper holds at every node by construction.
    """
    eta_table = np.asarray(eta_table, float)
    if n < 0 or n + l >= eta_table.shape[0]:
        raise ValueError(
            f"window [{n}, {n + l}] outside table with {eta_table.shape[0]} rows"
        )
    window = eta_table[n : n + l + 1]
    raw_m = window.min(axis=0)
    raw_M = window.max(axis=0)
    m_s = np.minimum(_moving_average(raw_m, smoothing_width), raw_m)
    M_s = np.maximum(_moving_average(raw_M, smoothing_width), raw_M)
    nz = eta_table.shape[1] - 1
    return DomainEnvelope(
        z=np.linspace(0.0, L, nz + 1),
        lower=m_s,
        upper=M_s,
        raw_lower=raw_m,
        raw_upper=raw_M,
        n=n,
        l=l,
    )
