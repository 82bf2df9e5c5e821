"""Backward-Euler stepping for incompressible flow on a moving domain.

The domain motion is prescribed (see `geometry`); the velocity unknown
lives on the fixed reference grid and every step is assembled in the
metric of its *target* time level.  Because the grid is body-fitted, the
previous velocity "carried along with the mesh" is literally the same dof
array, so the inertial difference quotient couples snapshots without any
interpolation, and with skew-symmetrized advection the discrete energy
identity

    1/2|u+|^2 + 1/2|u+ - u|^2 + dt*mu*|grad u+|^2  =  1/2|u|^2 + dt*F(u+)

(all norms in the target metric) holds to rounding error.  The per-step
ledger records every term, which turns energy stability into a checkable
invariant of each run instead of an asymptotic claim.

`compose_with_ale` is the complementary diagnostic: it resamples a
velocity where the mesh motion has physically displaced it, measuring how
far "transport with the mesh" is from "stay in place"; the size of that
difference is expected to scale like dt * |grad u|.

Two wall layouts are supported: "enclosed" (homogeneous Dirichlet all
around, moving or static) and "open" (rigid channel with free in/outflow
driven by a pressure drop).  The open layout exists mainly to host exact
steady states: `steady_channel_flow` computes the discrete steady state of
the scheme's own operators, and `poiseuille_profile` is its analytic
counterpart for validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .spaces import (
    _SPLU_OPTS,
    DiscreteField,
    FieldOps,
    Grid,
    leray_project,
    random_divfree_field,
)

__all__ = [
    "NsConfig",
    "LedgerRow",
    "RotheTrajectory",
    "StepError",
    "RunAborted",
    "metric_at",
    "mesh_velocity_faces",
    "pressure_forcing",
    "compose_with_ale",
    "composition_ratios",
    "step",
    "run",
    "energy_aggregate",
    "steady_channel_flow",
    "poiseuille_profile",
]


class StepError(RuntimeError):
    """A linear step solve failed or returned an unusable solution."""


class RunAborted(RuntimeError):
    """A run died mid-trajectory; `.partial` holds the completed prefix."""

    def __init__(self, partial, cause):
        super().__init__(f"run aborted after {partial.n_steps} step(s): {cause}")
        self.partial = partial
        self.cause = cause


# ──────────────────────────────────────────────────────────────────────
#  snapshots of the prescribed motion
# ──────────────────────────────────────────────────────────────────────

def metric_at(motion, t, grid: Grid, R=1.0):
    """Metric descriptor of the motion snapshot at time t."""
    if motion is None:
        return ("channel", np.zeros(grid.nz + 1))
    if getattr(motion, "kind", None) == "shear":
        return ("shear", float(motion.g(t)))
    zn = np.arange(grid.nz + 1) * grid.hz
    eta = np.asarray(motion.eta(t, zn), float)
    jmin = float(np.min(R + eta))
    if jmin <= 0.0:
        raise ValueError(f"degenerate domain at t={t:.6g}: min thickness {jmin:.3e}")
    return ("channel", eta)


def mesh_velocity_faces(motion, t, grid: Grid):
    """Physical mesh velocity sampled at the reference face points."""
    w = np.zeros(grid.n_faces)
    if motion is None:
        return w
    zf, rf = grid.uz_coords()
    Z, Rr = np.meshgrid(zf, rf, indexing="ij")
    w[: grid.n_uz] = motion.velocity(t, np.column_stack([Z.ravel(), Rr.ravel()]))[:, 0]
    zf, rf = grid.ur_coords()
    Z, Rr = np.meshgrid(zf, rf, indexing="ij")
    w[grid.n_uz :] = motion.velocity(t, np.column_stack([Z.ravel(), Rr.ravel()]))[:, 1]
    return w


def pressure_forcing(ops: FieldOps, p_in, p_out):
    """In/outflow pressure-drop work functional, reduced to free dofs."""
    g = ops.grid
    F = np.zeros(g.n_faces)
    F[np.arange(g.nr)] = p_in * g.hr
    F[g.nz * g.nr + np.arange(g.nr)] = -p_out * g.hr
    return ops.R.T @ F


# ──────────────────────────────────────────────────────────────────────
#  configuration and trajectory containers
# ──────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class NsConfig:
    """One prescribed-motion run: grid, stepping, viscosity, data."""

    nz: int
    nr: int
    dt: float
    t_end: float
    mu: float = 0.05
    motion: object | None = None        # geometry motion, or None for static
    layout: str = "enclosed"            # "enclosed" | "open"
    L: float = 1.0
    initial: str | Callable = "modes"   # "zero" | "modes" | callable(ops)->field
    init_amp: float = 1.0
    init_seed: int = 7
    p_in: float = 0.0                   # pressure-drop forcing (open layout)
    p_out: float = 0.0

    def __post_init__(self):
        if self.nz < 4 or self.nr < 4:
            raise ValueError("grid must be at least 4x4")
        if self.dt <= 0 or self.t_end <= 0:
            raise ValueError("dt and t_end must be positive")
        if self.mu <= 0:
            raise ValueError("viscosity must be positive")
        n = self.t_end / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
            raise ValueError(f"t_end/dt = {n} is not a positive integer")
        if self.layout not in ("enclosed", "open"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.layout == "open" and self.motion is not None:
            raise ValueError("the open layout is rigid; motion must be None")
        if self.layout == "enclosed" and (self.p_in != 0.0 or self.p_out != 0.0):
            raise ValueError("pressure forcing does no work on enclosed walls")
        if isinstance(self.initial, str) and self.initial not in ("zero", "modes"):
            raise ValueError(f"unknown initial spec {self.initial!r}")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))


@dataclass
class LedgerRow:
    """Energy bookkeeping of one step, all terms in the target metric."""

    n: int
    t: float
    kinetic: float
    dissipation_increment: float
    composition_increment: float
    div_residual: float
    energy_slack: float

    COLUMNS = (
        "n", "t", "kinetic", "dissipation_increment",
        "composition_increment", "div_residual", "energy_slack",
    )

    def as_tuple(self):
        return (self.n, self.t, self.kinetic, self.dissipation_increment,
                self.composition_increment, self.div_residual, self.energy_slack)


@dataclass
class RotheTrajectory:
    """A complete run: snapshots u^0..u^N plus the per-step ledger."""

    config: object
    dt: float
    fields: list            # DiscreteField, length N+1
    ledger: list            # one row per step, length N
    metrics: list           # metric descriptor per snapshot, length N+1
    initial_kinetic: float = 0.0
    forcing_work: list | None = None    # dt*F(u^{n+1}) per step (None if unforced)
    shell: object | None = None         # coupled-scheme extras, unused here

    @property
    def n_steps(self):
        return len(self.ledger)

    @property
    def displacements(self):
        """(N+1, nz+1) wall displacement table, or None for shear/static."""
        if not self.metrics or self.metrics[0][0] != "channel":
            return None
        return np.vstack([m[1] for m in self.metrics])

    def ledger_array(self):
        return np.array([r.as_tuple() for r in self.ledger], dtype=float)


def energy_aggregate(traj: RotheTrajectory):
    """Summed energy budget of a run and the implied stability constant.

    lhs = final kinetic + sum of composition jumps + sum of dissipation;
    constant = lhs / initial kinetic (nan when starting from rest).
    """
    rows = traj.ledger
    final = rows[-1].kinetic if rows else traj.initial_kinetic
    s_comp = float(sum(r.composition_increment for r in rows))
    s_diss = float(sum(r.dissipation_increment for r in rows))
    lhs = final + s_comp + s_diss
    e0 = traj.initial_kinetic
    return {
        "initial": e0,
        "final_kinetic": final,
        "sum_composition": s_comp,
        "sum_dissipation": s_diss,
        "lhs": lhs,
        "constant": lhs / e0 if e0 > 0 else math.nan,
    }


# ──────────────────────────────────────────────────────────────────────
#  one step, and the full run
# ──────────────────────────────────────────────────────────────────────

def _pressure_from_multiplier(ops: FieldOps, lam):
    """Cell pressure from the constraint multiplier (level fixed for output)."""
    g = ops.grid
    if ops.layout == "enclosed":
        lam = np.concatenate([[0.0], lam])
    p = -lam / ops.W_C
    if ops.layout == "enclosed":
        p = p - float(np.sum(ops.W_C * p) / np.sum(ops.W_C))
    return p.reshape(g.nz, g.nr)


def step(u_prev: DiscreteField, ops_next: FieldOps, cfg: NsConfig, t_next: float):
    """Advance one backward-Euler step onto the given target snapshot.

    Returns (u_next, p) where p is the cell-centered pressure.  Raises
    StepError if the saddle solve does not actually satisfy its system.
    """
    hat = ops_next.free_from_field(u_prev)
    a = u_prev.faces_vector() - mesh_velocity_faces(cfg.motion, t_next, ops_next.grid)

    M = (ops_next.R.T @ ops_next.mass() @ ops_next.R).tocsr()
    S = (ops_next.R.T @ ops_next.stiffness_h1() @ ops_next.R).tocsr()
    N = (ops_next.R.T @ ops_next.advection_skew(a) @ ops_next.R).tocsr()
    A = (M / cfg.dt + N + cfg.mu * S).tocsr()

    rhs_mom = M @ hat / cfg.dt
    if cfg.layout == "open":
        rhs_mom = rhs_mom + pressure_forcing(ops_next, cfg.p_in, cfg.p_out)

    lu, nb = ops_next.saddle_solver(A)
    rhs = np.concatenate([rhs_mom, np.zeros(nb)])
    sol = lu.solve(rhs)
    x, lam = sol[: ops_next.n_free], sol[ops_next.n_free :]

    resid = A @ x + ops_next.constraint_matrix().T @ lam - rhs_mom
    scale = float(np.linalg.norm(rhs_mom)) + float(np.linalg.norm(x)) / cfg.dt + 1e-30
    if not np.all(np.isfinite(sol)) or np.linalg.norm(resid) > 1e-9 * scale:
        raise StepError(f"saddle solve residual {np.linalg.norm(resid):.3e} "
                        f"exceeds 1e-9 * {scale:.3e}")

    u_next = ops_next.field_from_free(x, t=t_next, n=u_prev.n + 1)
    u_next.p = _pressure_from_multiplier(ops_next, lam)
    return u_next, u_next.p


def _advance(u, ops_next, cfg, n):
    """One step plus its ledger row and the forcing work it received."""
    t1 = cfg.dt * (n + 1)
    u_new, _ = step(u, ops_next, cfg, t1)

    M = (ops_next.R.T @ ops_next.mass() @ ops_next.R).tocsr()
    S = (ops_next.R.T @ ops_next.stiffness_h1() @ ops_next.R).tocsr()
    hat = ops_next.free_from_field(u)
    x = ops_next.free_from_field(u_new)
    d = x - hat

    kinetic = 0.5 * float(x @ (M @ x))
    comp = 0.5 * float(d @ (M @ d))
    diss = cfg.dt * cfg.mu * float(x @ (S @ x))
    work = 0.0
    if cfg.layout == "open":
        work = cfg.dt * float(pressure_forcing(ops_next, cfg.p_in, cfg.p_out) @ x)
    rhs_energy = 0.5 * float(hat @ (M @ hat)) + work
    slack = rhs_energy - (kinetic + comp + diss)

    row = LedgerRow(
        n=n + 1,
        t=t1,
        kinetic=kinetic,
        dissipation_increment=diss,
        composition_increment=comp,
        div_residual=ops_next.div_residual(u_new),
        energy_slack=slack,
    )
    return u_new, row, work


def _initial_field(cfg: NsConfig, ops0: FieldOps) -> DiscreteField:
    if callable(cfg.initial):
        f = cfg.initial(ops0)
    elif cfg.initial == "zero":
        g = ops0.grid
        f = DiscreteField(
            grid=g,
            uz=np.zeros((g.nz + 1, g.nr)),
            ur=np.zeros((g.nz, g.nr + 1)),
            metric=ops0.metric,
        )
    else:
        rng = np.random.default_rng(cfg.init_seed)
        f = random_divfree_field(ops0, rng, scale=cfg.init_amp)
    f = leray_project(ops0, f)
    f.t, f.n = 0.0, 0
    return f


def run(cfg: NsConfig) -> RotheTrajectory:
    """Run the full trajectory; aborts carry the completed prefix."""
    grid = Grid(cfg.nz, cfg.nr, cfg.L)
    ops = FieldOps(grid, metric_at(cfg.motion, 0.0, grid), layout=cfg.layout)
    u = _initial_field(cfg, ops)

    x0 = ops.free_from_field(u)
    M0 = (ops.R.T @ ops.mass() @ ops.R).tocsr()
    e0 = 0.5 * float(x0 @ (M0 @ x0))

    traj = RotheTrajectory(
        config=cfg, dt=cfg.dt, fields=[u], ledger=[], metrics=[ops.metric],
        initial_kinetic=e0, forcing_work=[] if cfg.layout == "open" else None,
    )
    for n in range(cfg.n_steps):
        try:
            ops_next = FieldOps(
                grid, metric_at(cfg.motion, cfg.dt * (n + 1), grid), layout=cfg.layout
            )
            u, row, work = _advance(u, ops_next, cfg, n)
        except (StepError, ValueError) as e:
            raise RunAborted(traj, e) from e
        traj.fields.append(u)
        traj.ledger.append(row)
        traj.metrics.append(ops_next.metric)
        if traj.forcing_work is not None:
            traj.forcing_work.append(work)
    return traj


# ──────────────────────────────────────────────────────────────────────
#  composition-with-the-mesh-map diagnostic
# ──────────────────────────────────────────────────────────────────────

def compose_with_ale(ops_prev: FieldOps, u_prev: DiscreteField, motion,
                     t_prev, t_next) -> DiscreteField:
    """Resample a velocity where the inter-step mesh map has displaced it.

    The returned field lives on the t_next snapshot; its value at a face is
    u_prev evaluated at the reference location that face's physical point
    occupied at t_prev (zero outside the domain).  A static domain returns
    u_prev unchanged; the dof-array difference to u_prev measures how far
    the mesh transport is from the identity.
    """
    grid = ops_prev.grid
    met1 = metric_at(motion, t_next, grid)
    if motion is None or t_prev == t_next:
        out = u_prev.copy()
        out.metric, out.t = met1, float(t_next)
        return out
    comps = {}
    for comp, coords in (("uz", grid.uz_coords()), ("ur", grid.ur_coords())):
        Z, Rr = np.meshgrid(*coords, indexing="ij")
        pts = np.column_stack([Z.ravel(), Rr.ravel()])
        back = motion.inverse(t_prev, motion.map(t_next, pts))
        comps[comp] = ops_prev.sample(u_prev, comp, back, zero_outside=True).reshape(Z.shape)
    return DiscreteField(grid=grid, uz=comps["uz"], ur=comps["ur"],
                         metric=met1, t=float(t_next), n=u_prev.n)


def composition_ratios(traj: RotheTrajectory, stride=1, tiny=1e-13):
    """Per-step ratio |u - u-resampled| / (dt |grad u|) along a trajectory.

    Steps whose gradient is numerically zero are skipped.  The ratio being
    bounded uniformly in dt is the property of interest.
    """
    cfg = traj.config
    grid = traj.fields[0].grid
    out = []
    for n in range(0, traj.n_steps, stride):
        u0 = traj.fields[n]
        ops0 = FieldOps(grid, traj.metrics[n], layout=cfg.layout)
        r = compose_with_ale(ops0, u0, cfg.motion, cfg.dt * n, cfg.dt * (n + 1))
        ops1 = FieldOps(grid, traj.metrics[n + 1], layout=cfg.layout)
        d = u0.faces_vector() - r.faces_vector()
        num = math.sqrt(float(np.sum(ops1.M_diag * d * d)))
        x = u0.faces_vector()
        den = cfg.dt * math.sqrt(float(x @ (ops0.stiffness_h1() @ x)))
        if den > tiny:
            out.append(num / den)
    return np.asarray(out)


# ──────────────────────────────────────────────────────────────────────
#  steady pressure-driven channel (the exactly-preserved state)
# ──────────────────────────────────────────────────────────────────────

def poiseuille_profile(r, mu, p_in, p_out, L=1.0, R=1.0):
    """Analytic steady profile of the pressure-driven channel (slip axis)."""
    G = (p_in - p_out) / L
    r = np.asarray(r, float)
    return G * (R * R - r * r) / (2.0 * mu)


def steady_channel_flow(nz, nr, mu, p_in, p_out, L=1.0, R=1.0,
                        tol=1e-13, max_iter=60):
    """Discrete steady state of the scheme's own operators (open layout).

    Picard iteration on the advection linearization; returns (field, iters)
    with the pressure attached to the field.  Because the fixed point solves
    exactly the system each backward-Euler step solves, stepping from it
    reproduces it to solver precision.
    """
    grid = Grid(nz, nr, L)
    ops = FieldOps(grid, ("channel", np.zeros(nz + 1)), layout="open", R=R)
    S = (ops.R.T @ ops.stiffness_h1() @ ops.R).tocsr()
    M = (ops.R.T @ ops.mass() @ ops.R).tocsr()
    F = pressure_forcing(ops, p_in, p_out)
    B = ops.constraint_matrix()
    x = np.zeros(ops.n_free)
    lam = np.zeros(B.shape[0])
    for it in range(1, max_iter + 1):
        a = ops.R @ x
        N = (ops.R.T @ ops.advection_skew(a) @ ops.R).tocsr()
        K = sp.bmat([[N + mu * S, B.T], [B, None]], format="csc")
        sol = spla.splu(K, **_SPLU_OPTS).solve(np.concatenate([F, np.zeros(B.shape[0])]))
        x_new, lam = sol[: ops.n_free], sol[ops.n_free :]
        d = x_new - x
        inc = math.sqrt(float(d @ (M @ d)))
        ref = math.sqrt(float(x_new @ (M @ x_new)))
        x = x_new
        if inc <= tol * max(ref, 1e-30):
            break
    else:
        raise StepError(f"steady-state iteration stalled at increment {inc:.3e}")
    f = ops.field_from_free(x)
    f.p = _pressure_from_multiplier(ops, lam)
    return f, it
