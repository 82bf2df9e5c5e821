"""Discrete function spaces on a staggered grid over the reference rectangle.

Grid layout (MAC staggering)
----------------------------
The reference rectangle (0, L) x (0, 1) is split into nz x nr cells,
hz = L/nz, hr = 1/nr.  Velocity components sit on faces, scalars at centers:

    uz[i, j]   z-velocity on vertical faces,   (i*hz, (j+1/2)*hr),  shape (nz+1, nr)
    ur[i, j]   r-velocity on horizontal faces, ((i+1/2)*hz, j*hr),  shape (nz, nr+1)
    p[i, j]    cell centers,                   ((i+1/2)*hz, (j+1/2)*hr), (nz, nr)

Arrays are indexed [i, j] with i the z-index and flattened C-order (i major).
All deformed-domain calculus is phrased through the metric pair (J, G) of a
map snapshot: J = det(dPhi/dx) and G = (dPhi/dx)^{-T}, so that the physical
gradient of a pulled-back scalar is G @ grad_ref.  Two metric kinds cover the
package: "channel" (J = R + eta(z), G upper-triangular) and "shear"
(J = 1, G lower-triangular with constant -g).

Divergence is assembled in flux form: the constraint per cell differences the
contravariant fluxes J F^{-1} u across faces and divides by J at the center.
Boundary-normal fluxes vanish identically under each family's boundary
conditions, so on enclosed layouts the cell constraints sum exactly to zero
and one redundant row can be dropped (classic single-pressure pinning, valid
for every metric here).

Quadratic forms (viscous, symmetric-gradient, H^1/H^2 norms) are assembled as
sums of squares of linear samplings at cell centers, which keeps them
symmetric positive semidefinite to machine precision -- the discrete energy
identities downstream rely on that, not on any analytic argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Grid",
    "DiscreteField",
    "CoverField",
    "NormDescriptor",
    "FieldOps",
    "shell_matrices",
    "norm_moving",
    "hs_gagliardo",
    "extend_by_zero",
    "leray_project",
    "dual_norm",
    "squeeze",
    "squeeze_error_norm",
    "divergence_corrector",
    "trace_shift_error",
    "random_divfree_field",
    "write_field",
    "read_field",
]

_SPLU_OPTS = dict(permc_spec="COLAMD")


# ──────────────────────────────────────────────────────────────────────
#  grid and field containers
# ──────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Grid:
    nz: int
    nr: int
    L: float = 1.0

    @property
    def hz(self):
        return self.L / self.nz

    @property
    def hr(self):
        return 1.0 / self.nr

    @property
    def n_uz(self):
        return (self.nz + 1) * self.nr

    @property
    def n_ur(self):
        return self.nz * (self.nr + 1)

    @property
    def n_faces(self):
        return self.n_uz + self.n_ur

    @property
    def n_cells(self):
        return self.nz * self.nr

    # coordinate arrays (z first, then r), face/center/node point sets
    def uz_coords(self):
        z = np.arange(self.nz + 1) * self.hz
        r = (np.arange(self.nr) + 0.5) * self.hr
        return z, r

    def ur_coords(self):
        z = (np.arange(self.nz) + 0.5) * self.hz
        r = np.arange(self.nr + 1) * self.hr
        return z, r

    def center_coords(self):
        z = (np.arange(self.nz) + 0.5) * self.hz
        r = (np.arange(self.nr) + 0.5) * self.hr
        return z, r

    def node_coords(self):
        z = np.arange(self.nz + 1) * self.hz
        r = np.arange(self.nr + 1) * self.hr
        return z, r


@dataclass
class DiscreteField:
    """One velocity snapshot: staggered components plus its metric snapshot.

    metric is ("channel", eta_nodes) or ("shear", g) or ("channel", None)
    meaning the undeformed channel.  For coupled runs v holds the interface
    velocity on z-nodes and eta the displacement the field's domain uses
    (the *previous* step's interface for the coupled scheme -- callers pick).
    """

    grid: Grid
    uz: np.ndarray
    ur: np.ndarray
    p: np.ndarray | None = None
    metric: tuple = ("channel", None)
    v: np.ndarray | None = None
    t: float = 0.0
    n: int = 0

    def copy(self):
        return DiscreteField(
            grid=self.grid,
            uz=self.uz.copy(),
            ur=self.ur.copy(),
            p=None if self.p is None else self.p.copy(),
            metric=self.metric,
            v=None if self.v is None else self.v.copy(),
            t=self.t,
            n=self.n,
        )

    def faces_vector(self):
        return np.concatenate([self.uz.ravel(), self.ur.ravel()])


@dataclass
class CoverField:
    """Cell-centered samples of a zero-extended velocity on a fixed cover box."""

    box: tuple          # (z0, z1, r0, r1)
    shape: tuple        # (ncz, ncr)
    U: np.ndarray       # z-component at cover centers
    V: np.ndarray       # r-component
    vph: np.ndarray | None = None   # optional boundary trace (z-nodes)

    @property
    def cell_area(self):
        z0, z1, r0, r1 = self.box
        return ((z1 - z0) / self.shape[0]) * ((r1 - r0) / self.shape[1])

    def l2(self):
        s = float(np.sum(self.U * self.U + self.V * self.V) * self.cell_area)
        if self.vph is not None:
            hz = (self.box[1] - self.box[0]) / (len(self.vph) - 1)
            w = np.full(len(self.vph), hz)
            w[0] = w[-1] = hz / 2
            s += float(np.sum(w * self.vph * self.vph))
        return math.sqrt(s)

    def minus(self, other):
        vph = None
        if self.vph is not None and other.vph is not None:
            vph = self.vph - other.vph
        return CoverField(self.box, self.shape, self.U - other.U, self.V - other.V, vph)


@dataclass(frozen=True)
class NormDescriptor:
    """Which norm norm_moving computes: kind in {l2, h1, h1semi, h2, hs}."""

    kind: str = "l2"
    s: float = 0.5
    include_structure: bool = True


# ──────────────────────────────────────────────────────────────────────
#  metric snapshots
# ──────────────────────────────────────────────────────────────────────

class _Metric:
    """J and G evaluated on the structured point classes of one grid."""

    def __init__(self, grid: Grid, metric, R=1.0):
        kind, data = metric
        self.kind = kind
        self.grid = grid
        self.R = R
        nz, nr = grid.nz, grid.nr
        hz, hr = grid.hz, grid.hr
        rc = (np.arange(nr) + 0.5) * hr          # center r-levels
        if kind == "shear":
            g = float(data or 0.0)
            self.g = g
            self.J_node_z = np.ones(nz + 1)
            self.J_center_z = np.ones(nz)
            self.J_C = np.ones((nz, nr))
            self.G_C = {
                "00": np.ones((nz, nr)),
                "01": np.zeros((nz, nr)),
                "10": np.full((nz, nr), -g),
                "11": np.ones((nz, nr)),
            }
        elif kind == "channel":
            eta = np.zeros(nz + 1) if data is None else np.asarray(data, float)
            if eta.shape != (nz + 1,):
                raise ValueError(f"eta nodes shape {eta.shape}, expected ({nz + 1},)")
            if np.any(R + eta <= 0):
                raise ValueError("channel metric degenerate: R + eta <= 0 somewhere")
            self.eta = eta
            self.J_node_z = R + eta                              # J at z-nodes
            eta_c = 0.5 * (eta[:-1] + eta[1:])
            self.J_center_z = R + eta_c                          # J at z-centers
            self.eta_z_center = np.diff(eta) / hz                # exact for P1 eta
            self.J_C = np.broadcast_to(self.J_center_z[:, None], (nz, nr)).copy()
            G01 = -(self.eta_z_center[:, None] * rc[None, :]) / self.J_C
            self.G_C = {
                "00": np.ones((nz, nr)),
                "01": G01,
                "10": np.zeros((nz, nr)),
                "11": 1.0 / self.J_C,
            }
        else:
            raise ValueError(f"unknown metric kind {kind!r}")

    def J_at(self, z):
        """J at arbitrary z (channel: P1 interpolation of eta; shear: 1)."""
        if self.kind == "shear":
            return np.ones_like(np.asarray(z, float))
        zs = np.arange(self.grid.nz + 1) * self.grid.hz
        return self.R + np.interp(np.asarray(z, float), zs, self.eta)


# ──────────────────────────────────────────────────────────────────────
#  sparse stencil builders
# ──────────────────────────────────────────────────────────────────────

def _coo(rows, cols, vals, shape):
    return sp.coo_matrix(
        (np.asarray(vals, float), (np.asarray(rows), np.asarray(cols))), shape=shape
    ).tocsr()


class FieldOps:
    """Operator factory for one (grid, metric, layout) snapshot.

    layout "enclosed": homogeneous Dirichlet everywhere (normal faces pinned,
    tangential walls by reflection ghosts).  layout "fsi": free in/outflow in
    z, slip bottom, no-slip top with the top r-faces eliminated onto interface
    node velocities (shared unknowns).  layout "open": fsi wall conditions
    with the top wall rigid (pressure-driven rigid channel).  All heavy
    members are built lazily and cached; a solver step touches only sparse
    mat-vecs and one LU factor.
    """

    def __init__(self, grid: Grid, metric=("channel", None), layout="enclosed", R=1.0):
        self.grid = grid
        self.layout = layout
        self.metric = metric
        self.m = _Metric(grid, metric, R=R)
        self._cache = {}
        self._build_masses()
        self._build_reduction()

    # ------------------------------------------------------------------
    # masses
    # ------------------------------------------------------------------

    def _build_masses(self):
        g = self.grid
        nz, nr = g.nz, g.nr
        hz, hr = g.hz, g.hr
        wz = np.full((nz + 1, nr), hz * hr)
        wz[0, :] *= 0.5
        wz[-1, :] *= 0.5
        wz *= self.m.J_node_z[:, None]
        wr = np.full((nz, nr + 1), hz * hr)
        wr[:, 0] *= 0.5
        wr[:, -1] *= 0.5
        wr *= self.m.J_center_z[:, None]
        self.M_diag = np.concatenate([wz.ravel(), wr.ravel()])
        self.W_C = (self.m.J_C * hz * hr).ravel()

    # ------------------------------------------------------------------
    # dof bookkeeping
    # ------------------------------------------------------------------

    def _build_reduction(self):
        g = self.grid
        nz, nr = g.nz, g.nr
        n_uz, n_ur = g.n_uz, g.n_ur
        iuz = lambda i, j: i * nr + j
        iur = lambda i, j: n_uz + i * (nr + 1) + j

        rows, cols, vals = [], [], []
        if self.layout == "enclosed":
            # free: uz interior columns, ur interior rows
            k = 0
            for i in range(1, nz):
                for j in range(nr):
                    rows.append(iuz(i, j)); cols.append(k); vals.append(1.0); k += 1
            self.n_free_uz = k
            for i in range(nz):
                for j in range(1, nr):
                    rows.append(iur(i, j)); cols.append(k); vals.append(1.0); k += 1
            self.n_free_v = 0
            self.n_free = k
        elif self.layout in ("fsi", "open"):
            k = 0
            for i in range(nz + 1):
                for j in range(nr):
                    rows.append(iuz(i, j)); cols.append(k); vals.append(1.0); k += 1
            self.n_free_uz = k
            for i in range(nz):
                for j in range(1, nr):
                    rows.append(iur(i, j)); cols.append(k); vals.append(1.0); k += 1
            if self.layout == "open":
                # rigid top wall: like fsi but with the interface pinned
                self.n_free_v = 0
                self.n_free = k
            else:
                n_before_v = k
                # interface nodes v[1..nz-1]; top faces get the two-node average
                for i in range(nz):
                    for node, w in ((i, 0.5), (i + 1, 0.5)):
                        if 1 <= node <= nz - 1:
                            rows.append(iur(i, nr))
                            cols.append(n_before_v + node - 1)
                            vals.append(w)
                self.n_free_v = nz - 1
                self.n_free = n_before_v + self.n_free_v
                self.v_slice = slice(n_before_v, self.n_free)
        else:
            raise ValueError(f"unknown layout {self.layout!r}")
        self.R = _coo(rows, cols, vals, (g.n_faces, self.n_free))

    def free_from_field(self, f: DiscreteField):
        """Extract the free-dof vector of a field (assumes BC-consistent data)."""
        x = f.faces_vector()
        if self.layout == "enclosed":
            out = np.empty(self.n_free)
            g = self.grid
            uz = f.uz[1:-1, :].ravel()
            ur = f.ur[:, 1:-1].ravel()
            out[: uz.size] = uz
            out[uz.size :] = ur
            return out
        out = np.empty(self.n_free)
        uz = f.uz.ravel()
        ur = f.ur[:, 1:-1].ravel()
        out[: uz.size] = uz
        out[uz.size : uz.size + ur.size] = ur
        if self.layout == "fsi":
            v = f.v if f.v is not None else np.zeros(self.grid.nz + 1)
            out[self.v_slice] = v[1:-1]
        return out

    def field_from_free(self, x, like: DiscreteField | None = None, t=0.0, n=0):
        g = self.grid
        nz, nr = g.nz, g.nr
        full = self.R @ x
        uz = full[: g.n_uz].reshape(nz + 1, nr)
        ur = full[g.n_uz :].reshape(nz, nr + 1)
        v = None
        if self.layout == "fsi":
            v = np.zeros(nz + 1)
            v[1:-1] = x[self.v_slice]
        f = DiscreteField(grid=g, uz=uz, ur=ur, metric=self.metric, v=v, t=t, n=n)
        if like is not None:
            f.t, f.n, f.p = like.t, like.n, like.p
        return f

    # ------------------------------------------------------------------
    # difference stencils (full face space -> cells/nodes)
    # ------------------------------------------------------------------

    def _bc(self):
        if self.layout == "enclosed":
            return dict(uz_bottom="dirichlet", uz_top="dirichlet")
        return dict(uz_bottom="slip", uz_top="dirichlet")

    def _op(self, name, builder):
        if name not in self._cache:
            self._cache[name] = builder()
        return self._cache[name]

    def dz_uz_C(self):
        def build():
            g = self.grid
            nz, nr = g.nz, g.nr
            ic = np.arange(g.n_cells)
            i, j = np.divmod(ic, nr)
            rows = np.concatenate([ic, ic])
            cols = np.concatenate([(i + 1) * nr + j, i * nr + j])
            vals = np.concatenate([np.full(g.n_cells, 1 / g.hz), np.full(g.n_cells, -1 / g.hz)])
            return _coo(rows, cols, vals, (g.n_cells, g.n_faces))
        return self._op("dz_uz_C", build)

    def dr_ur_C(self):
        def build():
            g = self.grid
            nz, nr = g.nz, g.nr
            ic = np.arange(g.n_cells)
            i, j = np.divmod(ic, nr)
            base = g.n_uz + i * (nr + 1) + j
            rows = np.concatenate([ic, ic])
            cols = np.concatenate([base + 1, base])
            vals = np.concatenate([np.full(g.n_cells, 1 / g.hr), np.full(g.n_cells, -1 / g.hr)])
            return _coo(rows, cols, vals, (g.n_cells, g.n_faces))
        return self._op("dr_ur_C", build)

    def dr_uz_N(self):
        """d/dr of uz at nodes, wall rows per the layout's tangential BC."""
        def build():
            g = self.grid
            nz, nr = g.nz, g.nr
            hr = g.hr
            bc = self._bc()
            I, J = np.meshgrid(np.arange(nz + 1), np.arange(1, nr), indexing="ij")
            node = (I * (nr + 1) + J).ravel()
            cp = (I * nr + J).ravel()
            rows = [node, node]
            cols = [cp, cp - 1]
            vals = [np.full(node.size, 1 / hr), np.full(node.size, -1 / hr)]
            iz = np.arange(nz + 1)
            if bc["uz_bottom"] == "dirichlet":
                rows.append(iz * (nr + 1)); cols.append(iz * nr)
                vals.append(np.full(nz + 1, 2 / hr))
            if bc["uz_top"] == "dirichlet":
                rows.append(iz * (nr + 1) + nr); cols.append(iz * nr + nr - 1)
                vals.append(np.full(nz + 1, -2 / hr))
            return _coo(np.concatenate(rows), np.concatenate(cols),
                        np.concatenate(vals), ((nz + 1) * (nr + 1), g.n_faces))
        return self._op("dr_uz_N", build)

    def dz_ur_N(self):
        """d/dz of ur at nodes; lateral walls are Dirichlet in both layouts."""
        def build():
            g = self.grid
            nz, nr = g.nz, g.nr
            hz = g.hz
            I, J = np.meshgrid(np.arange(1, nz), np.arange(nr + 1), indexing="ij")
            node = (I * (nr + 1) + J).ravel()
            cp = (g.n_uz + I * (nr + 1) + J).ravel()
            jr = np.arange(nr + 1)
            rows = [node, node, jr, nz * (nr + 1) + jr]
            cols = [cp, cp - (nr + 1), g.n_uz + jr, g.n_uz + (nz - 1) * (nr + 1) + jr]
            vals = [np.full(node.size, 1 / hz), np.full(node.size, -1 / hz),
                    np.full(nr + 1, 2 / hz), np.full(nr + 1, -2 / hz)]
            return _coo(np.concatenate(rows), np.concatenate(cols),
                        np.concatenate(vals), ((nz + 1) * (nr + 1), g.n_faces))
        return self._op("dz_ur_N", build)

    def nodes_to_centers(self):
        def build():
            g = self.grid
            nz, nr = g.nz, g.nr
            ic = np.arange(g.n_cells)
            i, j = np.divmod(ic, nr)
            node = lambda a, b: a * (nr + 1) + b
            rows = np.tile(ic, 4)
            cols = np.concatenate([node(i, j), node(i + 1, j), node(i, j + 1), node(i + 1, j + 1)])
            vals = np.full(4 * g.n_cells, 0.25)
            return _coo(rows, cols, vals, (g.n_cells, (nz + 1) * (nr + 1)))
        return self._op("nodes_to_centers", build)

    # physical gradient components of each velocity component, at centers
    def grad_ops(self):
        def build():
            A = self.nodes_to_centers()
            duz_dz = self.dz_uz_C()
            duz_dr = A @ self.dr_uz_N()
            dur_dz = A @ self.dz_ur_N()
            dur_dr = self.dr_ur_C()
            G = self.m.G_C
            d00 = sp.diags(G["00"].ravel())
            d01 = sp.diags(G["01"].ravel())
            d10 = sp.diags(G["10"].ravel())
            d11 = sp.diags(G["11"].ravel())
            gz_uz = d00 @ duz_dz + d01 @ duz_dr
            gr_uz = d10 @ duz_dz + d11 @ duz_dr
            gz_ur = d00 @ dur_dz + d01 @ dur_dr
            gr_ur = d10 @ dur_dz + d11 @ dur_dr
            return dict(gz_uz=gz_uz, gr_uz=gr_uz, gz_ur=gz_ur, gr_ur=gr_ur,
                        duz_dz=duz_dz, duz_dr=duz_dr, dur_dz=dur_dz, dur_dr=dur_dr)
        return self._op("grad_ops", build)

    # ------------------------------------------------------------------
    # divergence in contravariant-flux form
    # ------------------------------------------------------------------

    def divergence(self):
        """Cells x faces matrix: transformed divergence at cell centers."""
        def build():
            g = self.grid
            nz, nr = g.nz, g.nr
            hz, hr = g.hz, g.hr
            iuz = lambda I, J: I * nr + J
            iur = lambda I, J: g.n_uz + I * (nr + 1) + J
            m = self.m
            I, J = np.meshgrid(np.arange(nz), np.arange(nr), indexing="ij")
            c = (I * nr + J).ravel()
            Iv, Jv = I.ravel(), J.ravel()
            rows = [c, c, c, c]
            cols = [iuz(Iv + 1, Jv), iuz(Iv, Jv), iur(Iv, Jv + 1), iur(Iv, Jv)]
            if m.kind == "channel":
                Jn = m.J_node_z
                vals = [Jn[Iv + 1] / hz, -Jn[Iv] / hz,
                        np.full(c.size, 1 / hr), np.full(c.size, -1 / hr)]
                # flux_r correction  -eta' * r * <uz>  at interior r-faces:
                # face (i, jf) is the upper face of cell (i, jf-1) [+] and the
                # lower face of cell (i, jf) [-]; r = 0 and the top edge drop out.
                Fi, Fj = np.meshgrid(np.arange(nz), np.arange(1, nr), indexing="ij")
                Fi, Fj = Fi.ravel(), Fj.ravel()
                coef = -m.eta_z_center[Fi] * (Fj * hr) * 0.25 / hr
                for ii, jj in ((Fi, Fj - 1), (Fi, Fj), (Fi + 1, Fj - 1), (Fi + 1, Fj)):
                    rows += [Fi * nr + (Fj - 1), Fi * nr + Fj]
                    cols += [iuz(ii, jj), iuz(ii, jj)]
                    vals += [coef, -coef]
            else:  # shear
                gsh = m.g
                vals = [np.full(c.size, 1 / hz), np.full(c.size, -1 / hz),
                        np.full(c.size, 1 / hr), np.full(c.size, -1 / hr)]
                # flux_z correction  -g * <ur>  at interior z-faces: face
                # (ifc, j) closes cell (ifc-1, j) [+] and opens cell (ifc, j) [-];
                # the ghost-reflected average vanishes at the lateral walls.
                Fi, Fj = np.meshgrid(np.arange(1, nz), np.arange(nr), indexing="ij")
                Fi, Fj = Fi.ravel(), Fj.ravel()
                coef = np.full(Fi.size, -gsh * 0.25 / hz)
                for ii, jj in ((Fi - 1, Fj), (Fi - 1, Fj + 1), (Fi, Fj), (Fi, Fj + 1)):
                    rows += [(Fi - 1) * nr + Fj, Fi * nr + Fj]
                    cols += [iur(ii, jj), iur(ii, jj)]
                    vals += [coef, -coef]
            D = _coo(np.concatenate(rows), np.concatenate(cols),
                     np.concatenate(vals), (g.n_cells, g.n_faces))
            return sp.diags(1.0 / self.m.J_C.ravel()) @ D
        return self._op("divergence", build)

    def div_free(self):
        return self._op("div_free", lambda: (self.divergence() @ self.R).tocsr())

    def div_residual(self, f: DiscreteField):
        """L2 norm of the transformed divergence of a field."""
        d = self.divergence() @ f.faces_vector()
        return math.sqrt(float(np.sum(self.W_C * d * d)))

    # ------------------------------------------------------------------
    # quadratic forms
    # ------------------------------------------------------------------

    def stiffness_h1(self):
        """Component-gradient form: x^T S x = sum_k int J |G grad u_k|^2."""
        def build():
            go = self.grad_ops()
            W = sp.diags(self.W_C)
            S = None
            for a, b in (("gz_uz", "gr_uz"), ("gz_ur", "gr_ur")):
                part = go[a].T @ W @ go[a] + go[b].T @ W @ go[b]
                S = part if S is None else S + part
            return S.tocsr()
        return self._op("stiffness_h1", build)

    def stiffness_sym(self):
        """Symmetric-gradient form: x^T S x = 2 int J D(u):D(u)."""
        def build():
            go = self.grad_ops()
            W = sp.diags(self.W_C)
            Dzr = 0.5 * (go["gr_uz"] + go["gz_ur"])
            S = 2.0 * (
                go["gz_uz"].T @ W @ go["gz_uz"]
                + go["gr_ur"].T @ W @ go["gr_ur"]
                + 2.0 * (Dzr.T @ W @ Dzr)
            )
            return S.tocsr()
        return self._op("stiffness_sym", build)

    def stiffness_h2(self):
        """Plain second-difference form per component (fixed smooth-norm part)."""
        def build():
            g = self.grid
            nz, nr = g.nz, g.nr
            hz, hr = g.hz, g.hr
            rows, cols, vals = [], [], []
            nrow = 0

            def second_diffs(n1, n2, offset):
                nonlocal nrow
                idx = lambda I, J: offset + I * n2 + J
                # d2/dz2 at interior-in-i lattice points
                I, J = np.meshgrid(np.arange(1, n1 - 1), np.arange(n2), indexing="ij")
                I, J = I.ravel(), J.ravel()
                r = nrow + np.arange(I.size)
                rows.extend([r, r, r])
                cols.extend([idx(I + 1, J), idx(I, J), idx(I - 1, J)])
                vals.extend([np.full(I.size, 1 / hz**2), np.full(I.size, -2 / hz**2),
                             np.full(I.size, 1 / hz**2)])
                nrow += I.size
                I, J = np.meshgrid(np.arange(n1), np.arange(1, n2 - 1), indexing="ij")
                I, J = I.ravel(), J.ravel()
                r = nrow + np.arange(I.size)
                rows.extend([r, r, r])
                cols.extend([idx(I, J + 1), idx(I, J), idx(I, J - 1)])
                vals.extend([np.full(I.size, 1 / hr**2), np.full(I.size, -2 / hr**2),
                             np.full(I.size, 1 / hr**2)])
                nrow += I.size
                I, J = np.meshgrid(np.arange(1, n1), np.arange(1, n2), indexing="ij")
                I, J = I.ravel(), J.ravel()
                r = nrow + np.arange(I.size)
                rows.extend([r, r, r, r])
                cols.extend([idx(I, J), idx(I - 1, J), idx(I, J - 1), idx(I - 1, J - 1)])
                q = 1 / (hz * hr)
                vals.extend([np.full(I.size, q), np.full(I.size, -q),
                             np.full(I.size, -q), np.full(I.size, q)])
                nrow += I.size

            second_diffs(nz + 1, nr, 0)
            second_diffs(nz, nr + 1, g.n_uz)
            D2 = _coo(np.concatenate(rows), np.concatenate(cols),
                      np.concatenate(vals), (nrow, g.n_faces))
            return (D2.T @ (hz * hr * sp.eye(nrow)) @ D2).tocsr()
        return self._op("stiffness_h2", build)

    def mass(self):
        return self._op("mass", lambda: sp.diags(self.M_diag).tocsr())

    def q_norm_matrix(self, struct=None):
        """Discrete H^2 test-space norm: mass + H1 form + second differences.

        struct: optional (M_s, A_s) structure matrices added on the interface
        block (fsi layout only).
        """
        key = ("q_norm", struct is not None)
        if key not in self._cache:
            K_full = self.mass() + self.stiffness_h1() + self.stiffness_h2()
            K = (self.R.T @ K_full @ self.R).tocsr()
            if struct is not None and self.layout == "fsi":
                M_s, A_s = struct
                K = K.tolil()
                sl = self.v_slice
                K[sl, sl] = K[sl, sl] + (M_s + A_s)
                K = K.tocsr()
            self._cache[key] = K
        return self._cache[key]

    # ------------------------------------------------------------------
    # advection (skew-symmetrized)
    # ------------------------------------------------------------------

    def advection_skew(self, a_faces):
        """Skew form matrix N for advecting field a (full face vector).

        x^T N y realizes  (1/2)[ int J (a . grad) y . x  -  int J (a . grad) x . y ]
        with everything sampled at cell centers.
        """
        g = self.grid
        a_uz = a_faces[: g.n_uz].reshape(g.nz + 1, g.nr)
        a_ur = a_faces[g.n_uz :].reshape(g.nz, g.nr + 1)
        az_C = 0.5 * (a_uz[:-1, :] + a_uz[1:, :])
        ar_C = 0.5 * (a_ur[:, :-1] + a_ur[:, 1:])
        G = self.m.G_C
        bz = (G["00"] * az_C + G["10"] * ar_C).ravel()
        br = (G["01"] * az_C + G["11"] * ar_C).ravel()
        go = self.grad_ops()
        W = self.W_C
        adv_uz = sp.diags(W * bz) @ go["duz_dz"] + sp.diags(W * br) @ go["duz_dr"]
        adv_ur = sp.diags(W * bz) @ go["dur_dz"] + sp.diags(W * br) @ go["dur_dr"]
        P_uz, P_ur = self._face_to_center()
        N = P_uz.T @ adv_uz + P_ur.T @ adv_ur
        return (0.5 * (N - N.T)).tocsr()

    def _face_to_center(self):
        def build():
            g = self.grid
            nz, nr = g.nz, g.nr
            ic = np.arange(g.n_cells)
            i, j = np.divmod(ic, nr)
            rows = np.tile(ic, 2)
            cols_uz = np.concatenate([i * nr + j, (i + 1) * nr + j])
            P_uz = _coo(rows, cols_uz, np.full(2 * g.n_cells, 0.5), (g.n_cells, g.n_faces))
            base = g.n_uz + i * (nr + 1) + j
            cols_ur = np.concatenate([base, base + 1])
            P_ur = _coo(rows, cols_ur, np.full(2 * g.n_cells, 0.5), (g.n_cells, g.n_faces))
            return P_uz, P_ur
        return self._op("face_to_center", build)

    # ------------------------------------------------------------------
    # saddle solves
    # ------------------------------------------------------------------

    def constraint_matrix(self):
        """Reduced divergence with the redundant row dropped on enclosed layouts."""
        def build():
            B = self.div_free()
            if self.layout == "enclosed":
                B = B[1:, :]
            return B.tocsr()
        return self._op("constraint", build)

    def saddle_solver(self, A):
        """LU factor of [[A, B^T], [B, 0]] for the layout's constraint B."""
        B = self.constraint_matrix()
        nb = B.shape[0]
        K = sp.bmat([[A, B.T], [B, None]], format="csc")
        lu = spla.splu(K, **_SPLU_OPTS)
        return lu, nb

    def leray_lu(self):
        def build():
            M = (self.R.T @ self.mass() @ self.R).tocsr()
            if self.layout == "fsi":
                M = M.tolil()
                sl = self.v_slice
                M[sl, sl] = M[sl, sl] + self._gamma_mass()
                M = M.tocsr()
            return self.saddle_solver(M)
        return self._op("leray_lu", build)

    def _gamma_mass(self):
        nz = self.grid.nz
        hz = self.grid.hz
        w = np.full(nz - 1, hz)
        return sp.diags(w).tocsr()

    def gamma_weights(self):
        """Trapezoid weights on all z-nodes for interface integrals."""
        nz = self.grid.nz
        hz = self.grid.hz
        w = np.full(nz + 1, hz)
        w[0] = w[-1] = hz / 2
        return w

    # ------------------------------------------------------------------
    # sampling / interpolation
    # ------------------------------------------------------------------

    def _padded(self, f: DiscreteField, comp):
        """Component array padded with one BC ghost layer on each side."""
        bc = self._bc()
        if comp == "uz":
            a = f.uz
            pad = np.zeros((a.shape[0] + 2, a.shape[1] + 2))
            pad[1:-1, 1:-1] = a
            pad[0, 1:-1] = -a[0, :]        # lateral walls: uz -> 0 (enclosed) ...
            pad[-1, 1:-1] = -a[-1, :]      # ... harmless for fsi interpolation
            pad[1:-1, 0] = (a[:, 0] if bc["uz_bottom"] == "slip" else -a[:, 0])
            pad[1:-1, -1] = -a[:, -1]      # top is no-slip in both layouts
        else:
            a = f.ur
            pad = np.zeros((a.shape[0] + 2, a.shape[1] + 2))
            pad[1:-1, 1:-1] = a
            pad[0, 1:-1] = -a[0, :]        # lateral: ur = 0 walls
            pad[-1, 1:-1] = -a[-1, :]
            pad[1:-1, 0] = -a[:, 0]        # below bottom: odd reflection about 0
            pad[1:-1, -1] = a[:, -1]       # above top: keep trace value
        return pad

    def sample(self, f: DiscreteField, comp, pts, zero_outside=True):
        """Bilinear sample of one component at reference points (n, 2)."""
        g = self.grid
        pts = np.asarray(pts, float)
        if comp == "uz":
            fi = pts[:, 0] / g.hz
            fj = pts[:, 1] / g.hr - 0.5
            n1, n2 = g.nz + 1, g.nr
        else:
            fi = pts[:, 0] / g.hz - 0.5
            fj = pts[:, 1] / g.hr
            n1, n2 = g.nz, g.nr + 1
        pad = self._padded(f, comp)
        # padded lattice index = fractional index + 1
        x = np.clip(fi + 1.0, 0.0, n1)
        y = np.clip(fj + 1.0, 0.0, n2)
        i0 = np.floor(x).astype(int)
        j0 = np.floor(y).astype(int)
        i0 = np.clip(i0, 0, pad.shape[0] - 2)
        j0 = np.clip(j0, 0, pad.shape[1] - 2)
        tx = x - i0
        ty = y - j0
        vals = (
            pad[i0, j0] * (1 - tx) * (1 - ty)
            + pad[i0 + 1, j0] * tx * (1 - ty)
            + pad[i0, j0 + 1] * (1 - tx) * ty
            + pad[i0 + 1, j0 + 1] * tx * ty
        )
        if zero_outside:
            eps = 1e-12
            inside = (
                (pts[:, 0] >= -eps) & (pts[:, 0] <= g.L + eps)
                & (pts[:, 1] >= -eps) & (pts[:, 1] <= 1.0 + eps)
            )
            vals = np.where(inside, vals, 0.0)
        return vals


# ──────────────────────────────────────────────────────────────────────
#  1D shell / interface matrices (clamped nodes)
# ──────────────────────────────────────────────────────────────────────

def shell_matrices(nz, hz, c0=1.0, c1=1.0, c2=1.0):
    """Interface operator pieces on interior z-nodes (1..nz-1), clamped ends.

    Returns (M, A_e): lumped mass and the elastic form
    c0*M + c1*K2 + c2*K4, with K4 built from second differences using the
    clamped reflection ghost (eta[-1] = eta[1], ends pinned to zero).
    The discrete kernel of A_e is trivial for c2 > 0.
    """
    n = nz - 1
    M = sp.diags(np.full(n, hz)).tocsr()

    # first differences on the nz edges, with pinned end values
    rows, cols, vals = [], [], []
    for e in range(nz):
        nl, nr_ = e, e + 1          # node numbers of this edge
        for node, sgn in ((nr_, 1.0), (nl, -1.0)):
            if 1 <= node <= nz - 1:
                rows.append(e); cols.append(node - 1); vals.append(sgn / hz)
    D1 = _coo(rows, cols, vals, (nz, n))
    K2 = (D1.T @ (hz * sp.eye(nz)) @ D1).tocsr()

    # second differences at all nodes with clamped ghosts
    rows, cols, vals = [], [], []
    for node in range(nz + 1):
        if node == 0:
            stencil = {1: 2.0}                     # ghost(-1) = eta(1), eta(0) = 0
        elif node == nz:
            stencil = {nz - 1: 2.0}
        else:
            stencil = {node - 1: 1.0, node: -2.0, node + 1: 1.0}
        for nd, c in stencil.items():
            if 1 <= nd <= nz - 1:
                rows.append(node); cols.append(nd - 1); vals.append(c / hz**2)
    D2 = _coo(rows, cols, vals, (nz + 1, n))
    w = np.full(nz + 1, hz)
    w[0] = w[-1] = hz / 2
    K4 = (D2.T @ sp.diags(w) @ D2).tocsr()

    A_e = (c0 * M + c1 * K2 + c2 * K4).tocsr()
    return M, A_e


# ──────────────────────────────────────────────────────────────────────
#  norms
# ──────────────────────────────────────────────────────────────────────

def norm_moving(ops: FieldOps, f: DiscreteField, desc: NormDescriptor = NormDescriptor()):
    """Norm of a field over its own (moving) domain, per the descriptor."""
    x = f.faces_vector()
    l2sq = float(x @ (ops.M_diag * x))
    if desc.include_structure and f.v is not None:
        w = ops.gamma_weights()
        l2sq += float(np.sum(w * f.v * f.v))
    if desc.kind == "l2":
        return math.sqrt(l2sq)
    h1sq = float(x @ (ops.stiffness_h1() @ x))
    if desc.kind == "h1semi":
        return math.sqrt(h1sq)
    if desc.kind == "h1":
        return math.sqrt(l2sq + h1sq)
    if desc.kind == "h2":
        h2sq = float(x @ (ops.stiffness_h2() @ x))
        return math.sqrt(l2sq + h1sq + h2sq)
    raise ValueError(f"norm kind {desc.kind!r} not computed on fields here")


def grad_linf(ops: FieldOps, f: DiscreteField):
    """max over cell centers of |physical gradient| (both components)."""
    go = ops.grad_ops()
    x = f.faces_vector()
    mags = np.zeros(ops.grid.n_cells)
    for k in ("gz_uz", "gr_uz", "gz_ur", "gr_ur"):
        v = go[k] @ x
        mags += v * v
    return math.sqrt(float(mags.max()))


# ──────────────────────────────────────────────────────────────────────
#  zero-extension to a cover box + fractional norms
# ──────────────────────────────────────────────────────────────────────

def extend_by_zero(ops: FieldOps, f: DiscreteField, motion, t, box, shape):
    """Sample the physical velocity on a fixed cover box, zero outside the domain.

    Uses the motion's exact inverse to pull cover centers back to reference
    coordinates; components transported as values (no Piola factor), matching
    the zero-extension convention of the estimates being tested.
    """
    ncz, ncr = shape
    z0, z1, r0, r1 = box
    zc = z0 + (np.arange(ncz) + 0.5) * (z1 - z0) / ncz
    rc = r0 + (np.arange(ncr) + 0.5) * (r1 - r0) / ncr
    Z, Rr = np.meshgrid(zc, rc, indexing="ij")
    phys = np.column_stack([Z.ravel(), Rr.ravel()])
    ref = motion.inverse(t, phys)
    inside = (
        (ref[:, 0] >= 0) & (ref[:, 0] <= ops.grid.L)
        & (ref[:, 1] >= 0) & (ref[:, 1] <= 1.0)
    )
    U = np.where(inside, ops.sample(f, "uz", ref, zero_outside=False), 0.0)
    V = np.where(inside, ops.sample(f, "ur", ref, zero_outside=False), 0.0)
    vph = f.v.copy() if f.v is not None else None
    return CoverField(box=box, shape=shape, U=U.reshape(ncz, ncr), V=V.reshape(ncz, ncr), vph=vph)


def hs_gagliardo(cov: CoverField, s=0.5, max_cells=(48, 24)):
    """Fractional Sobolev norm of a cover field via the double-sum seminorm.

    Subsamples the cover to at most max_cells before forming the pair sum;
    returns sqrt(L2^2 + seminorm^2) including the interface trace part when
    present (trace measured in plain L2 -- sufficient for the H-space role).
    """
    if not 0.0 < s < 0.5:
        raise ValueError(f"fractional order s={s} outside (0, 1/2)")
    ncz, ncr = cov.shape
    sz = max(1, int(np.ceil(ncz / max_cells[0])))
    sr = max(1, int(np.ceil(ncr / max_cells[1])))
    U = cov.U[::sz, ::sr]
    V = cov.V[::sz, ::sr]
    z0, z1, r0, r1 = cov.box
    hz = (z1 - z0) / ncz * sz
    hr = (r1 - r0) / ncr * sr
    nz, nr = U.shape
    zc = (np.arange(nz) + 0.5) * hz
    rc = (np.arange(nr) + 0.5) * hr
    Z, Rr = np.meshgrid(zc, rc, indexing="ij")
    P = np.column_stack([Z.ravel(), Rr.ravel()])
    W = np.column_stack([U.ravel(), V.ravel()])
    area = hz * hr
    d2 = np.sum((P[:, None, :] - P[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, 1.0)
    diff2 = np.sum((W[:, None, :] - W[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(diff2, 0.0)
    kern = diff2 / d2 ** (1.0 + s)
    semi = float(np.sum(kern) * area * area)
    return math.sqrt(cov.l2() ** 2 + semi)


# ──────────────────────────────────────────────────────────────────────
#  projection, dual norms
# ──────────────────────────────────────────────────────────────────────

def leray_project(ops: FieldOps, f: DiscreteField):
    """M-orthogonal projection onto the discretely divergence-free subspace."""
    x = ops.free_from_field(f)
    M = (ops.R.T @ ops.mass() @ ops.R)
    rhs_top = M @ x
    if ops.layout == "fsi":
        g = ops._gamma_mass()
        rhs_top = rhs_top.copy()
        rhs_top[ops.v_slice] += g @ x[ops.v_slice]
    lu, nb = ops.leray_lu()
    rhs = np.concatenate([rhs_top, np.zeros(nb)])
    sol = lu.solve(rhs)
    return ops.field_from_free(sol[: ops.n_free], like=f, t=f.t, n=f.n)


def dual_norm(ops: FieldOps, f_free, struct=None, kind="q", constrained=True):
    """Dual norm of a functional, measured against a chosen test-space norm.

    f_free: functional coefficients on free dofs (pairing f . q).  With the
    default H^2-type norm and the divergence constraint this solves the
    equality-constrained maximizer directly:
        K q + B^T mu = f,  B q = 0,  value = sqrt(f . q).
    kind "l2" swaps K for the mass matrix; constrained=False drops B, in
    which case the value is the norm of the plain Riesz representer.
    """
    key = ("dual_lu", kind, constrained, struct is not None)
    if key not in ops._cache:
        if kind == "q":
            K = ops.q_norm_matrix(struct=struct)
        elif kind == "l2":
            K = (ops.R.T @ ops.mass() @ ops.R).tocsr()
            if ops.layout == "fsi":
                K = K.tolil()
                sl = ops.v_slice
                K[sl, sl] = K[sl, sl] + ops._gamma_mass()
                K = K.tocsr()
        else:
            raise ValueError(f"unknown dual-norm kind {kind!r}")
        if constrained:
            ops._cache[key] = ops.saddle_solver(K)
        else:
            ops._cache[key] = (spla.splu(K.tocsc(), **_SPLU_OPTS), 0)
    lu, nb = ops._cache[key]
    rhs = np.concatenate([f_free, np.zeros(nb)]) if nb else f_free
    q = lu.solve(rhs)[: len(f_free)]
    val = float(f_free @ q)
    return math.sqrt(max(val, 0.0))


def dual_norm_dense_oracle(ops: FieldOps, f_free, struct=None):
    """Dense reference for dual_norm: explicit pseudo-inverse on the subspace."""
    K = ops.q_norm_matrix(struct=struct).toarray()
    B = ops.constraint_matrix().toarray()
    from scipy.linalg import null_space

    Z = null_space(B)
    Kz = Z.T @ K @ Z
    fz = Z.T @ f_free
    y = np.linalg.solve(Kz, fz)
    return math.sqrt(max(float(fz @ y), 0.0))


# ──────────────────────────────────────────────────────────────────────
#  squeezing, divergence corrector, interface-shift error
# ──────────────────────────────────────────────────────────────────────

def squeeze(src_ops: FieldOps, f: DiscreteField, v_trace, eta, eta_m, eta_M, sigma,
            R=1.0, project=True):
    """Radially squeeze a field into the larger domain R + eta_M.

    Physical rule: u_s(z, rho) = (sigma*uz(z, sigma*rho), ur(z, sigma*rho))
    where sigma*rho stays below R + eta(z); above that, (0, v(z)).  The result
    lives on the (grid, eta_M) metric.  Admissibility requires
    sigma*(R + eta_m) >= R + eta pointwise, so that outside the eta_m-domain
    the result is pure trace extension.  Faces in the cell row straddling the
    seam pick interior vs trace by their own center; that row's constraint
    defect is what the returned pre-projection residual measures, and the
    re-projection (on by default) removes it.

    Returns (field_on_target, field_u_on_target, residual, target_ops): the
    second entry is the plain zero-extension of u onto the target metric, so
    callers can take differences in one quadrature.
    """
    if sigma < 1.0:
        raise ValueError(f"sigma = {sigma} must be >= 1")
    slack = sigma * (R + np.asarray(eta_m, float)) - (R + np.asarray(eta, float))
    if np.min(slack) < -1e-12:
        raise ValueError(
            f"inadmissible squeeze: sigma*(R+eta_m) < R+eta by {-np.min(slack):.3e}"
        )
    g = src_ops.grid
    tgt_ops = FieldOps(g, ("channel", np.asarray(eta_M, float)), layout=src_ops.layout, R=R)
    J_M_node = R + np.asarray(eta_M, float)
    J_node = R + np.asarray(eta, float)
    eta_c = lambda a: 0.5 * (a[:-1] + a[1:])
    J_M_center = R + eta_c(np.asarray(eta_M, float))
    J_center = R + eta_c(np.asarray(eta, float))
    v_nodes = np.asarray(v_trace, float)
    zn, _ = g.node_coords()
    zc = (np.arange(g.nz) + 0.5) * g.hz

    def build(comp, J_M_z, J_z, v_at_z, zpos):
        if comp == "uz":
            z, r = g.uz_coords()
            shape = (g.nz + 1, g.nr)
        else:
            z, r = g.ur_coords()
            shape = (g.nz, g.nr + 1)
        Zr, Rr = np.meshgrid(z, r, indexing="ij")
        rho = J_M_z[:, None] * Rr                 # physical radius on target
        src_rho = sigma * rho
        below = src_rho <= J_z[:, None] + 1e-14
        r_src = np.where(below, src_rho / J_z[:, None], 0.0)
        pts = np.column_stack([Zr.ravel(), np.clip(r_src, 0.0, 1.0).ravel()])
        vals = src_ops.sample(f, comp, pts, zero_outside=False).reshape(shape)
        if comp == "uz":
            vals = np.where(below, sigma * vals, 0.0)
        else:
            vals = np.where(below, vals, v_at_z[:, None])
        return vals

    uz_new = build("uz", J_M_node, J_node, np.interp(zn, zn, v_nodes), zn)
    ur_new = build("ur", J_M_center, J_center, np.interp(zc, zn, v_nodes), zc)
    out = DiscreteField(grid=g, uz=uz_new, ur=ur_new,
                        metric=("channel", np.asarray(eta_M, float)),
                        v=v_nodes.copy(), t=f.t, n=f.n)
    resid = tgt_ops.div_residual(out)
    if project:
        out = leray_project(tgt_ops, out)

    # plain zero-extension of f onto the target metric (for difference norms)
    def extend(comp, J_M_z, J_z):
        if comp == "uz":
            z, r = g.uz_coords()
            shape = (g.nz + 1, g.nr)
        else:
            z, r = g.ur_coords()
            shape = (g.nz, g.nr + 1)
        Zr, Rr = np.meshgrid(z, r, indexing="ij")
        rho = J_M_z[:, None] * Rr
        inside = rho <= J_z[:, None] + 1e-14
        pts = np.column_stack([Zr.ravel(), np.clip(rho / J_z[:, None], 0.0, 1.0).ravel()])
        vals = src_ops.sample(f, comp, pts, zero_outside=False).reshape(shape)
        return np.where(inside, vals, 0.0)

    u_ext = DiscreteField(grid=g, uz=extend("uz", J_M_node, J_node),
                          ur=extend("ur", J_M_center, J_center),
                          metric=("channel", np.asarray(eta_M, float)),
                          v=v_nodes.copy(), t=f.t, n=f.n)
    return out, u_ext, resid, tgt_ops


def squeeze_error_norm(src_ops: FieldOps, f: DiscreteField, v_trace, eta, eta_M,
                       sigma, R=1.0, n_sub=None):
    """L2 distance between the squeezed field and the zero-extension of f.

    Integrates over the R+eta_M domain by strata in the radial direction, per
    z-column: below (R+eta)/sigma both fields are sampled and differenced; in
    the thin band up to R+eta the squeezed field is already pure trace; above
    R+eta the difference is exactly (0, v) and the integral is closed-form.
    The stratified quadrature resolves gap strips far thinner than a grid
    cell, which face-collocated norms would quantize to whole rows.
    """
    if sigma < 1.0:
        raise ValueError(f"sigma = {sigma} must be >= 1")
    g = src_ops.grid
    n_sub = n_sub if n_sub is not None else g.nr
    zc = (np.arange(g.nz) + 0.5) * g.hz
    zn = np.arange(g.nz + 1) * g.hz
    eta = np.asarray(eta, float)
    eta_M = np.asarray(eta_M, float)
    v_nodes = np.asarray(v_trace, float)
    J = R + np.interp(zc, zn, eta)
    J_M = R + np.interp(zc, zn, eta_M)
    v = np.interp(zc, zn, v_nodes)
    total = 0.0

    # stratum C: exact in rho
    total += float(np.sum(g.hz * v * v * np.maximum(J_M - J, 0.0)))

    # stratum A: two-point Gauss on n_sub subintervals of [0, J/sigma]
    gp = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])
    a1 = J / sigma
    for k in range(n_sub):
        for gpt in gp:
            rho = a1 * (k + gpt) / n_sub
            w = g.hz * (a1 / n_sub) * 0.5
            pts_s = np.column_stack([zc, np.clip(sigma * rho / J, 0.0, 1.0)])
            pts_e = np.column_stack([zc, np.clip(rho / J, 0.0, 1.0)])
            duz = sigma * src_ops.sample(f, "uz", pts_s, zero_outside=False) \
                - src_ops.sample(f, "uz", pts_e, zero_outside=False)
            dur = src_ops.sample(f, "ur", pts_s, zero_outside=False) \
                - src_ops.sample(f, "ur", pts_e, zero_outside=False)
            total += float(np.sum(w * (duz * duz + dur * dur)))

    # stratum B: [J/sigma, J], squeezed field is (0, v), f still interior
    a2 = J
    for gpt in gp:
        rho = a1 + (a2 - a1) * gpt
        w = g.hz * (a2 - a1) * 0.5
        pts_e = np.column_stack([zc, np.clip(rho / J, 0.0, 1.0)])
        duz = -src_ops.sample(f, "uz", pts_e, zero_outside=False)
        dur = v - src_ops.sample(f, "ur", pts_e, zero_outside=False)
        total += float(np.sum(w * (duz * duz + dur * dur)))

    return math.sqrt(total)


def divergence_corrector(ops: FieldOps, f: DiscreteField, compat_tol=1e-9):
    """Zero-boundary field w with the same transformed divergence as f.

    Minimizes the H1 form subject to DIV w = DIV f; raises if the data is
    incompatible (net transformed flux must vanish).
    """
    d_full = ops.divergence() @ f.faces_vector()
    total = float(np.sum(ops.W_C * d_full))
    scale = math.sqrt(float(np.sum(ops.W_C * d_full * d_full))) + 1e-30
    if abs(total) > compat_tol * max(scale, 1.0):
        raise ValueError(
            f"incompatible divergence data: net flux {total:.3e} exceeds "
            f"{compat_tol:.1e} * scale"
        )
    if ops.layout != "enclosed":
        raise ValueError("divergence_corrector expects the enclosed layout")
    S = (ops.R.T @ (ops.stiffness_h1() + 1e-12 * ops.mass()) @ ops.R).tocsr()
    B = ops.constraint_matrix()
    rhs_c = (ops.divergence() @ f.faces_vector())[1:]
    K = sp.bmat([[S, B.T], [B, None]], format="csc")
    lu = spla.splu(K, **_SPLU_OPTS)
    sol = lu.solve(np.concatenate([np.zeros(ops.n_free), rhs_c]))
    return ops.field_from_free(sol[: ops.n_free], t=f.t, n=f.n)


def trace_shift_error(ops: FieldOps, f: DiscreteField, rho1, rho2, n_quad=None):
    """Compare a field along two interface-to-domain curves (graphs over z).

    rho1, rho2: physical r-positions on z-nodes (equal at the ends).  Returns
    (measured, bound_grad_l2, bound_grad_inf):
        measured       L2(z) norm of |u(curve1) - u(curve2)|
        bound_grad_l2  ||rho1 - rho2||_inf * ||grad u||_{L2(domain)}
        bound_grad_inf ||rho1 - rho2||_{L2} * ||grad u||_{L_inf(domain)}
    """
    g = ops.grid
    zn, _ = g.node_coords()
    rho1 = np.asarray(rho1, float)
    rho2 = np.asarray(rho2, float)
    J = ops.m.J_at(zn)
    pts1 = np.column_stack([zn, np.clip(rho1 / J, 0, 1)])
    pts2 = np.column_stack([zn, np.clip(rho2 / J, 0, 1)])
    d2 = np.zeros(len(zn))
    for comp in ("uz", "ur"):
        a = ops.sample(f, comp, pts1, zero_outside=False)
        b = ops.sample(f, comp, pts2, zero_outside=False)
        d2 += (a - b) ** 2
    w = np.full(len(zn), g.hz)
    w[0] = w[-1] = g.hz / 2
    measured = math.sqrt(float(np.sum(w * d2)))
    gap = rho1 - rho2
    gap_inf = float(np.max(np.abs(gap)))
    gap_l2 = math.sqrt(float(np.sum(w * gap * gap)))
    x = f.faces_vector()
    h1semi = math.sqrt(float(x @ (ops.stiffness_h1() @ x)))
    ginf = grad_linf(ops, f)
    return measured, gap_inf * h1semi, gap_l2 * ginf


# ──────────────────────────────────────────────────────────────────────
#  smooth random fields (shared by tests and the stochastic diagnostics)
# ──────────────────────────────────────────────────────────────────────

def random_divfree_field(ops: FieldOps, rng, n_modes=4, scale=1.0, with_trace=True):
    """Random smooth field from low-order modes, projected to the constraint."""
    g = ops.grid
    zn, rn = g.node_coords()
    Z, Rr = np.meshgrid(zn, rn, indexing="ij")
    psi = np.zeros_like(Z)
    for _ in range(n_modes):
        kz = rng.integers(1, 4)
        kr = rng.integers(1, 4)
        amp = rng.normal(0.0, scale)
        psi += amp * np.sin(math.pi * kz * Z / g.L) * np.sin(math.pi * kr * Rr)
    uz = np.diff(psi, axis=1) / g.hr
    ur = -np.diff(psi, axis=0) / g.hz
    v = None
    if ops.layout == "fsi":
        v = np.zeros(g.nz + 1)
        if with_trace:
            for k in range(1, 4):
                v += rng.normal(0.0, scale) * np.sin(math.pi * k * zn / g.L) ** 2
        ur[:, -1] = 0.5 * (v[:-1] + v[1:])
    f = DiscreteField(grid=g, uz=uz, ur=ur, metric=ops.metric, v=v)
    return leray_project(ops, f)


# ──────────────────────────────────────────────────────────────────────
#  field dumps (plain text)
# ──────────────────────────────────────────────────────────────────────

def write_field(path, f: DiscreteField, dt=0.0):
    """Plain-text dump: header 'nz nr n dt', then uz rows, then ur rows."""
    g = f.grid
    with open(path, "w") as fh:
        fh.write(f"{g.nz} {g.nr} {f.n} {float(dt)!r}\n")
        for row in f.uz:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        for row in f.ur:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_field(path, L=1.0):
    with open(path) as fh:
        nz, nr, n, dt = fh.readline().split()
        nz, nr, n = int(nz), int(nr), int(n)
        rows = [np.array([float(v) for v in fh.readline().split()]) for _ in range(nz + 1)]
        uz = np.vstack(rows)
        rows = [np.array([float(v) for v in fh.readline().split()]) for _ in range(nz)]
        ur = np.vstack(rows)
    f = DiscreteField(grid=Grid(nz, nr, L), uz=uz, ur=ur, n=n)
    return f, float(dt)
