"""Stationary five-species convection-reaction-diffusion solver.

Species ordering (0-based indices in code, 1-based in formulas): free calcium,
free albumin binding sites, calcium-albumin, citrate, calcium-citrate.
Species 1 and 2 (albumin-related) do not cross the membrane and live on the
blood channel only; the other three are posed on the whole section with a
piecewise membrane diffusivity alpha_i * D_blood_i and a sieving factor on
membrane convection.

Discretization: P1 Galerkin on the structured triangulation, all integrals
r-weighted.  Diffusion uses exact centroid integration, convection a midedge
rule, and the reaction term a vertex-lumped r-weighted mass so the mass-action
conservation identities hold nodewise and the Newton Jacobian is exact.  The
nonlinear system is solved by Newton in variational form: each step solves

    grad_F(c_n) c_{n+1} = grad_F(c_n) c_n - F(c_n)

with Dirichlet rows eliminated to identity rows carrying the inlet data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigurationError, NewtonError, SolverError
from .flow import VelocityField
from .linalg import SparseMatrix, solve_linear
from .mesh import AxiGeometry, Boundary, Mesh, Subdomain, boundary_vertices

N_SPECIES = 5
CROSSES_MEMBRANE = (True, False, False, True, True)


# -- configuration types --------------------------------------------------------

@dataclass(frozen=True)
class ReactionParams:
    """Mass-action constants of the reversible Ca-albumin / Ca-citrate bindings.

    Physical runs use strictly positive deltas; zero is accepted so the
    linear (reaction-free coupling) regime remains expressible.
    """

    delta1: float
    delta2: float
    delta3: float
    Fd: float

    def __post_init__(self):
        for name in ("delta1", "delta2", "delta3"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"reaction constant {name} must be >= 0")
        if not self.Fd > 0:
            raise ConfigurationError("reaction scaling Fd must be > 0")


@dataclass(frozen=True)
class SpeciesConfig:
    """Per-species diffusion, membrane fraction and sieving data.

    ``alpha`` holds the membrane diffusivity as a fraction of the blood-phase
    one; alpha_2 = alpha_3 = 0 (albumin species stay in blood) and
    alpha_4 = alpha_5 (citrate and calcium-citrate diffuse alike).
    """

    D_blood: tuple
    D_dialysate: tuple
    alpha: tuple
    sieving: tuple

    def __post_init__(self):
        for name in ("D_blood", "D_dialysate", "alpha", "sieving"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (N_SPECIES,):
                raise ConfigurationError(f"{name} must have {N_SPECIES} entries")
            object.__setattr__(self, name, tuple(v))
        if self.alpha[1] != 0.0 or self.alpha[2] != 0.0:
            raise ConfigurationError("albumin species must have alpha_2 = alpha_3 = 0")
        if self.alpha[3] != self.alpha[4]:
            raise ConfigurationError("citrate species must share alpha_4 = alpha_5")
        if any(a < 0 for a in self.alpha):
            raise ConfigurationError("membrane fractions must be nonnegative")
        if any(not (0.0 <= s <= 1.0) for s in self.sieving):
            raise ConfigurationError("sieving factors must lie in [0, 1]")

    def with_beta(self, beta1: float, beta2: float) -> "SpeciesConfig":
        """Embed the identifiable pair as alpha = (beta1, 0, 0, beta2, beta2)."""
        return replace(self, alpha=(float(beta1), 0.0, 0.0, float(beta2), float(beta2)))


@dataclass(frozen=True)
class TransportConfig:
    Pe: float
    eps2: float
    species: SpeciesConfig
    reactions: ReactionParams
    newton_tol: float = 1e-4
    newton_max_iter: int = 25
    streamline_diffusion: bool = False

    def __post_init__(self):
        if not self.Pe > 0:
            raise ConfigurationError("Peclet number must be positive")
        if self.eps2 < 0:
            raise ConfigurationError("eps2 must be nonnegative")
        if not self.newton_tol > 0:
            raise ConfigurationError("newton_tol must be positive")


@dataclass(frozen=True)
class BoundaryData:
    """Inlet concentrations: blood side on the left, dialysate on the right.

    Dialysate entries for the albumin species are ignored (those species do
    not exist outside the blood channel).
    """

    inlet_blood: tuple
    inlet_dialysate: tuple

    def __post_init__(self):
        for name in ("inlet_blood", "inlet_dialysate"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (N_SPECIES,):
                raise ConfigurationError(f"{name} must have {N_SPECIES} entries")
            if np.any(v < 0):
                raise ConfigurationError(f"{name} must be nonnegative")
            object.__setattr__(self, name, tuple(v))


class ConcentrationField:
    """Five nodal scalar fields; albumin species are hard zeros outside blood."""

    def __init__(self, mesh: Mesh, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != (N_SPECIES, mesh.n_vertices):
            raise ConfigurationError(
                f"expected shape {(N_SPECIES, mesh.n_vertices)}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("concentration field contains non-finite entries")
        self.mesh = mesh
        self.values = values

    def flat(self) -> np.ndarray:
        """Interleaved dof vector: entry 5*node + species."""
        return self.values.T.reshape(-1).copy()

    @classmethod
    def from_flat(cls, mesh: Mesh, flat: np.ndarray) -> "ConcentrationField":
        return cls(mesh, np.asarray(flat, float).reshape(mesh.n_vertices, N_SPECIES).T)

    def copy(self) -> "ConcentrationField":
        return ConcentrationField(self.mesh, self.values.copy())


@dataclass
class NewtonResult:
    converged: bool
    n_solves: int
    trace: list


# -- reaction kinetics -----------------------------------------------------------

def reaction_source(c, rp: ReactionParams) -> np.ndarray:
    """Net production rates of the five species (columns allowed: c is (5,)
    or (5, N)).

    Built from the two net binding rates so the conservation identities
    F1 + (F3 + F5) = 0, F2 + F3 = 0 and F4 + F5 = 0 hold exactly in floating
    point (total calcium, albumin sites and citrate are conserved).
    """
    c = np.asarray(c, dtype=float)
    c1, c2, c3, c4, c5 = c
    f3 = (-c3 + rp.delta1 * c1 * c2) / rp.Fd          # net Ca-Alb formation
    f5 = (-rp.delta2 * c5 + rp.delta3 * c1 * c4) / rp.Fd  # net Ca-Cit formation
    return np.stack([-(f3 + f5), -f3, f3, -f5, f5])


def reaction_jacobian(c, rp: ReactionParams) -> np.ndarray:
    """Exact Jacobian of reaction_source: shape (5, 5) or (5, 5, N).

    Rows mirror the reaction_source construction, so the conservation
    identities differentiate exactly: row1 + (row3 + row5) = 0 etc.
    """
    c = np.asarray(c, dtype=float)
    c1, c2, c3, c4, c5 = c
    z = np.zeros_like(c1)
    one = np.ones_like(c1)
    d1, d2, d3 = rp.delta1, rp.delta2, rp.delta3
    row3 = np.stack([d1 * c2, d1 * c1, -one, z, z]) / rp.Fd
    row5 = np.stack([d3 * c4, z, z, d3 * c1, -d2 * one]) / rp.Fd
    return np.stack([-(row3 + row5), -row3, row3, -row5, row5])


# -- FEM data ---------------------------------------------------------------------

class _FemData:
    """Per-mesh geometric quantities used by every assembly."""

    def __init__(self, mesh: Mesh):
        tri = mesh.triangles
        p = mesh.vertices[tri]
        x1, r1 = p[:, 0, 0], p[:, 0, 1]
        x2, r2 = p[:, 1, 0], p[:, 1, 1]
        x3, r3 = p[:, 2, 0], p[:, 2, 1]
        det = (x2 - x1) * (r3 - r1) - (x3 - x1) * (r2 - r1)
        self.area = 0.5 * det
        self.rbar = (r1 + r2 + r3) / 3.0
        self.bx = np.stack([(r2 - r3), (r3 - r1), (r1 - r2)], axis=1) / det[:, None]
        self.br = np.stack([(x3 - x2), (x1 - x3), (x2 - x1)], axis=1) / det[:, None]
        # int_T r phi_a dA = area * (2 r_a + r_b + r_c) / 12 (exact)
        rloc = p[:, :, 1]
        self.mass_tri = self.area[:, None] * (rloc + rloc.sum(axis=1, keepdims=True)) / 12.0
        # midedge quadrature (degree-2 exact): points opposite each vertex
        self.phi_q = np.array([[0.5, 0.5, 0.0],
                               [0.0, 0.5, 0.5],
                               [0.5, 0.0, 0.5]])  # (q, a)
        self.r_q = rloc @ self.phi_q.T  # (T, q)

        self.is_blood = mesh.subdomain_of_triangle == Subdomain.BLOOD
        self.is_membrane = mesh.subdomain_of_triangle == Subdomain.MEMBRANE

        lump = np.zeros(mesh.n_vertices)
        np.add.at(lump, tri.ravel(), self.mass_tri.ravel())
        self.lump_all = lump
        lump_b = np.zeros(mesh.n_vertices)
        bt = tri[self.is_blood]
        np.add.at(lump_b, bt.ravel(), self.mass_tri[self.is_blood].ravel())
        self.lump_blood = lump_b


_FEM_CACHE: dict = {}
_FEM_CACHE_LIMIT = 8  # few distinct meshes alive at once; bound the memory


def _fem_data(mesh: Mesh) -> _FemData:
    key = id(mesh)
    data = _FEM_CACHE.get(key)
    if data is None or data[0] is not mesh:
        data = (mesh, _FemData(mesh))
        _FEM_CACHE[key] = data
        while len(_FEM_CACHE) > _FEM_CACHE_LIMIT:
            _FEM_CACHE.pop(next(iter(_FEM_CACHE)))
    return data[1]


# -- solver ------------------------------------------------------------------------

class TransportSolver:
    """Assembles and solves the coupled stationary system for fixed velocity,
    coefficients and boundary data."""

    def __init__(self, mesh: Mesh, velocity: VelocityField, cfg: TransportConfig,
                 bd: BoundaryData, dirichlet_override=None):
        if velocity.mesh is not mesh:
            raise ConfigurationError("velocity field was built on a different mesh")
        self.mesh = mesh
        self.velocity = velocity
        self.cfg = cfg
        self.bd = bd
        self.fem = _fem_data(mesh)
        self.n_dof = N_SPECIES * mesh.n_vertices
        self._build_dirichlet(dirichlet_override)
        self._build_masses()
        self._build_linear_operator()
        self._build_reaction_pattern()

    # .. boundary bookkeeping ..

    def _build_dirichlet(self, override):
        mesh = self.mesh
        r = mesh.vertices[:, 1]
        inlet_b = boundary_vertices(mesh, Boundary.INLET_BLOOD)
        inlet_d = boundary_vertices(mesh, Boundary.INLET_DIALYSATE)
        non_blood = np.flatnonzero(r > mesh.geom.R1 + 1e-14)

        dofs, vals = [], []
        for s in range(N_SPECIES):
            gb = self.bd.inlet_blood[s]
            dofs.append(N_SPECIES * inlet_b + s)
            vals.append(np.full(inlet_b.size, gb))
            if CROSSES_MEMBRANE[s]:
                gd = self.bd.inlet_dialysate[s]
                dofs.append(N_SPECIES * inlet_d + s)
                vals.append(np.full(inlet_d.size, gd))
            else:
                dofs.append(N_SPECIES * non_blood + s)
                vals.append(np.zeros(non_blood.size))
        self.dirichlet_dofs = np.concatenate(dofs)
        self.dirichlet_vals = np.concatenate(vals)
        if override is not None:
            override = np.asarray(override, dtype=float)
            if override.shape != (N_SPECIES, mesh.n_vertices):
                raise ConfigurationError("dirichlet override must be (5, n_vertices)")
            flat = override.T.reshape(-1)
            self.dirichlet_vals = flat[self.dirichlet_dofs]
        # deduplicate, keeping the first assignment per dof
        _, first = np.unique(self.dirichlet_dofs, return_index=True)
        self.dirichlet_dofs = self.dirichlet_dofs[np.sort(first)]
        self.dirichlet_vals = self.dirichlet_vals[np.sort(first)]
        self.is_dirichlet = np.zeros(self.n_dof, dtype=bool)
        self.is_dirichlet[self.dirichlet_dofs] = True
        self.g_vec = np.zeros(self.n_dof)
        self.g_vec[self.dirichlet_dofs] = self.dirichlet_vals

    def _build_masses(self):
        fem = self.fem
        mass = np.empty((N_SPECIES, self.mesh.n_vertices))
        for s in range(N_SPECIES):
            mass[s] = fem.lump_all if CROSSES_MEMBRANE[s] else fem.lump_blood
        self.mass_species = mass
        self.norm_mass = np.tile(fem.lump_all[:, None], (1, N_SPECIES)).reshape(-1)

    # .. linear operator (convection + diffusion + interface term) ..

    def _species_coefficients(self):
        cfg = self.cfg
        sc = cfg.species
        fem = self.fem
        T = self.mesh.n_triangles
        D_loc = np.empty((N_SPECIES, T))
        S_loc = np.ones((N_SPECIES, T))
        for s in range(N_SPECIES):
            D = np.full(T, sc.D_dialysate[s])
            D[fem.is_membrane] = sc.alpha[s] * sc.D_blood[s]
            D[fem.is_blood] = sc.D_blood[s]
            D_loc[s] = D
            S_loc[s, fem.is_membrane] = sc.sieving[s]
        return D_loc, S_loc

    def _build_linear_operator(self):
        mesh, fem, cfg = self.mesh, self.fem, self.cfg
        tri = mesh.triangles
        ux = self.velocity.u_x[tri]  # (T, 3)
        ur = self.velocity.u_r[tri]
        D_loc, S_loc = self._species_coefficients()

        w_diff = fem.area * fem.rbar
        rows_all, cols_all, vals_all = [], [], []

        # convection at midedge points: Ue (T, q, 2)
        ux_q = ux @ fem.phi_q.T
        ur_q = ur @ fem.phi_q.T
        wq = (fem.area / 3.0)[:, None] * fem.r_q  # (T, q)

        for s in range(N_SPECIES):
            active = slice(None) if CROSSES_MEMBRANE[s] else fem.is_blood
            a_tri = tri[active]
            a_bx = fem.bx[active]
            a_br = fem.br[active]
            Dw = (D_loc[s] * w_diff)[active]
            ke = Dw[:, None, None] * (
                (cfg.eps2 / cfg.Pe) * a_bx[:, :, None] * a_bx[:, None, :]
                + (1.0 / cfg.Pe) * a_br[:, :, None] * a_br[:, None, :])
            # convection: sum_q w_q phi_a(q) * S * (Ux(q) bx_b + Ur(q) br_b)
            Sfac = S_loc[s][active]
            wq_a = wq[active]
            conv_b = (ux_q[active][:, :, None] * a_bx[:, None, :]
                      + ur_q[active][:, :, None] * a_br[:, None, :])  # (T, q, b)
            ce = np.einsum("tq,qa,tqb->tab", wq_a, fem.phi_q, conv_b)
            ce *= Sfac[:, None, None]
            if cfg.streamline_diffusion:
                ce += self._supg_element(s, active, a_bx, a_br, D_loc)
            el = ke + ce
            r_idx = np.repeat(a_tri, 3, axis=1).ravel()
            c_idx = np.tile(a_tri, (1, 3)).ravel()
            rows_all.append(N_SPECIES * r_idx + s)
            cols_all.append(N_SPECIES * c_idx + s)
            vals_all.append(el.ravel())

        rows, cols, vals = self._interface_term()
        rows_all.append(rows)
        cols_all.append(cols)
        vals_all.append(vals)

        rows = np.concatenate(rows_all)
        cols = np.concatenate(cols_all)
        vals = np.concatenate(vals_all)
        keep = ~self.is_dirichlet[rows]
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        rows = np.concatenate([rows, self.dirichlet_dofs])
        cols = np.concatenate([cols, self.dirichlet_dofs])
        vals = np.concatenate([vals, np.ones(self.dirichlet_dofs.size)])
        self._lin_rows = rows
        self._lin_cols = cols
        self._lin_vals = vals
        self.L_bc = sp.coo_matrix((vals, (rows, cols)),
                                  shape=(self.n_dof, self.n_dof)).tocsr()

    def _supg_element(self, s, active, a_bx, a_br, D_loc):
        """Streamline-diffusion stabilization (optional guardrail, off by default)."""
        fem, cfg = self.fem, self.cfg
        tri = self.mesh.triangles
        uxc = self.velocity.u_x[tri].mean(axis=1)[active]
        urc = self.velocity.u_r[tri].mean(axis=1)[active]
        speed = np.sqrt(uxc**2 + urc**2)
        h = np.sqrt(2.0 * fem.area[active])
        D_eff = np.maximum(D_loc[s][active] / cfg.Pe, 1e-300)
        peh = speed * h / (2.0 * D_eff)
        xi = np.clip(1.0 - 1.0 / np.maximum(peh, 1e-30), 0.0, None)
        tau = np.where(speed > 0, h / (2.0 * speed + 1e-300) * xi, 0.0)
        w = (fem.area * fem.rbar)[active] * tau
        adv = uxc[:, None] * a_bx + urc[:, None] * a_br  # (T, a)
        return w[:, None, None] * adv[:, :, None] * adv[:, None, :]

    def _interface_term(self):
        """-int_{Gamma_bm} r U_r c phi dx for the non-crossing species: the
        flux-consistent wall condition (D/Pe) d_r c = c U_r, which makes the
        total albumin flux through the membrane wall vanish."""
        mesh = self.mesh
        edges = mesh.edges_with_tag(Boundary.BLOOD_MEMBRANE)
        v0, v1 = edges[:, 0], edges[:, 1]
        p0, p1 = mesh.vertices[v0], mesh.vertices[v1]
        h = np.abs(p1[:, 0] - p0[:, 0])
        R1 = mesh.geom.R1
        gp = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
        gw = np.array([0.5, 0.5])
        ur0 = self.velocity.u_r[v0]
        ur1 = self.velocity.u_r[v1]
        rows, cols, vals = [], [], []
        phis = np.stack([1.0 - gp, gp])  # (a, g)
        for s in range(N_SPECIES):
            if CROSSES_MEMBRANE[s]:
                continue
            for a, va in enumerate((v0, v1)):
                for b, vb in enumerate((v0, v1)):
                    contrib = np.zeros(edges.shape[0])
                    for g in range(2):
                        ur_g = ur0 * (1 - gp[g]) + ur1 * gp[g]
                        contrib += gw[g] * ur_g * phis[a, g] * phis[b, g]
                    rows.append(N_SPECIES * va + s)
                    cols.append(N_SPECIES * vb + s)
                    vals.append(-R1 * h * contrib)
        return (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))

    # .. reaction coupling ..

    def _build_reaction_pattern(self):
        n_v = self.mesh.n_vertices
        nodes = np.arange(n_v)
        i_idx = np.repeat(np.arange(N_SPECIES), N_SPECIES)
        j_idx = np.tile(np.arange(N_SPECIES), N_SPECIES)
        rows = (N_SPECIES * nodes[None, :] + i_idx[:, None]).ravel()
        cols = (N_SPECIES * nodes[None, :] + j_idx[:, None]).ravel()
        keep = ~self.is_dirichlet[rows]
        self._rx_rows = rows[keep]
        self._rx_cols = cols[keep]
        self._rx_keep = keep
        # row-species mass, laid out pair-major like the pattern arrays
        self._rx_mass = np.repeat(self.mass_species, N_SPECIES, axis=0)  # (25, n_v)

    # .. residual / jacobian / newton ..

    def residual(self, c_flat, source_nodal=None):
        c_nodal = c_flat.reshape(-1, N_SPECIES).T
        f = reaction_source(c_nodal, self.cfg.reactions)
        if source_nodal is not None:
            f = f + source_nodal
        rhs_nl = (self.mass_species * f).T.reshape(-1)
        rhs_nl[self.is_dirichlet] = 0.0
        return self.L_bc @ c_flat - rhs_nl - self.g_vec

    def jacobian(self, c_flat) -> sp.csr_matrix:
        c_nodal = c_flat.reshape(-1, N_SPECIES).T
        jf = reaction_jacobian(c_nodal, self.cfg.reactions)  # (5, 5, n_v)
        vals = (-(self._rx_mass * jf.reshape(N_SPECIES * N_SPECIES, -1))).ravel()
        vals = vals[self._rx_keep]
        rows = np.concatenate([self._lin_rows, self._rx_rows])
        cols = np.concatenate([self._lin_cols, self._rx_cols])
        data = np.concatenate([self._lin_vals, vals])
        return sp.coo_matrix((data, (rows, cols)),
                             shape=(self.n_dof, self.n_dof)).tocsr()

    def initial_field(self) -> ConcentrationField:
        """Constant extension of inlet blood values (dialysate inlet values on
        the dialysate channel for the crossing species)."""
        mesh = self.mesh
        r = mesh.vertices[:, 1]
        vals = np.zeros((N_SPECIES, mesh.n_vertices))
        in_dialysate = r > mesh.geom.R2 + 1e-14
        in_blood = r <= mesh.geom.R1 + 1e-14
        for s in range(N_SPECIES):
            if CROSSES_MEMBRANE[s]:
                vals[s] = self.bd.inlet_blood[s]
                vals[s, in_dialysate] = self.bd.inlet_dialysate[s]
            else:
                vals[s, in_blood] = self.bd.inlet_blood[s]
        return ConcentrationField(mesh, vals)

    def project_dirichlet(self, c_flat):
        out = c_flat.copy()
        out[self.dirichlet_dofs] = self.dirichlet_vals
        return out

    def newton_norm(self, delta_flat):
        return float(np.sqrt(np.sum(self.norm_mass * delta_flat**2)))

    def step(self, c_flat, source_nodal=None):
        A = self.jacobian(c_flat)
        rhs = A @ c_flat - self.residual(c_flat, source_nodal)
        return solve_linear(SparseMatrix(A), rhs)

    def solve(self, c0: ConcentrationField | None = None, source_nodal=None) -> tuple:
        cfg = self.cfg
        c_prev = (c0.flat() if c0 is not None else self.initial_field().flat())
        c_prev = self.project_dirichlet(c_prev)
        trace = []
        try:
            c_next = self.step(c_prev, source_nodal)
        except SolverError as exc:
            raise NewtonError(f"linear solve failed at Newton start: {exc}",
                              trace=trace) from exc
        trace.append(self.newton_norm(c_next - c_prev))
        n = 0
        while n <= cfg.newton_max_iter and trace[-1] > cfg.newton_tol:
            n += 1
            c_prev = c_next
            try:
                c_next = self.step(c_prev, source_nodal)
            except SolverError as exc:
                raise NewtonError(f"linear solve failed at Newton iteration {n}: {exc}",
                                  trace=trace) from exc
            if not np.all(np.isfinite(c_next)):
                raise NewtonError(f"Newton iterate diverged at iteration {n}", trace=trace)
            trace.append(self.newton_norm(c_next - c_prev))
        if trace[-1] > cfg.newton_tol:
            raise NewtonError(
                f"Newton did not reach tol {cfg.newton_tol:g} in "
                f"{cfg.newton_max_iter} iterations (last update {trace[-1]:.3e})",
                trace=trace)
        return ConcentrationField.from_flat(self.mesh, c_next), \
            NewtonResult(converged=True, n_solves=len(trace), trace=trace)


def assemble_newton_system(mesh: Mesh, velocity: VelocityField, cfg: TransportConfig,
                           bd: BoundaryData, c_n: ConcentrationField):
    """One linearized Newton system at c_n: (matrix, right-hand side).

    Dirichlet rows are identity rows whose right-hand side carries the
    imposed inlet value.
    """
    solver = TransportSolver(mesh, velocity, cfg, bd)
    c_flat = solver.project_dirichlet(c_n.flat())
    A = solver.jacobian(c_flat)
    rhs = A @ c_flat - solver.residual(c_flat)
    return SparseMatrix(A), rhs


def newton_solve(mesh: Mesh, velocity: VelocityField, cfg: TransportConfig,
                 bd: BoundaryData, c0: ConcentrationField | None = None,
                 source_nodal=None, dirichlet_override=None):
    """Solve the stationary coupled system by the variational Newton method.

    Returns (field, NewtonResult) with the trace of r-weighted L2 update
    norms; raises NewtonError (carrying the partial trace) on linear-solver
    failure or non-convergence.
    """
    solver = TransportSolver(mesh, velocity, cfg, bd, dirichlet_override=dirichlet_override)
    return solver.solve(c0=c0, source_nodal=source_nodal)


# -- observable ---------------------------------------------------------------------

def outlet_concentration(c: ConcentrationField, mesh: Mesh, geom: AxiGeometry) -> np.ndarray:
    """Flow-section average at the blood outlet: (2 R^2 / R1^2) int r c_i dr
    over x = L, 0 <= r <= R1, integrated exactly for P1 traces."""
    idx = boundary_vertices(mesh, Boundary.OUTLET_BLOOD)
    r = mesh.vertices[idx, 1]
    ra, rb = r[:-1], r[1:]
    h = rb - ra
    out = np.empty(N_SPECIES)
    for s in range(N_SPECIES):
        ca = c.values[s, idx[:-1]]
        cb = c.values[s, idx[1:]]
        # exact integral of r * (linear c) over each edge
        out[s] = np.sum(h * ((2 * ra + rb) * ca + (ra + 2 * rb) * cb) / 6.0)
    return out * 2.0 * geom.R**2 / geom.R1**2


def export_field_csv(c: ConcentrationField, mesh: Mesh, path):
    """Node table (x, r, c1..c5) in vertex order."""
    with open(path, "w") as fh:
        fh.write("x,r,c1,c2,c3,c4,c5\n")
        for k in range(mesh.n_vertices):
            x, r = mesh.vertices[k]
            row = ",".join(repr(float(v)) for v in c.values[:, k])
            fh.write(f"{x!r},{r!r},{row}\n")
