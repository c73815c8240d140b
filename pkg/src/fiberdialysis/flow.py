"""Velocity field on the fiber cross-section from patient hydraulic data.

The reduced consistent flow model: Poiseuille-type axial profiles in each
channel scaled to the prescribed flow rates, Darcy radial flux across the
membrane driven by the interface pressure difference, and channel radial
velocities reconstructed from the axisymmetric continuity equation.  With
interface pressures linear in x, every piece below is divergence-free in the
pointwise sense, which is what the transport solver relies on.

Orientation is counter-current: blood flows in +x (inlet at x = 0), dialysate
in -x (inlet at x = L).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .exceptions import CalibrationError, ConfigurationError
from .linalg import SparseMatrix, solve_linear
from .mesh import AxiGeometry, Boundary, Mesh, Subdomain, boundary_vertices

_GAUSS4_T, _GAUSS4_W = np.polynomial.legendre.leggauss(4)


@dataclass(frozen=True)
class HydraulicState:
    """Nondimensional pressures, membrane mobility and prescribed flow rates."""

    p_in_b: float
    p_out_b: float
    p_in_d: float
    p_out_d: float
    K_over_mu: float
    Q_b: float
    Q_d: float

    def __post_init__(self):
        if not (self.Q_b > 0 and self.Q_d > 0):
            raise ConfigurationError(
                f"flow rates must be positive, got Q_b={self.Q_b}, Q_d={self.Q_d}")
        if self.K_over_mu < 0:
            raise ConfigurationError(f"membrane mobility must be >= 0, got {self.K_over_mu}")


class VelocityField:
    """Nodal velocity (u_x, u_r) plus the analytic region-wise evaluators.

    The divergence residual reported by the constructor is the largest
    per-triangle axisymmetric divergence integral

        | oint_{dT} r U . n ds | / (area_T * rbar_T)

    i.e. a local mean of  d_x U_x + (1/r) d_r (r U_r),  evaluated with
    4-point Gauss quadrature on each edge of every triangle.  When analytic
    evaluators are available they are used (the nodal values are samples of
    the same field); otherwise the P1 interpolant is integrated, which is
    exact for it.
    """

    def __init__(self, mesh: Mesh, u_x, u_r, evaluator=None, div_tol=1e-8):
        self.mesh = mesh
        self.u_x = np.asarray(u_x, dtype=float)
        self.u_r = np.asarray(u_r, dtype=float)
        if self.u_x.shape != (mesh.n_vertices,) or self.u_r.shape != (mesh.n_vertices,):
            raise ConfigurationError("velocity arrays must be nodal on the given mesh")
        self._evaluator = evaluator
        self.div_tol = float(div_tol)
        self.max_abs_ux = float(np.max(np.abs(self.u_x))) if self.u_x.size else 0.0
        self.div_residual = self._divergence_residual()
        scale = self.max_abs_ux if self.max_abs_ux > 0 else 1.0
        if self.div_residual > self.div_tol * scale:
            raise ConfigurationError(
                f"velocity field violates the divergence invariant: "
                f"residual {self.div_residual:.3e} > {self.div_tol:.1e} * max|U_x|={scale:.3e}")

    def evaluate(self, x, r, region):
        """Analytic (u_x, u_r) at points of a given subdomain, if available."""
        if self._evaluator is None:
            raise ConfigurationError("this velocity field carries no analytic evaluator")
        return self._evaluator(np.asarray(x, float), np.asarray(r, float), region)

    def _edge_flux(self, pa, pb, region):
        # int_edge r U.n ds with 4-point Gauss; n is the -90deg rotation of (pb-pa)
        t = 0.5 * (_GAUSS4_T + 1.0)
        xs = pa[:, 0, None] + t[None, :] * (pb[:, 0] - pa[:, 0])[:, None]
        rs = pa[:, 1, None] + t[None, :] * (pb[:, 1] - pa[:, 1])[:, None]
        ux, ur = np.empty_like(xs), np.empty_like(xs)
        for reg in (Subdomain.BLOOD, Subdomain.MEMBRANE, Subdomain.DIALYSATE):
            m = region == reg
            if np.any(m):
                ux[m], ur[m] = self._evaluator(xs[m], rs[m], reg)
        ex = pb[:, 0] - pa[:, 0]
        er = pb[:, 1] - pa[:, 1]
        nx, nr = er, -ex  # length-scaled outward normal for CCW triangles
        fluxdens = rs * (ux * nx[:, None] + ur * nr[:, None])
        return 0.5 * fluxdens @ _GAUSS4_W

    def _divergence_residual(self):
        mesh = self.mesh
        tri = mesh.triangles
        verts = mesh.vertices
        region = mesh.subdomain_of_triangle
        areas = mesh.triangle_areas()
        rbar = verts[tri, 1].mean(axis=1)
        rbar = np.maximum(rbar, 1e-30)
        total = np.zeros(mesh.n_triangles)
        if self._evaluator is not None:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                pa = verts[tri[:, a]]
                pb = verts[tri[:, b]]
                total += self._edge_flux(pa, pb, region)
        else:
            # exact per-triangle integral of r*d_x(U_x) + d_r(r*U_r) for the
            # P1 interpolant: the integrand is linear, centroid rule is exact
            p = verts[tri]
            ux = self.u_x[tri]
            ur = self.u_r[tri]
            x1, r1 = p[:, 0, 0], p[:, 0, 1]
            x2, r2 = p[:, 1, 0], p[:, 1, 1]
            x3, r3 = p[:, 2, 0], p[:, 2, 1]
            det = (x2 - x1) * (r3 - r1) - (x3 - x1) * (r2 - r1)
            bx = np.stack([(r2 - r3), (r3 - r1), (r1 - r2)], axis=1) / det[:, None]
            br = np.stack([(x3 - x2), (x1 - x3), (x2 - x1)], axis=1) / det[:, None]
            dux_dx = (bx * ux).sum(axis=1)
            dur_dr = (br * ur).sum(axis=1)
            ur_c = ur.mean(axis=1)
            total = areas * (rbar * dux_dx + ur_c + rbar * dur_dr)
        return float(np.max(np.abs(total) / (areas * rbar)))


# -- membrane pressure (P1 FEM) ------------------------------------------------

def _as_profile(values, n):
    if callable(values):
        return values
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if arr.shape != (n,):
        raise ConfigurationError(f"interface profile must have {n} values, got {arr.shape}")
    return arr


def solve_membrane_pressure(mesh: Mesh, p_on_bm, p_on_dm) -> np.ndarray:
    """P1 solution of d_xx p + (1/r) d_r (r d_r p) = 0 on the membrane.

    Dirichlet data on the blood/membrane and dialysate/membrane interfaces
    (given per interface vertex, ordered by increasing x, or as a callable of
    x, or a scalar); homogeneous Neumann on the lateral membrane ends.
    Returns a full-length nodal array; entries outside the closed membrane
    are NaN.  The discrete solution satisfies the maximum principle up to
    solver roundoff.
    """
    mem_tris = mesh.triangles[mesh.subdomain_of_triangle == Subdomain.MEMBRANE]
    if mem_tris.size == 0:
        raise ConfigurationError("mesh has no membrane subdomain")

    bm = boundary_vertices(mesh, Boundary.BLOOD_MEMBRANE)
    dm = boundary_vertices(mesh, Boundary.DIALYSATE_MEMBRANE)
    pb = _as_profile(p_on_bm, bm.size)
    pd = _as_profile(p_on_dm, dm.size)
    if callable(pb):
        pb = np.asarray(pb(mesh.vertices[bm, 0]), dtype=float)
    if callable(pd):
        pd = np.asarray(pd(mesh.vertices[dm, 0]), dtype=float)

    nodes = np.unique(mem_tris)
    glob2loc = -np.ones(mesh.n_vertices, dtype=np.int64)
    glob2loc[nodes] = np.arange(nodes.size)
    ltri = glob2loc[mem_tris]

    p = mesh.vertices[mem_tris]
    x1, r1 = p[:, 0, 0], p[:, 0, 1]
    x2, r2 = p[:, 1, 0], p[:, 1, 1]
    x3, r3 = p[:, 2, 0], p[:, 2, 1]
    det = (x2 - x1) * (r3 - r1) - (x3 - x1) * (r2 - r1)
    area = 0.5 * det
    rbar = (r1 + r2 + r3) / 3.0
    bx = np.stack([(r2 - r3), (r3 - r1), (r1 - r2)], axis=1) / det[:, None]
    br = np.stack([(x3 - x2), (x1 - x3), (x2 - x1)], axis=1) / det[:, None]

    # int_T r grad(phi_a).grad(phi_b): gradients constant, r linear -> centroid exact
    w = (area * rbar)[:, None, None]
    ke = w * (bx[:, :, None] * bx[:, None, :] + br[:, :, None] * br[:, None, :])

    rows = np.repeat(ltri, 3, axis=1).ravel()
    cols = np.tile(ltri, (1, 3)).ravel()
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(nodes.size, nodes.size)).tocsr()

    dirichlet = np.full(nodes.size, np.nan)
    dirichlet[glob2loc[bm]] = pb
    dirichlet[glob2loc[dm]] = pd
    is_dir = np.isfinite(dirichlet)

    # eliminate Dirichlet rows/columns: P K P + I_dir, rhs = -K g on free rows
    g = np.where(is_dir, dirichlet, 0.0)
    P = sp.diags((~is_dir).astype(float))
    I_dir = sp.diags(is_dir.astype(float))
    K_final = (P @ K @ P + I_dir).tocsr()
    rhs = -(K @ g)
    rhs[is_dir] = dirichlet[is_dir]
    sol = solve_linear(SparseMatrix(K_final), rhs)

    out = np.full(mesh.n_vertices, np.nan)
    out[nodes] = sol
    return out


# -- reduced consistent velocity model -----------------------------------------

def _pressure_profiles(geom: AxiGeometry, hyd: HydraulicState):
    """Interface pressures linear in x (Poiseuille drop along each channel)."""
    L = geom.L
    pb0, pb1 = hyd.p_in_b, (hyd.p_out_b - hyd.p_in_b) / L
    pd0, pd1 = hyd.p_out_d, (hyd.p_in_d - hyd.p_out_d) / L
    return (pb0, pb1), (pd0, pd1)


class _ReducedFlow:
    """Closed forms for the reduced model; every region is divergence-free."""

    def __init__(self, geom: AxiGeometry, hyd: HydraulicState):
        self.geom = geom
        self.hyd = hyd
        R1, R2, R, L = geom.R1, geom.R2, geom.R, geom.L
        (pb0, pb1), (pd0, pd1) = _pressure_profiles(geom, hyd)
        self.lnrho = np.log(R2 / R1)
        k = hyd.K_over_mu / self.lnrho
        # membrane radial volume-flux density: r*u_r = w(x) = w0 + w1*x
        self.w0 = k * (pb0 - pd0)
        self.w1 = k * (pb1 - pd1)
        self.pb = (pb0, pb1)
        self.pd = (pd0, pd1)
        # annular Poiseuille shape in the dialysate channel, unit 2*pi*r flux
        self.A = (R**2 - R2**2) / np.log(R / R2)
        half_flux = ((R**2 - R2**2) ** 2 / 4.0
                     + self.A * (-(R**2 - R2**2) / 4.0 + (R2**2 / 2.0) * np.log(R / R2)))
        self.N = 2.0 * np.pi * half_flux

    def w(self, x):
        return self.w0 + self.w1 * x

    def W(self, x):
        """int_0^x w."""
        return self.w0 * x + 0.5 * self.w1 * x * x

    def flux_blood(self, x):
        return self.hyd.Q_b - 2.0 * np.pi * self.W(x)

    def flux_dialysate(self, x):
        """Signed axial flux (negative: flowing toward x = 0)."""
        return -self.hyd.Q_d - 2.0 * np.pi * (self.W(self.geom.L) - self.W(x))

    def net_transmembrane_flux(self):
        return 2.0 * np.pi * self.W(self.geom.L)

    def psi(self, r):
        R = self.geom.R
        return R**2 - r**2 + self.A * np.log(r / R)

    def _int_spsi(self, r):
        """int_r^R s*psi(s) ds (closed form)."""
        R = self.geom.R
        at_R = R**4 / 4.0 - self.A * R**2 / 4.0
        at_r = (R**2 * r**2 / 2.0 - r**4 / 4.0
                + self.A * (r**2 / 2.0 * np.log(r / R) - r**2 / 4.0))
        return at_R - at_r

    def __call__(self, x, r, region):
        x = np.asarray(x, float)
        r = np.asarray(r, float)
        geom, hyd = self.geom, self.hyd
        R1 = geom.R1
        if region == Subdomain.BLOOD:
            C = 2.0 * self.flux_blood(x) / (np.pi * R1**4)
            ux = C * (R1**2 - r**2)
            ur = self.w(x) * r * (2.0 * R1**2 - r**2) / R1**4
            return ux, ur
        if region == Subdomain.MEMBRANE:
            _, pb1 = self.pb
            _, pd1 = self.pd
            ux = -hyd.K_over_mu * (pb1 + (pd1 - pb1) * np.log(r / R1) / self.lnrho)
            ux = ux + 0.0 * x  # broadcast to the common shape
            ur = self.w(x) / r
            return ux, ur
        if region == Subdomain.DIALYSATE:
            ux = self.flux_dialysate(x) * self.psi(r) / self.N
            ur = 2.0 * np.pi * self.w(x) * self._int_spsi(r) / (self.N * r)
            return ux, ur
        raise ConfigurationError(f"unknown region {region!r}")


def compute_velocity_field(mesh: Mesh, geom: AxiGeometry, hyd: HydraulicState) -> VelocityField:
    """Divergence-consistent velocity from the reduced model.

    Axial profiles are Poiseuille-type scaled so the cross-sectional flux of
    blood matches Q_b (+x) and of dialysate matches Q_d (-x, counter-current);
    the membrane Darcy radial flux follows the interface pressure difference,
    and the channel radial velocities close the continuity equation, so the
    per-triangle divergence residual is at roundoff level.
    """
    flow = _ReducedFlow(geom, hyd)
    x = mesh.vertices[:, 0]
    r = mesh.vertices[:, 1]
    R1, R2 = geom.R1, geom.R2
    u_x = np.zeros(mesh.n_vertices)
    u_r = np.zeros(mesh.n_vertices)

    blood = r <= R1 + 1e-14
    mem = (r > R1 + 1e-14) & (r < R2 - 1e-14)
    dial = r >= R2 - 1e-14
    ux_b, ur_b = flow(x[blood], r[blood], Subdomain.BLOOD)
    u_x[blood], u_r[blood] = ux_b, ur_b
    if np.any(mem):
        ux_m, ur_m = flow(x[mem], r[mem], Subdomain.MEMBRANE)
        u_x[mem], u_r[mem] = ux_m, ur_m
    ux_d, ur_d = flow(x[dial], r[dial], Subdomain.DIALYSATE)
    u_x[dial], u_r[dial] = ux_d, ur_d
    # interface nodes keep the no-slip channel value u_x = 0; u_r is continuous
    u_x[np.abs(r - R1) <= 1e-14] = 0.0
    u_x[np.abs(r - R2) <= 1e-14] = 0.0
    u_r[np.abs(r) <= 1e-14] = 0.0
    u_r[np.abs(r - geom.R) <= 1e-14] = 0.0

    field = VelocityField(mesh, u_x, u_r, evaluator=flow, div_tol=1e-8)
    field.reduced_model = flow
    return field


def transmembrane_flux(field: VelocityField, n_gauss: int = 8) -> float:
    """2*pi int_0^L R1 u_r(x, R1) dx from the field's analytic evaluator."""
    geom = field.reduced_model.geom
    t, wq = np.polynomial.legendre.leggauss(n_gauss)
    xs = 0.5 * geom.L * (t + 1.0)
    _, ur = field.evaluate(xs, np.full_like(xs, geom.R1), Subdomain.MEMBRANE)
    return float(2.0 * np.pi * geom.R1 * 0.5 * geom.L * np.dot(wq, ur))


def calibrate_hydraulics(mesh: Mesh, geom: AxiGeometry, hyd0: HydraulicState,
                         target_flux: float, rel_tol: float = 1e-6,
                         max_iter: int = 50) -> HydraulicState:
    """Shift the blood/dialysate pressure levels so the simulated net
    transmembrane flux matches ``target_flux``.

    The flux is affine in the mean blood-dialysate pressure difference under
    the reduced model, so the secant iteration lands in at most two steps;
    the iteration still runs on the simulated flux rather than the closed
    form.  Raises CalibrationError when the target is unreachable (zero
    membrane mobility), reporting the achievable range.
    """
    if not np.isfinite(target_flux):
        raise CalibrationError("target transmembrane flux must be finite")

    def shifted(delta):
        return replace(hyd0,
                       p_in_b=hyd0.p_in_b + delta / 2.0,
                       p_out_b=hyd0.p_out_b + delta / 2.0,
                       p_in_d=hyd0.p_in_d - delta / 2.0,
                       p_out_d=hyd0.p_out_d - delta / 2.0)

    def flux_at(delta):
        return transmembrane_flux(compute_velocity_field(mesh, geom, shifted(delta)))

    d0, d1 = 0.0, 1.0
    f0 = flux_at(d0)
    scale = max(abs(target_flux), abs(f0), 1e-30)
    if abs(f0 - target_flux) <= rel_tol * scale:
        return shifted(d0)
    f1 = flux_at(d1)
    if abs(f1 - f0) < 1e-300:
        raise CalibrationError(
            f"target flux {target_flux!r} unreachable: model range is "
            f"[{f0!r}, {f0!r}] (zero membrane mobility?)",
            achievable_range=(f0, f0))
    scale = max(scale, abs(f1))
    for _ in range(max_iter):
        if f1 == f0:
            break
        d2 = d1 + (target_flux - f1) * (d1 - d0) / (f1 - f0)
        f2 = flux_at(d2)
        if abs(f2 - target_flux) <= rel_tol * scale:
            return shifted(d2)
        d0, f0, d1, f1 = d1, f1, d2, f2
    raise CalibrationError(
        f"hydraulic calibration did not converge to {target_flux!r} "
        f"within {max_iter} secant iterations (last flux {f1!r})")
