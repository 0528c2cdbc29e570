"""Interface identification model: state, adjoint, objective, target data.

The potential u solves div(mu grad u) = 0 on the unit square with u = 0 on
the bottom, u = 1 on the top and insulated sides; mu is elementwise constant
and determined by the region tag.  The target potential z is produced on a
frozen background mesh holding the true elliptic inclusion and treated as a
fixed (Eulerian) field: after every mesh deformation it is re-evaluated at
the new vertex positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from . import fem
from .fem import ScalarField, SparseOperator
from .mesh import (GAMMA_BOTTOM, GAMMA_TOP, InclusionShape, Mesh,
                   REGION_INCLUSION, generate_mesh)

TRUE_ELLIPSE = InclusionShape.ellipse((0.5, 0.5), (0.25, 0.125))


@dataclass(frozen=True)
class ProblemConfig:
    """Physical parameters of the reconstruction problem."""

    alpha: float = 1e-6
    mu_in: float = 1e-6
    mu_out: float = 1.0

    def __post_init__(self):
        if self.mu_in <= 0 or self.mu_out <= 0:
            raise ValueError("conductivities must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    def mu(self, region_tag):
        return self.mu_in if region_tag == REGION_INCLUSION else self.mu_out


class _PointLocator:
    """Uniform-grid bucket search for the triangle containing a point."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        pts = mesh.vertices[mesh.triangles]
        self.lo = pts.min(axis=1)
        self.hi = pts.max(axis=1)
        diam = (self.hi - self.lo).max(axis=1)
        self.cell = max(float(np.median(diam)) * 2.0, 1e-6)
        self.nx = max(1, int(math.ceil(1.0 / self.cell)))
        self.buckets: dict[tuple[int, int], list[int]] = {}
        for e in range(mesh.num_triangles):
            i0, j0 = self._cell_of(self.lo[e])
            i1, j1 = self._cell_of(self.hi[e])
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    self.buckets.setdefault((i, j), []).append(e)
        self.centroid_tree = cKDTree(pts.mean(axis=1))

    def _cell_of(self, p):
        return (min(self.nx - 1, max(0, int(p[0] / self.cell))),
                min(self.nx - 1, max(0, int(p[1] / self.cell))))

    def bary(self, e, p):
        tri = self.mesh.triangles[e]
        a, b, c = self.mesh.vertices[tri]
        m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
        st = np.linalg.solve(m, np.asarray(p, dtype=float) - a)
        return np.array([1 - st[0] - st[1], st[0], st[1]])

    def locate(self, p, tol=1e-12):
        key = self._cell_of(np.asarray(p, dtype=float))
        best, best_min = None, -np.inf
        for e in self.buckets.get(key, ()):
            lam = self.bary(e, p)
            lmin = lam.min()
            if lmin >= -tol:
                return e, np.clip(lam, 0.0, None)
            if lmin > best_min:
                best, best_min = (e, lam), lmin
        # clamp to the nearest element (point marginally outside the hull)
        _, e = self.centroid_tree.query(np.asarray(p, dtype=float))
        lam = self.bary(int(e), p)
        if best is not None and best_min > lam.min():
            e, lam = best
        else:
            e = int(e)
        if lam.min() < -1e-6:
            raise ValueError(f"point {p} lies far outside the mesh")
        lam = np.clip(lam, 0.0, None)
        return e, lam / lam.sum()


class TargetField:
    """Target potential z frozen on its background mesh."""

    def __init__(self, background_mesh: Mesh, z: ScalarField):
        if z.mesh is not background_mesh:
            raise ValueError("z must live on the background mesh")
        self.mesh = background_mesh
        self.z = z

    @cached_property
    def _locator(self):
        return _PointLocator(self.mesh)

    @cached_property
    def _grads(self):
        return fem.elem_grad(self.z)

    def locate(self, points):
        return [self._locator.locate(p) for p in np.asarray(points, dtype=float)]

    def interpolate(self, points):
        """Barycentric evaluation of z at arbitrary points in [0,1]^2."""
        out = np.empty(len(points))
        for k, (e, lam) in enumerate(self.locate(points)):
            out[k] = lam @ self.z.values[self.mesh.triangles[e]]
        return out

    def gradient_at(self, points):
        """Background-mesh gradient of z at each point, (npts, 2).

        Piecewise constant; on element boundaries the containing element is
        chosen deterministically by the locator.
        """
        out = np.empty((len(points), 2))
        for k, (e, _) in enumerate(self.locate(points)):
            out[k] = self._grads[e]
        return out


def state_dirichlet(mesh: Mesh):
    """Constrained vertex set and values for the potential: 0 bottom, 1 top."""
    by_tag = mesh.boundary_vertices_by_tag
    bottom = by_tag[GAMMA_BOTTOM]
    top = by_tag[GAMMA_TOP]
    nodes = np.concatenate([bottom, top])
    values = np.concatenate([np.zeros(bottom.size), np.ones(top.size)])
    order = np.argsort(nodes, kind="stable")
    return nodes[order], values[order]


def state_operator(mesh: Mesh, cfg: ProblemConfig) -> SparseOperator:
    op = fem.assemble_scalar_laplace(mesh, {0: cfg.mu_in, 1: cfg.mu_out})
    nodes, _ = state_dirichlet(mesh)
    return fem.with_constraints(op, nodes)


def solve_state(mesh: Mesh, cfg: ProblemConfig) -> ScalarField:
    """Potential with u=0 on the bottom, u=1 on the top, insulated sides."""
    op = state_operator(mesh, cfg)
    _, values = state_dirichlet(mesh)
    u = op.solve_constrained(np.zeros(mesh.num_vertices), bc_values=values)
    return ScalarField(mesh, u)


def solve_adjoint(mesh: Mesh, cfg: ProblemConfig, u: ScalarField,
                  z_on_m: ScalarField) -> ScalarField:
    """Adjoint potential driven by the data misfit, zero on bottom and top."""
    op = state_operator(mesh, cfg)
    mass = fem.assemble_mass(mesh)
    rhs = -(mass.matrix @ (u.values - z_on_m.values))
    lam = op.solve_constrained(rhs)
    return ScalarField(mesh, lam)


def inclusion_area(mesh: Mesh):
    geo = fem.geometry(mesh)
    return float(geo.areas[mesh.region == REGION_INCLUSION].sum())


def objective(mesh: Mesh, cfg: ProblemConfig, u: ScalarField,
              z_on_m: ScalarField) -> float:
    """J = 1/2 int (u-z)^2 dx + alpha/2 * area of the inclusion."""
    w = u - z_on_m
    misfit = 0.5 * fem.integrate_p1_product([w, w])
    return misfit + 0.5 * cfg.alpha * inclusion_area(mesh)


def transfer_target(target: TargetField, mesh: Mesh) -> ScalarField:
    """Evaluate z at the vertices of `mesh` (Eulerian semantics)."""
    return ScalarField(mesh, target.interpolate(mesh.vertices))


def target_gradients(target: TargetField, mesh: Mesh):
    """Background dz at the vertices of `mesh`; used for the z material
    derivative dz[V](x_i) = grad z(x_i) . V(x_i)."""
    return target.gradient_at(mesh.vertices)


def make_target(cfg: ProblemConfig, h: float,
                shape: InclusionShape = TRUE_ELLIPSE) -> TargetField:
    """Solve the problem on a fresh background mesh holding the true shape."""
    background = generate_mesh(shape, h)
    z = solve_state(background, cfg)
    return TargetField(background, z)


def energy_fraction(mesh: Mesh, cfg: ProblemConfig, u: ScalarField) -> float:
    """Share of the conduction energy int mu |grad u|^2 inside the inclusion.

    Near-insulating inclusions carry almost no flux, so this is ~0 when
    mu_in << mu_out.
    """
    geo = fem.geometry(mesh)
    g = fem.elem_grad(u)
    mu_e = np.array([cfg.mu(r) for r in mesh.region])
    dens = geo.areas * mu_e * np.einsum("ed,ed->e", g, g)
    total = float(dens.sum())
    if total == 0.0:
        return 0.0
    return float(dens[mesh.region == REGION_INCLUSION].sum()) / total


def boundary_flux(mesh: Mesh, cfg: ProblemConfig, u: ScalarField, tag):
    """Discrete conormal flux of u through one outer boundary part.

    Computed variationally: pair the stiffness residual with the hat
    functions of that boundary's vertices.
    """
    op = fem.assemble_scalar_laplace(mesh, {0: cfg.mu_in, 1: cfg.mu_out})
    r = op.matrix @ u.values
    nodes = mesh.boundary_vertices_by_tag[tag]
    return float(r[nodes].sum())
