"""First-order shape calculus in the deformation-field formulation.

The shape derivative is assembled in volume form as a dual vector over the
P1 deformation space (zero on the outer boundary).  For P1 elements this is
the exact derivative of the discrete objective with respect to vertex
positions moved along the field, which is what the central-difference
oracle `eulerian_fd` measures.
"""

from __future__ import annotations

import numpy as np

from . import fem, model
from .fem import ScalarField, SparseOperator, VectorField
from .mesh import Mesh, REGION_INCLUSION, apply_deformation, check_invertibility


class ShapeGradientFunctional:
    """Dual vector d with d . V = dJ(Omega)[V] for nodal deformations V."""

    def __init__(self, mesh: Mesh, dual: np.ndarray, constrained: np.ndarray):
        self.mesh = mesh
        self.dual = dual
        self.constrained = constrained

    def pair(self, v: VectorField) -> float:
        if v.mesh is not self.mesh:
            raise fem.FemError("direction field lives on a different mesh")
        return float(self.dual @ v.flat())


def deformation_constraints(mesh: Mesh):
    """Dof indices pinned to zero: both components of outer-boundary nodes."""
    return fem.vector_dofs(mesh.boundary_vertices)


def assemble_shape_derivative(mesh: Mesh, cfg: model.ProblemConfig,
                              u: ScalarField, lam: ScalarField,
                              z_on_m: ScalarField, z_grad=None, target=None,
                              alpha_whole_domain=False) -> ShapeGradientFunctional:
    """Volume-form shape derivative of the Lagrangian at (u, lam).

    When u solves the state and lam the adjoint equation this equals the
    derivative of the reduced objective.  `z_grad` holds the background
    gradient of z at each vertex (fetched from `target` if omitted); it
    feeds the material derivative of the fixed field z.  The regularization
    term differentiates over the inclusion only; `alpha_whole_domain` is a
    negative-control switch spreading it over the whole domain.
    """
    for f in (u, lam, z_on_m):
        if f.mesh is not mesh:
            raise fem.FemError("field lives on a different mesh")
    if z_grad is None:
        z_grad = model.target_gradients(target, mesh) if target is not None \
            else np.zeros((mesh.num_vertices, 2))

    geo = fem.geometry(mesh)
    tris = mesh.triangles
    mu_e = np.where(mesh.region == REGION_INCLUSION, cfg.mu_in, cfg.mu_out)
    gu = fem.elem_grad(u)
    gl = fem.elem_grad(lam)
    w = u.values - z_on_m.values
    wloc = w[tris]

    # div V coefficient: int_e 1/2 w^2 + |e| (mu grad u . grad lam) + alpha/2 chi
    half_w2 = 0.5 * np.einsum("ei,eij,ej->e", wloc, geo.local_mass, wloc)
    chi = np.ones(mesh.num_triangles) if alpha_whole_domain \
        else (mesh.region == REGION_INCLUSION).astype(float)
    c_div = half_w2 + geo.areas * (mu_e * np.einsum("ed,ed->e", gu, gl)
                                   + 0.5 * cfg.alpha * chi)
    d_elem = c_div[:, None, None] * geo.grads          # (ne, 3, 2)

    # -mu grad u^T (DV + DV^T) grad lam
    gl_dot = np.einsum("eid,ed->ei", geo.grads, gl)    # grad phi_i . grad lam
    gu_dot = np.einsum("eid,ed->ei", geo.grads, gu)
    d_elem -= (mu_e * geo.areas)[:, None, None] * (
        gl_dot[:, :, None] * gu[:, None, :] + gu_dot[:, :, None] * gl[:, None, :])

    dual = np.zeros((mesh.num_vertices, 2))
    np.add.at(dual, tris.reshape(-1), d_elem.reshape(-1, 2))

    # -(u - z) dz[V] with nodal dz[V]_i = grad z(x_i) . V_i
    mass = fem.assemble_mass(mesh)
    dual -= (mass.matrix @ w)[:, None] * z_grad

    constrained = deformation_constraints(mesh)
    flat = dual.reshape(-1)
    flat[constrained] = 0.0
    return ShapeGradientFunctional(mesh, flat, constrained)


def deformation_metric(mesh: Mesh, eps1: float, eps2: float) -> SparseOperator:
    """H1-type inner product on deformations, constrained on the boundary."""
    op = fem.assemble_vector_h1_form(mesh, eps1, eps2)
    return fem.with_constraints(op, deformation_constraints(mesh))


def riesz_gradient(d: ShapeGradientFunctional, metric: SparseOperator) -> VectorField:
    """Gradient representative: b(grad J, Z) = dJ[Z] for all admissible Z."""
    g = metric.solve_constrained(d.dual)
    return VectorField(d.mesh, g.reshape(-1, 2))


def objective_on_deformed(mesh: Mesh, cfg, target: model.TargetField, v, t: float):
    """Re-solve the state on the deformed mesh and evaluate the objective."""
    deformed = apply_deformation(mesh, v, t) if t != 0.0 else mesh
    z = model.transfer_target(target, deformed)
    u = model.solve_state(deformed, cfg)
    return model.objective(deformed, cfg, u, z)


def eulerian_fd(mesh: Mesh, cfg, target: model.TargetField, v, t: float) -> float:
    """Central-difference quotient (J(Omega_t) - J(Omega_-t)) / (2t)."""
    for sign in (1.0, -1.0):
        ok, info = check_invertibility(mesh, v, sign * t)
        if not ok:
            raise ValueError(f"deformation not admissible at t={sign * t}: {info}")
    jp = objective_on_deformed(mesh, cfg, target, v, t)
    jm = objective_on_deformed(mesh, cfg, target, v, -t)
    return (jp - jm) / (2.0 * t)
