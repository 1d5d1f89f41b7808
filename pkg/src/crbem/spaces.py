"""Degree-of-freedom management and discrete operators.

Two spaces live on every mesh: the Crouzeix-Raviart space (piecewise
linears continuous at interior edge midpoints, vanishing at boundary edge
midpoints; one DOF per interior edge) and the conforming space
(continuous piecewise linears vanishing on the boundary; one DOF per
interior node).

On a single element both are plain P1 functions, so most operators work
through the per-element vertex-value table: a CR function with midpoint
values c_0, c_1, c_2 has vertex values (c_0+c_1+c_2) - 2*c_j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, RefinementMap, node_patch

__all__ = [
    "DofSpace",
    "CoefVec",
    "PwConstVecField",
    "EdgeJumpField",
    "cr_space",
    "conforming_space",
    "basis_gradient",
    "barycentric_gradients",
    "element_vertex_values",
    "curl_field",
    "embed_coarse_in_fine",
    "jump_field",
    "clement_interpolate",
    "project_pwconst",
    "prolong_conforming",
    "conforming_to_cr",
]


@dataclass(frozen=True)
class DofSpace:
    """Map between mesh entities and degrees of freedom.

    kind 'cr': one DOF per interior edge; kind 'conforming': one DOF per
    interior node.  ``entity_to_dof`` is -1 on boundary entities.
    """

    kind: str
    mesh: Mesh
    dof_count: int
    entity_to_dof: np.ndarray
    dof_to_entity: np.ndarray

    def zeros(self):
        return CoefVec(self, np.zeros(self.dof_count))


@dataclass
class CoefVec:
    """Coefficient vector of a function in a DofSpace."""

    space: DofSpace
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.space.dof_count,):
            raise ValueError(
                f"coefficient vector has length {self.values.shape}, space "
                f"has {self.space.dof_count} DOFs")


@dataclass
class PwConstVecField:
    """Piecewise-constant 2-vector field (per-element tangential curl)."""

    mesh: Mesh
    values: np.ndarray  # (nt, 2)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.num_triangles, 2):
            raise ValueError("field shape does not match the mesh")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field has non-finite entries")


@dataclass
class EdgeJumpField:
    """Inter-element jumps of a piecewise-linear function.

    Per edge (oriented from its lower to its higher vertex index):
    jump values at both endpoints and the constant tangential derivative
    of the jump.  On interior edges the jump is trace(lower adjacent
    triangle) - trace(higher); boundary edges carry the trace itself.
    """

    mesh: Mesh
    jump_lo: np.ndarray
    jump_hi: np.ndarray
    jump_deriv: np.ndarray

    def midpoint_values(self):
        return 0.5 * (self.jump_lo + self.jump_hi)


def cr_space(mesh):
    ne = mesh.num_edges
    interior = np.flatnonzero(~mesh.edge_boundary)
    e2d = np.full(ne, -1, dtype=np.int64)
    e2d[interior] = np.arange(len(interior))
    return DofSpace("cr", mesh, len(interior), e2d, interior)


def conforming_space(mesh):
    nv = mesh.num_vertices
    interior = np.flatnonzero(~mesh.boundary_vertex)
    v2d = np.full(nv, -1, dtype=np.int64)
    v2d[interior] = np.arange(len(interior))
    return DofSpace("conforming", mesh, len(interior), v2d, interior)


def barycentric_gradients(mesh):
    """Gradients of the barycentric coordinates, shape (nt, 3, 2).

    grad(lambda_i) is the 90-degree rotation of the opposite edge vector
    divided by twice the element area.
    """
    cached = getattr(mesh, "_bary_grads", None)
    if cached is not None:
        return cached
    p = mesh.triangle_coords()
    opp = p[:, [2, 0, 1], :] - p[:, [1, 2, 0], :]  # edge opposite vertex i
    grads = np.empty_like(opp)
    grads[:, :, 0] = -opp[:, :, 1]
    grads[:, :, 1] = opp[:, :, 0]
    grads /= (2.0 * mesh.areas)[:, None, None]
    grads.setflags(write=False)
    mesh._bary_grads = grads
    return grads


def basis_gradient(mesh, element, local_basis):
    """Gradient of barycentric coordinate ``local_basis`` on one element.

    The CR basis function of the edge opposite that vertex is
    1 - 2*lambda, with gradient -2 times this value.
    """
    if not 0 <= element < mesh.num_triangles:
        raise IndexError(f"element {element} out of range")
    if local_basis not in (0, 1, 2):
        raise ValueError(f"local basis index must be 0..2, got {local_basis}")
    if mesh.areas[element] <= 0.0:
        raise ValueError(f"element {element} is degenerate")
    return barycentric_gradients(mesh)[element, local_basis].copy()


def _gather(values, dof):
    """values[dof] with -1 entries reading as zero."""
    padded = np.concatenate([values, [0.0]])
    return padded[np.where(dof >= 0, dof, len(values))]


def element_vertex_values(coeffs):
    """Per-element values of the function at the three vertices, (nt, 3)."""
    space = coeffs.space
    mesh = space.mesh
    if space.kind == "cr":
        c = _gather(coeffs.values, space.entity_to_dof[mesh.tri_edges])
        return c.sum(axis=1, keepdims=True) - 2.0 * c
    if space.kind == "conforming":
        return _gather(coeffs.values, space.entity_to_dof[mesh.triangles])
    raise ValueError(f"unknown space kind {space.kind!r}")


def curl_field(coeffs):
    """Elementwise tangential curl (g_y, -g_x) of a piecewise linear."""
    mesh = coeffs.space.mesh
    vv = element_vertex_values(coeffs)
    grads = barycentric_gradients(mesh)
    g = np.einsum("tj,tjc->tc", vv, grads)
    curl = np.empty_like(g)
    curl[:, 0] = g[:, 1]
    curl[:, 1] = -g[:, 0]
    return PwConstVecField(mesh, curl)


def embed_coarse_in_fine(coeffs, rmap, fine_mesh):
    """Curl field of a coarse function represented on the refined mesh.

    A coarse piecewise linear restricted to any child is linear with the
    same gradient, so each child inherits its parent's curl vector.
    """
    coarse_mesh = coeffs.space.mesh
    if rmap.parent_count != coarse_mesh.num_triangles:
        raise ValueError("refinement map does not belong to the coarse mesh")
    if len(rmap.child_to_parent) != fine_mesh.num_triangles:
        raise ValueError("refinement map does not belong to the fine mesh")
    coarse = curl_field(coeffs)
    return PwConstVecField(fine_mesh, coarse.values[rmap.child_to_parent])


def jump_field(coeffs):
    """Edge jumps of a CR or conforming coefficient function."""
    mesh = coeffs.space.mesh
    vv = element_vertex_values(coeffs)
    ev = mesh.edge_vertices
    et = mesh.edge_tris
    t_plus = et[:, 0]
    t_minus = np.where(et[:, 1] >= 0, et[:, 1], 0)

    def local_index(tris, verts):
        return np.argmax(mesh.triangles[tris] == verts[:, None], axis=1)

    lo_plus = vv[t_plus, local_index(t_plus, ev[:, 0])]
    hi_plus = vv[t_plus, local_index(t_plus, ev[:, 1])]
    lo_minus = vv[t_minus, local_index(t_minus, ev[:, 0])]
    hi_minus = vv[t_minus, local_index(t_minus, ev[:, 1])]
    interior = ~mesh.edge_boundary
    jump_lo = np.where(interior, lo_plus - lo_minus, lo_plus)
    jump_hi = np.where(interior, hi_plus - hi_minus, hi_plus)
    deriv = (jump_hi - jump_lo) / mesh.edge_lengths
    return EdgeJumpField(mesh, jump_lo, jump_hi, deriv)


def _check_uniform_map(rmap, coarse_mesh, fine_mesh):
    if rmap.parent_count != coarse_mesh.num_triangles:
        raise ValueError("refinement map does not match the coarse mesh")
    if len(rmap.child_to_parent) != fine_mesh.num_triangles:
        raise ValueError("refinement map does not match the fine mesh")
    counts = np.bincount(rmap.child_to_parent, minlength=rmap.parent_count)
    if not np.all(counts == 4):
        raise ValueError("fine mesh is not the uniform refinement of the "
                         "coarse mesh")


def _barycentric_in_parent(coarse_mesh, parents, points):
    """Barycentric coordinates of points w.r.t. their parent triangles."""
    p = coarse_mesh.triangle_coords()[parents]  # (n, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    r = points - p[:, 0]
    mu1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    mu2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.stack([1.0 - mu1 - mu2, mu1, mu2], axis=1)


def clement_interpolate(fine_coeffs, coarse_mesh, rmap):
    """Quasi-interpolation of a fine CR function into the coarse
    conforming space.

    For every interior coarse node the fine function is L2-projected onto
    the continuous piecewise linears on the node patch (spanned by the
    restrictions of all nodal hat functions with a node in the patch,
    boundary hats included); the output DOF is the projected function's
    value at the node.
    """
    if fine_coeffs.space.kind != "cr":
        raise ValueError("clement_interpolate expects CR input coefficients")
    fine_mesh = fine_coeffs.space.mesh
    _check_uniform_map(rmap, coarse_mesh, fine_mesh)

    # fine function values at the fine edge midpoints are the CR DOFs
    v_mid = _gather(fine_coeffs.values,
                    fine_coeffs.space.entity_to_dof[fine_mesh.tri_edges])
    mids = fine_mesh.edge_midpoints[fine_mesh.tri_edges]  # (nt_f, 3, 2)
    parents = np.repeat(rmap.child_to_parent, 3)
    lam = _barycentric_in_parent(coarse_mesh, parents, mids.reshape(-1, 2))
    weights = np.repeat(fine_mesh.areas / 3.0, 3) * v_mid.ravel()

    # load moments against the coarse hats, accumulated per coarse element
    moments = np.zeros((coarse_mesh.num_triangles, 3))
    np.add.at(moments, parents, weights[:, None] * lam)

    out_space = conforming_space(coarse_mesh)
    out = np.zeros(out_space.dof_count)
    tris = coarse_mesh.triangles
    areas = coarse_mesh.areas
    mass_ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    for z in out_space.dof_to_entity:
        patch = node_patch(coarse_mesh, z)
        local_nodes, local_tris = np.unique(tris[patch], return_inverse=True)
        local_tris = local_tris.reshape(-1, 3)
        n = len(local_nodes)
        M = np.zeros((n, n))
        b = np.zeros(n)
        for t, loc in zip(patch, local_tris):
            M[np.ix_(loc, loc)] += areas[t] * mass_ref
            b[loc] += moments[t]
        psi = np.linalg.solve(M, b)
        out[out_space.entity_to_dof[z]] = psi[np.searchsorted(local_nodes, z)]
    return CoefVec(out_space, out)


def project_pwconst(fine_field, rmap, coarse_mesh):
    """L2 projection of a fine piecewise-constant field onto the coarse
    elements: the area-weighted average of the children per parent."""
    fine_mesh = fine_field.mesh
    if len(rmap.child_to_parent) != fine_mesh.num_triangles:
        raise ValueError("refinement map does not match the fine mesh")
    if rmap.parent_count != coarse_mesh.num_triangles:
        raise ValueError("refinement map does not match the coarse mesh")
    num = np.zeros((rmap.parent_count, 2))
    np.add.at(num, rmap.child_to_parent,
              fine_field.values * fine_mesh.areas[:, None])
    den = np.zeros(rmap.parent_count)
    np.add.at(den, rmap.child_to_parent, fine_mesh.areas)
    return PwConstVecField(coarse_mesh, num / den[:, None])


def prolong_conforming(conf_coeffs, fine_mesh, rmap):
    """Conforming coefficients of a coarse conforming function on the
    refined mesh.

    Refinement keeps the coarse vertex numbering and appends edge
    midpoints, so fine nodal values are the coarse nodal values plus
    endpoint averages on the bisected edges.
    """
    if conf_coeffs.space.kind != "conforming":
        raise ValueError("expected conforming coefficients")
    coarse_mesh = conf_coeffs.space.mesh
    nv_c = coarse_mesh.num_vertices
    if fine_mesh.num_vertices != nv_c + len(rmap.midpoint_edges):
        raise ValueError("refinement map does not match the fine mesh")
    vals = np.zeros(nv_c)
    vals[conf_coeffs.space.dof_to_entity] = conf_coeffs.values
    ends = coarse_mesh.edge_vertices[rmap.midpoint_edges]
    fine_vals = np.concatenate([vals, 0.5 * vals[ends].sum(axis=1)])
    space = conforming_space(fine_mesh)
    return CoefVec(space, fine_vals[space.dof_to_entity])


def conforming_to_cr(conf_coeffs):
    """CR coefficients of a conforming function (edge-midpoint values)."""
    if conf_coeffs.space.kind != "conforming":
        raise ValueError("expected conforming coefficients")
    mesh = conf_coeffs.space.mesh
    vals = _gather(conf_coeffs.values,
                   conf_coeffs.space.entity_to_dof[mesh.edge_vertices])
    mid = 0.5 * vals.sum(axis=1)
    space = cr_space(mesh)
    return CoefVec(space, mid[space.dof_to_entity])
