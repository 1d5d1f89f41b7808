"""Singular panel-pair quadrature and energy-form assembly.

The energy bilinear form is realized through the dense element-pair table
G[i][j] = (1/4pi) int_Ti int_Tj |x-y|^(-1), assembled once per mesh and
shared by every space on that mesh.

Panel pairs are integrated with regularizing coordinate transformations
per adjacency case (identical / edge-adjacent / vertex-adjacent /
disjoint) followed by tensor Gauss rules.  Rule nodes live on the
4-dimensional parameter domain tau x tau with tau = {0 <= w2 <= w1 <= 1};
all transformation Jacobians are folded into the weights, so the weights
are positive and sum to vol(tau x tau) = 1/4.

The transformed rules converge geometrically for shape-regular panels but
degrade on strongly anisotropic ones (boundary-graded meshes).  Pairs
beyond the rules' anisotropy or proximity envelope switch to a robust
semi-analytic path: the inner integral of the kernel over a flat panel is
evaluated in closed form and the outer integral by adaptive subdivision;
identical anisotropic panels use a fully closed-form self-entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.legendre import leggauss

from .spaces import PwConstVecField, CoefVec, barycentric_gradients, curl_field

__all__ = [
    "EnergyForm",
    "QuadratureRule",
    "quadrature_rule",
    "panel_integral",
    "assemble_energy_form",
    "energy_inner",
    "assemble_stiffness",
    "assemble_rhs_constant",
    "assemble_rhs_power",
    "assemble_rhs_manufactured",
]

FOUR_PI = 4.0 * np.pi

# adjacency-case tensor orders relative to the base order p:
# identical/edge/vertex use p, near-field disjoint p-1, far-field p-2.
DEFAULT_ORDER = 5
# dist/max(diam) band edges for disjoint pairs
RHO_FAR = 6.0
RHO_NEAR = 0.6
RHO_CLOSE = 0.3
# aspect = (longest edge)^2 / (2 |T|); 2.0 for right isosceles triangles.
# Above this, singular-case rules lose accuracy and the robust path is used.
SINGULAR_ASPECT_LIMIT = 3.0

_ROBUST_RTOL = 1e-6
_ROBUST_ORDER = 5
_ROBUST_MAX_DEPTH = 24


@dataclass(frozen=True)
class QuadratureRule:
    """Panel-pair rule on the 4D parameter domain after regularization.

    ``x_nodes``/``y_nodes`` are points of the reference triangle
    {0 <= w2 <= w1 <= 1} for the two panels; weights include all
    transformation Jacobians and sum to 1/4.
    """

    case: str
    order: int
    x_nodes: np.ndarray
    y_nodes: np.ndarray
    weights: np.ndarray


def _gauss01(p):
    g, w = leggauss(p)
    return 0.5 * (g + 1.0), 0.5 * w


def _gauss01_composite(p, nsplit):
    g, w = _gauss01(p)
    return (np.concatenate([(g + k) / nsplit for k in range(nsplit)]),
            np.concatenate([w / nsplit] * nsplit))


def _tensor4(p, split_dims=(), nsplit=2):
    axes = []
    for d in range(4):
        if d in split_dims:
            axes.append(_gauss01_composite(p, nsplit))
        else:
            axes.append(_gauss01(p))
    pts = np.stack(np.meshgrid(*[a[0] for a in axes], indexing="ij"),
                   axis=-1).reshape(-1, 4)
    wts = np.stack(np.meshgrid(*[a[1] for a in axes], indexing="ij"),
                   axis=-1).reshape(-1, 4).prod(axis=1)
    return pts, wts


@lru_cache(maxsize=None)
def quadrature_rule(case, order):
    """Build (and cache) the regularized rule for one adjacency case."""
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    if case == "identical":
        # difference coordinates z = x - y; the hexagon z-domain splits
        # into three symmetric sector pairs, each Duffy-scaled radially.
        # The angular direction is composite (2 panels) to resolve the
        # kernel's complex singularities at moderate Bernstein radius.
        q, gw = _tensor4(order, split_dims=(1,))
        xi, eta, a, b = q.T
        w = gw * xi * (1.0 - xi) ** 2 * a
        ys = [np.stack([(1 - xi) * a, (1 - xi) * a * b], 1),
              np.stack([xi * (1 - eta) + (1 - xi) * a, (1 - xi) * a * b], 1),
              np.stack([xi + (1 - xi) * a, (1 - xi) * a * b], 1)]
        zs = [np.stack([xi, xi * eta], 1),
              np.stack([xi * eta, xi], 1),
              np.stack([xi * (eta - 1), xi * eta], 1)]
        xn, yn, wn = [], [], []
        for y, z in zip(ys, zs):
            x = y + z
            xn += [x, y]
            yn += [y, x]
            wn += [w, w]
    elif case == "edge-adjacent":
        # shared edge parametrized by w1 at w2 = 0 on both panels; the
        # joint radial scaling of (x1 - y1, x2, y2) leaves two subregions,
        # both composite in the two angular directions.
        q, gw = _tensor4(order, split_dims=(2, 3))
        q1, q2, q3, q4 = q.T
        xa = np.stack([q1, q1 * q2], 1)
        ya = np.stack([q1 * (1 - q2 * q3 * q4), q1 * q2 * q4 * (1 - q3)], 1)
        wa = gw * q1 ** 3 * q2 ** 2 * q4
        xb = np.stack([q1, q1 * q2 * q4], 1)
        yb = np.stack([q1 * (1 - q2 * q3), q1 * q2 * (1 - q3)], 1)
        wb = gw * q1 ** 3 * q2 ** 2
        xn, yn, wn = [], [], []
        for x, y, w in ((xa, ya, wa), (xb, yb, wb)):
            xn += [x, y]
            yn += [y, x]
            wn += [w, w]
    elif case == "vertex-adjacent":
        # shared vertex at parameter origin of both panels; joint radial
        # Duffy split by which panel is outer.  This case has the weakest
        # convergence constant of the transformed rules, so it runs three
        # orders above the nominal one.
        q, gw = _tensor4(order + 3)
        xi, eta, b1, b2 = q.T
        w = gw * xi ** 3 * eta
        xn = [np.stack([xi, xi * b1], 1), np.stack([xi * eta, xi * eta * b1], 1)]
        yn = [np.stack([xi * eta, xi * eta * b2], 1), np.stack([xi, xi * b2], 1)]
        wn = [w, w]
    elif case == "disjoint":
        q, gw = _tensor4(order)
        a1, b1, a2, b2 = q.T
        xn = [np.stack([a1, a1 * b1], 1)]
        yn = [np.stack([a2, a2 * b2], 1)]
        wn = [gw * a1 * a2]
    else:
        raise ValueError(f"unknown adjacency case {case!r}")
    rule = QuadratureRule(case, order, np.vstack(xn), np.vstack(yn),
                          np.concatenate(wn))
    rule.x_nodes.setflags(write=False)
    rule.y_nodes.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule


def _doubled_area(tris):
    d1 = tris[..., 1, :] - tris[..., 0, :]
    d2 = tris[..., 2, :] - tris[..., 0, :]
    return np.abs(d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0])


def _map_nodes(tris, nodes):
    """Map reference nodes (K,2) into triangles (...,3,2) -> (...,K,2)."""
    e1 = tris[..., None, 1, :] - tris[..., None, 0, :]
    e2 = tris[..., None, 2, :] - tris[..., None, 1, :]
    return (tris[..., None, 0, :] + nodes[..., 0, None] * e1
            + nodes[..., 1, None] * e2)


def _apply_rule_pairs(rule, ta, tb, chunk=4_000_000):
    """Rule evaluation for panel pairs ta, tb of shape (P, 3, 2)."""
    P = len(ta)
    K = len(rule.weights)
    out = np.empty(P)
    step = max(1, chunk // max(K, 1))
    for lo in range(0, P, step):
        hi = min(P, lo + step)
        pa = _map_nodes(ta[lo:hi], rule.x_nodes)
        pb = _map_nodes(tb[lo:hi], rule.y_nodes)
        r = np.linalg.norm(pa - pb, axis=2)
        out[lo:hi] = (rule.weights / r).sum(axis=1)
    return out * _doubled_area(ta) * _doubled_area(tb) / FOUR_PI


# -- robust semi-analytic path -------------------------------------------------


def _segment_potential(tris, pts):
    """int_tri 1/|x-y| dy in closed form, batched.

    tris: (M, 3, 2) counterclockwise; pts: (M, K, 2) in the same plane.
    """
    total = np.zeros(pts.shape[:2])
    for k in range(3):
        a = tris[:, k][:, None, :]
        t = (tris[:, (k + 1) % 3] - tris[:, k])[:, None, :]
        ln = np.linalg.norm(t, axis=2, keepdims=True)
        t = t / ln
        n = np.stack([t[..., 1], -t[..., 0]], axis=-1)
        rel = a - pts
        d = (rel * n).sum(-1)
        s_a = (rel * t).sum(-1)
        s_b = s_a + ln[..., 0]
        r_a = np.hypot(s_a, d)
        r_b = np.hypot(s_b, d)
        with np.errstate(divide="ignore", invalid="ignore"):
            num = np.where(s_b < 0, d * d / (r_b - s_b), s_b + r_b)
            den = np.where(s_a < 0, d * d / (r_a - s_a), s_a + r_a)
            term = d * np.log(num / den)
        total += np.where(np.abs(d) < 1e-300, 0.0, np.nan_to_num(term))
    return total


@lru_cache(maxsize=None)
def _gauss_duffy(p):
    g, w = _gauss01(p)
    a, b = np.meshgrid(g, g, indexing="ij")
    wa, wb = np.meshgrid(w, w, indexing="ij")
    nodes = np.stack([a.ravel(), (a * b).ravel()], axis=1)
    return nodes, (wa * wb * a).ravel()


def _robust_pairs(ta, tb, rtol=_ROBUST_RTOL, p=_ROBUST_ORDER,
                  max_depth=_ROBUST_MAX_DEPTH):
    """Adaptive outer quadrature over ta of the closed-form inner
    potential of tb; handles arbitrarily anisotropic or close panels."""
    ta = np.asarray(ta, float)
    tb = np.asarray(tb, float)
    nodes, wts = _gauss_duffy(p)

    def cell_values(cells, owner):
        pts = _map_nodes(cells, nodes)
        vals = _segment_potential(tb[owner], pts)
        return _doubled_area(cells) * (vals * wts).sum(axis=1)

    n_pairs = len(ta)
    settled = np.zeros(n_pairs)
    owner = np.arange(n_pairs)
    cells = ta.copy()
    parent = cell_values(cells, owner)
    scale = np.abs(parent).copy()
    for depth in range(max_depth):
        if not len(owner):
            break
        m01 = 0.5 * (cells[:, 0] + cells[:, 1])
        m12 = 0.5 * (cells[:, 1] + cells[:, 2])
        m20 = 0.5 * (cells[:, 2] + cells[:, 0])
        kids = np.stack([np.stack([cells[:, 0], m01, m20], 1),
                         np.stack([m01, cells[:, 1], m12], 1),
                         np.stack([m20, m12, cells[:, 2]], 1),
                         np.stack([m01, m12, m20], 1)], axis=1)
        kv = cell_values(kids.reshape(-1, 3, 2),
                         np.repeat(owner, 4)).reshape(-1, 4)
        ksum = kv.sum(axis=1)
        done = (np.abs(ksum - parent) <= rtol * np.maximum(scale[owner], 1e-300))
        if depth == max_depth - 1:
            done = np.ones_like(done)
        np.add.at(settled, owner[done], ksum[done])
        keep = ~done
        owner = np.repeat(owner[keep], 4)
        cells = kids[keep].reshape(-1, 3, 2)
        parent = kv[keep].ravel()
        running = settled.copy()
        np.add.at(running, owner, np.abs(parent))
        scale = np.maximum(scale, np.abs(running))
    return settled / FOUR_PI


def _self_entry_closed_form(tris):
    """Exact identical-panel value for the flat kernel.

    After radial and parallel reductions the self integral reduces to
    three 1D integrals of 1/|u + eta*v| with closed-form antiderivatives.
    """
    tris = np.asarray(tris, float)
    squeeze = tris.ndim == 2
    if squeeze:
        tris = tris[None]
    c1 = tris[:, 1] - tris[:, 0]
    c2 = tris[:, 2] - tris[:, 1]

    def seg(u, v):
        a = (v * v).sum(-1)
        b = (u * v).sum(-1)
        c = (u * u).sum(-1)
        sa = np.sqrt(a)

        def anti(eta):
            s = np.sqrt(a * eta * eta + 2 * b * eta + c)
            return np.log(a * eta + b + sa * s) / sa

        return anti(1.0) - anti(0.0)

    total = seg(c1, c2) + seg(c2, c1) + seg(-c1, c1 + c2)
    area2 = _doubled_area(tris)
    out = area2 ** 2 / 3.0 * total / FOUR_PI
    return out[0] if squeeze else out


# -- pair classification helpers -----------------------------------------------


def _aspect(tris):
    edges = tris[..., [1, 2, 0], :] - tris[..., [0, 1, 2], :]
    lmax2 = (edges ** 2).sum(-1).max(-1)
    return lmax2 / _doubled_area(tris)


def _segment_distances(p1, p2, q1, q2):
    """Minimum distance between 2D segments, batched over leading dims."""
    u = p2 - p1
    v = q2 - q1
    w0 = p1 - q1
    a = (u * u).sum(-1)
    b = (u * v).sum(-1)
    c = (v * v).sum(-1)
    d = (u * w0).sum(-1)
    e = (v * w0).sum(-1)
    den = a * c - b * b
    s = np.where(den > 1e-30, (b * e - c * d) / np.where(den > 1e-30, den, 1.0), 0.0)
    s = np.clip(s, 0.0, 1.0)
    t = np.where(c > 1e-30, (b * s + e) / np.where(c > 1e-30, c, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    s = np.where(a > 1e-30, np.clip((b * t - d) / np.where(a > 1e-30, a, 1.0), 0.0, 1.0), 0.0)
    diff = (p1 + s[..., None] * u) - (q1 + t[..., None] * v)
    return np.linalg.norm(diff, axis=-1)


def _triangle_distances(ta, tb):
    """Minimum distance between disjoint triangles, batched (P,3,2)."""
    best = np.full(len(ta), np.inf)
    for i in range(3):
        for j in range(3):
            d = _segment_distances(ta[:, i], ta[:, (i + 1) % 3],
                                   tb[:, j], tb[:, (j + 1) % 3])
            best = np.minimum(best, d)
    return best


def _reorder(tris, first, second=None):
    """Reindex panel vertices so ``first`` (and optionally ``second``)
    lead; the remaining vertex fills the last slot."""
    first = np.asarray(first, dtype=np.int64)
    if second is None:
        idx = np.stack([first, (first + 1) % 3, (first + 2) % 3], axis=1)
    else:
        second = np.asarray(second, dtype=np.int64)
        idx = np.stack([first, second, 3 - first - second], axis=1)
    return np.take_along_axis(tris, idx[:, :, None], axis=1)


# -- public operations ----------------------------------------------------------


@dataclass
class EnergyForm:
    """Dense element-pair single-layer table for one mesh."""

    mesh: object
    table: np.ndarray  # (nt, nt), symmetric, positive entries

    def __post_init__(self):
        nt = self.mesh.num_triangles
        if self.table.shape != (nt, nt):
            raise ValueError("energy table does not match the mesh")


def panel_integral(ta, tb, order=DEFAULT_ORDER):
    """(1/4pi) int_ta int_tb |x-y|^(-1) for two flat panels.

    The adjacency case is detected by coordinate matching (tolerance
    1e-14) and the matching regularized rule applied; pairs outside the
    rules' anisotropy or proximity envelope fall back to the robust
    semi-analytic path.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    ta = np.asarray(ta, float).reshape(3, 2)
    tb = np.asarray(tb, float).reshape(3, 2)
    for t in (ta, tb):
        if _doubled_area(t[None])[0] <= 1e-300:
            raise ValueError("degenerate panel")

    tol = 1e-14 * max(1.0, np.abs(ta).max(), np.abs(tb).max())
    match = np.linalg.norm(ta[:, None, :] - tb[None, :, :], axis=2) <= tol
    shared_a, shared_b = np.nonzero(match)
    aspect = max(_aspect(ta[None])[0], _aspect(tb[None])[0])

    if len(shared_a) == 3:
        if aspect > SINGULAR_ASPECT_LIMIT:
            return float(_self_entry_closed_form(ta))
        rule = quadrature_rule("identical", order)
        return float(_apply_rule_pairs(rule, ta[None], ta[None])[0])

    if len(shared_a) == 2:
        if aspect > SINGULAR_ASPECT_LIMIT:
            return float(_robust_pairs(ta[None], tb[None])[0])
        # both panels traverse the shared edge from the same endpoint
        pa = _reorder(ta[None], [shared_a[0]], [shared_a[1]])
        pb = _reorder(tb[None], [shared_b[0]], [shared_b[1]])
        rule = quadrature_rule("edge-adjacent", order)
        return float(_apply_rule_pairs(rule, pa, pb)[0])

    if len(shared_a) == 1:
        if aspect > SINGULAR_ASPECT_LIMIT:
            return float(_robust_pairs(ta[None], tb[None])[0])
        pa = _reorder(ta[None], shared_a)
        pb = _reorder(tb[None], shared_b)
        rule = quadrature_rule("vertex-adjacent", order)
        return float(_apply_rule_pairs(rule, pa, pb)[0])

    dist = _triangle_distances(ta[None], tb[None])[0]
    edges_a = np.linalg.norm(ta[[1, 2, 0]] - ta, axis=1).max()
    edges_b = np.linalg.norm(tb[[1, 2, 0]] - tb, axis=1).max()
    rho = dist / max(edges_a, edges_b)
    if rho >= RHO_FAR:
        rule = quadrature_rule("disjoint", max(order - 2, 1))
    elif rho >= RHO_NEAR:
        rule = quadrature_rule("disjoint", max(order - 1, 1))
    elif rho >= RHO_CLOSE:
        rule = quadrature_rule("disjoint", order)
    else:
        return float(_robust_pairs(ta[None], tb[None])[0])
    return float(_apply_rule_pairs(rule, ta[None], tb[None])[0])


def _point_clouds(coords, area2, p):
    nodes, wts = _gauss_duffy(p)
    pts = _map_nodes(coords, nodes)
    return pts, wts[None, :] * area2[:, None]


def _far_table(coords, area2, p, block=384):
    """Full pair table with the tensorized disjoint rule of order p.

    Entries for close or adjacent pairs are overwritten afterwards; the
    diagonal comes out unusable (coincident points) by construction.
    Squared point distances come from a rank-2 update so the inner
    product runs in BLAS.
    """
    nt = len(coords)
    pts, wts = _point_clouds(coords, area2, p)
    k = pts.shape[1]
    G = np.empty((nt, nt))
    flat = pts.reshape(-1, 2)
    sq = (flat ** 2).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        for i0 in range(0, nt, block):
            i1 = min(nt, i0 + block)
            pa = pts[i0:i1].reshape(-1, 2)
            wa = wts[i0:i1].reshape(-1)
            sa = sq[i0 * k:i1 * k]
            for j0 in range(i0, nt, block):
                j1 = min(nt, j0 + block)
                pb = pts[j0:j1].reshape(-1, 2)
                wb = wts[j0:j1].reshape(-1)
                r = pa @ pb.T
                r *= -2.0
                r += sa[:, None]
                r += sq[j0 * k:j1 * k][None, :]
                np.sqrt(r, out=r)
                np.divide(1.0, r, out=r)
                r *= wa[:, None]
                r *= wb[None, :]
                vals = r.reshape(i1 - i0, k, j1 - j0, k).sum(axis=(1, 3))
                vals = np.nan_to_num(vals, nan=0.0, posinf=0.0)
                if j0 == i0:
                    # BLAS products of a block with itself are not bitwise
                    # symmetric; the table must be
                    vals = 0.5 * (vals + vals.T)
                G[i0:i1, j0:j1] = vals
                if j0 > i0:
                    G[j0:j1, i0:i1] = vals.T
    G /= FOUR_PI
    return G


def _disjoint_band(coords, area2, pairs_i, pairs_j, p, chunk=120_000):
    """Point-cloud evaluation of disjoint pairs (batched matmul)."""
    nodes, wts = _gauss_duffy(p)
    out = np.empty(len(pairs_i))
    for lo in range(0, len(pairs_i), chunk):
        hi = min(len(pairs_i), lo + chunk)
        pi = pairs_i[lo:hi]
        pj = pairs_j[lo:hi]
        pa = _map_nodes(coords[pi], nodes)
        pb = _map_nodes(coords[pj], nodes)
        r = np.einsum("pkc,plc->pkl", pa, pb)
        r *= -2.0
        r += (pa ** 2).sum(-1)[:, :, None]
        r += (pb ** 2).sum(-1)[:, None, :]
        np.sqrt(r, out=r)
        np.divide(1.0, r, out=r)
        s = np.einsum("k,pkl,l->p", wts, r, wts)
        out[lo:hi] = s * area2[pi] * area2[pj]
    return out / FOUR_PI


def _adjacent_pairs(mesh):
    """Edge-adjacent pairs (with the shared edge) and vertex-only pairs."""
    interior = mesh.interior_edges()
    et = mesh.edge_tris[interior]
    edge_pairs = (et[:, 0], et[:, 1], interior)

    tri = mesh.triangles
    nt = len(tri)
    # candidate pairs sharing at least one vertex, via vertex incidence
    order = np.argsort(tri.ravel(), kind="stable")
    owner = np.repeat(np.arange(nt), 3)[order]
    verts = tri.ravel()[order]
    starts = np.searchsorted(verts, np.arange(mesh.num_vertices))
    ends = np.searchsorted(verts, np.arange(mesh.num_vertices) + 1)
    pi, pj = [], []
    for v in range(mesh.num_vertices):
        members = owner[starts[v]:ends[v]]
        if len(members) > 1:
            a, b = np.meshgrid(members, members, indexing="ij")
            m = a < b
            pi.append(a[m])
            pj.append(b[m])
    if pi:
        cand = np.unique(np.stack([np.concatenate(pi), np.concatenate(pj)], 1),
                         axis=0)
    else:
        cand = np.empty((0, 2), dtype=np.int64)
    shared = (tri[cand[:, 0]][:, :, None] == tri[cand[:, 1]][:, None, :])
    vtx_mask = shared.any(axis=2).sum(axis=1) == 1
    vtx_pairs = cand[vtx_mask]
    la = np.argmax(shared[vtx_mask].any(axis=2), axis=1)
    lb = np.argmax(shared[vtx_mask].any(axis=1), axis=1)
    return edge_pairs, (vtx_pairs[:, 0], vtx_pairs[:, 1], la, lb)


def assemble_energy_form(mesh, order=DEFAULT_ORDER):
    """Element-pair single-layer table for all panel pairs of a mesh.

    Adjacency is detected through shared vertex indices; disjoint pairs
    are binned by separation relative to the panel diameters.
    """
    nt = mesh.num_triangles
    coords = mesh.triangle_coords()
    area2 = 2.0 * mesh.areas
    aspect = _aspect(coords)
    diam = np.sqrt(((coords[:, [1, 2, 0], :] - coords) ** 2).sum(-1)).max(-1)
    cent = mesh.centroids
    radius = np.linalg.norm(coords - cent[:, None, :], axis=2).max(axis=1)

    G = _far_table(coords, area2, max(order - 2, 1))

    edge_pairs, vtx_pairs = _adjacent_pairs(mesh)

    # -- singular cases --------------------------------------------------------
    # identical
    iso = aspect <= SINGULAR_ASPECT_LIMIT
    diag = np.empty(nt)
    if iso.any():
        rule = quadrature_rule("identical", order)
        idx = np.flatnonzero(iso)
        diag[idx] = _apply_rule_pairs(rule, coords[idx], coords[idx])
    if (~iso).any():
        idx = np.flatnonzero(~iso)
        diag[idx] = _self_entry_closed_form(coords[idx])
    G[np.arange(nt), np.arange(nt)] = diag

    # edge-adjacent: both panels traverse the shared edge lo -> hi
    ti, tj, eids = edge_pairs
    if len(eids):
        lo = mesh.edge_vertices[eids, 0]
        hi = mesh.edge_vertices[eids, 1]
        la0 = np.argmax(mesh.triangles[ti] == lo[:, None], axis=1)
        la1 = np.argmax(mesh.triangles[ti] == hi[:, None], axis=1)
        lb0 = np.argmax(mesh.triangles[tj] == lo[:, None], axis=1)
        lb1 = np.argmax(mesh.triangles[tj] == hi[:, None], axis=1)
        pa = _reorder(coords[ti], la0, la1)
        pb = _reorder(coords[tj], lb0, lb1)
        pairs_iso = ((aspect[ti] <= SINGULAR_ASPECT_LIMIT)
                     & (aspect[tj] <= SINGULAR_ASPECT_LIMIT))
        vals = np.empty(len(eids))
        if pairs_iso.any():
            rule = quadrature_rule("edge-adjacent", order)
            m = pairs_iso
            vals[m] = _apply_rule_pairs(rule, pa[m], pb[m])
        if (~pairs_iso).any():
            m = ~pairs_iso
            vals[m] = _robust_pairs(coords[ti][m], coords[tj][m])
        G[ti, tj] = vals
        G[tj, ti] = vals

    # vertex-adjacent
    vi, vj, la, lb = vtx_pairs
    if len(vi):
        pa = _reorder(coords[vi], la)
        pb = _reorder(coords[vj], lb)
        pairs_iso = (aspect[vi] <= SINGULAR_ASPECT_LIMIT) & (aspect[vj] <= SINGULAR_ASPECT_LIMIT)
        vals = np.empty(len(vi))
        if pairs_iso.any():
            rule = quadrature_rule("vertex-adjacent", order)
            m = pairs_iso
            vals[m] = _apply_rule_pairs(rule, pa[m], pb[m])
        if (~pairs_iso).any():
            m = ~pairs_iso
            vals[m] = _robust_pairs(coords[vi][m], coords[vj][m])
        G[vi, vj] = vals
        G[vj, vi] = vals

    # -- near-field disjoint bands ---------------------------------------------
    cand_i, cand_j = _near_candidates(cent, radius, diam, RHO_FAR)
    if len(cand_i):
        # drop pairs sharing a vertex (already handled above)
        key = cand_i * nt + cand_j
        adj_key = np.concatenate([
            np.minimum(ti, tj) * nt + np.maximum(ti, tj) if len(eids) else np.empty(0, np.int64),
            vi * nt + vj if len(vi) else np.empty(0, np.int64)])
        keep = ~np.isin(key, adj_key)
        cand_i, cand_j = cand_i[keep], cand_j[keep]
    if len(cand_i):
        dist = _triangle_distances(coords[cand_i], coords[cand_j])
        rho = dist / np.maximum(diam[cand_i], diam[cand_j])
        bands = [(rho >= RHO_NEAR, max(order - 1, 1)),
                 ((rho >= RHO_CLOSE) & (rho < RHO_NEAR), order)]
        for mask, p in bands:
            if mask.any():
                vals = _disjoint_band(coords, area2, cand_i[mask],
                                      cand_j[mask], p)
                G[cand_i[mask], cand_j[mask]] = vals
                G[cand_j[mask], cand_i[mask]] = vals
        close = rho < RHO_CLOSE
        if close.any():
            vals = _robust_pairs(coords[cand_i[close]], coords[cand_j[close]])
            G[cand_i[close], cand_j[close]] = vals
            G[cand_j[close], cand_i[close]] = vals

    G.setflags(write=False)
    return EnergyForm(mesh, G)


def _near_candidates(cent, radius, diam, rho_far, block=1024):
    """Upper-triangle pairs possibly closer than rho_far diameters."""
    nt = len(cent)
    out_i, out_j = [], []
    for i0 in range(0, nt, block):
        i1 = min(nt, i0 + block)
        dc = np.linalg.norm(cent[i0:i1, None, :] - cent[None, :, :], axis=2)
        bound = dc - radius[i0:i1, None] - radius[None, :]
        thresh = rho_far * np.maximum(diam[i0:i1, None], diam[None, :])
        ii, jj = np.nonzero(bound < thresh)
        ii = ii + i0
        m = ii < jj
        out_i.append(ii[m])
        out_j.append(jj[m])
    return np.concatenate(out_i), np.concatenate(out_j)


def energy_inner(form, u, v):
    """a(u, v) = sum_{T,T'} (u_T . v_T') G[T][T'] for curl fields."""
    if u.mesh is not form.mesh or v.mesh is not form.mesh:
        raise ValueError("fields do not live on the form's mesh")
    G = form.table
    return float(u.values[:, 0] @ G @ v.values[:, 0]
                 + u.values[:, 1] @ G @ v.values[:, 1])


def _curl_matrices(space):
    """Sparse per-component maps from DOFs to elementwise basis curls."""
    mesh = space.mesh
    grads = barycentric_gradients(mesh)
    rows, cols, gx, gy = [], [], [], []
    if space.kind == "cr":
        for slot in range(2):
            t = mesh.edge_tris[space.dof_to_entity, slot]
            valid = t >= 0
            tt = t[valid]
            eids = space.dof_to_entity[valid]
            loc = np.argmax(mesh.tri_edges[tt] == eids[:, None], axis=1)
            g = -2.0 * grads[tt, loc]
            rows.append(np.flatnonzero(valid))
            cols.append(tt)
            gx.append(g[:, 0])
            gy.append(g[:, 1])
    elif space.kind == "conforming":
        dof = space.entity_to_dof[mesh.triangles]  # (nt, 3)
        t_idx, loc = np.nonzero(dof >= 0)
        g = grads[t_idx, loc]
        rows.append(dof[t_idx, loc])
        cols.append(t_idx)
        gx.append(g[:, 0])
        gy.append(g[:, 1])
    else:
        raise ValueError(f"unknown space kind {space.kind!r}")
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    gx = np.concatenate(gx)
    gy = np.concatenate(gy)
    shape = (space.dof_count, mesh.num_triangles)
    # curl = (g_y, -g_x)
    cx = sp.csr_matrix((gy, (rows, cols)), shape=shape)
    cy = sp.csr_matrix((-gx, (rows, cols)), shape=shape)
    return cx, cy


def assemble_stiffness(form, space):
    """Galerkin matrix A[i][j] = a(basis_i, basis_j) on the given space."""
    if space.mesh is not form.mesh:
        raise ValueError("space does not live on the form's mesh")
    cx, cy = _curl_matrices(space)
    G = form.table
    a = cx @ (cx @ G).T + cy @ (cy @ G).T
    a = np.asarray(a)
    return 0.5 * (a + a.T)


def assemble_rhs_constant(space):
    """Load vector of f = 1: every supported basis integrates to |T|/3."""
    mesh = space.mesh
    b = np.zeros(space.dof_count)
    if space.kind == "cr":
        dof = space.entity_to_dof[mesh.tri_edges]
        t_idx, loc = np.nonzero(dof >= 0)
        np.add.at(b, dof[t_idx, loc], mesh.areas[t_idx] / 3.0)
    else:
        dof = space.entity_to_dof[mesh.triangles]
        t_idx, loc = np.nonzero(dof >= 0)
        np.add.at(b, dof[t_idx, loc], mesh.areas[t_idx] / 3.0)
    return b


def _power_moments_element(tri, alpha):
    """Exact int_T x^alpha * lambda_j for one triangle, j = 0, 1, 2.

    The triangle is cut into x-monotone strips; the inner y-integral of
    an affine function over an interval with affine bounds is a quadratic
    in x, and int x^(alpha+k) has a closed form for alpha > -1.
    """
    x = tri[:, 0]
    y = tri[:, 1]
    area2 = ((tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
             - (tri[1, 1] - tri[0, 1]) * (tri[2, 0] - tri[0, 0]))
    # affine barycentric coefficients: lambda_j = (a_j + b_j x + c_j y)/area2
    a_c = np.array([x[1] * y[2] - x[2] * y[1],
                    x[2] * y[0] - x[0] * y[2],
                    x[0] * y[1] - x[1] * y[0]])
    b_c = np.array([y[1] - y[2], y[2] - y[0], y[0] - y[1]])
    c_c = np.array([x[2] - x[1], x[0] - x[2], x[1] - x[0]])

    order = np.argsort(x, kind="stable")
    xs = x[order]
    moments = np.zeros(3)

    def edge_line(i, j):
        # y(x) on the edge between vertices i and j
        dx = x[j] - x[i]
        slope = (y[j] - y[i]) / dx
        return y[i] - slope * x[i], slope

    for x0, x1 in ((xs[0], xs[1]), (xs[1], xs[2])):
        if x1 - x0 <= 1e-300:
            continue
        xm = 0.5 * (x0 + x1)
        lines = []
        for i, j in ((0, 1), (1, 2), (2, 0)):
            lo, hi = min(x[i], x[j]), max(x[i], x[j])
            if lo <= xm <= hi and x[j] - x[i] != 0.0:
                lines.append(edge_line(i, j))
        (i0, s0), (i1, s1) = lines[0], lines[1]
        if i0 + s0 * xm > i1 + s1 * xm:
            (i0, s0), (i1, s1) = (i1, s1), (i0, s0)
        # cross-section [y_lo, y_hi] with y = i + s x; for each j:
        # inner = (a + b x)(y_hi - y_lo) + c (y_hi^2 - y_lo^2)/2
        dy0 = i1 - i0
        dy1 = s1 - s0
        sq0 = i1 * i1 - i0 * i0
        sq1 = 2.0 * (i1 * s1 - i0 * s0)
        sq2 = s1 * s1 - s0 * s0
        for j in range(3):
            # quadratic coefficients of the inner integral in x
            q0 = a_c[j] * dy0 + 0.5 * c_c[j] * sq0
            q1 = a_c[j] * dy1 + b_c[j] * dy0 + 0.5 * c_c[j] * sq1
            q2 = b_c[j] * dy1 + 0.5 * c_c[j] * sq2
            for k, q in enumerate((q0, q1, q2)):
                e = alpha + k + 1.0
                moments[j] += q * (x1 ** e - x0 ** e) / e
    return moments / area2


def assemble_rhs_power(space, alpha):
    """Load vector of f = x^alpha for -1 < alpha < 0, exact per element."""
    if not -1.0 < alpha:
        raise ValueError(f"power {alpha} gives a divergent load integral")
    mesh = space.mesh
    coords = mesh.triangle_coords()
    moments = np.empty((mesh.num_triangles, 3))
    for t in range(mesh.num_triangles):
        moments[t] = _power_moments_element(coords[t], alpha)
    b = np.zeros(space.dof_count)
    if space.kind == "cr":
        # psi_e = 1 - 2 lambda_opp
        total = moments.sum(axis=1)
        dof = space.entity_to_dof[mesh.tri_edges]
        t_idx, loc = np.nonzero(dof >= 0)
        np.add.at(b, dof[t_idx, loc], total[t_idx] - 2.0 * moments[t_idx, loc])
    else:
        dof = space.entity_to_dof[mesh.triangles]
        t_idx, loc = np.nonzero(dof >= 0)
        np.add.at(b, dof[t_idx, loc], moments[t_idx, loc])
    return b


def single_layer_field(source_coords, source_values, pts):
    """The single-layer potential of a piecewise-constant vector density,
    u(x) = (1/4pi) sum_S w_S int_S |x-y|^(-1) dy, evaluated at pts (...,2)."""
    shape = pts.shape
    flat = pts.reshape(1, -1, 2)
    u = np.zeros((flat.shape[1], 2))
    for s in range(len(source_coords)):
        pot = _segment_potential(source_coords[s][None], flat)[0]
        u += pot[:, None] * source_values[s]
    return u.reshape(shape[:-1] + (2,)) / FOUR_PI


def _consistency_correction(space, field_fn, p=10, panels=3):
    """Inter-element part of the manufactured data functional.

    Pairing the hypersingular data with a discontinuous test function
    elementwise leaves boundary terms: sum_T int_{dT} psi (u . t) ds with
    u = field_fn (the single-layer field of the manufactured curl
    density) and t the counterclockwise tangent.  For continuous test
    functions vanishing on the screen boundary these cancel, so
    conforming spaces skip this.
    """
    if space.kind != "cr":
        return np.zeros(space.dof_count)
    mesh = space.mesh
    s_nodes, s_wts = _gauss01_composite(p, panels)
    coords = mesh.triangle_coords()
    c = np.zeros(space.dof_count)
    # edge k of every triangle runs counterclockwise from local vertex
    # k+1 to k+2; traces of the three edge basis functions along it are
    # 1 (own edge), 2s-1, and 1-2s.
    for k in range(3):
        a = coords[:, (k + 1) % 3, :]
        b = coords[:, (k + 2) % 3, :]
        seg = b - a
        length = np.linalg.norm(seg, axis=1)
        pts = a[:, None, :] + s_nodes[None, :, None] * seg[:, None, :]
        u = field_fn(pts)
        ut = (u * seg[:, None, :]).sum(-1) / length[:, None]
        base = length * (s_wts[None, :] * ut).sum(axis=1)
        lin = length * ((s_wts * (2.0 * s_nodes - 1.0))[None, :] * ut).sum(axis=1)
        for off, t_const, t_lin in ((0, 1.0, 0.0), (1, 0.0, 1.0),
                                    (2, 0.0, -1.0)):
            dof = space.entity_to_dof[mesh.tri_edges[:, (k + off) % 3]]
            valid = dof >= 0
            np.add.at(c, dof[valid],
                      t_const * base[valid] + t_lin * lin[valid])
    return c


def assemble_rhs_manufactured(form, space, phi, source=None):
    """Load vector of the manufactured data f = W(phi).

    ``phi`` is either a conforming coefficient vector on the form's mesh
    or a piecewise-constant curl field on that mesh (the curl of a
    coarse-mesh function carried to this mesh).  Entries against
    conforming test functions are a(phi, basis_i); nonconforming test
    functions additionally see the inter-element terms of the data,
    evaluated from ``source`` = (panel coords, curl values), the curl
    density on its coarsest mesh (defaults to the form's mesh).
    """
    if isinstance(phi, CoefVec):
        if phi.space.mesh is not form.mesh:
            raise ValueError("phi does not live on the form's mesh")
        w = curl_field(phi)
    elif isinstance(phi, PwConstVecField):
        if phi.mesh is not form.mesh:
            raise ValueError("phi does not live on the form's mesh")
        w = phi
    else:
        raise TypeError("phi must be a CoefVec or PwConstVecField")
    if space.mesh is not form.mesh:
        raise ValueError("space does not live on the form's mesh")
    cx, cy = _curl_matrices(space)
    G = form.table
    b = cx @ (G @ w.values[:, 0]) + cy @ (G @ w.values[:, 1])
    if space.kind == "cr":
        if source is None:
            source = (form.mesh.triangle_coords(), w.values)
        coords, values = source
        b = b + _consistency_correction(
            space, lambda pts: single_layer_field(coords, values, pts))
    return b
