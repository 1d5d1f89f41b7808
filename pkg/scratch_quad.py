"""Prototype: panel-pair quadrature rules vs semi-analytic oracle."""
import numpy as np
from numpy.polynomial.legendre import leggauss

FOUR_PI = 4.0 * np.pi


# ---------- oracle: analytic inner integral + subdivided Gauss outer ----------

def inner_integral(tri, pts):
    """I(x) = int_tri 1/|x-y| dy for coplanar x, closed form per edge."""
    tri = np.asarray(tri, float)
    pts = np.atleast_2d(np.asarray(pts, float))
    total = np.zeros(len(pts))
    for k in range(3):
        A, B = tri[k], tri[(k + 1) % 3]
        t = B - A
        L = np.hypot(*t)
        t = t / L
        n = np.array([t[1], -t[0]])  # outward for CCW ordering
        d = (A - pts) @ n
        sA = (A - pts) @ t
        sB = (B - pts) @ t
        RA = np.hypot(sA, d)
        RB = np.hypot(sB, d)
        num = np.where(sB < 0, d * d / (RB - sB), sB + RB)
        den = np.where(sA < 0, d * d / (RA - sA), sA + RA)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = d * np.log(num / den)
        total += np.where(np.abs(d) < 1e-14, 0.0, term)
    return total


def duffy_nodes(p):
    """Map [0,1]^2 tensor Gauss to the triangle {0<=w2<=w1<=1}."""
    g, w = leggauss(p)
    g = 0.5 * (g + 1.0)
    w = 0.5 * w
    a, b = np.meshgrid(g, g, indexing="ij")
    wa, wb = np.meshgrid(w, w, indexing="ij")
    nodes = np.stack([a.ravel(), (a * b).ravel()], axis=1)
    weights = (wa * wb * a).ravel()  # duffy jacobian a
    return nodes, weights


def map_tau(tri, nodes):
    tri = np.asarray(tri, float)
    return tri[0] + np.outer(nodes[:, 0], tri[1] - tri[0]) + np.outer(nodes[:, 1], tri[2] - tri[1])


def oracle_pair(ta, tb, depth=4, p=16):
    """(1/4pi) int_ta int_tb 1/|x-y|: analytic inner, subdivided outer."""
    ta = np.asarray(ta, float)
    tris = [ta]
    for _ in range(depth):
        nxt = []
        for t in tris:
            m01, m12, m20 = (t[0]+t[1])/2, (t[1]+t[2])/2, (t[2]+t[0])/2
            nxt += [np.array([t[0], m01, m20]), np.array([m01, t[1], m12]),
                    np.array([m20, m12, t[2]]), np.array([m01, m12, m20])]
        tris = nxt
    nodes, wts = duffy_nodes(p)
    total = 0.0
    for t in tris:
        area2 = abs(np.cross(t[1]-t[0], t[2]-t[0]))
        pts = map_tau(t, nodes)
        total += area2 * np.sum(wts * inner_integral(tb, pts))
    return total / FOUR_PI


# ---------- regularized rules (nodes on tau x tau, weights sum to 1/4) --------

def gauss01(p):
    g, w = leggauss(p)
    return 0.5 * (g + 1.0), 0.5 * w


def tensor4(p):
    g, w = gauss01(p)
    Q = np.stack(np.meshgrid(g, g, g, g, indexing="ij"), axis=-1).reshape(-1, 4)
    W = np.stack(np.meshgrid(w, w, w, w, indexing="ij"), axis=-1).reshape(-1, 4).prod(axis=1)
    return Q, W


def rule_identical(p):
    Q, W = tensor4(p)
    xi, eta, a, b = Q.T
    w = W * xi * (1 - xi) ** 2 * a
    ys = []
    zs = []
    # sector 1
    ys.append(np.stack([(1 - xi) * a, (1 - xi) * a * b], 1))
    zs.append(np.stack([xi, xi * eta], 1))
    # sector 2
    ys.append(np.stack([xi * (1 - eta) + (1 - xi) * a, (1 - xi) * a * b], 1))
    zs.append(np.stack([xi * eta, xi], 1))
    # sector 3
    ys.append(np.stack([xi + (1 - xi) * a, (1 - xi) * a * b], 1))
    zs.append(np.stack([xi * (eta - 1), xi * eta], 1))
    xs_list, ys_list, ws_list = [], [], []
    for y, z in zip(ys, zs):
        x = y + z
        xs_list += [x, y]
        ys_list += [y, x]
        ws_list += [w, w]
    return (np.concatenate(xs_list), np.concatenate(ys_list),
            np.concatenate(ws_list))


def rule_edge(p):
    Q, W = tensor4(p)
    q1, q2, q3, q4 = Q.T
    xs_list, ys_list, ws_list = [], [], []
    # region A
    xA = np.stack([q1, q1 * q2], 1)
    yA = np.stack([q1 * (1 - q2 * q3 * q4), q1 * q2 * q4 * (1 - q3)], 1)
    wA = W * q1 ** 3 * q2 ** 2 * q4
    # region B
    xB = np.stack([q1, q1 * q2 * q4], 1)
    yB = np.stack([q1 * (1 - q2 * q3), q1 * q2 * (1 - q3)], 1)
    wB = W * q1 ** 3 * q2 ** 2
    for x, y, w in ((xA, yA, wA), (xB, yB, wB)):
        xs_list += [x, y]
        ys_list += [y, x]
        ws_list += [w, w]
    return (np.concatenate(xs_list), np.concatenate(ys_list),
            np.concatenate(ws_list))


def rule_vertex(p):
    Q, W = tensor4(p)
    xi, eta, b1, b2 = Q.T
    w = W * xi ** 3 * eta
    x1 = np.stack([xi, xi * b1], 1)
    y1 = np.stack([xi * eta, xi * eta * b2], 1)
    x2 = np.stack([xi * eta, xi * eta * b1], 1)
    y2 = np.stack([xi, xi * b2], 1)
    return (np.concatenate([x1, x2]), np.concatenate([y1, y2]),
            np.concatenate([w, w]))


def rule_disjoint(p):
    Q, W = tensor4(p)
    a1, b1, a2, b2 = Q.T
    x = np.stack([a1, a1 * b1], 1)
    y = np.stack([a2, a2 * b2], 1)
    return x, y, W * a1 * a2


def apply_rule(ta, tb, rule):
    xn, yn, w = rule
    ta, tb = np.asarray(ta, float), np.asarray(tb, float)
    pa = map_tau(ta, xn)
    pb = map_tau(tb, yn)
    r = np.linalg.norm(pa - pb, axis=1)
    a2a = abs(np.cross(ta[1]-ta[0], ta[2]-ta[0]))
    a2b = abs(np.cross(tb[1]-tb[0], tb[2]-tb[0]))
    return a2a * a2b * np.sum(w / r) / FOUR_PI


if __name__ == "__main__":
    T = np.array([[0., 0.], [1., 0.], [0., 1.]])

    for p in (3, 4, 5, 7, 9):
        r = rule_identical(p)
        print(f"identical p={p}: wsum={r[2].sum():.15f} val={apply_rule(T, T, r):.12f}")
    for depth, p in ((3, 12), (4, 14), (5, 16)):
        print(f"oracle self depth={depth}: {oracle_pair(T, T, depth, p):.12f}")

    # edge-adjacent: reflect T across edge (0,0)-(1,0): shared edge P=(0,0),Q=(1,0)
    Ta = np.array([[0., 0.], [1., 0.], [0., 1.]])
    Tb = np.array([[0., 0.], [1., 0.], [1., -1.]])  # (P, Q, R)
    for p in (3, 5, 7, 9):
        r = rule_edge(p)
        print(f"edge p={p}: wsum={r[2].sum():.15f} val={apply_rule(Ta, Tb, r):.12f}")
    print("oracle edge:", oracle_pair(Ta, Tb, 4, 14), oracle_pair(Ta, Tb, 5, 14))

    # vertex-adjacent: share (0,0)
    Tc = np.array([[0., 0.], [-1., 0.], [-1., -1.]])
    for p in (3, 5, 7, 9):
        r = rule_vertex(p)
        print(f"vertex p={p}: wsum={r[2].sum():.15f} val={apply_rule(Ta, Tc, r):.12f}")
    print("oracle vertex:", oracle_pair(Ta, Tc, 4, 14), oracle_pair(Ta, Tc, 5, 14))

    # disjoint near (separation ~0.1 of size)
    Td = np.array([[1.2, 0.1], [2.2, 0.3], [1.4, 1.2]])
    for p in (3, 4, 5, 7, 9):
        r = rule_disjoint(p)
        print(f"disjoint p={p}: wsum={r[2].sum():.15f} val={apply_rule(Ta, Td, r):.12f}")
    print("oracle disjoint:", oracle_pair(Ta, Td, 3, 12), oracle_pair(Ta, Td, 4, 14))
