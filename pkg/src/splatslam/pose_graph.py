"""Pose graph over keyframe poses with sequential and loop edges, solved
by Levenberg-Marquardt.

Edge residuals are e = log(Z^-1 ∘ (T_from^-1 ∘ T_to)) as 6-vectors ordered
[rotation, translation]; edges carry 6x6 information matrices. Updates are
left-multiplicative twists per node; fixed nodes (at least the first
keyframe) pin the gauge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set

import numpy as np

from .geometry import Pose, se3_compose, se3_exp, se3_inverse, Twist

LM_LAMBDA0 = 1e-4
LM_MAX_ITERS = 100
LM_REL_TOL = 1e-9
LM_MAX_REJECTS = 10
_FD_H = 1e-6


@dataclass
class PoseGraphEdge:
    from_id: int
    to_id: int
    measurement: Pose            # Z, measured relative pose
    information: np.ndarray      # (6,6) SPD, [rotation, translation] order
    is_loop: bool = False


class PoseGraph:
    def __init__(self, fixed_id: Optional[int] = None):
        self.nodes: Dict[int, Pose] = {}
        self.edges: List[PoseGraphEdge] = []
        self.fixed_id = fixed_id

    def add_node(self, node_id: int, pose: Pose) -> None:
        if self.fixed_id is None:
            self.fixed_id = node_id
        self.nodes[node_id] = pose.copy()

    def add_edge(self, from_id: int, to_id: int, measurement: Pose,
                 information: np.ndarray, is_loop: bool = False) -> None:
        if from_id not in self.nodes or to_id not in self.nodes:
            raise ValueError("edge references a missing node")
        information = np.asarray(information, dtype=np.float64)
        if information.shape != (6, 6) or not np.allclose(information, information.T):
            raise ValueError("information matrix must be symmetric 6x6")
        if np.linalg.eigvalsh(information).min() <= 0:
            raise ValueError("information matrix must be positive definite")
        self.edges.append(PoseGraphEdge(from_id, to_id, measurement.copy(), information, is_loop))


# batched quaternion helpers (w,x,y,z)

def _q_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=1,
    )


def _q_conj(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _q_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    # v' = v + 2 w (u x v) + 2 u x (u x v), u = quaternion vector part
    u = q[:, 1:]
    w = q[:, :1]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def _se3_log_batch(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Batched SE(3) log of (quat, trans) pairs -> (E,6) [rot, trans]."""
    q = np.where(q[:, :1] < 0, -q, q)
    w = np.clip(q[:, 0], -1.0, 1.0)
    theta = 2.0 * np.arccos(w)
    sin_half = np.linalg.norm(q[:, 1:], axis=1)
    small = theta < 1e-6
    scale = np.where(small, 2.0 + theta**2 / 12.0, theta / np.maximum(sin_half, 1e-300))
    omega = q[:, 1:] * scale[:, None]

    th2 = theta * theta
    coef = np.where(
        theta < 1e-4,
        1.0 / 12.0 + th2 / 720.0,
        np.divide(
            1.0 - theta * np.cos(theta / 2.0) / (2.0 * np.maximum(np.sin(theta / 2.0), 1e-300)),
            np.maximum(th2, 1e-300),
        ),
    )
    # V^-1 t = t - 0.5 w x t + coef * w x (w x t)
    wt = np.cross(omega, t)
    v = t - 0.5 * wt + coef[:, None] * np.cross(omega, wt)
    return np.concatenate([omega, v], axis=1)


class _EdgeArrays:
    def __init__(self, graph: PoseGraph, node_order: List[int]):
        pos = {nid: i for i, nid in enumerate(node_order)}
        self.fi = np.array([pos[e.from_id] for e in graph.edges], dtype=np.int64)
        self.ti = np.array([pos[e.to_id] for e in graph.edges], dtype=np.int64)
        self.zq_conj = np.stack([se3_inverse(e.measurement).rotation for e in graph.edges])
        self.zq_inv_t = np.stack([se3_inverse(e.measurement).translation for e in graph.edges])
        self.info = np.stack([e.information for e in graph.edges])

    def residuals(self, Q: np.ndarray, T: np.ndarray,
                  dq_f=None, dt_f=None, dq_t=None, dt_t=None) -> np.ndarray:
        qf, tf = Q[self.fi], T[self.fi]
        qt, tt = Q[self.ti], T[self.ti]
        if dq_f is not None:
            tf = _q_rotate(np.broadcast_to(dq_f, qf.shape), tf) + dt_f
            qf = _q_mul(np.broadcast_to(dq_f, qf.shape), qf)
        if dq_t is not None:
            tt = _q_rotate(np.broadcast_to(dq_t, qt.shape), tt) + dt_t
            qt = _q_mul(np.broadcast_to(dq_t, qt.shape), qt)
        # rel = T_f^-1 ∘ T_t
        qfc = _q_conj(qf)
        q_rel = _q_mul(qfc, qt)
        t_rel = _q_rotate(qfc, tt - tf)
        # err = Z^-1 ∘ rel
        q_err = _q_mul(self.zq_conj, q_rel)
        t_err = _q_rotate(self.zq_conj, t_rel) + self.zq_inv_t
        return _se3_log_batch(q_err, t_err)

    def cost(self, r: np.ndarray) -> float:
        return 0.5 * float(np.einsum("ei,eij,ej->", r, self.info, r))


def _check_connected(graph: PoseGraph) -> None:
    ids = list(graph.nodes)
    adj: Dict[int, List[int]] = {i: [] for i in ids}
    for e in graph.edges:
        adj[e.from_id].append(e.to_id)
        adj[e.to_id].append(e.from_id)
    seen = {graph.fixed_id}
    stack = [graph.fixed_id]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != len(ids):
        raise ValueError("pose graph is disconnected")


def optimize_pose_graph(graph: PoseGraph,
                        extra_fixed: Iterable[int] = ()) -> Dict[int, Pose]:
    """LM minimization of the weighted edge residuals.

    Nodes in `extra_fixed` (plus the graph's fixed node) are held
    constant. Returns the optimized pose per node id; the input graph
    nodes are not mutated.
    """
    if graph.fixed_id is None or not graph.nodes:
        raise ValueError("pose graph has no fixed node")
    _check_connected(graph)

    node_order = sorted(graph.nodes)
    fixed: Set[int] = {graph.fixed_id} | set(extra_fixed)
    free = [nid for nid in node_order if nid not in fixed]
    if not graph.edges or not free:
        return {nid: graph.nodes[nid].copy() for nid in node_order}
    free_pos = {nid: i for i, nid in enumerate(free)}

    Q = np.stack([graph.nodes[n].rotation for n in node_order])
    T = np.stack([graph.nodes[n].translation for n in node_order])
    ea = _EdgeArrays(graph, node_order)

    # twist basis perturbations for the central-difference Jacobian
    pert = []
    for k in range(6):
        v = np.zeros(6)
        v[k] = _FD_H
        plus = se3_exp(Twist.from_vector(v))
        minus = se3_exp(Twist.from_vector(-v))
        pert.append((plus.rotation, plus.translation, minus.rotation, minus.translation))

    def edge_jacobians(Q, T):
        E = ea.fi.size
        Jf = np.zeros((E, 6, 6))
        Jt = np.zeros((E, 6, 6))
        for k, (qp, tp, qm, tm) in enumerate(pert):
            rp = ea.residuals(Q, T, dq_f=qp, dt_f=tp)
            rm = ea.residuals(Q, T, dq_f=qm, dt_f=tm)
            Jf[:, :, k] = (rp - rm) / (2.0 * _FD_H)
            rp = ea.residuals(Q, T, dq_t=qp, dt_t=tp)
            rm = ea.residuals(Q, T, dq_t=qm, dt_t=tm)
            Jt[:, :, k] = (rp - rm) / (2.0 * _FD_H)
        return Jf, Jt

    node_pos = {nid: i for i, nid in enumerate(node_order)}

    def apply_step(Q, T, delta):
        Qn, Tn = Q.copy(), T.copy()
        for nid, j in free_pos.items():
            i = node_pos[nid]
            p = se3_compose(se3_exp(Twist.from_vector(delta[6 * j : 6 * j + 6])),
                            Pose(Q[i], T[i]))
            Qn[i] = p.rotation
            Tn[i] = p.translation
        return Qn, Tn

    r = ea.residuals(Q, T)
    cost = ea.cost(r)
    lam = LM_LAMBDA0
    rejects = 0
    n_free = len(free)

    for _ in range(LM_MAX_ITERS):
        if cost <= 1e-18:
            break
        Jf, Jt = edge_jacobians(Q, T)
        H = np.zeros((6 * n_free, 6 * n_free))
        g = np.zeros(6 * n_free)
        for e_idx in range(ea.fi.size):
            info = ea.info[e_idx]
            re = r[e_idx]
            blocks = []
            for idx, J in ((ea.fi[e_idx], Jf[e_idx]), (ea.ti[e_idx], Jt[e_idx])):
                nid = node_order[int(idx)]
                if nid in free_pos:
                    blocks.append((free_pos[nid], J))
            for bi, Ji in blocks:
                g[6 * bi : 6 * bi + 6] += Ji.T @ info @ re
                for bj, Jj in blocks:
                    H[6 * bi : 6 * bi + 6, 6 * bj : 6 * bj + 6] += Ji.T @ info @ Jj

        if np.max(np.abs(g)) < 1e-12:
            break
        stepped = False
        converged = False
        while rejects < LM_MAX_REJECTS:
            try:
                delta = np.linalg.solve(H + lam * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                if np.max(np.abs(delta)) < 1e-14:
                    converged = True
                    break
                Qn, Tn = apply_step(Q, T, delta)
                rn = ea.residuals(Qn, Tn)
                cn = ea.cost(rn)
                if cn < cost:
                    rel_change = (cost - cn) / max(cost, 1e-300)
                    Q, T, r = Qn, Tn, rn
                    cost = cn
                    lam *= 0.5
                    rejects = 0
                    stepped = True
                    if rel_change < LM_REL_TOL:
                        return _collect(node_order, Q, T)
                    break
            lam *= 10.0
            rejects += 1
        if converged:
            break
        if rejects >= LM_MAX_REJECTS:
            if cost <= 1e-18:
                break
            raise RuntimeError("pose graph optimization failed to make progress")
        if not stepped:
            break
    return _collect(node_order, Q, T)


def _collect(node_order, Q, T) -> Dict[int, Pose]:
    return {nid: Pose(Q[i], T[i]) for i, nid in enumerate(node_order)}


def graph_cost(graph: PoseGraph) -> float:
    """Current weighted objective of the graph (half squared residuals)."""
    node_order = sorted(graph.nodes)
    if not graph.edges:
        return 0.0
    Q = np.stack([graph.nodes[n].rotation for n in node_order])
    T = np.stack([graph.nodes[n].translation for n in node_order])
    ea = _EdgeArrays(graph, node_order)
    return ea.cost(ea.residuals(Q, T))


_G2O_PERM = np.array([3, 4, 5, 0, 1, 2])  # [rot,trans] -> g2o [trans,rot]


def write_g2o(graph: PoseGraph, path) -> None:
    """Export as VERTEX_SE3:QUAT / EDGE_SE3:QUAT text.

    Vertices are the stored camera-from-world poses; information matrices
    are permuted to g2o's translation-first ordering.
    """
    lines = []
    for nid in sorted(graph.nodes):
        p = graph.nodes[nid]
        t = p.translation
        w, x, y, z = p.rotation
        lines.append(
            f"VERTEX_SE3:QUAT {nid} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
            f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}"
        )
    if graph.fixed_id is not None:
        lines.append(f"FIX {graph.fixed_id}")
    for e in graph.edges:
        t = e.measurement.translation
        w, x, y, z = e.measurement.rotation
        info = e.information[np.ix_(_G2O_PERM, _G2O_PERM)]
        upper = " ".join(f"{info[i, j]:.9f}" for i in range(6) for j in range(i, 6))
        lines.append(
            f"EDGE_SE3:QUAT {e.from_id} {e.to_id} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
            f"{x:.9f} {y:.9f} {z:.9f} {w:.9f} {upper}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
