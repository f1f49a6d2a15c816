"""Pose-graph storage and robust Levenberg-Marquardt optimization on SE(3).

Edge residuals are ``e = log(Z^-1 T_i^-1 T_j)`` for measurement ``Z`` between
nodes ``i`` and ``j``; poses are perturbed on the right, ``T <- T exp(d)``.
Edges flagged robust contribute ``rho(e^T Omega e)`` with the Cauchy loss.
"""

from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import se3
from ._validation import check_information, check_positive
from .se3 import Pose

logger = logging.getLogger(__name__)

ODOMETRY_CONSECUTIVE = "odometry-consecutive"
ODOMETRY_KEYFRAME = "odometry-keyframe"
LOOP_CLOSURE = "loop-closure"
EDGE_KINDS = (ODOMETRY_CONSECUTIVE, ODOMETRY_KEYFRAME, LOOP_CLOSURE)


class PoseGraphError(ValueError):
    pass


class GaugeError(PoseGraphError):
    pass


class ConnectivityError(PoseGraphError):
    pass


class MergeError(PoseGraphError):
    pass


@dataclass(frozen=True)
class RobustKernelConfig:
    delta: float = 2.0

    def __post_init__(self):
        check_positive("delta", self.delta)


def cauchy_rho(x, delta=2.0):
    """Cauchy loss ``delta^2 log(x / delta^2 + 1)`` and its derivative.

    ``x`` is a squared (Mahalanobis) error, so it must be nonnegative.
    """
    if x < 0:
        raise ValueError(f"Cauchy loss is defined for x >= 0, got {x}")
    d2 = delta * delta
    u = x / d2
    if u == 0.0:
        return 0.0 * x, 1.0
    # x * log1p(u) / u rather than d2 * log1p(u): stays <= x even when u underflows
    return x * (np.log1p(u) / u), 1.0 / (u + 1.0)


@dataclass
class PoseGraphNode:
    id: int
    pose: Pose
    is_keyframe: bool = False
    fixed: bool = False
    # keyframe whose local graph this node was tracked in
    anchor: int | None = None


def default_information():
    """Information matrix used for every edge unless one is supplied."""
    return np.eye(6)


@dataclass
class PoseGraphEdge:
    source: int
    target: int
    measurement: Pose
    information: np.ndarray = field(default_factory=default_information)
    robust: RobustKernelConfig | None = None
    kind: str = ODOMETRY_CONSECUTIVE

    def __post_init__(self):
        self.information = check_information(self.information)
        if self.kind not in EDGE_KINDS:
            raise ValueError(f"unknown edge kind {self.kind!r}")

    @property
    def key(self):
        return (self.source, self.target, self.kind)


class PoseGraph:
    """Nodes keyed by integer id plus a list of relative-pose edges."""

    def __init__(self):
        self.nodes: dict[int, PoseGraphNode] = {}
        self.edges: list[PoseGraphEdge] = []
        self._edge_keys: set = set()
        self._merged: set = set()

    def __len__(self):
        return len(self.nodes)

    def add_node(self, node_id, pose, is_keyframe=False, fixed=False, anchor=None) -> PoseGraphNode:
        if node_id in self.nodes:
            raise MergeError(f"node {node_id} already exists")
        node = PoseGraphNode(int(node_id), pose, is_keyframe, fixed, anchor)
        self.nodes[node.id] = node
        return node

    def add_edge(self, edge: PoseGraphEdge) -> PoseGraphEdge:
        for end in (edge.source, edge.target):
            if end not in self.nodes:
                raise PoseGraphError(f"edge references unknown node {end}")
        if edge.key in self._edge_keys:
            raise MergeError(f"duplicate edge {edge.key}")
        self._edge_keys.add(edge.key)
        self.edges.append(edge)
        return edge

    def poses(self) -> dict[int, Pose]:
        return {i: n.pose for i, n in self.nodes.items()}

    def keyframe_ids(self):
        return sorted(i for i, n in self.nodes.items() if n.is_keyframe)

    def set_robust(self, edges, cfg: RobustKernelConfig | None):
        for e in edges:
            e.robust = cfg


_local_tokens = itertools.count()


class LocalPoseGraph(PoseGraph):
    """Graph of one keyframe and the ordinary frames tracked against it.

    Every ordinary frame has one keyframe edge ``T_n^m`` and, except the
    first frame after the keyframe, one consecutive edge ``T_n^{n-1}``. For
    that first frame both measurements coincide, so only the keyframe edge
    is stored.
    """

    def __init__(self, keyframe_id, keyframe_pose: Pose):
        super().__init__()
        self.keyframe_id = int(keyframe_id)
        self.token = next(_local_tokens)
        self.add_node(self.keyframe_id, keyframe_pose, is_keyframe=True)
        self._last = self.keyframe_id

    @property
    def frame_ids(self):
        return [i for i in self.nodes if i != self.keyframe_id]

    def add_frame(self, frame_id, pose: Pose, keyframe_measurement: Pose,
                  consecutive_measurement: Pose | None = None, information=None):
        info = default_information() if information is None else information
        self.add_node(frame_id, pose, anchor=self.keyframe_id)
        self.add_edge(PoseGraphEdge(self.keyframe_id, frame_id, keyframe_measurement, info,
                                    kind=ODOMETRY_KEYFRAME))
        if self._last != self.keyframe_id:
            if consecutive_measurement is None:
                raise ValueError("consecutive measurement required after the first frame")
            self.add_edge(PoseGraphEdge(self._last, frame_id, consecutive_measurement, info,
                                        kind=ODOMETRY_CONSECUTIVE))
        self._last = int(frame_id)

    def check_invariants(self):
        keyframes = [i for i, n in self.nodes.items() if n.is_keyframe]
        if keyframes != [self.keyframe_id]:
            raise PoseGraphError(f"local graph must hold exactly one keyframe, found {keyframes}")
        kf_edges = {e.target for e in self.edges if e.kind == ODOMETRY_KEYFRAME}
        consecutive = [e.target for e in self.edges if e.kind == ODOMETRY_CONSECUTIVE]
        ordinary = self.frame_ids
        if kf_edges != set(ordinary) or len(kf_edges) != sum(e.kind == ODOMETRY_KEYFRAME for e in self.edges):
            raise PoseGraphError("every ordinary frame needs exactly one keyframe edge")
        if sorted(consecutive) != sorted(ordinary[1:]):
            raise PoseGraphError("every ordinary frame after the first needs one consecutive edge")


def edge_residual(edge: PoseGraphEdge, poses) -> np.ndarray:
    """Twist ``log(Z^-1 T_i^-1 T_j)``; zero iff ``T_j = T_i Z``."""
    Ti, Tj = poses[edge.source], poses[edge.target]
    return se3.log(edge.measurement.inverse() @ Ti.inverse() @ Tj)


def edge_jacobians(edge: PoseGraphEdge, poses):
    """Analytic Jacobians of :func:`edge_residual` for right perturbations."""
    Ti, Tj = poses[edge.source], poses[edge.target]
    e = se3.log(edge.measurement.inverse() @ Ti.inverse() @ Tj)
    Jr_inv = se3.right_jacobian_inv(e)
    Jj = Jr_inv
    Ji = -Jr_inv @ se3.adjoint(Tj.inverse() @ Ti)
    return e, Ji, Jj


def edge_cost(edge, poses):
    e = edge_residual(edge, poses)
    s = float(e @ edge.information @ e)
    if edge.robust is not None:
        return cauchy_rho(s, edge.robust.delta)[0]
    return s


def total_cost(edges, poses):
    return float(sum(edge_cost(e, poses) for e in edges))


@dataclass
class OptimizationStats:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    # robustified cost after every accepted step
    cost_history: list = field(default_factory=list, repr=False)


def _scope(graph: PoseGraph, scope: str, fixed_extra=()):
    if scope == "full" or scope == "local":
        node_ids = set(graph.nodes)
        edges = list(graph.edges)
    elif scope == "keyframes":
        node_ids = {i for i, n in graph.nodes.items() if n.is_keyframe}
        edges = [e for e in graph.edges if e.source in node_ids and e.target in node_ids]
    else:
        raise ValueError(f"unknown scope {scope!r}")
    fixed = {i for i in node_ids if graph.nodes[i].fixed} | (set(fixed_extra) & node_ids)
    return node_ids, edges, fixed


def _check_connected(node_ids, edges):
    if not node_ids:
        raise ConnectivityError("optimization scope is empty")
    adj = {i: [] for i in node_ids}
    for e in edges:
        adj[e.source].append(e.target)
        adj[e.target].append(e.source)
    start = min(node_ids)
    seen = {start}
    queue = deque([start])
    while queue:
        for nxt in adj[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    if seen != node_ids:
        missing = sorted(node_ids - seen)
        raise ConnectivityError(f"optimization scope is disconnected; unreachable nodes {missing[:10]}")


def optimize(graph: PoseGraph, scope="full", max_iter=None, term_tol=1e-6, fixed_ids=(),
             damping=1e-4, grad_tol=1e-12) -> OptimizationStats:
    """Minimize ``sum e^T Omega e`` (Cauchy-robustified where flagged).

    ``scope`` is ``"local"`` (a local graph; pass its keyframe in
    ``fixed_ids`` to pin it temporarily), ``"keyframes"`` (keyframe nodes and
    the edges between them; ordinary frames then follow their anchor
    keyframe rigidly) or ``"full"``.

    Robust edges are handled by iterative reweighting: each linearization
    scales ``Omega`` by ``rho'(e^T Omega e)``. A step is accepted only when the
    robustified cost decreases; damping is divided by 10 on acceptance and
    multiplied by 10 on rejection. Iteration stops when the relative cost
    decrease drops below ``term_tol`` or the gradient's largest entry is at
    most ``grad_tol``.
    """
    if max_iter is None:
        max_iter = 50 if scope == "local" else 100
    node_ids, edges, fixed = _scope(graph, scope, fixed_ids)
    if not fixed:
        raise GaugeError(f"no fixed node in {scope!r} scope; the solution is not unique")
    _check_connected(node_ids, edges)

    before = {i: graph.nodes[i].pose for i in graph.nodes}
    free = sorted(node_ids - fixed)
    index = {nid: k for k, nid in enumerate(free)}
    poses = {i: graph.nodes[i].pose for i in node_ids}
    cost = total_cost(edges, poses)
    stats = OptimizationStats(0, cost, cost, False, [cost])
    if not free or not edges:
        stats.converged = True
        return stats

    lam = damping
    for it in range(1, max_iter + 1):
        stats.iterations = it
        H, b = _normal_equations(edges, poses, index, len(free))
        if np.abs(b).max() <= grad_tol:
            stats.converged = True
            break
        accepted = False
        while lam < 1e12:
            A = (H + lam * sp.identity(H.shape[0], format="csc")).tocsc()
            delta = spsolve(A, -b)
            candidate = dict(poses)
            for nid, k in index.items():
                candidate[nid] = poses[nid] @ se3.exp(delta[6 * k:6 * k + 6])
            new_cost = total_cost(edges, candidate)
            if new_cost < cost:
                accepted = True
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not accepted:
            stats.converged = True
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        poses, cost = candidate, new_cost
        stats.cost_history.append(cost)
        if rel < term_tol:
            stats.converged = True
            break

    for nid in free:
        graph.nodes[nid].pose = poses[nid]
    if scope == "keyframes":
        _reattach_ordinary_frames(graph, before)
    stats.final_cost = cost
    return stats


def _normal_equations(edges, poses, index, n_free):
    rows, cols, vals = [], [], []
    b = np.zeros(6 * n_free)
    blk = np.arange(6)
    for edge in edges:
        e, Ji, Jj = edge_jacobians(edge, poses)
        omega = edge.information
        if edge.robust is not None:
            omega = cauchy_rho(float(e @ omega @ e), edge.robust.delta)[1] * omega
        parts = [(edge.source, Ji), (edge.target, Jj)]
        for a, Ja in parts:
            if a not in index:
                continue
            ka = index[a]
            b[6 * ka:6 * ka + 6] += Ja.T @ omega @ e
            for c, Jc in parts:
                if c not in index:
                    continue
                kc = index[c]
                block = Ja.T @ omega @ Jc
                rows.append(np.repeat(6 * ka + blk, 6))
                cols.append(np.tile(6 * kc + blk, 6))
                vals.append(block.ravel())
    if rows:
        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(6 * n_free, 6 * n_free),
        ).tocsc()
    else:
        H = sp.csc_matrix((6 * n_free, 6 * n_free))
    return H, b


def _reattach_ordinary_frames(graph, before):
    for node in graph.nodes.values():
        if node.is_keyframe or node.anchor is None or node.anchor not in graph.nodes:
            continue
        rel = before[node.anchor].inverse() @ before[node.id]
        node.pose = graph.nodes[node.anchor].pose @ rel


def merge_local_graph(global_graph: PoseGraph, local, robust: RobustKernelConfig | None = None):
    """Insert a completed local graph into ``global_graph``.

    Node ids are frame indices, so they are shared between graphs. The local
    graph's keyframe may already be present (as the last ordinary frame of
    the previous local graph); it is then promoted to a keyframe. Any other
    id collision, or merging the same local graph twice, raises
    :class:`MergeError`. Returns the list of edges added.
    """
    token = local.token
    if token in global_graph._merged:
        raise MergeError(f"local graph rooted at keyframe {local.keyframe_id} was already merged")
    for nid in local.nodes:
        if nid in global_graph.nodes and nid != local.keyframe_id:
            raise MergeError(f"node id collision on {nid}")
    for edge in local.edges:
        if edge.key in global_graph._edge_keys:
            raise MergeError(f"duplicate edge {edge.key}")

    for nid, node in local.nodes.items():
        if nid in global_graph.nodes:
            existing = global_graph.nodes[nid]
            existing.is_keyframe = True
            existing.anchor = None
            continue
        global_graph.add_node(nid, node.pose, node.is_keyframe, False, node.anchor)
    if not any(n.fixed for n in global_graph.nodes.values()):
        global_graph.nodes[local.keyframe_id].fixed = True
    added = []
    for edge in local.edges:
        copy = PoseGraphEdge(edge.source, edge.target, edge.measurement, edge.information.copy(),
                             robust if robust is not None else edge.robust, edge.kind)
        added.append(global_graph.add_edge(copy))
    global_graph._merged.add(token)
    return added


# --- g2o text format ------------------------------------------------------

# residual/information order here is [omega, v]; g2o uses [t, rotation]
_G2O_PERM = np.array([3, 4, 5, 0, 1, 2])


def _pose_fields(p: Pose):
    q = p.as_quaternion()
    return list(p.translation) + list(q)


def write_g2o(graph: PoseGraph, path):
    lines = []
    for nid in sorted(graph.nodes):
        vals = " ".join(f"{v:.17g}" for v in _pose_fields(graph.nodes[nid].pose))
        lines.append(f"VERTEX_SE3:QUAT {nid} {vals}")
    for edge in graph.edges:
        vals = " ".join(f"{v:.17g}" for v in _pose_fields(edge.measurement))
        info = edge.information[np.ix_(_G2O_PERM, _G2O_PERM)]
        upper = " ".join(f"{info[r, c]:.17g}" for r in range(6) for c in range(r, 6))
        lines.append(f"EDGE_SE3:QUAT {edge.source} {edge.target} {vals} {upper}")
    for nid in sorted(graph.nodes):
        if graph.nodes[nid].fixed:
            lines.append(f"FIX {nid}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_g2o(path) -> PoseGraph:
    graph = PoseGraph()
    inv_perm = np.argsort(_G2O_PERM)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == "VERTEX_SE3:QUAT":
                    v = [float(x) for x in tok[2:9]]
                    graph.add_node(int(tok[1]), Pose.from_quaternion(v[:3], v[3:]))
                elif tok[0] == "EDGE_SE3:QUAT":
                    v = [float(x) for x in tok[3:10]]
                    upper = [float(x) for x in tok[10:31]]
                    if len(upper) != 21:
                        raise ValueError("expected 21 information entries")
                    info = np.zeros((6, 6))
                    info[np.triu_indices(6)] = upper
                    info = info + np.triu(info, 1).T
                    info = info[np.ix_(inv_perm, inv_perm)]
                    graph.add_edge(PoseGraphEdge(int(tok[1]), int(tok[2]),
                                                 Pose.from_quaternion(v[:3], v[3:]), info))
                elif tok[0] == "FIX":
                    for nid in tok[1:]:
                        graph.nodes[int(nid)].fixed = True
            except (ValueError, IndexError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed g2o line: {exc}") from exc
    return graph
