"""Spatio-temporal graphs of the folding scene and the structural cost between them.

A graph holds 3-D keypoints of three kinds (board, cloth, end-effector) and the
weighted edges between them at one time index. Two graphs taken at the same
time index from the demonstration and from the imitation must share their
structure; the dissimilarity compares relative vectors across end-effector to
board edges, gated by a per-edge boolean mask.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "VertexKind",
    "Vertex",
    "Edge",
    "SpatioTemporalGraph",
    "GraphStructureError",
    "EdgePresence",
    "relative_config",
    "graph_dissimilarity",
    "check_same_structure",
    "edge_presence",
    "edge_presence_detail",
    "edge_mask",
    "infer_hidden_vertices",
    "record_priors",
    "align_sequences",
    "EDGE_SAMPLES",
]

# pixels sampled along a projected edge when testing preservation
EDGE_SAMPLES = 32


class GraphStructureError(ValueError):
    """Raised when two graphs that must share structure do not."""


class VertexKind(str, enum.Enum):
    BOARD = "board"
    CLOTH = "cloth"
    EFFECTOR = "effector"


@dataclass(frozen=True)
class Vertex:
    id: int
    kind: VertexKind
    position: tuple[float, float, float]

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(np.isfinite(pos)):
            raise ValueError(f"vertex {self.id}: position must be 3 finite values, got {self.position!r}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "kind", VertexKind(self.kind))


@dataclass(frozen=True)
class Edge:
    i: int
    j: int
    weight: float = 1.0

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError(f"edge endpoints must differ, got ({self.i}, {self.j})")
        w = float(self.weight)
        if not np.isfinite(w) or w < 0:
            raise ValueError(f"edge ({self.i}, {self.j}) weight must be finite and >= 0, got {self.weight}")
        object.__setattr__(self, "weight", w)

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.i, self.j)


@dataclass(frozen=True)
class SpatioTemporalGraph:
    time_index: int
    vertices: tuple[Vertex, ...]
    edges: tuple[Edge, ...] = ()
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(self.vertices))
        object.__setattr__(self, "edges", tuple(self.edges))
        index = {}
        for k, v in enumerate(self.vertices):
            if v.id in index:
                raise ValueError(f"duplicate vertex id {v.id}")
            index[v.id] = k
        for e in self.edges:
            for end in e.endpoints:
                if end not in index:
                    raise ValueError(f"edge ({e.i}, {e.j}) references unknown vertex id {end}")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.vertices)

    def vertex(self, vid: int) -> Vertex:
        try:
            return self.vertices[self._index[vid]]
        except KeyError:
            raise KeyError(f"unknown vertex id {vid}") from None

    def position(self, vid: int) -> np.ndarray:
        return np.asarray(self.vertex(vid).position)

    def positions(self) -> np.ndarray:
        """(n, 3) array of vertex positions in storage order."""
        return np.array([v.position for v in self.vertices], dtype=float).reshape(-1, 3)

    def ids(self) -> list[int]:
        return [v.id for v in self.vertices]

    def kinds(self) -> list[VertexKind]:
        return [v.kind for v in self.vertices]

    def edge_index(self) -> np.ndarray:
        """(m, 2) storage indices of edge endpoints."""
        return np.array([[self._index[e.i], self._index[e.j]] for e in self.edges], dtype=int).reshape(-1, 2)

    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.edges], dtype=float)

    def effector_board_edges(self) -> np.ndarray:
        """Boolean flag per edge: True when it joins an end-effector and a board vertex."""
        flags = []
        for e in self.edges:
            a, b = self.vertex(e.i).kind, self.vertex(e.j).kind
            flags.append({a, b} == {VertexKind.EFFECTOR, VertexKind.BOARD})
        return np.array(flags, dtype=bool)

    def with_positions(self, positions: np.ndarray, time_index: int | None = None) -> "SpatioTemporalGraph":
        """Copy with every vertex moved to the matching row of ``positions``."""
        positions = np.asarray(positions, dtype=float)
        if positions.shape != (len(self.vertices), 3):
            raise ValueError(f"expected positions of shape {(len(self.vertices), 3)}, got {positions.shape}")
        verts = tuple(Vertex(v.id, v.kind, tuple(p)) for v, p in zip(self.vertices, positions))
        t = self.time_index if time_index is None else time_index
        return SpatioTemporalGraph(t, verts, self.edges)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "SpatioTemporalGraph":
        """Apply the rigid map ``x -> R x + t`` to every vertex."""
        pos = self.positions() @ np.asarray(rotation, dtype=float).T + np.asarray(translation, dtype=float)
        return self.with_positions(pos)


def relative_config(g: SpatioTemporalGraph, i: int, j: int) -> np.ndarray:
    """Vector from vertex ``j`` to vertex ``i``."""
    return g.position(i) - g.position(j)


def check_same_structure(gE: SpatioTemporalGraph, gR: SpatioTemporalGraph) -> None:
    if len(gE.vertices) != len(gR.vertices):
        raise GraphStructureError(f"vertex count differs: {len(gE.vertices)} != {len(gR.vertices)}")
    for k, (a, b) in enumerate(zip(gE.vertices, gR.vertices)):
        if a.id != b.id or a.kind != b.kind:
            raise GraphStructureError(
                f"vertex #{k} differs: ({a.id}, {a.kind.value}) != ({b.id}, {b.kind.value})"
            )
    if len(gE.edges) != len(gR.edges):
        raise GraphStructureError(f"edge count differs: {len(gE.edges)} != {len(gR.edges)}")
    for k, (a, b) in enumerate(zip(gE.edges, gR.edges)):
        if a.endpoints != b.endpoints:
            raise GraphStructureError(f"edge #{k} differs: {a.endpoints} != {b.endpoints}")


def graph_dissimilarity(
    gE: SpatioTemporalGraph,
    gR: SpatioTemporalGraph,
    mask: Sequence[bool] | np.ndarray | None = None,
) -> float:
    """Weighted, masked sum of relative-configuration mismatches.

    Only edges joining an end-effector vertex with a board vertex contribute.
    Edge weights are read from ``gE``. Each term is the Euclidean norm of
    ``(vE_i - vE_j) - (vR_i - vR_j)`` where ``i`` is the end-effector end.
    ``mask`` defaults to all edges preserved.
    """
    check_same_structure(gE, gR)
    m = len(gE.edges)
    if mask is None:
        mask = np.ones(m, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (m,):
        raise ValueError(f"mask length {mask.shape} does not match edge count {m}")
    if m == 0:
        return 0.0
    idx = gE.edge_index()
    active = mask & gE.effector_board_edges()
    if not active.any():
        return 0.0
    # orient every edge as effector minus board
    kinds = gE.kinds()
    flip = np.array([kinds[a] != VertexKind.EFFECTOR for a, _ in idx])
    sign = np.where(flip, -1.0, 1.0)[:, None]
    pE, pR = gE.positions(), gR.positions()
    relE = (pE[idx[:, 0]] - pE[idx[:, 1]]) * sign
    relR = (pR[idx[:, 0]] - pR[idx[:, 1]]) * sign
    norms = np.linalg.norm(relE - relR, axis=1)
    return float(np.sum(gE.weights()[active] * norms[active]))


@dataclass(frozen=True)
class EdgePresence:
    present: bool
    fraction: float
    degenerate: bool


def _edge_pixels(p0: np.ndarray, p1: np.ndarray, projector, n: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n)
    uv_end = np.asarray(projector(np.stack([p0, p1])), dtype=float)
    if np.all(np.isfinite(uv_end)):
        return uv_end[0] + s[:, None] * (uv_end[1] - uv_end[0])
    pts = p0 + s[:, None] * (p1 - p0)
    return np.asarray(projector(pts), dtype=float)


def edge_presence_detail(
    p_i: np.ndarray,
    p_j: np.ndarray,
    saliency: np.ndarray,
    projector: Callable[[np.ndarray], np.ndarray],
    epsilon: float = 0.5,
    tau_f: float = 0.3,
    samples: int = EDGE_SAMPLES,
) -> EdgePresence:
    """Test whether a 3-D edge lies on salient pixels.

    ``projector`` maps an ``(n, 3)`` array of world points to ``(n, 2)``
    pixel coordinates ``(col, row)``; points it cannot project are NaN.
    """
    if not 0.0 < tau_f <= 1.0:
        raise ValueError(f"tau_f must lie in (0, 1], got {tau_f}")
    saliency = np.asarray(saliency, dtype=float)
    h, w = saliency.shape
    uv = _edge_pixels(np.asarray(p_i, float), np.asarray(p_j, float), projector, samples)
    ok = np.all(np.isfinite(uv), axis=1)
    cols = np.rint(uv[ok, 0]).astype(int)
    rows = np.rint(uv[ok, 1]).astype(int)
    inside = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    if not inside.any():
        return EdgePresence(False, 0.0, True)
    vals = saliency[rows[inside], cols[inside]]
    frac = float(np.mean(vals >= epsilon))
    return EdgePresence(frac >= tau_f, frac, False)


def edge_presence(p_i, p_j, saliency, projector, epsilon: float = 0.5, tau_f: float = 0.3) -> bool:
    return edge_presence_detail(p_i, p_j, saliency, projector, epsilon, tau_f).present


def edge_mask(
    g: SpatioTemporalGraph,
    saliency: np.ndarray,
    projector: Callable[[np.ndarray], np.ndarray],
    epsilon: float = 0.5,
    tau_f: float = 0.3,
) -> np.ndarray:
    """Preservation flag for every edge of ``g`` under one saliency score map."""
    pos = g.positions()
    return np.array(
        [edge_presence(pos[a], pos[b], saliency, projector, epsilon, tau_f) for a, b in g.edge_index()],
        dtype=bool,
    )


def _anchor_frame(anchors: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Homogeneous 4x4 frame at ``anchors[0]`` with z along ``normal``.

    With two or more anchors the x axis points towards ``anchors[1]``;
    a single anchor takes the world x axis projected onto the plane.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if anchors.shape[0] < 1:
        raise ValueError("at least one anchor vertex is needed to fix a frame")
    n = np.asarray(normal, dtype=float)
    nn = np.linalg.norm(n)
    if not np.isfinite(nn) or nn < 1e-12:
        raise ValueError("surface normal must be a nonzero finite vector")
    z = n / nn
    if anchors.shape[0] >= 2:
        x = anchors[1] - anchors[0]
        x = x - np.dot(x, z) * z
        if np.linalg.norm(x) < 1e-9:
            raise ValueError("anchors do not fix a frame: direction between them is parallel to the normal")
    else:
        x = np.array([1.0, 0.0, 0.0]) - z[0] * z
        if np.linalg.norm(x) < 1e-9:
            x = np.array([0.0, 1.0, 0.0]) - z[1] * z
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = x, y, z, anchors[0]
    return T


def record_priors(anchors: np.ndarray, surface_normal: np.ndarray, hidden_positions: np.ndarray) -> list[np.ndarray]:
    """Rigid transforms locating each hidden point in the anchor frame (static scene)."""
    T = _anchor_frame(anchors, surface_normal)
    Tinv = np.linalg.inv(T)
    priors = []
    for p in np.atleast_2d(np.asarray(hidden_positions, dtype=float)):
        P = np.eye(4)
        P[:3, 3] = Tinv[:3, :3] @ p + Tinv[:3, 3]
        priors.append(P)
    return priors


def infer_hidden_vertices(
    anchor_vertices: Sequence[Vertex],
    priors: Sequence[np.ndarray],
    surface_normal: np.ndarray,
    ids: Sequence[int] | None = None,
    kind: VertexKind = VertexKind.BOARD,
) -> list[Vertex]:
    """Place occluded vertices by applying fixed priors to the current anchor frame."""
    if len(anchor_vertices) < 1:
        raise ValueError("at least one anchor vertex is needed to fix a frame")
    anchors = np.array([v.position for v in anchor_vertices], dtype=float)
    T = _anchor_frame(anchors, surface_normal)
    if ids is None:
        start = max(v.id for v in anchor_vertices) + 1
        ids = range(start, start + len(priors))
    out = []
    for vid, P in zip(ids, priors):
        P = np.asarray(P, dtype=float)
        if P.shape != (4, 4):
            raise ValueError(f"prior must be a 4x4 homogeneous transform, got shape {P.shape}")
        out.append(Vertex(vid, kind, tuple((T @ P)[:3, 3])))
    return out


def align_sequences(
    demo: Sequence[SpatioTemporalGraph], imit: Sequence[SpatioTemporalGraph]
) -> list[tuple[SpatioTemporalGraph, SpatioTemporalGraph]]:
    """Pair each demonstration graph with the nearest-in-time imitation graph.

    The imitation sequence is resampled to the demonstration length; the
    selected imitation graph is relabelled with the demonstration time index.
    """
    if not demo or not imit:
        raise ValueError("both graph sequences must be nonempty")
    n, m = len(demo), len(imit)
    pairs = []
    for k, g in enumerate(demo):
        j = min(m - 1, int(np.floor(k * m / n + 0.5)))
        r = imit[j]
        if r.time_index != g.time_index:
            r = SpatioTemporalGraph(g.time_index, r.vertices, r.edges)
        pairs.append((g, r))
    return pairs
