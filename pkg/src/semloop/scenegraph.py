"""Semantic topology graphs over map objects and two-stage loop matching.

Vertices are objects with semantic properties; edges connect K nearest
neighbors weighted by center distance. Candidate correspondences come from
sorted-normalized neighbor-distance descriptors (rigid- and scale-invariant),
then get verified by semantic property consistency.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, translation_distance


@dataclass(frozen=True)
class Vertex:
    id: int
    label: str
    pose: Pose  # T_wo; position is the cuboid center
    dims: np.ndarray
    hist: np.ndarray
    emb: np.ndarray

    @property
    def position(self) -> np.ndarray:
        return self.pose.t


@dataclass
class SceneGraph:
    vertices: dict = field(default_factory=dict)  # id -> Vertex
    edges: dict = field(default_factory=dict)  # frozenset({i, j}) -> length
    knn: dict = field(default_factory=dict)  # id -> [(dist, other id)] ascending

    def __len__(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class GraphConfig:
    k_neighbors: int = 4
    layout_threshold: float = 0.15  # max descriptor difference for a candidate
    geometry_weight: float = 0.5    # balance of geometry vs appearance terms
    semantic_threshold: float = 1.2
    min_matches: int = 3
    local_window: int = 15          # keyframes defining the "recent" map slice
    centroid_relative: bool = True  # compare positions relative to graph centroids
    literal_product_form: bool = False  # exp(-|h*h'|) instead of exp(-|h-h'|)

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not 0.0 <= self.geometry_weight <= 1.0:
            raise ValueError("geometry_weight must lie in [0, 1]")


@dataclass(frozen=True)
class MatchCandidate:
    local_id: int
    global_id: int
    layout_diff: float
    semantic_score: float = 0.0


def vertex_from_landmark(lm) -> Vertex:
    """Graph vertex for a map landmark (history-averaged appearance)."""
    return Vertex(
        id=lm.id,
        label=lm.label,
        pose=lm.pose,
        dims=np.asarray(lm.dims, dtype=float),
        hist=lm.mean_hist(),
        emb=lm.mean_emb(),
    )


def build_graph(landmarks, k_neighbors: int) -> SceneGraph:
    """K-nearest-neighbor graph over object centers.

    ``landmarks`` may be Landmark objects or Vertex instances. Edges are the
    union over both directions, so a vertex's degree may exceed K; the
    per-vertex K-NN lists are kept for layout descriptors.
    """
    verts = [lm if isinstance(lm, Vertex) else vertex_from_landmark(lm) for lm in landmarks]
    if not verts:
        raise ValueError("graph needs at least one landmark")
    g = SceneGraph()
    for v in verts:
        g.vertices[v.id] = v
    ids = sorted(g.vertices)
    for vid in ids:
        v = g.vertices[vid]
        dists = sorted(
            (translation_distance(v.pose, g.vertices[o].pose), o) for o in ids if o != vid
        )
        nearest = dists[:k_neighbors]
        g.knn[vid] = nearest
        for d, o in nearest:
            g.edges[frozenset((vid, o))] = d
    return g


def layout_descriptor(g: SceneGraph, vid: int, k_neighbors: int) -> np.ndarray:
    """Sorted, sum-normalized K-NN distance vector of a vertex.

    Zero-padded when the vertex has fewer than K neighbors; an isolated
    vertex yields the all-zero vector (left unnormalized).
    """
    if vid not in g.vertices:
        raise KeyError(f"vertex {vid} not in graph")
    dists = [d for d, _ in g.knn.get(vid, [])][:k_neighbors]
    w = np.zeros(k_neighbors)
    w[: len(dists)] = dists
    w.sort()
    total = w.sum()
    if total > 0:
        w /= total
    return w


def layout_difference(a: np.ndarray, b: np.ndarray) -> float:
    """L2 difference of two layout descriptors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"descriptor lengths differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def candidate_matches(g_local: SceneGraph, g_global: SceneGraph, cfg: GraphConfig):
    """All cross-graph pairs whose layout descriptors differ by < threshold.

    Pairs of isolated vertices are excluded: their all-zero descriptors are
    uninformative.
    """
    if not g_local.vertices or not g_global.vertices:
        raise ValueError("both graphs must be non-empty")
    k = cfg.k_neighbors
    local_desc = {i: layout_descriptor(g_local, i, k) for i in sorted(g_local.vertices)}
    global_desc = {j: layout_descriptor(g_global, j, k) for j in sorted(g_global.vertices)}
    out = []
    for i, wi in local_desc.items():
        for j, wj in global_desc.items():
            if not wi.any() and not wj.any():
                continue
            d = layout_difference(wi, wj)
            if d < cfg.layout_threshold:
                out.append(MatchCandidate(i, j, d))
    return out


def semantic_similarity(v: Vertex, g: Vertex, cfg: GraphConfig,
                        local_offset=None, global_offset=None) -> float:
    """Label-gated consistency of dimensions, position, color, and embedding.

    score = mu * (exp(-|dims diff|) + exp(-|pos diff|))
          + (1-mu) * (exp(-|hist diff|) + exp(-|emb diff|))

    Positions are compared after subtracting the per-graph offsets (the
    vertex centroids) when configured, which keeps the term meaningful
    across drifted maps. ``literal_product_form`` switches the appearance
    terms to exp(-|h*h'|) / exp(-|e*e'|) for comparison.
    """
    if v.label != g.label:
        return 0.0
    pv = v.position - (local_offset if local_offset is not None else 0.0)
    pg = g.position - (global_offset if global_offset is not None else 0.0)
    d_s = np.exp(-np.linalg.norm(v.dims - g.dims))
    d_p = np.exp(-np.linalg.norm(pv - pg))
    if cfg.literal_product_form:
        d_c = np.exp(-np.linalg.norm(v.hist * g.hist))
        d_e = np.exp(-np.linalg.norm(v.emb * g.emb))
    else:
        d_c = np.exp(-np.linalg.norm(v.hist - g.hist))
        d_e = np.exp(-np.linalg.norm(v.emb - g.emb))
    mu = cfg.geometry_weight
    return float(mu * (d_s + d_p) + (1.0 - mu) * (d_c + d_e))


def verify_matches(candidates, g_local: SceneGraph, g_global: SceneGraph, cfg: GraphConfig):
    """Score candidates, gate at the semantic threshold, enforce one-to-one.

    Conflicts keep the highest semantic score; ties break on lower layout
    difference, then on the lower (local id, global id) pair.
    """
    local_centroid = _centroid(g_local) if cfg.centroid_relative else None
    global_centroid = _centroid(g_global) if cfg.centroid_relative else None
    scored = []
    for c in candidates:
        s = semantic_similarity(
            g_local.vertices[c.local_id],
            g_global.vertices[c.global_id],
            cfg,
            local_offset=local_centroid,
            global_offset=global_centroid,
        )
        if s >= cfg.semantic_threshold:
            scored.append(MatchCandidate(c.local_id, c.global_id, c.layout_diff, s))
    scored.sort(key=lambda c: (-c.semantic_score, c.layout_diff, c.local_id, c.global_id))
    used_local, used_global, out = set(), set(), []
    for c in scored:
        if c.local_id in used_local or c.global_id in used_global:
            continue
        used_local.add(c.local_id)
        used_global.add(c.global_id)
        out.append(c)
    out.sort(key=lambda c: (c.local_id, c.global_id))
    return out


def _centroid(g: SceneGraph) -> np.ndarray:
    return np.mean([v.position for v in g.vertices.values()], axis=0)


def detect_loop(local_landmarks, global_landmarks, cfg: GraphConfig):
    """Two-stage graph matching between a recent map slice and the old map.

    Returns the verified MatchSet when it reaches ``min_matches``, else None.
    """
    if not local_landmarks or not global_landmarks:
        return None
    g_local = build_graph(local_landmarks, cfg.k_neighbors)
    g_global = build_graph(global_landmarks, cfg.k_neighbors)
    cands = candidate_matches(g_local, g_global, cfg)
    matches = verify_matches(cands, g_local, g_global, cfg)
    if len(matches) >= cfg.min_matches:
        return matches
    return None


def graph_to_dict(g: SceneGraph) -> dict:
    """JSON-ready vertices and weighted edge list."""
    return {
        "vertices": [
            {
                "id": v.id,
                "label": v.label,
                "position": v.position.tolist(),
                "dims": v.dims.tolist(),
            }
            for v in sorted(g.vertices.values(), key=lambda v: v.id)
        ],
        "edges": [
            [min(pair), max(pair), length]
            for pair, length in sorted(g.edges.items(), key=lambda kv: (min(kv[0]), max(kv[0])))
        ],
    }


def write_graph(path, g: SceneGraph) -> None:
    with open(path, "w") as fh:
        json.dump(graph_to_dict(g), fh, indent=2)
