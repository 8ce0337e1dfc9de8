import itertools
import math

import numpy as np
import pytest

from semloop.features import normalize_embedding
from semloop.geometry import Pose
from semloop.scenegraph import (
    GraphConfig,
    MatchCandidate,
    SceneGraph,
    Vertex,
    build_graph,
    candidate_matches,
    detect_loop,
    graph_to_dict,
    layout_descriptor,
    layout_difference,
    semantic_similarity,
    verify_matches,
)
from tests.test_geometry import random_pose


def make_vertex(vid, pos, label="car", dims=(4, 2, 1.5), hist=None, emb=None, yaw=0.0):
    return Vertex(
        id=vid,
        label=label,
        pose=Pose.from_yaw(yaw, pos),
        dims=np.array(dims, dtype=float),
        hist=np.array([0.6, 0.4] if hist is None else hist),
        emb=normalize_embedding([1.0, 0.0, 0.0] if emb is None else emb),
    )


def random_cluster(rng, n, label_pool=("car", "van", "suv"), spread=20.0, start_id=0):
    verts = []
    for i in range(n):
        emb = normalize_embedding(rng.normal(size=6))
        hist = rng.dirichlet(np.ones(4))
        hist = np.sort(hist)[::-1]
        verts.append(
            make_vertex(
                start_id + i,
                [rng.uniform(-spread, spread), rng.uniform(-spread, spread), 0.75],
                label=label_pool[rng.integers(len(label_pool))],
                dims=rng.uniform(1.0, 5.0, 3),
                hist=hist,
                emb=emb,
                yaw=rng.uniform(-np.pi, np.pi),
            )
        )
    return verts


def transformed_copy(verts, g: Pose, start_id=1000, scale=1.0):
    out = []
    for v in verts:
        pose = g @ Pose(v.pose.r, v.pose.t * scale)
        out.append(Vertex(start_id + v.id, v.label, pose, v.dims, v.hist, v.emb))
    return out


class TestBuildGraph:
    def test_single_vertex(self):
        g = build_graph([make_vertex(0, [0, 0, 0])], k_neighbors=2)
        assert len(g) == 1 and len(g.edges) == 0

    def test_collinear_nearest_neighbors(self):
        verts = [make_vertex(i, [x, 0, 0]) for i, x in enumerate([0.0, 1.0, 3.0])]
        g = build_graph(verts, k_neighbors=1)
        assert set(g.edges) == {frozenset((0, 1)), frozenset((1, 2))}

    def test_edge_length_is_center_distance(self):
        verts = [make_vertex(0, [0, 0, 0], yaw=0.4), make_vertex(1, [3, 4, 0], yaw=-1.0)]
        g = build_graph(verts, k_neighbors=1)
        assert g.edges[frozenset((0, 1))] == pytest.approx(5.0)

    def test_union_degree_can_exceed_k(self):
        # hub-and-spoke: each spoke picks the hub (spoke-spoke gaps exceed the
        # radius); the hub keeps only k edges of its own but inherits the union
        verts = [make_vertex(0, [0, 0, 0])] + [
            make_vertex(i, [10 * math.cos(a), 10 * math.sin(a), 0])
            for i, a in enumerate(np.linspace(0, 2 * np.pi, 6)[:-1], start=1)
        ]
        g = build_graph(verts, k_neighbors=1)
        hub_edges = [e for e in g.edges if 0 in e]
        assert len(hub_edges) == 5


class TestLayoutDescriptor:
    def graph_with_neighbor_dists(self, dists):
        verts = [make_vertex(0, [0, 0, 0])]
        for i, d in enumerate(dists, start=1):
            # place neighbors in distinct directions at requested distances
            verts.append(make_vertex(i, [d * math.cos(i), d * math.sin(i), 0]))
        return build_graph(verts, k_neighbors=len(dists))

    def test_sort_and_normalize(self):
        g = self.graph_with_neighbor_dists([1.0, 2.0, 1.0])
        w = layout_descriptor(g, 0, 3)
        np.testing.assert_allclose(w, [0.25, 0.25, 0.5], atol=1e-12)

    def test_scale_cancels(self):
        g = self.graph_with_neighbor_dists([2.0, 4.0, 2.0])
        w = layout_descriptor(g, 0, 3)
        np.testing.assert_allclose(w, [0.25, 0.25, 0.5], atol=1e-12)

    def test_isolated_vertex_zero(self):
        g = SceneGraph()
        v = make_vertex(5, [0, 0, 0])
        g.vertices[5] = v
        g.knn[5] = []
        np.testing.assert_array_equal(layout_descriptor(g, 5, 3), [0, 0, 0])

    def test_missing_vertex_raises(self):
        g = self.graph_with_neighbor_dists([1.0])
        with pytest.raises(KeyError):
            layout_descriptor(g, 42, 1)


class TestLayoutDifference:
    def test_identical_zero(self):
        w = np.array([0.2, 0.3, 0.5])
        assert layout_difference(w, w) == 0.0

    def test_hand_value(self):
        assert layout_difference([1, 0, 0], [0, 0, 1]) == pytest.approx(math.sqrt(2))

    def test_symmetric_and_triangle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b, c = rng.dirichlet(np.ones(4), size=3)
            assert layout_difference(a, b) == pytest.approx(layout_difference(b, a))
            assert layout_difference(a, c) <= layout_difference(a, b) + layout_difference(b, c) + 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            layout_difference([1, 0], [1, 0, 0])


class TestInvariance:
    def test_descriptors_invariant_under_rigid_and_scale(self):
        rng = np.random.default_rng(7)
        verts = random_cluster(rng, 12)
        g1 = build_graph(verts, 4)
        for seed in range(5):
            g = random_pose(np.random.default_rng(seed))
            scale = float(np.random.default_rng(seed + 50).uniform(0.3, 3.0))
            moved = transformed_copy(verts, g, start_id=0, scale=scale)
            g2 = build_graph(moved, 4)
            for v in verts:
                w1 = layout_descriptor(g1, v.id, 4)
                w2 = layout_descriptor(g2, v.id, 4)
                np.testing.assert_allclose(w1, w2, atol=1e-9)


class TestCandidates:
    def test_rigid_copy_keeps_true_pairs(self):
        rng = np.random.default_rng(1)
        verts = random_cluster(rng, 10)
        g = random_pose(np.random.default_rng(9))
        copy = transformed_copy(verts, g)
        cands = candidate_matches(build_graph(copy, 4), build_graph(verts, 4), GraphConfig())
        found = {(c.local_id, c.global_id) for c in cands}
        for v in verts:
            assert (1000 + v.id, v.id) in found

    def test_zero_threshold_keeps_only_equal(self):
        rng = np.random.default_rng(2)
        verts = random_cluster(rng, 8)
        cfg = GraphConfig(layout_threshold=0.0)
        cands = candidate_matches(build_graph(verts, 4), build_graph(verts, 4), cfg)
        assert cands == []  # strict < 0 keeps nothing, even identical pairs

    def test_layouts_differing_everywhere(self):
        # an equilateral triangle (every descriptor [0.5, 0.5]) vs the line
        # 0-1-3 (descriptors [0.25,0.75], [1/3,2/3], [0.4,0.6]): brute-check
        # every cross pair differs by more than the threshold, so no candidates
        tri = [
            make_vertex(0, [0, 0, 0]),
            make_vertex(1, [1, 0, 0]),
            make_vertex(2, [0.5, math.sqrt(3) / 2, 0]),
        ]
        line = [make_vertex(0, [0, 0, 0]), make_vertex(1, [1, 0, 0]), make_vertex(2, [3, 0, 0])]
        cfg = GraphConfig(k_neighbors=2, layout_threshold=0.1)
        gl, gg = build_graph(tri, 2), build_graph(line, 2)
        for i in gl.vertices:
            for j in gg.vertices:
                d = layout_difference(layout_descriptor(gl, i, 2), layout_descriptor(gg, j, 2))
                assert d >= cfg.layout_threshold
        assert candidate_matches(gl, gg, cfg) == []


class TestSemanticSimilarity:
    def test_label_gate(self):
        a = make_vertex(0, [0, 0, 0], label="car")
        b = make_vertex(1, [0, 0, 0], label="van")
        assert semantic_similarity(a, b, GraphConfig()) == 0.0

    def test_identical_maximum(self):
        a = make_vertex(0, [1, 2, 0])
        b = make_vertex(1, [1, 2, 0])
        for mu in (0.0, 0.5, 1.0):
            assert semantic_similarity(a, b, GraphConfig(geometry_weight=mu)) == pytest.approx(2.0)

    def test_geometry_only_hand_value(self):
        a = make_vertex(0, [0, 0, 0])
        b = make_vertex(1, [1, 0, 0])
        cfg = GraphConfig(geometry_weight=1.0, centroid_relative=False)
        assert semantic_similarity(a, b, cfg) == pytest.approx(1.0 + math.exp(-1.0))

    def test_range(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            a, b = random_cluster(rng, 2, label_pool=("car",))
            s = semantic_similarity(a, b, GraphConfig())
            assert 0.0 < s <= 2.0

    def test_literal_product_form_flag(self):
        a = make_vertex(0, [0, 0, 0])
        b = make_vertex(1, [0, 0, 0])
        literal = semantic_similarity(a, b, GraphConfig(literal_product_form=True))
        # identical one-hot-ish appearance: product form penalizes agreement
        assert literal < semantic_similarity(a, b, GraphConfig())


class TestVerifyMatches:
    def setup_graphs(self):
        rng = np.random.default_rng(4)
        verts = random_cluster(rng, 6)
        copy = transformed_copy(verts, Pose.from_translation([1, 2, 0]))
        return build_graph(copy, 3), build_graph(verts, 3)

    def test_keeps_above_threshold(self):
        gl, gg = self.setup_graphs()
        cands = [MatchCandidate(lid, lid - 1000, 0.0) for lid in gl.vertices]
        out = verify_matches(cands, gl, gg, GraphConfig(semantic_threshold=1.0))
        assert len(out) == len(cands)
        assert all(c.semantic_score >= 1.0 for c in out)

    def test_conflict_keeps_higher_score(self):
        gl, gg = self.setup_graphs()
        lids = sorted(gl.vertices)
        true_pair = MatchCandidate(lids[0], lids[0] - 1000, 0.0)
        # a second local vertex also claims the same global vertex
        rival = MatchCandidate(lids[1], lids[0] - 1000, 0.0)
        out = verify_matches([true_pair, rival], gl, gg, GraphConfig(semantic_threshold=0.1))
        target = [c for c in out if c.global_id == lids[0] - 1000]
        assert len(target) == 1
        assert target[0].local_id == lids[0]  # exact copy outranks the rival

    def test_all_below_threshold_empty(self):
        gl, gg = self.setup_graphs()
        cands = [MatchCandidate(lid, lid - 1000, 0.0) for lid in gl.vertices]
        assert verify_matches(cands, gl, gg, GraphConfig(semantic_threshold=2.5)) == []


class TestDetectLoop:
    def planted(self, n=6, seed=5, labels=("car", "van", "suv", "cart", "bin", "post")):
        rng = np.random.default_rng(seed)
        # distinct labels so the planted correspondence is unambiguous
        verts = []
        for i in range(n):
            verts.append(
                make_vertex(
                    i,
                    [rng.uniform(-15, 15), rng.uniform(-15, 15), 0.75],
                    label=labels[i % len(labels)],
                    dims=rng.uniform(1, 5, 3),
                    hist=np.sort(rng.dirichlet(np.ones(4)))[::-1],
                    emb=normalize_embedding(rng.normal(size=6)),
                )
            )
        return verts

    def test_planted_rigid_copy_recovered(self):
        verts = self.planted()
        local = transformed_copy(verts, Pose.from_yaw(0.3, [4, -2, 0]))
        ms = detect_loop(local, verts, GraphConfig(min_matches=3))
        assert ms is not None
        pairs = {(c.local_id, c.global_id) for c in ms}
        expected = {(1000 + v.id, v.id) for v in verts}
        assert pairs == expected  # exactly the planted correspondence

    def test_brute_force_enumeration_agrees(self):
        # for <= 8 vertices, check the returned one-to-one set is the
        # highest-total-score assignment among verified candidates
        verts = self.planted(n=5)
        local = transformed_copy(verts, Pose.from_yaw(-0.5, [2, 7, 0]))
        cfg = GraphConfig(min_matches=3)
        gl, gg = build_graph(local, cfg.k_neighbors), build_graph(verts, cfg.k_neighbors)
        cands = candidate_matches(gl, gg, cfg)
        ms = detect_loop(local, verts, cfg)
        assert ms is not None
        # enumerate all one-to-one subsets of verified candidates
        verified = verify_matches(cands, gl, gg, GraphConfig(min_matches=0))
        best_total = 0.0
        for r in range(1, len(verified) + 1):
            for combo in itertools.combinations(verified, r):
                locals_ = [c.local_id for c in combo]
                globals_ = [c.global_id for c in combo]
                if len(set(locals_)) == r and len(set(globals_)) == r:
                    best_total = max(best_total, sum(c.semantic_score for c in combo))
        assert sum(c.semantic_score for c in ms) == pytest.approx(best_total, rel=1e-9)

    def test_min_matches_gate(self):
        verts = self.planted(n=1)
        local = transformed_copy(verts, Pose.identity())
        assert detect_loop(local, verts, GraphConfig(min_matches=2)) is None

    def test_absent_labels_give_none(self):
        verts = self.planted()
        local = [
            Vertex(v.id + 1000, "zeppelin", v.pose, v.dims, v.hist, v.emb) for v in verts
        ]
        assert detect_loop(local, verts, GraphConfig()) is None

    def test_insertion_order_irrelevant(self):
        verts = self.planted()
        local = transformed_copy(verts, Pose.from_yaw(0.2, [1, 1, 0]))
        cfg = GraphConfig()
        ms1 = detect_loop(local, verts, cfg)
        ms2 = detect_loop(list(reversed(local)), list(reversed(verts)), cfg)
        assert [(c.local_id, c.global_id) for c in ms1] == [
            (c.local_id, c.global_id) for c in ms2
        ]


class TestExport:
    def test_graph_dict_shape(self):
        rng = np.random.default_rng(6)
        g = build_graph(random_cluster(rng, 5), 2)
        d = graph_to_dict(g)
        assert {v["id"] for v in d["vertices"]} == set(g.vertices)
        for i, j, length in d["edges"]:
            assert g.edges[frozenset((i, j))] == length
