"""Graph construction: spatial features, builders, invariances."""

import numpy as np
import pytest

from kbvqa.graphs import (BoundingBox, EmbeddingTable, GraphError, VisualNode,
                          build_fact_graph, build_semantic_graph, build_visual_graph,
                          embed_phrase, spatial_edge_feature)
from kbvqa.retrieval import FactTriple


def box(x, y, w, h):
    return BoundingBox(x, y, w, h)


class TestSpatialEdgeFeature:
    def test_self_relation(self):
        b = box(3.0, 4.0, 5.0, 6.0)
        np.testing.assert_allclose(spatial_edge_feature(b, b), [0, 0, 1, 1, 1])

    def test_hand_case(self):
        # (x_j-x_i)/w_i=2/4, (y_j-y_i)/h_i=1/2, w_j/w_i=2/4, h_j/h_i=2/2, area 4/8
        out = spatial_edge_feature(box(2, 2, 4, 2), box(4, 3, 2, 2))
        np.testing.assert_allclose(out, [0.5, 0.5, 0.5, 1.0, 0.5])

    def test_not_antisymmetric(self):
        b_i, b_j = box(0, 0, 1, 1), box(1, 0, 2, 2)
        np.testing.assert_allclose(spatial_edge_feature(b_i, b_j), [1, 0, 2, 2, 4])
        np.testing.assert_allclose(spatial_edge_feature(b_j, b_i),
                                   [-0.5, 0, 0.5, 0.5, 0.25])

    @pytest.mark.parametrize("seed", range(8))
    def test_translation_and_scale_invariance(self, seed):
        rng = np.random.default_rng(seed)
        b_i = box(*rng.uniform(1, 10, 2), *rng.uniform(0.5, 5, 2))
        b_j = box(*rng.uniform(1, 10, 2), *rng.uniform(0.5, 5, 2))
        base = spatial_edge_feature(b_i, b_j)
        dx, dy = rng.uniform(-20, 20, 2)
        shifted = spatial_edge_feature(box(b_i.x + dx, b_i.y + dy, b_i.w, b_i.h),
                                       box(b_j.x + dx, b_j.y + dy, b_j.w, b_j.h))
        np.testing.assert_allclose(shifted, base, atol=1e-12)
        s = float(rng.uniform(0.1, 7.0))
        scaled = spatial_edge_feature(
            box(b_i.x * s, b_i.y * s, b_i.w * s, b_i.h * s),
            box(b_j.x * s, b_j.y * s, b_j.w * s, b_j.h * s))
        np.testing.assert_allclose(scaled, base, rtol=1e-12)

    def test_degenerate_box_rejected(self):
        with pytest.raises(GraphError, match="positive"):
            box(0, 0, 0.0, 1.0)


class TestVisualGraph:
    def node(self, rng, label="o"):
        return VisualNode(rng.standard_normal(6), box(*rng.uniform(1, 5, 4)), label)

    def test_single_object(self):
        rng = np.random.default_rng(0)
        g = build_visual_graph([self.node(rng)])
        assert g.num_nodes == 1 and g.num_edges == 0

    def test_three_objects_six_directed_edges(self):
        rng = np.random.default_rng(0)
        g = build_visual_graph([self.node(rng, f"o{i}") for i in range(3)])
        assert g.num_edges == 6
        assert len({(s, d) for s, d in zip(g.edge_src, g.edge_dst)}) == 6

    def test_36_objects_1260_edges(self):
        rng = np.random.default_rng(1)
        g = build_visual_graph([self.node(rng, f"o{i}") for i in range(36)])
        assert g.num_nodes == 36 and g.num_edges == 36 * 35

    def test_cap_at_max_objects(self):
        rng = np.random.default_rng(1)
        g = build_visual_graph([self.node(rng, f"o{i}") for i in range(40)])
        assert g.num_nodes == 36

    def test_node_order_stable(self):
        rng = np.random.default_rng(2)
        nodes = [self.node(rng, f"o{i}") for i in range(5)]
        g = build_visual_graph(nodes)
        assert g.node_names == [n.label for n in nodes]
        np.testing.assert_array_equal(g.node_feats[3], nodes[3].feature)

    def test_edge_feature_matches_direct_computation(self):
        rng = np.random.default_rng(3)
        nodes = [self.node(rng, f"o{i}") for i in range(4)]
        g = build_visual_graph(nodes)
        for s, d, feat in zip(g.edge_src, g.edge_dst, g.edge_feats):
            np.testing.assert_allclose(
                feat, spatial_edge_feature(nodes[d].bbox, nodes[s].bbox))

    def test_empty_rejected_unless_ablation(self):
        with pytest.raises(GraphError, match="ablation"):
            build_visual_graph([])
        assert build_visual_graph([], allow_empty=True).num_nodes == 0


class TestEmbedPhrase:
    def test_single_token_is_its_vector(self):
        table = EmbeddingTable(3, vectors={"cat": np.array([1.0, 2.0, 3.0])})
        np.testing.assert_array_equal(embed_phrase(["cat"], table), [1, 2, 3])

    def test_mean_of_two(self):
        table = EmbeddingTable(2, vectors={"a": np.array([1.0, 0.0]),
                                           "b": np.array([0.0, 1.0])})
        np.testing.assert_allclose(embed_phrase(["a", "b"], table), [0.5, 0.5])

    def test_empty_phrase_rejected(self):
        with pytest.raises(GraphError, match="empty"):
            embed_phrase([], EmbeddingTable(2))

    def test_hash_oov_deterministic_unit_norm(self):
        t1 = EmbeddingTable(8, oov_policy="hash", seed=3)
        t2 = EmbeddingTable(8, oov_policy="hash", seed=3)
        v1, v2 = t1.lookup("zebra"), t2.lookup("zebra")
        np.testing.assert_array_equal(v1, v2)
        assert np.linalg.norm(v1) == pytest.approx(1.0)
        assert not np.allclose(v1, EmbeddingTable(8, oov_policy="hash", seed=4).lookup("zebra"))

    def test_error_policy(self):
        with pytest.raises(GraphError, match="not in embedding table"):
            EmbeddingTable(4, oov_policy="error").lookup("missing")


class TestSemanticGraph:
    def table(self):
        return EmbeddingTable(4, oov_policy="hash", seed=0)

    def test_empty_triples_give_empty_layer(self):
        g = build_semantic_graph([], self.table())
        assert g.num_nodes == 0 and g.num_edges == 0

    def test_single_triple_two_nodes_one_relation(self):
        g = build_semantic_graph([(["hydrant"], ["is"], ["red"])], self.table())
        assert g.num_nodes == 2
        # one relation edge, stored as two directed arcs with equal features
        assert g.num_edges == 2
        assert {(int(s), int(d)) for s, d in zip(g.edge_src, g.edge_dst)} == {(0, 1), (1, 0)}
        np.testing.assert_array_equal(g.edge_feats[0], g.edge_feats[1])

    def test_shared_subject_deduped(self):
        g = build_semantic_graph([(["man"], ["wears"], ["hat"]),
                                  (["man"], ["holds"], ["cup"])], self.table())
        assert g.num_nodes == 3
        assert g.node_names[0] == "man"

    def test_duplicate_triples_collapse(self):
        t = (["a"], ["is"], ["b"])
        g = build_semantic_graph([t, t], self.table())
        assert g.num_edges == 2  # one logical edge

    def test_phrase_feature_is_mean(self):
        table = self.table()
        g = build_semantic_graph([(["big", "dog"], ["is"], ["loud"])], table)
        np.testing.assert_allclose(g.node_feats[0], embed_phrase(["big", "dog"], table))


class TestFactGraph:
    def table(self):
        return EmbeddingTable(4, oov_policy="hash", seed=1)

    def test_single_fact(self):
        layer, idx = build_fact_graph([FactTriple("a", "r", "b")], self.table(), "b")
        assert layer.num_nodes == 2 and layer.num_edges == 2
        assert idx == 1

    def test_entity_merge(self):
        facts = [FactTriple("a", "r", "b"), FactTriple("a", "s", "c")]
        layer, _ = build_fact_graph(facts, self.table())
        assert layer.num_nodes == 3
        assert layer.node_names == ["a", "b", "c"]

    def test_parallel_edges_preserved(self):
        facts = [FactTriple("a", "r", "b"), FactTriple("a", "s", "b")]
        layer, _ = build_fact_graph(facts, self.table())
        assert layer.num_nodes == 2 and layer.num_edges == 4

    def test_empty_candidates_rejected(self):
        with pytest.raises(GraphError, match="no candidate facts"):
            build_fact_graph([], self.table())

    def test_missing_answer_returns_none(self):
        _, idx = build_fact_graph([FactTriple("a", "r", "b")], self.table(), "zzz")
        assert idx is None

    @pytest.mark.parametrize("seed", range(6))
    def test_node_count_independent_of_triple_order(self, seed):
        rng = np.random.default_rng(seed)
        entities = [f"e{i}" for i in range(6)]
        facts = [FactTriple(str(rng.choice(entities)), "r", str(rng.choice(entities[:4])))
                 for _ in range(8)]
        base, _ = build_fact_graph(facts, self.table())
        perm = [facts[i] for i in rng.permutation(len(facts))]
        shuffled, _ = build_fact_graph(perm, self.table())
        assert base.num_nodes == shuffled.num_nodes
        assert sorted(base.node_names) == sorted(shuffled.node_names)
