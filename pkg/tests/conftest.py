"""Shared fixtures: random desk-scale instances and small model configs."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kbvqa import autodiff as ad
from kbvqa.graphs import (BoundingBox, EmbeddingTable, MultiModalGraph, Question,
                          VisualNode, build_fact_graph, build_semantic_graph,
                          build_visual_graph)
from kbvqa.model import ModelConfig, init_params
from kbvqa.retrieval import FactTriple


@pytest.fixture(autouse=True)
def finite_checks():
    ad.set_finite_checks(True)
    yield
    ad.set_finite_checks(False)


def small_config(**overrides) -> ModelConfig:
    base = dict(reasoning_steps=2, hidden_dim=8, question_dim=8, word_dim=4,
                visual_dim=6, dropout=0.0, init_gain=1.0)
    base.update(overrides)
    return ModelConfig(**base)


def random_instance(rng: np.random.Generator, config: ModelConfig,
                    n_visual: int = 4, n_semantic_triples: int = 3,
                    n_facts: int = 3, n_question: int = 5,
                    table: EmbeddingTable | None = None) -> MultiModalGraph:
    """A structurally varied random instance matching ``config`` dims."""
    table = table or EmbeddingTable(config.word_dim, oov_policy="hash",
                                    seed=int(rng.integers(1 << 30)))
    visual_nodes = [
        VisualNode(rng.standard_normal(config.visual_dim),
                   BoundingBox(*rng.uniform(1.0, 9.0, 4)), f"obj{i}")
        for i in range(n_visual)
    ]
    visual = (build_visual_graph(visual_nodes) if visual_nodes
              else build_visual_graph([], allow_empty=True))

    words = [f"w{int(v)}" for v in rng.integers(0, 50, 40)]
    triples = []
    for _ in range(n_semantic_triples):
        s, r, o = rng.choice(words, 3)
        triples.append(([str(s)], [str(r)], [str(o)]))
    semantic = build_semantic_graph(triples, table)

    entities = [f"ent{int(v)}" for v in rng.choice(100, size=max(2, n_facts + 1),
                                                   replace=False)]
    facts = []
    for _ in range(n_facts):
        e1, e2 = rng.choice(entities, 2, replace=False)
        facts.append(FactTriple(str(e1), f"rel{int(rng.integers(5))}", str(e2)))
    answer = facts[int(rng.integers(len(facts)))].e2
    fact_layer, answer_index = build_fact_graph(facts, table, answer)

    tokens = [str(rng.choice(words)) for _ in range(n_question)]
    question = Question(tokens, np.stack([table.lookup(t) for t in tokens]))
    return MultiModalGraph(visual, semantic, fact_layer, question, answer_index,
                           instance_id="rnd")


def make_model(config: ModelConfig, seed: int = 0):
    return init_params(config, seed)
