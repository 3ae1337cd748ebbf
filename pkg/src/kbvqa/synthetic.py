"""Synthetic task generator: desk-scale datasets with planted cross-modal cues.

Each instance shows n entities, paired up by same-relation facts. The
question mentions an attribute; exactly one entity (the cued one) carries
it, the way a dense caption singles out the salient region. The answer is
the cued entity's fact partner ("cued" mode: the entity itself). The
attribute mark appears only in the visual features and/or the semantic
triples, never in the fact layer, so answering requires linking question ->
cued modality node -> fact entity -> partner. Cue rates control whether a
modality carries the mark at all, which gives ablation runs a ground truth
to confirm.

Entities come from a shared vocabulary (attribute and question words from
small pools) so the matching operators can specialize to a stable embedding
geometry instead of memorizing one-off tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import InstanceRecord, save_dataset
from .graphs import EmbeddingTable
from .retrieval import FactTriple

QUESTION_TEMPLATES = {
    "usedfor": ("what", "is", "the", "{attr}", "thing", "used", "for"),
    "isa": ("what", "kind", "of", "thing", "is", "the", "{attr}", "one"),
    "atlocation": ("where", "would", "you", "find", "the", "{attr}", "thing"),
    "capableof": ("what", "can", "the", "{attr}", "thing", "do"),
    "hasproperty": ("what", "property", "does", "the", "{attr}", "thing", "have"),
}

DEFAULT_RELATIONS = tuple(QUESTION_TEMPLATES)


class SyntheticError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    """Everything that determines the generated bytes (together with the seed)."""

    num_instances: int = 2500
    entities_per_graph: int = 8
    relations: tuple[str, ...] = DEFAULT_RELATIONS
    visual_cue_rate: float = 1.0
    semantic_cue_rate: float = 1.0
    num_attributes: int = 30
    # Size of the shared entity vocabulary; 0 makes every instance's entities
    # globally unique, which turns the task into pure pattern matching on
    # unseen embeddings (much harder than any desk-scale budget supports).
    entity_pool: int = 240
    noise_facts: int = 300
    folds: int = 5
    word_dim: int = 16
    # "partner": the answer is the fact partner of the cued entity (the fact
    # hop is load-bearing); "cued": the answer is the cued entity itself.
    answer_mode: str = "partner"
    seed: int = 0

    def __post_init__(self):
        if self.num_instances < 1 or self.entities_per_graph < 1:
            raise SyntheticError("num_instances and entities_per_graph must be >= 1")
        if not self.relations:
            raise SyntheticError("need at least one relation type")
        if self.num_attributes < self.entities_per_graph:
            raise SyntheticError("need at least as many attributes as entities per graph")
        if self.folds < 1 or self.word_dim < 1 or self.noise_facts < 0:
            raise SyntheticError("folds/word_dim/noise_facts out of range")
        if self.entity_pool and self.entity_pool < self.entities_per_graph:
            raise SyntheticError("entity_pool smaller than entities_per_graph")
        if self.answer_mode not in ("partner", "cued"):
            raise SyntheticError(f"unknown answer_mode {self.answer_mode!r}")
        for rate in (self.visual_cue_rate, self.semantic_cue_rate):
            if not 0.0 <= rate <= 1.0:
                raise SyntheticError("cue rates must be in [0, 1]")

    @property
    def visual_dim(self) -> int:
        # Visual feature = [entity-embedding block | attribute-embedding block].
        return 2 * self.word_dim

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["relations"] = list(self.relations)
        return d


def question_for(relation: str, attr: str) -> list[str]:
    template = QUESTION_TEMPLATES.get(relation)
    if template is None:
        # Unknown relation types get a generic template that still mentions
        # the relation token, keeping questions distinguishable.
        return ["which", "fact", "about", relation, "fits", "the", attr, "thing"]
    return [tok.format(attr=attr) for tok in template]


def _pairing(n: int, rng: np.random.Generator) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Random disjoint pairs; odd leftover joins a random earlier entity.

    Returns the pairs plus partner[i] for every entity i.
    """
    order = rng.permutation(n)
    partner = np.full(n, -1, dtype=np.int64)
    pairs = []
    if n == 1:
        return [(0, 0)], np.zeros(1, dtype=np.int64)
    for i in range(0, n - 1, 2):
        a, b = int(order[i]), int(order[i + 1])
        pairs.append((a, b))
        partner[a], partner[b] = b, a
    if n % 2 == 1:
        last = int(order[-1])
        other = int(order[rng.integers(0, n - 1)])
        pairs.append((last, other))
        partner[last] = other  # 'other' keeps its original partner
    return pairs, partner


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> dict:
    """Write a dataset directory; fully determined by (spec, spec.seed)."""
    rng = np.random.default_rng(spec.seed)
    table = EmbeddingTable(spec.word_dim, oov_policy="hash", seed=spec.seed)
    attrs = [f"attr{j:02d}" for j in range(spec.num_attributes)]
    zeros_block = np.zeros(spec.word_dim)

    pool = [f"ent{j:04d}" for j in range(spec.entity_pool)] if spec.entity_pool else None

    records: list[InstanceRecord] = []
    kb: list[FactTriple] = []
    for idx in range(spec.num_instances):
        n = spec.entities_per_graph
        if pool is not None:
            entities = [pool[int(j)] for j in rng.choice(len(pool), size=n, replace=False)]
        else:
            entities = [f"ent{idx:05d}{chr(ord('a') + k)}" for k in range(n)]
        attr = attrs[int(rng.integers(spec.num_attributes))]
        relation = str(rng.choice(spec.relations))
        pairs, partner = _pairing(n, rng)

        facts = []
        for a, b in pairs:
            if rng.random() < 0.5:
                a, b = b, a
            facts.append(FactTriple(entities[a], relation, entities[b]))
        cued = int(rng.integers(n))
        answer_idx = int(partner[cued]) if spec.answer_mode == "partner" else cued
        answer = entities[answer_idx]
        question = question_for(relation, attr)

        visual_cue = rng.random() < spec.visual_cue_rate
        semantic_cue = rng.random() < spec.semantic_cue_rate
        objects = []
        for k in range(n):
            x, y = rng.uniform(0.0, 80.0, 2)
            w, h = rng.uniform(8.0, 40.0, 2)
            # Only the cued object carries the attribute mark (the salient
            # region); everything else looks plain.
            attr_block = table.lookup(attr) if visual_cue and k == cued else zeros_block
            feature = np.concatenate([table.lookup(entities[k]), attr_block])
            objects.append({
                "label": entities[k],
                "bbox": [round(float(v), 2) for v in (x, y, w, h)],
                "feature": [round(float(v), 6) for v in feature],
            })
        triples = [([entities[a]], ["near"], [entities[b]]) for a, b in pairs]
        if semantic_cue:
            triples.append(([entities[cued]], ["is"], [attr]))

        records.append(InstanceRecord(
            id=f"i{idx:05d}", fold=idx % spec.folds, question=question,
            relation=relation, objects=objects, triples=triples,
            fact_source="inline",
            facts=facts, answer=answer))
        kb.extend(facts)

    for j in range(spec.noise_facts):
        relation = str(rng.choice(spec.relations))
        if j % 2 == 0:
            kb.append(FactTriple(f"noise{j:04d}a", relation, f"noise{j:04d}b"))
        else:
            # Harder distractors sharing an attribute word with some questions.
            kb.append(FactTriple(f"noise{j:04d}a", relation,
                                 attrs[int(rng.integers(spec.num_attributes))]))

    manifest = {
        "kind": "kbvqa-dataset",
        "word_dim": spec.word_dim,
        "visual_dim": spec.visual_dim,
        "relation_vocab": sorted(set(spec.relations)),
        "folds": spec.folds,
        "oov_seed": spec.seed,
        "generator": spec.to_dict(),
    }
    save_dataset(out_dir, manifest, records, kb)
    return {
        "out_dir": out_dir,
        "num_instances": len(records),
        "kb_facts": len(kb),
        "relations": manifest["relation_vocab"],
    }
