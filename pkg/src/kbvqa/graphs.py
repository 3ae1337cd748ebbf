"""Three-layer heterogeneous graph construction from pre-extracted inputs.

An image/question instance is represented by a visual layer (detected
objects, fully connected with 5-d relative-geometry edges), a semantic layer
(phrases parsed from dense captions, word-embedding features) and a fact
layer (entities of the retrieved candidate facts, relation-embedding edges).
Graphs are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

MAX_QUESTION_TOKENS = 20
DEFAULT_MAX_OBJECTS = 36

VISUAL, SEMANTIC, FACT = "visual", "semantic", "fact"


class GraphError(ValueError):
    """Invalid input to a graph constructor."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner plus width/height in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise GraphError(f"bounding box needs positive size, got w={self.w}, h={self.h}")


@dataclass
class VisualNode:
    feature: np.ndarray
    bbox: BoundingBox
    label: str


@dataclass
class FactNode:
    entity: str
    embedding: np.ndarray
    is_answer: bool = False


@dataclass
class Question:
    """Tokenized question plus the static per-token embeddings fed to the encoder."""

    tokens: list[str]
    token_embeddings: np.ndarray  # (len(tokens), d_w)

    def __post_init__(self):
        if len(self.tokens) > MAX_QUESTION_TOKENS:
            raise GraphError(
                f"question has {len(self.tokens)} tokens, max is {MAX_QUESTION_TOKENS}")
        if self.token_embeddings.shape[0] != len(self.tokens):
            raise GraphError("token embedding count does not match token count")


@dataclass
class LayerGraph:
    """One layer of the heterogeneous graph, stored as directed arcs.

    Undirected relations (semantic and fact layers) appear as two arcs with
    the same feature; visual arcs are genuinely directed because the spatial
    feature is asymmetric.
    """

    tag: str
    node_feats: np.ndarray       # (N, d)
    edge_src: np.ndarray         # (E,) int
    edge_dst: np.ndarray         # (E,) int
    edge_feats: np.ndarray       # (E, d_e)
    node_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = self.node_feats.shape[0]
        if self.edge_src.shape != self.edge_dst.shape:
            raise GraphError(f"{self.tag}: edge index arrays differ in length")
        if self.edge_feats.shape[0] != self.edge_src.shape[0]:
            raise GraphError(f"{self.tag}: edge feature count does not match edge count")
        if self.edge_src.size and (self.edge_src.min() < 0 or self.edge_src.max() >= n
                                   or self.edge_dst.min() < 0 or self.edge_dst.max() >= n):
            raise GraphError(f"{self.tag}: edge endpoint out of range")
        if self.node_names and len(self.node_names) != n:
            raise GraphError(f"{self.tag}: node name count does not match node count")

    @property
    def num_nodes(self) -> int:
        return self.node_feats.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_src.shape[0]

    @property
    def node_dim(self) -> int:
        return self.node_feats.shape[1]

    @property
    def edge_dim(self) -> int:
        return self.edge_feats.shape[1]


def empty_layer(tag: str, node_dim: int, edge_dim: int) -> LayerGraph:
    return LayerGraph(tag, np.zeros((0, node_dim)), np.zeros(0, dtype=np.int64),
                      np.zeros(0, dtype=np.int64), np.zeros((0, edge_dim)), [])


@dataclass
class MultiModalGraph:
    """All three layers plus the question for one instance.

    ``answer_index`` points at the ground-truth fact entity when known. The
    fact layer must be nonempty (an answer has to be selectable); visual and
    semantic layers may be empty in ablation modes only.
    """

    visual: LayerGraph
    semantic: LayerGraph
    fact: LayerGraph
    question: Question
    answer_index: int | None = None
    instance_id: str = ""

    def __post_init__(self):
        if self.fact.num_nodes == 0:
            raise GraphError("fact layer is empty; no answer is selectable")
        if self.answer_index is not None and not 0 <= self.answer_index < self.fact.num_nodes:
            raise GraphError(f"answer index {self.answer_index} out of range")

    @property
    def fact_nodes(self) -> list[FactNode]:
        return [FactNode(name, self.fact.node_feats[i].copy(), i == self.answer_index)
                for i, name in enumerate(self.fact.node_names)]


class EmbeddingTable:
    """token -> d_w vector map with a configurable out-of-vocabulary policy.

    Policies: "hash" derives a deterministic unit-norm pseudo-embedding from
    a seeded digest of the token (desk-scale stand-in for a real embedding
    file), "zero" returns zeros, "error" raises.
    """

    def __init__(self, dim: int, vectors: dict[str, np.ndarray] | None = None,
                 oov_policy: str = "hash", seed: int = 0):
        if oov_policy not in ("hash", "zero", "error"):
            raise GraphError(f"unknown OOV policy {oov_policy!r}")
        self.dim = dim
        self.oov_policy = oov_policy
        self.seed = seed
        self._vectors: dict[str, np.ndarray] = {}
        for token, vec in (vectors or {}).items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise GraphError(f"embedding for {token!r} has shape {vec.shape}, want ({dim},)")
            self._vectors[token] = vec

    def __contains__(self, token: str) -> bool:
        return token in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def _hash_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    def lookup(self, token: str) -> np.ndarray:
        vec = self._vectors.get(token)
        if vec is not None:
            return vec
        if self.oov_policy == "hash":
            vec = self._hash_vector(token)
            self._vectors[token] = vec
            return vec
        if self.oov_policy == "zero":
            return np.zeros(self.dim)
        raise GraphError(f"token {token!r} not in embedding table")


def embed_phrase(tokens: list[str], table: EmbeddingTable) -> np.ndarray:
    """Arithmetic mean of the per-token embeddings."""
    if not tokens:
        raise GraphError("cannot embed an empty phrase")
    return np.mean([table.lookup(t) for t in tokens], axis=0)


def spatial_edge_feature(b_i: BoundingBox, b_j: BoundingBox) -> np.ndarray:
    """Relative geometry of box j with respect to box i.

    Returns [(x_j-x_i)/w_i, (y_j-y_i)/h_i, w_j/w_i, h_j/h_i, area_j/area_i].
    Invariant under translating both boxes together and under uniform scaling.
    """
    return np.array([
        (b_j.x - b_i.x) / b_i.w,
        (b_j.y - b_i.y) / b_i.h,
        b_j.w / b_i.w,
        b_j.h / b_i.h,
        (b_j.w * b_j.h) / (b_i.w * b_i.h),
    ])


def build_visual_graph(objects: list[VisualNode], max_objects: int = DEFAULT_MAX_OBJECTS,
                       allow_empty: bool = False) -> LayerGraph:
    """Directed complete graph (no self loops) over detected objects.

    Node order equals input order. Only the first ``max_objects`` objects are
    kept, mirroring a detector that returns its top-K boxes.
    """
    if not objects:
        if allow_empty:
            return empty_layer(VISUAL, 0, 5)
        raise GraphError("no visual objects given (empty layer is ablation-only)")
    objects = objects[:max_objects]
    dims = {o.feature.shape for o in objects}
    if len(dims) != 1 or len(dims.pop()) != 1:
        raise GraphError("visual features must be 1-D vectors of one shared length")
    n = len(objects)
    feats = np.stack([o.feature for o in objects]).astype(np.float64)
    src, dst, efeats = [], [], []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            # Arc j -> i carries the geometry of j relative to center i.
            src.append(j)
            dst.append(i)
            efeats.append(spatial_edge_feature(objects[i].bbox, objects[j].bbox))
    edge_feats = np.array(efeats) if efeats else np.zeros((0, 5))
    return LayerGraph(VISUAL, feats, np.array(src, dtype=np.int64),
                      np.array(dst, dtype=np.int64), edge_feats,
                      [o.label for o in objects])


def _both_directions(pairs: list[tuple[int, int]], feats: list[np.ndarray],
                     edge_dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src, dst, efeats = [], [], []
    for (a, b), f in zip(pairs, feats):
        src.extend((a, b))
        dst.extend((b, a))
        efeats.extend((f, f))
    edge_feats = np.array(efeats) if efeats else np.zeros((0, edge_dim))
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), edge_feats


def build_semantic_graph(triples: list[tuple[list[str], list[str], list[str]]],
                         table: EmbeddingTable) -> LayerGraph:
    """Graph over caption-parse phrases.

    One node per distinct subject/object phrase (exact string match), feature
    is the averaged word embedding; one relation edge per distinct triple,
    stored in both directions. An empty triple list yields an empty layer.
    """
    index: dict[str, int] = {}
    names: list[str] = []
    feats: list[np.ndarray] = []

    def node_of(phrase: list[str]) -> int:
        key = " ".join(phrase)
        if key not in index:
            index[key] = len(names)
            names.append(key)
            feats.append(embed_phrase(phrase, table))
        return index[key]

    pairs: list[tuple[int, int]] = []
    edge_feats: list[np.ndarray] = []
    seen: set[tuple[str, str, str]] = set()
    for subj, rel, obj in triples:
        key = (" ".join(subj), " ".join(rel), " ".join(obj))
        if key in seen:
            continue
        seen.add(key)
        a, b = node_of(subj), node_of(obj)
        pairs.append((a, b))
        edge_feats.append(embed_phrase(rel, table))

    if not names:
        return empty_layer(SEMANTIC, table.dim, table.dim)
    src, dst, ef = _both_directions(pairs, edge_feats, table.dim)
    return LayerGraph(SEMANTIC, np.stack(feats), src, dst, ef, names)


def build_fact_graph(facts: list, table: EmbeddingTable,
                     answer_entity: str | None = None) -> tuple[LayerGraph, int | None]:
    """Graph over candidate-fact entities.

    Entities shared between facts merge into one node, so the topology of the
    candidate set is kept; each fact contributes one relation edge (stored in
    both directions) and parallel edges between the same pair are preserved.
    Returns the layer plus the node index of ``answer_entity`` if present.

    ``facts`` is a sequence of objects with e1/relation/e2 string fields
    (see retrieval.FactTriple).
    """
    if not facts:
        raise GraphError("no candidate facts; no answer is selectable")
    index: dict[str, int] = {}
    names: list[str] = []
    feats: list[np.ndarray] = []

    def node_of(entity: str) -> int:
        if entity not in index:
            index[entity] = len(names)
            names.append(entity)
            feats.append(embed_phrase(entity.split(), table))
        return index[entity]

    pairs, edge_feats = [], []
    for fact in facts:
        a, b = node_of(fact.e1), node_of(fact.e2)
        pairs.append((a, b))
        edge_feats.append(embed_phrase(fact.relation.split(), table))

    src, dst, ef = _both_directions(pairs, edge_feats, table.dim)
    layer = LayerGraph(FACT, np.stack(feats), src, dst, ef, names)
    answer_index = index.get(answer_entity) if answer_entity is not None else None
    return layer, answer_index


# ---------------------------------------------------------------------------
# ablation surgery
# ---------------------------------------------------------------------------

def drop_layer(instance: MultiModalGraph, tag: str) -> MultiModalGraph:
    """Return a copy of the instance with the visual or semantic layer emptied."""
    if tag not in (VISUAL, SEMANTIC):
        raise GraphError(f"only visual/semantic layers can be dropped, not {tag!r}")
    visual, semantic = instance.visual, instance.semantic
    if tag == VISUAL:
        visual = empty_layer(VISUAL, visual.node_dim, visual.edge_dim)
    else:
        semantic = empty_layer(SEMANTIC, semantic.node_dim, semantic.edge_dim)
    return MultiModalGraph(visual, semantic, instance.fact, instance.question,
                           instance.answer_index, instance.instance_id)


def zero_edge_features(instance: MultiModalGraph) -> MultiModalGraph:
    """Return a copy with all relational edge features zeroed across layers."""
    def strip(layer: LayerGraph) -> LayerGraph:
        return LayerGraph(layer.tag, layer.node_feats, layer.edge_src, layer.edge_dst,
                          np.zeros_like(layer.edge_feats), list(layer.node_names))
    return MultiModalGraph(strip(instance.visual), strip(instance.semantic),
                           strip(instance.fact), instance.question,
                           instance.answer_index, instance.instance_id)


def permute_layer(instance: MultiModalGraph, tag: str, perm: np.ndarray) -> MultiModalGraph:
    """Reorder one layer's nodes by ``perm`` (new_feats[i] = old_feats[perm[i]]).

    Edges are remapped accordingly; permuting the fact layer also remaps the
    answer index. Used by equivariance tests.
    """
    layer = getattr(instance, tag)
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (layer.num_nodes,) or sorted(perm.tolist()) != list(range(layer.num_nodes)):
        raise GraphError(f"not a permutation of {layer.num_nodes} nodes")
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    new_layer = LayerGraph(
        layer.tag, layer.node_feats[perm], inverse[layer.edge_src], inverse[layer.edge_dst],
        layer.edge_feats.copy(), [layer.node_names[i] for i in perm] if layer.node_names else [])
    parts = {VISUAL: instance.visual, SEMANTIC: instance.semantic, FACT: instance.fact}
    parts[tag] = new_layer
    answer = instance.answer_index
    if tag == FACT and answer is not None:
        answer = int(inverse[answer])
    return MultiModalGraph(parts[VISUAL], parts[SEMANTIC], parts[FACT],
                           instance.question, answer, instance.instance_id)
