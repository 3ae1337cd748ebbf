"""Dataset formats, loading/validation, and instance preparation.

A dataset is a directory: ``manifest.json`` (dims, relation vocabulary, file
names, OOV seed), ``instances.jsonl`` (one record per line), ``kb.json``
(shared fact pool) and optionally ``embeddings.txt`` (token + floats per
line). All files carry a ``format_version``. Records reference candidate
facts either inline or through the knowledge base; preparation runs the
retrieval pipeline and builds the three-layer graph per instance.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .graphs import (EmbeddingTable, MultiModalGraph, Question, VisualNode, BoundingBox,
                     GraphError, build_fact_graph, build_semantic_graph, build_visual_graph)
from .retrieval import (ContextScorer, FactIndex, FactTriple, FilterEmptyError,
                        RelationClassifier, RetrievalError, predict_relation,
                        retrieve_top_k, train_relation_classifier, filter_by_relation)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DataError(ValueError):
    """Malformed dataset file or record."""


@dataclass
class InstanceRecord:
    """One question/image instance as stored on disk."""

    id: str
    fold: int
    question: list[str]
    relation: str
    objects: list[dict]          # {"label", "bbox": [x,y,w,h], "feature": [...]}
    triples: list[tuple[list[str], list[str], list[str]]]
    fact_source: str             # "inline" | "kb"
    facts: list[FactTriple] | None
    answer: str

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "fold": self.fold,
            "question": self.question,
            "relation": self.relation,
            "objects": self.objects,
            "triples": [[list(s), list(r), list(o)] for s, r, o in self.triples],
            "fact_source": self.fact_source,
            "facts": [[f.e1, f.relation, f.e2] for f in self.facts]
            if self.facts is not None else None,
            "answer": self.answer,
        }


def _require(cond: bool, record_id: str, message: str) -> None:
    if not cond:
        raise DataError(f"record {record_id!r}: {message}")


def record_from_json(data: dict, word_dim: int, visual_dim: int) -> InstanceRecord:
    rid = str(data.get("id", ""))
    _require(bool(rid), rid or "<missing id>", "missing id")
    _require(isinstance(data.get("fold"), int) and data["fold"] >= 0, rid,
             "fold must be a non-negative integer")
    question = data.get("question")
    _require(isinstance(question, list) and question
             and all(isinstance(t, str) for t in question), rid,
             "question must be a nonempty token list")
    objects = data.get("objects", [])
    _require(isinstance(objects, list), rid, "objects must be a list")
    for i, obj in enumerate(objects):
        bbox = obj.get("bbox")
        _require(isinstance(bbox, list) and len(bbox) == 4, rid,
                 f"objects[{i}].bbox must be [x, y, w, h]")
        try:
            BoundingBox(*[float(v) for v in bbox])
        except (GraphError, TypeError, ValueError) as exc:
            raise DataError(f"record {rid!r}: objects[{i}].bbox invalid: {exc}") from None
        feature = obj.get("feature")
        _require(isinstance(feature, list) and len(feature) == visual_dim, rid,
                 f"objects[{i}].feature must have length {visual_dim}")
        _require(isinstance(obj.get("label"), str) and obj["label"], rid,
                 f"objects[{i}].label must be a nonempty string")
    triples = data.get("triples", [])
    parsed_triples = []
    for i, triple in enumerate(triples):
        _require(isinstance(triple, list) and len(triple) == 3
                 and all(isinstance(part, list) and part for part in triple), rid,
                 f"triples[{i}] must be [subject_tokens, relation_tokens, object_tokens]")
        parsed_triples.append(tuple(triple))
    fact_source = data.get("fact_source", "inline")
    _require(fact_source in ("inline", "kb"), rid,
             f"fact_source must be 'inline' or 'kb', got {fact_source!r}")
    raw_facts = data.get("facts")
    facts = None
    if fact_source == "inline":
        _require(isinstance(raw_facts, list) and raw_facts, rid,
                 "inline fact_source requires a nonempty facts list")
        facts = []
        for i, f in enumerate(raw_facts):
            _require(isinstance(f, list) and len(f) == 3, rid,
                     f"facts[{i}] must be [e1, relation, e2]")
            try:
                facts.append(FactTriple(*[str(x) for x in f]))
            except RetrievalError as exc:
                raise DataError(f"record {rid!r}: facts[{i}]: {exc}") from None
    answer = data.get("answer")
    _require(isinstance(answer, str) and answer, rid, "answer must be a nonempty string")
    return InstanceRecord(rid, data["fold"], list(question), str(data.get("relation", "")),
                          objects, parsed_triples, fact_source, facts, answer)


@dataclass
class Dataset:
    root: str
    manifest: dict
    records: list[InstanceRecord]
    table: EmbeddingTable
    kb: list[FactTriple]
    fact_index: FactIndex = field(init=False)

    def __post_init__(self):
        self.fact_index = FactIndex(self.table)

    @property
    def word_dim(self) -> int:
        return self.manifest["word_dim"]

    @property
    def visual_dim(self) -> int:
        return self.manifest["visual_dim"]

    @property
    def relation_vocab(self) -> list[str]:
        return list(self.manifest["relation_vocab"])

    def folds(self) -> list[int]:
        return sorted({r.fold for r in self.records})


def _read_json(path: str, what: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{what} not found at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} at {path} is not valid JSON: {exc}") from None


def load_embeddings_file(path: str, dim: int) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise DataError(f"{path}:{lineno}: expected token + {dim} floats")
            vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
    return vectors


def load_dataset(root: str) -> Dataset:
    """Load and validate a dataset directory; schema errors name the record."""
    manifest = _read_json(os.path.join(root, MANIFEST_NAME), "dataset manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format_version {manifest.get('format_version')!r}")
    for key in ("word_dim", "visual_dim", "relation_vocab", "files"):
        if key not in manifest:
            raise DataError(f"manifest missing {key!r}")
    files = manifest["files"]
    word_dim, visual_dim = manifest["word_dim"], manifest["visual_dim"]

    inst_path = os.path.join(root, files["instances"])
    records: list[InstanceRecord] = []
    seen_ids: set[str] = set()
    try:
        fh = open(inst_path)
    except FileNotFoundError:
        raise DataError(f"instances file not found at {inst_path}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{inst_path}:{lineno}: invalid JSON: {exc}") from None
            record = record_from_json(data, word_dim, visual_dim)
            if record.id in seen_ids:
                raise DataError(f"record {record.id!r}: duplicate id")
            seen_ids.add(record.id)
            records.append(record)
    if not records:
        raise DataError(f"instances file {inst_path} contains no records")

    kb: list[FactTriple] = []
    if files.get("kb"):
        payload = _read_json(os.path.join(root, files["kb"]), "knowledge base")
        if payload.get("format_version") != FORMAT_VERSION:
            raise DataError("knowledge base format_version mismatch")
        for i, f in enumerate(payload.get("facts", [])):
            try:
                kb.append(FactTriple(*[str(x) for x in f]))
            except (RetrievalError, TypeError) as exc:
                raise DataError(f"kb fact #{i}: {exc}") from None
    if any(r.fact_source == "kb" for r in records) and not kb:
        raise DataError("records reference the knowledge base but it is empty or missing")

    vectors = None
    if files.get("embeddings"):
        vectors = load_embeddings_file(os.path.join(root, files["embeddings"]), word_dim)
    table = EmbeddingTable(word_dim, vectors=vectors, oov_policy="hash",
                           seed=int(manifest.get("oov_seed", 0)))
    return Dataset(root, manifest, records, table, kb)


def save_dataset(root: str, manifest: dict, records: list[InstanceRecord],
                 kb: list[FactTriple],
                 embeddings: dict[str, np.ndarray] | None = None) -> None:
    os.makedirs(root, exist_ok=True)
    files = manifest.setdefault("files", {})
    files.setdefault("instances", "instances.jsonl")
    files.setdefault("kb", "kb.json" if kb else None)
    files.setdefault("embeddings", "embeddings.txt" if embeddings else None)
    manifest["format_version"] = FORMAT_VERSION
    manifest["num_instances"] = len(records)
    with open(os.path.join(root, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(root, files["instances"]), "w") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
    if kb:
        with open(os.path.join(root, files["kb"]), "w") as fh:
            json.dump({"format_version": FORMAT_VERSION,
                       "facts": [[f.e1, f.relation, f.e2] for f in kb]}, fh)
            fh.write("\n")
    if embeddings:
        with open(os.path.join(root, files["embeddings"]), "w") as fh:
            for token, vec in embeddings.items():
                fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


# ---------------------------------------------------------------------------
# preparation: retrieval + graph construction
# ---------------------------------------------------------------------------

@dataclass
class RetrievalConfig:
    """How candidate facts are selected per instance."""

    top_k: int = 100
    score_mode: str = "mean"          # "mean" | "max_mean"
    relation_filter: str = "off"      # "off" | "passthrough" | "trained"
    top_m: int = 3

    def __post_init__(self):
        if self.top_k < 1 or self.top_m < 1:
            raise DataError("top_k and top_m must be >= 1")
        if self.relation_filter not in ("off", "passthrough", "trained"):
            raise DataError(f"unknown relation_filter {self.relation_filter!r}")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict) -> "RetrievalConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown retrieval config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PreparedInstance:
    id: str
    fold: int
    graph: MultiModalGraph


@dataclass
class ValidationReport:
    """Instances whose answer did not survive retrieval/filtering, with reasons."""

    dropped: list[dict] = field(default_factory=list)

    def add(self, record_id: str, reason: str) -> None:
        self.dropped.append({"id": record_id, "reason": reason})

    def to_dict(self) -> dict:
        return {"dropped": self.dropped}


def make_question(record: InstanceRecord, table: EmbeddingTable) -> Question:
    embeddings = np.stack([table.lookup(t) for t in record.question])
    return Question(list(record.question), embeddings)


def relation_examples(dataset: Dataset, folds: set[int] | None = None
                      ) -> list[tuple[Question, str]]:
    """(question, relation-label) pairs for classifier training."""
    out = []
    for record in dataset.records:
        if not record.relation:
            continue
        if folds is not None and record.fold not in folds:
            continue
        out.append((make_question(record, dataset.table), record.relation))
    return out


def prepare_instances(dataset: Dataset, config: RetrievalConfig | None = None,
                      classifier: RelationClassifier | None = None,
                      strict: bool = False,
                      ) -> tuple[list[PreparedInstance], ValidationReport]:
    """Run retrieval and build the three-layer graph for every record.

    Records whose answer entity is missing from the candidate set after
    retrieval/filtering are listed in the validation report and dropped
    (or raise, when ``strict``).
    """
    config = config or RetrievalConfig()
    if config.relation_filter == "trained" and (classifier is None or not classifier.trained):
        raise DataError("relation_filter 'trained' needs a trained classifier")
    if config.relation_filter == "passthrough" and classifier is None:
        classifier = RelationClassifier(dataset.relation_vocab or ["unknown"],
                                        dataset.word_dim)
    table = dataset.table
    prepared: list[PreparedInstance] = []
    report = ValidationReport()
    for record in dataset.records:
        question = make_question(record, table)
        nodes = [VisualNode(np.asarray(o["feature"], dtype=np.float64),
                            BoundingBox(*[float(v) for v in o["bbox"]]), o["label"])
                 for o in record.objects]
        visual = build_visual_graph(nodes, allow_empty=True)
        semantic = build_semantic_graph(record.triples, table)

        pool = record.facts if record.fact_source == "inline" else dataset.kb
        scorer = ContextScorer(record.question, [o["label"] for o in record.objects],
                               table, config.score_mode)
        index = dataset.fact_index if record.fact_source == "kb" else None
        candidates = retrieve_top_k(pool, scorer, config.top_k, index=index)
        if config.relation_filter != "off":
            prediction = predict_relation(question, classifier,
                                          strict=config.relation_filter == "trained")
            try:
                candidates = filter_by_relation(candidates, prediction, config.top_m)
            except FilterEmptyError:
                pass  # guaranteed-answerable reading: keep the unfiltered set
        fact_layer, answer_index = build_fact_graph(candidates.facts, table, record.answer)
        if answer_index is None:
            reason = "answer entity not among retrieved candidate facts"
            if strict:
                raise DataError(f"record {record.id!r}: {reason}")
            report.add(record.id, reason)
            continue
        graph = MultiModalGraph(visual, semantic, fact_layer, question,
                                answer_index, record.id)
        prepared.append(PreparedInstance(record.id, record.fold, graph))
    return prepared, report


def split_by_fold(prepared: list[PreparedInstance], test_fold: int
                  ) -> tuple[list[PreparedInstance], list[PreparedInstance]]:
    train = [p for p in prepared if p.fold != test_fold]
    test = [p for p in prepared if p.fold == test_fold]
    return train, test


def build_relation_classifier(dataset: Dataset, test_fold: int | None = None,
                              hidden_dim: int = 32, seed: int = 0
                              ) -> RelationClassifier:
    """Train the relation classifier on non-test folds of the dataset."""
    from .retrieval import RelationClassifierConfig

    folds = None
    if test_fold is not None:
        folds = {f for f in {r.fold for r in dataset.records} if f != test_fold}
    examples = relation_examples(dataset, folds)
    classifier = RelationClassifier(dataset.relation_vocab, dataset.word_dim,
                                    RelationClassifierConfig(hidden_dim=hidden_dim, seed=seed))
    train_relation_classifier(classifier, examples)
    return classifier
