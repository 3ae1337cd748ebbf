"""Scoring, ranking and relation-filtering of knowledge-base facts.

A fact is relevant when its words sit close (by embedding cosine) to the
question words and the visual concepts detected in the image. The top-k
facts survive, then an optional relation-type classifier drops candidates
whose relation is not among the question's top-m predicted types.

Scoring is pure and parallelizable across facts; the knowledge base is
immutable after load.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .graphs import EmbeddingTable, Question

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class RetrievalError(ValueError):
    """Invalid input to the retrieval pipeline."""


class FilterEmptyError(RetrievalError):
    """Relation filtering removed every candidate; fall back to the unfiltered set."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class FactTriple:
    e1: str
    relation: str
    e2: str

    def __post_init__(self):
        if not (self.e1 and self.relation and self.e2):
            raise RetrievalError(f"fact fields must be nonempty, got {self!r}")

    def words(self) -> list[str]:
        """Distinct words across all three fields, first-seen order."""
        seen: dict[str, None] = {}
        for fld in (self.e1, self.relation, self.e2):
            for tok in tokenize(fld):
                seen.setdefault(tok)
        return list(seen)


@dataclass
class CandidateFactSet:
    """Scored facts, highest first, at most ``k_retained`` of them."""

    entries: list[tuple[FactTriple, float]]
    k_retained: int
    relation_filtered: bool = False

    def __post_init__(self):
        if len(self.entries) > self.k_retained:
            raise RetrievalError(
                f"{len(self.entries)} candidates exceed k={self.k_retained}")
        scores = [s for _, s in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise RetrievalError("candidate scores must be non-increasing")

    @property
    def facts(self) -> list[FactTriple]:
        return [f for f, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def _unit_rows(tokens: list[str], table: EmbeddingTable) -> np.ndarray:
    """Stack per-token embeddings normalized to unit length; zero-norm rows stay zero."""
    rows = np.stack([table.lookup(t) for t in tokens]) if tokens else np.zeros((0, table.dim))
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0)


def _context_words(question_tokens: list[str], concept_tokens: list[str]) -> list[str]:
    seen: dict[str, None] = {}
    for tok in list(question_tokens) + list(concept_tokens):
        seen.setdefault(tok)
    return list(seen)


class ContextScorer:
    """Scores facts against one (question, visual concepts) context.

    mode "mean" is the mean cosine over all fact-word x context-word pairs;
    since each vector is unit-normalized first, that mean factorizes into a
    single dot product of the two mean vectors. mode "max_mean" takes, for
    each fact word, the best-matching context word, then averages (kept as a
    sensitivity alternative).
    """

    def __init__(self, question_tokens: list[str], concept_tokens: list[str],
                 table: EmbeddingTable, mode: str = "mean"):
        if not question_tokens:
            raise RetrievalError("question tokens must be nonempty")
        if mode not in ("mean", "max_mean"):
            raise RetrievalError(f"unknown scoring mode {mode!r}")
        words = _context_words(question_tokens, concept_tokens)
        if not words:
            raise RetrievalError("empty scoring context")
        self.table = table
        self.mode = mode
        self._context_rows = _unit_rows(words, table)
        self._context_mean = self._context_rows.mean(axis=0)

    def __call__(self, fact: FactTriple) -> float:
        rows = _unit_rows(fact.words(), self.table)
        if rows.shape[0] == 0:
            return 0.0
        if self.mode == "mean":
            return float(rows.mean(axis=0) @ self._context_mean)
        return float((rows @ self._context_rows.T).max(axis=1).mean())

    def score_all(self, facts: list[FactTriple],
                  index: "FactIndex | None" = None) -> np.ndarray:
        if self.mode == "mean":
            if index is not None:
                matrix = index.mean_matrix(facts)
            else:
                matrix = np.stack([_unit_rows(f.words(), self.table).mean(axis=0)
                                   if f.words() else np.zeros(self.table.dim)
                                   for f in facts]) if facts else np.zeros((0, self.table.dim))
            return matrix @ self._context_mean
        return np.array([self(f) for f in facts])


class FactIndex:
    """Caches per-fact mean word vectors so a knowledge base is embedded once."""

    def __init__(self, table: EmbeddingTable):
        self.table = table
        self._mean: dict[FactTriple, np.ndarray] = {}
        self._matrix_cache: tuple[int, int, np.ndarray] | None = None

    def mean_vector(self, fact: FactTriple) -> np.ndarray:
        vec = self._mean.get(fact)
        if vec is None:
            rows = _unit_rows(fact.words(), self.table)
            vec = rows.mean(axis=0) if rows.shape[0] else np.zeros(self.table.dim)
            self._mean[fact] = vec
        return vec

    def mean_matrix(self, facts: list[FactTriple]) -> np.ndarray:
        key = (id(facts), len(facts))
        if self._matrix_cache is not None and self._matrix_cache[:2] == key:
            return self._matrix_cache[2]
        matrix = (np.stack([self.mean_vector(f) for f in facts])
                  if facts else np.zeros((0, self.table.dim)))
        self._matrix_cache = (key[0], key[1], matrix)
        return matrix


def score_fact(fact: FactTriple, question_tokens: list[str], concept_tokens: list[str],
               table: EmbeddingTable, mode: str = "mean") -> float:
    """Similarity of one fact to the question/visual-concept context."""
    return ContextScorer(question_tokens, concept_tokens, table, mode)(fact)


def retrieve_top_k(facts: list[FactTriple], scorer, k: int,
                   index: FactIndex | None = None) -> CandidateFactSet:
    """Keep the k highest-scoring facts; ties break by input order (stable).

    ``scorer`` is a callable(fact) -> float; a ContextScorer additionally
    vectorizes over the whole list.
    """
    if k < 1:
        raise RetrievalError(f"k must be >= 1, got {k}")
    if isinstance(scorer, ContextScorer):
        scores = scorer.score_all(facts, index)
    else:
        scores = np.array([scorer(f) for f in facts])
    order = np.argsort(-scores, kind="stable")[:k]
    entries = [(facts[i], float(scores[i])) for i in order]
    return CandidateFactSet(entries, k_retained=k)


# ---------------------------------------------------------------------------
# relation-type prediction and filtering
# ---------------------------------------------------------------------------

@dataclass
class RelationPrediction:
    """Relation types ranked by predicted probability (non-increasing)."""

    relations: list[str]
    probabilities: np.ndarray

    def __post_init__(self):
        if len(self.relations) != self.probabilities.shape[0]:
            raise RetrievalError("relation/probability length mismatch")
        if abs(float(self.probabilities.sum()) - 1.0) > 1e-6:
            raise RetrievalError("relation probabilities must sum to 1")
        if any(a < b for a, b in zip(self.probabilities, self.probabilities[1:])):
            raise RetrievalError("relation probabilities must be ranked non-increasing")

    def top(self, m: int) -> list[str]:
        return self.relations[:m]


@dataclass
class RelationClassifierConfig:
    hidden_dim: int = 32
    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 5e-3
    seed: int = 0


class RelationClassifier:
    """LSTM question encoder feeding an output layer over the relation vocabulary."""

    def __init__(self, relations: list[str], word_dim: int,
                 config: RelationClassifierConfig | None = None):
        if not relations:
            raise RetrievalError("relation vocabulary is empty")
        if len(set(relations)) != len(relations):
            raise RetrievalError("relation vocabulary has duplicates")
        self.relations = list(relations)
        self.word_dim = word_dim
        self.config = config or RelationClassifierConfig()
        self.params = None
        self.trained = False

    def _init_params(self):
        from . import autodiff as ad
        from .model import create_lstm_params
        store = ad.ParamStore(self.config.seed)
        create_lstm_params(store, "rel_encoder", self.word_dim, self.config.hidden_dim)
        store.create("rel_out.w", (self.config.hidden_dim, len(self.relations)),
                     self.config.hidden_dim)
        store.create("rel_out.b", (len(self.relations),), self.config.hidden_dim)
        self.params = store

    def _logits(self, question: Question):
        from . import autodiff as ad
        from .model import lstm_forward
        hidden = lstm_forward(question.token_embeddings, self.params, "rel_encoder",
                              self.config.hidden_dim)
        return ad.add(ad.matmul(hidden, self.params["rel_out.w"]), self.params["rel_out.b"])

    def predict(self, question: Question) -> RelationPrediction:
        if not self.trained:
            raise RetrievalError("relation classifier is untrained")
        from . import autodiff as ad
        probs = ad.softmax(self._logits(question)).values
        order = np.argsort(-probs, kind="stable")
        return RelationPrediction([self.relations[i] for i in order], probs[order])


def predict_relation(question: Question, classifier: RelationClassifier,
                     strict: bool = True) -> RelationPrediction:
    """Distribution over relation types for a question.

    With an untrained classifier: strict mode raises, pass-through mode
    returns the uniform distribution (vocabulary order).
    """
    if classifier.trained:
        return classifier.predict(question)
    if strict:
        raise RetrievalError("relation classifier is untrained (strict mode)")
    n = len(classifier.relations)
    return RelationPrediction(list(classifier.relations), np.full(n, 1.0 / n))


def train_relation_classifier(classifier: RelationClassifier,
                              examples: list[tuple[Question, str]]) -> list[float]:
    """Fit the classifier on (question, relation-label) pairs; returns per-epoch loss."""
    from . import autodiff as ad
    from .training import AdamState, adam_step

    if not examples:
        raise RetrievalError("no training examples for the relation classifier")
    vocab = {r: i for i, r in enumerate(classifier.relations)}
    for _, label in examples:
        if label not in vocab:
            raise RetrievalError(f"label {label!r} not in relation vocabulary")

    cfg = classifier.config
    classifier._init_params()
    params = classifier.params
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            params.zero_grads()
            with ad.Tape() as tape:
                total = ad.constant(0.0)
                for idx in batch:
                    question, label = examples[idx]
                    probs = ad.softmax(classifier._logits(question))
                    picked = ad.gather(probs, np.array([vocab[label]]))
                    total = ad.add(total, ad.neg(ad.log(picked)))
                loss = ad.affine(ad.reduce_sum(total), 1.0 / len(batch), 0.0)
            tape.backward(loss)
            adam_step(params, state, cfg.learning_rate)
            epoch_loss += loss.item() * len(batch)
        curve.append(epoch_loss / len(examples))
    classifier.trained = True
    return curve


def filter_by_relation(candidates: CandidateFactSet, prediction: RelationPrediction,
                       m: int = 3) -> CandidateFactSet:
    """Keep candidates whose relation is among the top-m predicted types.

    Order is preserved and the set never grows. Raises FilterEmptyError when
    nothing survives; callers should fall back to the unfiltered set.
    """
    if m < 1:
        raise RetrievalError(f"m must be >= 1, got {m}")
    allowed = set(prediction.top(m))
    entries = [(f, s) for f, s in candidates.entries if f.relation in allowed]
    if not entries:
        raise FilterEmptyError(
            f"no candidate fact has a relation in the top-{m} predicted types; "
            "fall back to the unfiltered candidate set")
    return CandidateFactSet(entries, candidates.k_retained, relation_filtered=True)
