"""Fact scoring, top-k ranking, relation prediction and filtering."""

import itertools
import math

import numpy as np
import pytest

from kbvqa.graphs import EmbeddingTable, Question
from kbvqa.retrieval import (CandidateFactSet, ContextScorer, FactTriple,
                             FilterEmptyError, RelationClassifier,
                             RelationClassifierConfig, RelationPrediction,
                             RetrievalError, filter_by_relation, predict_relation,
                             retrieve_top_k, score_fact, tokenize,
                             train_relation_classifier)
from kbvqa.synthetic import question_for


def naive_mean_pairwise(fact, question_tokens, concept_tokens, table):
    """Independent oracle: explicit loop over (fact word, context word) pairs."""
    context = list(dict.fromkeys(list(question_tokens) + list(concept_tokens)))
    total, count = 0.0, 0
    for fw in fact.words():
        for cw in context:
            u, v = table.lookup(fw), table.lookup(cw)
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            total += float(u @ v / (nu * nv)) if nu > 0 and nv > 0 else 0.0
            count += 1
    return total / count


class TestTokenize:
    def test_lowercase_and_split(self):
        assert tokenize("Fire-Hydrant, used FOR?") == ["fire", "hydrant", "used", "for"]

    def test_empty(self):
        assert tokenize("...") == []


class TestScoreFact:
    def one_hot_table(self):
        return EmbeddingTable(4, vectors={
            "a": np.eye(4)[0], "b": np.eye(4)[1], "c": np.eye(4)[2], "d": np.eye(4)[3]})

    def test_identical_words_score_one(self):
        table = self.one_hot_table()
        fact = FactTriple("a", "a", "a")
        assert score_fact(fact, ["a"], [], table) == pytest.approx(1.0)

    def test_orthogonal_words_score_zero(self):
        table = self.one_hot_table()
        fact = FactTriple("a", "a", "a")
        assert score_fact(fact, ["b"], ["c"], table) == pytest.approx(0.0)

    def test_hand_pairwise_mean(self):
        # fact words {a,b} vs context {a,b}: cosines {1,0,0,1}, mean 0.5
        table = self.one_hot_table()
        assert score_fact(FactTriple("a", "a", "b"), ["a", "b"], [], table) == \
            pytest.approx(0.5)

    def test_zero_norm_vectors_contribute_zero(self):
        table = EmbeddingTable(3, vectors={"z": np.zeros(3), "a": np.eye(3)[0]},
                               oov_policy="zero")
        assert score_fact(FactTriple("z", "z", "z"), ["a"], [], table) == 0.0

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_naive_pairwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        table = EmbeddingTable(8, oov_policy="hash", seed=seed)
        words = [f"w{i}" for i in range(12)]
        fact = FactTriple(str(rng.choice(words)), str(rng.choice(words)),
                          str(rng.choice(words)))
        q = [str(w) for w in rng.choice(words, 4)]
        c = [str(w) for w in rng.choice(words, 3)]
        assert score_fact(fact, q, c, table) == pytest.approx(
            naive_mean_pairwise(fact, q, c, table), abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_context_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        table = EmbeddingTable(6, oov_policy="hash", seed=0)
        fact = FactTriple("x1", "x2", "x3")
        context = [f"c{i}" for i in range(6)]
        base = score_fact(fact, context[:3], context[3:], table)
        shuffled = list(context)
        rng.shuffle(shuffled)
        assert score_fact(fact, shuffled[:4], shuffled[4:], table) == pytest.approx(base)

    def test_empty_context_rejected(self):
        with pytest.raises(RetrievalError):
            score_fact(FactTriple("a", "b", "c"), [], [], self.one_hot_table())

    def test_max_mean_mode_differs(self):
        table = self.one_hot_table()
        fact = FactTriple("a", "a", "b")
        mean_score = score_fact(fact, ["a", "c"], [], table)
        max_score = score_fact(fact, ["a", "c"], [], table, mode="max_mean")
        assert max_score == pytest.approx(0.5)   # per fact word: max(1,0)=1, max(0,0)=0
        assert mean_score == pytest.approx(0.25)


class TestRetrieveTopK:
    def scorer_from(self, mapping):
        return lambda fact: mapping[fact.e1]

    def facts(self, names):
        return [FactTriple(n, "r", "x") for n in names]

    def test_k_at_least_size_returns_all_sorted(self):
        facts = self.facts(["a", "b", "c"])
        out = retrieve_top_k(facts, self.scorer_from({"a": 0.1, "b": 0.9, "c": 0.5}), 10)
        assert [f.e1 for f in out.facts] == ["b", "c", "a"]
        assert len(out) == 3

    def test_hand_case_top2(self):
        facts = self.facts(["f0", "f1", "f2"])
        out = retrieve_top_k(facts, self.scorer_from({"f0": 0.9, "f1": 0.1, "f2": 0.5}), 2)
        assert [f.e1 for f in out.facts] == ["f0", "f2"]

    def test_stable_tie_break(self):
        facts = self.facts(["t0", "t1", "t2"])
        out = retrieve_top_k(facts, lambda f: 0.7, 2)
        assert [f.e1 for f in out.facts] == ["t0", "t1"]

    def test_k_must_be_positive(self):
        with pytest.raises(RetrievalError):
            retrieve_top_k(self.facts(["a"]), lambda f: 0.0, 0)

    @pytest.mark.parametrize("seed,k", list(itertools.product(range(5), [1, 3, 7])))
    def test_matches_stable_sort_prefix_oracle(self, seed, k):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        facts = [FactTriple(f"e{i}", "r", "x") for i in range(n)]
        scores = rng.choice([0.1, 0.25, 0.5, 0.9], size=n)  # duplicates force ties
        out = retrieve_top_k(facts, lambda f: scores[int(f.e1[1:])], k)
        oracle = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
        assert [f.e1 for f in out.facts] == [f"e{i}" for i in oracle]

    def test_scores_non_increasing_invariant(self):
        with pytest.raises(RetrievalError, match="non-increasing"):
            CandidateFactSet([(FactTriple("a", "r", "b"), 0.1),
                              (FactTriple("c", "r", "d"), 0.9)], k_retained=5)


class TestRelationPrediction:
    def make_question(self, tokens, table):
        return Question(tokens, np.stack([table.lookup(t) for t in tokens]))

    def test_single_relation_vocabulary(self):
        table = EmbeddingTable(4, oov_policy="hash", seed=0)
        clf = RelationClassifier(["only"], word_dim=4)
        pred = predict_relation(self.make_question(["hi"], table), clf, strict=False)
        assert pred.relations == ["only"]
        assert pred.probabilities[0] == pytest.approx(1.0)

    def test_passthrough_uniform(self):
        table = EmbeddingTable(4, oov_policy="hash", seed=0)
        clf = RelationClassifier(["a", "b", "c", "d"], word_dim=4)
        pred = predict_relation(self.make_question(["hi"], table), clf, strict=False)
        np.testing.assert_allclose(pred.probabilities, 0.25)

    def test_untrained_strict_rejected(self):
        table = EmbeddingTable(4, oov_policy="hash", seed=0)
        clf = RelationClassifier(["a", "b"], word_dim=4)
        with pytest.raises(RetrievalError, match="untrained"):
            predict_relation(self.make_question(["hi"], table), clf, strict=True)

    def test_probabilities_must_sum_to_one(self):
        with pytest.raises(RetrievalError, match="sum"):
            RelationPrediction(["a", "b"], np.array([0.9, 0.3]))

    def test_trained_classifier_learns_templates(self):
        # Synthetic questions follow per-relation templates; held-out accuracy
        # after a short training run should be near-perfect.
        relations = ["usedfor", "isa", "atlocation", "capableof", "hasproperty"]
        table = EmbeddingTable(16, oov_policy="hash", seed=0)
        rng = np.random.default_rng(0)
        examples = []
        for _ in range(400):
            rel = str(rng.choice(relations))
            attr = f"attr{int(rng.integers(30)):02d}"
            tokens = question_for(rel, attr)
            examples.append((self.make_question(tokens, table), rel))
        train_set, held_out = examples[:320], examples[320:]
        clf = RelationClassifier(relations, word_dim=16,
                                 config=RelationClassifierConfig(hidden_dim=24, epochs=6,
                                                                 seed=1))
        train_relation_classifier(clf, train_set)
        correct = sum(clf.predict(q).relations[0] == label for q, label in held_out)
        assert correct / len(held_out) >= 0.95


class TestFilterByRelation:
    def candidates(self, relations):
        entries = [(FactTriple(f"e{i}", rel, f"o{i}"), 1.0 - 0.1 * i)
                   for i, rel in enumerate(relations)]
        return CandidateFactSet(entries, k_retained=10)

    def prediction(self, ranked):
        n = len(ranked)
        probs = np.array([2.0 ** -(i + 1) for i in range(n)])
        return RelationPrediction(ranked, probs / probs.sum())

    def test_all_in_top_m_is_identity(self):
        cands = self.candidates(["usedfor", "isa"])
        out = filter_by_relation(cands, self.prediction(["usedfor", "isa", "other"]), m=3)
        assert [f.relation for f in out.facts] == ["usedfor", "isa"]

    def test_membership_rule(self):
        cands = self.candidates(["usedfor", "isa", "atlocation"])
        pred = self.prediction(["usedfor", "isa", "capableof", "atlocation"])
        out = filter_by_relation(cands, pred, m=3)
        assert [f.relation for f in out.facts] == ["usedfor", "isa"]

    def test_empty_result_signals_fallback(self):
        cands = self.candidates(["atlocation"])
        with pytest.raises(FilterEmptyError, match="fall back"):
            filter_by_relation(cands, self.prediction(["usedfor", "isa"]), m=2)

    def test_never_grows_never_reorders(self):
        rng = np.random.default_rng(0)
        rels = ["r0", "r1", "r2", "r3"]
        for _ in range(20):
            chosen = [str(r) for r in rng.choice(rels, size=6)]
            cands = self.candidates(chosen)
            try:
                out = filter_by_relation(cands, self.prediction(["r0", "r1"]), m=2)
            except FilterEmptyError:
                continue
            assert len(out) <= len(cands)
            kept = [f for f in cands.facts if f.relation in ("r0", "r1")]
            assert out.facts == kept

    def test_m_must_be_positive(self):
        with pytest.raises(RetrievalError):
            filter_by_relation(self.candidates(["r"]), self.prediction(["r"]), m=0)
