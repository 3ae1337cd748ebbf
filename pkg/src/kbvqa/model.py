"""Question-guided reasoning network over the three-layer graph.

Pipeline per reasoning step: intra-modal knowledge selection on each layer
(question-guided node and edge attention followed by a graph convolution),
cross-modal convolutions that pull visual and semantic evidence into each
fact entity, a sigmoid gate that fuses the three sources, and a fact-level
aggregation pass that lets entities compare against their neighbors. After T
steps a small MLP scores every fact entity as a binary answer candidate.

All parameter matrices are stored (in, out) so activations are row vectors:
``y = x @ W + b``. The forward pass is pure given (params, instance, rng);
concurrent forwards may share a read-only ParamStore.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .graphs import FACT, SEMANTIC, VISUAL, LayerGraph, MultiModalGraph, Question

VISUAL_EDGE_DIM = 5


class ModelError(ValueError):
    """Invalid configuration or input to the reasoning network."""


@dataclass
class ModelConfig:
    """Shapes and behavior switches for the reasoning network.

    ``use_bias`` toggles the learned bias on every attention/fusion/classifier
    affine map (strict-paper mode drops them); the question encoder keeps its
    bias regardless. ``*_message_mode`` switches a cross-modal convolution to
    mean pooling ("mean") for the concat ablations.
    """

    reasoning_steps: int = 2
    hidden_dim: int = 512
    question_dim: int = 512
    word_dim: int = 300
    visual_dim: int = 2048
    dropout: float = 0.5
    share_step_weights: bool = False
    use_bias: bool = True
    visual_message_mode: str = "attention"
    semantic_message_mode: str = "attention"
    # Multiplies the fan-in init bound. The bare 1/sqrt(fan_in) rule shrinks
    # activations roughly 1/sqrt(3) per affine map, which across two reasoning
    # steps starves the early layers of gradient at desk-scale step budgets.
    init_gain: float = 2.0

    def __post_init__(self):
        if self.reasoning_steps < 1:
            raise ModelError(f"reasoning_steps must be >= 1, got {self.reasoning_steps}")
        for name in ("hidden_dim", "question_dim", "word_dim", "visual_dim"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("visual_message_mode", "semantic_message_mode"):
            if getattr(self, name) not in ("attention", "mean"):
                raise ModelError(f"{name} must be 'attention' or 'mean'")
        if self.init_gain <= 0:
            raise ModelError("init_gain must be positive")

    def edge_dim(self, tag: str) -> int:
        return VISUAL_EDGE_DIM if tag == VISUAL else self.word_dim

    def node_input_dim(self, tag: str) -> int:
        return self.visual_dim if tag == VISUAL else self.word_dim

    def to_dict(self) -> dict:
        return {
            "reasoning_steps": self.reasoning_steps,
            "hidden_dim": self.hidden_dim,
            "question_dim": self.question_dim,
            "word_dim": self.word_dim,
            "visual_dim": self.visual_dim,
            "dropout": self.dropout,
            "share_step_weights": self.share_step_weights,
            "use_bias": self.use_bias,
            "visual_message_mode": self.visual_message_mode,
            "semantic_message_mode": self.semantic_message_mode,
            "init_gain": self.init_gain,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# Layers that get their own intra-modal parameter sets each step; fact_agg is
# the dedicated set for the aggregation pass over fused fact features.
_INTRA_SETS = (VISUAL, SEMANTIC, FACT, "fact_agg")


def param_specs(config: ModelConfig) -> dict[str, tuple[tuple, int]]:
    """name -> (shape, fan_in) for every trainable tensor, in creation order."""
    h, dq, dw = config.hidden_dim, config.question_dim, config.word_dim
    specs: dict[str, tuple[tuple, int]] = {}

    def linear(name: str, din: int, dout: int, biased: bool = True) -> None:
        specs[f"{name}.w"] = ((din, dout), din)
        if biased and config.use_bias:
            specs[f"{name}.b"] = ((dout,), din)

    specs["encoder.in_w"] = ((dw, 4 * dq), dw)
    specs["encoder.rec_w"] = ((dq, 4 * dq), dq)
    specs["encoder.bias"] = ((4 * dq,), dq)

    for tag in (VISUAL, SEMANTIC, FACT):
        linear(f"input_proj.{tag}", config.node_input_dim(tag), h)

    steps = 1 if config.share_step_weights else config.reasoning_steps
    for step in range(steps):
        for tag in _INTRA_SETS:
            de = config.edge_dim(FACT if tag == "fact_agg" else tag)
            p = f"step{step}.{tag}"
            linear(f"{p}.node_att.feat", h, h)
            linear(f"{p}.node_att.query", dq, h)
            specs[f"{p}.node_att.score"] = ((h,), h)
            linear(f"{p}.edge_att.edge_in", h + de, h)
            linear(f"{p}.edge_att.center", h + dq, h)
            linear(f"{p}.edge_att.edge", h, h)
            linear(f"{p}.edge_att.query", h, h)
            specs[f"{p}.edge_att.score"] = ((h,), h)
            linear(f"{p}.update", 2 * h, h)
        for source in (VISUAL, SEMANTIC):
            cp = f"step{step}.cross.{source}"
            linear(f"{cp}.source", h, h)
            linear(f"{cp}.target", h + dq, h)
            specs[f"{cp}.score"] = ((h,), h)
        linear(f"step{step}.fuse.gate", 3 * h, 3 * h)
        linear(f"step{step}.fuse.out", 3 * h, h)

    linear("classifier.hidden", h + dq, dq)
    linear("classifier.out", dq, 1)
    return specs


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    return {name: shape for name, (shape, _) in param_specs(config).items()}


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    store = ParamStore(seed)
    for name, (shape, fan_in) in param_specs(config).items():
        store.create(name, shape, fan_in, gain=config.init_gain)
    return store


def _linear(x: Tensor, params: ParamStore, name: str) -> Tensor:
    y = ad.matmul(x, params[f"{name}.w"])
    bias = f"{name}.b"
    if bias in params:
        y = ad.add(y, params[bias])
    return y


# ---------------------------------------------------------------------------
# question encoder
# ---------------------------------------------------------------------------

def create_lstm_params(store: ParamStore, prefix: str, input_dim: int, hidden_dim: int) -> None:
    store.create(f"{prefix}.in_w", (input_dim, 4 * hidden_dim), input_dim)
    store.create(f"{prefix}.rec_w", (hidden_dim, 4 * hidden_dim), hidden_dim)
    store.create(f"{prefix}.bias", (4 * hidden_dim,), hidden_dim)


def lstm_forward(token_embeddings: np.ndarray, params: ParamStore, prefix: str,
                 hidden_dim: int) -> Tensor:
    """Run a single-layer LSTM over token embeddings; return the last hidden state."""
    h = ad.constant(np.zeros(hidden_dim))
    c = ad.constant(np.zeros(hidden_dim))
    in_w, rec_w, bias = params[f"{prefix}.in_w"], params[f"{prefix}.rec_w"], params[f"{prefix}.bias"]
    d = hidden_dim
    for t in range(token_embeddings.shape[0]):
        x = ad.constant(token_embeddings[t])
        z = ad.add(ad.add(ad.matmul(x, in_w), ad.matmul(h, rec_w)), bias)
        i_gate = ad.sigmoid(ad.narrow(z, 0, d))
        f_gate = ad.sigmoid(ad.narrow(z, d, 2 * d))
        g_cell = ad.tanh(ad.narrow(z, 2 * d, 3 * d))
        o_gate = ad.sigmoid(ad.narrow(z, 3 * d, 4 * d))
        c = ad.add(ad.mul(f_gate, c), ad.mul(i_gate, g_cell))
        h = ad.mul(o_gate, ad.tanh(c))
    return h


def encode_question(question: Question, params: ParamStore, config: ModelConfig) -> Tensor:
    if not question.tokens:
        raise ModelError("cannot encode an empty question")
    if question.token_embeddings.shape[1] != config.word_dim:
        raise ModelError(
            f"question embeddings have dim {question.token_embeddings.shape[1]}, "
            f"config says {config.word_dim}")
    return lstm_forward(question.token_embeddings, params, "encoder", config.question_dim)


# ---------------------------------------------------------------------------
# intra-modal knowledge selection
# ---------------------------------------------------------------------------

def node_attention(feats: Tensor, q: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """Question-guided attention over all nodes of one layer; sums to 1."""
    n = feats.values.shape[0]
    if n == 0:
        raise ModelError("node attention over an empty layer")
    u = ad.tanh(ad.add(_linear(feats, params, f"{prefix}.node_att.feat"),
                       _linear(q, params, f"{prefix}.node_att.query")))
    return ad.softmax(ad.matmul(u, params[f"{prefix}.node_att.score"]))


class EdgeAttention(NamedTuple):
    beta: Tensor        # (E,) normalized per in-neighborhood
    edge_values: Tensor  # (E, h) transformed neighbor+relation features


def edge_attention(feats: Tensor, layer: LayerGraph, q: Tensor, params: ParamStore,
                   prefix: str) -> EdgeAttention:
    """Attention over each node's in-neighborhood, conditioned on the center node.

    An arc j->i contributes ``W_e [v_j, r_ji]`` scored against ``W_c [v_i, q]``;
    weights normalize over arcs sharing the destination i. Nodes without
    in-arcs simply have no entries.
    """
    n = feats.values.shape[0]
    h = params[f"{prefix}.edge_att.edge.w"].values.shape[0]
    if layer.num_edges == 0:
        return EdgeAttention(ad.constant(np.zeros(0)), ad.constant(np.zeros((0, h))))
    neighbor = ad.gather(feats, layer.edge_src)
    edge_values = _linear(ad.concat([neighbor, ad.constant(layer.edge_feats)]),
                          params, f"{prefix}.edge_att.edge_in")
    center = _linear(ad.concat([feats, ad.broadcast_rows(q, n)]),
                     params, f"{prefix}.edge_att.center")
    u = ad.tanh(ad.add(_linear(edge_values, params, f"{prefix}.edge_att.edge"),
                       ad.gather(_linear(center, params, f"{prefix}.edge_att.query"),
                                 layer.edge_dst)))
    logits = ad.matmul(u, params[f"{prefix}.edge_att.score"])
    beta = ad.softmax(logits, segments=layer.edge_dst, num_segments=n)
    return EdgeAttention(beta, edge_values)


class IntraModalResult(NamedTuple):
    updated: Tensor          # (N, h) new node features
    alpha: Tensor            # (N,) node attention
    beta: Tensor             # (E,) edge attention
    messages: Tensor         # (N, h) aggregated neighborhood messages


def intra_modal_select(feats: Tensor, layer: LayerGraph, q: Tensor, params: ParamStore,
                       prefix: str, training: bool = False,
                       rng: np.random.Generator | None = None,
                       dropout_p: float = 0.0) -> IntraModalResult:
    """One question-guided convolution within a layer.

    All nodes update simultaneously from the pre-update features; a node with
    an empty in-neighborhood receives the zero message.
    """
    n = feats.values.shape[0]
    alpha = node_attention(feats, q, params, prefix)
    beta, edge_values = edge_attention(feats, layer, q, params, prefix)
    e = beta.values.shape[0]
    messages = ad.segment_sum(ad.mul(ad.reshape(beta, (e, 1)), edge_values),
                              layer.edge_dst, n)
    kept = ad.mul(ad.reshape(alpha, (n, 1)), feats)
    updated = ad.relu(_linear(ad.concat([messages, kept]), params, f"{prefix}.update"))
    updated = ad.dropout(updated, dropout_p, training, rng)
    return IntraModalResult(updated, alpha, beta, messages)


# ---------------------------------------------------------------------------
# cross-modal reasoning
# ---------------------------------------------------------------------------

class CrossModalResult(NamedTuple):
    messages: Tensor             # (Nf, h)
    gamma: Tensor | None         # (Nf*Ns,) flat attention, None if empty/mean mode
    source_count: int


def cross_modal_conv(source_feats: Tensor | None, fact_feats: Tensor, q: Tensor,
                     params: ParamStore, prefix: str,
                     mode: str = "attention") -> CrossModalResult:
    """Pull evidence from a source layer into every fact entity.

    Attention mode scores every source node against each (entity, question)
    pair and takes the weighted sum; "mean" mode replaces that with plain mean
    pooling (the concat ablation). An empty source layer contributes the zero
    message to every entity.
    """
    nf = fact_feats.values.shape[0]
    h = fact_feats.values.shape[1]
    if source_feats is None or source_feats.values.shape[0] == 0:
        return CrossModalResult(ad.constant(np.zeros((nf, h))), None, 0)
    ns = source_feats.values.shape[0]
    if mode == "mean":
        pooled = ad.matmul(ad.constant(np.full((1, ns), 1.0 / ns)), source_feats)
        messages = ad.broadcast_rows(ad.reshape(pooled, (h,)), nf)
        return CrossModalResult(messages, None, ns)
    s_src = _linear(source_feats, params, f"{prefix}.source")
    s_tgt = _linear(ad.concat([fact_feats, ad.broadcast_rows(q, nf)]),
                    params, f"{prefix}.target")
    src_idx = np.tile(np.arange(ns), nf)
    tgt_idx = np.repeat(np.arange(nf), ns)
    u = ad.tanh(ad.add(ad.gather(s_src, src_idx), ad.gather(s_tgt, tgt_idx)))
    logits = ad.matmul(u, params[f"{prefix}.score"])
    gamma = ad.softmax(logits, segments=tgt_idx, num_segments=nf)
    weighted = ad.mul(ad.reshape(gamma, (nf * ns, 1)), ad.gather(source_feats, src_idx))
    messages = ad.segment_sum(weighted, tgt_idx, nf)
    return CrossModalResult(messages, gamma, ns)


class GateFuseResult(NamedTuple):
    fused: Tensor  # (Nf, h)
    gate: Tensor   # (Nf, 3h), components strictly in (0, 1)


def gate_fuse(visual_msg: Tensor, semantic_msg: Tensor, fact_feats: Tensor,
              params: ParamStore, prefix: str) -> GateFuseResult:
    """Sigmoid-gated fusion of [visual message, semantic message, entity]."""
    cat = ad.concat([visual_msg, semantic_msg, fact_feats])
    gate = ad.sigmoid(_linear(cat, params, f"{prefix}.fuse.gate"))
    fused = _linear(ad.mul(gate, cat), params, f"{prefix}.fuse.out")
    return GateFuseResult(fused, gate)


def fact_aggregate(fused: Tensor, fact_layer: LayerGraph, q: Tensor, params: ParamStore,
                   step_prefix: str, training: bool = False,
                   rng: np.random.Generator | None = None,
                   dropout_p: float = 0.0) -> IntraModalResult:
    """Entity-vs-entity comparison pass over the fact graph.

    Reuses the intra-modal machinery with the fused entity features as nodes,
    relation embeddings as edges, and a dedicated parameter set.
    """
    return intra_modal_select(fused, fact_layer, q, params, f"{step_prefix}.fact_agg",
                              training, rng, dropout_p)


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

@dataclass
class StepTrace:
    """Attention weights, gate values and messages for one reasoning step."""

    node_attention: dict[str, np.ndarray] = field(default_factory=dict)
    edge_attention: dict[str, np.ndarray] = field(default_factory=dict)
    cross_attention: dict[str, np.ndarray | None] = field(default_factory=dict)
    cross_messages: dict[str, np.ndarray] = field(default_factory=dict)
    messages: dict[str, np.ndarray] = field(default_factory=dict)
    gates: np.ndarray | None = None
    fused: np.ndarray | None = None


@dataclass
class Prediction:
    """Per-entity answer probabilities (independent binary scores)."""

    probabilities: np.ndarray
    entities: list[str]
    raw: Tensor | None = None


def _check_instance(instance: MultiModalGraph, config: ModelConfig) -> None:
    for tag, layer in ((VISUAL, instance.visual), (SEMANTIC, instance.semantic),
                       (FACT, instance.fact)):
        if layer.num_nodes == 0:
            continue
        want = config.node_input_dim(tag)
        if layer.node_dim != want:
            raise ModelError(f"{tag} node dim {layer.node_dim} != configured {want}")
        if layer.num_edges and layer.edge_dim != config.edge_dim(tag):
            raise ModelError(
                f"{tag} edge dim {layer.edge_dim} != configured {config.edge_dim(tag)}")


def forward(instance: MultiModalGraph, config: ModelConfig, params: ParamStore,
            training: bool = False, rng: np.random.Generator | None = None,
            collect_trace: bool = True) -> tuple[Prediction, list[StepTrace]]:
    """Run T reasoning steps and score every fact entity.

    Deterministic given (instance, params) when ``training`` is off; with
    dropout on, ``rng`` drives the masks.
    """
    _check_instance(instance, config)
    p_drop = config.dropout
    q = encode_question(instance.question, params, config)

    feats: dict[str, Tensor | None] = {}
    layers = {VISUAL: instance.visual, SEMANTIC: instance.semantic, FACT: instance.fact}
    for tag, layer in layers.items():
        if layer.num_nodes:
            feats[tag] = _linear(ad.constant(layer.node_feats), params, f"input_proj.{tag}")
        else:
            feats[tag] = None

    traces: list[StepTrace] = []
    for step in range(config.reasoning_steps):
        sp = "step0" if config.share_step_weights else f"step{step}"
        trace = StepTrace()

        intra: dict[str, IntraModalResult | None] = {}
        for tag in (VISUAL, SEMANTIC, FACT):
            if feats[tag] is None:
                intra[tag] = None
                continue
            result = intra_modal_select(feats[tag], layers[tag], q, params, f"{sp}.{tag}",
                                        training, rng, p_drop)
            intra[tag] = result
            feats[tag] = result.updated
            if collect_trace:
                trace.node_attention[tag] = result.alpha.values.copy()
                trace.edge_attention[tag] = result.beta.values.copy()
                trace.messages[tag] = result.messages.values.copy()

        fact_hat = feats[FACT]
        assert fact_hat is not None
        cross = {
            VISUAL: cross_modal_conv(feats[VISUAL], fact_hat, q, params,
                                     f"{sp}.cross.visual", config.visual_message_mode),
            SEMANTIC: cross_modal_conv(feats[SEMANTIC], fact_hat, q, params,
                                       f"{sp}.cross.semantic", config.semantic_message_mode),
        }
        fusion = gate_fuse(cross[VISUAL].messages, cross[SEMANTIC].messages, fact_hat,
                           params, sp)
        agg = fact_aggregate(fusion.fused, instance.fact, q, params, sp,
                             training, rng, p_drop)
        feats[FACT] = agg.updated

        if collect_trace:
            nf = fact_hat.values.shape[0]
            for tag in (VISUAL, SEMANTIC):
                r = cross[tag]
                trace.cross_attention[tag] = (
                    r.gamma.values.reshape(nf, r.source_count).copy()
                    if r.gamma is not None else None)
                trace.cross_messages[tag] = r.messages.values.copy()
            trace.gates = fusion.gate.values.copy()
            trace.fused = fusion.fused.values.copy()
            trace.node_attention["fact_aggregate"] = agg.alpha.values.copy()
            trace.edge_attention["fact_aggregate"] = agg.beta.values.copy()
            traces.append(trace)

    final = feats[FACT]
    nf = final.values.shape[0]
    cls_in = ad.concat([final, ad.broadcast_rows(q, nf)])
    cls_in = ad.dropout(cls_in, p_drop, training, rng)
    hidden = ad.relu(_linear(cls_in, params, "classifier.hidden"))
    logits = ad.reshape(_linear(hidden, params, "classifier.out"), (nf,))
    probs = ad.sigmoid(logits)
    prediction = Prediction(probs.values.copy(), list(instance.fact.node_names), raw=probs)
    return prediction, traces


def bce_loss(prediction: Prediction, labels: np.ndarray, pos_weight: float = 0.7,
             neg_weight: float = 0.3) -> Tensor:
    """Weighted binary cross-entropy summed over fact entities.

    ``pos_weight``/``neg_weight`` scale the positive and negative terms;
    predictions are clamped to [1e-12, 1-1e-12] before the log.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ModelError("labels must be 0 or 1")
    if pos_weight <= 0 or neg_weight <= 0:
        raise ModelError("loss weights must be positive")
    p = prediction.raw if prediction.raw is not None else ad.constant(prediction.probabilities)
    if labels.shape != p.values.shape:
        raise ModelError(f"labels shape {labels.shape} != predictions {p.values.shape}")
    p = ad.clip(p, ad.LOG_FLOOR, 1.0 - ad.LOG_FLOOR)
    pos = ad.mul(ad.constant(pos_weight * labels), ad.log(p))
    negative = ad.mul(ad.constant(neg_weight * (1.0 - labels)),
                      ad.log(ad.affine(p, -1.0, 1.0)))
    return ad.neg(ad.reduce_sum(ad.add(pos, negative)))


def answer_labels(instance: MultiModalGraph) -> np.ndarray:
    """0/1 label vector over fact entities from the flagged answer."""
    labels = np.zeros(instance.fact.num_nodes)
    if instance.answer_index is not None:
        labels[instance.answer_index] = 1.0
    return labels


def predict_answer(prediction: Prediction) -> tuple[int, np.ndarray]:
    """Pick the highest-probability entity; ties go to the lowest index.

    Returns (best index, full ranking as a probability-sorted index array).
    """
    if prediction.probabilities.size == 0:
        raise ModelError("no entities to choose from")
    ranking = np.argsort(-prediction.probabilities, kind="stable")
    return int(ranking[0]), ranking


def config_for_variant(config: ModelConfig, variant: str) -> ModelConfig:
    """Model-side ablation switches (the data-side ones live in graphs.py)."""
    if variant == "v2f_concat":
        return replace(config, visual_message_mode="mean")
    if variant == "s2f_concat":
        return replace(config, semantic_message_mode="mean")
    if variant == "both_concat":
        return replace(config, visual_message_mode="mean", semantic_message_mode="mean")
    raise ModelError(f"unknown model variant {variant!r}")
