"""Deliberately naive dense re-implementation of the reasoning forward pass.

Everything here is plain numpy with explicit per-node/per-edge loops and no
tape, no batching and no stability tricks. It reads parameters by their
public names and must stay independent of the production code paths so it
can serve as an equivalence oracle.
"""

from __future__ import annotations

import math

import numpy as np


def _lin(x, params, name):
    w = params[f"{name}.w"].values
    y = x @ w
    if f"{name}.b" in params:
        y = y + params[f"{name}.b"].values
    return y


def _softmax_plain(logits):
    e = [math.exp(v) for v in logits]
    s = sum(e)
    return np.array([v / s for v in e])


def ref_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def ref_encode_question(token_embeddings, params, hidden_dim, prefix="encoder"):
    h = np.zeros(hidden_dim)
    c = np.zeros(hidden_dim)
    for t in range(token_embeddings.shape[0]):
        z = (token_embeddings[t] @ params[f"{prefix}.in_w"].values
             + h @ params[f"{prefix}.rec_w"].values
             + params[f"{prefix}.bias"].values)
        d = hidden_dim
        i = ref_sigmoid(z[:d])
        f = ref_sigmoid(z[d:2 * d])
        g = np.tanh(z[2 * d:3 * d])
        o = ref_sigmoid(z[3 * d:])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h


def ref_node_attention(feats, q, params, prefix):
    logits = []
    for i in range(feats.shape[0]):
        u = np.tanh(_lin(feats[i], params, f"{prefix}.node_att.feat")
                    + _lin(q, params, f"{prefix}.node_att.query"))
        logits.append(float(u @ params[f"{prefix}.node_att.score"].values))
    return _softmax_plain(logits)


def ref_edge_attention(feats, edge_src, edge_dst, edge_feats, q, params, prefix):
    """Per-edge weights (normalized within each destination's in-neighborhood)
    plus the transformed neighbor features, as parallel per-edge arrays."""
    n = feats.shape[0]
    e = len(edge_src)
    vprime = np.zeros((e, params[f"{prefix}.edge_att.edge.w"].values.shape[0]))
    raw = np.zeros(e)
    for k in range(e):
        j, i = edge_src[k], edge_dst[k]
        vprime[k] = _lin(np.concatenate([feats[j], edge_feats[k]]),
                         params, f"{prefix}.edge_att.edge_in")
        qprime = _lin(np.concatenate([feats[i], q]), params, f"{prefix}.edge_att.center")
        u = np.tanh(_lin(vprime[k], params, f"{prefix}.edge_att.edge")
                    + _lin(qprime, params, f"{prefix}.edge_att.query"))
        raw[k] = float(u @ params[f"{prefix}.edge_att.score"].values)
    beta = np.zeros(e)
    for i in range(n):
        members = [k for k in range(e) if edge_dst[k] == i]
        if members:
            beta[members] = _softmax_plain(raw[members])
    return beta, vprime


def ref_intra_modal(feats, layer, q, params, prefix):
    n = feats.shape[0]
    alpha = ref_node_attention(feats, q, params, prefix)
    beta, vprime = ref_edge_attention(feats, layer.edge_src, layer.edge_dst,
                                      layer.edge_feats, q, params, prefix)
    updated = np.zeros((n, params[f"{prefix}.update.w"].values.shape[1]))
    messages = np.zeros((n, vprime.shape[1] if len(vprime) else updated.shape[1]))
    for i in range(n):
        m = np.zeros(messages.shape[1])
        for k in range(len(layer.edge_src)):
            if layer.edge_dst[k] == i:
                m = m + beta[k] * vprime[k]
        messages[i] = m
        updated[i] = np.maximum(
            _lin(np.concatenate([m, alpha[i] * feats[i]]), params, f"{prefix}.update"), 0.0)
    return updated, alpha, beta, messages


def ref_cross_modal(source, fact, q, params, prefix, mode="attention"):
    nf = fact.shape[0]
    if source is None or source.shape[0] == 0:
        return np.zeros((nf, fact.shape[1])), None
    ns = source.shape[0]
    if mode == "mean":
        pooled = source.mean(axis=0)
        return np.tile(pooled, (nf, 1)), None
    gamma = np.zeros((nf, ns))
    messages = np.zeros((nf, source.shape[1]))
    for i in range(nf):
        logits = []
        for j in range(ns):
            u = np.tanh(_lin(source[j], params, f"{prefix}.source")
                        + _lin(np.concatenate([fact[i], q]), params, f"{prefix}.target"))
            logits.append(float(u @ params[f"{prefix}.score"].values))
        gamma[i] = _softmax_plain(logits)
        for j in range(ns):
            messages[i] = messages[i] + gamma[i, j] * source[j]
    return messages, gamma


def ref_gate_fuse(m_visual, m_semantic, fact, params, prefix):
    nf = fact.shape[0]
    gates = np.zeros((nf, 3 * fact.shape[1]))
    fused = np.zeros((nf, params[f"{prefix}.fuse.out.w"].values.shape[1]))
    for i in range(nf):
        cat = np.concatenate([m_visual[i], m_semantic[i], fact[i]])
        gates[i] = ref_sigmoid(_lin(cat, params, f"{prefix}.fuse.gate"))
        fused[i] = _lin(gates[i] * cat, params, f"{prefix}.fuse.out")
    return fused, gates


def ref_forward(instance, config, params):
    """Full naive forward; returns probabilities plus all intermediates."""
    q = ref_encode_question(instance.question.token_embeddings, params,
                            config.question_dim)
    layers = {"visual": instance.visual, "semantic": instance.semantic,
              "fact": instance.fact}
    feats = {}
    for tag, layer in layers.items():
        if layer.num_nodes:
            feats[tag] = np.stack([_lin(layer.node_feats[i], params, f"input_proj.{tag}")
                                   for i in range(layer.num_nodes)])
        else:
            feats[tag] = None

    record = {"steps": []}
    for step in range(config.reasoning_steps):
        sp = "step0" if config.share_step_weights else f"step{step}"
        info = {"alpha": {}, "beta": {}, "gamma": {}}
        for tag in ("visual", "semantic", "fact"):
            if feats[tag] is None:
                continue
            feats[tag], alpha, beta, _ = ref_intra_modal(feats[tag], layers[tag], q,
                                                         params, f"{sp}.{tag}")
            info["alpha"][tag] = alpha
            info["beta"][tag] = beta
        m_v, gamma_v = ref_cross_modal(feats["visual"], feats["fact"], q, params,
                                       f"{sp}.cross.visual", config.visual_message_mode)
        m_s, gamma_s = ref_cross_modal(feats["semantic"], feats["fact"], q, params,
                                       f"{sp}.cross.semantic", config.semantic_message_mode)
        info["gamma"]["visual"] = gamma_v
        info["gamma"]["semantic"] = gamma_s
        fused, gates = ref_gate_fuse(m_v, m_s, feats["fact"], params, sp)
        info["gates"] = gates
        feats["fact"], agg_alpha, agg_beta, _ = ref_intra_modal(
            fused, layers["fact"], q, params, f"{sp}.fact_agg")
        info["alpha"]["fact_aggregate"] = agg_alpha
        info["beta"]["fact_aggregate"] = agg_beta
        record["steps"].append(info)

    nf = feats["fact"].shape[0]
    probs = np.zeros(nf)
    for i in range(nf):
        hidden = np.maximum(_lin(np.concatenate([feats["fact"][i], q]),
                                 params, "classifier.hidden"), 0.0)
        probs[i] = ref_sigmoid(_lin(hidden, params, "classifier.out"))[0]
    record["probabilities"] = probs
    record["question"] = q
    return record


def ref_bce(probs, labels, a, b):
    total = 0.0
    for p, y in zip(probs, labels):
        p = min(max(p, 1e-12), 1.0 - 1e-12)
        total += a * y * math.log(p) + b * (1.0 - y) * math.log(1.0 - p)
    return -total
