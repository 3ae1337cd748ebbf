"""Reasoning-trace export: attention weights, gate values, entity ranking.

The trace JSON is the rendering boundary; plotting is a consumer's concern.
Per instance and step it carries every attention distribution (node, edge,
cross-modal), per-entity gate summaries (mean gate activation over the
visual-message, semantic-message and entity segments), and the top attended
neighbors at configurable cutoffs.
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import ParamStore
from .dataio import PreparedInstance
from .graphs import SEMANTIC, VISUAL
from .model import ModelConfig, StepTrace, forward, predict_answer

TRACE_VERSION = 1


def _gate_summary(gates: np.ndarray, hidden_dim: int) -> list[dict]:
    segments = {"visual": slice(0, hidden_dim),
                "semantic": slice(hidden_dim, 2 * hidden_dim),
                "entity": slice(2 * hidden_dim, 3 * hidden_dim)}
    return [{name: float(row[span].mean()) for name, span in segments.items()}
            for row in gates]


def _edge_entries(layer, beta: np.ndarray) -> list[dict]:
    return [{"src": int(s), "dst": int(d), "weight": float(w)}
            for s, d, w in zip(layer.edge_src, layer.edge_dst, beta)]


def _top_attended(instance, step: StepTrace, predicted: int,
                  top_edges: int, top_neighbors: int) -> dict:
    layers = {VISUAL: instance.visual, SEMANTIC: instance.semantic, "fact": instance.fact}
    top_nodes = {}
    for tag, alpha in step.node_attention.items():
        if tag == "fact_aggregate" or alpha.size == 0:
            continue
        order = np.argsort(-alpha, kind="stable")[:top_neighbors]
        top_nodes[tag] = [{"node": int(i), "weight": float(alpha[i])} for i in order]
    top_arcs = {}
    for tag, beta in step.edge_attention.items():
        if tag == "fact_aggregate" or beta.size == 0:
            continue
        layer = layers[tag]
        per_center: dict[int, list] = {}
        for s, d, w in zip(layer.edge_src, layer.edge_dst, beta):
            per_center.setdefault(int(d), []).append((float(w), int(s)))
        top_arcs[tag] = {
            str(d): [{"src": s, "weight": w}
                     for w, s in sorted(entries, key=lambda e: -e[0])[:top_edges]]
            for d, entries in per_center.items()}
    cross_top = {}
    for tag, gamma in step.cross_attention.items():
        if gamma is None:
            cross_top[tag] = None
            continue
        row = gamma[predicted]
        order = np.argsort(-row, kind="stable")[:top_neighbors]
        cross_top[tag] = [{"node": int(i), "weight": float(row[i])} for i in order]
    return {"nodes": top_nodes, "edges": top_arcs, "cross_for_predicted": cross_top}


def trace_instance(prepared: PreparedInstance, params: ParamStore, config: ModelConfig,
                   top_edges: int = 2, top_neighbors: int = 4,
                   include_raw_gates: bool = False) -> dict:
    """Run a deterministic forward (dropout off) and serialize its step traces."""
    instance = prepared.graph
    prediction, steps = forward(instance, config, params, training=False, collect_trace=True)
    best, ranking = predict_answer(prediction)
    entry = {
        "id": prepared.id,
        "predicted": prediction.entities[best],
        "answer": (instance.fact.node_names[instance.answer_index]
                   if instance.answer_index is not None else None),
        "ranking": [{"entity": prediction.entities[i],
                     "probability": float(prediction.probabilities[i])} for i in ranking],
        "steps": [],
    }
    for step in steps:
        layers = {VISUAL: instance.visual, SEMANTIC: instance.semantic,
                  "fact": instance.fact, "fact_aggregate": instance.fact}
        step_entry = {
            "node_attention": {tag: [float(v) for v in alpha]
                               for tag, alpha in step.node_attention.items()},
            "edge_attention": {tag: _edge_entries(layers[tag], beta)
                               for tag, beta in step.edge_attention.items()},
            "cross_attention": {tag: (gamma.tolist() if gamma is not None else None)
                                for tag, gamma in step.cross_attention.items()},
            "gates": _gate_summary(step.gates, config.hidden_dim),
            "top_attended": _top_attended(instance, step, best, top_edges, top_neighbors),
        }
        if include_raw_gates:
            step_entry["gates_raw"] = step.gates.tolist()
        entry["steps"].append(step_entry)
    return entry


def export_trace(prepared: list[PreparedInstance], params: ParamStore, config: ModelConfig,
                 path: str, top_edges: int = 2, top_neighbors: int = 4,
                 include_raw_gates: bool = False) -> dict:
    payload = {
        "format_version": TRACE_VERSION,
        "hidden_dim": config.hidden_dim,
        "instances": [trace_instance(p, params, config, top_edges, top_neighbors,
                                     include_raw_gates)
                      for p in prepared],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
    return payload
