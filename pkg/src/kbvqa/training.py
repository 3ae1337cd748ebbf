"""Optimization loop: weighted BCE, Adam, warm-up plus cosine annealing.

Batches group whole instances and gradients average over the batch; the loss
itself sums over each instance's fact entities. Training is bitwise
reproducible given (seed, dataset, configs) in a single-threaded run: the
seed drives parameter init, epoch shuffling and dropout masks.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import graphs
from .autodiff import ParamStore
from .model import ModelConfig, answer_labels, bce_loss, forward, init_params, predict_answer


class TrainingError(ValueError):
    """Invalid training configuration or dataset."""


@dataclass
class TrainingConfig:
    """Optimizer and schedule settings.

    ``lr_max``/``lr_min`` may be zero together (degenerate schedule used by
    smoke tests); otherwise all rates are positive and warm-up must end
    before the run does.
    """

    epochs: int = 20
    batch_size: int = 64
    pos_weight: float = 0.7
    neg_weight: float = 0.3
    lr_max: float = 1e-3
    lr_min: float = 3.6e-4
    warmup_epochs: int = 2
    warmup_factor: float = 0.2
    dropout: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")
        if self.pos_weight <= 0 or self.neg_weight <= 0:
            raise TrainingError("loss weights must be positive")
        if self.lr_max < 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise TrainingError("need 0 <= lr_min <= lr_max")
        if not 0 < self.warmup_factor <= 1:
            raise TrainingError("warmup factor must be in (0, 1]")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise TrainingError("warm-up must be shorter than the whole run")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainingError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainingError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


def lr_at(step: int, total_steps: int, config: TrainingConfig) -> float:
    """Learning rate at a global step.

    Warm-up ramps linearly from ``warmup_factor * lr_max`` to ``lr_max``;
    the remaining span follows cosine annealing down to ``lr_min``. The two
    pieces agree at the boundary (both equal ``lr_max``).
    """
    if not 0 <= step < total_steps:
        raise TrainingError(f"step {step} outside [0, {total_steps})")
    warm_steps = int(round(total_steps * config.warmup_epochs / config.epochs))
    if step < warm_steps:
        return config.lr_max * (config.warmup_factor
                                + (1.0 - config.warmup_factor) * step / warm_steps)
    span = max(1, total_steps - 1 - warm_steps)
    progress = (step - warm_steps) / span
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamStore, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              grad_clip: float | None = None) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if grad_clip is not None:
            norm = float(np.linalg.norm(g))
            if norm > grad_clip:
                g = g * (grad_clip / norm)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainResult:
    params: ParamStore
    loss_curve: list[float]
    lr_curve: list[float]
    seconds: float


def train(instances: list[graphs.MultiModalGraph], model_config: ModelConfig,
          config: TrainingConfig, params: ParamStore | None = None,
          log= None) -> TrainResult:
    """Fit the reasoning network on prepared instances.

    Every instance must carry exactly one flagged answer entity (checked up
    front). Returns the trained parameters plus the per-epoch mean loss.
    """
    if not instances:
        raise TrainingError("training set is empty")
    for inst in instances:
        if inst.answer_index is None:
            raise TrainingError(
                f"instance {inst.instance_id or '?'} has no answer entity in its fact graph")

    model_config = replace(model_config, dropout=config.dropout)
    if params is None:
        params = init_params(model_config, config.seed)
    rng = np.random.default_rng(config.seed)

    steps_per_epoch = math.ceil(len(instances) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    state = AdamState()
    loss_curve: list[float] = []
    lr_curve: list[float] = []
    started = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(instances))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            params.zero_grads()
            with ad.Tape() as tape:
                total = ad.constant(0.0)
                for idx in batch:
                    inst = instances[idx]
                    prediction, _ = forward(inst, model_config, params, training=True,
                                            rng=rng, collect_trace=False)
                    loss = bce_loss(prediction, answer_labels(inst),
                                    config.pos_weight, config.neg_weight)
                    total = ad.add(total, loss)
                mean_loss = ad.affine(total, 1.0 / len(batch), 0.0)
            if not np.isfinite(mean_loss.values).all():
                raise TrainingError(f"non-finite loss at step {step}")
            tape.backward(mean_loss)
            lr = lr_at(step, total_steps, config)
            adam_step(params, state, lr, config.adam_beta1, config.adam_beta2,
                      config.adam_eps, config.grad_clip)
            lr_curve.append(lr)
            epoch_loss += mean_loss.item() * len(batch)
            step += 1
        loss_curve.append(epoch_loss / len(instances))
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs}: mean loss {loss_curve[-1]:.4f}")
    return TrainResult(params, loss_curve, lr_curve, time.perf_counter() - started)


@dataclass
class EvalReport:
    """Top-k accuracies plus per-instance rankings."""

    accuracies: dict[int, float]
    per_instance: list[dict]

    def __post_init__(self):
        ks = sorted(self.accuracies)
        for a, b in zip(ks, ks[1:]):
            if self.accuracies[a] > self.accuracies[b] + 1e-12:
                raise TrainingError("top-k accuracy must be non-decreasing in k")
        for k, acc in self.accuracies.items():
            if not 0.0 <= acc <= 1.0:
                raise TrainingError(f"accuracy@{k} out of range: {acc}")

    @property
    def top1(self) -> float:
        return self.accuracies[1]

    @property
    def top3(self) -> float:
        return self.accuracies.get(3, self.accuracies[max(self.accuracies)])

    def to_dict(self) -> dict:
        return {"accuracies": {str(k): v for k, v in self.accuracies.items()},
                "per_instance": self.per_instance}


def evaluate(instances: list[graphs.MultiModalGraph], params: ParamStore,
             model_config: ModelConfig, ks: tuple[int, ...] = (1, 3)) -> EvalReport:
    """Count an instance correct at k when its answer ranks in the top k.

    Dropout is off; instances without a known answer never count as correct.
    """
    if not instances:
        raise TrainingError("evaluation set is empty")
    hits = {k: 0 for k in ks}
    per_instance = []
    for inst in instances:
        prediction, _ = forward(inst, model_config, params, training=False,
                                collect_trace=False)
        best, ranking = predict_answer(prediction)
        answer_rank = None
        if inst.answer_index is not None:
            answer_rank = int(np.where(ranking == inst.answer_index)[0][0])
            for k in ks:
                if answer_rank < k:
                    hits[k] += 1
        per_instance.append({
            "id": inst.instance_id,
            "predicted": prediction.entities[best],
            "ranking": [prediction.entities[i] for i in ranking],
            "answer_rank": answer_rank,
        })
    n = len(instances)
    return EvalReport({k: hits[k] / n for k in ks}, per_instance)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    "full",
    "no_semantic",
    "no_visual",
    "no_visual_semantic",
    "s2f_concat",
    "v2f_concat",
    "both_concat",
    "no_relations",
)


def apply_variant(instances: list[graphs.MultiModalGraph], model_config: ModelConfig,
                  variant: str) -> tuple[list[graphs.MultiModalGraph], ModelConfig]:
    """Rewrite instances and/or the model config for one ablation variant."""
    from .model import config_for_variant

    if variant == "full":
        return instances, model_config
    if variant == "no_semantic":
        return [graphs.drop_layer(i, graphs.SEMANTIC) for i in instances], model_config
    if variant == "no_visual":
        return [graphs.drop_layer(i, graphs.VISUAL) for i in instances], model_config
    if variant == "no_visual_semantic":
        stripped = [graphs.drop_layer(graphs.drop_layer(i, graphs.VISUAL), graphs.SEMANTIC)
                    for i in instances]
        return stripped, model_config
    if variant == "no_relations":
        return [graphs.zero_edge_features(i) for i in instances], model_config
    if variant in ("v2f_concat", "s2f_concat", "both_concat"):
        return instances, config_for_variant(model_config, variant)
    raise TrainingError(f"unknown ablation variant {variant!r}")


def ablation_run(train_instances: list[graphs.MultiModalGraph],
                 test_instances: list[graphs.MultiModalGraph],
                 model_config: ModelConfig, config: TrainingConfig,
                 variants: tuple[str, ...] = ABLATION_VARIANTS,
                 log=None) -> dict[str, EvalReport]:
    """Train and evaluate each variant from the same seed; returns a report table."""
    reports: dict[str, EvalReport] = {}
    for variant in variants:
        if variant not in ABLATION_VARIANTS:
            raise TrainingError(f"unknown ablation variant {variant!r}")
        var_train, var_model = apply_variant(train_instances, model_config, variant)
        var_test, _ = apply_variant(test_instances, model_config, variant)
        result = train(var_train, var_model, config)
        reports[variant] = evaluate(var_test, result.params, var_model)
        if log is not None:
            log(f"{variant}: top1={reports[variant].top1:.3f} top3={reports[variant].top3:.3f}")
    return reports
