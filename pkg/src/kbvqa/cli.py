"""Command-line surface: gen / train / eval / predict / trace / sweep / ablate.

Every failure path prints a single machine-parsable line ``ERR_<CODE>: msg``
to stderr and exits nonzero. Configuration comes from an optional JSON file
(``model`` / ``training`` / ``retrieval`` sections) with a few common flags
as overrides.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .autodiff import CheckpointError
from .dataio import (DataError, Dataset, RetrievalConfig, build_relation_classifier,
                     load_dataset, prepare_instances, split_by_fold)
from .graphs import GraphError
from .model import ModelConfig, ModelError, expected_shapes, forward, predict_answer
from .retrieval import RetrievalError
from .synthetic import SyntheticError, SyntheticSpec, generate_synthetic
from .trace import export_trace
from .training import (ABLATION_VARIANTS, TrainingConfig, TrainingError, ablation_run,
                       evaluate, train)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_ERROR_CODES = [
    (UsageError, "ERR_USAGE", 2),
    (DataError, "ERR_DATA", 1),
    (SyntheticError, "ERR_DATA", 1),
    (GraphError, "ERR_DATA", 1),
    (RetrievalError, "ERR_DATA", 1),
    (CheckpointError, "ERR_CHECKPOINT", 1),
    (ModelError, "ERR_CONFIG", 1),
    (TrainingError, "ERR_CONFIG", 1),
    (OSError, "ERR_IO", 1),
]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kbvqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--num-instances", type=int, default=2500)
    gen.add_argument("--entities", type=int, default=8)
    gen.add_argument("--visual-cue-rate", type=float, default=1.0)
    gen.add_argument("--semantic-cue-rate", type=float, default=1.0)
    gen.add_argument("--noise-facts", type=int, default=300)
    gen.add_argument("--word-dim", type=int, default=16)
    gen.add_argument("--folds", type=int, default=5)
    gen.add_argument("--seed", type=int, default=0)

    def common(p, checkpoint_required=False):
        p.add_argument("--dataset", required=True, help="dataset directory")
        p.add_argument("--config", help="JSON config file (model/training/retrieval)")
        p.add_argument("--seed", type=int, help="override training seed")
        p.add_argument("--test-fold", type=int, default=0)
        if checkpoint_required:
            p.add_argument("--checkpoint", required=True, help="parameter checkpoint")

    tr = sub.add_parser("train", help="train on the non-test folds")
    common(tr)
    tr.add_argument("--out", required=True, help="checkpoint output path")
    tr.add_argument("--epochs", type=int, help="override epoch count")
    tr.add_argument("--report", help="write loss curve / eval JSON here")
    tr.add_argument("--skip-eval", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the test fold")
    common(ev, checkpoint_required=True)
    ev.add_argument("--report", help="write the evaluation report JSON here")

    pr = sub.add_parser("predict", help="write per-instance answers")
    common(pr, checkpoint_required=True)
    pr.add_argument("--out", required=True, help="predictions JSONL path")
    pr.add_argument("--split", choices=["test", "train", "all"], default="test")

    trc = sub.add_parser("trace", help="export reasoning traces")
    common(trc, checkpoint_required=True)
    trc.add_argument("--out", required=True, help="trace JSON path")
    trc.add_argument("--limit", type=int, default=10, help="number of test instances")
    trc.add_argument("--top-edges", type=int, default=2)
    trc.add_argument("--top-neighbors", type=int, default=4)
    trc.add_argument("--raw-gates", action="store_true")

    sw = sub.add_parser("sweep", help="reasoning-step and retrieval grids")
    common(sw)
    sw.add_argument("--out", required=True, help="sweep report JSON path")
    sw.add_argument("--steps", default="1,2,3", help="comma list of reasoning depths")
    sw.add_argument("--k-grid", default="", help="comma list of retrieval sizes")
    sw.add_argument("--m-grid", default="", help="comma list of relation-filter widths")
    sw.add_argument("--epochs", type=int, help="override epoch count per cell")

    ab = sub.add_parser("ablate", help="train/eval ablation variants")
    common(ab)
    ab.add_argument("--out", required=True, help="ablation report JSON path")
    ab.add_argument("--variants", default="all",
                    help=f"'all' or comma list from {','.join(ABLATION_VARIANTS)}")
    ab.add_argument("--epochs", type=int, help="override epoch count per variant")
    return parser


# Desk-scale defaults; a --config file overrides any of this.
_DEFAULT_MODEL = {"hidden_dim": 64, "question_dim": 64, "reasoning_steps": 2}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    unknown = set(data) - {"model", "training", "retrieval"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return data


def _configs(args, dataset: Dataset) -> tuple[ModelConfig, TrainingConfig, RetrievalConfig]:
    file_cfg = _load_config(getattr(args, "config", None))
    model_dict = dict(_DEFAULT_MODEL)
    model_dict.update(file_cfg.get("model", {}))
    # The dataset manifest owns the input dimensions.
    model_dict["word_dim"] = dataset.word_dim
    model_dict["visual_dim"] = dataset.visual_dim
    model_cfg = ModelConfig.from_dict(model_dict)
    train_cfg = TrainingConfig.from_dict(file_cfg.get("training", {}))
    if getattr(args, "epochs", None):
        train_cfg = replace(train_cfg, epochs=args.epochs)
    if getattr(args, "seed", None) is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    retr_cfg = RetrievalConfig.from_dict(file_cfg.get("retrieval", {}))
    return model_cfg, train_cfg, retr_cfg


def _prepare(dataset: Dataset, retr_cfg: RetrievalConfig, test_fold: int, seed: int):
    classifier = None
    if retr_cfg.relation_filter == "trained":
        classifier = build_relation_classifier(dataset, test_fold, seed=seed)
    prepared, report = prepare_instances(dataset, retr_cfg, classifier)
    if report.dropped:
        print(f"note: dropped {len(report.dropped)} instances whose answer "
              f"did not survive retrieval", file=sys.stderr)
    return prepared, report


def _load_checkpoint_with_config(args, dataset: Dataset) -> tuple[ad.ParamStore, ModelConfig]:
    meta = ad.checkpoint_meta(args.checkpoint)
    model_dict = meta.get("model")
    if model_dict is None:
        raise CheckpointError("checkpoint has no model configuration in its meta block")
    model_cfg = ModelConfig.from_dict(model_dict)
    if model_cfg.word_dim != dataset.word_dim or model_cfg.visual_dim != dataset.visual_dim:
        raise CheckpointError("checkpoint dims do not match the dataset manifest")
    params = ad.load_checkpoint(args.checkpoint, expected_shapes(model_cfg))
    return params, model_cfg


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def cmd_gen(args) -> int:
    spec = SyntheticSpec(
        num_instances=args.num_instances, entities_per_graph=args.entities,
        visual_cue_rate=args.visual_cue_rate, semantic_cue_rate=args.semantic_cue_rate,
        noise_facts=args.noise_facts, word_dim=args.word_dim, folds=args.folds,
        seed=args.seed)
    stats = generate_synthetic(spec, args.out)
    print(f"wrote {stats['num_instances']} instances, {stats['kb_facts']} KB facts "
          f"to {stats['out_dir']}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    model_cfg, train_cfg, retr_cfg = _configs(args, dataset)
    prepared, report = _prepare(dataset, retr_cfg, args.test_fold, train_cfg.seed)
    train_split, test_split = split_by_fold(prepared, args.test_fold)
    if not train_split:
        raise TrainingError("no training instances outside the test fold")
    result = train([p.graph for p in train_split], model_cfg, train_cfg,
                   log=lambda msg: print(msg, file=sys.stderr))
    meta = {"model": model_cfg.to_dict(), "training": train_cfg.to_dict(),
            "retrieval": retr_cfg.to_dict(), "dataset": dataset.root,
            "test_fold": args.test_fold}
    ad.save_checkpoint(result.params, args.out, meta)
    summary = {"loss_curve": result.loss_curve, "seconds": result.seconds,
               "dropped": report.to_dict()["dropped"]}
    if test_split and not args.skip_eval:
        eval_report = evaluate([p.graph for p in test_split], result.params, model_cfg)
        summary["eval"] = eval_report.to_dict()["accuracies"]
        print(f"test top1={eval_report.top1:.4f} top3={eval_report.top3:.4f}")
    if args.report:
        _write_json(args.report, summary)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    params, model_cfg = _load_checkpoint_with_config(args, dataset)
    _, _, retr_cfg = _configs(args, dataset)
    prepared, _ = _prepare(dataset, retr_cfg, args.test_fold, seed=0)
    _, test_split = split_by_fold(prepared, args.test_fold)
    if not test_split:
        raise DataError(f"no instances in test fold {args.test_fold}")
    report = evaluate([p.graph for p in test_split], params, model_cfg)
    print(f"top1={report.top1:.4f} top3={report.top3:.4f} n={len(test_split)}")
    if args.report:
        _write_json(args.report, {"format_version": 1, **report.to_dict()})
    return 0


def cmd_predict(args) -> int:
    dataset = load_dataset(args.dataset)
    params, model_cfg = _load_checkpoint_with_config(args, dataset)
    _, _, retr_cfg = _configs(args, dataset)
    prepared, _ = _prepare(dataset, retr_cfg, args.test_fold, seed=0)
    train_split, test_split = split_by_fold(prepared, args.test_fold)
    chosen = {"test": test_split, "train": train_split, "all": prepared}[args.split]
    with open(args.out, "w") as fh:
        for p in chosen:
            prediction, _ = forward(p.graph, model_cfg, params, collect_trace=False)
            best, ranking = predict_answer(prediction)
            fh.write(json.dumps({
                "id": p.id,
                "answer": prediction.entities[best],
                "ranking": [prediction.entities[i] for i in ranking[:5]],
            }) + "\n")
    print(f"wrote {len(chosen)} predictions to {args.out}")
    return 0


def cmd_trace(args) -> int:
    dataset = load_dataset(args.dataset)
    params, model_cfg = _load_checkpoint_with_config(args, dataset)
    _, _, retr_cfg = _configs(args, dataset)
    prepared, _ = _prepare(dataset, retr_cfg, args.test_fold, seed=0)
    _, test_split = split_by_fold(prepared, args.test_fold)
    subset = test_split[:args.limit] if args.limit else test_split
    if not subset:
        raise DataError("no instances to trace")
    export_trace(subset, params, model_cfg, args.out, args.top_edges,
                 args.top_neighbors, args.raw_gates)
    print(f"wrote traces for {len(subset)} instances to {args.out}")
    return 0


def _int_list(text: str) -> list[int]:
    if not text.strip():
        return []
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from None


def cmd_sweep(args) -> int:
    dataset = load_dataset(args.dataset)
    model_cfg, train_cfg, retr_cfg = _configs(args, dataset)
    steps_grid = _int_list(args.steps)
    k_grid = _int_list(args.k_grid)
    m_grid = _int_list(args.m_grid)
    report: dict = {"format_version": 1, "reasoning_steps": [], "retrieval": []}

    prepared, _ = _prepare(dataset, retr_cfg, args.test_fold, train_cfg.seed)
    train_split, test_split = split_by_fold(prepared, args.test_fold)
    train_graphs = [p.graph for p in train_split]
    test_graphs = [p.graph for p in test_split]
    for depth in steps_grid:
        cfg = replace(model_cfg, reasoning_steps=depth)
        result = train(train_graphs, cfg, train_cfg)
        ev = evaluate(test_graphs, result.params, cfg)
        report["reasoning_steps"].append(
            {"steps": depth, "top1": ev.top1, "top3": ev.top3})
        print(f"steps={depth}: top1={ev.top1:.4f} top3={ev.top3:.4f}")

    if k_grid and m_grid:
        classifier = build_relation_classifier(dataset, args.test_fold, seed=train_cfg.seed)
        for k in k_grid:
            for m in m_grid:
                cell_cfg = replace(retr_cfg, top_k=k, top_m=m, relation_filter="trained")
                prepared, drop_report = prepare_instances(dataset, cell_cfg, classifier)
                tr, te = split_by_fold(prepared, args.test_fold)
                if not tr or not te:
                    report["retrieval"].append(
                        {"k": k, "m": m, "top1": None, "top3": None,
                         "dropped": len(drop_report.dropped)})
                    continue
                result = train([p.graph for p in tr], model_cfg, train_cfg)
                ev = evaluate([p.graph for p in te], result.params, model_cfg)
                report["retrieval"].append(
                    {"k": k, "m": m, "top1": ev.top1, "top3": ev.top3,
                     "dropped": len(drop_report.dropped)})
                print(f"k={k} m={m}: top1={ev.top1:.4f} top3={ev.top3:.4f}")

    _write_json(args.out, report)
    print(f"sweep report written to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    dataset = load_dataset(args.dataset)
    model_cfg, train_cfg, retr_cfg = _configs(args, dataset)
    if args.variants == "all":
        variants = ABLATION_VARIANTS
    else:
        variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    prepared, _ = _prepare(dataset, retr_cfg, args.test_fold, train_cfg.seed)
    train_split, test_split = split_by_fold(prepared, args.test_fold)
    reports = ablation_run([p.graph for p in train_split], [p.graph for p in test_split],
                           model_cfg, train_cfg, variants,
                           log=lambda msg: print(msg, file=sys.stderr))
    payload = {"format_version": 1,
               "rows": [{"variant": v, "top1": r.top1, "top3": r.top3}
                        for v, r in reports.items()]}
    _write_json(args.out, payload)
    for row in payload["rows"]:
        print(f"{row['variant']}: top1={row['top1']:.4f} top3={row['top3']:.4f}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "trace": cmd_trace,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single diagnostic line per failure
        for exc_type, code, status in _ERROR_CODES:
            if isinstance(exc, exc_type):
                print(f"{code}: {exc}", file=sys.stderr)
                return status
        raise


if __name__ == "__main__":
    sys.exit(main())
