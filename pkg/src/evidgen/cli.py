"""Command-line interface.

Subcommands cover the full workflow: synthesize data, train
generators, mine evidentiality pairs, train the labeling model, assign
silver labels, evaluate predictions, split dev sets by difficulty,
summarize attention, and run the pipeline or the ablation harness.

Exit codes: 0 on success, 2 on usage errors (argparse), 1 on anything
else — with a machine-readable ``{"error", "message"}`` JSON object on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, metrics, pipeline
from .config import ConfigError
from .corpus import (CorpusError, load_examples_jsonl, load_labels_jsonl,
                     save_examples_jsonl, save_labels_jsonl)
from .labeler import (build_labeler_training_data, desk_labeler_preset,
                      load_labeler, save_labeler, train_labeler)
from .loo import (MiningError, ModelPredictor, PredictionLogPredictor,
                  load_mined_pairs, mine_dataset, save_mined_pairs)
from .model import load_checkpoint
from .synthetic import SyntheticSpec, generate_dataset, gold_evidence_records
from .labeler import assign_silver_labels

logger = logging.getLogger(__name__)


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _dump_json(payload, path=None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else pipeline.resolve_out_dir(
        pipeline.PipelineConfig())
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pipeline_config(args) -> pipeline.PipelineConfig:
    return pipeline.load_pipeline_config(
        args.config,
        seed=args.seed,
        task=args.task,
        lambda_weight=getattr(args, "lambda_weight", None),
        top_n=getattr(args, "top_n", None),
        chunk_size=getattr(args, "chunk_size", None),
        threshold=getattr(args, "threshold", None),
        out_dir=args.out,
    )


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        vocab_size=args.symbols,
        n_passages=args.n_passages,
        seed=args.seed if args.seed is not None else 0,
        task=args.task or "open_qa",
    )
    examples, labels = generate_dataset(spec, n_examples=args.n_examples)
    out = _out_dir(args)
    save_examples_jsonl(examples, out / "examples.jsonl")
    save_labels_jsonl(labels, out / "labels.jsonl")
    _dump_json(gold_evidence_records(examples, labels), out / "records.json")
    print(f"wrote {len(examples)} examples and {len(labels)} labels to {out}")
    return 0


def _cmd_train_generator(args) -> int:
    config = _pipeline_config(args)
    out = _out_dir(args)
    if args.train:
        if not args.dev:
            raise ValueError("--train requires --dev")
        train = load_examples_jsonl(args.train)
        dev = load_examples_jsonl(args.dev)
        labels = load_labels_jsonl(args.labels) if args.labels else None
    else:
        train, gold, dev, _dev_gold = pipeline.generate_splits(config)
        labels = gold if config.lambda_value > 0 else None
    vocab = pipeline.dataset_vocab(list(train) + list(dev))
    lam = config.lambda_value
    if labels is None:
        lam = 0.0
    _model, result = pipeline.train_generator(
        config, vocab, train, labels, dev, lam, out)
    print(json.dumps({
        "best_score": result.best_score,
        "best_step": result.best_step,
        "checkpoint": result.checkpoint_path,
        "lambda": lam,
    }, sort_keys=True))
    return 0


def _cmd_mine_loo(args) -> int:
    examples = load_examples_jsonl(args.examples)
    if args.limit:
        examples = examples[: args.limit]
    if args.prediction_log:
        predictor = PredictionLogPredictor(args.prediction_log)
    elif args.checkpoint:
        predictor = ModelPredictor(load_checkpoint(args.checkpoint))
    else:
        raise ValueError("mine-loo needs --checkpoint or --prediction-log")
    out = _out_dir(args)
    pairs, verdicts = mine_dataset(
        predictor, examples, chunk_size=args.chunk_size,
        verdict_log_path=out / "loo_verdicts.jsonl")
    save_mined_pairs(pairs, out / "mined_pairs.jsonl")
    counts: dict[str, int] = {}
    for pair in pairs:
        key = f"{pair.label}/{pair.rule}"
        counts[key] = counts.get(key, 0) + 1
    print(json.dumps({"pairs": len(pairs), "verdicts": len(verdicts),
                      "by_rule": counts}, sort_keys=True))
    return 0


def _cmd_train_labeler(args) -> int:
    records = _load_json(args.records)
    mined = load_mined_pairs(args.mined) if args.mined else []
    examples = load_examples_jsonl(args.examples) if args.examples else None
    train, dev = build_labeler_training_data(
        records, mined=mined, examples=examples,
        negatives_per_question=args.negatives_per_question,
        split=args.split, seed=args.seed if args.seed is not None else 0)
    labeler, history = train_labeler(
        train, dev,
        desk_labeler_preset(seed=args.seed if args.seed is not None else 0))
    out = _out_dir(args)
    save_labeler(labeler, out / "labeler.npz")
    _dump_json(history, out / "labeler_history.json")
    print(json.dumps({"best_dev_accuracy": history["best_dev_accuracy"],
                      "train_instances": len(train), "dev_instances": len(dev)},
                     sort_keys=True))
    return 0


def _cmd_label_silver(args) -> int:
    labeler = load_labeler(args.labeler)
    examples = load_examples_jsonl(args.examples)
    threshold = args.threshold if args.threshold is not None else 0.5
    silver = assign_silver_labels(labeler, examples, threshold=threshold)
    out = _out_dir(args)
    save_labels_jsonl(silver.labels, out / "silver_labels.jsonl")
    positive = sum(1 for l in silver.labels if l.label == "positive")
    print(json.dumps({"labels": len(silver.labels), "positive": positive,
                      "threshold": threshold}, sort_keys=True))
    return 0


def _predict_with_checkpoint(path, examples, task, top_n):
    """Batched greedy predictions, grouped by visible passage count."""
    from .training import Trainer, desk_preset

    trainer = Trainer(load_checkpoint(path),
                      desk_preset(task, top_n=top_n or 10 ** 9))
    by_count: dict[int, list] = {}
    for example in examples:
        count = min(len(example.passages), trainer.config.top_n)
        by_count.setdefault(count, []).append(example)
    predictions = {}
    for _, group in sorted(by_count.items()):
        for example, text in zip(group, trainer.predict_texts(group)):
            predictions[example.id] = text
    return predictions


def _cmd_evaluate(args) -> int:
    examples = load_examples_jsonl(args.examples)
    if not examples:
        raise ValueError("no examples to evaluate")
    task = args.task or examples[0].task
    if args.predictions:
        predictions = _load_json(args.predictions)
    elif args.checkpoint:
        predictions = _predict_with_checkpoint(args.checkpoint, examples, task,
                                               args.top_n)
    else:
        raise ValueError("evaluate needs --predictions or --checkpoint")
    report = metrics.evaluate_predictions(task, predictions, examples)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metric.json").write_text(report.to_json() + "\n",
                                                    encoding="utf-8")
    print(report.to_json())
    return 0


def _cmd_split_easy_hard(args) -> int:
    examples = load_examples_jsonl(args.examples)
    preds_a = _load_json(args.predictions_a)
    preds_b = _load_json(args.predictions_b)
    easy, hard = analysis.split_easy_hard(examples, preds_a, preds_b)
    payload = {"easy": easy, "hard": hard}
    if args.out:
        out = _out_dir(args)
        _dump_json(payload, out / "easy_hard.json")
    print(json.dumps({"n_easy": len(easy), "n_hard": len(hard)}, sort_keys=True))
    return 0


def _cmd_attention_report(args) -> int:
    model = load_checkpoint(args.checkpoint)
    examples = load_examples_jsonl(args.examples)
    if args.limit:
        examples = examples[: args.limit]
    summaries = []
    for example in examples:
        fused = model.encode_passages(example.query, example.passages)
        summaries.append(model.passage_attention_scores(
            fused, model.generate(fused)))
    report = analysis.attention_report(summaries)
    if args.out:
        out = _out_dir(args)
        _dump_json(report, out / "attention_report.json")
    print(json.dumps(report, sort_keys=True))
    return 0


def _cmd_pipeline(args) -> int:
    config = _pipeline_config(args)
    summary = pipeline.run_full_pipeline(config)
    print(json.dumps({k: summary[k] for k in
                      ("task", "metric", "dev_base", "dev_full", "improvement",
                       "evidentiality_f1")}, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    config = _pipeline_config(args)
    rows = pipeline.ablate(config)
    print(analysis.format_table(rows, ["variant", "metric", "dev", "labels"]),
          end="")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evidgen",
        description="Evidentiality-guided retrieval-augmented generation toolkit.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=False, task=False, lam=False, top_n=False,
               chunk=False, threshold=False):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if config:
            p.add_argument("--config", default=None, help="key=value config file")
        if task:
            p.add_argument("--task", default=None,
                           choices=["open_qa", "fact_verification", "dialogue"])
        if lam:
            p.add_argument("--lambda", dest="lambda_weight", type=float,
                           default=None, help="evidentiality loss weight")
        if top_n:
            p.add_argument("--top-n", type=int, default=None,
                           help="passages visible to the generator")
        if chunk:
            p.add_argument("--chunk-size", type=int, default=None)
        if threshold:
            p.add_argument("--threshold", type=float, default=None,
                           help="silver labeling probability threshold")

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    common(p, task=True)
    p.add_argument("--n-examples", type=int, default=1000)
    p.add_argument("--symbols", type=int, default=25,
                   help="distinct symbols per vocabulary family")
    p.add_argument("--n-passages", type=int, default=10)
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("train-generator", help="train a fusion generator")
    common(p, config=True, task=True, lam=True, top_n=True)
    p.add_argument("--train", default=None, help="training examples JSONL")
    p.add_argument("--dev", default=None, help="dev examples JSONL")
    p.add_argument("--labels", default=None, help="evidentiality labels JSONL")
    p.set_defaults(func=_cmd_train_generator)

    p = sub.add_parser("mine-loo", help="mine labels with leave-one-out probes")
    common(p, chunk=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--checkpoint", default=None, help="generator checkpoint")
    p.add_argument("--prediction-log", default=None,
                   help="replay an offline prediction log instead")
    p.add_argument("--limit", type=int, default=None,
                   help="mine only the first N examples")
    p.set_defaults(func=_cmd_mine_loo)

    p = sub.add_parser("train-labeler", help="train the labeling model")
    common(p)
    p.add_argument("--records", required=True,
                   help="JSON question records with evidence and negatives")
    p.add_argument("--mined", default=None, help="mined pairs JSONL")
    p.add_argument("--examples", default=None,
                   help="examples JSONL used to resolve mined pairs")
    p.add_argument("--negatives-per-question", type=int, default=2)
    p.add_argument("--split", type=float, default=0.9)
    p.set_defaults(func=_cmd_train_labeler)

    p = sub.add_parser("label-silver", help="assign silver labels with a labeler")
    common(p, threshold=True)
    p.add_argument("--labeler", required=True)
    p.add_argument("--examples", required=True)
    p.set_defaults(func=_cmd_label_silver)

    p = sub.add_parser("evaluate", help="score a prediction file or checkpoint")
    common(p, task=True, top_n=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--predictions", default=None,
                   help="JSON object mapping example id to output text")
    p.add_argument("--checkpoint", default=None,
                   help="generate predictions from this checkpoint instead")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("split-easy-hard",
                       help="partition examples by agreement of two models")
    common(p)
    p.add_argument("--examples", required=True)
    p.add_argument("--predictions-a", required=True)
    p.add_argument("--predictions-b", required=True)
    p.set_defaults(func=_cmd_split_easy_hard)

    p = sub.add_parser("attention-report",
                       help="summarize cross-attention over passages")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=_cmd_attention_report)

    p = sub.add_parser("pipeline", help="run the full pipeline from a config")
    common(p, config=True, task=True, lam=True, top_n=True, chunk=True,
           threshold=True)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("ablate", help="four-variant label-source ablation")
    common(p, config=True, task=True, lam=True, top_n=True, chunk=True,
           threshold=True)
    p.set_defaults(func=_cmd_ablate)

    return parser


_EXPECTED_ERRORS = (CorpusError, ConfigError, MiningError, ValueError,
                    OSError, json.JSONDecodeError, KeyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except _EXPECTED_ERRORS as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)},
                         sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
