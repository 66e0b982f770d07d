"""End-to-end runs: mine, train the labeler, silver-label, train, report.

``run_full_pipeline`` drives the whole method from one config: generate
the synthetic corpus, train a generation-only baseline, mine
evidentiality pairs with leave-one-out probes, train the labeling
model, silver-label the training set, train the evidentiality-guided
generator, and write evaluation artifacts. ``ablate`` reruns the
generator under four label regimes with identical seeds and data order.

Every artifact except the ``.npz`` checkpoints and the timestamp header
line of ``report.txt``/``ablation.txt`` is byte-reproducible for a
fixed config.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from . import analysis, metrics
from .config import cache_dir, dataclass_from_mapping, parse_config_file
from .corpus import (Example, EvidentialityLabel, save_examples_jsonl,
                     save_labels_jsonl)
from .labeler import (assign_silver_labels, build_labeler_training_data,
                      desk_labeler_preset, save_labeler, train_labeler)
from .loo import ModelPredictor, mine_dataset, save_mined_pairs
from .model import FusionModel, desk_model_config, load_checkpoint
from .synthetic import SyntheticSpec, generate_dataset, gold_evidence_records
from .training import (DEFAULT_LAMBDA, TrainResult, Trainer, attach_labels,
                       desk_preset, train_loop)
from .vocab import Vocab

logger = logging.getLogger(__name__)

REPORT_HEADER_PREFIX = "# generated "

ABLATION_VARIANTS = (
    "full",
    "- multi-task",
    "- silver mining",
    "- mined labeler data",
)


@dataclass(frozen=True)
class PipelineConfig:
    """One flat config for the whole run; every field is a file/CLI key."""

    task: str = "open_qa"
    n_train: int = 2000
    n_dev: int = 200
    symbols: int = 25
    n_passages: int = 10
    data_seed: int = 11
    dev_data_seed: int = 12
    seed: int = 0
    lambda_weight: float | None = None  # None -> task default
    top_n: int = 7
    total_steps: int = 1500
    learning_rate: float = 5e-3
    warmup_steps: int = 100
    batch_size: int = 32
    eval_interval: int = 250
    gold_records: int = 200     # questions whose gold evidence feeds the labeler
    mine_examples: int = 200    # questions probed by leave-one-out mining
    chunk_size: int | None = None
    negatives_per_question: int = 2
    labeler_split: float = 0.9
    labeler_epochs: int = 10
    threshold: float = 0.5
    out_dir: str = ""           # empty -> artifact cache directory

    def __post_init__(self):
        if self.task not in DEFAULT_LAMBDA:
            raise ValueError(f"unknown task {self.task!r}")
        for name in ("n_train", "n_dev", "gold_records", "mine_examples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def lambda_value(self) -> float:
        if self.lambda_weight is None:
            return DEFAULT_LAMBDA[self.task]
        return self.lambda_weight


def load_pipeline_config(path=None, **overrides) -> PipelineConfig:
    """Config file plus typed overrides (None = not set)."""
    raw = parse_config_file(path) if path is not None else {}
    return dataclass_from_mapping(PipelineConfig, raw, **overrides)


def resolve_out_dir(config: PipelineConfig) -> Path:
    return Path(config.out_dir) if config.out_dir else cache_dir()


# ---------------------------------------------------------------------------
# Shared stages
# ---------------------------------------------------------------------------


def generate_splits(config: PipelineConfig):
    """Deterministic train/dev splits with gold evidentiality labels."""
    base = SyntheticSpec(
        vocab_size=config.symbols,
        n_passages=config.n_passages,
        task=config.task,
        seed=config.data_seed,
    )
    train, train_labels = generate_dataset(base, n_examples=config.n_train)
    dev_spec = SyntheticSpec(
        vocab_size=config.symbols,
        n_passages=config.n_passages,
        task=config.task,
        seed=config.dev_data_seed,
    )
    dev, dev_labels = generate_dataset(dev_spec, n_examples=config.n_dev)
    return train, train_labels, dev, dev_labels


def dataset_vocab(examples: Sequence[Example]) -> Vocab:
    """Closed vocabulary over queries, passages, and gold outputs."""
    def texts():
        for example in examples:
            yield example.query
            for gold in example.gold_outputs:
                yield gold
            for passage in example.passages:
                yield passage.title
                yield passage.text
    return Vocab.build(texts())

def train_generator(config: PipelineConfig, vocab: Vocab,
                    train: Sequence[Example],
                    labels: Sequence[EvidentialityLabel] | None,
                    dev: Sequence[Example],
                    lambda_: float, out_dir) -> tuple[FusionModel, TrainResult]:
    """Train one generator and return its best-dev state."""
    model = FusionModel(desk_model_config(config.task, len(vocab),
                                          seed=config.seed), vocab)
    schedule = desk_preset(
        config.task,
        lambda_=lambda_,
        top_n=config.top_n,
        total_steps=config.total_steps,
        learning_rate=config.learning_rate,
        warmup_steps=config.warmup_steps,
        batch_size=config.batch_size,
        eval_interval=config.eval_interval,
        seed=config.seed,
    )
    result = train_loop(model, attach_labels(train, labels),
                        attach_labels(dev, None), schedule, out_dir)
    return load_checkpoint(result.checkpoint_path), result


def _trainer_for(model: FusionModel, config: PipelineConfig,
                 lambda_: float) -> Trainer:
    schedule = desk_preset(config.task, lambda_=lambda_, top_n=config.top_n,
                           seed=config.seed)
    return Trainer(model, schedule)


def mine_silver_pairs(config: PipelineConfig, base_model: FusionModel,
                      train: Sequence[Example], out_dir: Path):
    """Leave-one-out mining over a train prefix with the baseline model."""
    predictor = ModelPredictor(base_model)
    subset = train[: config.mine_examples]
    pairs, verdicts = mine_dataset(
        predictor, subset, chunk_size=config.chunk_size,
        verdict_log_path=out_dir / "loo_verdicts.jsonl")
    save_mined_pairs(pairs, out_dir / "mined_pairs.jsonl")
    return pairs, verdicts


def fit_labeler(config: PipelineConfig, train: Sequence[Example],
                train_labels: Sequence[EvidentialityLabel],
                pairs, out_dir: Path, *, use_mined: bool = True):
    """Train the labeling model from gold evidence records plus mined pairs."""
    records = gold_evidence_records(list(train[: config.gold_records]),
                                    list(train_labels))
    mined = list(pairs) if use_mined else []
    instances, dev_instances = build_labeler_training_data(
        records, mined=mined, examples=train,
        negatives_per_question=config.negatives_per_question,
        split=config.labeler_split, seed=config.seed)
    labeler, history = train_labeler(
        instances, dev_instances,
        desk_labeler_preset(epochs=config.labeler_epochs, seed=config.seed))
    if out_dir is not None:
        save_labeler(labeler, out_dir / "labeler.npz")
        _write_json(out_dir / "labeler_history.json", history)
    return labeler, history


def evidentiality_predictions(model: FusionModel,
                              examples: Sequence[Example]) -> list[EvidentialityLabel]:
    """Model-predicted labels for every passage of every example."""
    labels = []
    for example in examples:
        fused = model.encode_passages(example.query, example.passages)
        for rank, label, _prob in model.predict_evidentiality(fused):
            labels.append(EvidentialityLabel(
                example_id=example.id, passage_rank=rank, label=label,
                provenance="silver"))
    return labels


# ---------------------------------------------------------------------------
# Report writers
# ---------------------------------------------------------------------------


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_report(path, body: str) -> None:
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    Path(path).write_text(f"{REPORT_HEADER_PREFIX}{stamp}\n{body}", encoding="utf-8")


def report_body(path) -> str:
    """Report text without the timestamp header, for rerun comparisons."""
    lines = Path(path).read_text(encoding="utf-8").splitlines(keepends=True)
    if lines and lines[0].startswith(REPORT_HEADER_PREFIX):
        lines = lines[1:]
    return "".join(lines)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def run_full_pipeline(config: PipelineConfig, out_dir=None) -> dict:
    """Mine, label, train, and evaluate; returns the summary dict."""
    out = Path(out_dir) if out_dir is not None else resolve_out_dir(config) / "pipeline"
    out.mkdir(parents=True, exist_ok=True)

    logger.info("generating synthetic splits")
    train, train_labels, dev, dev_labels = generate_splits(config)
    save_examples_jsonl(train, out / "train_examples.jsonl")
    save_labels_jsonl(train_labels, out / "train_labels.jsonl")
    save_examples_jsonl(dev, out / "dev_examples.jsonl")
    save_labels_jsonl(dev_labels, out / "dev_labels.jsonl")
    vocab = dataset_vocab(list(train) + list(dev))
    _write_json(out / "vocab.json", vocab.to_list())

    logger.info("training generation-only baseline")
    base_model, base_result = train_generator(
        config, vocab, train, None, dev, 0.0, out / "base_generator")

    logger.info("mining evidentiality pairs")
    pairs, verdicts = mine_silver_pairs(config, base_model, train, out)

    logger.info("training labeling model")
    labeler, labeler_history = fit_labeler(config, train, train_labels, pairs, out)

    logger.info("silver-labeling the training set")
    silver = assign_silver_labels(labeler, train, threshold=config.threshold)
    save_labels_jsonl(silver.labels, out / "silver_labels.jsonl")

    logger.info("training evidentiality-guided generator")
    full_model, full_result = train_generator(
        config, vocab, train, silver.labels, dev, config.lambda_value,
        out / "full_generator")

    logger.info("writing evaluation artifacts")
    base_preds = dict(zip(
        (ex.id for ex in dev),
        _trainer_for(base_model, config, 0.0).predict_texts(dev)))
    full_preds = dict(zip(
        (ex.id for ex in dev),
        _trainer_for(full_model, config, config.lambda_value).predict_texts(dev)))
    _write_json(out / "dev_predictions_base.json", base_preds)
    _write_json(out / "dev_predictions_full.json", full_preds)

    base_report = metrics.evaluate_predictions(config.task, base_preds, dev)
    full_report = metrics.evaluate_predictions(config.task, full_preds, dev)
    (out / "metric_base.json").write_text(base_report.to_json() + "\n", encoding="utf-8")
    (out / "metric_full.json").write_text(full_report.to_json() + "\n", encoding="utf-8")

    predicted = evidentiality_predictions(full_model, dev)
    evid_f1 = analysis.positive_f1(predicted, dev_labels)

    summaries = []
    for example in dev:
        fused = full_model.encode_passages(example.query, example.passages)
        summaries.append(full_model.passage_attention_scores(
            fused, full_model.generate(fused)))
    attn = analysis.attention_report(summaries)
    _write_json(out / "attention_report.json", attn)

    easy, hard = analysis.split_easy_hard(dev, base_preds, full_preds)
    _write_json(out / "easy_hard.json", {"easy": easy, "hard": hard})

    mined_counts: dict[str, int] = {}
    for pair in pairs:
        key = f"{pair.label}/{pair.rule}"
        mined_counts[key] = mined_counts.get(key, 0) + 1
    silver_pos = sum(1 for l in silver.labels if l.label == "positive")

    summary = {
        "task": config.task,
        "metric": full_report.metric_name,
        "dev_base": base_report.value,
        "dev_full": full_report.value,
        "improvement": full_report.value - base_report.value,
        "best_base": {"score": base_result.best_score, "step": base_result.best_step},
        "best_full": {"score": full_result.best_score, "step": full_result.best_step},
        "evidentiality_f1": evid_f1,
        "labeler_dev_accuracy": labeler_history["best_dev_accuracy"],
        "mined_pairs": dict(sorted(mined_counts.items())),
        "n_verdicts": len(verdicts),
        "silver_positive_fraction": silver_pos / len(silver.labels),
        "n_easy": len(easy),
        "n_hard": len(hard),
        "config": {k: v for k, v in asdict(config).items()},
    }
    _write_json(out / "summary.json", summary)

    rows = [
        {"model": "evidentiality-guided", "dev": full_report.value,
         "best step": full_result.best_step},
        {"model": "generation-only", "dev": base_report.value,
         "best step": base_result.best_step},
    ]
    body = (
        f"task: {config.task}  metric: {full_report.metric_name}  "
        f"n_dev: {len(dev)}\n\n"
        + analysis.format_table(rows, ["model", "dev", "best step"])
        + "\nevidentiality F1 (dev): "
        + f"{evid_f1:.4f}\n"
        + f"easy/hard split: {len(easy)}/{len(hard)}\n"
    )
    _write_report(out / "report.txt", body)
    return summary


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------


def ablate(config: PipelineConfig, out_dir=None) -> list[dict]:
    """Four-variant label-source ablation with shared seeds and data order.

    Variants: the full method; generation-only training; the
    answer-string heuristic replacing the trained labeling model; and a
    labeling model trained without mined pairs.
    """
    out = Path(out_dir) if out_dir is not None else resolve_out_dir(config) / "ablation"
    out.mkdir(parents=True, exist_ok=True)

    train, train_labels, dev, dev_labels = generate_splits(config)
    vocab = dataset_vocab(list(train) + list(dev))
    lam = config.lambda_value
    metric_name = metrics.task_metric_name(config.task)

    def dev_score(model: FusionModel, lambda_: float) -> float:
        preds = dict(zip((ex.id for ex in dev),
                         _trainer_for(model, config, lambda_).predict_texts(dev)))
        return metrics.evaluate_predictions(config.task, preds, dev).value

    logger.info("ablation: generation-only baseline")
    base_model, _ = train_generator(
        config, vocab, train, None, dev, 0.0, out / "variant_multi_task_off")
    base_value = dev_score(base_model, 0.0)

    logger.info("ablation: leave-one-out mining")
    pairs, _verdicts = mine_silver_pairs(config, base_model, train, out)

    logger.info("ablation: full method")
    labeler_full, _ = fit_labeler(config, train, train_labels, pairs, None)
    silver_full = assign_silver_labels(labeler_full, train, threshold=config.threshold)
    full_model, _ = train_generator(
        config, vocab, train, silver_full.labels, dev, lam, out / "variant_full")
    full_value = dev_score(full_model, lam)

    logger.info("ablation: heuristic labels instead of the labeling model")
    heuristic = analysis.heuristic_evidentiality_labels(train)
    heur_model, _ = train_generator(
        config, vocab, train, heuristic, dev, lam, out / "variant_silver_mining_off")
    heur_value = dev_score(heur_model, lam)

    logger.info("ablation: labeling model without mined pairs")
    labeler_gold, _ = fit_labeler(config, train, train_labels, pairs, None,
                                  use_mined=False)
    silver_gold = assign_silver_labels(labeler_gold, train, threshold=config.threshold)
    nomine_model, _ = train_generator(
        config, vocab, train, silver_gold.labels, dev, lam,
        out / "variant_mined_data_off")
    nomine_value = dev_score(nomine_model, lam)

    rows = [
        {"variant": ABLATION_VARIANTS[0], "metric": metric_name, "dev": full_value,
         "labels": "labeling model over gold evidence + mined pairs"},
        {"variant": ABLATION_VARIANTS[1], "metric": metric_name, "dev": base_value,
         "labels": "none (generation loss only)"},
        {"variant": ABLATION_VARIANTS[2], "metric": metric_name, "dev": heur_value,
         "labels": "answer-string heuristic"},
        {"variant": ABLATION_VARIANTS[3], "metric": metric_name, "dev": nomine_value,
         "labels": "labeling model over gold evidence only"},
    ]
    _write_json(out / "ablation.json", rows)
    _write_report(out / "ablation.txt",
                  analysis.format_table(rows, ["variant", "metric", "dev", "labels"]))
    return rows
