"""Analysis utilities: heuristic labels, easy/hard splits, attention reports.

The answer-string heuristic is the degraded labeling baseline used by
the ablation harness: a passage is positive iff a normalized gold
output occurs inside the normalized passage text. By construction of
the synthetic data it marks every spurious distractor positive, which
is exactly the confusion a trained labeling model must beat.
"""

from __future__ import annotations

import json
from typing import Mapping, Sequence

import numpy as np

from . import metrics
from .corpus import Example, EvidentialityLabel, ValidationError
from .model import AttentionSummary


def heuristic_evidentiality_labels(examples: Sequence[Example]) -> list[EvidentialityLabel]:
    """Answer-string matching as a labeling model stand-in."""
    labels = []
    for example in examples:
        golds = [metrics.normalize_answer(g) for g in example.gold_outputs]
        for passage in example.passages:
            text = metrics.normalize_answer(passage.text)
            positive = any(g and g in text for g in golds)
            labels.append(EvidentialityLabel(
                example_id=example.id,
                passage_rank=passage.rank,
                label="positive" if positive else "negative",
                provenance="silver",
            ))
    return labels


def label_accuracy(predicted: Sequence[EvidentialityLabel],
                   truth: Sequence[EvidentialityLabel]) -> float:
    """Fraction of (example, rank) pairs labeled identically to the truth."""
    want = {(l.example_id, l.passage_rank): l.label for l in truth}
    scored = 0
    hit = 0
    for label in predicted:
        key = (label.example_id, label.passage_rank)
        if key not in want:
            raise ValidationError(f"predicted label for unknown pair {key}")
        scored += 1
        hit += label.label == want[key]
    if scored == 0:
        raise ValidationError("no labels to score")
    return hit / scored


def positive_f1(predicted: Sequence[EvidentialityLabel],
                truth: Sequence[EvidentialityLabel]) -> float:
    """F1 of the positive class against ground-truth labels."""
    want = {(l.example_id, l.passage_rank): l.label for l in truth}
    tp = fp = fn = 0
    for label in predicted:
        key = (label.example_id, label.passage_rank)
        if key not in want:
            raise ValidationError(f"predicted label for unknown pair {key}")
        gold = want[key]
        if label.label == "positive" and gold == "positive":
            tp += 1
        elif label.label == "positive" and gold == "negative":
            fp += 1
        elif label.label == "negative" and gold == "positive":
            fn += 1
    precision = tp / max(tp + fp, 1)
    recall = tp / max(tp + fn, 1)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def split_easy_hard(examples: Sequence[Example],
                    predictions_a: Mapping[str, str],
                    predictions_b: Mapping[str, str]) -> tuple[list[str], list[str]]:
    """Partition ids: easy iff both prediction sets answer correctly.

    Correct means a perfect per-example score under the task's headline
    metric. Both prediction mappings must cover exactly the given
    examples.
    """
    ids = [example.id for example in examples]
    for name, preds in (("first", predictions_a), ("second", predictions_b)):
        missing = sorted(set(ids) - set(preds))
        extra = sorted(set(preds) - set(ids))
        if missing or extra:
            raise ValidationError(
                f"{name} prediction file id mismatch: missing {missing[:5]}, "
                f"unexpected {extra[:5]}"
            )
    easy, hard = [], []
    for example in examples:
        a = metrics.score_prediction(example.task, predictions_a[example.id],
                                     example.gold_outputs)
        b = metrics.score_prediction(example.task, predictions_b[example.id],
                                     example.gold_outputs)
        (easy if a == 1.0 and b == 1.0 else hard).append(example.id)
    return easy, hard


def attention_report(summaries: Sequence[AttentionSummary], bins: int = 10) -> dict:
    """Aggregate cross-attention mass statistics over examples.

    Reports a histogram of per-passage attention mass, the distribution
    of the retriever rank that receives the most mass, and the fraction
    of examples whose top-attended passage sits beyond retriever rank
    10.
    """
    if not summaries:
        raise ValidationError("attention_report needs at least one summary")
    masses = []
    argmax_ranks = []
    for summary in summaries:
        masses.extend(summary.per_passage_mass)
        top = int(np.argmax(summary.per_passage_mass))
        argmax_ranks.append(summary.passage_ranks[top])
    counts, edges = np.histogram(np.asarray(masses), bins=bins, range=(0.0, 1.0))
    rank_counts: dict[str, int] = {}
    for rank in argmax_ranks:
        rank_counts[str(rank)] = rank_counts.get(str(rank), 0) + 1
    beyond = sum(1 for rank in argmax_ranks if rank > 10) / len(argmax_ranks)
    return {
        "mass_histogram": {
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        },
        "argmax_rank_counts": dict(sorted(rank_counts.items(), key=lambda kv: int(kv[0]))),
        "fraction_argmax_beyond_rank_10": beyond,
        "n_examples": len(argmax_ranks),
    }


def format_table(rows: Sequence[Mapping[str, object]], columns: Sequence[str]) -> str:
    """Aligned plain-text table with a header rule."""
    def cell(value: object) -> str:
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    grid = [[cell(row.get(col, "")) for col in columns] for row in rows]
    widths = [max(len(col), *(len(r[i]) for r in grid)) if grid else len(col)
              for i, col in enumerate(columns)]
    header = "  ".join(col.ljust(widths[i]) for i, col in enumerate(columns))
    rule = "  ".join("-" * w for w in widths)
    lines = [header, rule]
    lines.extend("  ".join(r[i].ljust(widths[i]) for i in range(len(columns)))
                 for r in grid)
    return "\n".join(lines) + "\n"


def save_json_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
