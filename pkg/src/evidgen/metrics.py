"""Task evaluation metrics: exact match, token F1, accuracy, top-k recall.

Exact match and token F1 follow the SQuAD convention for answer
normalization (lowercase, strip punctuation, drop the articles a/an/the,
collapse whitespace). Token F1 applies the same normalization to both
sides before splitting on whitespace.
"""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import FACT_VERIFICATION_CLASSES, Example, ValidationError

logger = logging.getLogger(__name__)

_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_PUNC_TABLE = str.maketrans("", "", string.punctuation)


@dataclass
class MetricReport:
    """Mean of per-example scores over ``count`` scored examples."""

    metric_name: str
    value: float
    count: int

    def to_json(self) -> str:
        return json.dumps(
            {"metric": self.metric_name, "value": self.value, "count": self.count},
            sort_keys=True,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    s = s.lower().translate(_PUNC_TABLE)
    s = _ARTICLES_RE.sub(" ", s)
    return " ".join(s.split())


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    """1 iff the normalized prediction equals any normalized gold."""
    if not golds:
        raise ValidationError("exact_match needs at least one gold answer")
    norm = normalize_answer(prediction)
    return int(any(norm == normalize_answer(g) for g in golds))


def _f1_single(prediction: str, gold: str) -> float:
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, golds: Sequence[str]) -> float:
    """Max over golds of the token-overlap F1 on normalized tokens."""
    if not golds:
        raise ValidationError("token_f1 needs at least one gold answer")
    return max(_f1_single(prediction, g) for g in golds)


def accuracy(prediction: str, golds: Sequence[str]) -> int:
    """1 iff the prediction equals any gold class, case-insensitively.

    Predictions outside the label set score 0 and are logged, not raised.
    """
    if not golds:
        raise ValidationError("accuracy needs at least one gold answer")
    pred = prediction.strip().lower()
    if pred not in tuple(c.lower() for c in FACT_VERIFICATION_CLASSES):
        # expected in bulk during leave-one-out runs; keep it quiet
        logger.debug("prediction %r is not a known verification class", prediction)
        return 0
    return int(any(pred == g.strip().lower() for g in golds))


def task_metric_name(task: str) -> str:
    return {"open_qa": "exact_match", "fact_verification": "accuracy", "dialogue": "token_f1"}[task]


def score_prediction(task: str, prediction: str, golds: Sequence[str]) -> float:
    """Per-example score under the task's headline metric."""
    if task == "open_qa":
        return float(exact_match(prediction, golds))
    if task == "fact_verification":
        return float(accuracy(prediction, golds))
    if task == "dialogue":
        return token_f1(prediction, golds)
    raise ValidationError(f"unknown task {task!r}")


def top_k_recall(examples: Sequence[Example], k: int, mode: str = "answer_string") -> MetricReport:
    """Fraction of examples with a hit among the top-k passages.

    ``answer_string`` counts a hit when any top-k passage text contains a
    normalized gold answer as a substring; ``provenance_title`` counts a
    hit when any top-k passage title appears in the example's
    ``metadata["provenance_titles"]``.
    """
    if mode not in ("answer_string", "provenance_title"):
        raise ValidationError(f"unknown top-k recall mode {mode!r}")
    if not examples:
        raise ValidationError("top_k_recall needs at least one example")
    if k < 1:
        raise ValidationError("k must be positive")
    min_passages = min(ex.n_passages for ex in examples)
    if k > min_passages:
        raise ValidationError(f"k={k} exceeds the minimum passage count {min_passages}")

    hits = 0
    for ex in examples:
        top = ex.passages[:k]
        if mode == "answer_string":
            golds = [normalize_answer(g) for g in ex.gold_outputs]
            golds = [g for g in golds if g]
            hit = any(g in normalize_answer(p.text) for p in top for g in golds)
        else:
            titles = (ex.metadata or {}).get("provenance_titles")
            if not titles:
                raise ValidationError(
                    f"example {ex.id!r} has no provenance_titles metadata "
                    "(required for provenance_title mode)"
                )
            hit = any(p.title in titles for p in top)
        hits += int(hit)
    return MetricReport(f"top{k}_recall_{mode}", hits / len(examples), len(examples))


def evaluate_predictions(
    task: str, predictions: dict[str, str], examples: Sequence[Example]
) -> MetricReport:
    """Mean task metric of ``predictions`` (example id -> text) over examples."""
    missing = [ex.id for ex in examples if ex.id not in predictions]
    if missing:
        raise ValidationError(
            f"{len(missing)} example(s) have no prediction: " + ", ".join(missing[:10])
        )
    scores = [score_prediction(task, predictions[ex.id], ex.gold_outputs) for ex in examples]
    value = sum(scores) / len(scores) if scores else 0.0
    return MetricReport(task_metric_name(task), value, len(scores))
