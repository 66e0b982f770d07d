"""Leave-one-out mining of evidentiality labels.

A trained generator answers each example repeatedly, masking one
passage of a chunk per run (passages outside the chunk are excluded
from every run of that chunk). Task-specific rules turn the resulting
flips into positive/negative passage labels: a passage whose removal
is the only thing that breaks an otherwise-correct chunk is evidence;
one whose removal is the only thing that fixes an otherwise-broken
chunk is not. Verdicts are persisted so rule evaluation can be
replayed without rerunning the generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from . import metrics
from .corpus import (
    Example,
    EvidentialityLabel,
    PassageChunk,
    chunk_passages,
)

RULE_QA = "qa"
RULE_FV_FLIP = "fv_i"
RULE_FV_ALL_INCORRECT = "fv_ii"
RULE_DIALOGUE = "dialogue"

DEFAULT_CHUNK_SIZE = {"open_qa": 10, "fact_verification": 5, "dialogue": 5}

# Masking happens within chunks: each run sees the chunk minus one
# member, never the rest of the example. Recorded in the verdict log so
# replays cannot silently assume a different scope.
MASK_SCOPE = "within-chunk"

DIALOGUE_F1_MARGIN = 0.1


class MiningError(RuntimeError):
    """A generator run failed; the chunk is aborted with context."""


@dataclass
class MaskOutcome:
    masked_rank: int
    prediction: str
    correct: bool
    f1: float | None = None


@dataclass
class LooVerdict:
    example_id: str
    chunk: PassageChunk
    outcomes: list[MaskOutcome]

    def __post_init__(self):
        members = list(self.chunk.member_indices)
        if [o.masked_rank for o in self.outcomes] != members:
            raise ValueError(
                f"verdict outcomes must cover chunk members {members} in order"
            )


@dataclass(frozen=True)
class MinedPair:
    example_id: str
    passage_rank: int
    label: str
    rule: str

    def __post_init__(self):
        if self.label not in ("positive", "negative"):
            raise ValueError(f"label must be positive/negative, got {self.label!r}")
        if self.rule not in (RULE_QA, RULE_FV_FLIP, RULE_FV_ALL_INCORRECT, RULE_DIALOGUE):
            raise ValueError(f"unknown rule {self.rule!r}")


class Predictor(Protocol):
    """Anything that can answer an example with some passages hidden."""

    def predict(self, example: Example, mask: Sequence[int] | None) -> str:
        """Return the output text with the given passage ranks excluded."""
        ...


class ModelPredictor:
    """Live generation over a fusion model, greedy decoding."""

    def __init__(self, model, top_n: int | None = None):
        self.model = model
        self.top_n = top_n

    def predict(self, example: Example, mask: Sequence[int] | None) -> str:
        passages = example.passages
        if self.top_n is not None:
            passages = passages[: self.top_n]
        fused = self.model.encode_passages(example.query, passages, mask=mask)
        return self.model.generate(fused).text


class PredictionLogPredictor:
    """Offline replay of a generator prediction log.

    The log is JSONL with rows {example_id, mask (list of ranks or
    null), prediction, token_log_probs?}; the mask must list every
    excluded rank, exactly as ``leave_one_out_run`` issues it.
    """

    def __init__(self, path):
        self._table: dict[tuple[str, tuple[int, ...]], str] = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                    key = (row["example_id"], self._mask_key(row.get("mask")))
                    self._table[key] = row["prediction"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(f"bad prediction-log row at line {line_no}: {exc}") from exc

    @staticmethod
    def _mask_key(mask) -> tuple[int, ...]:
        if mask is None:
            return ()
        return tuple(sorted(int(r) for r in mask))

    def predict(self, example: Example, mask: Sequence[int] | None) -> str:
        key = (example.id, self._mask_key(mask))
        try:
            return self._table[key]
        except KeyError:
            raise MiningError(
                f"prediction log has no entry for example {example.id!r} "
                f"with mask {sorted(mask) if mask else []}"
            ) from None


def save_prediction_log(rows: Sequence[dict], path) -> None:
    """Write prediction rows ({example_id, mask, prediction, ...}) as JSONL."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Leave-one-out runs
# ---------------------------------------------------------------------------


def _judge(example: Example, masked_rank: int, prediction: str) -> MaskOutcome:
    golds = example.gold_outputs
    f1 = None
    if example.task == "fact_verification":
        correct = metrics.accuracy(prediction, golds) == 1
    else:
        correct = metrics.exact_match(prediction, golds) == 1
        if example.task == "dialogue":
            f1 = metrics.token_f1(prediction, golds)
    return MaskOutcome(masked_rank, prediction, bool(correct), f1)


def leave_one_out_run(generator: Predictor, example: Example,
                      chunk: PassageChunk) -> LooVerdict:
    """Mask each chunk member once and judge the regenerated output."""
    if chunk.example_id != example.id:
        raise ValueError(
            f"chunk belongs to example {chunk.example_id!r}, not {example.id!r}"
        )
    members = list(chunk.member_indices)
    all_ranks = {p.rank for p in example.passages}
    missing = [r for r in members if r not in all_ranks]
    if missing:
        raise ValueError(f"example {example.id!r} has no passage ranks {missing}")
    non_chunk = sorted(all_ranks - set(members))
    outcomes = []
    for rank in members:
        mask = sorted(non_chunk + [rank])
        try:
            prediction = generator.predict(example, mask)
        except MiningError:
            raise
        except Exception as exc:
            raise MiningError(
                f"generator failed on example {example.id!r}, chunk {members}, "
                f"masked rank {rank}: {exc}"
            ) from exc
        outcomes.append(_judge(example, rank, prediction))
    return LooVerdict(example.id, chunk, outcomes)


# ---------------------------------------------------------------------------
# Labeling rules
# ---------------------------------------------------------------------------


def label_qa(verdict: LooVerdict) -> list[MinedPair]:
    """Single-flip rule: the one passage whose removal flips the outcome."""
    flags = [o.correct for o in verdict.outcomes]
    pairs = []
    for i, outcome in enumerate(verdict.outcomes):
        others = flags[:i] + flags[i + 1:]
        if not others:
            continue
        if not outcome.correct and all(others):
            pairs.append(MinedPair(verdict.example_id, outcome.masked_rank,
                                   "positive", RULE_QA))
        elif outcome.correct and not any(others):
            pairs.append(MinedPair(verdict.example_id, outcome.masked_rank,
                                   "negative", RULE_QA))
    return pairs


def label_fact_verification(verdict: LooVerdict,
                            all_verdicts_for_example: Sequence[LooVerdict]) -> list[MinedPair]:
    """Flip rule plus the unanimous-failure rule.

    When every run of the chunk is wrong, no member supports the claim
    and the whole chunk is labeled negative (rule fv_ii); otherwise the
    single-flip rule applies (rule fv_i).
    """
    ids = {v.example_id for v in all_verdicts_for_example} | {verdict.example_id}
    if len(ids) != 1:
        raise ValueError(f"verdicts span multiple examples: {sorted(ids)}")
    if not any(v is verdict or v == verdict for v in all_verdicts_for_example):
        raise ValueError("verdict is not among all_verdicts_for_example")
    flags = [o.correct for o in verdict.outcomes]
    if not any(flags):
        return [MinedPair(verdict.example_id, o.masked_rank, "negative",
                          RULE_FV_ALL_INCORRECT)
                for o in verdict.outcomes]
    pairs = []
    for i, outcome in enumerate(verdict.outcomes):
        others = flags[:i] + flags[i + 1:]
        if not others:
            continue
        if not outcome.correct and all(others):
            pairs.append(MinedPair(verdict.example_id, outcome.masked_rank,
                                   "positive", RULE_FV_FLIP))
        elif outcome.correct and not any(others):
            pairs.append(MinedPair(verdict.example_id, outcome.masked_rank,
                                   "negative", RULE_FV_FLIP))
    return pairs


def label_dialogue(verdict: LooVerdict) -> list[MinedPair]:
    """Margin rule on response F1: label only clear shifts.

    present_f1(i) averages the runs that keep passage i; a passage is
    positive when hiding it costs more than the margin, negative when
    hiding it helps by more than the margin. Ties and small deltas stay
    unlabeled (strict inequalities).
    """
    scores = [o.f1 for o in verdict.outcomes]
    if any(s is None for s in scores):
        raise ValueError("dialogue labeling requires f1 on every outcome")
    pairs = []
    for i, outcome in enumerate(verdict.outcomes):
        present = scores[:i] + scores[i + 1:]
        if not present:
            continue
        delta = sum(present) / len(present) - outcome.f1
        if delta > DIALOGUE_F1_MARGIN:
            pairs.append(MinedPair(verdict.example_id, outcome.masked_rank,
                                   "positive", RULE_DIALOGUE))
        elif delta < -DIALOGUE_F1_MARGIN:
            pairs.append(MinedPair(verdict.example_id, outcome.masked_rank,
                                   "negative", RULE_DIALOGUE))
    return pairs


def label_verdicts(verdicts: Sequence[LooVerdict], task: str) -> list[MinedPair]:
    """Apply the task's rule to every verdict; order-preserving dedup."""
    if task not in DEFAULT_CHUNK_SIZE:
        raise ValueError(f"unknown task {task!r}")
    by_example: dict[str, list[LooVerdict]] = {}
    for verdict in verdicts:
        by_example.setdefault(verdict.example_id, []).append(verdict)
    pairs: list[MinedPair] = []
    seen = set()
    for verdict in verdicts:
        if task == "open_qa":
            new = label_qa(verdict)
        elif task == "fact_verification":
            new = label_fact_verification(verdict, by_example[verdict.example_id])
        else:
            new = label_dialogue(verdict)
        for pair in new:
            if pair not in seen:
                seen.add(pair)
                pairs.append(pair)
    return pairs


# ---------------------------------------------------------------------------
# Dataset-level mining
# ---------------------------------------------------------------------------


def mine_dataset(generator: Predictor, examples: Sequence[Example],
                 chunk_size: int | None = None,
                 verdict_log_path=None) -> tuple[list[MinedPair], list[LooVerdict]]:
    """Chunk, run leave-one-out, label, and optionally persist verdicts."""
    pairs: list[MinedPair] = []
    verdicts: list[LooVerdict] = []
    for example in examples:
        if example.task not in DEFAULT_CHUNK_SIZE:
            raise ValueError(f"unknown task {example.task!r}")
        size = chunk_size if chunk_size is not None else DEFAULT_CHUNK_SIZE[example.task]
        ex_verdicts = [
            leave_one_out_run(generator, example, chunk)
            for chunk in chunk_passages(example, size)
        ]
        verdicts.extend(ex_verdicts)
        pairs.extend(label_verdicts(ex_verdicts, example.task))
    # dedup across examples in case the input repeats ids
    unique: list[MinedPair] = []
    seen = set()
    for pair in pairs:
        if pair not in seen:
            seen.add(pair)
            unique.append(pair)
    if verdict_log_path is not None:
        save_verdict_log(verdicts, verdict_log_path)
    return unique, verdicts


def pairs_to_labels(pairs: Sequence[MinedPair]) -> list[EvidentialityLabel]:
    return [
        EvidentialityLabel(p.example_id, p.passage_rank, p.label, provenance="loo")
        for p in pairs
    ]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_verdict_log(verdicts: Sequence[LooVerdict], path) -> None:
    """JSONL verdict log with a mask-scope header row for audit."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"mask_scope": MASK_SCOPE}, sort_keys=True) + "\n")
        for v in verdicts:
            row = {
                "example_id": v.example_id,
                "chunk": list(v.chunk.member_indices),
                "chunk_size": v.chunk.chunk_size,
                "outcomes": [
                    {"masked_rank": o.masked_rank, "prediction": o.prediction,
                     "correct": o.correct, "f1": o.f1}
                    for o in v.outcomes
                ],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_verdict_log(path) -> list[LooVerdict]:
    verdicts = []
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("mask_scope") != MASK_SCOPE:
            raise ValueError(
                f"verdict log declares mask scope {header.get('mask_scope')!r}; "
                f"this build evaluates {MASK_SCOPE!r}"
            )
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            chunk = PassageChunk(row["example_id"], list(row["chunk"]),
                                 row["chunk_size"])
            outcomes = [
                MaskOutcome(o["masked_rank"], o["prediction"], o["correct"],
                            o.get("f1"))
                for o in row["outcomes"]
            ]
            verdicts.append(LooVerdict(row["example_id"], chunk, outcomes))
    return verdicts


def save_mined_pairs(pairs: Sequence[MinedPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            row = {"example_id": p.example_id, "passage_rank": p.passage_rank,
                   "label": p.label, "rule": p.rule}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_mined_pairs(path) -> list[MinedPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                row = json.loads(line)
                pairs.append(MinedPair(row["example_id"], row["passage_rank"],
                                       row["label"], row["rule"]))
    return pairs
