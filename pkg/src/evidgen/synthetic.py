"""Synthetic distractor-passage datasets.

Queried keys are two-symbol compounds ("a07 b13") so that single-token
matching is never sufficient: each example plants exactly one evidential
passage (the full key paired with the gold value, "a07 b13 = v02"),
spurious distractors that pair the gold value with a wrong key differing
in exactly one slot (the answer string is present, half the key matches),
lexical distractors (the full key with no value assignment), and random
fillers whose assignments carry other values.  A symbolic vocabulary
keeps the task learnable by small from-scratch models while preserving
the failure mode under test: answer-string matching cannot tell the
evidential passage from a spurious one, and partial key matching is
rewarded whenever retrieval truncation hides the evidential passage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import (
    DIALOGUE_TURN_SEP,
    Example,
    EvidentialityLabel,
    Passage,
    TASKS,
)

_DIALOGUE_RESPONSE = "the value is {value} indeed"
_QA_QUERY = "find {key}"
_FV_QUERY = "claim {key} equals {value}"
_DIALOGUE_QUERY = "we saw {words}" + DIALOGUE_TURN_SEP + "find {key}"


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 25
    n_passages: int = 10
    n_distractors_with_answer: int = 3
    n_lexical_distractors: int = 2
    seed: int = 0
    task: str = "open_qa"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be at least 4")
        if self.n_passages < 1:
            raise ValueError("n_passages must be positive")
        if self.n_distractors_with_answer < 0 or self.n_lexical_distractors < 0:
            raise ValueError("distractor counts must be non-negative")
        if 1 + self.n_distractors_with_answer + self.n_lexical_distractors > self.n_passages:
            raise ValueError(
                "n_passages must cover the evidential passage plus all distractors"
            )


def _symbols(prefix: str, n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


class _Symbols:
    """Disjoint symbol families: key halves (a/b), values, filler words."""

    def __init__(self, spec: SyntheticSpec):
        self.key_a = _symbols("a", spec.vocab_size)
        self.key_b = _symbols("b", spec.vocab_size)
        self.values = _symbols("v", spec.vocab_size)
        self.words = _symbols("w", spec.vocab_size)


def _filler_words(rng: np.random.Generator, words: list[str], n: int) -> list[str]:
    return [words[i] for i in rng.integers(0, len(words), size=n)]


def _other(rng: np.random.Generator, pool: list[str], taken) -> str:
    banned = set(taken)
    pick = pool[rng.integers(0, len(pool))]
    while pick in banned:
        pick = pool[rng.integers(0, len(pool))]
    return pick


def _passage_text(rng: np.random.Generator, sym: _Symbols, kind: str,
                  key: str, value: str, excluded_values: tuple[str, ...]) -> str:
    """Compose one 6-token passage body around the kind's payload."""
    key_a, key_b = key.split()
    lead = _filler_words(rng, sym.words, 1)
    tail = _filler_words(rng, sym.words, 1)
    if kind == "evidential":
        payload = [key_a, key_b, "=", value]
    elif kind == "spurious":
        # gold value under a wrong key that matches in exactly one slot
        if rng.random() < 0.5:
            payload = [_other(rng, sym.key_a, (key_a,)), key_b, "=", value]
        else:
            payload = [key_a, _other(rng, sym.key_b, (key_b,)), "=", value]
    elif kind == "lexical":
        # full queried key present but never assigned a value
        payload = [key_a, key_b] + _filler_words(rng, sym.words, 2)
    elif kind == "filler":
        other_a, other_b = key_a, key_b
        while (other_a, other_b) == (key_a, key_b):
            other_a = sym.key_a[rng.integers(0, len(sym.key_a))]
            other_b = sym.key_b[rng.integers(0, len(sym.key_b))]
        payload = [other_a, other_b, "=", _other(rng, sym.values, excluded_values)]
    else:
        raise ValueError(f"unknown passage kind {kind!r}")
    return " ".join(lead + payload + tail)


def _query_and_golds(rng: np.random.Generator, sym: _Symbols, task: str,
                     key: str, value: str) -> tuple[str, list[str], dict]:
    if task == "open_qa":
        return _QA_QUERY.format(key=key), [value], {}
    if task == "fact_verification":
        if rng.random() < 0.5:
            claim_value = value
            gold = "SUPPORTS"
        else:
            claim_value = _other(rng, sym.values, (value,))
            gold = "REFUTES"
        query = _FV_QUERY.format(key=key, value=claim_value)
        return query, [gold], {"claim_value": claim_value}
    if task == "dialogue":
        words = " ".join(_filler_words(rng, sym.words, 2))
        query = _DIALOGUE_QUERY.format(words=words, key=key)
        return query, [_DIALOGUE_RESPONSE.format(value=value)], {}
    raise ValueError(f"unknown task {task!r}")


def generate_dataset(spec: SyntheticSpec,
                     n_examples: int) -> tuple[list[Example], list[EvidentialityLabel]]:
    """Seeded construction of examples plus planted ground-truth labels."""
    if n_examples < 1:
        raise ValueError("n_examples must be positive")
    rng = np.random.default_rng(spec.seed)
    sym = _Symbols(spec)
    n_fillers = spec.n_passages - 1 - spec.n_distractors_with_answer - spec.n_lexical_distractors
    examples: list[Example] = []
    labels: list[EvidentialityLabel] = []
    for i in range(n_examples):
        example_id = f"syn-{spec.task}-{i:05d}"
        key = (f"{sym.key_a[rng.integers(0, len(sym.key_a))]} "
               f"{sym.key_b[rng.integers(0, len(sym.key_b))]}")
        value = sym.values[rng.integers(0, len(sym.values))]
        query, golds, extra_meta = _query_and_golds(rng, sym, spec.task, key, value)
        # keep accidental answer/claim strings out of filler assignments
        excluded = (value, extra_meta["claim_value"]) if "claim_value" in extra_meta \
            else (value,)

        kinds = (
            ["evidential"]
            + ["spurious"] * spec.n_distractors_with_answer
            + ["lexical"] * spec.n_lexical_distractors
            + ["filler"] * n_fillers
        )
        order = rng.permutation(len(kinds))
        passages = []
        evidential_rank = -1
        for rank_zero, kind_idx in enumerate(order):
            kind = kinds[kind_idx]
            rank = rank_zero + 1
            if kind == "evidential":
                evidential_rank = rank
            passages.append(Passage(
                id=f"{example_id}-p{rank}",
                title=_filler_words(rng, sym.words, 1)[0],
                text=_passage_text(rng, sym, kind, key, value, excluded),
                retriever_score=float(spec.n_passages - rank + 1),
                rank=rank,
            ))
            labels.append(EvidentialityLabel(
                example_id=example_id,
                passage_rank=rank,
                label="positive" if kind == "evidential" else "negative",
                provenance="gold",
            ))
        metadata = {
            "key": key,
            "gold_value": value,
            "evidential_rank": evidential_rank,
            **extra_meta,
        }
        examples.append(Example(
            id=example_id,
            query=query,
            gold_outputs=golds,
            task=spec.task,
            passages=passages,
            metadata=metadata,
        ))
    return examples, labels


def rule_based_reader(example: Example, active_ranks=None) -> str:
    """Deterministic reader: find the queried key's assignment and answer.

    Scans passages in rank order for "<key_a> <key_b> = <value>" and
    formats the task's output; returns "" when no assignment is found,
    so removing the evidential passage makes the reader fail.
    """
    key_a, key_b = example.metadata["key"].split()
    allowed = set(active_ranks) if active_ranks is not None else None
    found = None
    for passage in example.passages:
        if allowed is not None and passage.rank not in allowed:
            continue
        tokens = passage.text.split()
        for j in range(len(tokens) - 3):
            if tokens[j] == key_a and tokens[j + 1] == key_b and tokens[j + 2] == "=":
                found = tokens[j + 3]
                break
        if found is not None:
            break
    if found is None:
        return ""
    if example.task == "open_qa":
        return found
    if example.task == "fact_verification":
        return "SUPPORTS" if found == example.metadata["claim_value"] else "REFUTES"
    return _DIALOGUE_RESPONSE.format(value=found)


def gold_evidence_records(examples: list[Example],
                          labels: list[EvidentialityLabel]) -> list[dict]:
    """Question-level records pairing gold evidence with sampled negatives.

    Output rows look like reading-comprehension annotations: the gold
    output, the evidential passages, and the remaining passages as
    negatives, ready for mining classifier training data.
    """
    positive: dict[str, set[int]] = {}
    for label in labels:
        if label.label == "positive":
            positive.setdefault(label.example_id, set()).add(label.passage_rank)
    records = []
    for example in examples:
        pos_ranks = positive.get(example.id, set())
        evidence = []
        negatives = []
        for passage in example.passages:
            row = {
                "id": passage.id,
                "title": passage.title,
                "text": passage.text,
                "kind": "paragraph",
            }
            (evidence if passage.rank in pos_ranks else negatives).append(row)
        records.append({
            "id": example.id,
            "query": example.query,
            "gold_output": example.gold_outputs[0],
            "evidence": evidence,
            "negatives": negatives,
        })
    return records
