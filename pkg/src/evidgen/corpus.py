"""Data model for queries, passages, and examples, plus file ingestion.

Three input formats are supported:

* DPR-style retrieval results: a JSON array of
  ``{question, answers, ctxs: [{id, title, text, score, has_answer}]}``.
* KILT-style task data: newline-delimited ``{id, input, output: [...]}``
  records paired with a retrieval sidecar JSONL ``{id, ctxs: [...]}``.
* The canonical internal format: JSONL, one example per line, with field
  names matching the dataclasses below.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

TASKS = ("open_qa", "fact_verification", "dialogue")
FACT_VERIFICATION_CLASSES = ("SUPPORTS", "REFUTES")

# Multi-turn dialogue contexts are stored flat; this separator marks a
# speaker change and is treated as an opaque part of the query downstream.
DIALOGUE_TURN_SEP = " ::: "


class CorpusError(ValueError):
    """Base class for ingestion and validation failures."""


class ParseError(CorpusError):
    """Raised when an input file is not syntactically valid."""


class ValidationError(CorpusError):
    """Raised when a record violates the data-model invariants."""


class MissingRetrievalError(CorpusError):
    """Raised when task records have no matching retrieval results."""

    def __init__(self, missing_ids: Sequence[str]):
        self.missing_ids = list(missing_ids)
        super().__init__(
            f"no retrieval results for {len(self.missing_ids)} record(s): "
            + ", ".join(self.missing_ids[:10])
            + ("..." if len(self.missing_ids) > 10 else "")
        )


@dataclass
class Passage:
    """One retrieval unit. ``rank`` is 1-based within its example."""

    id: str
    title: str
    text: str
    retriever_score: float
    rank: int

    def __post_init__(self):
        if not self.text:
            raise ValidationError(f"passage {self.id!r}: text is empty")
        if self.rank < 1:
            raise ValidationError(f"passage {self.id!r}: rank {self.rank} is not positive")


@dataclass
class Example:
    """One task instance: query, gold outputs, and its ranked passages."""

    id: str
    query: str
    gold_outputs: list[str]
    task: str
    passages: list[Passage]
    metadata: dict | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"example {self.id!r}: unknown task {self.task!r}")
        if not self.gold_outputs:
            raise ValidationError(f"example {self.id!r}: gold_outputs is empty")
        if self.task == "fact_verification":
            bad = [g for g in self.gold_outputs if g not in FACT_VERIFICATION_CLASSES]
            if bad:
                raise ValidationError(
                    f"example {self.id!r}: fact-verification gold outputs must be "
                    f"SUPPORTS or REFUTES, got {bad!r}"
                )
        if not self.passages:
            raise ValidationError(f"example {self.id!r}: no passages")
        ranks = [p.rank for p in self.passages]
        if ranks != list(range(1, len(ranks) + 1)):
            raise ValidationError(
                f"example {self.id!r}: passage ranks must be exactly 1..N in order, got {ranks}"
            )
        for prev, cur in zip(self.passages, self.passages[1:]):
            if cur.retriever_score > prev.retriever_score:
                raise ValidationError(
                    f"example {self.id!r}: retriever_score increases from rank "
                    f"{prev.rank} to {cur.rank}"
                )

    @property
    def n_passages(self) -> int:
        return len(self.passages)

    def passage_by_rank(self, rank: int) -> Passage:
        try:
            return self.passages[rank - 1]
        except IndexError:
            raise ValidationError(f"example {self.id!r}: no passage with rank {rank}") from None


@dataclass
class PassageChunk:
    """A contiguous block of passage ranks within one example."""

    example_id: str
    member_indices: list[int]
    chunk_size: int

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValidationError("chunk_size must be positive")
        if not self.member_indices:
            raise ValidationError("chunk has no members")


@dataclass
class EvidentialityLabel:
    """Positive/negative verdict for one (example, passage) pair.

    ``provenance`` records how the label was obtained: ``gold`` (annotated
    or planted ground truth), ``loo`` (mined by leave-one-out generation),
    or ``silver`` (assigned by the trained labeling model or a heuristic
    standing in for it).
    """

    example_id: str
    passage_rank: int
    label: str
    provenance: str

    def __post_init__(self):
        if self.label not in ("positive", "negative"):
            raise ValidationError(f"label must be positive/negative, got {self.label!r}")
        if self.provenance not in ("gold", "loo", "silver"):
            raise ValidationError(f"unknown provenance {self.provenance!r}")


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _default_score(score, n_ctxs: int, rank: int) -> float:
    # Some KILT exports ship unscored contexts; fall back to a rank-derived
    # score so the monotonicity invariant holds.
    if score is None:
        return float(n_ctxs - rank + 1)
    return float(score)


def _ctx_to_passage(ctx: dict, rank: int, n_ctxs: int, fallback_id: str) -> Passage:
    return Passage(
        id=str(ctx.get("id", fallback_id)),
        title=str(ctx.get("title", "") or ""),
        text=str(ctx.get("text", "") or ""),
        retriever_score=_default_score(ctx.get("score"), n_ctxs, rank),
        rank=rank,
    )


def load_dpr_retrieval(path: str | Path) -> list[Example]:
    """Load a DPR-style retrieval-result JSON file as open-QA examples.

    The ctxs order defines the rank. Raises :class:`ParseError` (naming the
    byte offset) for malformed JSON, :class:`ValidationError` (naming the
    record index) for records without answers.
    """
    raw = Path(path).read_text(encoding="utf-8")
    try:
        records = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON at byte offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(records, list):
        raise ParseError(f"{path}: expected a top-level JSON array")

    examples = []
    for idx, rec in enumerate(records):
        answers = rec.get("answers") or []
        if not answers:
            raise ValidationError(f"{path}: record {idx} has empty or missing answers")
        ctxs = rec.get("ctxs") or []
        try:
            passages = [
                _ctx_to_passage(c, rank=i + 1, n_ctxs=len(ctxs), fallback_id=f"{idx}-{i}")
                for i, c in enumerate(ctxs)
            ]
            examples.append(
                Example(
                    id=str(rec.get("id", idx)),
                    query=str(rec["question"]),
                    gold_outputs=[str(a) for a in answers],
                    task="open_qa",
                    passages=passages,
                )
            )
        except (KeyError, ValidationError) as exc:
            raise ValidationError(f"{path}: record {idx}: {exc}") from exc
    return examples


def load_kilt_jsonl(path: str | Path, task: str, retrieval_path: str | Path) -> list[Example]:
    """Load KILT-style task records paired with a retrieval sidecar.

    ``path`` holds newline-delimited ``{id, input, output:[{answer,
    provenance:[...]}]}`` records; ``retrieval_path`` maps each id to its
    ranked ``ctxs``. Provenance titles, when present, are kept as auxiliary
    metadata (no canonical passage-id mapping is attempted). For dialogue,
    the multi-turn input is flattened with the ``" ::: "`` separator.
    """
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")

    retrieval: dict[str, list] = {}
    for rec in _read_jsonl(retrieval_path):
        retrieval[str(rec["id"])] = rec.get("ctxs") or []

    records = list(_read_jsonl(path))
    missing = [str(r["id"]) for r in records if str(r["id"]) not in retrieval]
    if missing:
        raise MissingRetrievalError(missing)

    examples = []
    for rec in records:
        rec_id = str(rec["id"])
        query = str(rec["input"])
        if task == "dialogue":
            turns = [t.strip() for t in query.split("\n") if t.strip()]
            query = DIALOGUE_TURN_SEP.join(turns)
        golds = []
        titles = []
        for out in rec.get("output") or []:
            if out.get("answer"):
                golds.append(str(out["answer"]))
            for prov in out.get("provenance") or []:
                title = prov.get("wikipedia_title") or prov.get("title")
                if title and title not in titles:
                    titles.append(str(title))
        if not golds:
            raise ValidationError(f"{path}: record {rec_id!r} has no answers")
        ctxs = retrieval[rec_id]
        passages = [
            _ctx_to_passage(c, rank=i + 1, n_ctxs=len(ctxs), fallback_id=f"{rec_id}-{i}")
            for i, c in enumerate(ctxs)
        ]
        metadata = {"provenance_titles": titles} if titles else None
        examples.append(
            Example(
                id=rec_id,
                query=query,
                gold_outputs=golds,
                task=task,
                passages=passages,
                metadata=metadata,
            )
        )
    return examples


def build_examples(raw: Iterable[Example], top_n: int, strict: bool = True) -> list[Example]:
    """Truncate every example to its ``top_n`` highest-ranked passages.

    Surviving passages keep their order; ranks stay 1..top_n. In strict
    mode an example with fewer passages raises :class:`ValidationError`
    listing the offending ids; otherwise it is kept as-is.
    """
    if top_n < 1:
        raise ValidationError("top_n must be positive")
    raw = list(raw)
    if strict:
        short = [ex.id for ex in raw if ex.n_passages < top_n]
        if short:
            raise ValidationError(
                f"{len(short)} example(s) have fewer than {top_n} passages: "
                + ", ".join(short[:10])
                + ("..." if len(short) > 10 else "")
            )
    return [
        dataclasses.replace(ex, passages=ex.passages[:top_n]) if ex.n_passages > top_n else ex
        for ex in raw
    ]


def chunk_passages(example: Example, chunk_size: int) -> list[PassageChunk]:
    """Partition an example's passage ranks into consecutive chunks.

    A trailing chunk smaller than 2 is merged into the previous chunk (the
    leave-one-out rules are undefined for a single passage, and dropping it
    would lose coverage). Only an example with a single passage yields a
    degenerate 1-member chunk, so the output always partitions 1..N.
    """
    if chunk_size < 2:
        raise ValidationError(f"chunk_size must be >= 2, got {chunk_size}")
    ranks = [p.rank for p in example.passages]
    blocks = [ranks[i : i + chunk_size] for i in range(0, len(ranks), chunk_size)]
    if len(blocks) > 1 and len(blocks[-1]) < 2:
        blocks[-2].extend(blocks.pop())
    return [PassageChunk(example.id, block, chunk_size) for block in blocks]


# ---------------------------------------------------------------------------
# Canonical JSONL serialization
# ---------------------------------------------------------------------------


def _read_jsonl(path: str | Path) -> Iterable[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(
                    f"{path}: line {lineno}: malformed JSON at byte offset {exc.pos}: {exc.msg}"
                ) from exc


def example_to_dict(example: Example) -> dict:
    d = {
        "id": example.id,
        "query": example.query,
        "gold_outputs": list(example.gold_outputs),
        "task": example.task,
        "passages": [dataclasses.asdict(p) for p in example.passages],
    }
    if example.metadata is not None:
        d["metadata"] = example.metadata
    return d


def example_from_dict(d: dict) -> Example:
    return Example(
        id=d["id"],
        query=d["query"],
        gold_outputs=list(d["gold_outputs"]),
        task=d["task"],
        passages=[Passage(**p) for p in d["passages"]],
        metadata=d.get("metadata"),
    )


def save_examples_jsonl(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_dict(ex), sort_keys=True) + "\n")


def load_examples_jsonl(path: str | Path) -> list[Example]:
    return [example_from_dict(d) for d in _read_jsonl(path)]


def save_labels_jsonl(labels: Iterable[EvidentialityLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(json.dumps(dataclasses.asdict(lab), sort_keys=True) + "\n")


def load_labels_jsonl(path: str | Path) -> list[EvidentialityLabel]:
    return [EvidentialityLabel(**d) for d in _read_jsonl(path)]


def labels_by_example(labels: Iterable[EvidentialityLabel]) -> dict[str, list[EvidentialityLabel]]:
    """Group labels by example id, checking (example, rank) uniqueness."""
    grouped: dict[str, list[EvidentialityLabel]] = {}
    seen: set[tuple[str, int]] = set()
    for lab in labels:
        key = (lab.example_id, lab.passage_rank)
        if key in seen:
            raise ValidationError(f"duplicate label for example {key[0]!r} rank {key[1]}")
        seen.add(key)
        grouped.setdefault(lab.example_id, []).append(lab)
    return grouped
