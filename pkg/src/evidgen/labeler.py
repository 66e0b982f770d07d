"""Evidentiality labeling model M and silver-label assignment.

M is a binary classifier over (query, passage, gold output): does this
passage contain the evidence needed to produce the output? Training
data combines annotated evidence passages (positives), sampled
same-article non-evidence passages (negatives), and pairs mined by
leave-one-out generation. A trained M then labels every passage of
every training example, producing the silver label set the multi-task
generator consumes.

At desk scale M is a small from-scratch transformer encoder with a
two-way head; the published configuration (masked-LM backbone, max
length 350, learning rate 2e-5, 7 epochs) is kept as a reference
preset with the same data plumbing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Example, EvidentialityLabel, Passage, ValidationError
from .loo import MinedPair
from .model import ModelConfig, _encoder_forward
from .training import Adam
from .vocab import Vocab

logger = logging.getLogger(__name__)

LABELER_SOURCES = ("gold_long_answer", "gold_negative_sample", "loo")
_POSITIVE_COL = 1  # column of the positive class in the two-way head


@dataclass
class LabelerExample:
    query: str
    passage: Passage
    gold_output: str
    label: str
    source: str

    def __post_init__(self):
        if self.label not in ("positive", "negative"):
            raise ValidationError(f"label must be positive/negative, got {self.label!r}")
        if self.source not in LABELER_SOURCES:
            raise ValidationError(f"unknown source {self.source!r}")


@dataclass
class SilverLabelSet:
    labels: list[EvidentialityLabel]
    threshold: float

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold must be in (0, 1)")
        seen = set()
        for label in self.labels:
            if label.provenance != "silver":
                raise ValidationError("silver label set requires provenance=silver")
            key = (label.example_id, label.passage_rank)
            if key in seen:
                raise ValidationError(f"duplicate silver label for {key}")
            seen.add(key)


@dataclass(frozen=True)
class LabelerConfig:
    hidden: int = 48
    n_layers: int = 2
    n_heads: int = 8
    ffn_hidden: int = 96
    max_len: int = 32
    learning_rate: float = 5e-3
    epochs: int = 10
    batch_size: int = 32
    init_std: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("hidden", "n_layers", "n_heads", "ffn_hidden", "max_len",
                     "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.init_std <= 0:
            raise ValueError("learning_rate and init_std must be positive")
        if self.hidden % self.n_heads != 0:
            raise ValueError("hidden must be divisible by n_heads")


def paper_labeler_preset() -> LabelerConfig:
    """Published fine-tuning configuration; reference values only."""
    return LabelerConfig(
        hidden=768,
        n_layers=12,
        n_heads=12,
        ffn_hidden=3072,
        max_len=350,
        learning_rate=2e-5,
        epochs=7,
        batch_size=32,
    )


def desk_labeler_preset(**overrides) -> LabelerConfig:
    """Small from-scratch encoder that trains in seconds on a CPU."""
    return LabelerConfig(**overrides)


# ---------------------------------------------------------------------------
# Training-data assembly
# ---------------------------------------------------------------------------


def _passage_from_row(row: dict, rank: int) -> Passage:
    return Passage(
        id=row["id"],
        title=row.get("title", ""),
        text=row["text"],
        retriever_score=0.0,
        rank=rank,
    )


def build_labeler_training_data(
    records: Sequence[dict],
    mined: Sequence[MinedPair] = (),
    examples: Sequence[Example] | None = None,
    negatives_per_question: int = 2,
    split: float = 0.9,
    seed: int = 0,
    mined_cap: int | None = None,
) -> tuple[list[LabelerExample], list[LabelerExample]]:
    """Assemble (train, dev) classifier instances, split by question.

    ``records`` are question-level annotations: {id, query, gold_output,
    evidence: [...], negatives: [...]} with passage rows {id, title,
    text, kind}. Evidence rows whose kind is list- or table-style are
    discarded. Per question, all surviving evidence rows become
    positives and ``negatives_per_question`` sampled rows become
    negatives; questions with an empty negative pool are skipped and
    counted. Mined pairs (resolved against ``examples``) are appended
    with their own labels, capped at ``mined_cap`` when given.
    """
    if not 0.0 < split < 1.0:
        raise ValueError("split must be in (0, 1)")
    if negatives_per_question < 1:
        raise ValueError("negatives_per_question must be positive")
    rng = np.random.default_rng(seed)
    by_question: dict[str, list[LabelerExample]] = {}
    skipped_no_negatives = 0
    skipped_no_evidence = 0
    for record in records:
        evidence = [row for row in record["evidence"]
                    if row.get("kind", "paragraph") not in ("list", "table")]
        if not evidence:
            skipped_no_evidence += 1
            continue
        pool = list(record["negatives"])
        if not pool:
            skipped_no_negatives += 1
            continue
        instances = [
            LabelerExample(record["query"], _passage_from_row(row, i + 1),
                           record["gold_output"], "positive", "gold_long_answer")
            for i, row in enumerate(evidence)
        ]
        n_neg = min(negatives_per_question, len(pool))
        for j, idx in enumerate(rng.choice(len(pool), size=n_neg, replace=False)):
            instances.append(LabelerExample(
                record["query"], _passage_from_row(pool[int(idx)], j + 1),
                record["gold_output"], "negative", "gold_negative_sample"))
        by_question.setdefault(record["id"], []).extend(instances)
    if skipped_no_negatives:
        logger.info("skipped %d question(s) with no negative passages available",
                    skipped_no_negatives)
    if skipped_no_evidence:
        logger.info("skipped %d question(s) with only list/table evidence",
                    skipped_no_evidence)

    mined = list(mined)
    if mined_cap is not None:
        mined = mined[:mined_cap]
    if mined:
        if examples is None:
            raise ValueError("mined pairs given but no examples to resolve them against")
        by_id = {example.id: example for example in examples}
        for pair in mined:
            example = by_id.get(pair.example_id)
            if example is None:
                raise ValueError(f"mined pair references unknown example {pair.example_id!r}")
            by_question.setdefault(example.id, []).append(LabelerExample(
                example.query, example.passage_by_rank(pair.passage_rank),
                example.gold_outputs[0], pair.label, "loo"))

    question_ids = sorted(by_question)
    if not question_ids:
        raise ValueError("no usable questions in the gold source")
    order = rng.permutation(len(question_ids))
    cut = int(round(split * len(question_ids)))
    train_q = {question_ids[i] for i in order[:cut]}
    train = [inst for q in question_ids if q in train_q for inst in by_question[q]]
    dev = [inst for q in question_ids if q not in train_q for inst in by_question[q]]
    return train, dev


# ---------------------------------------------------------------------------
# The classifier
# ---------------------------------------------------------------------------


def _model_config(config: LabelerConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        hidden=config.hidden,
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        ffn_hidden=config.ffn_hidden,
        block_len=config.max_len,
        max_target_len=1,
        init_std=config.init_std,
        dtype=config.dtype,
        seed=config.seed,
    )


class Labeler:
    """Encoder with a two-way head over (query, passage, gold output)."""

    def __init__(self, config: LabelerConfig, vocab: Vocab):
        self.config = config
        self.vocab = vocab
        self._mc = _model_config(config, len(vocab))
        self.params = self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        cfg = self._mc
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        params: dict[str, Tensor] = {}

        def weight(name: str, *shape: int) -> None:
            params[name] = ad.param(rng.normal(0.0, cfg.init_std, size=shape).astype(dt))

        def norm(prefix: str) -> None:
            params[prefix + "/g"] = ad.param(np.ones(cfg.hidden, dtype=dt))
            params[prefix + "/b"] = ad.param(np.zeros(cfg.hidden, dtype=dt))

        h, f = cfg.hidden, cfg.ffn_hidden
        weight("embed/tokens", cfg.vocab_size, h)
        weight("enc/pos", cfg.block_len, h)
        for i in range(cfg.n_layers):
            norm(f"enc/{i}/ln1")
            for w in ("wq", "wk", "wv", "wo"):
                weight(f"enc/{i}/attn/{w}", h, h)
            norm(f"enc/{i}/ln2")
            weight(f"enc/{i}/ffn/w1", h, f)
            weight(f"enc/{i}/ffn/w2", f, h)
        norm("enc/final")
        weight("head/w", h, 2)
        return params

    # -- encoding ------------------------------------------------------

    def instance_ids(self, query: str, passage: Passage, gold_output: str) -> list[int]:
        v = self.vocab
        ids = (
            [v.bos_id]
            + v.encode(query)
            + [v.sep_id]
            + v.encode(gold_output)
            + [v.sep_id]
            + v.encode(passage.title)
            + v.encode(passage.text)
            + [v.eos_id]
        )
        return ids[: self.config.max_len]

    def _logits(self, rows: list[list[int]]) -> Tensor:
        v = self.vocab
        width = max(len(r) for r in rows)
        ids = np.full((len(rows), width), v.pad_id, dtype=np.int64)
        pad_mask = np.zeros((len(rows), width), dtype=self._mc.dtype)
        for i, row in enumerate(rows):
            ids[i, : len(row)] = row
            pad_mask[i, : len(row)] = 1.0
        states = _encoder_forward(self.params, self._mc, ids, pad_mask)
        pooled = ad.reshape(
            ad.take(ad.reshape(states, (len(rows) * width, self._mc.hidden)),
                    np.arange(len(rows)) * width),
            (len(rows), self._mc.hidden),
        )
        return ad.matmul(pooled, self.params["head/w"])

    # -- inference -----------------------------------------------------

    def score_batch(self, triples: Sequence[tuple[str, Passage, str]]) -> np.ndarray:
        """Positive-class probabilities for (query, passage, gold) triples."""
        with ad.no_grad():
            rows = [self.instance_ids(q, p, g) for q, p, g in triples]
            logits = self._logits(rows).data.astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        return probs[:, _POSITIVE_COL]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_copy(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = state[name].copy()


def score_passage(labeler: Labeler, query: str, passage: Passage,
                  gold_output: str) -> float:
    """Probability that the passage evidences the output; deterministic."""
    return float(labeler.score_batch([(query, passage, gold_output)])[0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def labeler_accuracy(labeler: Labeler, instances: Sequence[LabelerExample]) -> float:
    if not instances:
        raise ValueError("accuracy needs at least one instance")
    scores = labeler.score_batch(
        [(inst.query, inst.passage, inst.gold_output) for inst in instances])
    want = np.array([inst.label == "positive" for inst in instances])
    return float(((scores > 0.5) == want).mean())


def _labeler_vocab(instances: Sequence[LabelerExample]) -> Vocab:
    texts = []
    for inst in instances:
        texts.extend((inst.query, inst.gold_output, inst.passage.title,
                      inst.passage.text))
    return Vocab.build(texts)


def train_labeler(
    train: Sequence[LabelerExample],
    dev: Sequence[LabelerExample],
    config: LabelerConfig | None = None,
) -> tuple[Labeler, dict]:
    """Train M and return the best-dev-accuracy state plus a history dict."""
    if not train:
        raise ValueError("training set is empty")
    if not dev:
        raise ValueError("dev set is empty")
    labels = {inst.label for inst in train}
    if len(labels) < 2:
        raise ValueError(
            f"degenerate training set: every instance is labeled {labels.pop()!r}"
        )
    config = config or desk_labeler_preset()
    labeler = Labeler(config, _labeler_vocab(list(train) + list(dev)))
    optimizer = Adam(labeler.parameters())
    rng = np.random.default_rng(config.seed)

    encoded = [labeler.instance_ids(i.query, i.passage, i.gold_output) for i in train]
    targets = np.array([_POSITIVE_COL if i.label == "positive" else 1 - _POSITIVE_COL
                        for i in train], dtype=np.int64)

    best_state = labeler.state_copy()
    best_accuracy = labeler_accuracy(labeler, dev)
    history = {"dev_accuracy": [], "train_loss": []}
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(train), config.batch_size):
            batch = order[start: start + config.batch_size]
            rows = [encoded[i] for i in batch]
            labeler.zero_grad()
            logits = labeler._logits(rows)
            scales = np.full(len(batch), 1.0 / len(batch), dtype=labeler._mc.dtype)
            loss, row_losses = ad.softmax_xent(logits, targets[batch], scales)
            loss.backward()
            optimizer.step(config.learning_rate)
            epoch_loss += float(row_losses.sum())
            step += 1
        accuracy = labeler_accuracy(labeler, dev)
        history["dev_accuracy"].append(accuracy)
        history["train_loss"].append(epoch_loss / len(train))
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_state = labeler.state_copy()
    labeler.load_state(best_state)
    history["best_dev_accuracy"] = best_accuracy
    return labeler, history


# ---------------------------------------------------------------------------
# Silver labeling
# ---------------------------------------------------------------------------


def assign_silver_labels(labeler: Labeler, examples: Sequence[Example],
                         threshold: float = 0.5) -> SilverLabelSet:
    """Label every passage of every example; positive iff score > threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    labels = []
    for example in examples:
        gold = example.gold_outputs[0]
        scores = labeler.score_batch(
            [(example.query, p, gold) for p in example.passages])
        for passage, score in zip(example.passages, scores):
            labels.append(EvidentialityLabel(
                example_id=example.id,
                passage_rank=passage.rank,
                label="positive" if score > threshold else "negative",
                provenance="silver",
            ))
    return SilverLabelSet(labels, threshold)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_labeler(labeler: Labeler, path) -> str:
    path = str(path)
    if not path.endswith(".npz"):
        path += ".npz"
    meta = {
        "format_version": 1,
        "config": asdict(labeler.config),
        "vocab": labeler.vocab.to_list(),
    }
    arrays = {"param::" + name: p.data for name, p in labeler.params.items()}
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)
    return path


def load_labeler(path) -> Labeler:
    with np.load(str(path)) as archive:
        meta = json.loads(bytes(archive["meta_json"]).decode("utf-8"))
        labeler = Labeler(LabelerConfig(**meta["config"]), Vocab(meta["vocab"]))
        for name, p in labeler.params.items():
            key = "param::" + name
            if key not in archive:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            p.data = archive[key].copy()
    return labeler


def save_labeler_examples(instances: Sequence[LabelerExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            row = {
                "query": inst.query,
                "passage": {
                    "id": inst.passage.id, "title": inst.passage.title,
                    "text": inst.passage.text,
                    "retriever_score": inst.passage.retriever_score,
                    "rank": inst.passage.rank,
                },
                "gold_output": inst.gold_output,
                "label": inst.label,
                "source": inst.source,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_labeler_examples(path) -> list[LabelerExample]:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            instances.append(LabelerExample(
                row["query"], Passage(**row["passage"]), row["gold_output"],
                row["label"], row["source"]))
    return instances
