"""Training loop for the fusion generator and its evidentiality decoder.

One train step accumulates gradients over ``grad_accumulation``
micro-batches of ``batch_size`` examples, then applies a single Adam
update. The learning rate warms up linearly and stays constant after
warmup. Dev performance is evaluated at a fixed step interval and the
best-scoring checkpoint wins, ties going to the earliest step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import metrics
from .corpus import Example, EvidentialityLabel, labels_by_example
from .model import FusionModel, LossBreakdown, _decoder_forward, save_checkpoint

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = {"open_qa": 0.5, "dialogue": 0.5, "fact_verification": 0.1}
_DEV_METRICS = ("exact_match", "accuracy", "token_f1")


class TrainingDivergedError(RuntimeError):
    """Raised when a loss turns non-finite; names the offending examples."""

    def __init__(self, message: str, example_ids: list[str]):
        super().__init__(message)
        self.example_ids = example_ids


@dataclass(frozen=True)
class TrainingConfig:
    lambda_: float = 0.5
    top_n: int = 10
    total_steps: int = 2000
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    grad_accumulation: int = 1
    batch_size: int = 8
    seed: int = 0
    dev_metric: str = "exact_match"
    eval_interval: int = 500

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError("lambda must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.dev_metric not in _DEV_METRICS:
            raise ValueError(f"dev_metric must be one of {_DEV_METRICS}")
        for name in ("top_n", "total_steps", "learning_rate", "grad_accumulation",
                     "batch_size", "eval_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)


def paper_preset(task: str) -> TrainingConfig:
    """Published training schedule; reference values, not run at desk scale."""
    return TrainingConfig(
        lambda_=DEFAULT_LAMBDA[task],
        top_n=20 if task == "open_qa" else 10,
        total_steps=120000,
        learning_rate=1e-5,
        warmup_steps=1000,
        grad_accumulation=4,
        batch_size=1,
        dev_metric=metrics.task_metric_name(task),
        eval_interval=500,
    )


def desk_preset(task: str, **overrides) -> TrainingConfig:
    """Small-scale schedule that trains the from-scratch model in minutes.

    top_n=7 keeps retrieval truncation in play: the evidential passage
    is hidden from the reader in roughly a third of training examples,
    which is the regime where evidentiality supervision pays off.
    """
    base = dict(
        lambda_=DEFAULT_LAMBDA[task],
        top_n=7,
        total_steps=1500,
        learning_rate=5e-3,
        warmup_steps=100,
        grad_accumulation=1,
        batch_size=32,
        dev_metric=metrics.task_metric_name(task),
        eval_interval=250,
    )
    base.update(overrides)
    return TrainingConfig(**base)


@dataclass
class LabeledExample:
    example: Example
    labels: list[EvidentialityLabel] = field(default_factory=list)


def attach_labels(examples: Sequence[Example],
                  labels: Sequence[EvidentialityLabel] | None) -> list[LabeledExample]:
    """Pair each example with its evidentiality labels by example id."""
    grouped = labels_by_example(labels) if labels else {}
    return [LabeledExample(ex, grouped.get(ex.id, [])) for ex in examples]


@dataclass
class TrainResult:
    checkpoint_path: str
    best_score: float
    best_step: int
    history: list[dict]


class Adam:
    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)


class Trainer:
    def __init__(self, model: FusionModel, config: TrainingConfig):
        self.model = model
        self.config = config
        self.optimizer = Adam(model.parameters())

    # ------------------------------------------------------------------
    # batching

    def _target_ids(self, text: str) -> list[int]:
        v = self.model.vocab
        ids = v.encode(text)[: self.model.config.max_target_len - 1]
        ids.append(v.eos_id)
        return ids

    def _example_passages(self, example: Example):
        rows = example.passages[: self.config.top_n]
        if not rows:
            raise ValueError(f"example {example.id} has no passages")
        return rows

    def _micro_batch_loss(self, items: Sequence[LabeledExample], weight: float):
        """Loss tensor for one micro-batch, scaled by ``weight``.

        The generation term is the per-example token NLL sum averaged
        over the micro-batch; the class term is the per-example labeled
        sum averaged the same way.
        """
        model = self.model
        cfg = self.config
        batch = len(items)
        queries = [it.example.query for it in items]
        passage_rows = [self._example_passages(it.example) for it in items]
        n_per = len(passage_rows[0])
        memory, memory_mask = model._encode_rows(queries, passage_rows)

        v = model.vocab
        targets = [self._target_ids(it.example.gold_outputs[0]) for it in items]
        t_max = max(len(t) for t in targets)
        ids = np.full((batch, t_max), v.pad_id, dtype=np.int64)
        tgt = np.full((batch, t_max), v.pad_id, dtype=np.int64)
        scales = np.zeros((batch, t_max), dtype=model.config.dtype)
        for b, t in enumerate(targets):
            ids[b, 0] = v.bos_id
            if len(t) > 1:
                ids[b, 1: len(t)] = t[:-1]
            tgt[b, : len(t)] = t
            scales[b, : len(t)] = weight / batch
        logits = _decoder_forward(model.params, model.config, "dec", ids, memory, memory_mask)
        flat = ad.reshape(logits, (batch * t_max, model.config.vocab_size))
        gen_tensor, gen_rows = ad.softmax_xent(flat, tgt.reshape(-1), scales.reshape(-1))
        gen_mean = float((gen_rows.reshape(batch, t_max) * (scales > 0)).sum() / batch)

        class_mean = 0.0
        total = gen_tensor
        if cfg.lambda_ > 0:
            rows, label_targets = [], []
            for b, it in enumerate(items):
                rank_to_block = {p.rank: i for i, p in enumerate(passage_rows[b])}
                for label in it.labels:
                    block = rank_to_block.get(label.passage_rank)
                    if block is None:
                        # labels beyond top_n are simply not trained on
                        continue
                    rows.append(b * n_per + block)
                    label_targets.append(model._label_token_id(label.label))
            if rows:
                class_scales = np.full(len(rows), weight / batch, dtype=model.config.dtype)
                class_tensor, class_rows = model._class_loss_rows(
                    memory, memory_mask,
                    np.asarray(rows, dtype=np.int64),
                    np.asarray(label_targets, dtype=np.int64),
                    class_scales,
                )
                class_mean = float(class_rows.sum() / batch)
                total = ad.add(gen_tensor, ad.scale(class_tensor, cfg.lambda_))
        return total, gen_mean, class_mean

    # ------------------------------------------------------------------
    # steps

    def learning_rate_at(self, step: int) -> float:
        lr = self.config.learning_rate
        if self.config.warmup_steps > 0 and step < self.config.warmup_steps:
            return lr * (step + 1) / self.config.warmup_steps
        return lr

    def train_step(self, batch: Sequence[LabeledExample], step: int) -> LossBreakdown:
        """One optimizer update over grad_accumulation micro-batches."""
        cfg = self.config
        micro = [
            batch[i: i + cfg.batch_size]
            for i in range(0, len(batch), cfg.batch_size)
        ]
        self.model.zero_grad()
        weight = 1.0 / len(micro)
        gen_sum = 0.0
        class_sum = 0.0
        for part in micro:
            total, gen_mean, class_mean = self._micro_batch_loss(part, weight)
            value = float(total.data)
            if not np.isfinite(value):
                ids = [it.example.id for it in part]
                raise TrainingDivergedError(
                    f"non-finite loss {value} at step {step} on examples {ids}", ids
                )
            total.backward()
            gen_sum += gen_mean
            class_sum += class_mean
        self.optimizer.step(self.learning_rate_at(step))
        return LossBreakdown(
            gen=gen_sum / len(micro),
            class_=class_sum / len(micro),
            lambda_=cfg.lambda_,
        )

    # ------------------------------------------------------------------
    # evaluation

    def predict_texts(self, examples: Sequence[Example], eval_batch: int = 64) -> list[str]:
        """Greedy predictions for a list of examples, batched."""
        model = self.model
        out: list[str] = []
        for start in range(0, len(examples), eval_batch):
            part = examples[start: start + eval_batch]
            queries = [ex.query for ex in part]
            rows = [self._example_passages(ex) for ex in part]
            memory, memory_mask = model._encode_rows(queries, rows)
            tokens, _ = model._greedy_decode(memory, memory_mask, model.config.max_target_len)
            out.extend(model.vocab.decode(t) for t in tokens)
        return out

    def evaluate(self, dev: Sequence[LabeledExample]) -> float:
        scorer = getattr(metrics, self.config.dev_metric)
        examples = [it.example for it in dev]
        predictions = self.predict_texts(examples)
        scores = [
            float(scorer(pred, ex.gold_outputs))
            for pred, ex in zip(predictions, examples)
        ]
        return float(np.mean(scores))


def train_loop(model: FusionModel, train: Sequence[LabeledExample],
               dev: Sequence[LabeledExample], config: TrainingConfig,
               out_dir) -> TrainResult:
    """Run the full schedule and return the best-dev checkpoint."""
    if not dev:
        raise ValueError("dev set must be non-empty")
    if not train:
        raise ValueError("train set must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, config)
    rng = np.random.default_rng(config.seed)
    update_size = config.batch_size * config.grad_accumulation

    order: list[int] = []
    history: list[dict] = []
    best_score = -np.inf
    best_step = -1
    checkpoint = out_dir / "best.npz"

    def next_batch() -> list[LabeledExample]:
        nonlocal order
        while len(order) < update_size:
            order.extend(rng.permutation(len(train)).tolist())
        picked, order = order[:update_size], order[update_size:]
        return [train[i] for i in picked]

    for step in range(config.total_steps):
        breakdown = trainer.train_step(next_batch(), step)
        is_eval = (step + 1) % config.eval_interval == 0 or step == config.total_steps - 1
        if not is_eval:
            continue
        score = trainer.evaluate(dev)
        history.append({
            "step": step + 1,
            "dev_score": score,
            "loss": breakdown.to_dict(),
        })
        logger.info("step %d dev %s=%.4f loss=%.4f", step + 1,
                    config.dev_metric, score, breakdown.total)
        if score > best_score:
            best_score = score
            best_step = step + 1
            save_checkpoint(model, checkpoint)

    log_path = out_dir / "train_log.json"
    log_path.write_text(json.dumps({
        "config": config.to_dict(),
        "history": history,
        "best_step": best_step,
        "best_score": best_score,
    }, indent=2, sort_keys=True))
    return TrainResult(
        checkpoint_path=str(checkpoint),
        best_score=float(best_score),
        best_step=best_step,
        history=history,
    )
