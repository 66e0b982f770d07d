"""Fusion-in-decoder generator with an evidentiality decoder.

Each passage is encoded independently with the query prepended; the
decoder cross-attends to the concatenation of all passage encodings.
A second decoder with the same shape scores per-passage evidentiality
by attending to one passage block at a time and emitting a single
label token (<pos> or <neg>) under the full-vocabulary softmax.

The model is a small pre-LN transformer built on the local autodiff
package: shared token embeddings (output logits are tied), per-block
positional embeddings only, GELU feed-forward, no projection biases.
Per-block positions mean there is no cross-passage position signal, so
permuting passages permutes attention masses and leaves the generation
loss unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EvidentialityLabel, Passage
from .vocab import Vocab

LABEL_POSITIVE = "positive"
LABEL_NEGATIVE = "negative"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_hidden: int = 128
    block_len: int = 64
    max_target_len: int = 16
    init_std: float = 0.02
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ValueError("hidden must be divisible by n_heads")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        for name in ("vocab_size", "hidden", "n_layers", "n_heads", "ffn_hidden",
                     "block_len", "max_target_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


# longest query template per task decides the per-passage block budget
_DESK_BLOCK_LEN = {"open_qa": 14, "fact_verification": 16, "dialogue": 20}


def desk_model_config(task: str, vocab_size: int, seed: int = 0) -> ModelConfig:
    """Model sizing that learns the synthetic tasks in minutes on a CPU.

    Eight heads and the 0.1 init scale matter: narrower inits let the
    evidentiality head collapse onto the majority class and the small
    softmax temperature stalls both losses on their unigram plateaus.
    """
    if task not in _DESK_BLOCK_LEN:
        raise ValueError(f"unknown task {task!r}")
    return ModelConfig(
        vocab_size=vocab_size,
        hidden=48,
        n_layers=2,
        n_heads=8,
        ffn_hidden=96,
        block_len=_DESK_BLOCK_LEN[task],
        max_target_len=6,
        init_std=0.1,
        dtype="float32",
        seed=seed,
    )


@dataclass
class EncodedPassage:
    passage_rank: int
    states: np.ndarray  # (L, h)


@dataclass
class FusedRepresentation:
    blocks: list[EncodedPassage]
    total_length: int
    # graph handles used by the loss/decoding ops
    memory: Tensor = field(repr=False)
    memory_mask: np.ndarray = field(repr=False)
    ranks: tuple[int, ...] = field(repr=False)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


@dataclass
class GenerationOutput:
    tokens: list[int]
    text: str
    token_log_probs: list[float]
    length: int


@dataclass
class AttentionSummary:
    per_passage_mass: list[float]
    passage_ranks: list[int]


@dataclass(frozen=True)
class LossBreakdown:
    gen: float
    class_: float
    lambda_: float
    total: float = field(init=False)

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError("lambda must be non-negative")
        object.__setattr__(self, "total", self.gen + self.lambda_ * self.class_)

    def to_dict(self) -> dict:
        return {
            "gen": self.gen,
            "class": self.class_,
            "lambda": self.lambda_,
            "total": self.total,
        }


def _init_params(cfg: ModelConfig) -> dict[str, Tensor]:
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
    for dec in ("dec", "cls"):
        weight(f"{dec}/pos", cfg.max_target_len, h)
    for i in range(cfg.n_layers):
        norm(f"enc/{i}/ln1")
        for w in ("wq", "wk", "wv", "wo"):
            weight(f"enc/{i}/attn/{w}", h, h)
        norm(f"enc/{i}/ln2")
        weight(f"enc/{i}/ffn/w1", h, f)
        weight(f"enc/{i}/ffn/w2", f, h)
        for dec in ("dec", "cls"):
            norm(f"{dec}/{i}/ln1")
            for w in ("wq", "wk", "wv", "wo"):
                weight(f"{dec}/{i}/self/{w}", h, h)
            norm(f"{dec}/{i}/ln2")
            for w in ("wq", "wk", "wv", "wo"):
                weight(f"{dec}/{i}/cross/{w}", h, h)
            norm(f"{dec}/{i}/ln3")
            weight(f"{dec}/{i}/ffn/w1", h, f)
            weight(f"{dec}/{i}/ffn/w2", f, h)
    norm("enc/final")
    norm("dec/final")
    norm("cls/final")
    weight("cls/out", h, cfg.vocab_size)
    return params


def _mha(params: dict, prefix: str, x_q: Tensor, x_kv: Tensor,
         key_mask: np.ndarray | None, causal: bool, cfg: ModelConfig,
         sink: list | None = None) -> Tensor:
    batch, tq, h = x_q.shape
    tk = x_kv.shape[1]
    nh = cfg.n_heads
    dh = h // nh

    def split(t: Tensor, t_len: int) -> Tensor:
        t = ad.reshape(t, (batch, t_len, nh, dh))
        t = ad.transpose(t, (0, 2, 1, 3))
        return ad.reshape(t, (batch * nh, t_len, dh))

    q = split(ad.matmul(x_q, params[prefix + "/wq"]), tq)
    k = split(ad.matmul(x_kv, params[prefix + "/wk"]), tk)
    v = split(ad.matmul(x_kv, params[prefix + "/wv"]), tk)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    probs = ad.masked_softmax(scores, key_mask, causal, nh)
    if sink is not None:
        sink.append(probs.data)
    out = ad.matmul(probs, v)
    out = ad.reshape(out, (batch, nh, tq, dh))
    out = ad.transpose(out, (0, 2, 1, 3))
    out = ad.reshape(out, (batch, tq, h))
    return ad.matmul(out, params[prefix + "/wo"])


def _ffn(params: dict, prefix: str, x: Tensor) -> Tensor:
    return ad.matmul(ad.gelu(ad.matmul(x, params[prefix + "/w1"])), params[prefix + "/w2"])


def _encoder_forward(params: dict, cfg: ModelConfig, ids: np.ndarray,
                     pad_mask: np.ndarray) -> Tensor:
    seq_len = ids.shape[1]
    x = ad.add(
        ad.embedding(params["embed/tokens"], ids),
        ad.embedding(params["enc/pos"], np.arange(seq_len)),
    )
    for i in range(cfg.n_layers):
        pre = ad.layer_norm(x, params[f"enc/{i}/ln1/g"], params[f"enc/{i}/ln1/b"])
        x = ad.add(x, _mha(params, f"enc/{i}/attn", pre, pre, pad_mask, False, cfg))
        pre = ad.layer_norm(x, params[f"enc/{i}/ln2/g"], params[f"enc/{i}/ln2/b"])
        x = ad.add(x, _ffn(params, f"enc/{i}/ffn", pre))
    return ad.layer_norm(x, params["enc/final/g"], params["enc/final/b"])


def _decoder_forward(params: dict, cfg: ModelConfig, which: str, ids: np.ndarray,
                     memory: Tensor, memory_mask: np.ndarray,
                     cross_sink: list | None = None) -> Tensor:
    """Run the generation ("dec") or evidentiality ("cls") decoder.

    Returns full-vocabulary logits of shape (batch, T, V).  The generation
    decoder ties its output projection to the token embedding; the
    evidentiality decoder has its own projection so that its dense label
    gradient does not swamp the shared embedding table.
    """
    seq_len = ids.shape[1]
    if seq_len > cfg.max_target_len:
        raise ValueError(
            f"decoder input length {seq_len} exceeds max_target_len {cfg.max_target_len}"
        )
    x = ad.add(
        ad.embedding(params["embed/tokens"], ids),
        ad.embedding(params[f"{which}/pos"], np.arange(seq_len)),
    )
    for i in range(cfg.n_layers):
        pre = ad.layer_norm(x, params[f"{which}/{i}/ln1/g"], params[f"{which}/{i}/ln1/b"])
        x = ad.add(x, _mha(params, f"{which}/{i}/self", pre, pre, None, True, cfg))
        pre = ad.layer_norm(x, params[f"{which}/{i}/ln2/g"], params[f"{which}/{i}/ln2/b"])
        x = ad.add(x, _mha(params, f"{which}/{i}/cross", pre, memory, memory_mask,
                           False, cfg, sink=cross_sink))
        pre = ad.layer_norm(x, params[f"{which}/{i}/ln3/g"], params[f"{which}/{i}/ln3/b"])
        x = ad.add(x, _ffn(params, f"{which}/{i}/ffn", pre))
    x = ad.layer_norm(x, params[f"{which}/final/g"], params[f"{which}/final/b"])
    if which == "cls":
        return ad.matmul(x, params["cls/out"])
    return ad.matmul(x, ad.transpose(params["embed/tokens"], (1, 0)))


class FusionModel:
    """Fusion-in-decoder generator plus evidentiality decoder."""

    def __init__(self, config: ModelConfig, vocab: Vocab):
        if config.vocab_size != len(vocab):
            raise ValueError(
                f"config.vocab_size={config.vocab_size} but vocabulary has {len(vocab)} tokens"
            )
        self.config = config
        self.vocab = vocab
        self.params = _init_params(config)

    # ------------------------------------------------------------------
    # encoding

    def _passage_token_ids(self, query: str, passage: Passage) -> tuple[np.ndarray, np.ndarray]:
        v = self.vocab
        ids = (
            [v.bos_id]
            + v.encode(query)
            + [v.sep_id]
            + v.encode(passage.title)
            + [v.sep_id]
            + v.encode(passage.text)
            + [v.eos_id]
        )
        length = self.config.block_len
        ids = ids[:length]
        mask = [1.0] * len(ids)
        pad = length - len(ids)
        ids.extend([v.pad_id] * pad)
        mask.extend([0.0] * pad)
        return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=self.config.dtype)

    def _encode_rows(self, queries: Sequence[str],
                     passage_rows: Sequence[Sequence[Passage]]) -> tuple[Tensor, np.ndarray]:
        """Encode a batch of examples with a uniform passage count.

        Returns memory of shape (B, N*L, h) and its key mask (B, N*L).
        """
        n_per = len(passage_rows[0])
        if any(len(row) != n_per for row in passage_rows):
            raise ValueError("all examples in a batch must have the same passage count")
        ids, masks = [], []
        for query, row in zip(queries, passage_rows):
            for passage in row:
                pid, pmask = self._passage_token_ids(query, passage)
                ids.append(pid)
                masks.append(pmask)
        ids = np.stack(ids)  # (B*N, L)
        masks = np.stack(masks)
        hidden = _encoder_forward(self.params, self.config, ids, masks)  # (B*N, L, h)
        batch = len(queries)
        length = self.config.block_len
        memory = ad.reshape(hidden, (batch, n_per * length, self.config.hidden))
        memory_mask = masks.reshape(batch, n_per * length)
        return memory, memory_mask

    def encode_passages(self, query: str, passages: Sequence[Passage],
                        mask: Iterable[int] | None = None) -> FusedRepresentation:
        """Encode passages independently and fuse them in rank order.

        ``mask`` lists passage ranks to remove entirely; their blocks do
        not appear in the result. Masking every passage is an error.
        """
        if not passages:
            raise ValueError("encode_passages requires at least one passage")
        by_rank = sorted(passages, key=lambda p: p.rank)
        ranks = [p.rank for p in by_rank]
        masked = frozenset(mask) if mask is not None else frozenset()
        unknown = masked - set(ranks)
        if unknown:
            raise ValueError(f"mask references absent ranks: {sorted(unknown)}")
        active = [p for p in by_rank if p.rank not in masked]
        if not active:
            raise ValueError("all passages masked; at least one block is required")
        memory, memory_mask = self._encode_rows([query], [active])
        length = self.config.block_len
        states = memory.data.reshape(len(active), length, self.config.hidden)
        blocks = [
            EncodedPassage(passage_rank=p.rank, states=states[i].copy())
            for i, p in enumerate(active)
        ]
        return FusedRepresentation(
            blocks=blocks,
            total_length=len(active) * length,
            memory=memory,
            memory_mask=memory_mask,
            ranks=tuple(p.rank for p in active),
        )

    # ------------------------------------------------------------------
    # generation

    def _greedy_decode(self, memory: Tensor, memory_mask: np.ndarray,
                       max_len: int) -> tuple[list[list[int]], list[list[float]]]:
        batch = memory.shape[0]
        v = self.vocab
        prefix = np.full((batch, 1), v.bos_id, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        tokens: list[list[int]] = [[] for _ in range(batch)]
        log_probs: list[list[float]] = [[] for _ in range(batch)]
        with ad.no_grad():
            for _ in range(max_len):
                logits = _decoder_forward(self.params, self.config, "dec", prefix,
                                          memory, memory_mask)
                last = logits.data[:, -1, :]
                mx = last.max(axis=1, keepdims=True)
                lse = np.log(np.exp(last - mx).sum(axis=1, keepdims=True)) + mx
                log_p = last - lse
                nxt = last.argmax(axis=1)
                for b in range(batch):
                    if done[b]:
                        continue
                    tokens[b].append(int(nxt[b]))
                    log_probs[b].append(float(log_p[b, nxt[b]]))
                    if nxt[b] == v.eos_id:
                        done[b] = True
                if done.all():
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        return tokens, log_probs

    def generate(self, fused: FusedRepresentation, max_len: int | None = None,
                 decoding: str = "greedy") -> GenerationOutput:
        """Decode greedily until end-of-sequence or ``max_len`` tokens."""
        if decoding != "greedy":
            raise ValueError(f"unsupported decoding strategy {decoding!r}")
        if max_len is None:
            max_len = self.config.max_target_len
        if max_len < 1:
            raise ValueError("max_len must be at least 1")
        if max_len > self.config.max_target_len:
            raise ValueError(
                f"max_len {max_len} exceeds max_target_len {self.config.max_target_len}"
            )
        tokens, log_probs = self._greedy_decode(fused.memory, fused.memory_mask, max_len)
        return GenerationOutput(
            tokens=tokens[0],
            text=self.vocab.decode(tokens[0]),
            token_log_probs=log_probs[0],
            length=len(tokens[0]),
        )

    # ------------------------------------------------------------------
    # losses

    def _validate_target(self, target: Sequence[int]) -> np.ndarray:
        if len(target) == 0:
            raise ValueError("target token list must be non-empty")
        arr = np.asarray(list(target), dtype=np.int64)
        if arr.min() < 0 or arr.max() >= self.config.vocab_size:
            bad = [int(t) for t in arr if t < 0 or t >= self.config.vocab_size]
            raise ValueError(f"target contains out-of-vocabulary ids: {bad}")
        if len(arr) > self.config.max_target_len:
            raise ValueError(
                f"target length {len(arr)} exceeds max_target_len {self.config.max_target_len}"
            )
        return arr

    def gen_loss(self, fused: FusedRepresentation, gold: Sequence[int]) -> Tensor:
        """Teacher-forced negative log-likelihood, summed over tokens."""
        target = self._validate_target(gold)
        v = self.vocab
        ids = np.concatenate([[v.bos_id], target[:-1]])[None, :]  # (1, T)
        logits = _decoder_forward(self.params, self.config, "dec", ids,
                                  fused.memory, fused.memory_mask)
        flat = ad.reshape(logits, (len(target), self.config.vocab_size))
        scales = np.ones(len(target), dtype=self.config.dtype)
        loss, _ = ad.softmax_xent(flat, target, scales)
        return loss

    def sequence_log_prob(self, fused: FusedRepresentation, target: Sequence[int]) -> float:
        """Sum of token log-probabilities; the exact negation of gen_loss."""
        with ad.no_grad():
            return -float(self.gen_loss(fused, target).data)

    def _class_loss_rows(self, memory: Tensor, memory_mask: np.ndarray,
                         block_rows: np.ndarray, targets: np.ndarray,
                         scales: np.ndarray):
        """Single-step evidentiality loss over selected passage blocks.

        ``memory`` is (B, N*L, h); ``block_rows`` indexes the flattened
        (B*N, L, h) view so each selected row cross-attends to exactly
        one passage block.
        """
        length = self.config.block_len
        hidden = self.config.hidden
        total_rows = memory.shape[0] * (memory.shape[1] // length)
        blocks = ad.reshape(memory, (total_rows, length, hidden))
        picked = ad.take(blocks, block_rows)
        picked_mask = memory_mask.reshape(total_rows, length)[block_rows]
        ids = np.full((len(block_rows), 1), self.vocab.bos_id, dtype=np.int64)
        logits = _decoder_forward(self.params, self.config, "cls", ids, picked, picked_mask)
        flat = ad.reshape(logits, (len(block_rows), self.config.vocab_size))
        return ad.softmax_xent(flat, targets, scales)

    def _label_token_id(self, label: str) -> int:
        if label == LABEL_POSITIVE:
            return self.vocab.pos_id
        if label == LABEL_NEGATIVE:
            return self.vocab.neg_id
        raise ValueError(f"unknown evidentiality label {label!r}")

    def class_loss(self, fused: FusedRepresentation,
                   labels: Sequence[EvidentialityLabel]) -> Tensor:
        """Evidentiality loss summed over labeled passages.

        Each labeled passage contributes -log of the full-vocabulary
        softmax probability of its label token, computed by the
        classification decoder attending only to that passage's block.
        Unlabeled passages contribute nothing.
        """
        if not labels:
            return Tensor(np.zeros((), dtype=self.config.dtype))
        rank_to_block = {rank: i for i, rank in enumerate(fused.ranks)}
        rows, targets = [], []
        for label in labels:
            block = rank_to_block.get(label.passage_rank)
            if block is None:
                raise ValueError(
                    f"label references rank {label.passage_rank}, absent from the fused input"
                )
            rows.append(block)
            targets.append(self._label_token_id(label.label))
        scales = np.ones(len(rows), dtype=self.config.dtype)
        loss, _ = self._class_loss_rows(
            fused.memory, fused.memory_mask,
            np.asarray(rows, dtype=np.int64),
            np.asarray(targets, dtype=np.int64),
            scales,
        )
        return loss

    def multitask_loss(self, fused: FusedRepresentation, gold: Sequence[int],
                       labels: Sequence[EvidentialityLabel],
                       lambda_: float) -> LossBreakdown:
        """Generation loss plus lambda-weighted evidentiality loss."""
        if lambda_ < 0:
            raise ValueError("lambda must be non-negative")
        with ad.no_grad():
            gen = float(self.gen_loss(fused, gold).data)
            class_ = float(self.class_loss(fused, labels).data)
        return LossBreakdown(gen=gen, class_=class_, lambda_=lambda_)

    def predict_evidentiality(self, fused: FusedRepresentation) -> list[tuple[int, str, float]]:
        """Label every block positive or negative with its softmax probability.

        The prediction conditions on the query and one passage at a
        time; the gold output is never an input.
        """
        v = self.vocab
        n_blocks = fused.n_blocks
        rows = np.arange(n_blocks, dtype=np.int64)
        ids = np.full((n_blocks, 1), v.bos_id, dtype=np.int64)
        length = self.config.block_len
        with ad.no_grad():
            blocks = ad.reshape(fused.memory, (n_blocks, length, self.config.hidden))
            picked = ad.take(blocks, rows)
            picked_mask = fused.memory_mask.reshape(n_blocks, length)
            logits = _decoder_forward(self.params, self.config, "cls", ids,
                                      picked, picked_mask)
        flat = logits.data.reshape(n_blocks, self.config.vocab_size)
        mx = flat.max(axis=1, keepdims=True)
        e = np.exp(flat - mx)
        probs = e / e.sum(axis=1, keepdims=True)
        out = []
        for i, rank in enumerate(fused.ranks):
            p_pos = float(probs[i, v.pos_id])
            p_neg = float(probs[i, v.neg_id])
            if p_pos > p_neg:
                out.append((rank, LABEL_POSITIVE, p_pos))
            else:
                out.append((rank, LABEL_NEGATIVE, p_neg))
        return out

    # ------------------------------------------------------------------
    # attention accounting

    def passage_attention_scores(self, fused: FusedRepresentation,
                                 output: GenerationOutput) -> AttentionSummary:
        """Cross-attention mass per passage for a generated output.

        Teacher-forces the output tokens and averages cross-attention
        probabilities over decoder layers, heads, and output positions,
        then sums within each passage block and renormalizes.
        """
        target = self._validate_target(output.tokens)
        v = self.vocab
        ids = np.concatenate([[v.bos_id], target[:-1]])[None, :]
        sink: list[np.ndarray] = []
        with ad.no_grad():
            _decoder_forward(self.params, self.config, "dec", ids,
                             fused.memory, fused.memory_mask, cross_sink=sink)
        # (layers, heads, T, N*L) -> mean over layers/heads/positions
        stacked = np.stack(sink).astype(np.float64)
        mean_over_positions = stacked.mean(axis=(0, 1, 2))
        length = self.config.block_len
        mass = mean_over_positions.reshape(fused.n_blocks, length).sum(axis=1)
        total = mass.sum()
        if total <= 0:
            raise ValueError("attention mass vanished; memory mask excludes every key")
        mass = mass / total
        return AttentionSummary(
            per_passage_mass=[float(m) for m in mass],
            passage_ranks=list(fused.ranks),
        )

    # ------------------------------------------------------------------
    # parameter plumbing

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def save_checkpoint(model: FusionModel, path) -> str:
    """Write a self-describing checkpoint; reload is bit-exact."""
    path = str(path)
    if not path.endswith(".npz"):
        path += ".npz"
    meta = {
        "format_version": 1,
        "config": asdict(model.config),
        "vocab": model.vocab.to_list(),
    }
    arrays = {"param::" + name: t.data for name, t in model.params.items()}
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)
    return path


def load_checkpoint(path) -> FusionModel:
    with np.load(str(path)) as archive:
        meta = json.loads(bytes(archive["meta_json"]).decode("utf-8"))
        config = ModelConfig(**meta["config"])
        vocab = Vocab(meta["vocab"])
        model = FusionModel(config, vocab)
        for name, tensor in model.params.items():
            key = "param::" + name
            if key not in archive:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            tensor.data = archive[key].copy()
    return model
