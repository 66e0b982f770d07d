"""Shared fixtures: a closed tiny vocabulary and hand-built examples."""

import pytest

from evidgen.corpus import Example, Passage
from evidgen.model import FusionModel, ModelConfig
from evidgen.vocab import Vocab

BASE_TOKENS = ["find", "k1", "k2", "v1", "v2", "v3", "w1", "w2", "w3", "t1", "t2"]


def make_passage(rank: int, text: str, title: str = "t1",
                 score: float | None = None) -> Passage:
    return Passage(
        id=f"p{rank}",
        title=title,
        text=text,
        retriever_score=score if score is not None else float(100 - rank),
        rank=rank,
    )


def make_example(ex_id: str = "ex-0", query: str = "find k1",
                 golds=("v1",), task: str = "open_qa",
                 texts=("k1 v1", "w1 w2")) -> Example:
    passages = [make_passage(i + 1, text) for i, text in enumerate(texts)]
    return Example(id=ex_id, query=query, gold_outputs=list(golds), task=task,
                   passages=passages)


@pytest.fixture
def tiny_vocab() -> Vocab:
    return Vocab.build([" ".join(BASE_TOKENS)])


@pytest.fixture
def model_factory(tiny_vocab):
    """Small models sized for exhaustive numeric checks, float64 by default."""
    def build(dtype: str = "float64", seed: int = 0, **overrides) -> FusionModel:
        settings = dict(vocab_size=len(tiny_vocab), hidden=8, n_layers=1,
                        n_heads=2, ffn_hidden=16, block_len=10,
                        max_target_len=4, init_std=0.3, dtype=dtype, seed=seed)
        settings.update(overrides)
        return FusionModel(ModelConfig(**settings), tiny_vocab)
    return build


@pytest.fixture
def two_passage_example() -> Example:
    return make_example(texts=("k1 v1 w1", "w2 w3"))
