#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

Two views: per-kernel microbenchmarks at the array shapes the
desk-scale generator actually produces, and end-to-end training-step
timing. The backend is fixed at import time, so the end-to-end
comparison launches one subprocess per backend with EVIDGEN_KERNELS
pinned.

Run:  python3 benchmarks/bench_kernels.py [--repeat N] [--steps N]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from evidgen.analysis import format_table
from evidgen.kernels import available_backends

RNG = np.random.default_rng(0)


def _f32(*shape):
    return RNG.standard_normal(shape).astype(np.float32)


def _cases():
    """Kernel calls at desk-model shapes (batch 32, 7 passages of 14 tokens)."""
    rows, hidden, ffn = 3136, 48, 96
    x = _f32(rows, hidden)
    gamma, beta = _f32(hidden), _f32(hidden)
    dy = _f32(rows, hidden)
    mean = x.mean(axis=1)
    rstd = (1.0 / np.sqrt(x.var(axis=1) + 1e-5)).astype(np.float32)

    enc_scores = _f32(256, 14, 14)
    enc_mask = np.ones((32, 14), dtype=np.float32)
    cross_scores = _f32(256, 6, 98)
    cross_mask = np.ones((32, 98), dtype=np.float32)
    enc_probs = np.abs(_f32(256, 14, 14)) + 1e-3
    enc_probs /= enc_probs.sum(axis=-1, keepdims=True)

    act = _f32(rows * ffn)  # the ops layer flattens before the gelu kernels
    logits = _f32(192, 109)
    targets = RNG.integers(0, 109, size=192)
    probs = np.abs(_f32(192, 109)) + 1e-3
    probs /= probs.sum(axis=1, keepdims=True)
    scales = np.full(192, 1.0 / 192, dtype=np.float32)

    return [
        ("layer_norm_fwd", lambda k: k.layer_norm_fwd(x, gamma, beta, 1e-5)),
        ("layer_norm_bwd", lambda k: k.layer_norm_bwd(dy, x, gamma, mean, rstd)),
        ("attn_softmax_fwd (self)",
         lambda k: k.attn_softmax_fwd(enc_scores, enc_mask, False, 8)),
        ("attn_softmax_fwd (cross)",
         lambda k: k.attn_softmax_fwd(cross_scores, cross_mask, False, 8)),
        ("attn_softmax_bwd",
         lambda k: k.attn_softmax_bwd(enc_scores, enc_probs)),
        ("gelu_fwd", lambda k: k.gelu_fwd(act)),
        ("gelu_bwd", lambda k: k.gelu_bwd(act, act)),
        ("softmax_xent_fwd", lambda k: k.softmax_xent_fwd(logits, targets)),
        ("softmax_xent_bwd",
         lambda k: k.softmax_xent_bwd(probs, targets, scales)),
    ]


def _time(fn, repeat: int) -> float:
    fn()  # warm up
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def micro_rows(repeat: int) -> list[dict]:
    backends = available_backends()
    rows = []
    for name, call in _cases():
        row: dict[str, object] = {"kernel": name}
        for backend, module in backends.items():
            row[backend] = _time(lambda: call(module), repeat) * 1e6
        if "compiled" in row and "python" in row:
            row["speedup"] = row["python"] / row["compiled"]
        rows.append(row)
    return rows


def train_step_probe(steps: int) -> None:
    """Time full training steps under the backend active in this process."""
    from evidgen.kernels import BACKEND
    from evidgen.model import FusionModel, desk_model_config
    from evidgen.pipeline import PipelineConfig, dataset_vocab, generate_splits
    from evidgen.training import Trainer, attach_labels, desk_preset

    config = PipelineConfig(n_train=256, n_dev=8)
    train, labels, _dev, _ = generate_splits(config)
    vocab = dataset_vocab(train)
    model = FusionModel(desk_model_config("open_qa", len(vocab)), vocab)
    trainer = Trainer(model, desk_preset("open_qa", total_steps=max(steps, 1),
                                         warmup_steps=1))
    items = attach_labels(train, labels)
    batch = items[:32]
    trainer.train_step(batch, 0)  # warm up
    start = time.perf_counter()
    for step in range(steps):
        trainer.train_step(batch, step)
    elapsed = (time.perf_counter() - start) / steps
    print(json.dumps({"backend": BACKEND, "seconds_per_step": elapsed}))


def end_to_end_rows(steps: int) -> list[dict]:
    rows = []
    for choice, label in (("py", "python"), ("c", "compiled")):
        if label not in available_backends():
            continue
        env = dict(os.environ, EVIDGEN_KERNELS=choice)
        out = subprocess.run(
            [sys.executable, __file__, "--probe", str(steps)],
            capture_output=True, text=True, env=env, check=True)
        payload = json.loads(out.stdout.strip().splitlines()[-1])
        assert payload["backend"] == label, payload
        rows.append({"backend": label,
                     "ms_per_train_step": payload["seconds_per_step"] * 1e3})
    if len(rows) == 2:
        rows[1]["speedup"] = rows[0]["ms_per_train_step"] / rows[1]["ms_per_train_step"]
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=30,
                        help="timing repetitions per kernel")
    parser.add_argument("--steps", type=int, default=10,
                        help="training steps per backend for the end-to-end run")
    parser.add_argument("--probe", type=int, default=None, help=argparse.SUPPRESS)
    args = parser.parse_args(argv)

    if args.probe is not None:
        train_step_probe(args.probe)
        return 0

    print(f"backends available: {', '.join(available_backends())}\n")
    rows = micro_rows(args.repeat)
    columns = ["kernel", "python", "compiled", "speedup"]
    columns = [c for c in columns if any(c in r for r in rows)]
    print("per-kernel best-of-%d, microseconds:" % args.repeat)
    print(format_table(rows, columns))

    print("end-to-end training step (batch 32, desk model):")
    print(format_table(end_to_end_rows(args.steps),
                       ["backend", "ms_per_train_step", "speedup"]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
