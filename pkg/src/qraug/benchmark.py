#!/usr/bin/env python3
"""
Throughput of the training and decoding paths on a micro model.

- teacher-forced forward + backward (tokens/s)
- greedy, sampled and beam decoding (sequences/s)

Run with ``python -m qraug.benchmark``; one tab-separated line per
measurement.
"""

import time

from .autodiff import Tape
from .corpus import build_vocab
from .phonetics import load_lexicon
from .seq2seq import (
    Batch,
    ModelConfig,
    Seq2SeqModel,
    as_examples,
    decode_beam,
    greedy_batch,
    sample_batch,
    teacher_forced_loss,
)
from .synthetic import generate_synthetic_corpus
from .util import make_rng

N_PAIRS = 256
BATCH = 32
ITERATIONS = 10
MICRO = ModelConfig(d_tok=32, d_hid=32, enc_layers=1, dec_layers=1, heads=2, d_ff=64)


def _rate(count: int, elapsed_s: float) -> float:
    return count / elapsed_s if elapsed_s > 0 else float("inf")


def bench_train(model: Seq2SeqModel, examples) -> None:
    batch = Batch.of(examples[:BATCH])
    tokens = int(batch.mask.sum())
    t0 = time.perf_counter()
    for _ in range(ITERATIONS):
        with Tape() as tape:
            loss = teacher_forced_loss(model, batch)
        tape.backward(loss)
    t1 = time.perf_counter()
    print(f"train\t{_rate(tokens * ITERATIONS, t1 - t0):10.1f} tok/s")


def bench_decode(model: Seq2SeqModel, examples) -> None:
    sources = [s for s, _ in examples[:BATCH]]
    rng = make_rng(0)
    runs = {
        "greedy": lambda: greedy_batch(model, sources, BATCH),
        "sample": lambda: sample_batch(model, sources, rng, 1.0, BATCH),
        "beam": lambda: [decode_beam(model, s, 4, 0.6) for s in sources[:8]],
    }
    for name, run in runs.items():
        t0 = time.perf_counter()
        n = len(run())
        t1 = time.perf_counter()
        print(f"{name}\t{_rate(n, t1 - t0):10.1f} seq/s")


def main() -> None:
    pairs = list(generate_synthetic_corpus(0, N_PAIRS, load_lexicon()))
    vocab = build_vocab(pairs)
    model = Seq2SeqModel(MICRO, vocab)
    examples = as_examples(pairs, vocab, max_len=MICRO.max_len)
    bench_train(model, examples)
    bench_decode(model, examples)


if __name__ == "__main__":
    main()
