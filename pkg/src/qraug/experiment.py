"""End-to-end comparison of retrievers trained with and without synthetic pairs.

The pipeline draws a pool of golden rewrites (the retrieval index), corrupts
a low-resource slice of it into training pairs, trains the augmentation
models, augments the whole pool, then trains one retriever per arm and
scores it on friction and rephrase testsets drawn with a held-out seed.
"""

import contextlib
import logging
from collections.abc import Iterator, Sequence
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import reward
from .augmenter import AugmentSummary, augment, merge_training_sets
from .config import Config
from .corpus import PairExample, Vocabulary, build_vocab, split_pairs, write_pairs
from .phonetics import PronunciationLexicon, load_lexicon
from .retrieval import build_index, evaluate_p_at_k, train_retriever
from .rewards import train_semantic_encoder
from .scst import train_scst
from .seq2seq import Seq2SeqModel, as_examples, train_mle
from .synthetic import FRICTION_WEIGHTS, REPHRASE_WEIGHTS, corrupt_rewrites, golden_rewrites
from .util import JsonlWriter, make_rng

__all__ = ["TESTSETS", "run_experiment"]

logger = logging.getLogger(__name__)

TESTSETS = {"friction": FRICTION_WEIGHTS, "rephrase": REPHRASE_WEIGHTS}  #: Corruption mix per testset


@contextlib.contextmanager
def _metrics(workdir: Path | None, name: str) -> Iterator[JsonlWriter | None]:
    if workdir is None:
        yield None
        return
    with JsonlWriter(workdir / f"metrics-{name}.jsonl") as writer:
        yield writer


def _vocab(pairs: Sequence[PairExample], pool: Sequence[str], min_count: int) -> Vocabulary:
    return build_vocab([*pairs, *(PairExample(r, r) for r in pool)], min_count)


def _synthesize(
    config: Config,
    train: list[PairExample],
    pool: list[str],
    lexicon: PronunciationLexicon,
    split_seed: int,
    workdir: Path | None,
    progress: bool,
) -> dict[str, tuple[list[PairExample], AugmentSummary]]:
    arms = config.experiment.arms
    max_len = config.model.max_len
    vocab = _vocab(train, pool, config.corpus.min_count)
    fit, dev = split_pairs(train, [1.0 - config.corpus.dev_fraction, config.corpus.dev_fraction], split_seed)
    fit_ex = as_examples(fit, vocab, max_len=max_len)
    dev_ex = as_examples(dev, vocab, max_len=max_len) or None

    base = Seq2SeqModel(config.model, vocab)
    with _metrics(workdir, "mle") as metrics:
        train_mle(base, fit_ex, config.train, dev=dev_ex, metrics=metrics, progress=progress)
    models = {"mle": base} if "mle" in arms else {}

    encoder = None
    if {"semantic", "combined"} & set(arms):
        with _metrics(workdir, "encoder") as metrics:
            encoder = train_semantic_encoder(train, config.encoder, metrics=metrics, progress=progress)
    for name in arms:
        if name == "mle":
            continue
        params = {
            "phonetic": {"lexicon": lexicon},
            "semantic": {"encoder": encoder},
            "combined": {"lexicon": lexicon, "encoder": encoder, "alpha": config.scst.alpha},
        }[name]
        model = base.clone()
        with _metrics(workdir, f"scst-{name}") as metrics:
            train_scst(
                model,
                fit_ex,
                reward(name, **params),
                replace(config.scst, reward=name),
                dev=dev_ex,
                metrics=metrics,
                progress=progress,
            )
        models[name] = model

    out = {}
    for name in arms:
        summary = AugmentSummary()
        pairs = list(augment(models[name], pool, config.augment, lexicon=lexicon, summary=summary, progress=progress))
        out[name] = (pairs, summary)
    return out


def _evaluate(
    config: Config,
    pairs: list[PairExample],
    pool: list[str],
    testsets: dict[str, list[PairExample]],
    workdir: Path | None,
    name: str,
    progress: bool,
) -> dict:
    vocab = _vocab(pairs, pool, config.corpus.min_count)
    with _metrics(workdir, f"retriever-{name}") as metrics:
        encoder = train_retriever(pairs, config.retrieval, vocab=vocab, metrics=metrics, progress=progress)
    index = build_index(encoder, pool)
    record: dict = {"train_pairs": len(pairs)}
    for testset, items in testsets.items():
        record[testset] = evaluate_p_at_k(index, items, config.retrieval.ks).to_record()
    return record


def _deltas(arm: dict, baseline: dict, testsets: Sequence[str], ks: Sequence[int]) -> dict:
    out: dict = {}
    for testset in testsets:
        out[testset] = {}
        for k in ks:
            key = f"p@{k}"
            before, after = baseline[testset][key], arm[testset][key]
            out[testset][key] = {
                "abs": after - before,
                "rel": (after - before) / before if before > 0 else None,
            }
    return out


def run_experiment(config: Config, *, workdir: str | Path | None = None, progress: bool = False) -> dict:
    """Run the whole comparison and return the report.

    The report holds data sizes, P@K per testset for the Training-only
    baseline and for every augmented arm, and each arm's absolute and
    relative deltas against the baseline. It carries no timings, so the
    same configuration always yields the same report.

    Args:
        config: Resolved configuration.
        workdir: Optional directory for datasets and training metrics.
        progress: Show progress bars on standard error.
    """
    exp = config.experiment
    workdir = Path(workdir) if workdir is not None else None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(exp.seed).generate_state(4)
    pool_seed, train_seed, test_seed, split_seed = (int(x) for x in seeds)
    lexicon = load_lexicon()

    pool = golden_rewrites(pool_seed, exp.pool_size)
    order = make_rng(train_seed).permutation(len(pool))
    train_rewrites = [pool[i] for i in order[: exp.train_pairs]]
    train = list(corrupt_rewrites(train_rewrites, train_seed, lexicon, weights=config.corpus.weights))
    picks = make_rng(test_seed).choice(len(pool), size=min(exp.test_pairs, len(pool)), replace=False)
    test_rewrites = [pool[i] for i in picks]
    testsets = {
        name: list(corrupt_rewrites(test_rewrites, test_seed + i, lexicon, weights=weights))
        for i, (name, weights) in enumerate(TESTSETS.items())
    }
    logger.info(
        "experiment: pool %d, train %d, %s",
        len(pool),
        len(train),
        ", ".join(f"{t} {len(v)}" for t, v in testsets.items()),
    )
    if workdir is not None:
        write_pairs(workdir / "train.jsonl", train)
        for name, items in testsets.items():
            write_pairs(workdir / f"test-{name}.jsonl", items)

    if exp.augment and exp.arms:
        synthetic = _synthesize(config, train, pool, lexicon, split_seed, workdir, progress)
    else:
        synthetic = {name: ([], AugmentSummary()) for name in exp.arms}

    baseline = _evaluate(config, train, pool, testsets, workdir, "baseline", progress)
    arms = {}
    for name, (pairs, summary) in synthetic.items():
        if workdir is not None:
            write_pairs(workdir / f"synthetic-{name}.jsonl", pairs)
        merged = merge_training_sets(train, pairs)
        record = _evaluate(config, merged, pool, testsets, workdir, name, progress)
        record["synthetic_pairs"] = len(pairs)
        record["augment"] = asdict(summary)
        record["delta"] = _deltas(record, baseline, list(testsets), config.retrieval.ks)
        arms[name] = record
        for testset in testsets:
            logger.info("arm %s on %s: %s", name, testset, record["delta"][testset])

    return {
        "seed": exp.seed,
        "profile": config.profile,
        "sizes": {
            "pool": len(pool),
            "train": len(train),
            "testsets": {t: len(v) for t, v in testsets.items()},
        },
        "baseline": baseline,
        "arms": arms,
    }
