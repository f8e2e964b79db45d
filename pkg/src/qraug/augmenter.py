"""Turn golden rewrites into synthetic (request, rewrite) pairs.

A trained rewrite-to-request model decodes candidate requests for each
rewrite; filters drop copies of the input, empty outputs, outputs with
unknown tokens and per-input duplicates. Output order is input order, then
candidate order.
"""

import logging
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import asdict, dataclass

from tqdm import tqdm

from .corpus import UNK, PairExample, TokenSequence, tokenize
from .decoding import DecodeResult
from .encoder import SemanticEncoder
from .phonetics import PronunciationLexicon, phonetic_reward
from .rewards import semantic_dissimilarity
from .seq2seq import Seq2SeqModel, decode_beam, greedy_batch, sample_batch
from .util import make_rng

__all__ = ["MODES", "AugmentConfig", "AugmentSummary", "augment", "merge_training_sets"]

logger = logging.getLogger(__name__)

MODES = ("greedy", "beam", "sample")  #: Decode modes augment() accepts


@dataclass
class AugmentConfig:
    mode: str = "greedy"
    n_per_input: int = 1
    temperature: float = 1.0
    beam_width: int = 4
    length_penalty: float = 0.6
    drop_copies: bool = True
    min_reward: float | None = None  #: Lowest r_p kept; None keeps all
    max_reward: float | None = None  #: Highest r_p kept; None keeps all
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"augment.mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.n_per_input < 1:
            raise ValueError("augment.n_per_input must be at least 1")
        if self.n_per_input > 1 and self.mode != "sample":
            raise ValueError("augment.n_per_input > 1 needs mode 'sample'")
        if self.batch_size < 1:
            raise ValueError("augment.batch_size must be positive")
        if not self.temperature > 0:
            raise ValueError("augment.temperature must be positive")


@dataclass
class AugmentSummary:
    inputs: int = 0
    candidates: int = 0
    copies: int = 0
    empty: int = 0
    unknown: int = 0
    duplicates: int = 0
    out_of_range: int = 0
    emitted: int = 0


def _as_sequence(rewrite: TokenSequence | str, model: Seq2SeqModel) -> TokenSequence:
    text = rewrite if isinstance(rewrite, str) else rewrite.text
    return tokenize(text, model.vocab, model.config.max_len)


def _decode(model: Seq2SeqModel, chunk: list[TokenSequence], config: AugmentConfig, rng) -> list[list[DecodeResult]]:
    n = config.n_per_input
    if config.mode == "greedy":
        return [[r] for r in greedy_batch(model, chunk, config.batch_size)]
    if config.mode == "beam":
        return [[decode_beam(model, s, config.beam_width, config.length_penalty)] for s in chunk]
    flat = sample_batch(model, [s for s in chunk for _ in range(n)], rng, config.temperature, config.batch_size)
    return [flat[i * n : (i + 1) * n] for i in range(len(chunk))]


def augment(
    model: Seq2SeqModel,
    rewrites: Iterable[TokenSequence | str],
    config: AugmentConfig,
    *,
    lexicon: PronunciationLexicon | None = None,
    encoder: SemanticEncoder | None = None,
    summary: AugmentSummary | None = None,
    progress: bool = False,
) -> Iterator[PairExample]:
    """Stream synthetic pairs for ``rewrites``.

    Pairs carry ``mode`` in their metadata, plus ``r_p`` when a lexicon is
    given and ``r_d`` when an encoder is given.

    Raises:
        ValueError: If reward thresholds are set without a lexicon.
    """
    if (config.min_reward is not None or config.max_reward is not None) and lexicon is None:
        raise ValueError("augment reward thresholds need a lexicon")
    summary = summary if summary is not None else AugmentSummary()
    return _augment(model, rewrites, config, lexicon, encoder, summary, progress)


def _chunked(items: Iterable, size: int) -> Iterator[list]:
    chunk = []
    for item in items:
        chunk.append(item)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def _augment(model, rewrites, config, lexicon, encoder, summary, progress) -> Iterator[PairExample]:
    rng = make_rng(config.seed)
    vocab = model.vocab
    bar = tqdm(desc=f"augment/{config.mode}", unit="input", disable=not progress, leave=False)
    for chunk in _chunked(rewrites, config.batch_size):
        sources = [_as_sequence(r, model) for r in chunk]
        for source, results in zip(sources, _decode(model, sources, config, rng)):
            summary.inputs += 1
            seen: set[str] = set()
            for result in results:
                summary.candidates += 1
                text = result.text(vocab)
                if not text:
                    summary.empty += 1
                    continue
                if config.drop_copies and text == source.text:
                    summary.copies += 1
                    continue
                if UNK in result.tokens:
                    summary.unknown += 1
                    continue
                if text in seen:
                    summary.duplicates += 1
                    continue
                seen.add(text)
                meta: dict = {"mode": config.mode}
                if lexicon is not None:
                    r_p = phonetic_reward(text, source.text, lexicon)
                    if (config.min_reward is not None and r_p < config.min_reward) or (
                        config.max_reward is not None and r_p > config.max_reward
                    ):
                        summary.out_of_range += 1
                        continue
                    meta["r_p"] = r_p
                if encoder is not None:
                    meta["r_d"] = semantic_dissimilarity(text, source.text, encoder)
                summary.emitted += 1
                yield PairExample(text, source.text, None, meta)
        bar.update(len(chunk))
    bar.close()
    logger.info("augment: %s", asdict(summary))


def merge_training_sets(original: Sequence[PairExample], synthetic: Sequence[PairExample]) -> list[PairExample]:
    """Concatenate, keeping the first copy of every (request, rewrite) pair."""
    seen: set[tuple[str, str]] = set()
    merged = []
    for pair in (*original, *synthetic):
        if pair.key not in seen:
            seen.add(pair.key)
            merged.append(pair)
    logger.info(
        "merged %d original + %d synthetic pairs into %d", len(original), len(synthetic), len(merged)
    )
    return merged
