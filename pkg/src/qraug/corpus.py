"""Tokenization, vocabulary and (request, rewrite) datasets.

Utterances are normalized to lowercase spoken form ("117" becomes
"one hundred seventeen") and split on whitespace, one token per word.
"""

import logging
import re
from collections import Counter
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .util import read_jsonl, write_jsonl

__all__ = [
    "PAD",
    "BOS",
    "EOS",
    "UNK",
    "RESERVED",
    "MAX_LEN",
    "Vocabulary",
    "TokenSequence",
    "PairExample",
    "normalize",
    "number_to_words",
    "tokenize",
    "detokenize",
    "build_vocab",
    "read_pairs",
    "write_pairs",
    "split_pairs",
    "pad_batch",
    "batches_by_tokens",
]

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3  #: Reserved token ids
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")  #: Surface forms of the reserved ids
MAX_LEN = 25  #: Default maximum utterance length in tokens, EOS included

_ONES = (
    "zero one two three four five six seven eight nine ten eleven twelve thirteen "
    "fourteen fifteen sixteen seventeen eighteen nineteen"
).split()
_TENS = "_ _ twenty thirty forty fifty sixty seventy eighty ninety".split()
_SCALES = ((1_000_000_000, "billion"), (1_000_000, "million"), (1_000, "thousand"))


def number_to_words(n: int) -> str:
    """Spoken form of a non-negative integer, without "and"."""
    if n < 0:
        raise ValueError("number must be non-negative")
    if n < 20:
        return _ONES[n]
    if n < 100:
        tens, rest = divmod(n, 10)
        return _TENS[tens] + ("" if rest == 0 else " " + _ONES[rest])
    if n < 1000:
        hundreds, rest = divmod(n, 100)
        head = _ONES[hundreds] + " hundred"
        return head if rest == 0 else f"{head} {number_to_words(rest)}"
    for size, name in _SCALES:
        if n >= size:
            head, rest = divmod(n, size)
            words = f"{number_to_words(head)} {name}"
            return words if rest == 0 else f"{words} {number_to_words(rest)}"
    raise AssertionError("unreachable")


_DIGITS = re.compile(r"\d+")
_NON_WORD = re.compile(r"[^a-z0-9' ]+")


def normalize(text: str) -> str:
    """Lowercase, spell out numbers, drop punctuation other than apostrophes."""
    text = _DIGITS.sub(lambda m: f" {number_to_words(int(m.group()))} ", text.lower())
    return " ".join(_NON_WORD.sub(" ", text).split())


class Vocabulary:
    """Bijection between token strings and integer ids.

    Ids 0..3 are the reserved PAD, BOS, EOS and UNK; corpus tokens start at 4.
    """

    __slots__ = ("_tokens", "_index")

    def __init__(self, tokens: Iterable[str]) -> None:
        self._tokens: list[str] = list(RESERVED)
        self._index: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for token in tokens:
            if token in self._index:
                raise ValueError(f"duplicate or reserved token {token!r}")
            if not token or token != token.strip() or " " in token:
                raise ValueError(f"invalid token {token!r}")
            self._index[token] = len(self._tokens)
            self._tokens.append(token)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __hash__(self) -> int:
        return hash(tuple(self._tokens))

    @property
    def tokens(self) -> list[str]:
        """Corpus tokens in id order (reserved tokens excluded)."""
        return self._tokens[len(RESERVED) :]

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise ValueError(f"token id {token_id} out of range for vocabulary of {len(self)}")
        return self._tokens[token_id]

    def save(self, path: str | Path) -> None:
        """Write the header row of reserved tokens, then one token per line.

        Line ``n`` after the header holds token id ``n + 4``.
        """
        Path(path).write_text(
            "\t".join(RESERVED) + "\n" + "".join(t + "\n" for t in self.tokens),
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].split("\t") != list(RESERVED):
            raise ValueError(f"{path}: missing reserved-token header")
        return cls(line for line in lines[1:] if line)


@dataclass(frozen=True, slots=True)
class TokenSequence:
    """Token ids bound to a vocabulary, with the surface text they came from."""

    ids: tuple[int, ...]
    text: str

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def words(self) -> list[str]:
        return self.text.split()


@dataclass(frozen=True, slots=True)
class PairExample:
    """One (request, rewrite) record.

    Both sides are stored as normalized surface text; ``encode`` binds them to
    a vocabulary. ``tag`` names the corruption family for synthetic data and
    ``meta`` carries any extra fields (decode mode, reward scores, ...).
    """

    request: str
    rewrite: str
    tag: str | None = None
    meta: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self) -> None:
        for name in ("request", "rewrite"):
            value = getattr(self, name)
            if not isinstance(value, str):
                raise TypeError(f"{name} must be a string")
            clean = normalize(value)
            if not clean:
                raise ValueError(f"{name} is empty after tokenization")
            object.__setattr__(self, name, clean)

    @property
    def key(self) -> tuple[str, str]:
        """Identity used for duplicate removal."""
        return self.request, self.rewrite

    def encode(self, vocab: Vocabulary, max_len: int = MAX_LEN) -> tuple[TokenSequence, TokenSequence]:
        return tokenize(self.request, vocab, max_len), tokenize(self.rewrite, vocab, max_len)

    def to_record(self) -> dict[str, Any]:
        record = dict(self.meta)
        record["request"] = self.request
        record["rewrite"] = self.rewrite
        if self.tag is not None:
            record["tag"] = self.tag
        return record


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_LEN) -> TokenSequence:
    """Normalize, split on whitespace, map to ids and append EOS.

    Inputs longer than ``max_len`` keep their first ``max_len - 1`` words.

    Raises:
        ValueError: If the text has no tokens.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    words = normalize(text).split()
    if not words:
        raise ValueError("cannot tokenize an empty utterance")
    words = words[: max_len - 1]
    return TokenSequence(tuple(vocab.id(w) for w in words) + (EOS,), " ".join(words))


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Surface text of ids up to the first EOS; PAD and BOS are skipped."""
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.token(i))
    return " ".join(words)


def build_vocab(corpus: Iterable[PairExample], min_count: int = 1) -> Vocabulary:
    """Collect tokens seen at least ``min_count`` times on either side.

    Tokens are ordered by descending count, then lexicographically.

    Raises:
        ValueError: If min_count < 1 or the corpus is empty.
    """
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    counts: Counter[str] = Counter()
    n = 0
    for pair in corpus:
        counts.update(pair.request.split())
        counts.update(pair.rewrite.split())
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for token in RESERVED:
        counts.pop(token, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    logger.info("vocabulary: %d tokens kept of %d (min_count=%d)", len(kept), len(counts), min_count)
    return Vocabulary(kept)


def read_pairs(path: str | Path) -> list[PairExample]:
    """Load a JSON-lines dataset with ``request``, ``rewrite`` and optional ``tag``.

    Raises:
        ValueError: If a record misses a field or has the wrong type.
    """
    pairs = []
    for lineno, record in read_jsonl(path):
        for name in ("request", "rewrite"):
            if not isinstance(record.get(name), str):
                raise ValueError(f"{path}:{lineno}: field {name!r} must be a string")
        tag = record.pop("tag", None)
        if tag is not None and not isinstance(tag, str):
            raise ValueError(f"{path}:{lineno}: field 'tag' must be a string")
        request, rewrite = record.pop("request"), record.pop("rewrite")
        try:
            pairs.append(PairExample(request, rewrite, tag, record))
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: {e}") from None
    return pairs


def write_pairs(path: str | Path, pairs: Iterable[PairExample]) -> int:
    return write_jsonl(path, (p.to_record() for p in pairs))


def split_pairs(
    pairs: Sequence[PairExample], fractions: Sequence[float], seed: int
) -> list[list[PairExample]]:
    """Shuffle deterministically and cut into consecutive parts by ``fractions``."""
    if any(f < 0 for f in fractions) or not 0 < sum(fractions) <= 1 + 1e-9:
        raise ValueError("fractions must be non-negative and sum to at most 1")
    order = np.random.default_rng(seed).permutation(len(pairs))
    parts, start = [], 0
    for f in fractions:
        stop = start + int(round(f * len(pairs)))
        parts.append([pairs[i] for i in order[start:stop]])
        start = stop
    return parts


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD) -> np.ndarray:
    """Stack sequences into a (batch, longest) id matrix padded with ``pad_id``."""
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def batches_by_tokens(
    lengths: Sequence[int], max_tokens: int, rng: np.random.Generator
) -> Iterator[list[int]]:
    """Group example indices into batches whose padded size fits ``max_tokens``.

    ``lengths[i]`` is the padded length example ``i`` needs. Examples are
    bucketed by length (ties in random order), and batches come out in random
    order.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be positive")
    order = rng.permutation(len(lengths))
    order = sorted(order, key=lambda i: lengths[i])
    batches: list[list[int]] = []
    current: list[int] = []
    width = 0
    for i in order:
        w = max(width, lengths[i])
        if current and w * (len(current) + 1) > max_tokens:
            batches.append(current)
            current, w = [], lengths[i]
        current.append(int(i))
        width = w
    if current:
        batches.append(current)
    for k in rng.permutation(len(batches)):
        yield batches[k]
