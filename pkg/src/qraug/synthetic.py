"""Synthetic (request, rewrite) corpus with known corruption processes.

Rewrites are clean utterances sampled from a bundled template grammar. A
request is a seeded corruption of its rewrite:

- ``homophone``: one word replaced by a word with the same pronunciation
- ``near-phoneme``: one word replaced by a word one phoneme edit away
- ``drop``: one word removed
- ``dup``: one word repeated
- ``insert``: a filler word inserted
- ``none``: the request equals the rewrite

Everything here is a pure function of (seed, weights, grammar, lexicon).
"""

import json
import logging
import re
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import MAX_LEN, PairExample, normalize
from .phonetics import PronunciationLexicon, g2p, normalized_levenshtein
from .util import make_rng

logger = logging.getLogger(__name__)

CORRUPTIONS = ("none", "homophone", "near-phoneme", "drop", "dup", "insert")  #: Known corruption kinds

#: Pair tag written for each corruption kind
TAGS = {
    "none": "none",
    "homophone": "phonetic",
    "near-phoneme": "phonetic",
    "drop": "semantic-drop",
    "dup": "semantic-dup",
    "insert": "semantic-insert",
}

#: Default corruption mix, phonetic corruptions favored
DEFAULT_WEIGHTS = {
    "none": 0.05,
    "homophone": 0.35,
    "near-phoneme": 0.25,
    "drop": 0.15,
    "dup": 0.1,
    "insert": 0.1,
}

FRICTION_WEIGHTS = {"homophone": 0.5, "near-phoneme": 0.5}  #: Phonetic-only mix for friction testsets
REPHRASE_WEIGHTS = {"drop": 0.4, "dup": 0.3, "insert": 0.3}  #: Semantic-only mix for rephrase testsets

MAX_PHONETIC_DISTANCE = 0.3  #: Upper bound on normalized phoneme distance for phonetic pairs
_ATTEMPTS = 50
_SLOT = re.compile(r"\{(\w+)\}")


class TemplateGrammar:
    """Command templates with ``{slot}`` placeholders and slot filler lists."""

    __slots__ = ("templates", "slots", "fillers")

    def __init__(
        self, templates: Sequence[str], slots: Mapping[str, Sequence[str]], fillers: Sequence[str]
    ) -> None:
        if not templates:
            raise ValueError("grammar has no templates")
        for t in templates:
            for name in _SLOT.findall(t):
                if not slots.get(name):
                    raise ValueError(f"template {t!r} uses undefined slot {name!r}")
        if not fillers:
            raise ValueError("grammar has no filler words")
        self.templates = list(templates)
        self.slots = {k: [normalize(v) for v in vs] for k, vs in slots.items()}
        self.fillers = [normalize(f) for f in fillers]

    @classmethod
    def load(cls, path: str | Path | None = None) -> "TemplateGrammar":
        """Read a grammar JSON file, the bundled one when ``path`` is None."""
        if path is None:
            text = resources.files(__package__).joinpath("data", "templates.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        doc = json.loads(text)
        try:
            return cls(doc["templates"], doc["slots"], doc["fillers"])
        except KeyError as e:
            raise ValueError(f"grammar file misses {e.args[0]!r}") from None

    def sample(self, rng: np.random.Generator) -> str:
        template = self.templates[int(rng.integers(len(self.templates)))]

        def fill(m: re.Match) -> str:
            choices = self.slots[m.group(1)]
            return choices[int(rng.integers(len(choices)))]

        return normalize(_SLOT.sub(fill, template))


@dataclass
class CorpusStats:
    """Counters filled in while a corpus streams out."""

    pairs: int = 0
    tags: Counter = field(default_factory=Counter)
    fallbacks: int = 0
    retries: int = 0


class Corruptor:
    """Applies one corruption kind to a word list."""

    __slots__ = ("lexicon", "fillers", "max_distance")

    def __init__(
        self,
        lexicon: PronunciationLexicon,
        fillers: Sequence[str],
        max_distance: float = MAX_PHONETIC_DISTANCE,
    ) -> None:
        self.lexicon = lexicon
        self.fillers = list(fillers)
        self.max_distance = max_distance

    def _substitute(self, words: list[str], rng: np.random.Generator, homophone: bool) -> list[str] | None:
        options = []
        for i, w in enumerate(words):
            alts = self.lexicon.homophones(w) if homophone else self.lexicon.near_homophones(w)
            if alts:
                options.append((i, alts))
        if not options:
            return None
        i, alts = options[int(rng.integers(len(options)))]
        out = list(words)
        out[i] = alts[int(rng.integers(len(alts)))]
        return out

    def apply(self, words: list[str], kind: str, rng: np.random.Generator) -> tuple[list[str], str] | None:
        """Corrupt ``words`` with ``kind``.

        Returns:
            Tuple of (corrupted words, kind actually applied), or None when
            the kind cannot apply to this utterance. A homophone request on
            an utterance without homophones becomes a near-phoneme one.
        """
        if kind == "none":
            return list(words), kind
        if kind == "homophone":
            out = self._substitute(words, rng, homophone=True)
            if out is not None:
                return out, kind
            kind = "near-phoneme"
        if kind == "near-phoneme":
            out = self._substitute(words, rng, homophone=False)
            if out is None:
                return None
            distance = normalized_levenshtein(g2p(" ".join(out), self.lexicon), g2p(" ".join(words), self.lexicon))
            return (out, kind) if distance <= self.max_distance else None
        if kind == "drop":
            if len(words) < 2:
                return None
            i = int(rng.integers(len(words)))
            return words[:i] + words[i + 1 :], kind
        if kind == "dup":
            if len(words) >= MAX_LEN - 1:
                return None
            i = int(rng.integers(len(words)))
            return words[: i + 1] + words[i:], kind
        if kind == "insert":
            if len(words) >= MAX_LEN - 1:
                return None
            i = int(rng.integers(len(words) + 1))
            filler = self.fillers[int(rng.integers(len(self.fillers)))]
            return words[:i] + filler.split() + words[i:], kind
        raise ValueError(f"unknown corruption {kind!r}. Valid options: {', '.join(CORRUPTIONS)}")


def corruption_weights(weights: Mapping[str, float] | None = None) -> tuple[list[str], np.ndarray]:
    """Validate a corruption mix and return (kinds, probabilities) in canonical order.

    Raises:
        ValueError: On unknown kinds, negative weights or an all-zero mix.
    """
    weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
    for kind, w in weights.items():
        if kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {kind!r}. Valid options: {', '.join(CORRUPTIONS)}")
        if w < 0:
            raise ValueError(f"corruption weight for {kind!r} must be non-negative")
    kinds = [k for k in CORRUPTIONS if weights.get(k, 0) > 0]
    if not kinds:
        raise ValueError("corruption weights sum to zero")
    p = np.array([weights[k] for k in kinds], dtype=np.float64)
    return kinds, p / p.sum()


def corrupt_rewrites(
    rewrites: Iterable[str],
    seed: int,
    lexicon: PronunciationLexicon,
    *,
    weights: Mapping[str, float] | None = None,
    fillers: Sequence[str] | None = None,
    stats: CorpusStats | None = None,
) -> Iterator[PairExample]:
    """Corrupt given rewrites, one pair per rewrite.

    Rewrites no sampled kind can corrupt within the retry budget are skipped.
    """
    kinds, p = corruption_weights(weights)
    if fillers is None:
        fillers = TemplateGrammar.load().fillers
    rng = make_rng(seed)
    corruptor = Corruptor(lexicon, fillers)
    stats = stats if stats is not None else CorpusStats()
    for rewrite in rewrites:
        pair = _corrupt_one(normalize(rewrite), kinds, p, corruptor, rng, stats)
        if pair is not None:
            yield pair
    _report(stats)


def _corrupt_one(
    rewrite: str,
    kinds: list[str],
    p: np.ndarray,
    corruptor: Corruptor,
    rng: np.random.Generator,
    stats: CorpusStats,
) -> PairExample | None:
    words = rewrite.split()
    for _ in range(_ATTEMPTS):
        kind = kinds[int(rng.choice(len(kinds), p=p))]
        result = corruptor.apply(words, kind, rng)
        if result is None:
            stats.retries += 1
            continue
        out, applied = result
        meta = {"corruption": applied}
        if applied != kind:
            meta["fallback"] = kind
            stats.fallbacks += 1
        tag = TAGS[applied]
        stats.pairs += 1
        stats.tags[tag] += 1
        return PairExample(" ".join(out), rewrite, tag, meta)
    return None


def _report(stats: CorpusStats) -> None:
    if stats.fallbacks:
        logger.warning(
            "lexicon supplied no homophone for %d of %d pairs; used near-phoneme substitution",
            stats.fallbacks,
            stats.pairs,
        )
    logger.info("synthetic pairs: %d %s", stats.pairs, dict(sorted(stats.tags.items())))


def generate_synthetic_corpus(
    seed: int,
    n_pairs: int,
    lexicon: PronunciationLexicon,
    *,
    weights: Mapping[str, float] | None = None,
    grammar: TemplateGrammar | None = None,
    stats: CorpusStats | None = None,
) -> Iterator[PairExample]:
    """Stream ``n_pairs`` tagged (request, rewrite) pairs.

    Args:
        seed: Fixes the whole stream.
        n_pairs: Number of pairs to emit.
        lexicon: Source of homophones and near-phoneme neighbours.
        weights: Corruption mix by kind (see ``DEFAULT_WEIGHTS``).
        grammar: Template grammar, the bundled one by default.
        stats: Optional counters updated as pairs are produced.

    Raises:
        ValueError: If n_pairs < 1 or the weights are invalid.
        RuntimeError: If the grammar cannot produce a corruptible utterance.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    kinds, p = corruption_weights(weights)
    grammar = grammar if grammar is not None else TemplateGrammar.load()
    return _generate(seed, n_pairs, lexicon, kinds, p, grammar, stats if stats is not None else CorpusStats())


def _generate(seed, n_pairs, lexicon, kinds, p, grammar, stats) -> Iterator[PairExample]:
    rng = make_rng(seed)
    corruptor = Corruptor(lexicon, grammar.fillers)
    for _ in range(n_pairs):
        for _ in range(_ATTEMPTS):
            pair = _corrupt_one(grammar.sample(rng), kinds, p, corruptor, rng, stats)
            if pair is not None:
                break
        else:
            raise RuntimeError("grammar produced no corruptible utterance")
        yield pair
    _report(stats)


def golden_rewrites(
    seed: int, n: int, grammar: TemplateGrammar | None = None, *, exclude: Iterable[str] = ()
) -> list[str]:
    """Distinct clean utterances from the grammar, in sampling order.

    Raises:
        ValueError: If the grammar cannot supply ``n`` distinct utterances.
    """
    grammar = grammar if grammar is not None else TemplateGrammar.load()
    rng = make_rng(seed)
    seen = {normalize(x) for x in exclude}
    out: list[str] = []
    for _ in range(_ATTEMPTS * max(n, 1)):
        if len(out) == n:
            break
        text = grammar.sample(rng)
        if text not in seen:
            seen.add(text)
            out.append(text)
    if len(out) < n:
        raise ValueError(f"grammar yields only {len(out)} distinct utterances, {n} requested")
    return out


__all__ = [
    "CORRUPTIONS",
    "TAGS",
    "DEFAULT_WEIGHTS",
    "FRICTION_WEIGHTS",
    "REPHRASE_WEIGHTS",
    "MAX_PHONETIC_DISTANCE",
    "TemplateGrammar",
    "CorpusStats",
    "Corruptor",
    "corruption_weights",
    "corrupt_rewrites",
    "generate_synthetic_corpus",
    "golden_rewrites",
]
