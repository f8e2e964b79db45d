"""Grapheme-to-phoneme conversion and Levenshtein distances.

Words are looked up in a CMU-style pronouncing dictionary; anything missing
falls back to a fixed letter-to-sound rule table, so ``g2p`` is total.
"""

import logging
import re
from collections.abc import Hashable, Iterable, Sequence
from importlib import resources
from pathlib import Path

from ._typing import Utterance

logger = logging.getLogger(__name__)

#: The closed ARPAbet symbol set, stress digits stripped
ARPABET = frozenset(
    "AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG "
    "OW OY P R S SH T TH UH UW V W Y Z ZH".split()
)

PhonemeSequence = tuple[str, ...]

_STRESS = re.compile(r"\d")
_VARIANT = re.compile(r"\(\d+\)$")


def _bundled(name: str) -> str:
    return resources.files(__package__).joinpath("data", name).read_text(encoding="utf-8")


def _phonemes(text: str, where: str) -> PhonemeSequence:
    phones = tuple(_STRESS.sub("", p) for p in text.split())
    for p in phones:
        if p not in ARPABET:
            raise ValueError(f"{where}: unknown phoneme {p!r}")
    return phones


class LetterRules:
    """Ordered letter-to-sound rules applied longest-match-first.

    A pattern ending in ``$`` only matches at the end of a word. Between
    patterns of equal length the one listed first wins.
    """

    __slots__ = ("_rules", "_max")

    def __init__(self, rules: Iterable[tuple[str, PhonemeSequence]]) -> None:
        entries = []
        for order, (pattern, phones) in enumerate(rules):
            anchored = pattern.endswith("$")
            letters = pattern[:-1] if anchored else pattern
            if not letters:
                raise ValueError("empty letter-to-sound pattern")
            entries.append((len(letters), order, letters, anchored, phones))
        entries.sort(key=lambda e: (-e[0], e[1]))
        self._rules = [(letters, anchored, phones) for _, _, letters, anchored, phones in entries]
        self._max = entries[0][0] if entries else 0

    def __len__(self) -> int:
        return len(self._rules)

    def apply(self, word: str) -> PhonemeSequence:
        """Phonemes for one lowercase word; unmatched characters are skipped."""
        out: list[str] = []
        i, n = 0, len(word)
        while i < n:
            for letters, anchored, phones in self._rules:
                if word.startswith(letters, i) and (not anchored or i + len(letters) == n):
                    out.extend(phones)
                    i += len(letters)
                    break
            else:
                i += 1
        return tuple(out)


def parse_rules(text: str, source: str = "<rules>") -> LetterRules:
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        pattern, sep, phones = line.partition("\t")
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected pattern<TAB>phonemes")
        phones = phones.strip()
        rules.append((pattern.strip(), () if phones == "-" else _phonemes(phones, f"{source}:{lineno}")))
    return LetterRules(rules)


def load_rules(path: str | Path | None = None) -> LetterRules:
    """Load a rule table, the bundled one when ``path`` is None."""
    if path is None:
        return parse_rules(_bundled("letter-rules.tsv"), "letter-rules.tsv")
    return parse_rules(Path(path).read_text(encoding="utf-8"), str(path))


class PronunciationLexicon:
    """Word to phoneme-sequence mapping with one pronunciation per word.

    Keys are lowercase. Only the first variant of a word is kept, and stress
    digits are stripped on load.
    """

    __slots__ = ("_entries", "_by_phones", "_near", "rules")

    def __init__(self, entries: Iterable[tuple[str, PhonemeSequence]], rules: LetterRules | None = None) -> None:
        self._entries: dict[str, PhonemeSequence] = {}
        for word, phones in entries:
            word = word.lower()
            if not phones:
                raise ValueError(f"empty pronunciation for {word!r}")
            self._entries.setdefault(word, tuple(phones))
        self._by_phones: dict[PhonemeSequence, list[str]] = {}
        for word in sorted(self._entries):
            self._by_phones.setdefault(self._entries[word], []).append(word)
        self._near: dict[tuple[str, int], list[str]] = {}
        self.rules = rules if rules is not None else load_rules()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._entries

    def __getitem__(self, word: str) -> PhonemeSequence:
        return self._entries[word.lower()]

    @property
    def words(self) -> list[str]:
        return sorted(self._entries)

    def pronounce(self, word: str) -> PhonemeSequence:
        """Lexicon pronunciation, or the letter-to-sound rules for unknown words."""
        word = word.lower()
        phones = self._entries.get(word)
        return phones if phones is not None else self.rules.apply(word)

    def homophones(self, word: str) -> list[str]:
        """Other words with exactly the same pronunciation, sorted."""
        word = word.lower()
        phones = self._entries.get(word)
        if phones is None:
            return []
        return [w for w in self._by_phones[phones] if w != word]

    def near_homophones(self, word: str, max_distance: int = 1) -> list[str]:
        """Words whose pronunciation is 1..max_distance phoneme edits away, sorted."""
        word = word.lower()
        key = (word, max_distance)
        if key not in self._near:
            phones = self._entries.get(word)
            found = []
            if phones is not None:
                for other, candidate in self._by_phones.items():
                    if abs(len(other) - len(phones)) > max_distance:
                        continue
                    if 0 < levenshtein(phones, other) <= max_distance:
                        found.extend(candidate)
            self._near[key] = sorted(found)
        return list(self._near[key])


def parse_lexicon(text: str, source: str = "<lexicon>", rules: LetterRules | None = None) -> PronunciationLexicon:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith(";;;"):
            continue
        word, sep, phones = line.partition("\t")
        if not sep:
            # plain CMU files separate with two spaces
            word, _, phones = line.partition("  ")
        word = word.strip()
        if _VARIANT.search(word):
            continue
        phones = _phonemes(phones, f"{source}:{lineno}")
        if not word or not phones:
            raise ValueError(f"{source}:{lineno}: expected word<TAB>phonemes")
        entries.append((word, phones))
    return PronunciationLexicon(entries, rules)


def load_lexicon(path: str | Path | None = None, rules: LetterRules | None = None) -> PronunciationLexicon:
    """Load a pronouncing dictionary, the bundled subset when ``path`` is None."""
    if path is None:
        lexicon = parse_lexicon(_bundled("lexicon.dict"), "lexicon.dict", rules)
    else:
        lexicon = parse_lexicon(Path(path).read_text(encoding="utf-8"), str(path), rules)
    logger.debug("lexicon: %d words", len(lexicon))
    return lexicon


def _words(utterance: Utterance) -> list[str]:
    text = utterance if isinstance(utterance, str) else utterance.text
    return text.lower().split()


def g2p(utterance: Utterance, lexicon: PronunciationLexicon) -> PhonemeSequence:
    """Concatenated pronunciations of the words of ``utterance``.

    Accepts a string or anything with a ``text`` attribute (a TokenSequence).
    """
    out: list[str] = []
    for word in _words(utterance):
        out.extend(lexicon.pronounce(word))
    return tuple(out)


def levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Unit-cost edit distance (insert, delete, substitute)."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def normalized_levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    """Edit distance divided by the longer length; 0.0 when both are empty."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return levenshtein(a, b) / longest


def phonetic_reward(candidate: Utterance, source: Utterance, lexicon: PronunciationLexicon) -> float:
    """Normalized phoneme edit distance between two utterances, in [0, 1]."""
    return normalized_levenshtein(g2p(candidate, lexicon), g2p(source, lexicon))


__all__ = [
    "ARPABET",
    "PhonemeSequence",
    "LetterRules",
    "PronunciationLexicon",
    "parse_rules",
    "load_rules",
    "parse_lexicon",
    "load_lexicon",
    "g2p",
    "levenshtein",
    "normalized_levenshtein",
    "phonetic_reward",
]
