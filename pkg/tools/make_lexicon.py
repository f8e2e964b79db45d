#!/usr/bin/env python3
"""Extract the bundled lexicon subset from a full CMU pronouncing dictionary.

Keeps every word the template grammar can produce, plus the homophones and
one-phoneme neighbours of those words, so that the corpus generator always
has substitution partners. Stress digits are stripped and only the first
variant of each word is kept.

    python tools/make_lexicon.py cmudict.dict > src/qraug/data/lexicon.dict
"""

import argparse
import re
import sys
from collections import defaultdict
from pathlib import Path

from qraug.phonetics import PhonemeSequence, levenshtein, parse_lexicon
from qraug.synthetic import TemplateGrammar

HEADER = """\
;;; qraug bundled pronunciation lexicon
;;; CMU-style ARPAbet, stress digits stripped, first variant only.
;;; Format: word<TAB>PHONEMES
"""

_WORD = re.compile(r"^[a-z][a-z']*$")
_SLOT = re.compile(r"\{\w+\}")


def grammar_words(grammar: TemplateGrammar) -> set[str]:
    words = set(grammar.fillers)
    for template in grammar.templates:
        words.update(_SLOT.sub(" ", template).lower().split())
    for values in grammar.slots.values():
        for value in values:
            words.update(value.split())
    return {w for word in words for w in word.split()}


def deletion_index(entries: dict[str, PhonemeSequence]) -> dict[PhonemeSequence, set[str]]:
    """Map each pronunciation and each of its one-deletion forms to words."""
    index: dict[PhonemeSequence, set[str]] = defaultdict(set)
    for word, phones in entries.items():
        index[phones].add(word)
        for i in range(len(phones)):
            index[phones[:i] + phones[i + 1 :]].add(word)
    return index


def neighbours(
    phones: PhonemeSequence,
    entries: dict[str, PhonemeSequence],
    index: dict[PhonemeSequence, set[str]],
) -> set[str]:
    """Words at most one phoneme edit away, the word's homophones included."""
    keys = [phones] + [phones[:i] + phones[i + 1 :] for i in range(len(phones))]
    found = set()
    for key in keys:
        for other in index.get(key, ()):
            if levenshtein(phones, entries[other]) <= 1:
                found.add(other)
    return found


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("cmudict", type=Path, help="full dictionary in CMU format")
    parser.add_argument("--grammar", type=Path, help="template grammar (default: bundled)")
    parser.add_argument("--max-partners", type=int, default=6, help="neighbours kept per word")
    args = parser.parse_args()

    text = args.cmudict.read_text(encoding="utf-8", errors="replace")
    full = parse_lexicon(text, str(args.cmudict))
    entries = {w: full[w] for w in full.words if _WORD.match(w)}
    index = deletion_index(entries)

    wanted = grammar_words(TemplateGrammar.load(args.grammar))
    missing = sorted(w for w in wanted if w not in entries)
    keep = {w for w in wanted if w in entries}
    for word in sorted(keep):
        near = sorted(neighbours(entries[word], entries, index) - {word})
        same = [w for w in near if entries[w] == entries[word]]
        other = [w for w in near if entries[w] != entries[word]]
        keep.update(same)
        keep.update(other[: args.max_partners])

    sys.stdout.write(HEADER)
    for word in sorted(keep):
        sys.stdout.write(f"{word}\t{' '.join(entries[word])}\n")
    if missing:
        print(f"not in dictionary (letter rules apply): {' '.join(missing)}", file=sys.stderr)
    print(f"{len(keep)} words from {len(wanted)} grammar words", file=sys.stderr)


if __name__ == "__main__":
    main()
