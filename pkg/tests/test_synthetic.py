import logging

import numpy as np
import pytest

from qraug.phonetics import load_lexicon, parse_lexicon, phonetic_reward
from qraug.synthetic import (
    FRICTION_WEIGHTS,
    MAX_PHONETIC_DISTANCE,
    REPHRASE_WEIGHTS,
    TAGS,
    CorpusStats,
    Corruptor,
    TemplateGrammar,
    corrupt_rewrites,
    corruption_weights,
    generate_synthetic_corpus,
    golden_rewrites,
)

LEXICON = load_lexicon()
TOY = parse_lexicon("kitten\tK IH T AH N\nmitten\tM IH T AH N\nplay\tP L EY\n")


@pytest.fixture(scope="module")
def corpus():
    stats = CorpusStats()
    pairs = list(generate_synthetic_corpus(7, 300, LEXICON, stats=stats))
    return pairs, stats


class TestGenerate:
    def test_count_and_stats(self, corpus):
        pairs, stats = corpus
        assert len(pairs) == 300
        assert stats.pairs == 300
        assert sum(stats.tags.values()) == 300
        assert {p.tag for p in pairs} <= set(TAGS.values())

    def test_deterministic(self, corpus):
        pairs, _ = corpus
        again = list(generate_synthetic_corpus(7, 300, LEXICON))
        assert again == pairs
        assert [p.meta for p in again] == [p.meta for p in pairs]

    def test_seed_changes_stream(self, corpus):
        pairs, _ = corpus
        assert list(generate_synthetic_corpus(8, 300, LEXICON)) != pairs

    def test_corruptions_do_what_they_say(self, corpus):
        pairs, _ = corpus
        for p in pairs:
            kind = p.meta["corruption"]
            assert TAGS[kind] == p.tag
            req, rew = p.request.split(), p.rewrite.split()
            if kind == "none":
                assert p.request == p.rewrite
            elif kind == "homophone":
                assert p.request != p.rewrite
                assert phonetic_reward(p.request, p.rewrite, LEXICON) == 0.0
            elif kind == "near-phoneme":
                assert 0.0 < phonetic_reward(p.request, p.rewrite, LEXICON) <= MAX_PHONETIC_DISTANCE
            elif kind == "drop":
                assert len(req) == len(rew) - 1
            else:
                assert len(req) == len(rew) + 1

    def test_default_mix_favors_phonetic(self, corpus):
        _, stats = corpus
        assert stats.tags["phonetic"] > stats.tags["semantic-drop"]

    def test_n_pairs_validated_eagerly(self):
        with pytest.raises(ValueError, match="n_pairs"):
            generate_synthetic_corpus(0, 0, LEXICON)

    def test_semantic_only_mix(self):
        pairs = list(generate_synthetic_corpus(1, 50, LEXICON, weights=REPHRASE_WEIGHTS))
        assert {p.tag for p in pairs} <= {"semantic-drop", "semantic-dup", "semantic-insert"}


class TestCorruptor:
    def test_homophone_falls_back_to_near_phoneme(self):
        out = Corruptor(TOY, ["uh"]).apply(["play", "kitten"], "homophone", np.random.default_rng(0))
        assert out == (["play", "mitten"], "near-phoneme")

    def test_near_phoneme_respects_distance_bound(self):
        lex = parse_lexicon("cat\tK AE T\ncap\tK AE P\n")
        # one phoneme in three is above the bound
        assert Corruptor(lex, ["uh"]).apply(["cat"], "near-phoneme", np.random.default_rng(0)) is None

    def test_drop_needs_two_words(self):
        assert Corruptor(TOY, ["uh"]).apply(["play"], "drop", np.random.default_rng(0)) is None

    def test_insert_uses_fillers(self):
        words, kind = Corruptor(TOY, ["please"]).apply(["play", "kitten"], "insert", np.random.default_rng(0))
        assert kind == "insert"
        assert sorted(words) == ["kitten", "play", "please"]

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown corruption 'swap'"):
            Corruptor(TOY, ["uh"]).apply(["play"], "swap", np.random.default_rng(0))


class TestCorruptRewrites:
    def test_fallback_is_recorded(self, caplog):
        stats = CorpusStats()
        with caplog.at_level(logging.WARNING, logger="qraug.synthetic"):
            pairs = list(corrupt_rewrites(["play kitten"], 0, TOY, weights={"homophone": 1.0}, stats=stats))
        assert [p.request for p in pairs] == ["play mitten"]
        assert pairs[0].tag == "phonetic"
        assert pairs[0].meta == {"corruption": "near-phoneme", "fallback": "homophone"}
        assert stats.fallbacks == 1
        assert "near-phoneme substitution" in caplog.text

    def test_uncorruptible_rewrite_is_skipped(self):
        stats = CorpusStats()
        assert list(corrupt_rewrites(["play"], 0, TOY, weights={"drop": 1.0}, stats=stats)) == []
        assert stats.retries > 0

    def test_friction_testset_is_phonetic(self):
        rewrites = golden_rewrites(3, 40)
        pairs = list(corrupt_rewrites(rewrites, 11, LEXICON, weights=FRICTION_WEIGHTS))
        assert pairs
        assert {p.tag for p in pairs} == {"phonetic"}
        assert {p.rewrite for p in pairs} <= set(rewrites)


@pytest.mark.parametrize(
    "weights,match",
    [
        ({"swap": 1.0}, "unknown corruption"),
        ({"drop": -1.0}, "non-negative"),
        ({"drop": 0.0}, "sum to zero"),
    ],
    ids=["unknown", "negative", "zero"],
)
def test_corruption_weights_validated(weights, match):
    with pytest.raises(ValueError, match=match):
        corruption_weights(weights)


def test_corruption_weights_normalized():
    kinds, p = corruption_weights({"dup": 1.0, "drop": 3.0})
    assert kinds == ["drop", "dup"]
    np.testing.assert_allclose(p, [0.75, 0.25])


class TestGrammar:
    def test_bundled_grammar_loads(self):
        g = TemplateGrammar.load()
        assert len(g.templates) >= 60
        assert "please" in g.fillers

    def test_undefined_slot(self):
        with pytest.raises(ValueError, match="undefined slot 'city'"):
            TemplateGrammar(["weather in {city}"], {}, ["uh"])

    def test_golden_rewrites_are_distinct_and_deterministic(self):
        a = golden_rewrites(5, 200)
        assert len(set(a)) == 200
        assert golden_rewrites(5, 200) == a

    def test_golden_rewrites_exclude(self):
        first = golden_rewrites(5, 50)
        second = golden_rewrites(6, 50, exclude=first)
        assert not set(first) & set(second)

    def test_golden_rewrites_exhausted(self):
        g = TemplateGrammar(["play {x}"], {"x": ["jazz", "rock"]}, ["uh"])
        with pytest.raises(ValueError, match="only 2 distinct"):
            golden_rewrites(0, 3, g)
