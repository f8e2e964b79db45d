import logging

import numpy as np
import pytest

from qraug.corpus import PairExample, Vocabulary, build_vocab
from qraug.encoder import EncoderConfig, SemanticEncoder
from qraug.phonetics import load_lexicon
from qraug.retrieval import (
    EvalReport,
    RetrievalConfig,
    RetrievalIndex,
    build_index,
    evaluate_p_at_k,
    train_retriever,
)
from qraug.synthetic import corrupt_rewrites, golden_rewrites

LEXICON = load_lexicon()
REWRITES = golden_rewrites(0, 100)
TESTSET = list(corrupt_rewrites(REWRITES, 1, LEXICON))
VOCAB = build_vocab([PairExample(r, r) for r in REWRITES])
SMALL = EncoderConfig(d_emb=8, dim=8, dtype="float64", seed=4)


def frozen(vocab: Vocabulary = VOCAB) -> SemanticEncoder:
    return SemanticEncoder(SMALL, vocab).freeze()


@pytest.fixture(scope="module")
def index():
    return build_index(frozen(), REWRITES)


def oracle_ranks(index: RetrievalIndex, testset) -> list[int]:
    """Gold positions in a full sort by descending score, ties by index order."""
    ranks = []
    for row, pair in zip(index.scores([p.request for p in testset]), testset):
        order = sorted(range(len(row)), key=lambda i: (-row[i], i))
        ranks.append(order.index(index.rewrites.index(pair.rewrite)))
    return ranks


class TestEvaluate:
    def test_matches_brute_force(self, index):
        ks = (1, 5, 10)
        report = evaluate_p_at_k(index, TESTSET, ks)
        ranks = oracle_ranks(index, TESTSET)
        assert report.queries == len(TESTSET)
        assert report.missing == 0
        for k in ks:
            assert report.p_at[k] == sum(r < k for r in ranks) / len(ranks)

    def test_monotone_in_k(self, index):
        p = evaluate_p_at_k(index, TESTSET, (1, 2, 5, 20, 100)).p_at
        values = [p[k] for k in sorted(p)]
        assert values == sorted(values)
        assert p[100] == 1.0

    def test_missing_gold_is_a_miss(self, index, caplog):
        testset = [*TESTSET[:9], PairExample("play the blues", "play the blues please now")]
        with caplog.at_level(logging.WARNING, logger="qraug.retrieval"):
            report = evaluate_p_at_k(index, testset, (len(index),))
        assert report.missing == 1
        assert report.p_at[len(index)] == 0.9
        assert "1 of 10 gold rewrites" in caplog.text

    def test_by_tag(self, index):
        testset = [*TESTSET[:5], PairExample(REWRITES[0], REWRITES[0])]
        report = evaluate_p_at_k(index, testset)
        assert set(report.by_tag) == {p.tag for p in TESTSET[:5]} | {"none"}
        record = report.to_record()
        assert set(record) == {"queries", "missing", "p@1", "p@5", "by_tag"}
        assert set(record["by_tag"]["none"]) == {"p@1", "p@5"}

    def test_empty_testset(self, index):
        with pytest.raises(ValueError, match="empty testset"):
            evaluate_p_at_k(index, [])

    def test_ks_validated(self, index):
        with pytest.raises(ValueError, match="ks must be positive"):
            evaluate_p_at_k(index, TESTSET, (0, 1))


class TestTies:
    # "jazz", "rock" and "blues" are unknown to the encoder: all three embed as "play <unk>"
    encoder = frozen(Vocabulary(["play", "call", "mom"]))
    jazz, mom = encoder.embed(["play jazz"])[0], encoder.embed(["call mom"])[0]
    index = RetrievalIndex(encoder, ["play jazz", "play rock", "call mom"], np.stack([jazz, jazz, mom]))

    def test_ties_rank_in_insertion_order(self):
        first = evaluate_p_at_k(self.index, [PairExample("play blues", "play jazz")], (1, 2))
        second = evaluate_p_at_k(self.index, [PairExample("play blues", "play rock")], (1, 2))
        assert first.p_at == {1: 1.0, 2: 1.0}
        assert second.p_at == {1: 0.0, 2: 1.0}

    def test_search_is_stable(self):
        (hits,) = self.index.search(["play blues"], k=2)
        assert [r for r, _ in hits] == ["play jazz", "play rock"]
        assert hits[0][1] == hits[1][1]


class TestIndex:
    def test_distinct_normalized_rows(self):
        idx = build_index(frozen(), ["Play Jazz!", "play jazz", REWRITES[0]])
        assert idx.rewrites == ["play jazz", REWRITES[0]]
        np.testing.assert_allclose(np.linalg.norm(idx.matrix, axis=1), 1.0)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty rewrite list"):
            build_index(frozen(), ["?!"])

    def test_search_matches_scores(self, index):
        queries = [p.request for p in TESTSET[:3]]
        scores = index.scores(queries)
        for row, hits in zip(scores, index.search(queries, k=4)):
            assert [s for _, s in hits] == sorted(row, reverse=True)[:4]

    def test_search_k_validated(self, index):
        with pytest.raises(ValueError, match="k must be positive"):
            index.search(["play"], k=0)

    def test_position(self, index):
        assert index.position(REWRITES[3].upper()) == 3
        assert index.position("never indexed") is None

    def test_position_keeps_the_first_duplicate(self):
        rows = np.tile(np.eye(1, SMALL.dim), (3, 1))
        idx = RetrievalIndex(frozen(), ["a", "b", "a"], rows)
        assert [idx.position(r) for r in ("a", "b", "c")] == [0, 1, None]

    def test_every_rewrite_has_its_own_position(self, index):
        assert [index.position(r) for r in index.rewrites] == list(range(len(index)))

    def test_shape_checked(self):
        with pytest.raises(ValueError, match="does not match"):
            RetrievalIndex(frozen(), ["a", "b"], np.eye(3, SMALL.dim))

    def test_rows_must_be_unit_norm(self):
        with pytest.raises(ValueError, match="unit-norm"):
            RetrievalIndex(frozen(), ["a"], np.full((1, SMALL.dim), 0.5))

    def test_save_load(self, index, tmp_path):
        index.save(tmp_path / "index")
        back = RetrievalIndex.load(tmp_path / "index", index.encoder)
        assert back.rewrites == index.rewrites
        np.testing.assert_array_equal(back.matrix, index.matrix)
        assert evaluate_p_at_k(back, TESTSET) == evaluate_p_at_k(index, TESTSET)

    def test_load_checks_dim(self, index, tmp_path):
        index.save(tmp_path / "index")
        other = SemanticEncoder(EncoderConfig(d_emb=8, dim=4), VOCAB)
        with pytest.raises(ValueError, match="does not match encoder dim 4"):
            RetrievalIndex.load(tmp_path / "index", other)


class TestConfig:
    def test_ks_coerced(self):
        assert RetrievalConfig(ks=[5, 1]).ks == (5, 1)

    def test_ks_validated(self):
        with pytest.raises(ValueError, match="retrieval.ks"):
            RetrievalConfig(ks=())

    def test_encoder_settings_validated(self):
        with pytest.raises(ValueError, match="encoder.steps"):
            RetrievalConfig(steps=0)

    def test_encoder_config(self):
        config = RetrievalConfig(dim=16, steps=7, ks=(1, 3))
        enc = config.encoder_config()
        assert (enc.dim, enc.steps) == (16, 7)


class TestTrainRetriever:
    def test_returns_a_frozen_encoder(self):
        config = RetrievalConfig(d_emb=8, dim=8, steps=20, batch_size=8)
        encoder = train_retriever(TESTSET, config, vocab=VOCAB)
        assert encoder.frozen
        assert encoder.vocab is VOCAB
        report = evaluate_p_at_k(build_index(encoder, REWRITES), TESTSET)
        assert isinstance(report, EvalReport)

    def test_needs_two_pairs(self):
        with pytest.raises(ValueError, match="at least 2 pairs"):
            train_retriever(TESTSET[:1], RetrievalConfig())


@pytest.mark.slow
def test_trained_retriever_prefers_the_paired_rewrite():
    pool = golden_rewrites(1, 600)
    pairs = list(corrupt_rewrites(pool, 2, LEXICON))
    train, held_out = pairs[:500], pairs[500:]
    encoder = train_retriever(train, RetrievalConfig(d_emb=32, dim=32, steps=600, batch_size=32))
    order = np.random.default_rng(0).permutation(len(held_out))
    wins = total = 0
    for pair, j in zip(held_out, order):
        other = held_out[j].rewrite
        if other == pair.rewrite:
            continue
        query, paired, unpaired = encoder.embed([pair.request, pair.rewrite, other])
        wins += float(query @ paired) > float(query @ unpaired)
        total += 1
    assert wins / total >= 0.8
