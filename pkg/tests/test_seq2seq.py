import numpy as np
import pytest

from qraug.autodiff import Tape
from qraug.corpus import BOS, PAD, PairExample, TokenSequence, build_vocab, tokenize
from qraug.seq2seq import (
    Batch,
    ModelConfig,
    Seq2SeqModel,
    TrainConfig,
    as_examples,
    decode_beam,
    decode_greedy,
    decode_sample,
    evaluate_loss,
    exact_match,
    forward_teacher_forced,
    greedy_batch,
    sequence_log_prob,
    teacher_forced_loss,
    token_log_probs,
    train_mle,
)
from qraug.util import JsonlWriter, read_jsonl

from .util import numeric_grad

PAIRS = [
    PairExample("turn on the lights in the kitten", "turn on the lights in the kitchen", "phonetic"),
    PairExample("play music music", "play music", "semantic-dup"),
    PairExample("set a timer for too minutes", "set a timer for two minutes", "phonetic"),
    PairExample("call mom", "call my mom", "semantic-drop"),
]
VOCAB = build_vocab(PAIRS)
TINY = ModelConfig(d_tok=8, d_hid=8, enc_layers=1, dec_layers=1, heads=2, d_ff=16, dtype="float64", seed=1)


@pytest.fixture
def model():
    return Seq2SeqModel(TINY, VOCAB)


def source(text: str = "play music") -> TokenSequence:
    return tokenize(text, VOCAB)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs,match",
        [
            ({"d_hid": 10, "heads": 4}, "model.heads"),
            ({"d_tok": 0}, "model.d_tok"),
            ({"enc_layers": -1}, "model.enc_layers"),
            ({"dtype": "float16"}, "model.dtype"),
            ({"d_tok": 16, "tie_embeddings": True}, "tie_embeddings"),
        ],
        ids=["heads", "d_tok", "layers", "dtype", "tied"],
    )
    def test_model_config_validated(self, kwargs, match):
        with pytest.raises(ValueError, match=match):
            ModelConfig(**kwargs)

    def test_train_config_validated(self):
        with pytest.raises(ValueError, match="train.lr"):
            TrainConfig(lr=0.0)


class TestForward:
    def test_logits_shape_and_masked_tokens(self, model):
        batch = Batch.of(as_examples(PAIRS, VOCAB))
        logits = model.logits(batch.source, batch.decoder_input).data
        assert logits.shape == (*batch.target.shape, len(VOCAB))
        top = logits.argmax(axis=-1)
        assert not np.isin(top, [PAD, BOS]).any()

    def test_padding_does_not_change_outputs(self, model):
        short, long = as_examples(PAIRS[1:3], VOCAB)
        alone = token_log_probs(model, Batch.of([short])).data[0, : len(short[1])]
        padded = token_log_probs(model, Batch.of([short, long])).data[0, : len(short[1])]
        np.testing.assert_allclose(alone, padded, atol=1e-10)

    def test_inverse_direction(self):
        (src, tgt), = as_examples(PAIRS[3:], VOCAB)
        assert (src.text, tgt.text) == ("call my mom", "call mom")
        (src, tgt), = as_examples(PAIRS[3:], VOCAB, inverse=False)
        assert (src.text, tgt.text) == ("call mom", "call my mom")

    def test_too_long_rejected(self, model):
        long = TokenSequence(tuple([4] * 30), "x")
        with pytest.raises(ValueError, match="source has 30 tokens"):
            forward_teacher_forced(model, long, source())

    def test_sequence_log_prob_matches_token_sum(self, model):
        src, tgt = source("play music"), source("call my mom")
        lp = token_log_probs(model, Batch.of([(src, tgt)])).data.sum()
        assert sequence_log_prob(model, src, tgt).item() == pytest.approx(lp)

    def test_untrained_loss_is_near_uniform(self, model):
        # PAD and BOS are never predicted, so a fresh model is uniform over the rest
        loss = evaluate_loss(model, as_examples(PAIRS, VOCAB))
        assert loss == pytest.approx(np.log(len(VOCAB) - 2), abs=0.05)

    def test_loss_gradient(self, model):
        batch = Batch.of(as_examples(PAIRS[:2], VOCAB))
        params = [model.params["dec.0.cross.q.w"], model.params["enc.0.ff.out.b"]]
        f = lambda: teacher_forced_loss(model, batch)  # noqa: E731
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        for p in params:
            np.testing.assert_allclose(p.grad, numeric_grad(f, p), rtol=1e-4, atol=1e-7)


class TestDecoding:
    def test_decoded_log_probs_match_the_model(self, model):
        src = source()
        result = decode_greedy(model, src)
        target = TokenSequence(result.tokens, result.text(VOCAB))
        lp = token_log_probs(model, Batch.of([(src, target)])).data[0]
        np.testing.assert_allclose(lp, result.token_log_probs, rtol=1e-8)

    def test_never_emits_pad_or_bos(self, model):
        src = source()
        results = [decode_greedy(model, src), decode_beam(model, src, beam_width=3)]
        results += [decode_sample(model, src, seed) for seed in range(10)]
        for r in results:
            assert PAD not in r.tokens and BOS not in r.tokens
            assert len(r.tokens) <= TINY.max_len

    def test_sampling_is_seeded(self, model):
        src = source()
        assert decode_sample(model, src, 4) == decode_sample(model, src, 4)

    def test_batch_matches_single(self, model):
        sources = [source(p.rewrite) for p in PAIRS]
        batched = greedy_batch(model, sources, batch_size=3)
        assert [r.tokens for r in batched] == [decode_greedy(model, s).tokens for s in sources]

    def test_stepper_row_mismatch(self, model):
        step = model.stepper([source(), source("call mom")])
        with pytest.raises(ValueError, match="3 prefixes for 2 sources"):
            step(np.full((3, 1), BOS))

    def test_exact_match_needs_examples(self, model):
        with pytest.raises(ValueError, match="no examples"):
            exact_match(model, [])


class TestModelState:
    def test_clone_is_independent(self, model):
        twin = model.clone()
        twin.params["emb"].data[:] = 0.0
        assert np.abs(model.params["emb"].data).sum() > 0

    def test_save_load(self, model, tmp_path):
        model.save(tmp_path / "model.json")
        back = Seq2SeqModel.load(tmp_path / "model.json")
        assert back.vocab == model.vocab
        assert back.config == model.config
        batch = Batch.of(as_examples(PAIRS, VOCAB))
        np.testing.assert_array_equal(
            back.logits(batch.source, batch.decoder_input).data,
            model.logits(batch.source, batch.decoder_input).data,
        )

    def test_float32_save_load_is_lossless(self, tmp_path):
        model = Seq2SeqModel(ModelConfig(d_tok=8, d_hid=8, heads=2, d_ff=16, dtype="float32"), VOCAB)
        model.save(tmp_path / "model.json.gz")
        back = Seq2SeqModel.load(tmp_path / "model.json.gz")
        for name, array in model.params.arrays().items():
            np.testing.assert_array_equal(back.params[name].data, array)

    def test_same_seed_same_init(self):
        a, b = Seq2SeqModel(TINY, VOCAB), Seq2SeqModel(TINY, VOCAB)
        for name, array in a.params.arrays().items():
            np.testing.assert_array_equal(b.params[name].data, array)


class TestTrainMLE:
    def test_loss_decreases(self, model, tmp_path):
        examples = as_examples(PAIRS, VOCAB)
        before = evaluate_loss(model, examples)
        config = TrainConfig(lr=1e-2, warmup_steps=0, steps=40, log_every=10, eval_every=10)
        with JsonlWriter(tmp_path / "metrics.jsonl") as metrics:
            result = train_mle(model, examples, config, metrics=metrics)
        assert result.steps == 40
        assert evaluate_loss(model, examples) < before
        records = [r for _, r in read_jsonl(tmp_path / "metrics.jsonl")]
        assert [r["step"] for r in records] == [10, 20, 30, 40]

    def test_dev_restores_best(self, model):
        examples = as_examples(PAIRS, VOCAB)
        config = TrainConfig(lr=1e-2, warmup_steps=0, steps=30, eval_every=5)
        result = train_mle(model, examples, config, dev=examples)
        assert result.best_step is not None
        assert evaluate_loss(model, examples) == pytest.approx(result.best_dev_loss)

    def test_empty_training_set(self, model):
        with pytest.raises(ValueError, match="no training examples"):
            train_mle(model, [], TrainConfig())


def copy_pairs(n: int, seed: int = 0) -> list[PairExample]:
    """Random word strings paired with themselves."""
    rng = np.random.default_rng(seed)
    words = "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima mike".split()
    words += "november oscar papa quebec romeo sierra tango".split()
    texts = [" ".join(rng.choice(words, size=rng.integers(3, 7))) for _ in range(n)]
    return [PairExample(t, t) for t in texts]


@pytest.mark.slow
def test_learns_to_copy():
    pairs = copy_pairs(500)
    vocab = build_vocab(pairs)
    config = ModelConfig(d_tok=32, d_hid=32, enc_layers=1, dec_layers=1, heads=4, d_ff=64, max_len=8, seed=0)
    model = Seq2SeqModel(config, vocab)
    examples = as_examples(pairs, vocab, max_len=config.max_len)
    train_mle(model, examples, TrainConfig(lr=3e-3, warmup_steps=100, steps=3000, max_tokens=512, log_every=500))
    assert exact_match(model, examples) >= 0.95
