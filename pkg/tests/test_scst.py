import math

import numpy as np
import pytest

from qraug import autodiff as ad
from qraug import scst
from qraug.autodiff import Tape, Tensor
from qraug.corpus import build_vocab
from qraug.optim import Adam, clip_grad_norm
from qraug.phonetics import load_lexicon
from qraug.rewards import PhoneticReward
from qraug.scst import (
    MIN_CORPUS,
    DivergenceError,
    ScstConfig,
    mean_sampled_reward,
    mixed_loss,
    policy_gradient_loss,
    scst_step,
    train_scst,
)
from qraug.seq2seq import (
    Batch,
    ModelConfig,
    Seq2SeqModel,
    TrainConfig,
    as_examples,
    evaluate_loss,
    teacher_forced_loss,
    train_mle,
)
from qraug.synthetic import generate_synthetic_corpus
from qraug.util import JsonlWriter

LEXICON = load_lexicon()
PAIRS = list(generate_synthetic_corpus(0, 120, LEXICON))
VOCAB = build_vocab(PAIRS)
TINY = ModelConfig(d_tok=8, d_hid=8, enc_layers=1, dec_layers=1, heads=2, d_ff=16, max_len=8, dtype="float64", seed=3)
EXAMPLES = as_examples(PAIRS, VOCAB, max_len=TINY.max_len)
DISTINCT = list({src.text: (src, tgt) for src, tgt in reversed(EXAMPLES)}.values())[:10]

# Bandit: one decision over three tokens, fixed reward per token.
THETA = np.array([1.0, 0.0, -1.0])
TOKEN_REWARD = np.array([0.1, 0.5, 0.9])


class Constant:
    name = "constant"

    def __init__(self, value: float = 0.5) -> None:
        self.value = value

    def __call__(self, candidate, source) -> float:
        return self.value


class FailsOn:
    """Raises for the listed sources, scores 0.5 otherwise."""

    name = "fails-on"

    def __init__(self, sources) -> None:
        self.sources = set(sources)

    def __call__(self, candidate, source) -> float:
        if source in self.sources:
            raise KeyError(source)
        return 0.5


def model() -> Seq2SeqModel:
    return Seq2SeqModel(TINY, VOCAB)


def bandit_gradient(tokens: np.ndarray, advantages: np.ndarray) -> np.ndarray:
    theta = Tensor(THETA, requires_grad=True)
    n = len(tokens)
    with Tape() as tape:
        logits = ad.add(Tensor(np.zeros((n, 1, 3))), theta)
        log_probs = ad.pick(ad.log_softmax(logits), tokens[:, None])
        loss = policy_gradient_loss(log_probs, np.ones((n, 1), dtype=bool), advantages)
    tape.backward(loss)
    return theta.grad


class TestBandit:
    p = np.exp(THETA) / np.exp(THETA).sum()
    baseline = TOKEN_REWARD[np.argmax(THETA)]  # greedy choice

    def test_estimator_is_unbiased(self):
        tokens = np.random.default_rng(0).choice(3, size=1_000_000, p=self.p)
        estimate = bandit_gradient(tokens, TOKEN_REWARD[tokens] - self.baseline)
        # gradient of -E[r]
        analytic = -self.p * (TOKEN_REWARD - self.p @ TOKEN_REWARD)
        np.testing.assert_allclose(estimate, analytic, rtol=0.02)

    def test_baseline_reduces_variance(self):
        per_token = np.stack([bandit_gradient(np.array([u]), np.array([1.0])) for u in range(3)])
        tokens = np.random.default_rng(1).choice(3, size=20_000, p=self.p)
        with_baseline = (TOKEN_REWARD[tokens] - self.baseline)[:, None] * per_token[tokens]
        without = TOKEN_REWARD[tokens][:, None] * per_token[tokens]
        assert with_baseline.var(axis=0).sum() < without.var(axis=0).sum()


class TestPolicyGradientLoss:
    def test_value(self):
        lp = Tensor([[-1.0, -2.0, -9.0], [-0.5, -0.5, -0.5]])
        mask = np.array([[True, True, False], [True, True, True]])
        loss = policy_gradient_loss(lp, mask, np.array([0.5, -1.0]))
        assert loss.item() == pytest.approx(-(0.5 * -3.0 + -1.0 * -1.5) / 2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes disagree"):
            policy_gradient_loss(Tensor(np.zeros((2, 3))), np.ones((2, 3), dtype=bool), np.zeros(3))


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs,match",
        [
            ({"reward": "lexical"}, "scst.reward"),
            ({"mle_weight": 1.5}, "scst.mle_weight"),
            ({"samples": 0}, "scst.samples"),
            ({"temperature": 0.0}, "scst.temperature"),
            ({"baseline": "mean"}, "scst.baseline"),
            ({"max_failure_rate": 2.0}, "scst.max_failure_rate"),
            ({"patience": -1}, "scst.patience"),
            ({"max_restores": -1}, "scst.max_restores"),
        ],
        ids=["reward", "mle-weight", "samples", "temperature", "baseline", "failure-rate", "patience", "restores"],
    )
    def test_validated(self, kwargs, match):
        with pytest.raises(ValueError, match=match):
            ScstConfig(**kwargs)

    def test_reward_name_is_case_insensitive(self):
        assert ScstConfig(reward="Combined").reward == "Combined"


class TestMixedLoss:
    def test_zero_advantage_leaves_scaled_mle_gradient(self):
        m = model()
        batch = EXAMPLES[:4]
        samples = [tgt for _, tgt in EXAMPLES[4:8]]
        with Tape() as tape:
            total, _, pg = mixed_loss(m, batch, samples, np.zeros(4), mle_weight=0.3)
        tape.backward(total)
        mixed = {name: t.grad.copy() for name, t in m.params.items()}
        assert pg.item() == 0.0
        with Tape() as tape:
            mle = teacher_forced_loss(m, Batch.of(batch))
        tape.backward(mle)
        for name, t in m.params.items():
            np.testing.assert_allclose(mixed[name], 0.3 * t.grad, rtol=1e-10, atol=1e-14)

    def test_pure_mle_skips_the_policy_term(self):
        m = model()
        total, mle, pg = mixed_loss(m, EXAMPLES[:2], [t for _, t in EXAMPLES[:2]], np.ones(2), mle_weight=1.0)
        assert pg is None
        assert total is mle

    def test_samples_per_source(self):
        m = model()
        batch = EXAMPLES[:2]
        samples = [tgt for _, tgt in EXAMPLES[:6]]
        _, _, pg = mixed_loss(m, batch, samples, np.linspace(-1, 1, 6), mle_weight=0.5)
        assert math.isfinite(pg.item())


class TestStep:
    def test_full_mle_weight_matches_an_mle_step(self):
        a, b = model(), model()
        batch = EXAMPLES[:6]
        config = ScstConfig(mle_weight=1.0, lr=1e-3)
        scst_step(a, batch, PhoneticReward(LEXICON), config, rng=np.random.default_rng(0))

        opt = Adam(b.parameters(), config.lr)
        opt.zero_grad()
        with Tape() as tape:
            loss = teacher_forced_loss(b, Batch.of(batch))
        tape.backward(loss)
        clip_grad_norm(b.parameters(), config.clip_norm)
        opt.step()
        for name, array in a.params.arrays().items():
            np.testing.assert_array_equal(array, b.params[name].data)

    def test_constant_reward_has_no_advantage(self):
        stats = scst_step(model(), EXAMPLES[:4], Constant(), ScstConfig(samples=3))
        assert stats.advantage == 0.0
        assert stats.pg_loss == 0.0
        assert stats.sampled_reward == stats.baseline_reward == 0.5
        assert not stats.aborted

    def test_few_failures_are_zeroed(self, caplog):
        batch = DISTINCT
        reward = FailsOn([batch[0][0].text])
        stats = scst_step(model(), batch, reward, ScstConfig())
        assert stats.failures == 1
        assert not stats.aborted
        assert "advantages set to 0" in caplog.text

    def test_too_many_failures_abort(self):
        m = model()
        before = m.params.arrays()
        batch = DISTINCT
        reward = FailsOn([batch[0][0].text, batch[1][0].text])
        stats = scst_step(m, batch, reward, ScstConfig())
        assert stats.aborted
        assert stats.failures == 2
        for name, array in before.items():
            np.testing.assert_array_equal(m.params[name].data, array)

    def test_beam_baseline(self):
        stats = scst_step(model(), EXAMPLES[:3], PhoneticReward(LEXICON), ScstConfig(baseline="beam", beam_width=2))
        assert 0.0 <= stats.baseline_reward <= 1.0

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="empty"):
            scst_step(model(), [], Constant(), ScstConfig())


def test_mean_sampled_reward_is_seeded():
    m = model()
    reward = PhoneticReward(LEXICON)
    a = mean_sampled_reward(m, EXAMPLES[:10], reward, np.random.default_rng(4))
    b = mean_sampled_reward(m, EXAMPLES[:10], reward, np.random.default_rng(4))
    assert a == b
    assert 0.0 <= a <= 1.0


class TestTrain:
    def test_needs_a_minimum_corpus(self):
        with pytest.raises(ValueError, match=f"at least {MIN_CORPUS} training pairs, got 99"):
            train_scst(model(), EXAMPLES[:99], Constant(), ScstConfig())

    def test_short_run_with_dev(self):
        m = model()
        config = ScstConfig(steps=4, batch_size=4, eval_every=2, log_every=1, lr=1e-3)
        result = train_scst(m, EXAMPLES[:100], PhoneticReward(LEXICON), config, dev=EXAMPLES[100:])
        assert result.steps == 4
        assert result.restores == 0
        assert result.best_step in (0, 2, 4)
        assert result.best_dev_reward >= result.initial_dev_reward
        dev_steps = [r["step"] for r in result.history if "dev_reward" in r]
        assert dev_steps == [0, 2, 4]

    def test_patience_stops_early(self):
        config = ScstConfig(steps=20, batch_size=4, eval_every=1, patience=2)
        result = train_scst(model(), EXAMPLES[:100], Constant(), config, dev=EXAMPLES[100:])
        # a constant reward never improves on the initial evaluation
        assert result.steps == 2
        assert result.best_step == 0

    def test_divergence_restores_then_raises(self, monkeypatch, caplog):
        original = scst.mixed_loss

        def exploding(*args, **kwargs):
            total, mle, pg = original(*args, **kwargs)
            return ad.scale(total, math.nan), mle, pg

        monkeypatch.setattr(scst, "mixed_loss", exploding)
        config = ScstConfig(steps=10, batch_size=4, max_restores=2)
        with pytest.raises(DivergenceError, match="after 2 restorations"):
            train_scst(model(), EXAMPLES[:100], Constant(), config)
        assert caplog.text.count("restored checkpoint") == 2

    def test_same_seed_same_metrics(self, tmp_path):
        config = ScstConfig(steps=4, batch_size=4, eval_every=2, log_every=1, lr=1e-3, seed=5)
        reward = PhoneticReward(LEXICON)
        for name in ("a.jsonl", "b.jsonl"):
            with JsonlWriter(tmp_path / name) as metrics:
                train_scst(model(), EXAMPLES[:100], reward, config, dev=EXAMPLES[100:], metrics=metrics)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert len((tmp_path / "a.jsonl").read_text(encoding="utf-8").splitlines()) == 7

    def test_zero_patience_never_stops(self):
        config = ScstConfig(steps=5, batch_size=4, eval_every=1, patience=0)
        result = train_scst(model(), EXAMPLES[:100], Constant(), config, dev=EXAMPLES[100:])
        assert result.steps == 5
        assert [r["step"] for r in result.history if "dev_reward" in r] == [0, 1, 2, 3, 4, 5]

    def test_checkpoint_refreshed_without_dev(self, monkeypatch):
        original_loss, original_snapshot, original_restore = scst.mixed_loss, scst._snapshot, scst._restore
        calls, snapshots, restored = [], [], []

        def nan_on_third_step(*args, **kwargs):
            calls.append(None)
            total, mle, pg = original_loss(*args, **kwargs)
            return (ad.scale(total, math.nan) if len(calls) == 3 else total), mle, pg

        def snapshot(m, optimizer):
            snapshots.append(original_snapshot(m, optimizer))
            return snapshots[-1]

        def restore(m, optimizer, taken):
            restored.append(taken)
            original_restore(m, optimizer, taken)

        monkeypatch.setattr(scst, "mixed_loss", nan_on_third_step)
        monkeypatch.setattr(scst, "_snapshot", snapshot)
        monkeypatch.setattr(scst, "_restore", restore)
        config = ScstConfig(steps=4, batch_size=4, eval_every=2)
        result = train_scst(model(), EXAMPLES[:100], Constant(), config)
        assert result.restores == 1
        # initial, after step 2, after step 4
        assert len(snapshots) == 3
        assert restored[0] is snapshots[1]


@pytest.mark.slow
def test_phonetic_reward_beats_likelihood_alone():
    pairs = list(generate_synthetic_corpus(1, 1200, LEXICON))
    vocab = build_vocab(pairs)
    config = ModelConfig(d_tok=32, d_hid=32, enc_layers=1, dec_layers=1, heads=4, d_ff=64, max_len=16, seed=0)
    examples = as_examples(pairs, vocab, max_len=config.max_len)
    train, dev = examples[:1000], examples[1000:]
    base = Seq2SeqModel(config, vocab)
    train_mle(base, train, TrainConfig(lr=3e-3, warmup_steps=100, steps=1500, max_tokens=512, log_every=500))

    tuned, steady = base.clone(), base.clone()
    reward = PhoneticReward(LEXICON)
    scst_config = ScstConfig(steps=400, batch_size=32, lr=1e-3, eval_every=100, log_every=100, patience=0)
    train_scst(tuned, train, reward, scst_config)
    train_mle(steady, train, TrainConfig(lr=1e-3, warmup_steps=0, steps=400, max_tokens=512, log_every=100))

    gain = mean_sampled_reward(tuned, dev, reward, np.random.default_rng(0)) - mean_sampled_reward(
        steady, dev, reward, np.random.default_rng(0)
    )
    assert gain >= 0.05
    # the likelihood term keeps the requests plausible
    assert evaluate_loss(tuned, dev) <= 1.3 * evaluate_loss(steady, dev)
