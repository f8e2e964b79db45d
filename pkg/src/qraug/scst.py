"""Self-critical sequence training.

Each step samples requests from the model, scores them against the source
rewrite, and subtracts the reward of the model's own greedy (or beam)
output as a baseline. The policy-gradient surrogate is mixed with the
teacher-forced likelihood of the ground truth:

    loss = mle_weight * L_mle + (1 - mle_weight) * pg_scale * L_pg

``pg_scale`` starts at 1 and halves every time the divergence guard has to
restore a checkpoint.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from ._rewards import REWARDS
from ._typing import RewardFn
from .autodiff import Tape, Tensor
from .corpus import TokenSequence
from .optim import Adam, clip_grad_norm
from .seq2seq import (
    Batch,
    Example,
    Seq2SeqModel,
    decode_beam,
    evaluate_loss,
    greedy_batch,
    sample_batch,
    teacher_forced_loss,
    token_log_probs,
)
from .util import JsonlWriter, make_rng

__all__ = [
    "MIN_CORPUS",
    "DivergenceError",
    "ScstConfig",
    "ScstBatchStats",
    "ScstResult",
    "policy_gradient_loss",
    "mixed_loss",
    "scst_step",
    "mean_sampled_reward",
    "train_scst",
]

logger = logging.getLogger(__name__)

MIN_CORPUS = 100  #: Smallest training set train_scst accepts


class DivergenceError(RuntimeError):
    """Raised when the loss keeps going non-finite after every restoration."""


@dataclass
class ScstConfig:
    reward: str = "phonetic"
    alpha: float = 0.5
    mle_weight: float = 0.5  #: Share of the likelihood term (lambda)
    samples: int = 1  #: Sampled requests per source (k)
    temperature: float = 1.0
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-5
    warmup_steps: int = 0
    clip_norm: float = 1.0
    eval_every: int = 250
    patience: int = 4  #: Dev evaluations without improvement before stopping; 0 never stops
    log_every: int = 50
    baseline: str = "greedy"
    beam_width: int = 4
    length_penalty: float = 0.6
    max_failure_rate: float = 0.1
    max_restores: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.reward.lower() not in REWARDS:
            raise ValueError(f"scst.reward must be one of {', '.join(REWARDS)}, got {self.reward!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("scst.alpha must be in [0, 1]")
        if not 0.0 <= self.mle_weight <= 1.0:
            raise ValueError("scst.mle_weight must be in [0, 1]")
        if not self.temperature > 0:
            raise ValueError("scst.temperature must be positive")
        for name in ("samples", "steps", "batch_size", "eval_every", "log_every", "beam_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"scst.{name} must be positive")
        if self.baseline not in ("greedy", "beam"):
            raise ValueError("scst.baseline must be greedy or beam")
        if self.lr <= 0:
            raise ValueError("scst.lr must be positive")
        if not 0.0 <= self.max_failure_rate <= 1.0:
            raise ValueError("scst.max_failure_rate must be in [0, 1]")
        for name in ("patience", "max_restores", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"scst.{name} must be non-negative")


@dataclass(frozen=True)
class ScstBatchStats:
    """Batch means; ``advantage`` is averaged after per-sample subtraction."""

    sampled_reward: float
    baseline_reward: float
    advantage: float
    loss: float
    mle_loss: float
    pg_loss: float
    failures: int = 0
    aborted: bool = False

    def record(self, step: int) -> dict:
        return {
            "step": step,
            "mean_sampled_reward": self.sampled_reward,
            "baseline_reward": self.baseline_reward,
            "advantage": self.advantage,
            "loss": self.loss,
            "mle_loss": self.mle_loss,
            "pg_loss": self.pg_loss,
            "failures": self.failures,
        }


def policy_gradient_loss(log_probs: Tensor, mask: np.ndarray, advantages: np.ndarray) -> Tensor:
    """REINFORCE-with-baseline surrogate.

    ``-mean_i(A_i * sum_t log p(u_it))``: token log-probabilities are summed
    over each sequence, weighted by its advantage, and averaged over the
    sequences.

    Args:
        log_probs: (n, length) token log-probabilities, with gradient.
        mask: (n, length) boolean, true on the sampled tokens.
        advantages: (n,) constants.
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    if log_probs.ndim != 2 or mask.shape != log_probs.shape or advantages.shape != log_probs.shape[:1]:
        raise ValueError(
            f"policy gradient shapes disagree: {log_probs.shape}, {mask.shape}, {advantages.shape}"
        )
    weights = -(advantages[:, None] * mask) / len(advantages)
    return ad.sum(ad.mul(log_probs, ad.constant_like(weights, log_probs)))


def mixed_loss(
    model: Seq2SeqModel,
    examples: Sequence[Example],
    samples: Sequence[TokenSequence],
    advantages: np.ndarray,
    mle_weight: float,
    pg_scale: float = 1.0,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """Build (total, mle, pg) losses; ``samples[i]`` came from source ``i // k``.

    At ``mle_weight == 1`` the policy-gradient term is not built at all.
    """
    mle = teacher_forced_loss(model, Batch.of(examples))
    if mle_weight == 1.0:
        return mle, mle, None
    k = len(samples) // len(examples)
    sources = [s for s, _ in examples for _ in range(k)]
    batch = Batch.of(list(zip(sources, samples)))
    pg = policy_gradient_loss(token_log_probs(model, batch), batch.mask, advantages)
    pg_part = ad.scale(pg, (1.0 - mle_weight) * pg_scale)
    if mle_weight == 0.0:
        return pg_part, mle, pg
    return ad.add(ad.scale(mle, mle_weight), pg_part), mle, pg


def _score(reward: RewardFn, candidate: str, source: str) -> float | None:
    try:
        value = float(reward(candidate, source))
    except Exception as e:  # noqa: BLE001
        logger.debug("reward failed on %r: %s", candidate, e)
        return None
    return value if math.isfinite(value) else None


def _baselines(model: Seq2SeqModel, sources: Sequence[TokenSequence], config: ScstConfig) -> list[str]:
    vocab = model.vocab
    if config.baseline == "beam":
        return [decode_beam(model, s, config.beam_width, config.length_penalty).text(vocab) for s in sources]
    return [r.text(vocab) for r in greedy_batch(model, sources)]


def scst_step(
    model: Seq2SeqModel,
    batch: Sequence[Example],
    reward: RewardFn,
    config: ScstConfig,
    *,
    optimizer: Adam | None = None,
    rng: np.random.Generator | None = None,
    pg_scale: float = 1.0,
) -> ScstBatchStats:
    """One mixed-objective update on ``batch`` of (rewrite, request) examples.

    Samples cut at max length without EOS are rewarded on their truncated
    text. A sample whose reward cannot be computed gets advantage 0; when
    more than ``max_failure_rate`` of the samples fail, or the loss is not
    finite, no update is made and the stats say so (``aborted`` or a
    non-finite ``loss``).

    Raises:
        ValueError: If the batch is empty.
    """
    if not batch:
        raise ValueError("scst batch is empty")
    optimizer = optimizer if optimizer is not None else Adam(model.parameters(), config.lr)
    rng = rng if rng is not None else make_rng(config.seed)
    vocab = model.vocab
    k = config.samples
    sources = [s for s, _ in batch]
    # samples and baselines are decoded outside the tape
    drawn = sample_batch(model, [s for s in sources for _ in range(k)], rng, config.temperature)
    baselines = _baselines(model, sources, config)

    sources_text = [s.text for s in sources]
    base_rewards = [_score(reward, b, r) for b, r in zip(baselines, sources_text)]
    sampled, advantages, failures = [], np.zeros(len(drawn)), 0
    for i, result in enumerate(drawn):
        src = i // k
        r = _score(reward, result.text(vocab), sources_text[src])
        b = base_rewards[src]
        if r is None or b is None:
            failures += 1
            continue
        sampled.append(r)
        advantages[i] = r - b
    valid_base = [b for b in base_rewards if b is not None]
    mean_r = float(np.mean(sampled)) if sampled else math.nan
    mean_b = float(np.mean(valid_base)) if valid_base else math.nan
    mean_a = float(advantages.mean())

    if failures > config.max_failure_rate * len(drawn):
        logger.warning("scst: %d of %d rewards failed, step skipped", failures, len(drawn))
        return ScstBatchStats(mean_r, mean_b, mean_a, math.nan, math.nan, math.nan, failures, aborted=True)
    if failures:
        logger.warning("scst: %d of %d rewards failed, advantages set to 0", failures, len(drawn))

    samples = [TokenSequence(r.tokens, r.text(vocab)) for r in drawn]
    params = model.parameters()
    optimizer.zero_grad()
    with Tape() as tape:
        total, mle, pg = mixed_loss(model, batch, samples, advantages, config.mle_weight, pg_scale)
    loss = total.item()
    pg_value = math.nan if pg is None else pg.item()
    if not math.isfinite(loss):
        return ScstBatchStats(mean_r, mean_b, mean_a, loss, mle.item(), pg_value, failures)
    tape.backward(total)
    clip_grad_norm(params, config.clip_norm)
    optimizer.step()
    return ScstBatchStats(mean_r, mean_b, mean_a, loss, mle.item(), pg_value, failures)


def mean_sampled_reward(
    model: Seq2SeqModel,
    examples: Sequence[Example],
    reward: RewardFn,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> float:
    """Mean reward of one sample per source; failed rewards are skipped."""
    drawn = sample_batch(model, [s for s, _ in examples], rng, temperature)
    values = [_score(reward, r.text(model.vocab), s.text) for r, (s, _) in zip(drawn, examples)]
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else math.nan


@dataclass
class ScstResult:
    steps: int
    restores: int
    initial_dev_reward: float | None = None
    best_dev_reward: float | None = None
    best_step: int | None = None
    history: list[dict] = field(default_factory=list)


def _snapshot(model: Seq2SeqModel, optimizer: Adam) -> tuple[dict, dict]:
    return model.params.arrays(), optimizer.state()


def _restore(model: Seq2SeqModel, optimizer: Adam, snapshot: tuple[dict, dict]) -> None:
    model.params.assign(snapshot[0])
    optimizer.load_state(snapshot[1])


def train_scst(
    model: Seq2SeqModel,
    train: Sequence[Example],
    reward: RewardFn,
    config: ScstConfig,
    *,
    dev: Sequence[Example] | None = None,
    metrics: JsonlWriter | None = None,
    progress: bool = False,
) -> ScstResult:
    """Fine-tune a warm-started model in place.

    With a dev set, the mean sampled dev reward is measured at the start and
    every ``eval_every`` steps; training stops after ``patience``
    evaluations without improvement and the best-dev parameters are kept.
    Every ``eval_every`` steps, with or without a dev set, the parameters
    after a finite step become the checkpoint the divergence guard
    restores. A ``patience`` of 0 never stops early.

    Raises:
        ValueError: If ``train`` has fewer than MIN_CORPUS examples.
        DivergenceError: If the loss is non-finite after ``max_restores``
            restorations.
    """
    if len(train) < MIN_CORPUS:
        raise ValueError(f"scst needs at least {MIN_CORPUS} training pairs, got {len(train)}")
    order_seq, sample_seq, dev_seq = np.random.SeedSequence(config.seed).spawn(3)
    order_rng, sample_rng = make_rng(order_seq), make_rng(sample_seq)
    optimizer = Adam(model.parameters(), config.lr, warmup_steps=config.warmup_steps)
    result = ScstResult(0, 0)
    pg_scale = 1.0
    checkpoint = _snapshot(model, optimizer)
    best = checkpoint
    stale = 0

    def evaluate(step: int) -> float:
        value = mean_sampled_reward(model, dev, reward, make_rng(dev_seq), config.temperature)
        record = {"step": step, "dev_reward": value, "dev_loss": evaluate_loss(model, dev)}
        result.history.append(record)
        if metrics is not None:
            metrics.write(record)
        logger.info("scst: step %d dev reward %.4f dev loss %.4f", step, value, record["dev_loss"])
        return value

    if dev:
        result.initial_dev_reward = result.best_dev_reward = evaluate(0)
        result.best_step = 0

    order: list[int] = []
    bar = tqdm(total=config.steps, desc=f"scst/{reward.name}", disable=not progress, leave=False)
    step = 0
    while step < config.steps:
        if len(order) < config.batch_size:
            order.extend(int(i) for i in order_rng.permutation(len(train)))
        idx, order = order[: config.batch_size], order[config.batch_size :]
        stats = scst_step(
            model, [train[i] for i in idx], reward, config, optimizer=optimizer, rng=sample_rng, pg_scale=pg_scale
        )
        step += 1
        bar.update()
        if not stats.aborted and not math.isfinite(stats.loss):
            if result.restores >= config.max_restores:
                raise DivergenceError(
                    f"loss is not finite at step {step} after {result.restores} restorations "
                    f"(pg scale {pg_scale:g}, mle loss {stats.mle_loss}, pg loss {stats.pg_loss})"
                )
            result.restores += 1
            pg_scale /= 2
            _restore(model, optimizer, checkpoint)
            logger.warning("scst: non-finite loss at step %d, restored checkpoint, pg scale %g", step, pg_scale)
        if step % config.log_every == 0 or step == config.steps:
            record = stats.record(step)
            result.history.append(record)
            if metrics is not None:
                metrics.write(record)
        if step % config.eval_every != 0 and step != config.steps:
            continue
        if math.isfinite(stats.loss):
            checkpoint = _snapshot(model, optimizer)
        if dev:
            value = evaluate(step)
            if value > result.best_dev_reward:
                result.best_dev_reward, result.best_step, best, stale = value, step, checkpoint, 0
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    logger.info("scst: early stop at step %d", step)
                    break
    bar.close()
    result.steps = step
    if dev:
        model.params.assign(best[0])
    return result
