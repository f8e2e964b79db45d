"""Transformer encoder-decoder over token sequences.

Pre-norm layers, sinusoidal positions, no dropout. PAD and BOS logits are
masked before every softmax, so training and all decoders share one output
distribution over the tokens the model may emit.
"""

import logging
import math
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from . import decoding
from ._typing import StepFn
from .autodiff import Tape, Tensor, no_grad
from .corpus import BOS, MAX_LEN, PAD, PairExample, TokenSequence, Vocabulary, batches_by_tokens, pad_batch
from .decoding import DecodeResult
from .layers import Params, attention, causal_mask, feed_forward, layer_norm, linear, sinusoidal_positions
from .optim import Adam, clip_grad_norm
from .util import JsonlWriter, load_checkpoint, make_rng, save_checkpoint

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "seq2seq"

Example = tuple[TokenSequence, TokenSequence]  #: (source, target)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The output projection is a separate ``d_hid x |V|`` matrix unless
    ``tie_embeddings`` is set, which needs ``d_tok == d_hid``.
    """

    d_tok: int = 128
    d_hid: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    d_ff: int = 256
    max_len: int = MAX_LEN
    tie_embeddings: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("d_tok", "d_hid", "heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be positive")
        for name in ("enc_layers", "dec_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"model.{name} must be non-negative")
        if self.d_hid % self.heads:
            raise ValueError(f"model.heads ({self.heads}) must divide model.d_hid ({self.d_hid})")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("model.dtype must be float32 or float64")
        if self.tie_embeddings and self.d_tok != self.d_hid:
            raise ValueError("model.tie_embeddings needs d_tok == d_hid")


@dataclass
class TrainConfig:
    """Optimizer and schedule for maximum-likelihood training."""

    lr: float = 3e-5
    warmup_steps: int = 200
    steps: int = 20_000
    max_tokens: int = 1024
    clip_norm: float = 1.0
    eval_every: int = 250
    patience: int = 0  #: Dev evaluations without improvement before stopping; 0 never stops
    log_every: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("train.lr must be positive")
        for name in ("steps", "max_tokens", "eval_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be positive")
        for name in ("warmup_steps", "patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name} must be non-negative")


@dataclass(frozen=True)
class Batch:
    """Padded id matrices for one training batch.

    ``target`` rows end with EOS; the decoder reads ``target`` shifted right
    behind BOS.
    """

    source: np.ndarray
    target: np.ndarray

    @classmethod
    def of(cls, examples: Sequence[Example]) -> "Batch":
        if not examples:
            raise ValueError("batch is empty")
        return cls(pad_batch([s.ids for s, _ in examples]), pad_batch([t.ids for _, t in examples]))

    @property
    def decoder_input(self) -> np.ndarray:
        bos = np.full((len(self.target), 1), BOS, dtype=np.int64)
        return np.concatenate([bos, self.target[:, :-1]], axis=1)

    @property
    def mask(self) -> np.ndarray:
        return self.target != PAD

    def __len__(self) -> int:
        return len(self.source)


class Seq2SeqModel:
    """Encoder-decoder transformer bound to a vocabulary."""

    __slots__ = ("config", "vocab", "params", "_positions", "_blocked_out")

    def __init__(self, config: ModelConfig, vocab: Vocabulary) -> None:
        self.config = config
        self.vocab = vocab
        c = config
        v = len(vocab)
        p = Params(make_rng(c.seed), np.dtype(c.dtype))
        p.normal("emb", (v, c.d_tok), std=1.0)
        if c.d_tok != c.d_hid:
            p.add_linear("in", c.d_tok, c.d_hid)
        for i in range(c.enc_layers):
            self._add_block(p, f"enc.{i}", cross=False)
        p.add_norm("enc.ln", c.d_hid)
        for i in range(c.dec_layers):
            self._add_block(p, f"dec.{i}", cross=True)
        p.add_norm("dec.ln", c.d_hid)
        if c.tie_embeddings:
            p.zeros("out.b", (v,))
        else:
            p.add_linear("out", c.d_hid, v)
        self.params = p
        self._positions = sinusoidal_positions(c.max_len + 1, c.d_hid).astype(p.dtype)
        blocked = np.zeros(v, dtype=bool)
        blocked[[PAD, BOS]] = True
        self._blocked_out = blocked

    def _add_block(self, p: Params, name: str, cross: bool) -> None:
        d = self.config.d_hid
        attns = ("self", "cross") if cross else ("self",)
        for j, attn in enumerate(attns, 1):
            p.add_norm(f"{name}.ln{j}", d)
            for proj in "qkvo":
                p.add_linear(f"{name}.{attn}.{proj}", d, d)
        p.add_norm(f"{name}.ln{len(attns) + 1}", d)
        p.add_linear(f"{name}.ff.in", d, self.config.d_ff)
        p.add_linear(f"{name}.ff.out", self.config.d_ff, d)

    def __repr__(self) -> str:
        n = sum(t.data.size for t in self.params.values())
        return f"Seq2SeqModel(vocab={len(self.vocab)}, params={n})"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def clone(self) -> "Seq2SeqModel":
        """Independent copy with identical parameters."""
        other = Seq2SeqModel(self.config, self.vocab)
        other.params.assign(self.params.arrays())
        return other

    def __deepcopy__(self, memo) -> "Seq2SeqModel":
        return self.clone()

    # Forward

    def _check_length(self, ids: np.ndarray, what: str) -> None:
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ValueError(f"{what} ids must be a non-empty (batch, length) matrix")
        if ids.shape[1] > self.config.max_len + 1:
            raise ValueError(f"{what} length {ids.shape[1]} exceeds max_len {self.config.max_len}")

    def _embed(self, ids: np.ndarray) -> Tensor:
        x = ad.embedding_lookup(self.params["emb"], ids)
        if "in.w" in self.params:
            x = linear(x, self.params, "in")
        return ad.add(x, Tensor(self._positions[: ids.shape[1]], dtype=x.dtype))

    def encode(self, source: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Encode padded source ids.

        Returns:
            Tuple of (memory of shape (batch, length, d_hid), pad mask).
        """
        source = np.asarray(source, dtype=np.int64)
        self._check_length(source, "source")
        pad = source == PAD
        blocked = np.broadcast_to(pad[:, None, :], (*source.shape, source.shape[1]))
        x = self._embed(source)
        for i in range(self.config.enc_layers):
            name = f"enc.{i}"
            h = layer_norm(x, self.params, f"{name}.ln1")
            x = ad.add(x, attention(h, h, self.params, f"{name}.self", self.config.heads, blocked))
            h = layer_norm(x, self.params, f"{name}.ln2")
            x = ad.add(x, feed_forward(h, self.params, f"{name}.ff"))
        return layer_norm(x, self.params, "enc.ln"), pad

    def decode_logits(self, memory: Tensor, source_pad: np.ndarray, prefix: np.ndarray) -> Tensor:
        """Output logits (batch, length, |V|) for decoder inputs ``prefix``."""
        prefix = np.asarray(prefix, dtype=np.int64)
        self._check_length(prefix, "target")
        b, t = prefix.shape
        causal = np.broadcast_to(causal_mask(t), (b, t, t))
        cross = np.broadcast_to(source_pad[:, None, :], (b, t, source_pad.shape[1]))
        heads = self.config.heads
        x = self._embed(prefix)
        for i in range(self.config.dec_layers):
            name = f"dec.{i}"
            h = layer_norm(x, self.params, f"{name}.ln1")
            x = ad.add(x, attention(h, h, self.params, f"{name}.self", heads, causal))
            h = layer_norm(x, self.params, f"{name}.ln2")
            x = ad.add(x, attention(h, memory, self.params, f"{name}.cross", heads, cross))
            h = layer_norm(x, self.params, f"{name}.ln3")
            x = ad.add(x, feed_forward(h, self.params, f"{name}.ff"))
        x = layer_norm(x, self.params, "dec.ln")
        if self.config.tie_embeddings:
            logits = ad.add(ad.matmul(x, ad.transpose(self.params["emb"], (1, 0))), self.params["out.b"])
        else:
            logits = linear(x, self.params, "out")
        return ad.mask_fill(logits, self._blocked_out)

    def logits(self, source: np.ndarray, prefix: np.ndarray) -> Tensor:
        return self.decode_logits(*self.encode(source), prefix)

    def stepper(self, sources: Sequence[TokenSequence | Sequence[int]]) -> StepFn:
        """Step function over the encoded ``sources`` for the decoders.

        Prefix rows map to source rows one to one; a single source serves
        any number of prefix rows (beam search).
        """
        ids = pad_batch([getattr(s, "ids", s) for s in sources])
        with no_grad():
            memory, pad = self.encode(ids)
        tiled: dict[int, tuple[Tensor, np.ndarray]] = {len(ids): (memory, pad)}

        def step(prefixes: np.ndarray) -> np.ndarray:
            n = len(prefixes)
            if n not in tiled:
                if len(ids) != 1:
                    raise ValueError(f"{n} prefixes for {len(ids)} sources")
                tiled[n] = (Tensor(np.repeat(memory.data, n, axis=0)), np.repeat(pad, n, axis=0))
            mem, mask = tiled[n]
            with no_grad():
                out = self.decode_logits(mem, mask, prefixes)
            last = out.data[:, -1, :].astype(np.float64)
            m = last.max(axis=-1, keepdims=True)
            return last - (m + np.log(np.exp(last - m).sum(axis=-1, keepdims=True)))

        return step

    # Persistence

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            self.params.arrays(),
            kind=CHECKPOINT_KIND,
            meta={"config": asdict(self.config), "vocab": self.vocab.tokens},
        )

    @classmethod
    def load(cls, path: str | Path) -> "Seq2SeqModel":
        """Rebuild a model saved with save().

        Raises:
            ValueError: If the file is not a seq2seq checkpoint or shapes differ.
        """
        arrays, meta = load_checkpoint(path, kind=CHECKPOINT_KIND)
        model = cls(ModelConfig(**meta["config"]), Vocabulary(meta["vocab"]))
        model.params.assign(arrays)
        return model


def as_examples(
    pairs: Sequence[PairExample], vocab: Vocabulary, *, inverse: bool = True, max_len: int = MAX_LEN
) -> list[Example]:
    """Encode pairs as (source, target) sequences.

    The augmentation direction (``inverse=True``) reads the rewrite and
    produces the request.
    """
    out = []
    for pair in pairs:
        request, rewrite = pair.encode(vocab, max_len)
        out.append((rewrite, request) if inverse else (request, rewrite))
    return out


def teacher_forced_loss(model: Seq2SeqModel, batch: Batch) -> Tensor:
    """Mean token cross-entropy of a batch, decoder fed the ground truth."""
    return ad.softmax_cross_entropy(model.logits(batch.source, batch.decoder_input), batch.target, PAD)


def forward_teacher_forced(model: Seq2SeqModel, source: TokenSequence, target: TokenSequence) -> Tensor:
    """Single-pair form of ``teacher_forced_loss``.

    Raises:
        ValueError: If either sequence is longer than the model's max_len.
    """
    for name, seq in (("source", source), ("target", target)):
        if len(seq) > model.config.max_len:
            raise ValueError(f"{name} has {len(seq)} tokens, max_len is {model.config.max_len}")
    return teacher_forced_loss(model, Batch.of([(source, target)]))


def token_log_probs(model: Seq2SeqModel, batch: Batch) -> Tensor:
    """log p(target_t | source, target_<t) for every target position, (batch, length)."""
    logits = model.logits(batch.source, batch.decoder_input)
    return ad.pick(ad.log_softmax(logits), batch.target)


def sequence_log_prob(model: Seq2SeqModel, source: TokenSequence, target: TokenSequence) -> Tensor:
    """Summed token log-probability of ``target``, with gradient."""
    batch = Batch.of([(source, target)])
    lp = token_log_probs(model, batch)
    return ad.sum(ad.mul(lp, ad.constant_like(batch.mask, lp)))


def _chunks(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def decode_greedy(model: Seq2SeqModel, source: TokenSequence) -> DecodeResult:
    return decoding.greedy(model.stepper([source]), 1, model.config.max_len)[0]


def decode_sample(
    model: Seq2SeqModel,
    source: TokenSequence,
    seed: int | np.random.Generator,
    temperature: float = 1.0,
) -> DecodeResult:
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return decoding.sample(model.stepper([source]), rng, 1, temperature, model.config.max_len)[0]


def decode_beam(
    model: Seq2SeqModel, source: TokenSequence, beam_width: int = 4, length_penalty: float = 0.6
) -> DecodeResult:
    return decoding.beam(model.stepper([source]), beam_width, length_penalty, model.config.max_len)


def greedy_batch(model: Seq2SeqModel, sources: Sequence[TokenSequence], batch_size: int = 64) -> list[DecodeResult]:
    """Greedy decoding of many sources, ``batch_size`` at a time."""
    out: list[DecodeResult] = []
    for chunk in _chunks(sources, batch_size):
        out.extend(decoding.greedy(model.stepper(chunk), len(chunk), model.config.max_len))
    return out


def sample_batch(
    model: Seq2SeqModel,
    sources: Sequence[TokenSequence],
    rng: np.random.Generator,
    temperature: float = 1.0,
    batch_size: int = 64,
) -> list[DecodeResult]:
    out: list[DecodeResult] = []
    for chunk in _chunks(sources, batch_size):
        out.extend(decoding.sample(model.stepper(chunk), rng, len(chunk), temperature, model.config.max_len))
    return out


def exact_match(model: Seq2SeqModel, examples: Sequence[Example], batch_size: int = 64) -> float:
    """Fraction of examples whose greedy output equals the target exactly."""
    if not examples:
        raise ValueError("no examples to evaluate")
    results = greedy_batch(model, [s for s, _ in examples], batch_size)
    hits = sum(r.tokens == t.ids for r, (_, t) in zip(results, examples))
    return hits / len(examples)


def evaluate_loss(model: Seq2SeqModel, examples: Sequence[Example], max_tokens: int = 1024) -> float:
    """Token-weighted mean cross-entropy, without recording gradients."""
    if not examples:
        raise ValueError("no examples to evaluate")
    order = sorted(range(len(examples)), key=lambda i: (len(examples[i][0]), len(examples[i][1]), i))
    total = count = 0.0
    start = 0
    while start < len(order):
        stop = start + 1
        width = max(len(examples[order[start]][0]), len(examples[order[start]][1]))
        while stop < len(order):
            s, t = examples[order[stop]]
            w = max(width, len(s), len(t))
            if w * (stop - start + 1) > max_tokens:
                break
            width, stop = w, stop + 1
        batch = Batch.of([examples[i] for i in order[start:stop]])
        with no_grad():
            loss = teacher_forced_loss(model, batch).item()
        n = int(batch.mask.sum())
        total += loss * n
        count += n
        start = stop
    return total / count


@dataclass
class TrainResult:
    steps: int
    final_loss: float
    best_step: int | None = None
    best_dev_loss: float | None = None


def train_mle(
    model: Seq2SeqModel,
    train: Sequence[Example],
    config: TrainConfig,
    *,
    dev: Sequence[Example] | None = None,
    metrics: JsonlWriter | None = None,
    progress: bool = False,
) -> TrainResult:
    """Teacher-forced maximum-likelihood training in place.

    Batches are drawn by token budget, bucketed by length. With a dev set
    the model is evaluated every ``eval_every`` steps and the best-dev
    parameters are restored at the end.

    Raises:
        ValueError: If ``train`` is empty.
        RuntimeError: If the loss becomes non-finite.
    """
    if not train:
        raise ValueError("no training examples")
    rng = make_rng(config.seed)
    lengths = [max(len(s), len(t)) for s, t in train]
    params = model.parameters()
    opt = Adam(params, config.lr, warmup_steps=config.warmup_steps)
    best_loss, best_step, best_params, stale = math.inf, None, None, 0
    step, value = 0, math.nan
    start = time.perf_counter()
    bar = tqdm(total=config.steps, desc="mle", disable=not progress, leave=False)
    stop = False
    while not stop:
        for idx in batches_by_tokens(lengths, config.max_tokens, rng):
            batch = Batch.of([train[i] for i in idx])
            opt.zero_grad()
            with Tape() as tape:
                loss = teacher_forced_loss(model, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise RuntimeError(f"training loss is not finite at step {step + 1}")
            tape.backward(loss)
            clip_grad_norm(params, config.clip_norm)
            lr = opt.step()
            step += 1
            bar.update()
            evaluating = bool(dev) and (step % config.eval_every == 0 or step == config.steps)
            record = None
            if evaluating or step % config.log_every == 0 or step == config.steps:
                record = {"step": step, "loss": value, "lr": lr, "wall_time": round(time.perf_counter() - start, 3)}
            if evaluating:
                dev_loss = evaluate_loss(model, dev, config.max_tokens)
                record["dev_loss"] = dev_loss
                if dev_loss < best_loss:
                    best_loss, best_step, best_params, stale = dev_loss, step, model.params.arrays(), 0
                else:
                    stale += 1
                    if config.patience and stale >= config.patience:
                        logger.info("mle: early stop at step %d (best dev loss %.4f at %d)", step, best_loss, best_step)
                        stop = True
            if record is not None:
                logger.debug("mle %s", record)
                if metrics is not None:
                    metrics.write(record)
            if stop or step >= config.steps:
                stop = True
                break
    bar.close()
    if best_params is not None:
        model.params.assign(best_params)
    logger.info("mle: %d steps, final loss %.4f", step, value)
    return TrainResult(step, value, best_step, None if best_step is None else best_loss)


__all__ = [
    "CHECKPOINT_KIND",
    "Example",
    "ModelConfig",
    "TrainConfig",
    "Batch",
    "Seq2SeqModel",
    "TrainResult",
    "as_examples",
    "teacher_forced_loss",
    "forward_teacher_forced",
    "token_log_probs",
    "sequence_log_prob",
    "decode_greedy",
    "decode_sample",
    "decode_beam",
    "greedy_batch",
    "sample_batch",
    "exact_match",
    "evaluate_loss",
    "train_mle",
]
