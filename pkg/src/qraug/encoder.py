"""Mean-pooled sentence encoder and in-batch contrastive training.

The semantic reward and the retrieval evaluator each train their own
instance; nothing is shared between them but the architecture.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from ._typing import Utterance
from .autodiff import Tape, Tensor, no_grad
from .corpus import EOS, PAD, Vocabulary, pad_batch, tokenize
from .layers import Params, linear
from .optim import Adam, clip_grad_norm
from .util import JsonlWriter, load_checkpoint, make_rng, save_checkpoint

__all__ = [
    "CHECKPOINT_KIND",
    "EncoderConfig",
    "SemanticEncoder",
    "contrastive_loss",
    "train_contrastive",
]

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "encoder"


@dataclass
class EncoderConfig:
    d_emb: int = 64
    dim: int = 64
    lr: float = 3e-3
    warmup_steps: int = 0
    steps: int = 1500
    batch_size: int = 32
    temperature: float = 0.05  #: Cosine similarities are divided by this before the softmax
    clip_norm: float = 1.0
    log_every: int = 50
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("d_emb", "dim", "steps", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"encoder.{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("encoder.batch_size must be at least 2 (in-batch negatives)")
        if self.lr <= 0 or self.temperature <= 0:
            raise ValueError("encoder.lr and encoder.temperature must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("encoder.dtype must be float32 or float64")


class SemanticEncoder:
    """Token embeddings, mean pooling over words, one affine projection."""

    __slots__ = ("config", "vocab", "params", "frozen")

    def __init__(self, config: EncoderConfig, vocab: Vocabulary) -> None:
        self.config = config
        self.vocab = vocab
        p = Params(make_rng(config.seed), np.dtype(config.dtype))
        p.normal("emb", (len(vocab), config.d_emb), std=1.0)
        p.normal("proj.w", (config.d_emb, config.dim), std=1.0 / math.sqrt(config.d_emb))
        p.zeros("proj.b", (config.dim,))
        self.params = p
        self.frozen = False

    @property
    def dim(self) -> int:
        return self.config.dim

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "trainable"
        return f"SemanticEncoder(vocab={len(self.vocab)}, dim={self.dim}, {state})"

    def freeze(self) -> "SemanticEncoder":
        self.frozen = True
        return self

    def ids(self, utterances: Sequence[Utterance]) -> np.ndarray:
        """Re-tokenize surface text through this encoder's vocabulary.

        Raises:
            ValueError: If an utterance is empty.
        """
        seqs = [tokenize(u if isinstance(u, str) else u.text, self.vocab) for u in utterances]
        return pad_batch([s.ids for s in seqs])

    def forward(self, ids: np.ndarray) -> Tensor:
        """Unit-norm embeddings (batch, dim) of padded ids, with gradient."""
        ids = np.asarray(ids, dtype=np.int64)
        words = ids > EOS
        x = ad.embedding_lookup(self.params["emb"], ids)
        return ad.l2_normalize(linear(ad.masked_mean(x, words), self.params, "proj"))

    def embed(self, utterances: Sequence[Utterance]) -> np.ndarray:
        """Unit-norm float64 embeddings, one row per utterance."""
        if not utterances:
            return np.zeros((0, self.dim))
        with no_grad():
            return self.forward(self.ids(utterances)).data.astype(np.float64)

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            self.params.arrays(),
            kind=CHECKPOINT_KIND,
            meta={"config": asdict(self.config), "vocab": self.vocab.tokens, "frozen": self.frozen},
        )

    @classmethod
    def load(cls, path: str | Path) -> "SemanticEncoder":
        arrays, meta = load_checkpoint(path, kind=CHECKPOINT_KIND)
        encoder = cls(EncoderConfig(**meta["config"]), Vocabulary(meta["vocab"]))
        encoder.params.assign(arrays)
        encoder.frozen = bool(meta.get("frozen", True))
        return encoder


def contrastive_loss(encoder: SemanticEncoder, queries: np.ndarray, candidates: np.ndarray) -> Tensor:
    """In-batch softmax cross-entropy: query i must pick candidate i."""
    q = encoder.forward(queries)
    c = encoder.forward(candidates)
    sims = ad.scale(ad.matmul(q, ad.transpose(c, (1, 0))), 1.0 / encoder.config.temperature)
    return ad.softmax_cross_entropy(sims, np.arange(len(queries)), pad_id=-1)


def train_contrastive(
    encoder: SemanticEncoder,
    pairs: Sequence[tuple[str, str]],
    *,
    metrics: JsonlWriter | None = None,
    progress: bool = False,
) -> list[float]:
    """Train ``encoder`` in place on (query, candidate) pairs.

    Returns:
        The loss of every step.

    Raises:
        ValueError: With fewer than two pairs.
        RuntimeError: If the encoder is frozen.
    """
    config = encoder.config
    if encoder.frozen:
        raise RuntimeError("cannot train a frozen encoder")
    if len(pairs) < 2:
        raise ValueError("contrastive training needs at least 2 pairs")
    queries = encoder.ids([q for q, _ in pairs])
    candidates = encoder.ids([c for _, c in pairs])
    rng = make_rng(config.seed)
    params = list(encoder.params.values())
    opt = Adam(params, config.lr, warmup_steps=config.warmup_steps)
    size = min(config.batch_size, len(pairs))
    losses: list[float] = []
    for step in tqdm(range(1, config.steps + 1), desc="encoder", disable=not progress, leave=False):
        idx = rng.choice(len(pairs), size=size, replace=False)
        opt.zero_grad()
        with Tape() as tape:
            loss = contrastive_loss(encoder, _trim(queries[idx]), _trim(candidates[idx]))
        tape.backward(loss)
        clip_grad_norm(params, config.clip_norm)
        lr = opt.step()
        losses.append(loss.item())
        if metrics is not None and (step % config.log_every == 0 or step == config.steps):
            metrics.write({"step": step, "loss": losses[-1], "lr": lr})
    logger.info("encoder: %d steps, final loss %.4f", config.steps, losses[-1])
    return losses


def _trim(ids: np.ndarray) -> np.ndarray:
    width = int((ids != PAD).sum(axis=1).max())
    return ids[:, :width]

