"""Phonetic, semantic-dissimilarity and combined rewards.

Every reward scores a generated candidate against its source utterance and
lands in [0, 1]; 0 means the candidate sounds (or means) exactly the same.
"""

import logging
from collections.abc import Iterable, Iterator, Sequence

import numpy as np

from ._typing import Utterance
from .corpus import PairExample, Vocabulary, build_vocab, normalize
from .encoder import EncoderConfig, SemanticEncoder, train_contrastive
from .phonetics import PronunciationLexicon, phonetic_reward
from .util import JsonlWriter

__all__ = [
    "DEFAULT_ALPHA",
    "PhoneticReward",
    "SemanticReward",
    "CombinedReward",
    "cosine_dissimilarity",
    "semantic_dissimilarity",
    "combined_reward",
    "train_semantic_encoder",
    "score_pairs",
]

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.5  #: Phonetic share of the combined reward


def _text(u: Utterance) -> str:
    return normalize(u if isinstance(u, str) else u.text)


def cosine_dissimilarity(u: np.ndarray, v: np.ndarray) -> float:
    """``1 - cos(u, v)`` clamped to [0, 1].

    Raises:
        ValueError: If either vector is zero.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine of a zero vector")
    return float(np.clip(1.0 - (u @ v) / (nu * nv), 0.0, 1.0))


def semantic_dissimilarity(
    candidate: Utterance, source: Utterance, encoder: SemanticEncoder, *, allow_untrained: bool = False
) -> float:
    """Clamped cosine distance of the two utterance embeddings.

    Raises:
        ValueError: If either utterance is empty.
        RuntimeError: If the encoder is still trainable and
            ``allow_untrained`` is not set.
    """
    if not encoder.frozen and not allow_untrained:
        raise RuntimeError("semantic encoder is not trained (freeze it or pass allow_untrained=True)")
    a, b = _text(candidate), _text(source)
    if not a or not b:
        raise ValueError("cannot score an empty utterance")
    ids = encoder.ids([a, b])
    if np.array_equal(ids[0], ids[1]):
        return 0.0
    e = encoder.embed([a, b])
    return cosine_dissimilarity(e[0], e[1])


def _check_alpha(alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return float(alpha)


def combined_reward(
    candidate: Utterance,
    source: Utterance,
    alpha: float,
    lexicon: PronunciationLexicon,
    encoder: SemanticEncoder,
    *,
    allow_untrained: bool = False,
) -> float:
    """``alpha * r_p + (1 - alpha) * r_d``.

    Raises:
        ValueError: If alpha is outside [0, 1].
    """
    alpha = _check_alpha(alpha)
    r_p = phonetic_reward(candidate, source, lexicon)
    r_d = semantic_dissimilarity(candidate, source, encoder, allow_untrained=allow_untrained)
    return alpha * r_p + (1.0 - alpha) * r_d


class PhoneticReward:
    """Normalized phoneme edit distance."""

    name = "phonetic"

    def __init__(self, lexicon: PronunciationLexicon) -> None:
        self.lexicon = lexicon

    def __call__(self, candidate: Utterance, source: Utterance) -> float:
        return phonetic_reward(candidate, source, self.lexicon)


class SemanticReward:
    """Clamped cosine distance under a trained sentence encoder."""

    name = "semantic"

    def __init__(self, encoder: SemanticEncoder, *, allow_untrained: bool = False) -> None:
        if not encoder.frozen and not allow_untrained:
            raise RuntimeError("semantic encoder is not trained (freeze it or pass allow_untrained=True)")
        self.encoder = encoder
        self.allow_untrained = allow_untrained

    def __call__(self, candidate: Utterance, source: Utterance) -> float:
        return semantic_dissimilarity(candidate, source, self.encoder, allow_untrained=self.allow_untrained)


class CombinedReward:
    """Blend of the phonetic and semantic rewards, weighted by ``alpha``."""

    name = "combined"

    def __init__(
        self,
        lexicon: PronunciationLexicon,
        encoder: SemanticEncoder,
        alpha: float = DEFAULT_ALPHA,
        *,
        allow_untrained: bool = False,
    ) -> None:
        self.alpha = _check_alpha(alpha)
        self.phonetic = PhoneticReward(lexicon)
        self.semantic = SemanticReward(encoder, allow_untrained=allow_untrained)

    def components(self, candidate: Utterance, source: Utterance) -> tuple[float, float]:
        """The (r_p, r_d) pair the blend is made of."""
        return self.phonetic(candidate, source), self.semantic(candidate, source)

    def __call__(self, candidate: Utterance, source: Utterance) -> float:
        r_p, r_d = self.components(candidate, source)
        return self.alpha * r_p + (1.0 - self.alpha) * r_d


def train_semantic_encoder(
    pairs: Iterable[PairExample],
    config: EncoderConfig,
    *,
    vocab: Vocabulary | None = None,
    metrics: JsonlWriter | None = None,
    progress: bool = False,
) -> SemanticEncoder:
    """Train the reward encoder on (request, rewrite) pairs and freeze it.

    Raises:
        ValueError: With fewer than two pairs.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("semantic encoder training needs at least 2 pairs")
    encoder = SemanticEncoder(config, vocab if vocab is not None else build_vocab(pairs))
    train_contrastive(encoder, [(p.request, p.rewrite) for p in pairs], metrics=metrics, progress=progress)
    return encoder.freeze()


def score_pairs(
    pairs: Sequence[PairExample],
    lexicon: PronunciationLexicon,
    encoder: SemanticEncoder | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> Iterator[dict]:
    """Score each request against its rewrite.

    Yields records with the pair fields plus ``r_p``, and ``r_d``/``r_c``
    when an encoder is given.
    """
    alpha = _check_alpha(alpha)
    for pair in pairs:
        record = pair.to_record()
        r_p = phonetic_reward(pair.request, pair.rewrite, lexicon)
        record["r_p"] = r_p
        if encoder is not None:
            r_d = semantic_dissimilarity(pair.request, pair.rewrite, encoder)
            record["r_d"] = r_d
            record["r_c"] = alpha * r_p + (1.0 - alpha) * r_d
        yield record
