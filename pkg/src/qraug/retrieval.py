"""Dense retrieval evaluation: dual encoder, exact index and P@K.

The retriever is a :class:`~qraug.encoder.SemanticEncoder` trained on its
own, never the one behind the semantic reward. Search is exhaustive, so a
ranking always equals the full cosine sort with ties in insertion order.
"""

import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._typing import Utterance
from .corpus import PairExample, Vocabulary, build_vocab, normalize
from .encoder import EncoderConfig, SemanticEncoder, train_contrastive
from .util import JsonlWriter, dumps

__all__ = [
    "RetrievalConfig",
    "RetrievalIndex",
    "EvalReport",
    "train_retriever",
    "build_index",
    "evaluate_p_at_k",
]

logger = logging.getLogger(__name__)

_EMBEDDINGS = "embeddings.json"
_REWRITES = "rewrites.txt"


@dataclass
class RetrievalConfig:
    d_emb: int = 64
    dim: int = 64
    lr: float = 3e-3
    warmup_steps: int = 0
    steps: int = 1500
    batch_size: int = 32
    temperature: float = 0.05
    clip_norm: float = 1.0
    log_every: int = 50
    dtype: str = "float32"
    seed: int = 0
    ks: tuple[int, ...] = (1, 5)

    def __post_init__(self) -> None:
        self.ks = tuple(int(k) for k in self.ks)
        if not self.ks or any(k < 1 for k in self.ks):
            raise ValueError("retrieval.ks must be a non-empty list of positive integers")
        self.encoder_config()

    def encoder_config(self) -> EncoderConfig:
        """The encoder settings, validated under the ``encoder.`` names."""
        names = {f.name for f in fields(EncoderConfig)}
        return EncoderConfig(**{k: v for k, v in asdict(self).items() if k in names})


def train_retriever(
    pairs: Sequence[PairExample],
    config: RetrievalConfig,
    *,
    vocab: Vocabulary | None = None,
    metrics: JsonlWriter | None = None,
    progress: bool = False,
) -> SemanticEncoder:
    """Train a dual encoder with shared weights on (request, rewrite) pairs.

    Returns:
        The encoder, frozen.

    Raises:
        ValueError: With fewer than two pairs or a batch size below 2.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("retriever training needs at least 2 pairs")
    encoder = SemanticEncoder(config.encoder_config(), vocab if vocab is not None else build_vocab(pairs))
    train_contrastive(encoder, [(p.request, p.rewrite) for p in pairs], metrics=metrics, progress=progress)
    return encoder.freeze()


class RetrievalIndex:
    """Unit-norm rewrite embeddings aligned with their surface strings."""

    __slots__ = ("encoder", "rewrites", "matrix", "_positions")

    def __init__(self, encoder: SemanticEncoder, rewrites: Sequence[str], matrix: np.ndarray) -> None:
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (len(rewrites), encoder.dim):
            raise ValueError(
                f"index matrix shape {matrix.shape} does not match {len(rewrites)} rewrites of dim {encoder.dim}"
            )
        if len(rewrites) and not np.allclose(np.linalg.norm(matrix, axis=1), 1.0, atol=1e-6):
            raise ValueError("index rows must be unit-norm")
        self.encoder = encoder
        self.rewrites = list(rewrites)
        self.matrix = matrix
        self._positions: dict[str, int] = {}
        for i, r in enumerate(self.rewrites):
            self._positions.setdefault(r, i)

    def __len__(self) -> int:
        return len(self.rewrites)

    def __repr__(self) -> str:
        return f"RetrievalIndex(size={len(self)}, dim={self.encoder.dim})"

    def scores(self, queries: Sequence[Utterance]) -> np.ndarray:
        """Cosine similarity of every query (rows) to every rewrite (columns)."""
        return self.encoder.embed(queries) @ self.matrix.T

    def search(self, queries: Sequence[Utterance], k: int = 5) -> list[list[tuple[str, float]]]:
        """Top ``k`` (rewrite, score) per query, best first."""
        if k < 1:
            raise ValueError("k must be positive")
        out = []
        for row in self.scores(queries):
            top = np.argsort(-row, kind="stable")[:k]
            out.append([(self.rewrites[i], float(row[i])) for i in top])
        return out

    def position(self, rewrite: str) -> int | None:
        """First row holding the normalized ``rewrite``, or None."""
        return self._positions.get(normalize(rewrite))

    def save(self, directory: str | Path) -> None:
        """Write ``embeddings.json`` and ``rewrites.txt`` under ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        doc = {"dim": self.encoder.dim, "rows": self.matrix.tolist()}
        (directory / _EMBEDDINGS).write_text(dumps(doc) + "\n", encoding="utf-8")
        (directory / _REWRITES).write_text("".join(r + "\n" for r in self.rewrites), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path, encoder: SemanticEncoder) -> "RetrievalIndex":
        directory = Path(directory)
        doc = json.loads((directory / _EMBEDDINGS).read_text(encoding="utf-8"))
        rewrites = (directory / _REWRITES).read_text(encoding="utf-8").splitlines()
        if doc.get("dim") != encoder.dim:
            raise ValueError(f"{directory}: index dim {doc.get('dim')} does not match encoder dim {encoder.dim}")
        matrix = np.asarray(doc["rows"], dtype=np.float64).reshape(len(doc["rows"]), encoder.dim)
        return cls(encoder, rewrites, matrix)


def build_index(encoder: SemanticEncoder, rewrites: Iterable[Utterance]) -> RetrievalIndex:
    """Embed the distinct rewrites, keeping first-seen order.

    Raises:
        ValueError: If no rewrite is given.
    """
    seen: dict[str, None] = {}
    for r in rewrites:
        text = normalize(r if isinstance(r, str) else r.text)
        if text:
            seen.setdefault(text)
    if not seen:
        raise ValueError("cannot build an index from an empty rewrite list")
    texts = list(seen)
    index = RetrievalIndex(encoder, texts, encoder.embed(texts))
    logger.info("index: %d distinct rewrites", len(index))
    return index


@dataclass
class EvalReport:
    queries: int
    p_at: dict[int, float]
    missing: int = 0  #: Test pairs whose gold rewrite is not indexed
    by_tag: dict[str, dict[int, float]] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "queries": self.queries,
            "missing": self.missing,
            **{f"p@{k}": v for k, v in self.p_at.items()},
            "by_tag": {t: {f"p@{k}": v for k, v in p.items()} for t, p in self.by_tag.items()},
        }


def _gold_rank(row: np.ndarray, gold: int) -> int:
    """Zero-based rank of ``gold`` in the stable descending sort of ``row``."""
    s = row[gold]
    return int(np.count_nonzero(row > s) + np.count_nonzero(row[:gold] == s))


def evaluate_p_at_k(
    index: RetrievalIndex,
    testset: Sequence[PairExample],
    ks: Sequence[int] = (1, 5),
    batch_size: int = 256,
) -> EvalReport:
    """Fraction of test requests whose gold rewrite ranks within the top K.

    A gold rewrite missing from the index counts as a miss at every K.

    Raises:
        ValueError: If the testset is empty or a K is not positive.
    """
    if not testset:
        raise ValueError("cannot evaluate an empty testset")
    ks = sorted({int(k) for k in ks})
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive integers")
    ranks: list[int | None] = []
    for start in range(0, len(testset), batch_size):
        chunk = testset[start : start + batch_size]
        scores = index.scores([p.request for p in chunk])
        for row, pair in zip(scores, chunk):
            gold = index.position(pair.rewrite)
            ranks.append(None if gold is None else _gold_rank(row, gold))

    def p_at(selected: list[int | None]) -> dict[int, float]:
        return {k: sum(r is not None and r < k for r in selected) / len(selected) for k in ks}

    groups: dict[str, list[int | None]] = defaultdict(list)
    for rank, pair in zip(ranks, testset):
        groups[pair.tag or "none"].append(rank)
    missing = sum(r is None for r in ranks)
    if missing:
        logger.warning("%d of %d gold rewrites are not in the index", missing, len(ranks))
    report = EvalReport(
        queries=len(ranks),
        p_at=p_at(ranks),
        missing=missing,
        by_tag={t: p_at(g) for t, g in sorted(groups.items())},
    )
    summary = {f"p@{k}": round(v, 4) for k, v in report.p_at.items()}
    logger.info("retrieval: %s over %d queries", summary, report.queries)
    return report
