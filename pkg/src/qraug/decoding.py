"""Greedy, sampling and beam-search decoders.

The decoders are independent of the network: they drive a step function
that maps decoder prefixes (starting with BOS) to next-token log
probabilities. ``Seq2SeqModel.stepper`` supplies one for a trained model.
"""

from dataclasses import dataclass

import numpy as np

from ._typing import StepFn
from .autodiff import NEG_INF
from .corpus import BOS, EOS, MAX_LEN, TokenSequence, Vocabulary, detokenize

__all__ = [
    "GREEDY_TEMPERATURE",
    "DecodeResult",
    "greedy",
    "sample",
    "beam",
]

GREEDY_TEMPERATURE = 1e-4  #: Temperatures at or below this decode greedily
_MASKED = NEG_INF / 2


@dataclass(frozen=True, slots=True)
class DecodeResult:
    """One decoded sequence.

    ``tokens`` excludes BOS and ends with EOS unless the length cap was hit.
    """

    tokens: tuple[int, ...]
    token_log_probs: tuple[float, ...]

    @property
    def log_prob(self) -> float:
        """Sequence log-probability, the sum of the per-token values."""
        return float(sum(self.token_log_probs))

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    def text(self, vocab: Vocabulary) -> str:
        return detokenize(self.tokens, vocab)

    def sequence(self, vocab: Vocabulary) -> TokenSequence:
        """Model-facing form: EOS appended when the cap cut the output."""
        ids = self.tokens if self.finished else self.tokens + (EOS,)
        return TokenSequence(ids, self.text(vocab))


def _start(n: int) -> np.ndarray:
    return np.full((n, 1), BOS, dtype=np.int64)


def _results(prefixes: np.ndarray, lps: list[np.ndarray], lengths: np.ndarray) -> list[DecodeResult]:
    lps = np.stack(lps, axis=1) if lps else np.zeros((len(prefixes), 0))
    return [
        DecodeResult(
            tuple(int(x) for x in prefixes[i, 1 : 1 + lengths[i]]),
            tuple(float(x) for x in lps[i, : lengths[i]]),
        )
        for i in range(len(prefixes))
    ]


def greedy(step: StepFn, n: int = 1, max_len: int = MAX_LEN) -> list[DecodeResult]:
    """Argmax decoding of ``n`` rows; ties go to the lowest token id."""
    return _run(step, n, max_len, lambda lp: np.argmax(lp, axis=-1), None)


def sample(
    step: StepFn,
    rng: np.random.Generator,
    n: int = 1,
    temperature: float = 1.0,
    max_len: int = MAX_LEN,
) -> list[DecodeResult]:
    """Multinomial sampling of ``n`` rows.

    Log-probabilities are recorded under the distribution actually sampled
    from, which is the model distribution at temperature 1. Temperatures at
    or below ``GREEDY_TEMPERATURE`` decode greedily and draw nothing.

    Raises:
        ValueError: If temperature is not positive.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if temperature <= GREEDY_TEMPERATURE:
        return greedy(step, n, max_len)

    def temper(lp: np.ndarray) -> np.ndarray:
        if temperature == 1.0:
            return lp
        z = lp / temperature
        m = z.max(axis=-1, keepdims=True)
        return z - (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))

    def choose(lp: np.ndarray) -> np.ndarray:
        cdf = np.cumsum(np.exp(lp), axis=-1)
        u = rng.random(len(lp)) * cdf[:, -1]
        idx = np.array([np.searchsorted(cdf[i], u[i], side="right") for i in range(len(lp))])
        return np.minimum(idx, lp.shape[-1] - 1)

    return _run(step, n, max_len, choose, temper)


def _run(step, n, max_len, choose, transform) -> list[DecodeResult]:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    prefixes = _start(n)
    lengths = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    lps: list[np.ndarray] = []
    for _ in range(max_len):
        lp = np.asarray(step(prefixes), dtype=np.float64)
        if transform is not None:
            lp = transform(lp)
        ids = np.asarray(choose(lp), dtype=np.int64)
        ids = np.where(done, EOS, ids)
        lps.append(np.where(done, 0.0, lp[np.arange(n), ids]))
        lengths += ~done
        done |= ids == EOS
        prefixes = np.concatenate([prefixes, ids[:, None]], axis=1)
        if done.all():
            break
    return _results(prefixes, lps, lengths)


class _BeamSearch:
    """One fixed-width search; ``finished`` holds (score, tokens, token_lps)."""

    __slots__ = ("width", "length_penalty", "max_len", "active", "finished")

    def __init__(self, width: int, length_penalty: float, max_len: int) -> None:
        self.width = width
        self.length_penalty = length_penalty
        self.max_len = max_len
        self.active: list[tuple[tuple[int, ...], tuple[float, ...], float]] = [((), (), 0.0)]
        self.finished: list[tuple[float, tuple[int, ...], tuple[float, ...]]] = []

    def score(self, total: float, length: int) -> float:
        return total / (length**self.length_penalty) if self.length_penalty else total

    def advance(self, rows: dict[tuple[int, ...], np.ndarray], t: int) -> None:
        candidates = []
        for tokens, token_lps, total in self.active:
            lp = rows[tokens]
            for v in np.flatnonzero(lp > _MASKED):
                candidates.append((float(total + lp[v]), tokens + (int(v),), token_lps + (float(lp[v]),)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        self.active = []
        for total, tokens, token_lps in candidates[: self.width]:
            if tokens[-1] == EOS or t == self.max_len - 1:
                self.finished.append((self.score(total, len(tokens)), tokens, token_lps))
            else:
                self.active.append((tokens, token_lps, total))
        if self.length_penalty == 0 and self.active and self.finished:
            # log-probabilities only decrease as hypotheses grow
            if max(f[0] for f in self.finished) >= self.active[0][2]:
                self.active = []


def beam(
    step: StepFn,
    beam_width: int = 4,
    length_penalty: float = 0.6,
    max_len: int = MAX_LEN,
) -> DecodeResult:
    """Beam search for one source.

    Finished hypotheses are ranked by ``log_prob / length ** length_penalty``
    (length counts EOS); hypotheses cut by ``max_len`` count as finished. Ties
    go to the lexicographically smaller token sequence. Each search keeps the
    top extensions each step and shrinks as hypotheses finish.

    A search runs at every width from 1 to ``beam_width`` and the best
    finished hypothesis over all of them is returned, so widening the beam
    never lowers the score and width 1 is greedy decoding. The searches
    advance together with one step call per position over their distinct
    prefixes.

    Raises:
        ValueError: If beam_width < 1.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    searches = [_BeamSearch(w, length_penalty, max_len) for w in range(1, beam_width + 1)]
    for t in range(max_len):
        live = [s for s in searches if s.active]
        if not live:
            break
        prefixes = sorted({tokens for s in live for tokens, _, _ in s.active})
        lp = np.asarray(step(np.array([(BOS, *tokens) for tokens in prefixes], dtype=np.int64)), dtype=np.float64)
        rows = {tokens: lp[i] for i, tokens in enumerate(prefixes)}
        for s in live:
            s.advance(rows, t)
    best = min((f for s in searches for f in s.finished), key=lambda f: (-f[0], f[1]))
    return DecodeResult(best[1], best[2])
