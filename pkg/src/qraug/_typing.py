from typing import TYPE_CHECKING, Protocol, Union

if TYPE_CHECKING:
    import numpy as np

    from .corpus import TokenSequence

__all__ = ["Utterance", "RewardFn", "StepFn"]

#: Accepted wherever an utterance is scored: raw text or a tokenized sequence
Utterance = Union[str, "TokenSequence"]


class RewardFn(Protocol):
    name: str

    def __call__(self, candidate: Utterance, source: Utterance) -> float: ...


class StepFn(Protocol):
    """Next-token log-probabilities for a batch of decoder prefixes.

    ``prefixes`` has shape (n, t) and starts with BOS; the result has shape
    (n, vocabulary size).
    """

    def __call__(self, prefixes: "np.ndarray") -> "np.ndarray": ...
