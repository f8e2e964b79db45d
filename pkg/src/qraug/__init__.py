"""Reward-guided synthetic data for query rewriting.

Train a rewrite-to-request translation model, fine-tune it with
self-critical policy gradients toward phonetic or semantic rewards, then
turn clean rewrites into (request, rewrite) pairs that feed a dense
retrieval rewriter.
"""

import importlib

from ._rewards import REWARDS, RewardName
from ._typing import RewardFn, StepFn
from .corpus import PairExample, TokenSequence, Vocabulary

__all__ = [
    "reward",
    "REWARDS",
    "RewardName",
    "RewardFn",
    "StepFn",
    "PairExample",
    "TokenSequence",
    "Vocabulary",
]


def reward(name: RewardName, **params) -> RewardFn:
    """Construct a reward by name; ``params`` go to its constructor.

    >>> r = reward("phonetic", lexicon=load_lexicon())  # doctest: +SKIP
    """
    key = name.lower().strip()
    if key in REWARDS:
        module = importlib.import_module(".rewards", __package__)
        return getattr(module, REWARDS[key])(**params)
    raise ValueError(f"Unknown reward {name!r}. Valid options: {', '.join(REWARDS)}")
