from typing import Literal

__all__ = ["REWARDS", "RewardName"]

RewardName = Literal["phonetic", "semantic", "combined", "Phonetic", "Semantic", "Combined"]

#: Reward name to the class implementing it in qraug.rewards
REWARDS = {
    "phonetic": "PhoneticReward",
    "semantic": "SemanticReward",
    "combined": "CombinedReward",
}
