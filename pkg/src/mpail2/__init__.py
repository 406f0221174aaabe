"""Off-policy, planning-based inverse reinforcement learning from observation.

Learns a latent world model, an adversarial state-transition reward, a value
ensemble, and a multi-step policy from observation-only demonstrations plus
online interaction, and acts through an MPPI planner.
"""

from .config import TrainConfig
from .models import ModelBundle
from .planner import PlannerConfig, plan
from .trainer import evaluate, gen_demos, train, transfer

__version__ = "0.1.0"

__all__ = [
    "ModelBundle",
    "PlannerConfig",
    "TrainConfig",
    "evaluate",
    "gen_demos",
    "plan",
    "train",
    "transfer",
    "__version__",
]
