"""Language-model shopping agent trained with behavioral cloning and PPO."""
from __future__ import annotations

from .actions import Decoding, ScoredActionSet, action_distribution
from .bc import BCConfig, Demonstration, oracle_demonstrate, train_bc
from .environment import ShopEnv, compute_reward, generate_catalog
from .evaluation import EvalReport, evaluate
from .model import PolicyModel
from .ppo import PPOConfig, compute_gae, ppo_update
from .pipeline import RunConfig, run_pipeline

__all__ = [
    "BCConfig", "Decoding", "Demonstration", "EvalReport", "PPOConfig", "PolicyModel",
    "RunConfig", "ScoredActionSet", "ShopEnv", "action_distribution", "compute_gae",
    "compute_reward", "evaluate", "generate_catalog", "oracle_demonstrate", "ppo_update",
    "run_pipeline", "train_bc",
]
__version__ = "0.1.0"
