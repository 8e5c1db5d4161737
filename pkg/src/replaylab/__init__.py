"""Replay-augmented policy optimization lab.

Success-filtered trajectory replay with truncated importance sampling on
top of a clipped-surrogate policy core, plus plain PPO and DDQN baselines,
three deterministic benchmark environments, and a seeded experiment
harness.
"""

from .envs import make_env
from .harness import ExperimentConfig, parse_config, run_experiment
from .nets import NetConfig, PolicyNet
from .ppo import PpoConfig, Trajectory, Transition
from .replay import CyclicBuffer
from .algorithms import TrainerConfig

__version__ = "0.1.0"

__all__ = [
    "CyclicBuffer",
    "ExperimentConfig",
    "NetConfig",
    "PolicyNet",
    "PpoConfig",
    "Trajectory",
    "TrainerConfig",
    "Transition",
    "make_env",
    "parse_config",
    "run_experiment",
    "__version__",
]
