"""Reinforcement-learning scheduler: state, agent and actor-critic training."""
from .agent import ArchConfig, VrlsScheduler, act, build_networks, policy
from .state import Bookkeeping, build_state, compute_reward, group_permutation, shuffle_state, unshuffle_probs
from .train import (Coordinator, Policy, PoolMismatchError, TrainConfig, TrainResult, Worker, load_policy,
                    retrain, save_policy, train, trajectory_gradients, training_seeds)

__all__ = [
    "ArchConfig", "Bookkeeping", "Coordinator", "Policy", "PoolMismatchError", "TrainConfig", "TrainResult",
    "VrlsScheduler", "Worker", "act", "build_networks", "build_state", "compute_reward", "group_permutation",
    "load_policy", "policy", "retrain", "save_policy", "shuffle_state", "train", "trajectory_gradients",
    "training_seeds", "unshuffle_probs",
]
