"""Latent predictive model, learned distance-to-goal estimator and distance-shaped DQN."""

from .agent import Agent, AgentConfig, dqn_update, epsilon_greedy, shaped_target, sync_target, train_agent
from .costmodel import CostModel, agreement_rate, label_distances, make_pairs
from .envs import CartPole, GoldCollect, Maze, make_env
from .mdp import Episode, ReplayBuffer, Transition, load_buffer, save_buffer
from .nn import MLP, Adam, grad_check, gaussian_kl, load_checkpoint, save_checkpoint
from .vae import VaeModel, drift_metric, vae_train_step

__all__ = [
    "Adam", "Agent", "AgentConfig", "CartPole", "CostModel", "Episode", "GoldCollect", "MLP", "Maze",
    "ReplayBuffer", "Transition", "VaeModel", "agreement_rate", "dqn_update", "drift_metric", "epsilon_greedy",
    "gaussian_kl", "grad_check", "label_distances", "load_buffer", "load_checkpoint", "make_env", "make_pairs",
    "save_buffer", "save_checkpoint", "shaped_target", "sync_target", "train_agent", "vae_train_step",
]
