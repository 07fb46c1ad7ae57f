"""Actor-critic local planner: network, PPO training, checkpoints."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .env import GoalEnvConfig, GoalReachingEnv, reward
from .network import (ActorCriticNet, NetConfig, Observation, ScanStack, forward, make_observation,
                      sample_action, value_of_goal, values_of_goals)
from .ppo import (ConfigError, NonFiniteLossError, Stage, TrainConfig, compute_gae, evaluate,
                  load_train_config, ppo_loss, train, train_config_from_dict)

__all__ = [
    "ActorCriticNet", "CheckpointError", "ConfigError", "GoalEnvConfig", "GoalReachingEnv", "NetConfig",
    "NonFiniteLossError", "Observation", "ScanStack", "Stage", "TrainConfig", "compute_gae", "evaluate",
    "forward", "load_checkpoint", "load_train_config", "make_observation", "ppo_loss", "reward",
    "sample_action", "save_checkpoint", "train", "train_config_from_dict", "value_of_goal", "values_of_goals",
]
