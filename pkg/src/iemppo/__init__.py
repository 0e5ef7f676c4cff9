"""PPO with Gaussian exploration and intrinsic exploration bonuses (curiosity, step-count uncertainty)."""

from .envs import make_env
from .harness import RunConfig, run, sigma_sweep, sweep
from .ppo import PpoConfig, clip_objective, train_iteration

__all__ = ["PpoConfig", "RunConfig", "clip_objective", "make_env", "run", "sigma_sweep", "sweep",
           "train_iteration"]
__version__ = "0.1.0"
