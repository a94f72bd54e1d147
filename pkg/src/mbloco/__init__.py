"""Learned dynamics models and model-predictive path following for a simulated legged millirobot."""

from .config import ConfigError, default_config, load_config
from .simworld import Abstraction, Action, WorldState, get_terrain, make_path, observe, step

__all__ = ["Abstraction", "Action", "ConfigError", "WorldState", "default_config", "get_terrain",
           "load_config", "make_path", "observe", "step"]
__version__ = "0.1.0"
