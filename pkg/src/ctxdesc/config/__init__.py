# Initialize config package
from .logging_config import setup_logging
from .settings import RunConfig, SceneSpec, TrainConfig, load_run_config

__all__ = ['setup_logging', 'RunConfig', 'SceneSpec', 'TrainConfig', 'load_run_config']
