"""
Configuration package initialization
"""
from .config import Config, RunConfig, Scenario, get_config, load_run_config, load_scenario

__all__ = ['Config', 'RunConfig', 'Scenario', 'get_config', 'load_run_config', 'load_scenario']
