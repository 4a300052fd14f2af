"""Authenticated, consensus-backed trust scoring for cooperative perception.

Modules:
    estimation  covariance algebra, CV prediction, JPDA, weighted UKF update
    auth        three-party provisioning, round signatures and tokens
    consensus   one-step Byzantine agreement over signed sensing reports
    trust       existence voting, standard-deviation scores, trust ledger
    world       synthetic intersection, sensor models, fault injection
    harness     scenario runner, metrics, sweeps and result files
"""

from .config import ScenarioConfig, load_config
from .harness import RunResult, compute_mttd, compute_rmse, run_scenario, simulate, sweep

__all__ = [
    "ScenarioConfig",
    "load_config",
    "RunResult",
    "compute_mttd",
    "compute_rmse",
    "run_scenario",
    "simulate",
    "sweep",
]

__version__ = "0.1.0"
