"""VIX-aware tail-safe hedging: surfaces, index replication, local vol, control and checks."""

from .config import WorldConfig, load_config
from .controller import ControllerParams, ControllerState, baseline_params, controller_step
from .market_shell import FlatVolSource, SsviSlice, VolSurface, attach_teacher, validate_no_arbitrage
from .qp_core import QpProblem, solve, verify_kkt
from .risk_metrics import LossSample, paired_bootstrap_delta_es, var_es
from .vix_engine import VixContext, coherence_residual
from .world import World, build_world

__version__ = "0.1.0"

__all__ = [
    "ControllerParams", "ControllerState", "FlatVolSource", "LossSample", "QpProblem", "SsviSlice",
    "VixContext", "VolSurface", "World", "WorldConfig", "attach_teacher", "baseline_params",
    "build_world", "coherence_residual", "controller_step", "load_config", "paired_bootstrap_delta_es",
    "solve", "validate_no_arbitrage", "var_es", "verify_kkt",
]
