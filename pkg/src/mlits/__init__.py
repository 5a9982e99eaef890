"""Bayesian multilevel interrupted time series models.

Typical use::

    from mlits import GroupingSpec, load_panel, load_config, fit, effect_curve

    config = load_config("config.json")
    panel = load_panel("panel.csv", config.grouping)
    result = fit(panel, config)
    curve = effect_curve(result.draws, result.model, "overall", "ratio")
"""

__version__ = "0.1.0"

from .basis import SplineBasis, basis_for_panel, build_basis
from .config import ConfigError, ModelConfig, SamplerConfig, config_from_dict, load_config
from .diagnostics import Diagnostics, diagnose
from .effects import EffectRow, EffectSummary, effect_curve, poststratify, window_average
from .fit import FitResult, fit
from .panel import GroupingSpec, Panel, PanelError, PoststratTable, load_panel, load_poststrat, write_panel
from .posterior import Model
from .sampler import Draws, nuts_chain, sample
from .simulate import TruthRecord, sbc, simulate_panel

__all__ = [
    "ConfigError", "Diagnostics", "Draws", "EffectRow", "EffectSummary", "FitResult", "GroupingSpec",
    "Model", "ModelConfig", "Panel", "PanelError", "PoststratTable", "SamplerConfig", "SplineBasis",
    "TruthRecord", "basis_for_panel", "build_basis", "config_from_dict", "diagnose", "effect_curve",
    "fit", "load_config", "load_panel", "load_poststrat", "nuts_chain", "poststratify", "sample",
    "sbc", "simulate_panel", "window_average", "write_panel",
]
