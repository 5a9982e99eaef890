"""Fit a model to a panel: build, sample, diagnose."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .basis import SplineBasis
from .config import ModelConfig, SamplerConfig
from .diagnostics import Diagnostics, diagnose
from .panel import Panel
from .posterior import Model
from .sampler import Draws, sample


@dataclass
class FitResult:
    model: Model
    draws: Draws
    diagnostics: Diagnostics
    wall_time: float

    @property
    def warnings(self) -> list[str]:
        return list(dict.fromkeys(self.draws.warnings + self.diagnostics.warning_codes()))


def fit(
    panel: Panel,
    config: ModelConfig,
    sampler: SamplerConfig | None = None,
    threads: int = 1,
    basis: SplineBasis | None = None,
    diagnose_names=None,
) -> FitResult:
    """Sample the posterior of ``config`` given ``panel``.

    ``sampler`` overrides ``config.sampler``.  Diagnostics cover every
    output column unless ``diagnose_names`` restricts them.
    """
    t0 = time.perf_counter()
    model = Model(panel, config, basis)
    draws = sample(model, sampler or config.sampler, threads=threads)
    diag = diagnose(draws, diagnose_names)
    return FitResult(model, draws, diag, time.perf_counter() - t0)
