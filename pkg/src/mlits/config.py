"""Declarative model and sampler configuration (JSON documents)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping

from .panel import OVERALL, GroupingSpec, Panel


class ConfigError(ValueError):
    """Raised for unknown keys or constraint violations in a config."""


LIKELIHOODS = {"poisson": "log", "binomial": "logit"}
LATENT_KINDS = ("random_walk", "var1")
LATENT_PRIORS = ("half_normal", "horseshoe")
ALPHA0_SCALES = ("covariance", "literal")
PARAMETERIZATIONS = ("centered", "noncentered")


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    seed: int = 0
    target_accept: float = 0.8
    max_depth: int = 10

    def __post_init__(self):
        if self.chains < 1:
            raise ConfigError("chains must be >= 1")
        if self.warmup < 150:
            raise ConfigError("warmup must be >= 150")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build a model for a panel.

    Prior scales keyed by factor name accept ``"overall"`` for the
    implicit overall level; factors absent from a mapping use the
    matching ``*_default``.
    """

    likelihood: str
    T_int: int
    link: str | None = None
    latent: str = "random_walk"
    overdispersion: bool = False
    overdispersion_scale: float = 1.0
    knots: int | None = None
    intercept: bool = True
    intercept_scale: float = 10.0
    center_intercept: bool = True
    beta_scale_default: float = 2.5
    beta_scale: Mapping[str, float] = field(default_factory=dict)
    w_default: float = 1.0
    w: Mapping[str, float] = field(default_factory=dict)
    w0_default: float = 1.0
    w0: Mapping[str, float] = field(default_factory=dict)
    latent_prior: str = "half_normal"
    latent_slab: float = 1.0
    c: float = 1.0
    lambda_loc: float = 5.0
    lambda_scale: float = 30.0
    alpha0_scale: str = "covariance"
    xi_fixed: float | None = None
    alpha_parameterization: str = "noncentered"
    factors: Mapping[str, list[str]] | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"likelihood must be one of {sorted(LIKELIHOODS)}")
        link = self.link or LIKELIHOODS[self.likelihood]
        if link != LIKELIHOODS[self.likelihood]:
            raise ConfigError(f"likelihood {self.likelihood!r} requires link {LIKELIHOODS[self.likelihood]!r}, got {link!r}")
        object.__setattr__(self, "link", link)
        if not isinstance(self.T_int, int) or isinstance(self.T_int, bool) or self.T_int < 1:
            raise ConfigError("T_int must be an integer >= 1")
        if self.latent not in LATENT_KINDS:
            raise ConfigError(f"latent must be one of {LATENT_KINDS}")
        if self.latent_prior not in LATENT_PRIORS:
            raise ConfigError(f"latent_prior must be one of {LATENT_PRIORS}")
        if self.alpha0_scale not in ALPHA0_SCALES:
            raise ConfigError(f"alpha0_scale must be one of {ALPHA0_SCALES}")
        if self.alpha_parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"alpha_parameterization must be one of {PARAMETERIZATIONS}")
        if self.c <= 0:
            raise ConfigError("c must be positive")
        if self.knots is not None and self.knots < 0:
            raise ConfigError("knots must be nonnegative")
        if self.xi_fixed is not None and self.xi_fixed <= 0:
            raise ConfigError("xi_fixed must be positive")
        positive = {
            "overdispersion_scale": self.overdispersion_scale,
            "intercept_scale": self.intercept_scale,
            "beta_scale_default": self.beta_scale_default,
            "w_default": self.w_default,
            "w0_default": self.w0_default,
            "latent_slab": self.latent_slab,
            "lambda_scale": self.lambda_scale,
            **{f"beta_scale[{k}]": v for k, v in self.beta_scale.items()},
            **{f"w[{k}]": v for k, v in self.w.items()},
            **{f"w0[{k}]": v for k, v in self.w0.items()},
        }
        for key, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{key} must be positive")

    @property
    def grouping(self) -> GroupingSpec | None:
        return None if self.factors is None else GroupingSpec.from_dict(self.factors)

    def factor_scale(self, kind: str, factor: str) -> float:
        table = {"w": (self.w, self.w_default), "w0": (self.w0, self.w0_default)}[kind]
        return float(table[0].get(factor, table[1]))

    def beta_scale_for(self, name: str) -> float:
        if name == "intercept" and name not in self.beta_scale:
            return float(self.intercept_scale)
        return float(self.beta_scale.get(name, self.beta_scale_default))

    def validate_for(self, panel: Panel) -> None:
        """Check constraints that need the data (post period length, names)."""
        T = panel.n_times
        if self.T_int > T - 2:
            raise ConfigError(
                f"post-period too short: T_int={self.T_int} needs T_int <= T-2 (T={T}, at least two post points)"
            )
        kind = "trials" if self.likelihood == "binomial" else "exposure"
        if panel.size_kind != kind:
            raise ConfigError(f"{self.likelihood} likelihood needs a {kind!r} column, panel has {panel.size_kind!r}")
        known = {OVERALL, *panel.grouping.names}
        for mapping, label in ((self.w, "w"), (self.w0, "w0")):
            extra = set(mapping) - known
            if extra:
                raise ConfigError(f"{label} names unknown factors {sorted(extra)}")
        covs = set(panel.covariate_names) | ({"intercept"} if self.intercept else set())
        extra = set(self.beta_scale) - covs
        if extra:
            raise ConfigError(f"beta_scale names unknown covariates {sorted(extra)}")

    def with_updates(self, **changes: Any) -> "ModelConfig":
        sampler_keys = {f.name for f in dataclasses.fields(SamplerConfig)}
        s_changes = {k: changes.pop(k) for k in list(changes) if k in sampler_keys}
        cfg = dataclasses.replace(self, **changes)
        if s_changes:
            cfg = dataclasses.replace(cfg, sampler=dataclasses.replace(cfg.sampler, **s_changes))
        return cfg

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "sampler":
                out.update(dataclasses.asdict(value))
            elif isinstance(value, Mapping):
                out[f.name] = dict(value)
            else:
                out[f.name] = value
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_SAMPLER_KEYS = {f.name for f in dataclasses.fields(SamplerConfig)}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"sampler"}


def config_from_dict(doc: Mapping[str, Any]) -> ModelConfig:
    """Build a fully defaulted config; unknown keys are an error."""
    doc = dict(doc)
    unknown = set(doc) - _MODEL_KEYS - _SAMPLER_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for required in ("likelihood", "T_int"):
        if required not in doc:
            raise ConfigError(f"missing required key {required!r}")
    sampler = SamplerConfig(**{k: doc.pop(k) for k in list(doc) if k in _SAMPLER_KEYS})
    try:
        return ModelConfig(sampler=sampler, **doc)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def load_config(path: str | os.PathLike) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return config_from_dict(doc)
