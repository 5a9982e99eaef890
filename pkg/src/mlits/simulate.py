"""Forward simulation from the model and simulation-based calibration.

:func:`simulate_panel` draws latent states and observation effects
forward from a given truth (or from the prior) and samples counts from
the configured family.  :func:`sbc` repeats prior draw, simulation and
reduced fit, and records the rank of every tracked true scalar among
``L = 99`` thinned posterior draws.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import multiprocessing as mp
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chisquare, truncnorm

from .basis import SplineBasis
from .config import ModelConfig, SamplerConfig
from .diagnostics import split_rhat
from .panel import GroupingSpec, Panel
from .posterior import Model
from .sampler import sample

log = logging.getLogger(__name__)

DEFAULT_EXPOSURE = 1000.0
DEFAULT_TRIALS = 500
RATE_CAP = 1e9
# 99th percentile of the standard half-Cauchy: tan(0.99 * pi / 2)
PSI0_CAP_99 = math.tan(0.99 * math.pi / 2)


class SimulationError(RuntimeError):
    pass


@dataclass
class TruthRecord:
    """Constrained parameters behind a synthetic panel, plus true effects.

    ``effect`` is the unit-level effect matrix ``(T, U)``;
    ``series_effect`` sums it over each series' units; ``overall_curve``
    is the overall unit's effect.
    """

    params: dict[str, np.ndarray]
    gamma: np.ndarray
    effect: np.ndarray
    series_effect: np.ndarray
    T_int: int
    resamples: int = 0
    scalars: dict[str, float] = field(default_factory=dict)

    @property
    def overall_curve(self) -> np.ndarray:
        return self.effect[:, 0]

    def window_average(self, t_a: int | None = None, t_b: int | None = None, column: int = 0) -> float:
        """Mean link-scale effect of a unit over ``[t_a, t_b]`` (default: post period)."""
        t_a = self.T_int if t_a is None else t_a
        t_b = self.effect.shape[0] - 1 if t_b is None else t_b
        return float(np.mean(self.effect[t_a : t_b + 1, column]))

    def to_dict(self) -> dict:
        return {
            "params": {k: np.asarray(v).tolist() for k, v in self.params.items()},
            "gamma": self.gamma.tolist(),
            "effect": self.effect.tolist(),
            "series_effect": self.series_effect.tolist(),
            "T_int": self.T_int,
            "resamples": self.resamples,
            "scalars": self.scalars,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TruthRecord":
        return cls(
            params={k: np.asarray(v, dtype=float) for k, v in doc["params"].items()},
            gamma=np.asarray(doc["gamma"], dtype=float),
            effect=np.asarray(doc["effect"], dtype=float),
            series_effect=np.asarray(doc["series_effect"], dtype=float),
            T_int=int(doc["T_int"]),
            resamples=int(doc.get("resamples", 0)),
            scalars={k: float(v) for k, v in doc.get("scalars", {}).items()},
        )

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def panel_skeleton(
    grouping: GroupingSpec,
    n_times: int,
    family: str = "poisson",
    size=None,
    covariates: dict | None = None,
) -> Panel:
    """Fully crossed panel (one series per level combination) with ``y = 0``.

    ``size`` is a scalar or an ``(n_series, n_times)`` array of exposures
    or trials; ``covariates`` maps names to length-``n_times`` columns.
    """
    combos = list(itertools.product(*[range(len(levels)) for _, levels in grouping.factors]))
    n_series = len(combos)
    ids = [
        "_".join(grouping.factors[j][1][k] for j, k in enumerate(c)) if c else "all" for c in combos
    ]
    obs_series = np.repeat(np.arange(n_series), n_times)
    obs_time = np.tile(np.arange(n_times), n_series)
    trials = family == "binomial"
    if size is None:
        size = DEFAULT_TRIALS if trials else DEFAULT_EXPOSURE
    size = np.broadcast_to(np.asarray(size), (n_series, n_times)).ravel()
    panel = Panel(
        grouping=grouping,
        series_ids=ids,
        series_levels=np.array(combos, dtype=int).reshape(n_series, grouping.n_factors),
        obs_series=obs_series,
        obs_time=obs_time,
        y=np.zeros(obs_series.size, dtype=np.int64),
        size=size,
        size_kind="trials" if trials else "exposure",
        n_times=n_times,
    )
    if covariates:
        panel = panel.with_covariates(covariates)
    return panel


def alpha_from_curve(basis: SplineBasis, curve) -> np.ndarray:
    """Least-squares loadings ``(H + 1,)`` reproducing ``curve`` over the post period.

    Since the spline columns are centred, column 0 equals the mean of
    ``curve`` exactly.
    """
    curve = np.asarray(curve, dtype=float)
    if curve.shape != (basis.n_post,):
        raise ValueError(f"curve must have length {basis.n_post}")
    E = np.hstack([np.ones((basis.n_post, 1)), basis.B])
    coef, *_ = np.linalg.lstsq(E, curve, rcond=None)
    coef[0] = curve.mean()
    return coef


def _half_normal(rng, scale, size=None):
    return np.abs(rng.normal(0.0, scale, size))


def _half_cauchy(rng, scale, size=None, cap=None):
    if cap is None:
        return np.abs(scale * rng.standard_cauchy(size))
    # inverse CDF restricted to [0, cap]
    u = rng.uniform(size=size) * (2.0 / math.pi) * math.atan(cap / scale)
    return scale * np.tan(0.5 * math.pi * u)


def draw_prior(model: Model, rng: np.random.Generator, psi0_cap: float | None = None) -> dict[str, np.ndarray]:
    """Constrained parameters drawn from the model's prior."""
    cfg = model.config
    U, J1 = model.U, len(model.factor_names)
    lp = model.latent_prior
    out: dict[str, np.ndarray] = {}
    out["beta"] = model.beta_scales * rng.standard_t(3, size=model.beta_scales.size)
    out["z"] = rng.standard_normal((model.T, U))
    if model.horseshoe:
        out["tau_latent"] = _half_cauchy(rng, lp.factor_w, J1)
        out["ell"] = _half_cauchy(rng, 1.0, U)
        q = 1.0 / (out["tau_latent"][model.unit_factor] * out["ell"]) ** 2 + 1.0 / cfg.latent_slab**2
        out["sigma"] = _half_normal(rng, 1.0 / np.sqrt(q))
    else:
        out["sigma"] = _half_normal(rng, lp.w)
    out["sigma0"] = _half_normal(rng, lp.w0)
    if model.var1:
        out["a"] = np.tanh(rng.standard_normal(U))
    psi0 = float(_half_cauchy(rng, 1.0, None, psi0_cap))
    out["psi0"] = np.array(psi0)
    if model.xi_free:
        out["xi"] = rng.gamma(1.0, 1.0, J1 - 1)
    prior = model.intervention_prior
    if model.n_blocks:
        a = (0.0 - prior.lambda_loc) / prior.lambda_scale
        out["lambda"] = truncnorm.rvs(a, np.inf, loc=prior.lambda_loc, scale=prior.lambda_scale,
                                      size=(J1, model.n_blocks), random_state=rng)
    lam = out.get("lambda", np.zeros((J1, 0)))
    raw = rng.standard_normal((U, model.H1))
    out["alpha"] = prior.alpha_from_raw(raw, psi0, model.xi_full(out.get("xi")), lam)
    if model.overdispersion:
        out["sigma_eps"] = np.array(float(_half_normal(rng, cfg.overdispersion_scale)))
        out["eps"] = rng.normal(0.0, float(out["sigma_eps"]), model.panel.n_obs)
    return out


def _complete_truth(model: Model, truth: dict, rng) -> dict[str, np.ndarray]:
    """Fill innovations / observation effects not given, check required keys."""
    out = {k: np.asarray(v, dtype=float) for k, v in truth.items()}
    U, J1 = model.U, len(model.factor_names)
    defaults = {
        "beta": np.zeros(len(model.beta_names)),
        "sigma": np.full(U, 0.1),
        "sigma0": np.full(U, 0.1),
        "psi0": np.array(1.0),
    }
    for k, v in defaults.items():
        out.setdefault(k, v)
    # alpha may omit trailing spline columns (zero) or be given as level shifts (U,)
    alpha = out.get("alpha", np.zeros((U, 1)))
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    if alpha.ndim != 2 or alpha.shape[0] != U or alpha.shape[1] > model.H1:
        raise SimulationError(f"alpha must have shape ({U}, k) with k <= {model.H1}")
    out["alpha"] = np.zeros((U, model.H1))
    out["alpha"][:, : alpha.shape[1]] = alpha
    if "z" not in out:
        out["z"] = rng.standard_normal((model.T, U))
    if model.var1:
        out.setdefault("a", np.full(U, 0.5))
    if model.xi_free:
        out.setdefault("xi", np.ones(J1 - 1))
    if model.n_blocks:
        out.setdefault("lambda", np.full((J1, model.n_blocks), model.intervention_prior.lambda_loc))
    if model.horseshoe:
        out.setdefault("tau_latent", np.ones(J1))
        out.setdefault("ell", np.ones(U))
    if model.overdispersion:
        out.setdefault("sigma_eps", np.array(0.1))
        if "eps" not in out:
            out["eps"] = rng.normal(0.0, float(out["sigma_eps"]), model.panel.n_obs)
    for k in ("sigma", "sigma0"):
        out[k] = np.broadcast_to(out[k], (U,)).astype(float).copy()
    return out


def _sample_y(model: Model, eta: np.ndarray, rng) -> np.ndarray:
    if model.obs.family == "poisson":
        return rng.poisson(np.exp(eta))
    return rng.binomial(model.panel.size, 1.0 / (1.0 + np.exp(-eta)))


def _rate_ok(model: Model, eta: np.ndarray) -> bool:
    if not np.all(np.isfinite(eta)):
        return False
    if model.obs.family == "poisson":
        return bool(np.all(eta - model.obs.offset < math.log(RATE_CAP)))
    return True


def simulate_panel(
    config: ModelConfig,
    truth="prior",
    seed: int = 0,
    grouping: GroupingSpec | None = None,
    n_times: int | None = None,
    size=None,
    covariates: dict | None = None,
    psi0_cap: float | None = None,
    max_resample: int = 1000,
    skeleton: Panel | None = None,
) -> tuple[Panel, TruthRecord]:
    """Generate a synthetic panel and the truth behind it.

    ``truth`` is ``"prior"`` (draw every parameter from its prior) or a
    dict of constrained parameters; innovations ``z`` and observation
    effects ``eps`` not supplied are drawn forward, and a ``"gamma"``
    entry overrides the latent states outright.  Prior draws whose mean
    rate exceeds ``1e9 * exposure`` are redrawn; the number of redraws
    is kept in ``TruthRecord.resamples``.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7])))
    if skeleton is None:
        grouping = grouping or config.grouping
        if grouping is None:
            raise SimulationError("a grouping is required (config.factors or grouping=)")
        if n_times is None:
            raise SimulationError("n_times is required")
        skeleton = panel_skeleton(grouping, n_times, config.likelihood, size, covariates)
    model = Model(skeleton, config)
    resamples = 0
    while True:
        if isinstance(truth, str):
            if truth != "prior":
                raise SimulationError(f"unknown truth mode {truth!r}")
            params = draw_prior(model, rng, psi0_cap)
        else:
            params = _complete_truth(model, dict(truth), rng)
        if "gamma" in params:
            gamma = np.asarray(params.pop("gamma"), dtype=float).reshape(model.T, model.U)
        else:
            gamma = model.gamma(params)
        L = gamma.copy()
        G = model.basis.effect_matrix() @ params["alpha"].T
        L += G
        eta = model.X @ params["beta"] + L.ravel()[model._idx].reshape(-1, model._n_per_obs).sum(axis=1)
        eta = eta + model.obs.offset
        if model.overdispersion:
            eta = eta + params["eps"]
        if _rate_ok(model, eta):
            break
        if not isinstance(truth, str):
            raise SimulationError("truth implies a non-finite or >1e9 rate")
        resamples += 1
        if resamples > max_resample:
            raise SimulationError(f"no admissible prior draw after {max_resample} resamples")
    if resamples:
        log.info("prior draw resampled %d times (rate cap %.0e)", resamples, RATE_CAP)
    y = _sample_y(model, eta, rng)
    panel = dataclasses.replace(skeleton, y=y)
    series_effect = np.stack([G[:, model.series_units[i]].sum(axis=1) for i in range(panel.n_series)], axis=1)
    record = TruthRecord(params=params, gamma=gamma, effect=G, series_effect=series_effect,
                         T_int=config.T_int, resamples=resamples)
    try:
        vec = model.output_vector(model.unconstrain(params))
        record.scalars = dict(zip(model.output_names(), map(float, vec)))
    except ValueError:
        # boundary values (e.g. sigma = 0) have no unconstrained image
        record.scalars = {}
    return panel, record


# -- simulation-based calibration --------------------------------------


@dataclass
class SBCResult:
    names: list[str]
    ranks: np.ndarray  # (n_kept, n_tracked), values in 0..L
    n_ranks: int
    n_bins: int
    pvalues: dict[str, float]
    n_sims: int
    excluded: list[int]
    max_rhat: np.ndarray  # per simulation

    @property
    def exclusion_fraction(self) -> float:
        return len(self.excluded) / self.n_sims

    @property
    def failed_run(self) -> bool:
        return self.exclusion_fraction > 0.2

    def histogram(self, name: str) -> np.ndarray:
        k = self.names.index(name)
        return _bin_counts(self.ranks[:, k], self.n_ranks, self.n_bins)

    def passed(self, alpha: float = 0.001) -> bool:
        return not self.failed_run and all(p > alpha for p in self.pvalues.values())

    def summary(self) -> dict:
        return {
            "n_sims": self.n_sims,
            "n_kept": int(self.ranks.shape[0]),
            "excluded": list(self.excluded),
            "exclusion_fraction": self.exclusion_fraction,
            "failed_run": self.failed_run,
            "n_ranks": self.n_ranks,
            "n_bins": self.n_bins,
            "pvalues": self.pvalues,
            "histograms": {n: self.histogram(n).tolist() for n in self.names},
        }

    def write_ranks_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("sim,name,rank\n")
            kept = [s for s in range(self.n_sims) if s not in set(self.excluded)]
            for row, sim in zip(self.ranks, kept):
                for n, r in zip(self.names, row):
                    fh.write(f'{sim},"{n}",{int(r)}\n')


def _bin_counts(ranks, n_ranks: int, n_bins: int) -> np.ndarray:
    # ranks take n_ranks + 1 values; equal-width bins over them
    edges = np.linspace(0, n_ranks + 1, n_bins + 1)
    counts, _ = np.histogram(np.asarray(ranks, dtype=float) + 0.5, bins=edges)
    return counts


def uniformity_pvalue(ranks, n_ranks: int = 99, n_bins: int = 10) -> float:
    """Chi-square test of rank uniformity over ``n_bins`` equal bins."""
    if (n_ranks + 1) % n_bins:
        raise ValueError("n_bins must divide n_ranks + 1")
    counts = _bin_counts(ranks, n_ranks, n_bins)
    return float(chisquare(counts).pvalue)


def thinned_ranks(truth: dict[str, float], draws, names, n_ranks: int = 99) -> np.ndarray:
    """Rank of each true scalar among ``n_ranks`` evenly thinned draws."""
    out = np.empty(len(names), dtype=int)
    for k, n in enumerate(names):
        x = draws.column(n).ravel()
        if x.size < n_ranks:
            raise ValueError(f"need at least {n_ranks} draws to thin")
        idx = (np.arange(n_ranks) * x.size) // n_ranks
        out[k] = int(np.sum(x[idx] < truth[n]))
    return out


def default_tracked(model: Model) -> list[str]:
    """Scalars followed by SBC: intercept, every latent innovation scale,
    every level shift and the global shrinkage scale."""
    names = []
    if "intercept" in model.beta_names:
        names.append("beta[intercept]")
    unit_lab = [f"{f},{lev}" for f, lev in model.units]
    names += [f"sigma[{u}]" for u in unit_lab]
    names += [f"alpha[{u},0]" for u in unit_lab]
    names.append("psi0")
    return names


_SBC_ARGS = None


def _sbc_one(i: int):
    gen_cfg, fit_cfg, sampler, seed, sim_kw, tracked, n_ranks = _SBC_ARGS
    panel, truth = simulate_panel(gen_cfg, "prior", seed=seed * 100003 + i, psi0_cap=PSI0_CAP_99, **sim_kw)
    model = Model(panel, fit_cfg)
    s_cfg = dataclasses.replace(sampler, seed=seed * 100003 + i)
    draws = sample(model, s_cfg)
    rh = max(split_rhat(draws.column(n)) for n in tracked)
    return thinned_ranks(truth.scalars, draws, tracked, n_ranks), rh


def sbc(
    config: ModelConfig,
    n_sims: int,
    seed: int = 0,
    grouping: GroupingSpec | None = None,
    n_times: int | None = None,
    size=None,
    fit_config: ModelConfig | None = None,
    sampler: SamplerConfig | None = None,
    tracked: list[str] | None = None,
    n_ranks: int = 99,
    n_bins: int = 10,
    rhat_max: float = 1.05,
    threads: int = 1,
) -> SBCResult:
    """Simulation-based calibration of ``fit_config`` against prior draws of ``config``.

    Each simulation draws a truth from the prior of ``config`` (``psi0``
    truncated at its 99th percentile), simulates a panel, fits it with
    ``fit_config`` (default: the same config) and records ranks.  Runs
    whose worst tracked split R-hat exceeds ``rhat_max`` are excluded.
    """
    if n_sims < 50:
        raise ValueError("sbc needs n_sims >= 50")
    fit_config = fit_config or config
    sampler = sampler or SamplerConfig(chains=4, warmup=250, samples=250, seed=seed)
    sim_kw = {"grouping": grouping, "n_times": n_times, "size": size}
    probe_panel, _ = simulate_panel(config, "prior", seed=seed, psi0_cap=PSI0_CAP_99, **sim_kw)
    probe = Model(probe_panel, fit_config)
    tracked = list(tracked or default_tracked(probe))
    missing = set(tracked) - set(probe.output_names())
    if missing:
        raise ValueError(f"unknown tracked parameters {sorted(missing)}")

    global _SBC_ARGS
    _SBC_ARGS = (config, fit_config, sampler, seed, sim_kw, tracked, n_ranks)
    try:
        if threads > 1:
            with mp.get_context("fork").Pool(threads) as pool:
                results = pool.map(_sbc_one, range(n_sims), chunksize=1)
        else:
            results = [_sbc_one(i) for i in range(n_sims)]
    finally:
        _SBC_ARGS = None
    rhats = np.array([r for _, r in results])
    excluded = [i for i, r in enumerate(rhats) if not r <= rhat_max]
    kept = np.array([rk for i, (rk, _) in enumerate(results) if i not in set(excluded)]).reshape(-1, len(tracked))
    pvals = {n: uniformity_pvalue(kept[:, k], n_ranks, n_bins) if kept.shape[0] else float("nan")
             for k, n in enumerate(tracked)}
    return SBCResult(tracked, kept, n_ranks, n_bins, pvals, n_sims, excluded, rhats)
