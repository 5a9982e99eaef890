"""Effect summaries from posterior draws.

Every summary is computed per draw and then reduced to a posterior mean
and a central 95% interval.  Quantiles use numpy's default ``linear``
method (Hyndman and Fan type 7), so two implementations agree exactly on
the same sorted draws.  Ratio-scale quantiles are ``exp`` of the
link-scale quantiles, which is the same thing for a monotone transform
up to rounding.

Targets are ``"overall"`` or a declared level written ``"factor=level"``
(``"factor,level"`` as used in parameter names is accepted too).  The
link-scale effect of a level target is the overall term plus that
level's own term.

The counterfactual of a draw keeps every component of the draw and sets
the intervention term to zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .panel import OVERALL, PoststratTable
from .posterior import Model
from .sampler import Draws

SCALES = ("link", "ratio", "difference")
PROBS = (0.025, 0.975)


class EffectError(ValueError):
    """Raised for unknown targets, scales or windows."""


@dataclass(frozen=True)
class EffectRow:
    target: str
    time: str  # "t" or "a:b"
    scale: str
    mean: float
    lower: float
    upper: float


@dataclass
class EffectSummary:
    rows: list[EffectRow] = field(default_factory=list)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def extend(self, other: "EffectSummary") -> None:
        self.rows.extend(other.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def get(self, target: str, time) -> EffectRow:
        time = str(time)
        for r in self.rows:
            if r.target == target and r.time == time:
                return r
        raise KeyError((target, time))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target", "time", "scale", "mean", "q2.5", "q97.5"])
            for r in self.rows:
                w.writerow([r.target, r.time, r.scale, *(format(v, ".17g") for v in (r.mean, r.lower, r.upper))])


def _check_scale(scale: str) -> None:
    if scale not in SCALES:
        raise EffectError(f"scale must be one of {SCALES}, got {scale!r}")


def summarize_draws(x, scale: str) -> tuple[float, float, float]:
    """Mean and 95% interval of per-draw values given on the link scale
    (``link``/``ratio``) or already on the difference scale."""
    x = np.asarray(x, dtype=float)
    if np.all(np.isnan(x)):
        return float("nan"), float("nan"), float("nan")
    lo, hi = np.quantile(x, PROBS)
    if scale == "ratio":
        return float(np.mean(np.exp(x))), float(np.exp(lo)), float(np.exp(hi))
    return float(np.mean(x)), float(lo), float(hi)


# -- draw extraction -------------------------------------------------------


class DrawSet:
    """Per-draw parameter arrays of a fitted model, chains stacked."""

    def __init__(self, model: Model, draws: Draws):
        names = model.output_names()
        if list(draws.names) != names:
            raise EffectError("draws do not match the model's parameter layout")
        self.model = model
        flat = draws.flat()
        self.n = flat.shape[0]
        self._blocks = {k: flat[:, sl].reshape((self.n, *shape)) for k, (sl, shape) in model.output_blocks().items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name]

    def get(self, name: str, default=None):
        return self._blocks.get(name, default)

    @property
    def alpha(self) -> np.ndarray:
        return self._blocks["alpha"]  # (n, U, H1)

    @property
    def gamma(self) -> np.ndarray:
        return self._blocks["gamma"]  # (n, T, U)


def resolve_target(model: Model, target: str) -> tuple[str, list[int]]:
    """Canonical label and unit indices (overall first) of a target."""
    if target == OVERALL:
        return OVERALL, [0]
    sep = "=" if "=" in target else ","
    factor, _, level = target.partition(sep)
    for u, (f, lev) in enumerate(model.units):
        if u and f == factor and lev == level:
            return f"{factor}={level}", [0, u]
    raise EffectError(f"unknown target {target!r}; use 'overall' or one of " + ", ".join(
        f"{f}={lev}" for f, lev in model.units[1:]
    ))


def link_effects(alpha: np.ndarray, model: Model, units) -> np.ndarray:
    """``(n, T)`` link-scale effect of the summed ``units`` per draw (zero before onset)."""
    E = model.basis.effect_matrix()  # (T, H1)
    return np.einsum("th,nh->nt", E, alpha[:, units, :].sum(axis=1))


def _inverse_link(model: Model, eta: np.ndarray) -> np.ndarray:
    return np.exp(eta) if model.config.link == "log" else expit(eta)


def _cell_eta(model: Model, ds: DrawSet, obs: np.ndarray, with_effect: bool) -> np.ndarray:
    """``(n, len(obs))`` linear predictor without offset for chosen observations."""
    T, U = model.T, model.U
    times = model.panel.obs_time[obs]
    units = model.obs_units[obs]
    L = ds.gamma.copy()
    if with_effect:
        L[:, model.T_int:, :] += np.einsum("ph,nuh->npu", model.E_post, ds.alpha)
    Lf = L.reshape(ds.n, T * U)
    idx = times[:, None] * U + units
    eta = Lf[:, idx].sum(axis=2) + ds["beta"] @ model.X[obs].T
    eps = ds.get("eps")
    if eps is not None:
        eta = eta + eps[:, obs]
    return eta


def _target_obs(model: Model, units: list[int]) -> np.ndarray:
    if len(units) == 1:
        return np.ones(model.panel.n_obs, dtype=bool)
    return np.any(model.obs_units == units[-1], axis=1)


def difference_draws(model: Model, ds: DrawSet, units: list[int], times) -> np.ndarray:
    """``(n, len(times))`` mean of ``f^-1(eta_with) - f^-1(eta_without)`` over
    the target's observed cells at each time; nan where none are observed."""
    mask = _target_obs(model, units)
    out = np.full((ds.n, len(times)), np.nan)
    for i, t in enumerate(times):
        if t < model.T_int:
            out[:, i] = 0.0
            continue
        obs = np.flatnonzero(mask & (model.panel.obs_time == t))
        if obs.size == 0:
            continue
        d = _inverse_link(model, _cell_eta(model, ds, obs, True)) - _inverse_link(model, _cell_eta(model, ds, obs, False))
        out[:, i] = d.mean(axis=1)
    return out


def _post_window(model: Model, window) -> tuple[int, int]:
    if window is None:
        return model.T_int, model.T - 1
    t_a, t_b = (int(v) for v in window)
    if t_b < t_a:
        raise EffectError(f"empty window {t_a}:{t_b}")
    if t_a < model.T_int or t_b > model.T - 1:
        raise EffectError(f"window {t_a}:{t_b} lies outside the post period {model.T_int}:{model.T - 1}")
    return t_a, t_b


# -- public operations --------------------------------------------------------


def effect_curve(draws: Draws, model: Model, target: str = OVERALL, scale: str = "ratio", times=None) -> EffectSummary:
    """Pointwise effect of ``target`` at each time (default: every post time).

    Pre-period times give the identity effect (0 on the link and
    difference scales, 1 as a ratio).
    """
    _check_scale(scale)
    label, units = resolve_target(model, target)
    times = list(range(model.T_int, model.T)) if times is None else [int(t) for t in times]
    for t in times:
        if not 0 <= t < model.T:
            raise EffectError(f"time {t} outside 0..{model.T - 1}")
    ds = DrawSet(model, draws)
    if scale == "difference":
        vals = difference_draws(model, ds, units, times)
    else:
        vals = link_effects(ds.alpha, model, units)[:, times]
    return EffectSummary([
        EffectRow(label, str(t), scale, *summarize_draws(vals[:, i], scale)) for i, t in enumerate(times)
    ])


def window_draws(draws: Draws, model: Model, target: str = OVERALL, window=None, scale: str = "link") -> np.ndarray:
    """Per-draw window average: the link-scale mean over ``t_a..t_b``
    (inclusive), or the mean per-time difference on the difference scale."""
    _check_scale(scale)
    t_a, t_b = _post_window(model, window)
    _, units = resolve_target(model, target)
    ds = DrawSet(model, draws)
    times = list(range(t_a, t_b + 1))
    if scale == "difference":
        return difference_draws(model, ds, units, times).mean(axis=1)
    return link_effects(ds.alpha, model, units)[:, t_a:t_b + 1].mean(axis=1)


def window_average(draws: Draws, model: Model, target: str = OVERALL, window=None, scale: str = "ratio") -> EffectRow:
    """Window summary; ``ratio`` is ``exp`` of the link-scale window mean.

    ``window`` is an inclusive ``(t_a, t_b)`` pair inside the post
    period and defaults to the whole post period.
    """
    _check_scale(scale)
    label, _ = resolve_target(model, target)
    t_a, t_b = _post_window(model, window)
    vals = window_draws(draws, model, target, (t_a, t_b), "difference" if scale == "difference" else "link")
    return EffectRow(label, f"{t_a}:{t_b}", scale, *summarize_draws(vals, scale))


# -- poststratification --------------------------------------------------------


def _stratum_design(model: Model, table: PoststratTable) -> tuple[np.ndarray, np.ndarray]:
    """Unit indices ``(n_strata, 1 + J)`` and covariate rows ``(T, n_strata, P)``.

    A stratum's covariates at ``t`` are the mean over its observed cells
    at ``t``, falling back to the mean over all cells at ``t``.
    """
    if table.grouping != model.grouping:
        raise EffectError("poststratification table uses a different grouping")
    offs = model.grouping.unit_offsets
    S = table.strata.shape[0]
    units = np.column_stack([np.zeros(S, dtype=int)] + [offs[j + 1] + table.strata[:, j] for j in range(table.strata.shape[1])])
    P = model.X.shape[1]
    Xs = np.zeros((model.T, S, P))
    by_key: dict[tuple, list[int]] = {}
    for s, k in enumerate(map(tuple, table.strata)):
        by_key.setdefault(k, []).append(s)
    levels = model.panel.series_levels[model.panel.obs_series]
    for t in range(model.T):
        at_t = model.panel.obs_time == t
        if not at_t.any():
            continue
        Xs[t] = model.X[at_t].mean(axis=0)
        for k, ss in by_key.items():
            m = at_t & np.all(levels == np.asarray(k, dtype=int), axis=1)
            if m.any():
                Xs[t, ss] = model.X[m].mean(axis=0)
    return units, Xs


def poststrat_rates(draws: Draws, model: Model, table: PoststratTable) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw stratum rates ``(n, T, n_strata)`` with and without the
    intervention term.  Overdispersion terms are observation-specific and
    left out of stratum rates."""
    ds = DrawSet(model, draws)
    units, Xs = _stratum_design(model, table)
    G = ds.gamma[:, :, units].sum(axis=3)  # (n, T, S)
    base = G + np.einsum("tsp,np->nts", Xs, ds["beta"])
    g = np.einsum("th,nsh->nts", model.basis.effect_matrix(), ds.alpha[:, units, :].sum(axis=2))
    return _inverse_link(model, base + g), _inverse_link(model, base)


def _aggregate(with_r, without_r, weights, scale):
    """Per-draw aggregate over the last two axes (time, stratum)."""
    num = np.einsum("nts,s->n", with_r, weights)
    den = np.einsum("nts,s->n", without_r, weights)
    if scale == "difference":
        return (num - den) / (weights.sum() * with_r.shape[1])
    return np.log(num / den)


def poststratify(
    draws: Draws, model: Model, table: PoststratTable, scale: str = "ratio", window=None, by_time: bool = True
) -> EffectSummary:
    """Poststratified effects: ratio of weighted rate sums.

    Rows target ``"poststratified"`` (all strata) and
    ``"poststratified:factor=level"`` (partial weight sums within one
    level of one factor), per post time when ``by_time`` and for the
    window.  On the ratio scale the window row divides the weighted
    rates summed over the window; on the difference scale it averages
    per-time weighted differences.
    """
    _check_scale(scale)
    t_a, t_b = _post_window(model, window)
    rw, r0 = poststrat_rates(draws, model, table)
    w = table.normalized
    groups = [("poststratified", np.ones(w.size, dtype=bool))]
    for j, name in enumerate(model.grouping.names):
        for k, lev in enumerate(model.grouping.levels(name)):
            m = table.strata[:, j] == k
            if np.any(w[m] > 0):
                groups.append((f"poststratified:{name}={lev}", m))
    out = EffectSummary()
    for label, m in groups:
        wm = np.where(m, w, 0.0)
        if by_time:
            for t in range(t_a, t_b + 1):
                v = _aggregate(rw[:, t:t + 1], r0[:, t:t + 1], wm, scale)
                out.rows.append(EffectRow(label, str(t), scale, *summarize_draws(v, scale)))
        v = _aggregate(rw[:, t_a:t_b + 1], r0[:, t_a:t_b + 1], wm, scale)
        out.rows.append(EffectRow(label, f"{t_a}:{t_b}", scale, *summarize_draws(v, scale)))
    return out


def sample_aggregate(draws: Draws, model: Model, t: int, scale: str = "ratio") -> np.ndarray:
    """Per-draw size-weighted aggregate over the observed cells at ``t``
    (link scale for ``ratio``/``link``), the sample counterpart of
    :func:`poststratify`."""
    _check_scale(scale)
    ds = DrawSet(model, draws)
    obs = np.flatnonzero(model.panel.obs_time == t)
    if obs.size == 0:
        raise EffectError(f"no observed cells at time {t}")
    size = model.panel.size[obs].astype(float)
    rw = _inverse_link(model, _cell_eta(model, ds, obs, True)) @ size
    r0 = _inverse_link(model, _cell_eta(model, ds, obs, False)) @ size
    if scale == "difference":
        return (rw - r0) / size.sum()
    return np.log(rw / r0)
