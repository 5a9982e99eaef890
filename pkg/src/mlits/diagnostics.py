"""Convergence diagnostics: split R-hat, bulk and tail ESS, MCSE.

Formulas
--------
Each chain is split in half, giving ``m`` sequences of length ``n``.

* ``rhat``: classic split potential scale reduction,
  ``sqrt(((n - 1) / n * W + B / n) / W)`` with ``W`` the mean
  within-sequence variance and ``B / n`` the variance of sequence means.
* ``rhat_rank``: the same statistic after rank normalisation, maximised
  with its folded (``|x - median|``) counterpart.
* ``ess_bulk``: effective sample size of the rank-normalised split
  sequences, where ``z = Phi^{-1}((r - 3/8) / (S + 1/4))`` for pooled
  ranks ``r`` among ``S`` draws.
* ``ess_tail``: the minimum ESS of the indicator sequences
  ``1{x <= q05}`` and ``1{x <= q95}``.
* ``ess_mean``: ESS of the raw values, used for ``mcse_mean = sd /
  sqrt(ess_mean)``.

ESS uses FFT autocovariances combined across sequences, truncated by
Geyer's initial positive sequence and made monotone, and is capped at
the total number of draws.  Constant inputs have undefined ESS and
R-hat; they are reported as ``ess = 0``, ``rhat = nan`` and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

RHAT_WARN = 1.01
DIVERGENCE_WARN = 0.01


def _split(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[1] // 2
    if n < 2:
        raise ValueError("need at least 4 draws per chain")
    # with an odd count the middle draw is dropped
    return np.concatenate([x[:, :n], x[:, -n:]], axis=0)


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row, lags ``0..n-1``."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=nfft, axis=1)
    return np.fft.irfft(f * np.conj(f), n=nfft, axis=1)[:, :n] / n


def _is_constant(x) -> bool:
    x = np.asarray(x)
    return bool(np.all(x == x.flat[0])) or not np.all(np.isfinite(x))


def split_rhat(x) -> float:
    """Classic split R-hat of a ``(chains, draws)`` array."""
    return _rhat_sequences(_split(x))


def _rhat_sequences(s: np.ndarray) -> float:
    if _is_constant(s):
        return float("nan")
    n = s.shape[1]
    W = float(np.mean(np.var(s, axis=1, ddof=1)))
    B_over_n = float(np.var(np.mean(s, axis=1), ddof=1))
    if W == 0.0:
        return float("inf")
    return float(np.sqrt(((n - 1) / n * W + B_over_n) / W))


def rank_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def rank_rhat(x) -> float:
    s = _split(x)
    if _is_constant(s):
        return float("nan")
    bulk = _rhat_sequences(rank_normalize(s))
    folded = _rhat_sequences(rank_normalize(np.abs(s - np.median(s))))
    return max(bulk, folded)


def _ess_sequences(s: np.ndarray) -> float:
    """ESS of already-split sequences ``(m, n)``."""
    m, n = s.shape
    if _is_constant(s):
        return 0.0
    acov = _autocov(s)
    mean_var = float(np.mean(acov[:, 0])) * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += float(np.var(np.mean(s, axis=1), ddof=1))
    if var_plus <= 0:
        return 0.0
    rho_mean = 1.0 - (mean_var - np.mean(acov, axis=0)) / var_plus
    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even, rho_odd = 1.0, rho_mean[1] if n > 1 else 0.0
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0.0:
        rho_even = rho_mean[t + 1]
        rho_odd = rho_mean[t + 2]
        if rho_even + rho_odd >= 0.0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0 and max_t + 1 < n:
        rho[max_t + 1] = rho_even
    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t])
            rho[t + 2] = rho[t + 1]
        t += 2
    total = m * n
    tau = -1.0 + 2.0 * float(np.sum(rho[: max_t + 1])) + float(np.sum(rho[max_t + 1 : max_t + 2]))
    tau = max(tau, 1.0 / np.log10(total))
    return float(min(total / tau, total))


def ess_mean(x) -> float:
    return _ess_sequences(_split(x))


def ess_bulk(x) -> float:
    s = _split(x)
    if _is_constant(s):
        return 0.0
    return _ess_sequences(rank_normalize(s))


def ess_tail(x) -> float:
    s = _split(x)
    if _is_constant(s):
        return 0.0
    q05, q95 = np.quantile(s, [0.05, 0.95])
    return min(_ess_sequences((s <= q05).astype(float)), _ess_sequences((s <= q95).astype(float)))


def mcse_mean(x) -> float:
    x = np.asarray(x, dtype=float)
    e = ess_mean(x)
    return float(np.std(x, ddof=1) / np.sqrt(e)) if e > 0 else float("nan")


@dataclass
class Diagnostics:
    names: list[str]
    rhat: np.ndarray
    rhat_rank: np.ndarray
    ess_bulk: np.ndarray
    ess_tail: np.ndarray
    n_divergent: int
    n_max_depth: int
    n_draws: int
    n_chains: int
    flags: list[str] = field(default_factory=list)
    constant: list[str] = field(default_factory=list)

    @property
    def max_rhat(self) -> float:
        r = self.rhat[np.isfinite(self.rhat)]
        return float(r.max()) if r.size else float("nan")

    @property
    def min_ess_bulk(self) -> float:
        e = self.ess_bulk[self.ess_bulk > 0]
        return float(e.min()) if e.size else 0.0

    def warning_codes(self) -> list[str]:
        """Documented warning codes; see the README for their meaning."""
        codes = []
        if np.isfinite(self.max_rhat) and self.max_rhat > RHAT_WARN:
            codes.append("rhat_gt_1.01")
        if self.n_draws and self.n_divergent > DIVERGENCE_WARN * self.n_draws:
            codes.append("divergences_gt_1pct")
        if self.n_max_depth:
            codes.append("max_treedepth_hit")
        if "single_chain" in self.flags:
            codes.append("single_chain")
        if self.constant:
            codes.append("constant_parameters")
        return codes

    @property
    def converged(self) -> bool:
        return not {"rhat_gt_1.01", "divergences_gt_1pct"} & set(self.warning_codes())

    def summary(self) -> dict:
        return {
            "max_rhat": self.max_rhat,
            "min_ess_bulk": self.min_ess_bulk,
            "min_ess_tail": float(self.ess_tail[self.ess_tail > 0].min()) if np.any(self.ess_tail > 0) else 0.0,
            "n_divergent": self.n_divergent,
            "n_max_depth": self.n_max_depth,
            "n_draws": self.n_draws,
            "n_chains": self.n_chains,
            "flags": list(self.flags),
            "constant": list(self.constant),
            "warnings": self.warning_codes(),
        }

    def table(self) -> list[dict]:
        return [
            {"name": n, "rhat": r, "rhat_rank": rr, "ess_bulk": eb, "ess_tail": et}
            for n, r, rr, eb, et in zip(self.names, self.rhat, self.rhat_rank, self.ess_bulk, self.ess_tail)
        ]


def diagnose(draws, names=None) -> Diagnostics:
    """Per-parameter diagnostics of a :class:`~mlits.sampler.Draws`."""
    names = list(draws.names if names is None else names)
    C, S = draws.n_chains, draws.n_samples
    if S < 4:
        raise ValueError("need at least 4 draws per chain")
    flags = ["single_chain"] if C < 2 else []
    rh, rr, eb, et, const = [], [], [], [], []
    for n in names:
        x = draws.column(n)
        if _is_constant(x):
            const.append(n)
            rh.append(np.nan)
            rr.append(np.nan)
            eb.append(0.0)
            et.append(0.0)
            continue
        rh.append(split_rhat(x))
        rr.append(rank_rhat(x))
        eb.append(ess_bulk(x))
        et.append(ess_tail(x))
    if const:
        flags.append("ess_undefined")
    return Diagnostics(
        names=names, rhat=np.array(rh), rhat_rank=np.array(rr), ess_bulk=np.array(eb), ess_tail=np.array(et),
        n_divergent=draws.n_divergent, n_max_depth=draws.n_max_depth, n_draws=C * S, n_chains=C,
        flags=flags, constant=const,
    )
