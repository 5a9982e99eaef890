"""Multilevel latent random-walk / VAR(1) process.

Units are (factor, level) pairs, overall first (see
:attr:`GroupingSpec.units`).  States are built non-centred from standard
normal innovations ``raw`` of shape ``(T, U)``::

    gamma[0]  = sigma0 * raw[0]
    gamma[t]  = a * gamma[t-1] + sigma * raw[t]

with ``a = 1`` for the random walk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))
LOG_2_OVER_PI = float(np.log(2.0 / np.pi))


def log1m_tanh2(x):
    """``log(1 - tanh(x)**2)`` without cancellation for large ``|x|``."""
    ax = np.abs(x)
    return 2.0 * (LOG_2 - ax - np.log1p(np.exp(-2.0 * ax)))


def half_normal_logpdf(x, scale):
    return LOG_2 - 0.5 * LOG_2PI - np.log(scale) - 0.5 * (x / scale) ** 2


def half_cauchy_logpdf(x, scale):
    return LOG_2_OVER_PI - np.log(scale) - np.log1p((x / scale) ** 2)


@dataclass
class LatentState:
    raw: np.ndarray  # (T, U)
    sigma: np.ndarray  # (U,)
    sigma0: np.ndarray  # (U,)
    a: np.ndarray | None = None  # (U,), var1 only
    tau: np.ndarray | None = None  # (J + 1,), horseshoe only
    ell: np.ndarray | None = None  # (U,), horseshoe only


@dataclass(frozen=True)
class LatentPrior:
    """Per-unit prior scales for the latent innovations.

    ``w`` and ``w0`` scale the half-normal priors on ``sigma`` and
    ``sigma0``.  Under ``kind="horseshoe"`` the ``sigma`` prior becomes
    a regularised horseshoe: ``sigma ~ N+(0, s)`` with
    ``1 / s**2 = 1 / (tau_j * ell)**2 + 1 / slab**2``,
    ``ell ~ C+(0, 1)`` per unit and ``tau_j ~ C+(0, w_j)`` per factor.
    """

    w: np.ndarray
    w0: np.ndarray
    unit_factor: np.ndarray
    kind: str = "half_normal"
    slab: float = 1.0
    var1: bool = False

    @property
    def factor_w(self) -> np.ndarray:
        n_fac = int(self.unit_factor.max()) + 1
        out = np.empty(n_fac)
        out[self.unit_factor] = self.w
        return out


def construct_gamma(raw, sigma, sigma0, a=None) -> np.ndarray:
    """Latent states from innovations; ``a=None`` means random walk."""
    raw = np.asarray(raw, dtype=float)
    c = raw * sigma
    c[0] = raw[0] * sigma0
    if a is None:
        return np.cumsum(c, axis=0)
    a = np.asarray(a, dtype=float)
    gamma = np.empty_like(c)
    for u in range(c.shape[1]):
        gamma[:, u] = lfilter([1.0], [1.0, -a[u]], c[:, u])
    return gamma


def gamma_vjp(raw, sigma, sigma0, a, gamma, dgamma):
    """Pull ``d/dgamma`` back to (raw, sigma, sigma0, a)."""
    if a is None:
        lam = np.cumsum(dgamma[::-1], axis=0)[::-1]
        da = None
    else:
        lam = np.empty_like(dgamma)
        for u in range(dgamma.shape[1]):
            lam[:, u] = lfilter([1.0], [1.0, -a[u]], dgamma[::-1, u])[::-1]
        da = np.einsum("tu,tu->u", lam[1:], gamma[:-1])
    draw = lam * sigma
    draw[0] = lam[0] * sigma0
    dsigma = np.einsum("tu,tu->u", lam[1:], raw[1:])
    dsigma0 = lam[0] * raw[0]
    return draw, dsigma, dsigma0, da


def mu_contribution(gamma, units, t) -> float:
    """Latent mean of a series at ``t``: sum of its units' states.

    ``units`` lists the series' unit indices (overall plus its own level
    in every factor).
    """
    return float(np.sum(np.asarray(gamma)[t, list(units)]))


def latent_prior_terms(state: LatentState, prior: LatentPrior, a_tilde=None, with_grad=False):
    """Latent log prior; optional gradient with respect to each field.

    The autoregressive coefficient enters through ``a = tanh(a_tilde)``
    with ``a_tilde ~ N(0, 1)``, so its density on the ``a`` scale carries
    ``-log(1 - a**2)``.  The gradient entry ``"a_tilde"`` is with respect
    to ``a_tilde``.
    """
    raw, sigma, sigma0 = state.raw, state.sigma, state.sigma0
    value = -0.5 * float(np.sum(raw * raw)) - 0.5 * LOG_2PI * raw.size
    grads = {"raw": -raw} if with_grad else {}

    if prior.kind == "half_normal":
        value += float(np.sum(half_normal_logpdf(sigma, prior.w)))
        if with_grad:
            grads["sigma"] = -sigma / prior.w**2
    else:
        tau, ell = state.tau, state.ell
        tau_u = tau[prior.unit_factor]
        q = 1.0 / (tau_u * ell) ** 2
        p = q + 1.0 / prior.slab**2
        value += float(np.sum(LOG_2 - 0.5 * LOG_2PI + 0.5 * np.log(p) - 0.5 * sigma**2 * p))
        value += float(np.sum(half_cauchy_logpdf(ell, 1.0)))
        value += float(np.sum(half_cauchy_logpdf(tau, prior.factor_w)))
        if with_grad:
            grads["sigma"] = -sigma * p
            # d/dp then dp/dlog(tau) = dp/dlog(ell) = -2 q
            dp = 0.5 / p - 0.5 * sigma**2
            dlog = dp * (-2.0 * q)
            grads["ell"] = dlog / ell - 2.0 * ell / (1.0 + ell**2)
            fw = prior.factor_w
            grads["tau"] = np.bincount(prior.unit_factor, weights=dlog, minlength=tau.size) / tau
            grads["tau"] += -2.0 * tau / (fw**2 + tau**2)

    value += float(np.sum(half_normal_logpdf(sigma0, prior.w0)))
    if with_grad:
        grads["sigma0"] = -sigma0 / prior.w0**2

    if prior.var1:
        if a_tilde is None:
            a_tilde = np.arctanh(state.a)
        value += float(np.sum(-0.5 * a_tilde**2 - 0.5 * LOG_2PI - log1m_tanh2(a_tilde)))
        if with_grad:
            grads["a_tilde"] = -a_tilde + 2.0 * np.tanh(a_tilde)
    if with_grad:
        return value, grads
    return value


def latent_logprior(state: LatentState, prior: LatentPrior) -> float:
    """Log density of the latent block on the constrained scale."""
    return latent_prior_terms(state, prior)
