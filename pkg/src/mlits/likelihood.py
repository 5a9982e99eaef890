"""Observation models and the secular/overdispersion priors."""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln

from .latent import LOG_2PI, half_normal_logpdf

# log Gamma(2) - log Gamma(1.5) - 0.5 log(3 pi), the Student-t(3) constant
_T3_CONST = float(gammaln(2.0) - gammaln(1.5) - 0.5 * np.log(3.0 * np.pi))


class LikelihoodError(ValueError):
    pass


class ObservationModel:
    """Poisson (log link, exposure offset) or binomial (logit link).

    Normalising constants (``log y!`` and ``log C(n, y)``) are precomputed
    so reported densities are absolute.
    """

    def __init__(self, family: str, y, size):
        if family not in ("poisson", "binomial"):
            raise LikelihoodError(f"unknown family {family!r}")
        self.family = family
        self.y = np.asarray(y, dtype=float)
        self.size = np.asarray(size, dtype=float)
        if family == "poisson":
            self.offset = np.log(self.size)
            self.const = -float(np.sum(gammaln(self.y + 1.0)))
        else:
            self.offset = np.zeros_like(self.y)
            self.const = float(
                np.sum(gammaln(self.size + 1.0) - gammaln(self.y + 1.0) - gammaln(self.size - self.y + 1.0))
            )

    @classmethod
    def for_panel(cls, panel) -> "ObservationModel":
        family = "binomial" if panel.size_kind == "trials" else "poisson"
        return cls(family, panel.y, panel.size)

    def value_and_grad(self, eta):
        """Log likelihood and its derivative with respect to ``eta``.

        ``eta`` already includes the offset.  Returns ``-inf`` (with a
        zero gradient) on overflow instead of raising.
        """
        y = self.y
        with np.errstate(over="ignore", invalid="ignore"):
            if self.family == "poisson":
                mu = np.exp(eta)
                value = float(np.sum(y * eta - mu)) + self.const
                grad = y - mu
            else:
                value = float(np.sum(y * eta - self.size * np.logaddexp(0.0, eta))) + self.const
                grad = y - self.size * expit(eta)
        if not np.isfinite(value):
            return -np.inf, np.zeros_like(eta)
        return value, grad

    def value(self, eta) -> float:
        eta = np.asarray(eta, dtype=float)
        if np.any(np.isnan(eta)):
            raise LikelihoodError("NaN in linear predictor")
        return self.value_and_grad(eta)[0]


def log_likelihood(panel, eta) -> float:
    """Summed log likelihood of the observed cells of ``panel``.

    ``eta`` is the per-observation linear predictor including the
    log-exposure offset for Poisson panels.
    """
    return ObservationModel.for_panel(panel).value(eta)


def student_t3_logpdf(x, scale):
    return _T3_CONST - np.log(scale) - 2.0 * np.log1p((x / scale) ** 2 / 3.0)


def beta_logprior(beta, scales, with_grad=False):
    """Independent Student-t(3, 0, scale) priors on the secular coefficients."""
    beta = np.asarray(beta, dtype=float)
    scales = np.asarray(scales, dtype=float)
    value = float(np.sum(student_t3_logpdf(beta, scales)))
    if with_grad:
        return value, -4.0 * beta / (3.0 * scales**2 + beta**2)
    return value


def overdispersion_logprior(eps, sigma_eps, scale=1.0, with_grad=False):
    """Observation-level normal effects with a half-normal scale prior."""
    eps = np.asarray(eps, dtype=float)
    value = float(np.sum(-0.5 * LOG_2PI - np.log(sigma_eps) - 0.5 * (eps / sigma_eps) ** 2))
    value += float(half_normal_logpdf(sigma_eps, scale))
    if with_grad:
        d_eps = -eps / sigma_eps**2
        d_sigma = float(-eps.size / sigma_eps + np.sum(eps**2) / sigma_eps**3 - sigma_eps / scale**2)
        return value, d_eps, d_sigma
    return value
