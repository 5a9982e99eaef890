"""Gated multilevel GAM intervention effect and its shrinkage prior.

Loadings ``alpha`` have shape ``(U, H + 1)``: column 0 is the level
shift, columns ``1..H`` multiply the spline basis.  For a unit in
factor ``j`` with ``kappa = (psi0 + c)**2``:

* level shift: ``alpha0 ~ N(0, 1 / (xi_j * kappa))`` (``"covariance"``)
  or ``N(0, sd = 1 / (xi_j * sqrt(kappa)))`` (``"literal"``);
* spline block ``m``: precision ``kappa * xi_j * lambda_jm * P_m``;
* hyperpriors ``psi0 ~ C+(0, 1)``, ``xi_j ~ Gamma(1, 1)`` for ``j >= 1``
  (``xi_0 = 1``), ``lambda_jm ~ N(loc, scale)`` truncated to ``(0, inf)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import log_ndtr

from .basis import SplineBasis
from .latent import LOG_2PI, LOG_2_OVER_PI


@dataclass
class InterventionParams:
    alpha: np.ndarray  # (U, H + 1)
    psi0: float
    xi: np.ndarray  # (J + 1,), xi[0] == 1
    lam: np.ndarray  # (J + 1, n_blocks)
    c: float = 1.0

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if self.xi[0] != 1.0:
            raise ValueError("xi[0] is fixed at 1")
        if self.psi0 <= 0 or np.any(self.xi <= 0) or np.any(np.asarray(self.lam) <= 0):
            raise ValueError("scale parameters must be positive")


@dataclass(frozen=True)
class PenaltyBlock:
    m: int
    cols: slice  # columns of alpha (offset by one for the level shift)
    P: np.ndarray
    logdet: float
    chol: np.ndarray  # lower L with P = L L'
    inv_chol_t: np.ndarray  # L^{-T}

    @property
    def dim(self) -> int:
        return self.P.shape[0]


class InterventionPrior:
    """Shrinkage prior with per-block penalty factorisations cached."""

    def __init__(
        self,
        basis: SplineBasis,
        unit_factor: np.ndarray,
        c: float = 1.0,
        lambda_loc: float = 5.0,
        lambda_scale: float = 30.0,
        alpha0_scale: str = "covariance",
        xi_free: bool = True,
    ):
        self.basis = basis
        self.unit_factor = np.asarray(unit_factor, dtype=int)
        self.n_factors = int(self.unit_factor.max()) + 1
        self.c = float(c)
        self.lambda_loc = float(lambda_loc)
        self.lambda_scale = float(lambda_scale)
        self.alpha0_scale = alpha0_scale
        self.xi_free = xi_free
        self.blocks: list[PenaltyBlock] = []
        for m, sl, P in basis.penalty_blocks:
            L = cholesky(P, lower=True)
            Linv_t = solve_triangular(L, np.eye(P.shape[0]), lower=True).T
            self.blocks.append(
                PenaltyBlock(
                    m=m,
                    cols=slice(sl.start + 1, sl.stop + 1),
                    P=P,
                    logdet=2.0 * float(np.sum(np.log(np.diag(L)))),
                    chol=L,
                    inv_chol_t=Linv_t,
                )
            )
        self._lam_norm = float(log_ndtr(self.lambda_loc / self.lambda_scale))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    # -- hyperpriors -------------------------------------------------------

    def hyper_logprior(self, psi0, xi, lam, with_grad=False):
        value = LOG_2_OVER_PI - np.log1p(psi0**2)
        z = (lam - self.lambda_loc) / self.lambda_scale
        value += float(np.sum(-0.5 * z**2 - np.log(self.lambda_scale) - 0.5 * LOG_2PI - self._lam_norm))
        if self.xi_free:
            value += float(-np.sum(xi[1:]))
        if not with_grad:
            return value
        dxi = np.zeros_like(xi)
        if self.xi_free:
            dxi[1:] = -1.0
        return value, -2.0 * psi0 / (1.0 + psi0**2), dxi, -z / self.lambda_scale

    def _level_precision(self, kappa, xi_u):
        if self.alpha0_scale == "literal":
            return kappa * xi_u**2
        return kappa * xi_u

    # -- centred density ---------------------------------------------------

    def logprior(self, params: InterventionParams, with_grad=False):
        """Joint log density of loadings and hyperparameters."""
        alpha = np.asarray(params.alpha, dtype=float)
        psi0, xi, lam = float(params.psi0), params.xi, np.asarray(params.lam, dtype=float)
        uf = self.unit_factor
        kappa = (psi0 + self.c) ** 2
        xi_u = xi[uf]
        prec0 = self._level_precision(kappa, xi_u)
        a0 = alpha[:, 0]
        value = float(np.sum(-0.5 * LOG_2PI + 0.5 * np.log(prec0) - 0.5 * prec0 * a0**2))
        if with_grad:
            dalpha = np.zeros_like(alpha)
            dalpha[:, 0] = -prec0 * a0
            g_logkappa = float(np.sum(0.5 - 0.5 * prec0 * a0**2))
            xi_pow = 2.0 if self.alpha0_scale == "literal" else 1.0
            g_logxi_u = xi_pow * (0.5 - 0.5 * prec0 * a0**2)
            g_loglam = np.zeros_like(lam)
        for b, blk in enumerate(self.blocks):
            ab = alpha[:, blk.cols]
            Pa = ab @ blk.P
            quad = np.einsum("uh,uh->u", ab, Pa)
            lam_u = lam[uf, b]
            q = kappa * xi_u * lam_u
            d = blk.dim
            value += float(np.sum(-0.5 * d * LOG_2PI + 0.5 * (d * np.log(q) + blk.logdet) - 0.5 * q * quad))
            if with_grad:
                dalpha[:, blk.cols] = -q[:, None] * Pa
                common = 0.5 * d - 0.5 * q * quad
                g_logkappa += float(np.sum(common))
                g_logxi_u = g_logxi_u + common
                g_loglam[:, b] = np.bincount(uf, weights=common, minlength=self.n_factors)
        hyper = self.hyper_logprior(psi0, xi, lam, with_grad)
        if not with_grad:
            return value + hyper
        hv, dpsi_h, dxi_h, dlam_h = hyper
        dpsi = g_logkappa * 2.0 / (psi0 + self.c) + dpsi_h
        dxi = np.bincount(uf, weights=g_logxi_u, minlength=self.n_factors) / xi + dxi_h
        dlam = g_loglam / lam + dlam_h
        return value + hv, {"alpha": dalpha, "psi0": dpsi, "xi": dxi, "lam": dlam}

    # -- non-centred mapping -----------------------------------------------

    def scales(self, psi0, xi, lam):
        """Per-unit standard deviation of the level shift and block scales."""
        kappa = (psi0 + self.c) ** 2
        xi_u = xi[self.unit_factor]
        sd0 = 1.0 / np.sqrt(self._level_precision(kappa, xi_u))
        sdb = [1.0 / np.sqrt(kappa * xi_u * lam[self.unit_factor, b]) for b in range(self.n_blocks)]
        return sd0, sdb

    def alpha_from_raw(self, raw, psi0, xi, lam):
        sd0, sdb = self.scales(psi0, xi, lam)
        alpha = np.empty_like(raw)
        alpha[:, 0] = sd0 * raw[:, 0]
        for blk, s in zip(self.blocks, sdb):
            alpha[:, blk.cols] = s[:, None] * (raw[:, blk.cols] @ blk.inv_chol_t.T)
        return alpha

    def raw_from_alpha(self, alpha, psi0, xi, lam):
        sd0, sdb = self.scales(psi0, xi, lam)
        raw = np.empty_like(alpha)
        raw[:, 0] = alpha[:, 0] / sd0
        for blk, s in zip(self.blocks, sdb):
            # alpha_b = s * raw_b @ L^{-1}  =>  raw_b = alpha_b @ L / s
            raw[:, blk.cols] = (alpha[:, blk.cols] @ blk.chol) / s[:, None]
        return raw

    def noncentered_log_jacobian(self, psi0, xi, lam) -> float:
        """``log |d alpha / d raw|`` of :meth:`alpha_from_raw`."""
        sd0, sdb = self.scales(psi0, xi, lam)
        out = float(np.sum(np.log(sd0)))
        for blk, s in zip(self.blocks, sdb):
            out += float(np.sum(blk.dim * np.log(s))) - 0.5 * blk.logdet * s.size
        return out

    def noncentered_value_and_grad(self, raw, psi0, xi, lam, dalpha_fn):
        """Evaluate the non-centred block.

        ``dalpha_fn(alpha)`` returns ``(value, dalpha)`` for whatever the
        loadings feed (likelihood).  Returns the total of that value and
        the prior in raw coordinates, plus gradients.
        """
        uf = self.unit_factor
        sd0, sdb = self.scales(psi0, xi, lam)
        alpha = np.empty_like(raw)
        alpha[:, 0] = sd0 * raw[:, 0]
        mapped = []
        for blk, s in zip(self.blocks, sdb):
            m = raw[:, blk.cols] @ blk.inv_chol_t.T
            mapped.append(m)
            alpha[:, blk.cols] = s[:, None] * m
        outer_value, dalpha = dalpha_fn(alpha)

        value = outer_value - 0.5 * float(np.sum(raw * raw)) - 0.5 * LOG_2PI * raw.size
        draw = -raw.copy()
        draw[:, 0] += sd0 * dalpha[:, 0]
        glog0 = alpha[:, 0] * dalpha[:, 0]  # d/d log sd0
        xi_pow = 2.0 if self.alpha0_scale == "literal" else 1.0
        # log sd0 = -0.5 log kappa - 0.5 * xi_pow * log xi
        g_logkappa = -0.5 * float(np.sum(glog0))
        g_logxi_u = -0.5 * xi_pow * glog0
        g_loglam = np.zeros_like(lam)
        for b, (blk, s, m) in enumerate(zip(self.blocks, sdb, mapped)):
            da = dalpha[:, blk.cols]
            draw[:, blk.cols] += s[:, None] * (da @ blk.inv_chol_t)
            glog = np.einsum("uh,uh->u", alpha[:, blk.cols], da)  # d/d log s
            g_logkappa += -0.5 * float(np.sum(glog))
            g_logxi_u = g_logxi_u - 0.5 * glog
            g_loglam[:, b] = np.bincount(uf, weights=-0.5 * glog, minlength=self.n_factors)
        hv, dpsi_h, dxi_h, dlam_h = self.hyper_logprior(psi0, xi, lam, True)
        grads = {
            "raw": draw,
            "psi0": g_logkappa * 2.0 / (psi0 + self.c) + dpsi_h,
            "xi": np.bincount(uf, weights=g_logxi_u, minlength=self.n_factors) / xi + dxi_h,
            "lam": g_loglam / lam + dlam_h,
        }
        return value + hv, alpha, grads


def g_matrix(alpha, basis: SplineBasis) -> np.ndarray:
    """Unit-level effects ``(T, U)``: zero before ``T_int``."""
    return basis.effect_matrix() @ np.asarray(alpha, dtype=float).T


def g_effect(alpha, basis: SplineBasis, units, t: int) -> float:
    """Full intervention effect of a series at time ``t``.

    ``units`` are the series' unit indices: overall plus its own level
    in every factor.
    """
    if t < basis.T_int:
        return 0.0
    row = basis.B[t - basis.T_int]
    alpha = np.asarray(alpha, dtype=float)
    total = 0.0
    for u in units:
        total += alpha[u, 0] + float(row @ alpha[u, 1:])
    return total


def intervention_logprior(params: InterventionParams, prior: InterventionPrior) -> float:
    return prior.logprior(params)
