"""Parameter layout, transforms and the joint log posterior with gradient.

The linear predictor of observation ``o`` (series ``i``, time ``t``) is::

    eta_o = x_o' beta + sum_u M[i, u] * (gamma[t, u] + G[t, u]) + offset_o + eps_o

where ``M`` selects the overall unit and the series' own level in each
factor and ``G = effect_matrix @ alpha'``.  The gradient is assembled by
reverse accumulation through exactly these steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import SplineBasis, basis_for_panel
from .config import ModelConfig
from .intervention import InterventionParams, InterventionPrior
from .latent import (
    LatentPrior,
    LatentState,
    construct_gamma,
    gamma_vjp,
    latent_prior_terms,
    log1m_tanh2,
)
from . import _kernel as K
from .likelihood import ObservationModel, beta_logprior, overdispersion_logprior
from .panel import OVERALL, Panel

TRANSFORMS = ("identity", "log", "tanh")


@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple[int, ...]
    transform: str
    labels: tuple[str, ...]  # one per element, row-major

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParamLayout:
    """Ordered, disjoint parameter blocks of the unconstrained vector."""

    def __init__(self, blocks: list[Block]):
        self.blocks = list(blocks)
        self.slices: dict[str, slice] = {}
        start = 0
        for b in self.blocks:
            if b.transform not in TRANSFORMS:
                raise ValueError(f"unknown transform {b.transform!r}")
            if b.name in self.slices:
                raise ValueError(f"duplicate block {b.name!r}")
            self.slices[b.name] = slice(start, start + b.size)
            start += b.size
        self.dim = start

    def __contains__(self, name: str) -> bool:
        return name in self.slices

    def __getitem__(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [f"{b.name}[{lab}]" if lab else b.name for b in self.blocks for lab in b.labels]

    def split(self, theta) -> dict[str, np.ndarray]:
        return {b.name: np.asarray(theta[self.slices[b.name]]).reshape(b.shape) for b in self.blocks}


@dataclass
class LogDensityResult:
    value: float
    gradient: np.ndarray

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.value))


def _labels(*axes) -> tuple[str, ...]:
    if not axes:
        return ("",)
    grids = np.meshgrid(*[np.asarray(a, dtype=object) for a in axes], indexing="ij")
    flat = [g.ravel() for g in grids]
    return tuple(",".join(str(x) for x in parts) for parts in zip(*flat))


class Model:
    """Assembled model for one panel and config."""

    def __init__(self, panel: Panel, config: ModelConfig, basis: SplineBasis | None = None):
        config.validate_for(panel)
        self.panel = panel
        self.config = config
        self.grouping = g = panel.grouping
        self.T = T = panel.n_times
        self.T_int = config.T_int
        self.basis = basis if basis is not None else basis_for_panel(T, config.T_int, config.knots)
        if self.basis.T_int != config.T_int or self.basis.n_times != T:
            raise ValueError("basis does not span the panel's post period")
        self.var1 = config.latent == "var1"
        self.horseshoe = config.latent_prior == "horseshoe"
        self.overdispersion = config.overdispersion
        self.noncentered = config.alpha_parameterization == "noncentered"
        self.xi_free = config.xi_fixed is None and g.n_factors > 0

        # secular design
        X = panel.covariates
        names = list(panel.covariate_names)
        if config.intercept:
            X = np.hstack([np.ones((panel.n_obs, 1)), X])
            names = ["intercept", *names]
        self.X = np.ascontiguousarray(X)
        self.beta_names = tuple(names)
        self.beta_scales = np.array([config.beta_scale_for(n) for n in names])

        # unit bookkeeping
        self.units = g.units
        self.U = U = g.n_units
        self.unit_factor = g.unit_factor
        self.factor_names = (OVERALL, *g.names)
        offs = g.unit_offsets
        self.series_units = np.column_stack(
            [np.zeros(panel.n_series, dtype=int)]
            + [offs[j + 1] + panel.series_levels[:, j] for j in range(g.n_factors)]
        )
        self.obs_units = self.series_units[panel.obs_series]
        self._idx = (panel.obs_time[:, None] * U + self.obs_units).ravel()
        self._n_per_obs = self.obs_units.shape[1]

        # centred intercept: sample b = beta_0 + xbar'beta_rest + sum(W * gamma)
        self.center = bool(config.intercept and config.center_intercept)
        self.xbar = np.zeros(self.X.shape[1])
        self.W_level = np.zeros((T, U))
        if self.center and panel.n_obs:
            self.xbar[1:] = self.X[:, 1:].mean(axis=0)
            np.add.at(self.W_level, (np.repeat(panel.obs_time, self._n_per_obs), self.obs_units.ravel()), 1.0 / panel.n_obs)

        self.E_post = np.hstack([np.ones((self.basis.n_post, 1)), self.basis.B])
        self.H1 = self.E_post.shape[1]
        self.obs = ObservationModel.for_panel(panel)

        w = np.array([config.factor_scale("w", self.factor_names[j]) for j in self.unit_factor])
        w0 = np.array([config.factor_scale("w0", self.factor_names[j]) for j in self.unit_factor])
        self.latent_prior = LatentPrior(
            w=w, w0=w0, unit_factor=self.unit_factor, kind=config.latent_prior,
            slab=config.latent_slab, var1=self.var1,
        )
        self.intervention_prior = InterventionPrior(
            self.basis, self.unit_factor, c=config.c, lambda_loc=config.lambda_loc,
            lambda_scale=config.lambda_scale, alpha0_scale=config.alpha0_scale,
            xi_free=self.xi_free,
        )
        self.n_blocks = self.intervention_prior.n_blocks
        self.layout = self._build_layout()
        self._sl = self.layout.slices
        self._kargs = self._pack_kernel()
        self.kernel_args = self._kargs

    # -- layout ------------------------------------------------------------

    def _build_layout(self) -> ParamLayout:
        unit_lab = [f"{f},{lev}" for f, lev in self.units]
        times = list(range(self.T))
        fnames = list(self.factor_names)
        blocks = [
            Block("beta", (len(self.beta_names),), "identity", tuple(self.beta_names)),
            Block("z", (self.T, self.U), "identity", _labels(times, unit_lab)),
            Block("sigma", (self.U,), "log", tuple(unit_lab)),
            Block("sigma0", (self.U,), "log", tuple(unit_lab)),
        ]
        if self.var1:
            blocks.append(Block("a", (self.U,), "tanh", tuple(unit_lab)))
        alpha_name = "alpha_raw" if self.noncentered else "alpha"
        blocks.append(Block(alpha_name, (self.U, self.H1), "identity", _labels(unit_lab, range(self.H1))))
        blocks.append(Block("psi0", (), "log", ("",)))
        if self.xi_free:
            blocks.append(Block("xi", (len(fnames) - 1,), "log", tuple(fnames[1:])))
        if self.n_blocks:
            ms = [blk.m for blk in self.intervention_prior.blocks]
            blocks.append(Block("lambda", (len(fnames), self.n_blocks), "log", _labels(fnames, ms)))
        if self.overdispersion:
            p = self.panel
            obs_lab = tuple(f"{p.series_ids[i]},{t}" for i, t in zip(p.obs_series, p.obs_time))
            blocks.append(Block("eps", (p.n_obs,), "identity", obs_lab))
            blocks.append(Block("sigma_eps", (), "log", ("",)))
        if self.horseshoe:
            blocks.append(Block("tau_latent", (len(fnames),), "log", tuple(fnames)))
            blocks.append(Block("ell", (self.U,), "log", tuple(unit_lab)))
        return ParamLayout(blocks)

    @property
    def dim(self) -> int:
        return self.layout.dim

    def _pack_kernel(self):
        sl, cfg = self._sl, self.config
        iv = np.zeros(K.N_INT, dtype=np.int64)
        iv[K.I_T], iv[K.I_U], iv[K.I_TINT] = self.T, self.U, self.T_int
        iv[K.I_NOBS], iv[K.I_NPO], iv[K.I_P] = self.panel.n_obs, self._n_per_obs, self.X.shape[1]
        iv[K.I_H1], iv[K.I_NB], iv[K.I_NFAC] = self.H1, self.n_blocks, len(self.factor_names)
        iv[K.I_FAM] = 0 if self.obs.family == "poisson" else 1
        iv[K.I_VAR1], iv[K.I_HS], iv[K.I_OD] = self.var1, self.horseshoe, self.overdispersion
        iv[K.I_NC], iv[K.I_LIT] = self.noncentered, cfg.alpha0_scale == "literal"
        iv[K.I_XIFREE] = self.xi_free
        iv[K.I_CENTER] = self.center
        offsets = {
            K.I_OBETA: "beta", K.I_OZ: "z", K.I_OSIG: "sigma", K.I_OSIG0: "sigma0", K.I_OA: "a",
            K.I_OALPHA: "alpha_raw" if self.noncentered else "alpha", K.I_OPSI: "psi0", K.I_OXI: "xi",
            K.I_OLAM: "lambda", K.I_OEPS: "eps", K.I_OSEPS: "sigma_eps", K.I_OTAU: "tau_latent", K.I_OELL: "ell",
        }
        for i, name in offsets.items():
            iv[i] = sl[name].start if name in sl else 0
        prior = self.intervention_prior
        fv = np.zeros(K.N_FLOAT)
        fv[K.F_C], fv[K.F_LLOC], fv[K.F_LSCALE] = prior.c, prior.lambda_loc, prior.lambda_scale
        fv[K.F_LNORM] = prior._lam_norm
        fv[K.F_ODSCALE], fv[K.F_SLAB] = cfg.overdispersion_scale, cfg.latent_slab
        fv[K.F_XIFIX] = cfg.xi_fixed if cfg.xi_fixed is not None else 1.0
        fv[K.F_LLCONST] = self.obs.const

        nb = max(self.n_blocks, 1)
        dmax = max([blk.dim for blk in prior.blocks] + [1])
        Pm = np.zeros((nb, dmax, dmax))
        Minv = np.zeros((nb, dmax, dmax))
        logdet = np.zeros(nb)
        bstart = np.zeros(nb, dtype=np.int64)
        bdim = np.zeros(nb, dtype=np.int64)
        for b, blk in enumerate(prior.blocks):
            d = blk.dim
            Pm[b, :d, :d] = blk.P
            Minv[b, :d, :d] = blk.inv_chol_t
            logdet[b] = blk.logdet
            bstart[b], bdim[b] = blk.cols.start, d
        lp = self.latent_prior
        return (
            iv, fv, self.X, np.ascontiguousarray(self.obs.y), np.ascontiguousarray(self.obs.size),
            np.ascontiguousarray(self.obs.offset), np.ascontiguousarray(self.panel.obs_time, dtype=np.int64),
            np.ascontiguousarray(self.obs_units, dtype=np.int64), np.ascontiguousarray(self.E_post),
            np.ascontiguousarray(self.beta_scales, dtype=float), np.asarray(lp.w, dtype=float),
            np.asarray(lp.w0, dtype=float), np.ascontiguousarray(self.unit_factor, dtype=np.int64),
            bstart, bdim, Pm, logdet, Minv, self.W_level, self.xbar,
        )

    def xi_full(self, xi_block=None) -> np.ndarray:
        J = self.grouping.n_factors
        out = np.ones(J + 1)
        if self.xi_free:
            out[1:] = xi_block
        elif self.config.xi_fixed is not None:
            out[1:] = self.config.xi_fixed
        return out

    # -- transforms --------------------------------------------------------

    def constrain(self, theta):
        """Constrained parameter dict and total log-Jacobian.

        In the non-centred parameterisation the dict also carries the
        derived ``alpha``, and the log-Jacobian of ``alpha_raw -> alpha``
        is included so that the posterior equals the centred module
        densities plus this total.
        """
        theta = np.asarray(theta, dtype=float)
        parts = self.layout.split(theta)
        params: dict[str, np.ndarray] = {}
        logjac = 0.0
        for b in self.layout.blocks:
            v = parts[b.name]
            if b.transform == "log":
                params[b.name] = np.exp(v)
                logjac += float(np.sum(v))
            elif b.transform == "tanh":
                params[b.name] = np.tanh(v)
                logjac += float(np.sum(log1m_tanh2(v)))
            else:
                params[b.name] = v.copy()
        if self.center:
            params["beta"][0] -= self._level_shift(params)
        if self.noncentered:
            xi = self.xi_full(params.get("xi"))
            lam = params.get("lambda", np.zeros((len(self.factor_names), 0)))
            params["alpha"] = self.intervention_prior.alpha_from_raw(params["alpha_raw"], float(params["psi0"]), xi, lam)
            logjac += self.intervention_prior.noncentered_log_jacobian(float(params["psi0"]), xi, lam)
        return params, logjac

    def unconstrain(self, params) -> np.ndarray:
        """Inverse of :meth:`constrain`; accepts centred ``alpha``."""
        params = dict(params)
        if self.noncentered and "alpha_raw" not in params:
            xi = self.xi_full(params.get("xi"))
            lam = np.asarray(params.get("lambda", np.zeros((len(self.factor_names), 0))), dtype=float)
            params["alpha_raw"] = self.intervention_prior.raw_from_alpha(
                np.asarray(params["alpha"], dtype=float), float(params["psi0"]), xi, lam
            )
        theta = np.empty(self.dim)
        for b in self.layout.blocks:
            v = np.asarray(params[b.name], dtype=float).reshape(b.shape)
            if b.transform == "log":
                if np.any(v <= 0):
                    raise ValueError(f"{b.name} must be strictly positive to unconstrain")
                v = np.log(v)
            elif b.transform == "tanh":
                if np.any(np.abs(v) >= 1):
                    raise ValueError(f"{b.name} must lie strictly inside (-1, 1)")
                v = np.arctanh(v)
            theta[self._sl[b.name]] = np.ravel(v)
        if self.center:
            theta[self._sl["beta"].start] += self._level_shift(params)
        return theta

    def _level_shift(self, params) -> float:
        """``xbar'beta_rest + sum(W * gamma)``: what the intercept coordinate adds to ``beta_0``."""
        beta = np.asarray(params["beta"], dtype=float)
        return float(self.xbar[1:] @ beta[1:]) + float(np.sum(self.W_level * self.gamma(params)))

    # -- building blocks ---------------------------------------------------

    def gamma(self, params) -> np.ndarray:
        return construct_gamma(params["z"], params["sigma"], params["sigma0"], params.get("a") if self.var1 else None)

    def linear_predictor(self, params, effect: bool = True, eps: bool = True, offset: bool = True) -> np.ndarray:
        """Per-observation ``eta`` from constrained params."""
        L = self.gamma(params).copy()
        if effect:
            L[self.T_int:] += self.E_post @ np.asarray(params["alpha"]).T
        eta = self.X @ params["beta"] + L.ravel()[self._idx].reshape(-1, self._n_per_obs).sum(axis=1)
        if offset:
            eta = eta + self.obs.offset
        if eps and self.overdispersion:
            eta = eta + params["eps"]
        return eta

    def latent_state(self, params) -> LatentState:
        return LatentState(
            raw=params["z"], sigma=params["sigma"], sigma0=params["sigma0"],
            a=params.get("a"), tau=params.get("tau_latent"), ell=params.get("ell"),
        )

    def intervention_params(self, params) -> InterventionParams:
        lam = params.get("lambda", np.zeros((len(self.factor_names), 0)))
        return InterventionParams(
            alpha=params["alpha"], psi0=float(params["psi0"]), xi=self.xi_full(params.get("xi")),
            lam=lam, c=self.config.c,
        )

    def terms(self, params) -> dict[str, float]:
        """Module-level log density terms at constrained ``params``."""
        out = {
            "likelihood": self.obs.value(self.linear_predictor(params)),
            "beta": beta_logprior(params["beta"], self.beta_scales),
            "latent": latent_prior_terms(self.latent_state(params), self.latent_prior),
            "intervention": self.intervention_prior.logprior(self.intervention_params(params)),
        }
        if self.overdispersion:
            out["overdispersion"] = overdispersion_logprior(
                params["eps"], float(params["sigma_eps"]), self.config.overdispersion_scale
            )
        return out

    # -- log posterior -----------------------------------------------------

    def log_posterior(self, theta) -> LogDensityResult:
        value, grad = self.logp_grad(theta)
        return LogDensityResult(value, grad)

    def logp(self, theta) -> float:
        return self.logp_grad(theta)[0]

    def logp_grad(self, theta):
        """Log posterior density on the unconstrained scale and its gradient.

        A non-finite value is returned as ``-inf`` with a zero gradient.
        """
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(theta)):
            return -np.inf, np.zeros(self.dim)
        return K.logp_grad_kernel(theta, *self._kargs)

    def logp_grad_fast(self, theta):
        """:meth:`logp_grad` without argument checks (sampler hot path)."""
        return K.logp_grad_kernel(theta, *self._kargs)

    def logp_grad_reference(self, theta):
        """Pure numpy evaluation of :meth:`logp_grad`, used as a cross-check."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(theta)):
            return -np.inf, np.zeros(self.dim)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value, grad = self._logp_grad(theta)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.dim)
        return value, grad

    def _logp_grad(self, theta):
        sl = self._sl
        T, U = self.T, self.U
        grad = np.zeros(self.dim)

        beta = theta[sl["beta"]].copy()
        z = theta[sl["z"]].reshape(T, U)
        ls = theta[sl["sigma"]]
        ls0 = theta[sl["sigma0"]]
        sigma, sigma0 = np.exp(ls), np.exp(ls0)
        if self.var1:
            at = theta[sl["a"]]
            a = np.tanh(at)
        else:
            at = a = None
        lpsi = float(theta[sl["psi0"]][0])
        psi0 = np.exp(lpsi)
        xi = self.xi_full(np.exp(theta[sl["xi"]]) if self.xi_free else None)
        if self.n_blocks:
            lam = np.exp(theta[sl["lambda"]]).reshape(-1, self.n_blocks)
        else:
            lam = np.zeros((len(self.factor_names), 0))

        gamma = construct_gamma(z, sigma, sigma0, a)
        if self.center:
            beta[0] -= float(self.xbar[1:] @ beta[1:]) + float(np.sum(self.W_level * gamma))
        eta_base = self.X @ beta + self.obs.offset
        if self.overdispersion:
            eps = theta[sl["eps"]]
            sig_eps = float(np.exp(theta[sl["sigma_eps"]][0]))
            eta_base = eta_base + eps

        ctx = {}

        def data_term(alpha):
            L = gamma.copy()
            L[self.T_int:] += self.E_post @ alpha.T
            eta = eta_base + L.ravel()[self._idx].reshape(-1, self._n_per_obs).sum(axis=1)
            ll, r = self.obs.value_and_grad(eta)
            dL = np.bincount(self._idx, weights=np.repeat(r, self._n_per_obs), minlength=T * U).reshape(T, U)
            ctx["r"] = r
            ctx["dL"] = dL
            return ll, dL[self.T_int:].T @ self.E_post

        prior = self.intervention_prior
        if self.noncentered:
            raw = theta[sl["alpha_raw"]].reshape(U, self.H1)
            value, _, ig = prior.noncentered_value_and_grad(raw, psi0, xi, lam, data_term)
            grad[sl["alpha_raw"]] = ig["raw"].ravel()
        else:
            alpha = theta[sl["alpha"]].reshape(U, self.H1)
            ll, dalpha = data_term(alpha)
            iv, ig = prior.logprior(InterventionParams(alpha, psi0, xi, lam, self.config.c), with_grad=True)
            value = ll + iv
            grad[sl["alpha"]] = (dalpha + ig["alpha"]).ravel()
        # log transforms: d/dtheta = x * d/dx + 1 (Jacobian)
        grad[sl["psi0"]] = ig["psi0"] * psi0 + 1.0
        value += lpsi
        if self.xi_free:
            grad[sl["xi"]] = ig["xi"][1:] * xi[1:] + 1.0
            value += float(np.sum(theta[sl["xi"]]))
        if self.n_blocks:
            grad[sl["lambda"]] = (ig["lam"] * lam).ravel() + 1.0
            value += float(np.sum(theta[sl["lambda"]]))

        r, dL = ctx["r"], ctx["dL"]
        bv, bg = beta_logprior(beta, self.beta_scales, with_grad=True)
        value += bv
        gbeta = self.X.T @ r + bg
        if self.center:
            gbeta[1:] -= gbeta[0] * self.xbar[1:]
            dL = dL - gbeta[0] * self.W_level
        grad[sl["beta"]] = gbeta

        dz, dsig, dsig0, da = gamma_vjp(z, sigma, sigma0, a, gamma, dL)
        state = LatentState(z, sigma, sigma0, a)
        if self.horseshoe:
            ltau = theta[sl["tau_latent"]]
            lell = theta[sl["ell"]]
            state.tau, state.ell = np.exp(ltau), np.exp(lell)
        lv, lg = latent_prior_terms(state, self.latent_prior, a_tilde=at, with_grad=True)
        value += lv + float(np.sum(ls)) + float(np.sum(ls0))
        grad[sl["z"]] = (dz + lg["raw"]).ravel()
        grad[sl["sigma"]] = (dsig + lg["sigma"]) * sigma + 1.0
        grad[sl["sigma0"]] = (dsig0 + lg["sigma0"]) * sigma0 + 1.0
        if self.var1:
            lj = log1m_tanh2(at)
            value += float(np.sum(lj))
            grad[sl["a"]] = da * (1.0 - a * a) + lg["a_tilde"] - 2.0 * a
        if self.horseshoe:
            value += float(np.sum(ltau)) + float(np.sum(lell))
            grad[sl["tau_latent"]] = lg["tau"] * state.tau + 1.0
            grad[sl["ell"]] = lg["ell"] * state.ell + 1.0

        if self.overdispersion:
            ov, deps, dse = overdispersion_logprior(eps, sig_eps, self.config.overdispersion_scale, with_grad=True)
            value += ov + float(theta[sl["sigma_eps"]][0])
            grad[sl["eps"]] = r + deps
            grad[sl["sigma_eps"]] = dse * sig_eps + 1.0
        return value, grad

    # -- initialisation and output ---------------------------------------

    def initial_point(self, rng, radius: float = 2.0, tries: int = 100) -> np.ndarray:
        for _ in range(tries):
            theta = rng.uniform(-radius, radius, size=self.dim)
            value, grad = self.logp_grad(theta)
            if np.isfinite(value):
                return theta
        raise RuntimeError(f"no finite initial point found in {tries} tries")

    def output_names(self) -> list[str]:
        """Column names of :meth:`output_vector` (constrained + generated)."""
        names = [n for n in self.layout.names]
        unit_lab = [f"{f},{lev}" for f, lev in self.units]
        if self.noncentered:
            names += [f"alpha[{lab}]" for lab in _labels(unit_lab, range(self.H1))]
        names += [f"gamma[{lab}]" for lab in _labels(range(self.T), unit_lab)]
        return names

    def output_vector(self, theta) -> np.ndarray:
        params, _ = self.constrain(theta)
        parts = [np.ravel(params[b.name]) for b in self.layout.blocks]
        if self.noncentered:
            parts.append(np.ravel(params["alpha"]))
        parts.append(np.ravel(self.gamma(params)))
        return np.concatenate(parts)

    def output_blocks(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        """Where each named block sits in :meth:`output_vector`."""
        out = {}
        start = 0
        for b in self.layout.blocks:
            out[b.name] = (slice(start, start + b.size), b.shape)
            start += b.size
        if self.noncentered:
            n = self.U * self.H1
            out["alpha"] = (slice(start, start + n), (self.U, self.H1))
            start += n
        out["gamma"] = (slice(start, start + self.T * self.U), (self.T, self.U))
        return out

    def params_from_output(self, row) -> dict[str, np.ndarray]:
        row = np.asarray(row, dtype=float)
        return {name: row[sl].reshape(shape) for name, (sl, shape) in self.output_blocks().items()}
