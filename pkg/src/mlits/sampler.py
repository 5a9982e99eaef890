"""No-U-Turn sampler with windowed warmup adaptation.

Multinomial trajectory sampling with the generalised U-turn criterion,
including the extra checks across the seam of every merged subtree.  A
diagonal inverse metric is estimated in doubling windows during warmup
(75 / 25, 50, 100, ... / 50) and the step size is tuned by dual
averaging.

A *target* is anything exposing ``dim``, ``logp_grad(theta)`` returning
``(value, gradient)``, ``initial_point(rng)``, ``output_names()`` and
``output_vector(theta)``; :class:`~mlits.posterior.Model` qualifies and
:class:`FunctionTarget` wraps a bare callable.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
from dataclasses import dataclass, field

import numpy as np

from . import _nuts
from .config import SamplerConfig

MAX_DELTA_H = 1000.0
DIVERGENCE_WARN_FRACTION = 0.10
META_NAMES = ("lp__", "accept_stat__", "stepsize__", "treedepth__", "n_leapfrog__", "divergent__")


def chain_rng(seed: int, chain_id: int) -> np.random.Generator:
    """Counter-based stream for one chain; independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(chain_id)])))


class FunctionTarget:
    """Adapter turning ``logp_grad(theta) -> (value, grad)`` into a target."""

    def __init__(self, logp_grad, dim: int, names=None, init_radius: float = 2.0):
        self._f = logp_grad
        self.dim = int(dim)
        self._names = list(names) if names is not None else [f"x[{i}]" for i in range(self.dim)]
        self.init_radius = init_radius

    def logp_grad(self, theta):
        return self._f(theta)

    def initial_point(self, rng):
        return rng.uniform(-self.init_radius, self.init_radius, size=self.dim)

    def output_names(self):
        return list(self._names)

    def output_vector(self, theta):
        return np.asarray(theta, dtype=float).copy()


def leapfrog(theta, momentum, step, grad_fn, inv_metric=None):
    """One velocity-Verlet step: half kick, drift, half kick.

    Returns ``(theta', momentum')``.  ``grad_fn`` returns the gradient of
    the log density.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=float)
    p = np.asarray(momentum, dtype=float) + 0.5 * step * np.asarray(grad_fn(theta))
    theta = theta + step * (p if inv_metric is None else inv_metric * p)
    p = p + 0.5 * step * np.asarray(grad_fn(theta))
    return theta, p


# -- adaptation ----------------------------------------------------------


class DualAveraging:
    """Step-size adaptation toward a target acceptance statistic."""

    def __init__(self, delta: float, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.restart(0.0)

    def restart(self, mu: float):
        self.mu = mu
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


class WindowSchedule:
    """Metric-estimation windows: init buffer, doubling windows, terminal buffer."""

    def __init__(self, n_warmup: int, init_buffer: int = 75, term_buffer: int = 50, base_window: int = 25):
        if n_warmup < init_buffer + term_buffer + base_window:
            raise ValueError(f"warmup must be >= {init_buffer + term_buffer + base_window}")
        self.n_warmup = n_warmup
        self.init_buffer, self.term_buffer, self.base_window = init_buffer, term_buffer, base_window
        self.window_size = base_window
        self.next_end = init_buffer + base_window - 1
        self._last = n_warmup - term_buffer - 1

    def in_window(self, i: int) -> bool:
        return self.init_buffer <= i < self.n_warmup - self.term_buffer

    def is_window_end(self, i: int) -> bool:
        if i != self.next_end:
            return False
        if self.next_end != self._last:
            self.window_size *= 2
            self.next_end = i + self.window_size
            if self.next_end != self._last and self.next_end + 2 * self.window_size > self._last:
                self.next_end = self._last
        return True

    def ends(self) -> list[int]:
        """All window end iterations (for documentation and tests)."""
        probe = WindowSchedule(self.n_warmup, self.init_buffer, self.term_buffer, self.base_window)
        return [i for i in range(self.n_warmup) if probe.is_window_end(i)]


class Welford:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def regularized_variance(self) -> np.ndarray:
        n = self.n
        var = self.m2 / (n - 1.0)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


# -- trajectory ----------------------------------------------------------


@dataclass
class TransitionStats:
    accept_stat: float
    depth: int
    n_leapfrog: int
    divergent: bool


class _Integrator:
    """Holds the closure, metric and step size of one chain."""

    def __init__(self, f, inv_metric, step, rng):
        self.f = f
        self.inv_m = inv_metric
        self.sqrt_m = 1.0 / np.sqrt(inv_metric)
        self.step = step
        self.rng = rng
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False

    def set_metric(self, inv_metric):
        self.inv_m = inv_metric
        self.sqrt_m = 1.0 / np.sqrt(inv_metric)

    def momentum(self):
        return self.rng.standard_normal(self.inv_m.size) * self.sqrt_m

    def hamiltonian(self, lp, p):
        h = -lp + 0.5 * float(p @ (self.inv_m * p))
        return h if math.isfinite(h) else math.inf

    def step_once(self, theta, p, grad, eps):
        p = p + (0.5 * eps) * grad
        theta = theta + eps * (self.inv_m * p)
        lp, grad = self.f(theta)
        p = p + (0.5 * eps) * grad
        return theta, p, grad, lp

    # Returns (valid, edge, proposal, log_sum_weight, p_beg, ps_beg, p_end, ps_end, rho).
    def build(self, depth, edge, sign, H0):
        if depth == 0:
            theta, p, grad, lp = self.step_once(edge[0], edge[1], edge[2], sign * self.step)
            self.n_leapfrog += 1
            ps = self.inv_m * p
            h = -lp + 0.5 * float(p @ ps)
            if not math.isfinite(h):
                h = math.inf
            lw = H0 - h
            if -lw > MAX_DELTA_H:
                self.divergent = True
            self.sum_metro += 1.0 if lw > 0 else math.exp(lw)
            state = (theta, p, grad, lp)
            return not self.divergent, state, state, lw, p, ps, p, ps, p
        ok, edge, prop, lsw_i, p_beg, ps_beg, p_ie, ps_ie, rho_i = self.build(depth - 1, edge, sign, H0)
        if not ok:
            return False, edge, prop, lsw_i, p_beg, ps_beg, p_ie, ps_ie, rho_i
        ok, edge, prop_f, lsw_f, p_fb, ps_fb, p_end, ps_end, rho_f = self.build(depth - 1, edge, sign, H0)
        if not ok:
            return False, edge, prop, lsw_i, p_beg, ps_beg, p_end, ps_end, rho_i
        lsw = _nuts.logaddexp(lsw_i, lsw_f)
        if self.rng.uniform() < math.exp(lsw_f - lsw):
            prop = prop_f
        rho = rho_i + rho_f
        persist = (
            _no_uturn(ps_beg, ps_end, rho)
            and _no_uturn(ps_beg, ps_fb, rho_i + p_fb)
            and _no_uturn(ps_ie, ps_end, rho_f + p_ie)
        )
        return persist, edge, prop, lsw, p_beg, ps_beg, p_end, ps_end, rho

    def transition(self, theta, lp, grad, max_depth):
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False
        p0 = self.momentum()
        H0 = self.hamiltonian(lp, p0)
        start = (theta, p0, grad, lp)
        left = right = start
        ps0 = self.inv_m * p0
        p_l = p_r = p0
        ps_l = ps_r = ps0
        rho = p0.copy()
        lsw = 0.0
        sample = start
        depth = 0
        while depth < max_depth:
            forward = self.rng.uniform() > 0.5
            edge = right if forward else left
            ok, edge, prop, lsw_s, p_sb, ps_sb, p_se, ps_se, rho_s = self.build(depth, edge, 1.0 if forward else -1.0, H0)
            if not ok:
                break
            depth += 1
            if lsw_s > lsw or self.rng.uniform() < math.exp(lsw_s - lsw):
                sample = prop
            lsw = _nuts.logaddexp(lsw, lsw_s)
            rho_new = rho + rho_s
            if forward:
                # old tree: far end = left, adjacent end = right
                persist = (
                    _no_uturn(ps_l, ps_se, rho_new)
                    and _no_uturn(ps_l, ps_sb, rho + p_sb)
                    and _no_uturn(ps_r, ps_se, rho_s + p_r)
                )
                right, p_r, ps_r = edge, p_se, ps_se
            else:
                persist = (
                    _no_uturn(ps_se, ps_r, rho_new)
                    and _no_uturn(ps_sb, ps_r, rho + p_sb)
                    and _no_uturn(ps_se, ps_l, rho_s + p_l)
                )
                left, p_l, ps_l = edge, p_se, ps_se
            rho = rho_new
            if not persist:
                break
        stats = TransitionStats(
            accept_stat=self.sum_metro / max(self.n_leapfrog, 1),
            depth=depth, n_leapfrog=self.n_leapfrog, divergent=self.divergent,
        )
        theta, _, grad, lp = sample
        return theta, lp, grad, stats

    def init_stepsize(self, theta, lp, grad):
        """Double or halve the step until one-step acceptance crosses 0.8."""
        log08 = math.log(0.8)
        direction = 0
        for _ in range(100):
            p = self.momentum()
            H0 = self.hamiltonian(lp, p)
            _, p1, _, lp1 = self.step_once(theta, p, grad, self.step)
            dH = H0 - self.hamiltonian(lp1, p1)
            if direction == 0:
                direction = 1 if dH > log08 else -1
            elif (direction == 1 and not dH > log08) or (direction == -1 and not dH < log08):
                break
            self.step = self.step * 2.0 if direction == 1 else self.step * 0.5
            if self.step > 1e7 or self.step < 1e-300:
                raise RuntimeError("step size initialisation failed; posterior may be improper")
        return self.step


def _no_uturn(ps_minus, ps_plus, rho) -> bool:
    return float(ps_plus @ rho) > 0.0 and float(ps_minus @ rho) > 0.0


# -- chains --------------------------------------------------------------


@dataclass
class ChainResult:
    chain_id: int
    theta: np.ndarray  # (samples, D) unconstrained
    meta: np.ndarray  # (samples, len(META_NAMES))
    step_size: float
    inv_metric: np.ndarray
    warmup_divergences: int
    init: np.ndarray


def nuts_chain(
    target, config: SamplerConfig, seed: int | None = None, chain_id: int = 0, init=None, engine: str = "auto"
) -> ChainResult:
    """Run warmup and sampling for one chain.

    The chain is a pure function of ``(target, config, seed, chain_id,
    init, engine)``.  ``engine="auto"`` uses the compiled engine when the
    target exposes ``kernel_args`` (the packed arrays of
    :class:`~mlits.posterior.Model`) and the Python one otherwise; both
    implement the same algorithm with the same random-number order.
    """
    if engine not in ("auto", "python", "numba"):
        raise ValueError(f"unknown engine {engine!r}")
    seed = config.seed if seed is None else seed
    rng = chain_rng(seed, chain_id)
    f = target.logp_grad_fast if hasattr(target, "logp_grad_fast") else target.logp_grad
    theta = np.asarray(init, dtype=float).copy() if init is not None else target.initial_point(rng)
    lp, grad = f(theta)
    if not math.isfinite(lp):
        raise RuntimeError("initial point has non-finite log density")
    init_theta = theta.copy()
    kargs = getattr(target, "kernel_args", None)
    if engine == "numba" and kargs is None:
        raise ValueError("target has no compiled kernel")
    if kargs is not None and engine != "python":
        try:
            draws, meta, step, inv_m, warm_div = _nuts.chain(
                theta, config.warmup, config.samples, config.target_accept, config.max_depth, rng, kargs
            )
        except ValueError as err:
            raise RuntimeError(f"{err}; posterior may be improper") from None
        return ChainResult(chain_id, draws, meta, float(step), inv_m, int(warm_div), init_theta)
    D = theta.size
    integ = _Integrator(f, np.ones(D), 1.0, rng)
    integ.init_stepsize(theta, lp, grad)
    da = DualAveraging(config.target_accept)
    da.restart(math.log(10.0 * integ.step))
    windows = WindowSchedule(config.warmup)
    est = Welford(D)
    warm_div = 0
    for i in range(config.warmup):
        theta, lp, grad, st = integ.transition(theta, lp, grad, config.max_depth)
        warm_div += st.divergent
        integ.step = da.update(st.accept_stat)
        if windows.in_window(i):
            est.add(theta)
        if windows.is_window_end(i):
            integ.set_metric(est.regularized_variance())
            est = Welford(D)
            integ.init_stepsize(theta, lp, grad)
            da.restart(math.log(10.0 * integ.step))
    integ.step = da.final()

    draws = np.empty((config.samples, D))
    meta = np.empty((config.samples, len(META_NAMES)))
    for s in range(config.samples):
        theta, lp, grad, st = integ.transition(theta, lp, grad, config.max_depth)
        draws[s] = theta
        meta[s] = (lp, st.accept_stat, integ.step, st.depth, st.n_leapfrog, float(st.divergent))
    return ChainResult(chain_id, draws, meta, integ.step, integ.inv_m.copy(), warm_div, init_theta)


# -- draws ---------------------------------------------------------------


@dataclass
class Draws:
    """Post-warmup draws on the constrained (output) scale.

    ``values`` has shape ``(chains, samples, K)`` with columns named by
    ``names``; ``meta`` holds the per-draw sampler statistics listed in
    :data:`META_NAMES`.
    """

    values: np.ndarray
    names: list[str]
    meta: np.ndarray
    step_size: np.ndarray = field(default_factory=lambda: np.zeros(0))
    warmup_divergences: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    max_depth: int = 10
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        """``(chains, samples)`` array of one scalar."""
        if name in self._index:
            return self.values[:, :, self._index[name]]
        if name in META_NAMES:
            return self.meta[:, :, META_NAMES.index(name)]
        raise KeyError(name)

    def block(self, prefix: str) -> tuple[list[str], np.ndarray]:
        """All columns named ``prefix[...]``, as ``(names, (chains, samples, k))``."""
        idx = [i for i, n in enumerate(self.names) if n == prefix or n.startswith(prefix + "[")]
        return [self.names[i] for i in idx], self.values[:, :, idx]

    def flat(self) -> np.ndarray:
        """``(chains * samples, K)`` with chains stacked in order."""
        return self.values.reshape(-1, self.values.shape[2])

    @property
    def n_divergent(self) -> int:
        return int(self.column("divergent__").sum())

    @property
    def n_max_depth(self) -> int:
        return int((self.column("treedepth__") >= self.max_depth).sum())

    def to_csv(self, path) -> None:
        """Long format ``chain,draw,name,value`` including sampler meta."""
        names = list(self.names) + list(META_NAMES)
        C, S, _ = self.values.shape
        with open(path, "w", newline="") as fh:
            fh.write("chain,draw,name,value\n")
            for c in range(C):
                rows = np.concatenate([self.values[c], self.meta[c]], axis=1)
                for s in range(S):
                    prefix = f"{c},{s},"
                    fh.write("".join(f'{prefix}"{n}",{format(float(v), ".17g")}\n' for n, v in zip(names, rows[s])))

    @classmethod
    def from_csv(cls, path, max_depth: int = 10) -> "Draws":
        import csv

        cells: dict[tuple[int, int], dict[str, float]] = {}
        order: list[str] = []
        seen: set[str] = set()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["chain", "draw", "name", "value"]:
                raise ValueError(f"{path}: expected header chain,draw,name,value")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 fields")
                c, s, name, v = int(row[0]), int(row[1]), row[2], float(row[3])
                cells.setdefault((c, s), {})[name] = v
                if name not in seen:
                    seen.add(name)
                    order.append(name)
        C = 1 + max(k[0] for k in cells)
        S = 1 + max(k[1] for k in cells)
        names = [n for n in order if n not in META_NAMES]
        values = np.full((C, S, len(names)), np.nan)
        meta = np.zeros((C, S, len(META_NAMES)))
        for (c, s), d in cells.items():
            values[c, s] = [d[n] for n in names]
            meta[c, s] = [d.get(n, 0.0) for n in META_NAMES]
        if np.isnan(values).any():
            raise ValueError(f"{path}: incomplete draws grid")
        return cls(values, names, meta, max_depth=max_depth)


# -- driver --------------------------------------------------------------

_WORKER_TARGET = None


def _run_chain(args):
    config, seed, chain_id, init, engine = args
    return nuts_chain(_WORKER_TARGET, config, seed, chain_id, init, engine)


def default_threads() -> int:
    n = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    return max(1, n)


def run_chains(target, config: SamplerConfig, threads: int = 1, inits=None, engine: str = "auto") -> list[ChainResult]:
    """Run all chains, in worker processes when ``threads > 1``.

    Chain results do not depend on ``threads``: every chain owns its
    seeded stream and nothing else is shared.
    """
    jobs = [(config, config.seed, k, None if inits is None else inits[k], engine) for k in range(config.chains)]
    threads = max(1, min(int(threads), config.chains))
    if threads == 1:
        return [nuts_chain(target, *job) for job in jobs]
    global _WORKER_TARGET
    _WORKER_TARGET = target
    try:
        with mp.get_context("fork").Pool(threads) as pool:
            return pool.map(_run_chain, jobs, chunksize=1)
    finally:
        _WORKER_TARGET = None


def sample(target, config: SamplerConfig, threads: int = 1, inits=None, engine: str = "auto") -> Draws:
    """Run NUTS on ``target`` and return constrained draws."""
    chains = run_chains(target, config, threads, inits, engine)
    names = target.output_names()
    values = np.stack([np.array([target.output_vector(th) for th in ch.theta]) for ch in chains])
    meta = np.stack([ch.meta for ch in chains])
    draws = Draws(
        values, names, meta,
        step_size=np.array([ch.step_size for ch in chains]),
        warmup_divergences=np.array([ch.warmup_divergences for ch in chains]),
        max_depth=config.max_depth,
    )
    if draws.n_divergent > DIVERGENCE_WARN_FRACTION * draws.n_chains * draws.n_samples:
        draws.warnings.append("divergences_gt_10pct")
    return draws
