"""Compiled NUTS chain for the model log density.

Line-for-line the algorithm of :mod:`mlits.sampler` (same random-number
consumption order, same floating-point operations), calling
:func:`mlits._kernel.logp_grad_kernel` directly so the compiled code is
cached on disk after the first run.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from ._kernel import logp_grad_kernel

MAX_DELTA_H = 1000.0


@njit(cache=True)
def logaddexp(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = a if a > b else b
    return m + math.log1p(math.exp(-abs(a - b)))


@njit(cache=True)
def no_uturn(ps_minus, ps_plus, rho):
    return np.dot(ps_plus, rho) > 0.0 and np.dot(ps_minus, rho) > 0.0


@njit(cache=True)
def window_ends(n_warmup, init_buffer=75, term_buffer=50, base_window=25):
    """Boolean mask over warmup iterations marking metric-window ends."""
    out = np.zeros(n_warmup, dtype=np.bool_)
    last = n_warmup - term_buffer - 1
    size = base_window
    nxt = init_buffer + base_window - 1
    for i in range(n_warmup):
        if i == nxt:
            out[i] = True
            if nxt != last:
                size *= 2
                nxt = i + size
                if nxt != last and nxt + 2 * size > last:
                    nxt = last
    return out


@njit(cache=True)
def leaf(theta, p, grad, eps, inv_m, args):
    p = p + (0.5 * eps) * grad
    theta = theta + eps * (inv_m * p)
    lp, grad = logp_grad_kernel(theta, *args)
    p = p + (0.5 * eps) * grad
    return theta, p, grad, lp


@njit(cache=True)
def hamiltonian(lp, p, inv_m):
    h = -lp + 0.5 * np.dot(p, inv_m * p)
    return h if math.isfinite(h) else math.inf


@njit(cache=True)
def build(depth, th, p, g, lp, sign, eps, inv_m, H0, rng, stats, args):
    # stats: [n_leapfrog, sum_metro_prob, divergent]
    if depth == 0:
        th, p, g, lp = leaf(th, p, g, sign * eps, inv_m, args)
        stats[0] += 1.0
        ps = inv_m * p
        h = -lp + 0.5 * np.dot(p, ps)
        if not math.isfinite(h):
            h = math.inf
        lw = H0 - h
        if -lw > MAX_DELTA_H:
            stats[2] = 1.0
        stats[1] += 1.0 if lw > 0 else math.exp(lw)
        return stats[2] == 0.0, th, p, g, lp, th, g, lp, lw, p, ps, p, ps, p.copy()
    ok, th, p, g, lp, pth, pg, plp, lsw_i, p_beg, ps_beg, p_ie, ps_ie, rho_i = build(
        depth - 1, th, p, g, lp, sign, eps, inv_m, H0, rng, stats, args
    )
    if not ok:
        return False, th, p, g, lp, pth, pg, plp, lsw_i, p_beg, ps_beg, p_ie, ps_ie, rho_i
    ok, th, p, g, lp, fth, fg, flp, lsw_f, p_fb, ps_fb, p_end, ps_end, rho_f = build(
        depth - 1, th, p, g, lp, sign, eps, inv_m, H0, rng, stats, args
    )
    if not ok:
        return False, th, p, g, lp, pth, pg, plp, lsw_i, p_beg, ps_beg, p_end, ps_end, rho_i
    lsw = logaddexp(lsw_i, lsw_f)
    if rng.uniform() < math.exp(lsw_f - lsw):
        pth, pg, plp = fth, fg, flp
    rho = rho_i + rho_f
    persist = (
        no_uturn(ps_beg, ps_end, rho)
        and no_uturn(ps_beg, ps_fb, rho_i + p_fb)
        and no_uturn(ps_ie, ps_end, rho_f + p_ie)
    )
    return persist, th, p, g, lp, pth, pg, plp, lsw, p_beg, ps_beg, p_end, ps_end, rho


@njit(cache=True)
def transition(theta, lp, grad, eps, inv_m, sqrt_m, max_depth, rng, args):
    stats = np.zeros(3)
    p0 = rng.standard_normal(theta.size) * sqrt_m
    H0 = hamiltonian(lp, p0, inv_m)
    l_th, l_p, l_g, l_lp = theta, p0, grad, lp
    r_th, r_p, r_g, r_lp = theta, p0, grad, lp
    ps0 = inv_m * p0
    p_l, p_r, ps_l, ps_r = p0, p0, ps0, ps0
    rho = p0.copy()
    lsw = 0.0
    s_th, s_g, s_lp = theta, grad, lp
    depth = 0
    while depth < max_depth:
        forward = rng.uniform() > 0.5
        if forward:
            ok, e_th, e_p, e_g, e_lp, pth, pg, plp, lsw_s, p_sb, ps_sb, p_se, ps_se, rho_s = build(
                depth, r_th, r_p, r_g, r_lp, 1.0, eps, inv_m, H0, rng, stats, args
            )
        else:
            ok, e_th, e_p, e_g, e_lp, pth, pg, plp, lsw_s, p_sb, ps_sb, p_se, ps_se, rho_s = build(
                depth, l_th, l_p, l_g, l_lp, -1.0, eps, inv_m, H0, rng, stats, args
            )
        if not ok:
            break
        depth += 1
        if lsw_s > lsw or rng.uniform() < math.exp(lsw_s - lsw):
            s_th, s_g, s_lp = pth, pg, plp
        lsw = logaddexp(lsw, lsw_s)
        rho_new = rho + rho_s
        if forward:
            persist = (
                no_uturn(ps_l, ps_se, rho_new)
                and no_uturn(ps_l, ps_sb, rho + p_sb)
                and no_uturn(ps_r, ps_se, rho_s + p_r)
            )
            r_th, r_p, r_g, r_lp = e_th, e_p, e_g, e_lp
            p_r, ps_r = p_se, ps_se
        else:
            persist = (
                no_uturn(ps_se, ps_r, rho_new)
                and no_uturn(ps_sb, ps_r, rho + p_sb)
                and no_uturn(ps_se, ps_l, rho_s + p_l)
            )
            l_th, l_p, l_g, l_lp = e_th, e_p, e_g, e_lp
            p_l, ps_l = p_se, ps_se
        rho = rho_new
        if not persist:
            break
    n = stats[0] if stats[0] > 0 else 1.0
    return s_th, s_lp, s_g, stats[1] / n, depth, stats[0], stats[2]


@njit(cache=True)
def init_stepsize(theta, lp, grad, eps, inv_m, sqrt_m, rng, args):
    log08 = math.log(0.8)
    direction = 0
    for _ in range(100):
        p = rng.standard_normal(theta.size) * sqrt_m
        H0 = hamiltonian(lp, p, inv_m)
        _, p1, _, lp1 = leaf(theta, p, grad, eps, inv_m, args)
        dH = H0 - hamiltonian(lp1, p1, inv_m)
        if direction == 0:
            direction = 1 if dH > log08 else -1
        elif (direction == 1 and not dH > log08) or (direction == -1 and not dH < log08):
            break
        eps = eps * 2.0 if direction == 1 else eps * 0.5
        if eps > 1e7 or eps < 1e-300:
            return -1.0
    return eps


@njit(cache=True)
def chain(theta, n_warmup, n_samples, delta, max_depth, rng, args):
    D = theta.size
    lp, grad = logp_grad_kernel(theta, *args)
    inv_m = np.ones(D)
    sqrt_m = np.ones(D)
    eps = init_stepsize(theta, lp, grad, 1.0, inv_m, sqrt_m, rng, args)
    if eps < 0:
        raise ValueError("step size initialisation failed")
    # dual averaging (gamma 0.05, t0 10, kappa 0.75)
    mu = math.log(10.0 * eps)
    counter, s_bar, x_bar = 0, 0.0, 0.0
    ends = window_ends(n_warmup)
    n_w, mean, m2 = 0, np.zeros(D), np.zeros(D)
    warm_div = 0
    for i in range(n_warmup):
        theta, lp, grad, acc, depth, nl, div = transition(theta, lp, grad, eps, inv_m, sqrt_m, max_depth, rng, args)
        warm_div += int(div)
        counter += 1
        a = acc if acc < 1.0 else 1.0
        eta = 1.0 / (counter + 10.0)
        s_bar = (1.0 - eta) * s_bar + eta * (delta - a)
        x = mu - s_bar * math.sqrt(counter) / 0.05
        x_eta = counter ** (-0.75)
        x_bar = (1.0 - x_eta) * x_bar + x_eta * x
        eps = math.exp(x)
        if 75 <= i < n_warmup - 50:
            n_w += 1
            d = theta - mean
            mean += d / n_w
            m2 += d * (theta - mean)
        if ends[i]:
            var = m2 / (n_w - 1.0)
            inv_m = (n_w / (n_w + 5.0)) * var + 1e-3 * (5.0 / (n_w + 5.0))
            sqrt_m = 1.0 / np.sqrt(inv_m)
            n_w, mean, m2 = 0, np.zeros(D), np.zeros(D)
            eps = init_stepsize(theta, lp, grad, eps, inv_m, sqrt_m, rng, args)
            if eps < 0:
                raise ValueError("step size initialisation failed")
            mu = math.log(10.0 * eps)
            counter, s_bar, x_bar = 0, 0.0, 0.0
    eps = math.exp(x_bar)
    draws = np.empty((n_samples, D))
    meta = np.empty((n_samples, 6))
    for s in range(n_samples):
        theta, lp, grad, acc, depth, nl, div = transition(theta, lp, grad, eps, inv_m, sqrt_m, max_depth, rng, args)
        draws[s] = theta
        meta[s, 0] = lp
        meta[s, 1] = acc
        meta[s, 2] = eps
        meta[s, 3] = depth
        meta[s, 4] = nl
        meta[s, 5] = div
    return draws, meta, eps, inv_m, warm_div


