"""Fused log posterior + gradient kernel compiled with numba.

Mirrors ``Model._logp_grad_reference`` term for term; the two are
checked against each other and against finite differences in the tests.
Integer and real settings travel in two small arrays whose layout is
fixed by :func:`pack` in ``posterior.py``.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)
LOG_2_OVER_PI = math.log(2.0 / math.pi)
T3_CONST = math.lgamma(2.0) - math.lgamma(1.5) - 0.5 * math.log(3.0 * math.pi)

# integer settings
I_T, I_U, I_TINT, I_NOBS, I_NPO, I_P, I_H1, I_NB, I_NFAC = range(9)
I_FAM, I_VAR1, I_HS, I_OD, I_NC, I_LIT, I_XIFREE = range(9, 16)
I_OBETA, I_OZ, I_OSIG, I_OSIG0, I_OA, I_OALPHA, I_OPSI, I_OXI, I_OLAM, I_OEPS, I_OSEPS, I_OTAU, I_OELL = range(16, 29)
I_CENTER = 29
N_INT = 30
# real settings
F_C, F_LLOC, F_LSCALE, F_LNORM, F_ODSCALE, F_SLAB, F_XIFIX, F_LLCONST = range(8)
N_FLOAT = 8


@njit(cache=True, error_model="numpy")
def _log1m_tanh2(x):
    ax = abs(x)
    return 2.0 * (LOG_2 - ax - math.log1p(math.exp(-2.0 * ax)))


@njit(cache=True, error_model="numpy")
def logp_grad_kernel(theta, iv, fv, X, y, size, offset, otime, ounits, Epost, bscale, w, w0, ufac, bstart, bdim, Pm, logdet, Minv, Wlev, xbar):
    T = iv[I_T]
    U = iv[I_U]
    Tint = iv[I_TINT]
    nobs = iv[I_NOBS]
    npo = iv[I_NPO]
    P = iv[I_P]
    H1 = iv[I_H1]
    nb = iv[I_NB]
    nfac = iv[I_NFAC]
    fam = iv[I_FAM]
    var1 = iv[I_VAR1] != 0
    hs = iv[I_HS] != 0
    od = iv[I_OD] != 0
    nc = iv[I_NC] != 0
    lit = iv[I_LIT] != 0
    xifree = iv[I_XIFREE] != 0
    center = iv[I_CENTER] != 0
    o_beta = iv[I_OBETA]
    o_z = iv[I_OZ]
    o_sig = iv[I_OSIG]
    o_sig0 = iv[I_OSIG0]
    o_a = iv[I_OA]
    o_alpha = iv[I_OALPHA]
    o_psi = iv[I_OPSI]
    o_xi = iv[I_OXI]
    o_lam = iv[I_OLAM]
    o_eps = iv[I_OEPS]
    o_seps = iv[I_OSEPS]
    o_tau = iv[I_OTAU]
    o_ell = iv[I_OELL]
    c = fv[F_C]
    lloc = fv[F_LLOC]
    lscale = fv[F_LSCALE]
    lnorm = fv[F_LNORM]
    odscale = fv[F_ODSCALE]
    slab = fv[F_SLAB]
    xifix = fv[F_XIFIX]

    D = theta.size
    grad = np.zeros(D)
    val = 0.0
    n_post = T - Tint

    # ---- constrained scalars -------------------------------------------
    sigma = np.empty(U)
    sigma0 = np.empty(U)
    a = np.ones(U)
    for u in range(U):
        sigma[u] = math.exp(theta[o_sig + u])
        sigma0[u] = math.exp(theta[o_sig0 + u])
        val += theta[o_sig + u] + theta[o_sig0 + u]
        if var1:
            a[u] = math.tanh(theta[o_a + u])
    psi = math.exp(theta[o_psi])
    val += theta[o_psi]
    xi = np.ones(nfac)
    for j in range(1, nfac):
        if xifree:
            xi[j] = math.exp(theta[o_xi + j - 1])
            val += theta[o_xi + j - 1]
        else:
            xi[j] = xifix
    lam = np.empty((nfac, nb))
    for j in range(nfac):
        for b in range(nb):
            lam[j, b] = math.exp(theta[o_lam + j * nb + b])
            val += theta[o_lam + j * nb + b]
    kappa = (psi + c) * (psi + c)

    # ---- latent states ---------------------------------------------------
    gamma = np.empty((T, U))
    for u in range(U):
        g = sigma0[u] * theta[o_z + u]
        gamma[0, u] = g
        for t in range(1, T):
            g = a[u] * g + sigma[u] * theta[o_z + t * U + u]
            gamma[t, u] = g

    # centred intercept: theta holds the data-level mean, not beta_0
    beta = np.empty(P)
    for p in range(P):
        beta[p] = theta[o_beta + p]
    if center:
        shift = 0.0
        for p in range(1, P):
            shift += xbar[p] * beta[p]
        for t in range(T):
            for u in range(U):
                shift += Wlev[t, u] * gamma[t, u]
        beta[0] -= shift

    # ---- loadings --------------------------------------------------------
    alpha = np.empty((U, H1))
    prec0 = np.empty(U)
    qb = np.empty((U, nb))
    for u in range(U):
        xu = xi[ufac[u]]
        prec0[u] = kappa * xu * xu if lit else kappa * xu
        for b in range(nb):
            qb[u, b] = kappa * xu * lam[ufac[u], b]
    if nc:
        for u in range(U):
            alpha[u, 0] = theta[o_alpha + u * H1] / math.sqrt(prec0[u])
            for b in range(nb):
                s = 1.0 / math.sqrt(qb[u, b])
                st = bstart[b]
                d = bdim[b]
                for k in range(d):
                    acc = 0.0
                    for l in range(d):
                        acc += theta[o_alpha + u * H1 + st + l] * Minv[b, k, l]
                    alpha[u, st + k] = s * acc
    else:
        for u in range(U):
            for h in range(H1):
                alpha[u, h] = theta[o_alpha + u * H1 + h]

    L = gamma.copy()
    for t in range(n_post):
        for u in range(U):
            acc = 0.0
            for h in range(H1):
                acc += Epost[t, h] * alpha[u, h]
            L[Tint + t, u] += acc

    # ---- likelihood ------------------------------------------------------
    dL = np.zeros((T, U))
    ll = 0.0
    for o in range(nobs):
        eta = offset[o]
        for p in range(P):
            eta += X[o, p] * beta[p]
        t = otime[o]
        for k in range(npo):
            eta += L[t, ounits[o, k]]
        if od:
            eta += theta[o_eps + o]
        if fam == 0:
            mu = math.exp(eta) if eta < 700.0 else math.inf
            ll += y[o] * eta - mu
            r = y[o] - mu
        else:
            if eta > 0:
                sp = eta + math.log1p(math.exp(-eta))
                ex = 1.0 / (1.0 + math.exp(-eta))
            else:
                e = math.exp(eta)
                sp = math.log1p(e)
                ex = e / (1.0 + e)
            ll += y[o] * eta - size[o] * sp
            r = y[o] - size[o] * ex
        for p in range(P):
            grad[o_beta + p] += X[o, p] * r
        for k in range(npo):
            dL[t, ounits[o, k]] += r
        if od:
            grad[o_eps + o] += r
    val += ll + fv[F_LLCONST]

    dalpha = np.zeros((U, H1))
    for t in range(n_post):
        for u in range(U):
            g = dL[Tint + t, u]
            for h in range(H1):
                dalpha[u, h] += g * Epost[t, h]

    # ---- intervention prior ---------------------------------------------
    g_logkappa = 0.0
    g_logxi = np.zeros(nfac)
    g_loglam = np.zeros((nfac, nb))
    xi_pow = 2.0 if lit else 1.0
    if nc:
        for u in range(U):
            j = ufac[u]
            r0 = theta[o_alpha + u * H1]
            val += -0.5 * r0 * r0 - 0.5 * LOG_2PI
            grad[o_alpha + u * H1] += -r0 + dalpha[u, 0] / math.sqrt(prec0[u])
            gl0 = alpha[u, 0] * dalpha[u, 0]
            g_logkappa += -0.5 * gl0
            g_logxi[j] += -0.5 * xi_pow * gl0
            for b in range(nb):
                s = 1.0 / math.sqrt(qb[u, b])
                st = bstart[b]
                d = bdim[b]
                glog = 0.0
                for l in range(d):
                    rl = theta[o_alpha + u * H1 + st + l]
                    val += -0.5 * rl * rl - 0.5 * LOG_2PI
                    acc = 0.0
                    for k in range(d):
                        acc += dalpha[u, st + k] * Minv[b, k, l]
                    grad[o_alpha + u * H1 + st + l] += -rl + s * acc
                for k in range(d):
                    glog += alpha[u, st + k] * dalpha[u, st + k]
                g_logkappa += -0.5 * glog
                g_logxi[j] += -0.5 * glog
                g_loglam[j, b] += -0.5 * glog
    else:
        for u in range(U):
            j = ufac[u]
            a0 = alpha[u, 0]
            val += -0.5 * LOG_2PI + 0.5 * math.log(prec0[u]) - 0.5 * prec0[u] * a0 * a0
            grad[o_alpha + u * H1] += dalpha[u, 0] - prec0[u] * a0
            common = 0.5 - 0.5 * prec0[u] * a0 * a0
            g_logkappa += common
            g_logxi[j] += xi_pow * common
            for b in range(nb):
                st = bstart[b]
                d = bdim[b]
                quad = 0.0
                for k in range(d):
                    acc = 0.0
                    for l in range(d):
                        acc += Pm[b, k, l] * alpha[u, st + l]
                    quad += alpha[u, st + k] * acc
                    grad[o_alpha + u * H1 + st + k] += dalpha[u, st + k] - qb[u, b] * acc
                val += -0.5 * d * LOG_2PI + 0.5 * (d * math.log(qb[u, b]) + logdet[b]) - 0.5 * qb[u, b] * quad
                common = 0.5 * d - 0.5 * qb[u, b] * quad
                g_logkappa += common
                g_logxi[j] += common
                g_loglam[j, b] += common
    # hyperpriors, chained to log scale (+1 Jacobian)
    val += LOG_2_OVER_PI - math.log1p(psi * psi)
    grad[o_psi] = (g_logkappa * 2.0 / (psi + c) - 2.0 * psi / (1.0 + psi * psi)) * psi + 1.0
    if xifree:
        for j in range(1, nfac):
            val += -xi[j]
            grad[o_xi + j - 1] = g_logxi[j] - xi[j] + 1.0
    for j in range(nfac):
        for b in range(nb):
            zz = (lam[j, b] - lloc) / lscale
            val += -0.5 * zz * zz - math.log(lscale) - 0.5 * LOG_2PI - lnorm
            grad[o_lam + j * nb + b] = g_loglam[j, b] - zz / lscale * lam[j, b] + 1.0

    # ---- secular prior ---------------------------------------------------
    for p in range(P):
        bp = beta[p]
        s = bscale[p]
        val += T3_CONST - math.log(s) - 2.0 * math.log1p(bp * bp / (3.0 * s * s))
        grad[o_beta + p] += -4.0 * bp / (3.0 * s * s + bp * bp)
    if center:
        gb = grad[o_beta]
        for p in range(1, P):
            grad[o_beta + p] -= gb * xbar[p]
        for t in range(T):
            for u in range(U):
                dL[t, u] -= gb * Wlev[t, u]

    # ---- latent backprop and prior --------------------------------------
    for u in range(U):
        lam_t = 0.0
        dsig = 0.0
        da = 0.0
        for t in range(T - 1, 0, -1):
            lam_t = dL[t, u] + a[u] * lam_t
            zt = theta[o_z + t * U + u]
            grad[o_z + t * U + u] += sigma[u] * lam_t - zt
            val += -0.5 * zt * zt - 0.5 * LOG_2PI
            dsig += zt * lam_t
            da += lam_t * gamma[t - 1, u]
        lam_t = dL[0, u] + a[u] * lam_t
        z0 = theta[o_z + u]
        grad[o_z + u] += sigma0[u] * lam_t - z0
        val += -0.5 * z0 * z0 - 0.5 * LOG_2PI
        dsig0 = z0 * lam_t

        s0 = sigma0[u]
        val += LOG_2 - 0.5 * LOG_2PI - math.log(w0[u]) - 0.5 * (s0 / w0[u]) ** 2
        grad[o_sig0 + u] = (dsig0 - s0 / (w0[u] * w0[u])) * s0 + 1.0

        s = sigma[u]
        if hs:
            j = ufac[u]
            tau = math.exp(theta[o_tau + j])
            ell = math.exp(theta[o_ell + u])
            q = 1.0 / (tau * ell) ** 2
            pp = q + 1.0 / (slab * slab)
            val += LOG_2 - 0.5 * LOG_2PI + 0.5 * math.log(pp) - 0.5 * s * s * pp
            grad[o_sig + u] = (dsig - s * pp) * s + 1.0
            dlog = (0.5 / pp - 0.5 * s * s) * (-2.0 * q)
            val += LOG_2_OVER_PI - math.log1p(ell * ell) + theta[o_ell + u]
            grad[o_ell + u] = dlog - 2.0 * ell * ell / (1.0 + ell * ell) + 1.0
            grad[o_tau + j] += dlog
        else:
            val += LOG_2 - 0.5 * LOG_2PI - math.log(w[u]) - 0.5 * (s / w[u]) ** 2
            grad[o_sig + u] = (dsig - s / (w[u] * w[u])) * s + 1.0

        if var1:
            at = theta[o_a + u]
            # prior on tanh scale plus its Jacobian leaves N(a_tilde | 0, 1)
            val += -0.5 * at * at - 0.5 * LOG_2PI
            grad[o_a + u] = da * (1.0 - a[u] * a[u]) - at
    if hs:
        for j in range(nfac):
            lt = theta[o_tau + j]
            tau = math.exp(lt)
            # factor-level w is shared by every unit of the factor
            wj = 1.0
            for u in range(U):
                if ufac[u] == j:
                    wj = w[u]
                    break
            val += LOG_2_OVER_PI - math.log(wj) - math.log1p((tau / wj) ** 2) + lt
            grad[o_tau + j] += -2.0 * tau * tau / (wj * wj + tau * tau) + 1.0

    # ---- overdispersion --------------------------------------------------
    if od:
        lse = theta[o_seps]
        se = math.exp(lse)
        ss = 0.0
        for o in range(nobs):
            e = theta[o_eps + o]
            ss += e * e
            grad[o_eps + o] += -e / (se * se)
        val += -nobs * (0.5 * LOG_2PI + lse) - 0.5 * ss / (se * se)
        val += LOG_2 - 0.5 * LOG_2PI - math.log(odscale) - 0.5 * (se / odscale) ** 2 + lse
        grad[o_seps] = (-nobs / se + ss / (se * se * se) - se / (odscale * odscale)) * se + 1.0

    if not math.isfinite(val):
        return -math.inf, np.zeros(D)
    for k in range(D):
        if not math.isfinite(grad[k]):
            return -math.inf, np.zeros(D)
    return val, grad
