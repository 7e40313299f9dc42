# Scalar numba kernels for the single-particle algebraic system.
#
# Unknowns are reduced to x = (I_app, phi_n, phi_p); every other algebraic
# quantity follows by substitution. Residuals:
#   r0 = 2 i0_p sinh(a eta_p) - J_p
#   r1 = 2 i0_n sinh(a eta_n) - J_n,   J_n = -I/S_n - J_sd
#   r2 = I (phi_p - phi_n) - P
# with a = F/(2RT). The packed parameter vector layout is fixed by the
# index constants below and by `pack_params` in model.py.

import math

import numpy as np
from numba import njit

D_N, D_P, R_N, R_P, K_N, K_P, CN_MAX, CP_MAX, C_E, S_N, S_P = range(11)
R_SEI, I0_SD, U_REF, M_SD, RHO_SD, KAPPA_SD, Q_MAX, TEMP, FARADAY, R_GAS = range(11, 21)
N_PRM = 21

# _aux output slots
A_I, A_PHIN, A_PHIP, A_CNS, A_CPS, A_JN, A_JP, A_JSD, A_I0N, A_I0P = range(10)
A_ETAN, A_ETAP, A_ETASD, A_THN, A_THP, A_RF, A_V, A_P = range(10, 18)
N_AUX = 18

OK, NONCONV, SATURATED = 0, 1, 2
_EXP_MAX = 700.0


@njit(cache=True)
def interp_slope(xs, ys, t):
    n = xs.shape[0]
    if t <= xs[0]:
        i = 0
    elif t >= xs[n - 1]:
        i = n - 2
    else:
        lo = 0
        hi = n - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if xs[mid] <= t:
                lo = mid
            else:
                hi = mid
        i = lo
    s = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
    return ys[i] + s * (t - xs[i]), s


@njit(cache=True)
def evaluate(x, cn, cp, delta, P, prm, unx, uny, upx, upy, r, sc, jac, want_jac):
    """Fill residuals `r`, scales `sc` and (optionally) the Jacobian. Returns validity."""
    I = x[0]
    phin = x[1]
    phip = x[2]
    F = prm[FARADAY]
    RT = prm[R_GAS] * prm[TEMP]
    a = 0.5 * F / RT
    b = F / RT
    Sn = prm[S_N]
    Sp = prm[S_P]
    cnmax = prm[CN_MAX]
    cpmax = prm[CP_MAX]
    ce = prm[C_E]
    Rf = prm[R_SEI] + delta / prm[KAPPA_SD]

    # positive electrode
    Jp = I / Sp
    kcp = prm[R_P] / (5.0 * prm[D_P] * F)
    cps = cp - Jp * kcp
    if not (cps > 0.0 and cps < cpmax):
        return False
    Up, dUp = interp_slope(upx, upy, cps / cpmax)
    sqp = math.sqrt((cpmax - cps) * cps * ce)
    i0p = F * prm[K_P] * sqp
    etap = phip - Up
    if abs(a * etap) > _EXP_MAX:
        return False
    shp = math.sinh(a * etap)
    r[0] = 2.0 * i0p * shp - Jp
    sc[0] = abs(Jp) + i0p

    # side reaction and negative electrode
    etasd = phin - prm[U_REF] + Rf * I / Sn
    if -b * etasd > _EXP_MAX:
        return False
    ex = math.exp(-b * etasd)
    Jsd = -prm[I0_SD] * ex
    Jn = -I / Sn - Jsd
    kcn = prm[R_N] / (5.0 * prm[D_N] * F)
    cns = cn - Jn * kcn
    if not (cns > 0.0 and cns < cnmax):
        return False
    Un, dUn = interp_slope(unx, uny, cns / cnmax)
    sqn = math.sqrt((cnmax - cns) * cns * ce)
    i0n = F * prm[K_N] * sqn
    etan = phin - Un + Rf * I / Sn
    if abs(a * etan) > _EXP_MAX:
        return False
    shn = math.sinh(a * etan)
    r[1] = 2.0 * i0n * shn - Jn
    sc[1] = abs(Jn) + abs(Jsd) + i0n

    V = phip - phin
    r[2] = I * V - P
    sc[2] = abs(P) + abs(I * V) + abs(V) * i0n * Sn

    if want_jac:
        chp = math.cosh(a * etap)
        chn = math.cosh(a * etan)
        dcps_dI = -kcp / Sp
        di0p_dc = F * prm[K_P] * ce * (cpmax - 2.0 * cps) / (2.0 * sqp)
        jac[0, 0] = (2.0 * di0p_dc * dcps_dI * shp
                     + 2.0 * i0p * a * chp * (-dUp * dcps_dI / cpmax) - 1.0 / Sp)
        jac[0, 1] = 0.0
        jac[0, 2] = 2.0 * i0p * a * chp

        dJsd_dphin = b * prm[I0_SD] * ex
        dJsd_dI = dJsd_dphin * Rf / Sn
        dJn_dI = -1.0 / Sn - dJsd_dI
        dJn_dphin = -dJsd_dphin
        dcns_dI = -kcn * dJn_dI
        dcns_dphin = -kcn * dJn_dphin
        di0n_dc = F * prm[K_N] * ce * (cnmax - 2.0 * cns) / (2.0 * sqn)
        detan_dI = -dUn * dcns_dI / cnmax + Rf / Sn
        detan_dphin = 1.0 - dUn * dcns_dphin / cnmax
        jac[1, 0] = 2.0 * di0n_dc * dcns_dI * shn + 2.0 * i0n * a * chn * detan_dI - dJn_dI
        jac[1, 1] = 2.0 * di0n_dc * dcns_dphin * shn + 2.0 * i0n * a * chn * detan_dphin - dJn_dphin
        jac[1, 2] = 0.0

        jac[2, 0] = V
        jac[2, 1] = -I
        jac[2, 2] = I
    return True


@njit(cache=True)
def aux(x, cn, cp, delta, P, prm, unx, uny, upx, upy, out):
    """Recover every algebraic quantity from the reduced unknowns."""
    I = x[0]
    phin = x[1]
    phip = x[2]
    F = prm[FARADAY]
    RT = prm[R_GAS] * prm[TEMP]
    Sn = prm[S_N]
    Sp = prm[S_P]
    Rf = prm[R_SEI] + delta / prm[KAPPA_SD]
    Jp = I / Sp
    cps = cp - Jp * prm[R_P] / (5.0 * prm[D_P] * F)
    thp = cps / prm[CP_MAX]
    Up, _ = interp_slope(upx, upy, thp)
    i0p = F * prm[K_P] * math.sqrt((prm[CP_MAX] - cps) * cps * prm[C_E])
    etasd = phin - prm[U_REF] + Rf * I / Sn
    Jsd = -prm[I0_SD] * math.exp(-F * etasd / RT)
    Jn = -I / Sn - Jsd
    cns = cn - Jn * prm[R_N] / (5.0 * prm[D_N] * F)
    thn = cns / prm[CN_MAX]
    Un, _ = interp_slope(unx, uny, thn)
    i0n = F * prm[K_N] * math.sqrt((prm[CN_MAX] - cns) * cns * prm[C_E])
    out[A_I] = I
    out[A_PHIN] = phin
    out[A_PHIP] = phip
    out[A_CNS] = cns
    out[A_CPS] = cps
    out[A_JN] = Jn
    out[A_JP] = Jp
    out[A_JSD] = Jsd
    out[A_I0N] = i0n
    out[A_I0P] = i0p
    out[A_ETAN] = phin - Un + Rf * I / Sn
    out[A_ETAP] = phip - Up
    out[A_ETASD] = etasd
    out[A_THN] = thn
    out[A_THP] = thp
    out[A_RF] = Rf
    out[A_V] = phip - phin
    out[A_P] = I * (phip - phin)


@njit(cache=True)
def _merit(r, sc):
    m = 0.0
    for i in range(3):
        v = abs(r[i]) / sc[i]
        if not (v <= m):  # also propagates NaN
            m = v
    return m


@njit(cache=True)
def _solve3(A, rhs, out):
    M = np.empty((3, 4))
    for i in range(3):
        for j in range(3):
            M[i, j] = A[i, j]
        M[i, 3] = rhs[i]
    for k in range(3):
        p = k
        for i in range(k + 1, 3):
            if abs(M[i, k]) > abs(M[p, k]):
                p = i
        if M[p, k] == 0.0:
            return False
        if p != k:
            for j in range(4):
                t = M[k, j]
                M[k, j] = M[p, j]
                M[p, j] = t
        for i in range(k + 1, 3):
            f = M[i, k] / M[k, k]
            for j in range(k, 4):
                M[i, j] -= f * M[k, j]
    for i in range(2, -1, -1):
        s = M[i, 3]
        for j in range(i + 1, 3):
            s -= M[i, j] * out[j]
        out[i] = s / M[i, i]
    return True


@njit(cache=True)
def open_circuit_guess(cn, cp, P, prm, unx, uny, upx, upy, x):
    Un, _ = interp_slope(unx, uny, cn / prm[CN_MAX])
    Up, _ = interp_slope(upx, upy, cp / prm[CP_MAX])
    x[0] = P / (Up - Un)
    x[1] = Un
    x[2] = Up


@njit(cache=True)
def newton(x, cn, cp, delta, P, prm, unx, uny, upx, upy, tol, maxit, max_halvings):
    """Damped Newton on the reduced system, in place on `x`.

    Returns (status, iterations, final scaled residual).
    """
    r = np.empty(3)
    sc = np.empty(3)
    jac = np.empty((3, 3))
    dx = np.empty(3)
    xt = np.empty(3)
    rt = np.empty(3)
    sct = np.empty(3)
    if not evaluate(x, cn, cp, delta, P, prm, unx, uny, upx, upy, r, sc, jac, True):
        return SATURATED, 0, np.inf
    m = _merit(r, sc)
    for it in range(maxit + 1):
        if m <= tol:
            # one polishing step; kept only if it lowers the residual
            if m > 0.0 and _solve3(jac, -r, dx):
                for i in range(3):
                    xt[i] = x[i] + dx[i]
                if evaluate(xt, cn, cp, delta, P, prm, unx, uny, upx, upy, rt, sct, jac, False):
                    mt = _merit(rt, sct)
                    if mt < m:
                        for i in range(3):
                            x[i] = xt[i]
                        m = mt
            return OK, it, m
        if it == maxit:
            break
        if not _solve3(jac, -r, dx):
            return NONCONV, it, m
        lam = 1.0
        accepted = False
        saw_invalid = False
        for _ in range(max_halvings + 1):
            for i in range(3):
                xt[i] = x[i] + lam * dx[i]
            if evaluate(xt, cn, cp, delta, P, prm, unx, uny, upx, upy, rt, sct, jac, False):
                mt = _merit(rt, sct)
                if mt < m:
                    accepted = True
                    break
            else:
                saw_invalid = True
            lam *= 0.5
        if not accepted:
            return (SATURATED if saw_invalid else NONCONV), it, m
        for i in range(3):
            x[i] = xt[i]
        evaluate(x, cn, cp, delta, P, prm, unx, uny, upx, upy, r, sc, jac, True)
        m = _merit(r, sc)
    return NONCONV, maxit, m


@njit(cache=True)
def simulate(state, Pcell, dt, prm, unx, uny, upx, upy, guard_lo, guard_hi,
             tol, maxit, max_halvings, curtail_fail, out):
    """Forward-Euler integration over len(Pcell) steps, mutating `state`.

    state = [c_n_avg, c_p_avg, delta_f, Cf]. `out` rows receive
    (P applied, I_app, V, c_n_avg after, Cf after, curtailed, max residual).
    curtailed is 1 for a guard cut and 2 when the set-point had no solution
    and `curtail_fail` replaced it by zero power.
    Returns (status, failing step or -1, max Newton iterations).
    """
    F = prm[FARADAY]
    x = np.empty(3)
    a = np.empty(N_AUX)
    have_prev = False
    vprev = 0.0
    itmax = 0
    for s in range(Pcell.shape[0]):
        cn = state[0]
        cp = state[1]
        delta = state[2]
        P = Pcell[s]
        curtailed = 0.0
        thn = cn / prm[CN_MAX]
        thp = cp / prm[CP_MAX]
        if (P > 0.0 and (thn >= guard_hi or thp <= 1.0 - guard_hi)) or \
                (P < 0.0 and (thn <= guard_lo or thp >= 1.0 - guard_lo)):
            P = 0.0
            curtailed = 1.0
        if have_prev:
            x[0] = P / vprev
        else:
            open_circuit_guess(cn, cp, P, prm, unx, uny, upx, upy, x)
        status, its, res = newton(x, cn, cp, delta, P, prm, unx, uny, upx, upy,
                                  tol, maxit, max_halvings)
        if status != OK and have_prev:
            open_circuit_guess(cn, cp, P, prm, unx, uny, upx, upy, x)
            status, its2, res = newton(x, cn, cp, delta, P, prm, unx, uny, upx, upy,
                                       tol, maxit, max_halvings)
            its += its2
        if status != OK and curtail_fail and P != 0.0:
            P = 0.0
            curtailed = 2.0
            open_circuit_guess(cn, cp, P, prm, unx, uny, upx, upy, x)
            status, its2, res = newton(x, cn, cp, delta, P, prm, unx, uny, upx, upy,
                                       tol, maxit, max_halvings)
            its += its2
        if status != OK:
            return status, s, itmax
        if its > itmax:
            itmax = its
        aux(x, cn, cp, delta, P, prm, unx, uny, upx, upy, a)
        state[0] = cn - 3.0 * a[A_JN] * dt / (prm[R_N] * F)
        state[1] = cp - 3.0 * a[A_JP] * dt / (prm[R_P] * F)
        state[2] = delta - a[A_JSD] * prm[M_SD] * dt / (prm[RHO_SD] * F)
        state[3] = state[3] + abs(a[A_JSD]) * prm[S_N] * dt / prm[Q_MAX]
        vprev = a[A_V]
        have_prev = True
        out[s, 0] = P
        out[s, 1] = a[A_I]
        out[s, 2] = a[A_V]
        out[s, 3] = state[0]
        out[s, 4] = state[3]
        out[s, 5] = curtailed
        out[s, 6] = res
    return OK, -1, itmax
