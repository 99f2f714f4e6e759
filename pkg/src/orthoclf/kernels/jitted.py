"""Numba lane of the hot kernels. Mirrors ``reference.py`` exactly.

All kernels are single-threaded @njit: parallel reductions would reorder
accumulation and break run-to-run determinism, which the harness promises.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def prelu_fwd(x, slopes):
    out = np.empty_like(x)
    flat = x.reshape(-1, x.shape[-1])
    oflat = out.reshape(-1, x.shape[-1])
    for i in range(flat.shape[0]):
        for c in range(flat.shape[1]):
            v = flat[i, c]
            oflat[i, c] = v if v >= 0.0 else v * slopes[c]
    return out


@njit(cache=True)
def prelu_bwd(x, slopes, gout):
    gx = np.empty_like(x)
    gs = np.zeros(x.shape[-1])
    xf = x.reshape(-1, x.shape[-1])
    gf = gout.reshape(-1, x.shape[-1])
    gxf = gx.reshape(-1, x.shape[-1])
    for i in range(xf.shape[0]):
        for c in range(xf.shape[1]):
            v = xf[i, c]
            g = gf[i, c]
            if v >= 0.0:
                gxf[i, c] = g
            else:
                gxf[i, c] = g * slopes[c]
                gs[c] += g * v
    return gx, gs


@njit(cache=True)
def sgd_update(param, grad, vel, lr, momentum):
    p = param.reshape(-1)
    g = grad.reshape(-1)
    v = vel.reshape(-1)
    for i in range(p.size):
        v[i] = momentum * v[i] + g[i]
        p[i] -= lr * v[i]


@njit(cache=True)
def linf_step(x_adv, grad, x0, step, eps):
    out = np.empty_like(x_adv)
    xa = x_adv.reshape(-1)
    g = grad.reshape(-1)
    x = x0.reshape(-1)
    o = out.reshape(-1)
    for i in range(xa.size):
        s = 0.0
        if g[i] > 0.0:
            s = 1.0
        elif g[i] < 0.0:
            s = -1.0
        v = xa[i] + step * s
        lo = max(x[i] - eps, 0.0)
        hi = min(x[i] + eps, 1.0)
        o[i] = min(max(v, lo), hi)
    return out


@njit(cache=True)
def l1_project_rows(delta, eps):
    out = delta.copy()
    n, d = delta.shape
    for i in range(n):
        total = 0.0
        for j in range(d):
            total += abs(delta[i, j])
        if total <= eps:
            continue
        u = np.sort(np.abs(delta[i]))[::-1]
        css = 0.0
        rho = -1
        theta = 0.0
        for j in range(d):
            css += u[j]
            if u[j] * (j + 1) > css - eps:
                rho = j
                theta = (css - eps) / (j + 1.0)
        for j in range(d):
            a = abs(delta[i, j]) - theta
            if a < 0.0:
                a = 0.0
            out[i, j] = a if delta[i, j] >= 0.0 else -a
    return out


@njit(cache=True)
def topq_sign_step(delta, grad, step, q):
    n, d = grad.shape
    k = int(np.ceil(q * d))
    if k < 1:
        k = 1
    out = delta.copy()
    for i in range(n):
        a = np.abs(grad[i])
        thr = np.partition(a, d - k)[d - k]
        for j in range(d):
            if abs(grad[i, j]) >= thr:
                s = 0.0
                if grad[i, j] > 0.0:
                    s = 1.0
                elif grad[i, j] < 0.0:
                    s = -1.0
                out[i, j] = delta[i, j] + step * s
    return out
