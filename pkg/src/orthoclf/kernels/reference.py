"""Pure-numpy lane of the hot kernels.

Each function here is the semantic reference for its numba twin in
``jitted.py``. Keep the two in lockstep: same formulas, same left-to-right
accumulation wherever the order reaches the result bits.
"""

import numpy as np


def prelu_fwd(x, slopes):
    """max(0,x) + slope*min(0,x) with one slope per trailing-axis channel.

    The x == 0 case takes the positive branch (value 0 either way; the
    matching backward uses gradient 1 there).
    """
    return np.where(x >= 0.0, x, x * slopes)


def prelu_bwd(x, slopes, gout):
    """Gradients of prelu_fwd: (d/dx, d/dslope).

    d/dx is 1 where x >= 0 and slope where x < 0; d/dslope accumulates
    gout * min(0, x) over all leading axes.
    """
    gx = np.where(x >= 0.0, gout, gout * slopes)
    neg = np.minimum(x, 0.0)
    gs = (gout * neg).reshape(-1, x.shape[-1]).sum(axis=0)
    return gx, gs


def sgd_update(param, grad, vel, lr, momentum):
    """In-place momentum SGD: vel = momentum*vel + grad; param -= lr*vel."""
    vel *= momentum
    vel += grad
    param -= lr * vel


def linf_step(x_adv, grad, x0, step, eps):
    """One fused sign-ascent step, clipped to the eps box around x0 and [0,1].

    sign(0) is 0, so a zero gradient leaves the coordinate in place.
    """
    v = x_adv + step * np.sign(grad)
    lo = np.maximum(x0 - eps, 0.0)
    hi = np.minimum(x0 + eps, 1.0)
    return np.minimum(np.maximum(v, lo), hi)


def l1_project_rows(delta, eps):
    """Euclidean projection of each row onto the l1 ball of radius eps.

    Sort-based simplex thresholding on |row| with signs restored; rows
    already inside the ball are returned unchanged.
    """
    out = delta.copy()
    for i in range(delta.shape[0]):
        row = delta[i]
        a = np.abs(row)
        if a.sum() <= eps:
            continue
        u = np.sort(a)[::-1]
        css = np.cumsum(u)
        k = np.arange(1, u.size + 1)
        rho = np.nonzero(u * k > css - eps)[0][-1]
        theta = (css[rho] - eps) / (rho + 1.0)
        out[i] = np.sign(row) * np.maximum(a - theta, 0.0)
    return out


def topq_sign_step(delta, grad, step, q):
    """Sign step of size ``step`` on the top-q fraction of each row by |grad|.

    The selection threshold is the k-th largest |grad| with
    k = max(1, ceil(q*d)); ties at the threshold are all included.
    """
    d = grad.shape[1]
    k = max(1, int(np.ceil(q * d)))
    a = np.abs(grad)
    thr = np.partition(a, d - k, axis=1)[:, d - k]
    mask = a >= thr[:, None]
    return delta + step * np.sign(grad) * mask
