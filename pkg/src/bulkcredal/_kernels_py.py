"""Pure-numpy kernels. Same signatures and semantics as the compiled ``_kernels``."""
import math

import numpy as np

_GOLD = 0.5 * (math.sqrt(5.0) - 1.0)


def newsvendor_losses(x, S, h, b):
    diff = x - S
    return np.sum(h * np.maximum(diff, 0.0) + b * np.maximum(-diff, 0.0), axis=1)


def newsvendor_grad(x, S, h, b, weights):
    diff = x - S
    return h * (weights @ (diff > 0)) - b * (weights @ (diff < 0))


def lad_grad(theta, S, weights):
    r = S[:, -1] - S[:, :-1] @ theta[:-1] - theta[-1]
    ws = weights * np.sign(r)
    g = np.empty(theta.size)
    g[:-1] = -(ws @ S[:, :-1])
    g[-1] = -ws.sum()
    return g


def _kl_g(losses, M, eps, lam):
    z = np.exp((losses - M) / lam)
    return lam * eps + M + lam * math.log(z.mean())


def kl_dual_inner(losses, eps, lam_lo, lam_hi, iters=25):
    """Minimise ``lam*eps + lam*log(mean(exp(losses/lam)))`` over ``lam > 0``.

    Returns ``(value, lam, weights)`` where ``weights`` is the worst-case
    reweighting of the scenarios. ``lam = 0`` flags the saturated case in
    which the value is the maximum loss.
    """
    losses = np.asarray(losses, dtype=np.float64)
    n = losses.size
    M = float(losses.max())
    at_max = losses == M
    k = int(at_max.sum())
    if eps >= math.log(n / k):
        return M, 0.0, at_max / k
    lo, hi = math.log(lam_lo), math.log(lam_hi)
    for _ in range(60):
        a, c = lo, hi
        x1 = c - _GOLD * (c - a)
        x2 = a + _GOLD * (c - a)
        f1 = _kl_g(losses, M, eps, math.exp(x1))
        f2 = _kl_g(losses, M, eps, math.exp(x2))
        for _ in range(iters):
            if f1 <= f2:
                c, x2, f2 = x2, x1, f1
                x1 = c - _GOLD * (c - a)
                f1 = _kl_g(losses, M, eps, math.exp(x1))
            else:
                a, x1, f1 = x1, x2, f2
                x2 = a + _GOLD * (c - a)
                f2 = _kl_g(losses, M, eps, math.exp(x2))
        u = 0.5 * (a + c)
        width = hi - lo
        if u - lo < 1e-3 * width:
            lo -= math.log(10.0)
        elif hi - u < 1e-3 * width:
            hi += math.log(10.0)
        else:
            break
    lam = math.exp(u)
    best = _kl_g(losses, M, eps, lam)
    # Newton polish; the map is convex in lam with g'' = Var_w(l) / lam^3
    for _ in range(8):
        z = np.exp((losses - M) / lam)
        s = z.sum()
        w = z / s
        mean_w = float(w @ losses)
        var_w = float(w @ (losses - mean_w) ** 2)
        grad = eps + M / lam + math.log(s / n) - mean_w / lam
        if var_w <= 0.0:
            break
        step = grad * lam ** 3 / var_w
        cand = lam - step
        if cand <= 0.0:
            cand = 0.5 * lam
        val = _kl_g(losses, M, eps, cand)
        if val < best:
            lam, best = cand, val
        else:
            break
    if best >= M:
        return M, 0.0, at_max / k
    z = np.exp((losses - M) / lam)
    return best, lam, z / z.sum()
