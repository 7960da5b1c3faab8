"""
Hot inner loops, each with a numba and a pure-numpy implementation.

* ``clutter_enumerate`` -- all 2^N branches of the clutter likelihood expansion
* ``ess_probit_chain``  -- elliptical slice sampling under a probit likelihood

Pick the backend per call with ``backend="numba" | "numpy"`` or globally with
the ``LOSSEP_NUMBA`` environment variable.
"""

import math

import numpy as np
from scipy import special

from lossep._accel import njit, resolve_backend

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)

# ---------------------------------------------------------------------------
# clutter posterior enumeration
# ---------------------------------------------------------------------------


def _clutter_enumerate_numpy(y, pi, vc, v0, chunk=1 << 16):
    n = y.size
    total = 1 << n
    log_w = np.empty(total)
    mean = np.empty(total)
    var = np.empty(total)
    lc = math.log(pi) - 0.5 * (_LOG_2PI + math.log(vc)) - 0.5 * y * y / vc
    bits = np.arange(n)
    for start in range(0, total, chunk):
        masks = np.arange(start, min(start + chunk, total))
        sel = ((masks[:, None] >> bits) & 1).astype(float)
        k = sel.sum(axis=1)
        s = sel @ y
        q = sel @ (y * y)
        clutter = (1.0 - sel) @ lc
        prec = k + 1.0 / v0
        lw = (
            clutter
            + k * math.log1p(-pi)
            - 0.5 * k * _LOG_2PI
            - 0.5 * np.log1p(k * v0)
            - 0.5 * (q - s * s / prec)
        )
        sl = slice(start, start + masks.size)
        log_w[sl] = lw
        mean[sl] = s / prec
        var[sl] = 1.0 / prec
    return log_w, mean, var


@njit
def _clutter_enumerate_numba(y, pi, vc, v0):
    n = y.size
    total = 1 << n
    log_w = np.empty(total)
    mean = np.empty(total)
    var = np.empty(total)
    lc = np.empty(n)
    for i in range(n):
        lc[i] = math.log(pi) - 0.5 * (_LOG_2PI + math.log(vc)) - 0.5 * y[i] * y[i] / vc
    l1p = math.log1p(-pi)
    for mask in range(total):
        k = 0
        s = 0.0
        q = 0.0
        clutter = 0.0
        for i in range(n):
            if (mask >> i) & 1:
                k += 1
                s += y[i]
                q += y[i] * y[i]
            else:
                clutter += lc[i]
        prec = k + 1.0 / v0
        log_w[mask] = (
            clutter
            + k * l1p
            - 0.5 * k * _LOG_2PI
            - 0.5 * math.log1p(k * v0)
            - 0.5 * (q - s * s / prec)
        )
        mean[mask] = s / prec
        var[mask] = 1.0 / prec
    return log_w, mean, var


def clutter_enumerate(y, pi, vc, v0, backend=None):
    """Unnormalized log weights, means and variances of all 2^N posterior branches.

    Bit ``i`` of the branch index set means observation ``i`` is explained by the
    signal component ``N(y_i; phi, 1)``; clear means clutter ``N(y_i; 0, vc)``.
    """
    y = np.ascontiguousarray(y, dtype=float)
    if resolve_backend(backend) == "numba":
        return _clutter_enumerate_numba(y, float(pi), float(vc), float(v0))
    return _clutter_enumerate_numpy(y, float(pi), float(vc), float(v0))


# ---------------------------------------------------------------------------
# elliptical slice sampling, probit likelihood
# ---------------------------------------------------------------------------


@njit
def _log_ndtr(x):
    if x > 0.0:
        return math.log1p(-0.5 * math.erfc(x / _SQRT2))
    if x > -20.0:
        return math.log(0.5 * math.erfc(-x / _SQRT2))
    x2 = 1.0 / (x * x)
    series = 1.0 - x2 * (1.0 - 3.0 * x2 * (1.0 - 5.0 * x2 * (1.0 - 7.0 * x2)))
    return -0.5 * x * x - math.log(-x) - 0.5 * _LOG_2PI + math.log(series)


@njit
def _probit_loglik_numba(f, y):
    out = 0.0
    for i in range(f.size):
        out += _log_ndtr(y[i] * f[i])
    return out


@njit
def _ess_probit_numba(y, f0, nus, log_u, theta0, shrink):
    T, n = nus.shape
    K = shrink.shape[1]
    out = np.empty((T, n))
    f = f0.copy()
    prop = np.empty(n)
    ll = _probit_loglik_numba(f, y)
    for t in range(T):
        hh = log_u[t] + ll
        theta = theta0[t]
        lo = theta - 2.0 * math.pi
        hi = theta
        for k in range(K + 1):
            c = math.cos(theta)
            s = math.sin(theta)
            for i in range(n):
                prop[i] = f[i] * c + nus[t, i] * s
            llp = _probit_loglik_numba(prop, y)
            if llp > hh:
                for i in range(n):
                    f[i] = prop[i]
                ll = llp
                break
            if k == K:
                break
            if theta < 0.0:
                lo = theta
            else:
                hi = theta
            theta = lo + (hi - lo) * shrink[t, k]
        for i in range(n):
            out[t, i] = f[i]
    return out


def probit_loglik(f, y):
    """Sum of log Phi(y_i f_i); ``f`` may carry leading batch dimensions."""
    return np.sum(special.log_ndtr(np.asarray(f) * y), axis=-1)


def ess_step(f, ll, nu, log_u, theta, shrink, loglik):
    """One elliptical slice update using pre-drawn randomness.

    ``shrink`` holds the uniforms consumed by successive bracket shrinks. If
    they run out the chain stays put, which is always a valid slice point.
    """
    hh = log_u + ll
    lo, hi = theta - 2.0 * math.pi, theta
    for k in range(len(shrink) + 1):
        prop = f * math.cos(theta) + nu * math.sin(theta)
        llp = loglik(prop)
        if llp > hh:
            return prop, llp
        if k == len(shrink):
            return f, ll
        if theta < 0.0:
            lo = theta
        else:
            hi = theta
        theta = lo + (hi - lo) * shrink[k]


def _ess_numpy(f0, nus, log_u, theta0, shrink, loglik):
    T, n = nus.shape
    out = np.empty((T, n))
    f = f0.copy()
    ll = loglik(f)
    for t in range(T):
        f, ll = ess_step(f, ll, nus[t], log_u[t], theta0[t], shrink[t], loglik)
        out[t] = f
    return out


def ess_probit_chain(y, f0, nus, log_u, theta0, shrink, backend=None):
    """Run ESS for ``N(f; 0, K) prod Phi(y_i f_i)`` over pre-drawn streams.

    ``nus`` are prior draws (T x N), ``log_u`` slice heights, ``theta0`` initial
    angles in [0, 2 pi) and ``shrink`` (T x K) uniforms for bracket shrinking.
    Returns the full T x N chain.
    """
    y = np.ascontiguousarray(y, dtype=float)
    args = (
        np.ascontiguousarray(f0, dtype=float),
        np.ascontiguousarray(nus, dtype=float),
        np.ascontiguousarray(log_u, dtype=float),
        np.ascontiguousarray(theta0, dtype=float),
        np.ascontiguousarray(shrink, dtype=float),
    )
    if resolve_backend(backend) == "numba":
        return _ess_probit_numba(y, *args)
    return _ess_numpy(*args, loglik=lambda f: float(probit_loglik(f, y)))
