"""Hot per-impression loops: E-step accumulation and conditional click probabilities.

Each kernel exists twice, a numba ``@njit`` loop and a vectorised numpy
version with identical formulas. ``VBCLICK_NUMBA=0`` (or a missing numba)
selects numpy as the default backend; both stay importable for tests and
benchmarks.

Exam modes: 0 = gamma, 1 = gamma + (1 - gamma) sigma, 2 = gamma * sigma.
"""

from __future__ import annotations

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    flag = os.environ.get("VBCLICK_NUMBA", "1").strip().lower()
    return HAVE_NUMBA and flag not in ("0", "false", "no", "off")


def _njit(func):
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


# -- numba ---------------------------------------------------------------------

@_njit
def _posterior(alpha, gamma, sigma, clicked, mode):
    """(p_rel, p_exam, p_vision, sigma_den, p_click) for one impression."""
    if mode == 1:
        exam = gamma + (1.0 - gamma) * sigma
    elif mode == 2:
        exam = gamma * sigma
    else:
        exam = gamma
    p = alpha * exam
    if clicked:
        if mode == 1:
            den = exam if exam > 0.0 else 1.0
            pe = gamma / den
            pv = sigma * (1.0 - gamma) / den
            return 1.0, pe, pv, pv, p
        if mode == 2:
            return 1.0, 1.0, 1.0, 1.0, p
        return 1.0, 1.0, 0.0, 0.0, p
    den = 1.0 - p
    if den <= 0.0:
        den = 1.0
    p_rel = alpha * (1.0 - exam) / den
    if mode == 1:
        pe = gamma * (1.0 - alpha) / den
        pv = sigma * (1.0 - gamma) * (1.0 - alpha) / den
        sd = (1.0 - gamma) * (1.0 - alpha * sigma) / den
        return p_rel, pe, pv, sd, p
    if mode == 2:
        pe = gamma * (1.0 - alpha * sigma) / den
        pv = gamma * sigma * (1.0 - alpha) / den
        return p_rel, pe, pv, pe, p
    return p_rel, gamma * (1.0 - alpha) / den, 0.0, 0.0, p


@_njit
def estep_numba(a_idx, g_idx, s_idx, click, alpha, gamma, sigma, mode,
                a_num, a_den, g_num, g_den, s_num, s_den):
    """Accumulate posterior sums in place; returns the summed log-likelihood."""
    ll = 0.0
    for i in range(a_idx.shape[0]):
        a = a_idx[i]
        g = g_idx[i]
        s = s_idx[i]
        c = click[i] != 0
        sg = sigma[s] if mode != 0 else 0.0
        pr, pe, pv, sd, p = _posterior(alpha[a], gamma[g], sg, c, mode)
        a_num[a] += pr
        a_den[a] += 1.0
        g_num[g] += pe
        g_den[g] += 1.0
        if mode != 0:
            s_num[s] += pv
            s_den[s] += sd
        if not c:
            p = 1.0 - p
        if p < LOG_EPS:
            p = LOG_EPS
        elif p > 1.0 - LOG_EPS:
            p = 1.0 - LOG_EPS
        ll += np.log(p)
    return ll


@_njit
def click_probs_numba(a_idx, g_idx, s_idx, alpha, gamma, sigma, mode):
    n = a_idx.shape[0]
    out = np.empty(n)
    for i in range(n):
        g = gamma[g_idx[i]]
        if mode == 1:
            e = g + (1.0 - g) * sigma[s_idx[i]]
        elif mode == 2:
            e = g * sigma[s_idx[i]]
        else:
            e = g
        out[i] = alpha[a_idx[i]] * e
    return out


# -- numpy ---------------------------------------------------------------------

def _exam_numpy(g, sg, mode):
    if mode == 1:
        return g + (1.0 - g) * sg
    if mode == 2:
        return g * sg
    return g


def click_probs_numpy(a_idx, g_idx, s_idx, alpha, gamma, sigma, mode):
    sg = sigma[s_idx] if mode != 0 else 0.0
    return alpha[a_idx] * _exam_numpy(gamma[g_idx], sg, mode)


def estep_numpy(a_idx, g_idx, s_idx, click, alpha, gamma, sigma, mode,
                a_num, a_den, g_num, g_den, s_num, s_den):
    c = click != 0
    al = alpha[a_idx]
    g = gamma[g_idx]
    sg = sigma[s_idx] if mode != 0 else np.zeros_like(g)
    exam = _exam_numpy(g, sg, mode)
    p = al * exam
    den_u = 1.0 - p
    den_u = np.where(den_u <= 0.0, 1.0, den_u)
    den_c = np.where(exam > 0.0, exam, 1.0)

    p_rel = np.where(c, 1.0, al * (1.0 - exam) / den_u)
    if mode == 1:
        pe = np.where(c, g / den_c, g * (1.0 - al) / den_u)
        pv = np.where(c, sg * (1.0 - g) / den_c, sg * (1.0 - g) * (1.0 - al) / den_u)
        sd = np.where(c, pv, (1.0 - g) * (1.0 - al * sg) / den_u)
    elif mode == 2:
        pe = np.where(c, 1.0, g * (1.0 - al * sg) / den_u)
        pv = np.where(c, 1.0, g * sg * (1.0 - al) / den_u)
        sd = pe
    else:
        pe = np.where(c, 1.0, g * (1.0 - al) / den_u)
        pv = sd = None

    a_num += np.bincount(a_idx, p_rel, minlength=a_num.shape[0])
    a_den += np.bincount(a_idx, minlength=a_den.shape[0])
    g_num += np.bincount(g_idx, pe, minlength=g_num.shape[0])
    g_den += np.bincount(g_idx, minlength=g_den.shape[0])
    if mode != 0:
        s_num += np.bincount(s_idx, pv, minlength=s_num.shape[0])
        s_den += np.bincount(s_idx, sd, minlength=s_den.shape[0])
    p_obs = np.clip(np.where(c, p, 1.0 - p), LOG_EPS, 1.0 - LOG_EPS)
    return float(np.log(p_obs).sum())


BACKENDS = {
    "numpy": (estep_numpy, click_probs_numpy),
    "numba": (estep_numba, click_probs_numba),
}


def default_backend() -> str:
    return "numba" if numba_enabled() else "numpy"


def get_backend(name: str | None = None):
    name = name or default_backend()
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        logger.warning("numba unavailable, falling back to numpy kernels")
        name = "numpy"
    return BACKENDS[name]
