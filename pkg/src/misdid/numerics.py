"""Numerical kernels shared by the estimators and the simulation lab.

Normal and bivariate-normal distribution functions, the truncated-normal
cross moment used in the misclassification bias, least squares through a
pivoted QR factorization, residual makers, and Cholesky-based sampling.

All functions are pure. Random streams come from :func:`make_rng`, which
wraps numpy's PCG64 bit generator seeded through ``SeedSequence``; the
stream for replicate ``i`` under root seed ``s`` is
``SeedSequence(entropy=s, spawn_key=(i,))``.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg
from scipy.special import ndtr

RHO_GUARD = 1e-12
TWOPI = 2.0 * np.pi
SQRT2PI = np.sqrt(TWOPI)


class NumericsError(ValueError):
    """Base class for domain errors raised by the numerical kernels."""


class RankDeficiencyError(NumericsError):
    """Design matrix is (numerically) rank deficient.

    Attributes
    ----------
    column : int
        Index (in the caller's column order) of the first column found to be
        linearly dependent on the others.
    """

    def __init__(self, column: int, message: str | None = None):
        self.column = int(column)
        super().__init__(message or f"design matrix is rank deficient at column {self.column}")


class NotPositiveDefiniteError(NumericsError):
    def __init__(self, pivot: int):
        self.pivot = int(pivot)
        super().__init__(f"matrix is not positive definite (failing pivot {self.pivot})")


# ---------------------------------------------------------------------------
# univariate normal
# ---------------------------------------------------------------------------

def std_normal_cdf(x):
    """Standard normal CDF, saturating at 0 and 1 for extreme arguments."""
    return ndtr(x)


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / SQRT2PI


# ---------------------------------------------------------------------------
# bivariate normal
# ---------------------------------------------------------------------------

# Gauss-Legendre half rules (nodes on (0, 1), mirrored below) used by the
# Drezner-Wesolowsky / Genz scheme; 6, 12 and 20 point rules.
_GL_NODES = {
    6: np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970]),
    12: np.array([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                  0.5873179542866171, 0.3678314989981802, 0.1252334085114692]),
    20: np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                  0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                  0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                  0.07652652113349733]),
}
_GL_WEIGHTS = {
    6: np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
    12: np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                  0.2031674267230659, 0.2334925365383547, 0.2491470458134029]),
    20: np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                  0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
                  0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
                  0.1527533871307259]),
}


def _gl_rule(n):
    x = _GL_NODES[n]
    w = _GL_WEIGHTS[n]
    return np.concatenate([1.0 - x, 1.0 + x]), np.concatenate([w, w])


_RULES = {n: _gl_rule(n) for n in (6, 12, 20)}


def _bvnu_moderate(h, k, r, rule):
    # |r| < 0.925: integrate the derivative in r along arcsin(r)
    x, w = _RULES[rule]
    hk = h * k
    hs = (h * h + k * k) / 2.0
    asr = np.arcsin(r) / 2.0
    sn = np.sin(asr[:, None] * x[None, :])
    terms = np.exp((sn * hk[:, None] - hs[:, None]) / (1.0 - sn * sn))
    return (terms @ w) * asr / TWOPI + ndtr(-h) * ndtr(-k)


def _bvnu_high(h, k, r):
    # |r| >= 0.925: expansion around r = +-1 (Drezner-Wesolowsky, Genz)
    x, w = _RULES[20]
    neg = r < 0
    k = np.where(neg, -k, k)
    hk = h * k
    as_ = 1.0 - r * r
    a = np.sqrt(as_)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 80.0
    asr = -(bs / as_ + hk) / 2.0
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        first = a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_)
        bvn = np.where(asr > -100.0, first, 0.0)
        b = np.sqrt(bs)
        sp = SQRT2PI * ndtr(-b / a)
        second = np.exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0)
        bvn = bvn - np.where(hk > -100.0, second, 0.0)
        a2 = (a / 2.0)[:, None]
        xs = (a2 * x[None, :]) ** 2
        asr_ = -(bs[:, None] / xs + hk[:, None]) / 2.0
        sp_ = 1.0 + c[:, None] * xs * (1.0 + 5.0 * d[:, None] * xs)
        rs = np.sqrt(1.0 - xs)
        ep = np.exp(-(hk[:, None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
        contrib = np.where(asr_ > -100.0, np.exp(asr_) * (sp_ - ep), 0.0)
        bvn = (a2[:, 0] * (contrib @ w) - bvn) / TWOPI
    pos = ~neg
    out = np.empty_like(bvn)
    out[pos] = bvn[pos] + ndtr(-np.maximum(h[pos], k[pos]))
    # r < 0 branch; k has already been negated
    hn, kn, bn = h[neg], k[neg], bvn[neg]
    lower = np.where(hn < 0, ndtr(kn) - ndtr(hn), ndtr(-hn) - ndtr(-kn))
    out[neg] = np.where(hn >= kn, -bn, lower - bn)
    return out


def _bvnu(h, k, r):
    """Upper orthant probability P(X > h, Y > k) for standard BVN(r)."""
    out = np.empty_like(h)
    ar = np.abs(r)
    zero = r == 0.0
    out[zero] = ndtr(-h[zero]) * ndtr(-k[zero])
    for lo, hi, rule in ((0.0, 0.3, 6), (0.3, 0.75, 12), (0.75, 0.925, 20)):
        m = (ar >= lo) & (ar < hi) & ~zero
        if m.any():
            out[m] = _bvnu_moderate(h[m], k[m], r[m], rule)
    m = ar >= 0.925
    if m.any():
        out[m] = _bvnu_high(h[m], k[m], r[m])
    return out


def bvn_cdf(a, b, rho):
    """Standard bivariate normal CDF ``P(N1 <= a, N2 <= b)`` with correlation `rho`.

    Uses Gauss-Legendre quadrature of the correlation derivative (the
    Drezner-Wesolowsky scheme as refined by Genz), with a separate
    expansion for ``|rho| >= 0.925``. Absolute accuracy is about 1e-15.
    Arguments broadcast against each other. The two limits are put in a
    canonical order first, so the result is exactly symmetric in ``(a, b)``.

    Raises
    ------
    NumericsError
        If ``|rho| > 1 - 1e-12``.
    """
    a, b, rho = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float),
                                    np.asarray(rho, float))
    shape = a.shape
    if np.any(np.abs(rho) > 1.0 - RHO_GUARD) or np.any(np.isnan(rho)):
        raise NumericsError("correlation must satisfy |rho| <= 1 - 1e-12")
    lo = np.minimum(a, b).ravel()
    hi = np.maximum(a, b).ravel()
    r = rho.ravel().copy()
    # P(N1 <= a, N2 <= b) = P(-N1 > -a, -N2 > -b)
    h = -hi
    k = -lo
    out = np.empty(h.shape)
    # infinite limits
    fin = np.isfinite(h) & np.isfinite(k)
    if not fin.all():
        inf_case = ~fin
        hh, kk = h[inf_case], k[inf_case]
        res = np.where(
            (hh == np.inf) | (kk == np.inf), 0.0,
            np.where(hh == -np.inf, np.where(kk == -np.inf, 1.0, ndtr(-kk)), ndtr(-hh)),
        )
        out[inf_case] = res
    if fin.any():
        out[fin] = _bvnu(h[fin], k[fin], r[fin])
    out = np.clip(out, 0.0, 1.0)
    return out.reshape(shape) if shape else float(out[0])


def bvn_pdf(a, b, rho):
    """Standard bivariate normal density at ``(a, b)``."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    omr = 1.0 - rho * rho
    q = (a * a - 2.0 * rho * a * b + b * b) / omr
    return np.exp(-0.5 * q) / (TWOPI * np.sqrt(omr))


# ---------------------------------------------------------------------------
# truncated normal cross moment
# ---------------------------------------------------------------------------

def tallis_moment(rg, za, rho, sigma, psi_v):
    """Mean of the outcome error over the event ``{U >= -rg, V >= -za}``.

    The error triple ``(e, U, V)`` is jointly normal with ``Var(e) = sigma**2``,
    unit variances for ``U`` and ``V``, ``Corr(U, V) = rho``,
    ``Corr(e, V) = psi_v`` and ``e`` uncorrelated with ``U``. Tallis' formula
    for a bivariate truncation then gives::

        E[e * 1{U >= -rg, V >= -za}]
            = sigma * psi_v * phi(za) * Phi((rg - rho * za) / sqrt(1 - rho**2))

    Parameters
    ----------
    rg, za : float or ndarray
        Index values ``R @ gamma`` and ``Z @ alpha``.
    rho : float
        Correlation of ``U`` and ``V``; ``|rho| < 1``.
    sigma : float
        Standard deviation of the outcome error, positive.
    psi_v : float
        Correlation between the outcome error and ``V``.
    """
    if not abs(rho) <= 1.0 - RHO_GUARD:
        raise NumericsError("correlation must satisfy |rho| <= 1 - 1e-12")
    if not sigma > 0:
        raise NumericsError("sigma must be positive")
    rg = np.asarray(rg, float)
    za = np.asarray(za, float)
    s = np.sqrt(1.0 - rho * rho)
    return sigma * psi_v * std_normal_pdf(-za) * ndtr((rg - rho * za) / s)


# ---------------------------------------------------------------------------
# least squares
# ---------------------------------------------------------------------------

def _pivoted_qr(design, rtol):
    q, r, perm = linalg.qr(design, mode="economic", pivoting=True, check_finite=False)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        raise NumericsError("design has no columns")
    tol = max(rtol, np.finfo(float).eps * max(design.shape)) * diag[0]
    rank = int(np.sum(diag > tol))
    if diag[0] == 0.0:
        rank = 0
    if rank < design.shape[1]:
        raise RankDeficiencyError(int(perm[rank]))
    return q, r, perm


def ols_solve(design, response, rtol=1e-10):
    """Least squares through a column-pivoted QR factorization.

    Parameters
    ----------
    design : ndarray, shape (n, p)
    response : ndarray, shape (n,) or (n, m)
    rtol : float
        Relative threshold on the diagonal of ``R`` for declaring a column
        dependent on its predecessors.

    Returns
    -------
    coef : ndarray, shape (p,) or (p, m)
    resid : ndarray, same shape as `response`

    Raises
    ------
    RankDeficiencyError
        Names the first dependent column in the caller's ordering.
    """
    design = np.asarray(design, float)
    if design.ndim == 1:
        design = design[:, None]
    response = np.asarray(response, float)
    n, p = design.shape
    if n < p:
        raise RankDeficiencyError(n, f"fewer rows ({n}) than columns ({p})")
    q, r, perm = _pivoted_qr(design, rtol)
    qty = q.T @ response
    sol = linalg.solve_triangular(r, qty, check_finite=False)
    coef = np.empty_like(sol)
    coef[perm] = sol
    resid = response - design @ coef
    return coef, resid


def fw_residualize(target, controls, rtol=1e-10):
    """Residuals of each column of `target` after projection on `controls`.

    This is ``M @ target`` with ``M = I - C (C'C)^{-1} C'``, computed through
    an orthonormal basis of the control space.
    """
    target = np.asarray(target, float)
    controls = np.asarray(controls, float)
    if controls.ndim == 1:
        controls = controls[:, None]
    if target.shape[0] != controls.shape[0]:
        raise NumericsError("target and controls have different row counts")
    q, _, _ = _pivoted_qr(controls, rtol)
    return target - q @ (q.T @ target)


# ---------------------------------------------------------------------------
# Cholesky and sampling
# ---------------------------------------------------------------------------

def cholesky(cov):
    """Lower Cholesky factor ``L`` with ``L @ L.T == cov``.

    Raises
    ------
    NotPositiveDefiniteError
        With the zero-based index of the failing pivot.
    """
    cov = np.asarray(cov, float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise NumericsError("covariance must be square")
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
        raise NumericsError("covariance must be symmetric")
    c, info = linalg.lapack.dpotrf(cov, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise NumericsError(f"dpotrf rejected argument {-info}")
    return c


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator for root `seed`, optionally split by integer `keys`.

    ``make_rng(s, i)`` is the stream for replicate ``i``; streams for
    different keys are statistically independent.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def mvn_sample(mean, chol_lower, rng: np.random.Generator, n: int):
    """Draw `n` rows ``mean + L z`` with ``z`` i.i.d. standard normal."""
    mean = np.asarray(mean, float)
    chol_lower = np.asarray(chol_lower, float)
    d = mean.shape[0]
    if chol_lower.shape != (d, d):
        raise NumericsError("Cholesky factor does not match the mean dimension")
    z = rng.standard_normal((int(n), d))
    return mean + z @ chol_lower.T
