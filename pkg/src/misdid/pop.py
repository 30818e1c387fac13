"""Partial observability probit for one-sided treatment misclassification.

The observed treatment is ``D = 1{R gamma + U >= 0} * 1{Z alpha + V >= 0}``
with ``(U, V)`` standard bivariate normal with correlation ``rho``. The first
factor is the true treatment ``D*``; the second is the reporting indicator.
Parameters are packed as ``(gamma, alpha, atanh(rho))`` throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import log_ndtr

from .data import PANEL, Dataset, first_difference
from .numerics import (
    RankDeficiencyError,
    bvn_cdf,
    bvn_pdf,
    std_normal_cdf,
    std_normal_pdf,
    _pivoted_qr,
)

PROB_CLAMP = 1e-12
ATANH_MAX = 13.0  # tanh(13) = 1 - 1e-11, inside the bvn_cdf domain guard
RHO_STARTS = (-0.5, 0.0, 0.5)


class IdentificationError(ValueError):
    """The first stage is not identified (no excluded instrument, constant D, ...)."""


class FirstStageError(RuntimeError):
    """The first stage failed to converge; ``fit`` holds the diagnostics."""

    def __init__(self, message: str, fit: "PopFit | None" = None):
        super().__init__(message)
        self.fit = fit


@dataclass(frozen=True)
class PopSpec:
    r_columns: tuple[str, ...]
    z_columns: tuple[str, ...]

    def __post_init__(self):
        if not self.excluded:
            raise IdentificationError(
                "the misclassification index needs at least one instrument excluded from R")

    @property
    def excluded(self) -> tuple[str, ...]:
        return tuple(c for c in self.z_columns if c not in self.r_columns)

    @property
    def overlap(self) -> tuple[str, ...]:
        return tuple(c for c in self.z_columns if c in self.r_columns and c != "const")

    @classmethod
    def from_roles(cls, roles) -> "PopSpec":
        return cls(("const",) + tuple(roles.covariates),
                   ("const",) + tuple(roles.instruments) + tuple(roles.shared))


@dataclass(frozen=True)
class PopFit:
    gamma: np.ndarray
    alpha: np.ndarray
    rho: float
    loglik: float
    vcov: np.ndarray | None
    converged: bool
    iterations: int
    grad_norm: float
    n_obs: int
    r_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    start_logliks: tuple[float, ...] = ()
    diagnostics: tuple[str, ...] = ()
    hess_inv: np.ndarray | None = field(default=None, repr=False)

    @property
    def params(self) -> np.ndarray:
        return pack(self.gamma, self.alpha, self.rho)

    @property
    def se(self) -> np.ndarray | None:
        if self.vcov is None:
            return None
        return np.sqrt(np.diag(self.vcov))

    def to_dict(self) -> dict:
        se = self.se
        kr = self.gamma.size
        out = {
            "gamma": self.gamma.tolist(),
            "alpha": self.alpha.tolist(),
            "rho": float(self.rho),
            "loglik": float(self.loglik),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "grad_norm": float(self.grad_norm),
            "n_obs": int(self.n_obs),
            "r_names": list(self.r_names),
            "z_names": list(self.z_names),
            "diagnostics": list(self.diagnostics),
        }
        if se is not None:
            out["se_gamma"] = se[:kr].tolist()
            out["se_alpha"] = se[kr:-1].tolist()
            out["se_atanh_rho"] = float(se[-1])
        return out


def pack(gamma, alpha, rho) -> np.ndarray:
    return np.concatenate([np.atleast_1d(np.asarray(gamma, float)),
                           np.atleast_1d(np.asarray(alpha, float)),
                           [np.arctanh(rho)]])


def unpack(params, kr: int):
    params = np.asarray(params, float)
    t = np.clip(params[-1], -ATANH_MAX, ATANH_MAX)
    return params[:kr], params[kr:-1], float(np.tanh(t))


def _loglik_obs(params, D, R, Z):
    gamma, alpha, rho = unpack(params, R.shape[1])
    rg, za = R @ gamma, Z @ alpha
    F = bvn_cdf(rg, za, rho)
    Fc = np.clip(F, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return D * np.log(Fc) + (1.0 - D) * np.log1p(-Fc), (rg, za, rho, F, Fc)


def _scores_from(D, R, Z, cache):
    rg, za, rho, F, Fc = cache
    active = (F > PROB_CLAMP) & (F < 1.0 - PROB_CLAMP)
    w = np.where(active, D / Fc - (1.0 - D) / (1.0 - Fc), 0.0)
    s = np.sqrt(1.0 - rho * rho)
    da = std_normal_pdf(rg) * std_normal_cdf((za - rho * rg) / s)
    db = std_normal_pdf(za) * std_normal_cdf((rg - rho * za) / s)
    dr = bvn_pdf(rg, za, rho) * (1.0 - rho * rho)
    return np.column_stack([(w * da)[:, None] * R, (w * db)[:, None] * Z, w * dr])


def pop_loglik(params, D, R, Z) -> float:
    """Sum of Bernoulli log likelihoods with ``F = Phi2(R gamma, Z alpha; rho)``.

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]`` before taking logs.
    """
    D, R, Z = _as_arrays(D, R, Z)
    ll, _ = _loglik_obs(params, D, R, Z)
    return float(ll.sum())


def pop_scores(params, D, R, Z) -> np.ndarray:
    """Per-observation gradient rows in ``(gamma, alpha, atanh rho)`` coordinates.

    Rows where the probability clamp is active contribute zero, matching the
    flat clamped likelihood.
    """
    D, R, Z = _as_arrays(D, R, Z)
    _, cache = _loglik_obs(params, D, R, Z)
    return _scores_from(D, R, Z, cache)


def pop_score(params, D, R, Z) -> np.ndarray:
    return pop_scores(params, D, R, Z).sum(axis=0)


def _as_arrays(D, R, Z):
    D = np.asarray(D, float)
    R = np.asarray(R, float)
    Z = np.asarray(Z, float)
    if R.ndim == 1:
        R = R[:, None]
    if Z.ndim == 1:
        Z = Z[:, None]
    if not (D.shape[0] == R.shape[0] == Z.shape[0]):
        raise ValueError("D, R and Z must have the same number of rows")
    return D, R, Z


def probit_fit(y, X, max_iter: int = 100, tol: float = 1e-10):
    """Plain probit by Newton-Raphson. Returns ``(coef, vcov, converged)``."""
    y = np.asarray(y, float)
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    beta = np.zeros(X.shape[1])
    q = 2.0 * y - 1.0
    converged = False
    hess = -np.eye(X.shape[1])

    def ll(b):
        return log_ndtr(q * (X @ b)).sum()

    cur = ll(beta)
    for _ in range(max_iter):
        xb = X @ beta
        # inverse Mills ratio in log space for tail stability
        lam = q * np.exp(std_normal_pdf_log(q * xb) - log_ndtr(q * xb))
        grad = X.T @ lam
        wts = lam * (lam + xb)
        hess = -(X * wts[:, None]).T @ X
        step = np.linalg.solve(-hess, grad)
        t = 1.0
        while True:
            new = ll(beta + t * step)
            if new >= cur - 1e-12 or t < 1e-8:
                break
            t /= 2
        beta = beta + t * step
        cur = new
        if np.max(np.abs(t * step)) < tol:
            converged = True
            break
    return beta, np.linalg.inv(-hess), converged


def std_normal_pdf_log(x):
    return -0.5 * x * x - 0.5 * np.log(2.0 * np.pi)


def pop_design(dataset: Dataset, spec: PopSpec | None = None, rows: str = "pooled"):
    """Extract ``(D, R, Z)`` with leading intercepts.

    Panels use the baseline row of every unit. Repeated cross sections use
    all rows (``rows="pooled"``) or only ``T = 0`` rows (``rows="baseline"``).
    """
    spec = spec or PopSpec.from_roles(dataset.roles)
    if dataset.layout == PANEL:
        fd = first_difference(dataset)
        frame_d, x, z = fd.d, fd.x, fd.z
    else:
        keep = np.ones(dataset.n_rows, bool)
        if rows == "baseline":
            keep = dataset.t == 0
        elif rows != "pooled":
            raise ValueError("rows must be 'pooled' or 'baseline'")
        frame_d, x, z = dataset.d[keep], dataset.x[keep], dataset.z[keep]
    n = frame_d.shape[0]
    R = np.column_stack([np.ones(n), x])
    Z = np.column_stack([np.ones(n), z])
    return frame_d, R, Z


def _check_design(D, R, Z, spec):
    if D.size == 0 or np.all(D == D[0]):
        raise IdentificationError("observed treatment is constant; the first stage is not identified")
    for name, M, names in (("R", R, spec.r_columns if spec else None),
                           ("Z", Z, spec.z_columns if spec else None)):
        try:
            _pivoted_qr(M, 1e-10)
        except RankDeficiencyError as exc:
            col = exc.column
            label = names[col] if names is not None and col < len(names) else col
            raise RankDeficiencyError(col, f"{name} is rank deficient at column {label!r}") from None
    # at least one column of Z must carry variation outside the span of R
    resid = Z - R @ np.linalg.lstsq(R, Z, rcond=None)[0]
    scale = np.maximum(np.linalg.norm(Z, axis=0), 1.0)
    if np.all(np.linalg.norm(resid, axis=0) <= 1e-8 * scale):
        raise IdentificationError("every column of Z is a linear combination of R; the "
                                  "misclassification equation needs an excluded variable")


def _numeric_hessian(fun_grad, x, h=1e-5):
    k = x.size
    H = np.empty((k, k))
    for j in range(k):
        step = h * max(1.0, abs(x[j]))
        e = np.zeros(k)
        e[j] = step
        H[:, j] = (fun_grad(x + e) - fun_grad(x - e)) / (2.0 * step)
    return 0.5 * (H + H.T)


def pop_fit_arrays(D, R, Z, *, spec: PopSpec | None = None, max_iter: int = 500,
                   tol: float = 1e-6, rho_starts=RHO_STARTS, init=None, hess_inv0=None,
                   compute_vcov: bool = True) -> PopFit:
    """Maximum likelihood for the partial observability probit.

    Multi-start BFGS on the mean negative log likelihood over ``rho_starts``
    with probit warm starts for ``gamma`` and ``alpha``; the best start is then
    polished by Newton steps on a numerically differentiated analytic score.
    Convergence means the sup-norm of the mean score is at most `tol`.

    Passing `init` (packed parameters) replaces the start grid with that single
    point; `hess_inv0` seeds the BFGS inverse Hessian of the mean objective.
    """
    D, R, Z = _as_arrays(D, R, Z)
    _check_design(D, R, Z, spec)
    n, kr = R.shape
    diagnostics = []
    if spec is not None and spec.overlap:
        diagnostics.append(f"Z shares columns with R: {', '.join(spec.overlap)}")

    def fun(p):
        ll, cache = _loglik_obs(p, D, R, Z)
        g = _scores_from(D, R, Z, cache).sum(axis=0)
        return -ll.sum() / n, -g / n

    def mean_score(p):
        return pop_score(p, D, R, Z) / n

    if init is not None:
        starts = [np.asarray(init, float)]
    else:
        g0, _, _ = probit_fit(D, R)
        a0, _, _ = probit_fit(D, Z)
        starts = [pack(g0, a0, r0) for r0 in rho_starts]

    best = None
    start_ll = []
    total_iter = 0
    for x0 in starts:
        start_ll.append(-n * fun(x0)[0])
        opts = {"gtol": tol, "maxiter": max_iter, "norm": np.inf}
        if hess_inv0 is not None:
            opts["hess_inv0"] = np.asarray(hess_inv0, float)
        res = optimize.minimize(fun, x0, jac=True, method="BFGS", options=opts)
        total_iter += int(res.nit)
        if best is None or res.fun < best.fun:
            best = res
    x = best.x
    f = best.fun
    grad = mean_score(x)
    # Newton polish; also rescues BFGS runs stopped by line-search precision loss.
    # Polish steps share the iteration budget of the winning start.
    for _ in range(min(25, max(0, max_iter - int(best.nit)))):
        if np.max(np.abs(grad)) <= tol:
            break
        H = _numeric_hessian(mean_score, x)
        try:
            step = np.linalg.solve(-H, grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-6:
            cand = x + t * step
            fc = fun(cand)[0]
            if np.isfinite(fc) and fc <= f + 1e-15:
                break
            t /= 2
        else:
            break
        x, f = cand, fc
        grad = mean_score(x)
        total_iter += 1
    grad_norm = float(np.max(np.abs(grad)))
    converged = grad_norm <= tol
    if abs(x[-1]) >= ATANH_MAX:
        converged = False
        diagnostics.append("rho at the boundary of the parameter space")

    vcov = None
    hess_inv = None
    if compute_vcov:
        H = _numeric_hessian(mean_score, x)
        try:
            hess_inv = np.linalg.inv(-H)
            hess_inv = 0.5 * (hess_inv + hess_inv.T)
            vcov = hess_inv / n
            if np.min(np.linalg.eigvalsh(vcov)) <= 0:
                diagnostics.append("negative Hessian not positive definite at the optimum")
                converged = False
        except np.linalg.LinAlgError:
            diagnostics.append("singular Hessian at the optimum")
            converged = False
    if not converged:
        diagnostics.append(f"score sup-norm {grad_norm:.3g} exceeds tolerance {tol:.3g}"
                           if grad_norm > tol else "fit flagged as not converged")
    gamma, alpha, rho = unpack(x, kr)
    return PopFit(
        gamma=gamma.copy(), alpha=alpha.copy(), rho=rho, loglik=-n * f, vcov=vcov,
        converged=bool(converged), iterations=total_iter, grad_norm=grad_norm, n_obs=n,
        r_names=tuple(spec.r_columns) if spec else (),
        z_names=tuple(spec.z_columns) if spec else (),
        start_logliks=tuple(float(v) for v in start_ll),
        diagnostics=tuple(diagnostics), hess_inv=hess_inv,
    )


def pop_fit(dataset: Dataset, spec: PopSpec | None = None, *, rows: str = "pooled",
            **options) -> PopFit:
    """Fit the first stage on a dataset; see :func:`pop_fit_arrays` for options."""
    spec = spec or PopSpec.from_roles(dataset.roles)
    D, R, Z = pop_design(dataset, spec, rows=rows)
    return pop_fit_arrays(D, R, Z, spec=spec, **options)


def predict_dstar(fit: PopFit, R) -> np.ndarray:
    """Predicted true-treatment probabilities ``Phi(R gamma_hat)``."""
    if not fit.converged:
        raise FirstStageError("first stage did not converge", fit)
    R = np.asarray(R, float)
    if R.ndim == 1:
        R = R[:, None]
    return std_normal_cdf(R @ fit.gamma)
