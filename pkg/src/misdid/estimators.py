"""Naive and two-step difference-in-differences estimators.

All four estimators share one regression core parameterised by a vector of
treatment weights ``p``: the observed ``D`` for the naive estimators, the true
``D*`` for the infeasible benchmark and ``Phi(R gamma_hat)`` for the two-step
estimators. Covariates are centred at the ``p``-weighted mean, ``R = (1, X - mu)``
and ``W = p * R``.

* Panel (first differences): ``dY`` on ``(R, W)``; ``theta`` is the ``W`` block.
* Repeated cross sections (pooled OLS): ``Y`` on ``(R, W, T R, T W)``;
  ``theta`` is the ``T W`` block.

The ATT is ``sum(p * R theta) / sum(p)``, which equals ``theta[0]`` because the
centred covariates have zero ``p``-weighted mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from joblib import Parallel, delayed

from .data import PANEL, RCS, Dataset, DataError, demean, first_difference
from .numerics import (
    NumericsError,
    RankDeficiencyError,
    fw_residualize,
    make_rng,
    ols_solve,
    std_normal_cdf,
    std_normal_pdf,
)
from .pop import (
    FirstStageError,
    IdentificationError,
    PopFit,
    PopSpec,
    pop_fit_arrays,
    pop_scores,
    predict_dstar,
)

OVERLAP_FLOOR = 1e-6
MAX_BOOT_FAILURE = 0.10


class EstimationError(RuntimeError):
    """The second-stage regression could not be computed."""


class OverlapError(EstimationError):
    """Predicted treatment probabilities are all (numerically) zero."""


class BootstrapError(EstimationError):
    def __init__(self, message: str, n_failed: int = 0):
        super().__init__(message)
        self.n_failed = n_failed


@dataclass(frozen=True)
class BootstrapPlan:
    replications: int = 200
    seed: int = 0
    scheme: str | None = None  # "unit_resample" | "stratified_by_T"; None picks by layout
    n_jobs: int = 1

    def __post_init__(self):
        if self.replications < 2:
            raise ValueError("bootstrap needs at least two replications")
        if self.scheme not in (None, "unit_resample", "stratified_by_T"):
            raise ValueError(f"unknown bootstrap scheme {self.scheme!r}")


@dataclass(frozen=True)
class EstimationData:
    """Array view of a dataset in the form the estimators consume.

    For panels ``y`` is the first-differenced outcome and rows are units; for
    repeated cross sections ``y`` is the outcome and ``t`` the period.
    """

    layout: str
    y: np.ndarray
    x: np.ndarray
    d: np.ndarray
    z: np.ndarray
    t: np.ndarray | None = None
    dstar: np.ndarray | None = None
    covariates: tuple[str, ...] = ()
    instruments: tuple[str, ...] = ()

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "EstimationData":
        roles = dataset.roles
        zn = tuple(roles.instruments) + tuple(roles.shared)
        if dataset.layout == PANEL:
            fd = first_difference(dataset)
            return cls(PANEL, fd.dy, fd.x, fd.d, fd.z, None, fd.dstar, tuple(roles.covariates), zn)
        return cls(RCS, dataset.y, dataset.x, dataset.d, dataset.z, dataset.t, dataset.dstar,
                   tuple(roles.covariates), zn)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def r(self) -> np.ndarray:
        return np.column_stack([np.ones(self.n), self.x])

    @property
    def zmat(self) -> np.ndarray:
        return np.column_stack([np.ones(self.n), self.z])

    def take(self, rows) -> "EstimationData":
        rows = np.asarray(rows)
        return replace(
            self, y=self.y[rows], x=self.x[rows], d=self.d[rows], z=self.z[rows],
            t=None if self.t is None else self.t[rows],
            dstar=None if self.dstar is None else self.dstar[rows],
        )

    def with_y(self, y) -> "EstimationData":
        return replace(self, y=np.asarray(y, float))


def _as_data(data) -> EstimationData:
    if isinstance(data, EstimationData):
        return data
    if isinstance(data, Dataset):
        return EstimationData.from_dataset(data)
    raise TypeError("expected a Dataset or EstimationData")


@dataclass(frozen=True)
class DidEstimate:
    method: str
    theta: np.ndarray
    tau_att: float
    se_tau: float | None
    se_source: str | None
    n_obs: int
    nuisance: dict = field(default_factory=dict)
    first_stage: PopFit | None = None
    diagnostics: tuple[str, ...] = ()
    replicate_taus: np.ndarray | None = field(default=None, repr=False)
    n_failed: int = 0
    intermediates: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "tau": float(self.tau_att),
            "se": None if self.se_tau is None else float(self.se_tau),
            "se_source": self.se_source,
            "theta": [float(v) for v in self.theta],
            "n_obs": int(self.n_obs),
            "nuisance": {k: [float(v) for v in np.atleast_1d(val)]
                         for k, val in self.nuisance.items()},
            "diagnostics": list(self.diagnostics),
        }
        if self.first_stage is not None:
            fs = self.first_stage
            out["first_stage"] = {"gamma": fs.gamma.tolist(), "alpha": fs.alpha.tolist(),
                                  "rho": float(fs.rho), "loglik": float(fs.loglik),
                                  "converged": bool(fs.converged)}
        if self.replicate_taus is not None:
            out["bootstrap"] = {"replications": int(self.replicate_taus.size + self.n_failed),
                                "failed": int(self.n_failed)}
        return out


# ---------------------------------------------------------------------------
# regression core
# ---------------------------------------------------------------------------

def _names(covariates, k):
    base = ["const"] + (list(covariates) if len(covariates) == k else [f"x{j}" for j in range(k)])
    return base


def _core(data: EstimationData, p: np.ndarray) -> dict:
    """Second-stage regression with treatment weights `p`."""
    y, x = data.y, data.x
    if np.all(p < OVERLAP_FLOOR):
        raise OverlapError("no observation has a non-negligible treatment weight")
    try:
        dm = demean(x, p)
    except DataError as exc:
        raise EstimationError(str(exc)) from exc
    R, W = dm.r, dm.w
    m = R.shape[1]
    names = _names(data.covariates, m - 1)
    if data.layout == PANEL:
        controls = R
        target = W
        cnames = names
        tnames = [f"D:{c}" for c in names]
    else:
        T = data.t[:, None]
        controls = np.column_stack([R, W, T * R])
        target = T * W
        cnames = names + [f"D:{c}" for c in names] + [f"T:{c}" for c in names]
        tnames = [f"T:D:{c}" for c in names]
    try:
        tt = fw_residualize(target, controls)
        theta, _ = ols_solve(tt, y)
        rest, resid = ols_solve(controls, y - target @ theta)
    except RankDeficiencyError as exc:
        # identify the offending column in the long design
        allnames = cnames + tnames
        try:
            ols_solve(np.column_stack([controls, target]), y)
            label = exc.column
        except RankDeficiencyError as inner:
            label = allnames[inner.column]
        raise EstimationError(f"second-stage design is rank deficient at column {label!r}") from exc
    coef = np.concatenate([rest, theta])
    tau = float(np.sum(p * (R @ theta)) / np.sum(p))
    if data.layout == PANEL:
        nuisance = {"delta": rest[:m]}
    else:
        nuisance = {"eta1": rest[:m], "eta2": rest[m:2 * m], "delta": rest[2 * m:3 * m]}
    return {"theta": theta, "tau": tau, "coef": coef, "resid": resid, "design": np.column_stack(
        [controls, target]), "r": R, "mu": dm.centering, "p": p, "nuisance": nuisance}


def _check_rcs(data: EstimationData, need_cells: bool):
    if data.layout != RCS:
        raise DataError("pooled OLS needs a repeated cross-section dataset")
    t = data.t
    if np.all(t == t[0]):
        raise DataError("time indicator is constant; both periods are required")
    if need_cells:
        for dv in (0, 1):
            for tv in (0, 1):
                if not np.any((data.d == dv) & (t == tv)):
                    raise DataError(f"empty cell D={dv}, T={tv}")


def _check_panel(data: EstimationData):
    if data.layout != PANEL:
        raise DataError("first-difference estimators need a panel dataset")


def _check_binary_groups(d, label="observed treatment"):
    if not np.any(d == 1):
        raise DataError(f"no treated units ({label})")
    if not np.any(d == 0):
        raise DataError(f"no untreated units ({label})")


# ---------------------------------------------------------------------------
# analytic variance
# ---------------------------------------------------------------------------

def _dmu_rows(core, layout, t):
    """d(G_i beta)/d mu for each row; shape (n, k)."""
    coef = core["coef"]
    m = core["r"].shape[1]
    p = core["p"]
    if layout == PANEL:
        blocks = [(np.ones_like(p), coef[1:m]), (p, coef[m + 1:2 * m])]
    else:
        blocks = [(np.ones_like(p), coef[1:m]), (p, coef[m + 1:2 * m]),
                  (t, coef[2 * m + 1:3 * m]), (t * p, coef[3 * m + 1:4 * m])]
    out = np.zeros((p.size, m - 1))
    for w, slope in blocks:
        out -= w[:, None] * slope[None, :]
    return out


def _dp_coef_rows(core, layout, t):
    """d(G_i beta)/d p_i: the terms multiplying p in the fitted value."""
    coef = core["coef"]
    R = core["r"]
    m = R.shape[1]
    if layout == PANEL:
        return R @ coef[m:2 * m]
    return R @ coef[m:2 * m] + t * (R @ coef[3 * m:4 * m])


def _sandwich(core, layout, t, x, if_gamma=None, rmat=None, gamma=None):
    """Stacked-estimating-equation variance of the full coefficient vector.

    Includes the estimated centring vector and, when `if_gamma` is given,
    the first-stage estimate entering through ``p = Phi(R gamma)``.
    """
    G = core["design"]
    e = core["resid"]
    n = e.size
    p = core["p"]
    mu = core["mu"]
    xc = x - mu
    pbar = p.mean()
    infl = G * e[:, None]
    if_mu = p[:, None] * xc / pbar
    if if_gamma is not None:
        phi = std_normal_pdf(rmat @ gamma)
        dgamma = (phi * _dp_coef_rows(core, layout, t))[:, None] * rmat
        infl = infl + if_gamma @ (-(G.T @ dgamma) / n).T
        A = (phi[:, None] * xc).T @ rmat / n
        if_mu = if_mu + if_gamma @ A.T / pbar
    if xc.shape[1]:
        dmu = _dmu_rows(core, layout, t)
        infl = infl + if_mu @ (-(G.T @ dmu) / n).T
    omega = G.T @ G / n
    try:
        oinv = np.linalg.inv(omega)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("singular second-stage moment matrix") from exc
    meat = infl.T @ infl / n
    avar = oinv @ meat @ oinv
    return 0.5 * (avar + avar.T)


def _theta_slice(core, layout):
    m = core["r"].shape[1]
    return slice(m, 2 * m) if layout == PANEL else slice(3 * m, 4 * m)


def _first_stage_influence(fit: PopFit, data: EstimationData, fit_rows=None):
    if fit.hess_inv is None:
        raise EstimationError("first-stage fit lacks a Hessian; refit with compute_vcov=True")
    R, Z = data.r, data.zmat
    rows = np.arange(data.n) if fit_rows is None else np.flatnonzero(fit_rows)
    s = pop_scores(fit.params, data.d[rows], R[rows], Z[rows])
    kr = R.shape[1]
    infl = (s @ fit.hess_inv.T)[:, :kr]
    out = np.zeros((data.n, kr))
    out[rows] = infl * (data.n / rows.size)
    return out


def _avar_twostep(estimate: DidEstimate):
    it = estimate.intermediates
    core, data, fit = it["core"], it["data"], estimate.first_stage
    ifg = _first_stage_influence(fit, data, it.get("fit_rows"))
    avar = _sandwich(core, data.layout, data.t, data.x, ifg, data.r, fit.gamma)
    sl = _theta_slice(core, data.layout)
    avar_theta = avar[sl, sl]
    se = float(np.sqrt(avar_theta[0, 0] / data.n))
    return avar_theta, se


def avar_fd_twostep(estimate: DidEstimate):
    """Analytic asymptotic variance of the two-step FD ``theta`` and the ATT SE.

    Returns ``(avar_theta, se_tau)`` where ``avar_theta`` is the asymptotic
    covariance of ``sqrt(N) (theta_hat - theta)``.
    """
    if estimate.method != "fd_twostep":
        raise ValueError("expected a two-step FD estimate")
    return _avar_twostep(estimate)


def avar_pols_twostep(estimate: DidEstimate):
    """Analytic counterpart of :func:`avar_fd_twostep` for pooled OLS."""
    if estimate.method != "pols_twostep":
        raise ValueError("expected a two-step POLS estimate")
    return _avar_twostep(estimate)


def _avar_plain(core, data):
    avar = _sandwich(core, data.layout, data.t, data.x)
    sl = _theta_slice(core, data.layout)
    return avar[sl, sl], float(np.sqrt(avar[sl, sl][0, 0] / data.n))


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

_CAUGHT = (FirstStageError, IdentificationError, EstimationError, NumericsError, DataError,
           np.linalg.LinAlgError)


def _boot_rows(data: EstimationData, scheme: str, rng) -> np.ndarray:
    n = data.n
    if scheme == "unit_resample":
        return rng.integers(0, n, n)
    parts = []
    for tv in (0.0, 1.0):
        idx = np.flatnonzero(data.t == tv)
        parts.append(idx[rng.integers(0, idx.size, idx.size)])
    return np.concatenate(parts)


def _one_replicate(data, estimator, scheme, seed, b):
    rng = make_rng(seed, b)
    rows = _boot_rows(data, scheme, rng)
    try:
        return float(estimator(data.take(rows)))
    except _CAUGHT:
        return np.nan


def bootstrap_se(data, estimator: Callable[[EstimationData], float], plan: BootstrapPlan):
    """Bootstrap standard error of a scalar estimator.

    Units are resampled with replacement (panel) or rows are resampled within
    each period (repeated cross sections). Replicate ``b`` draws from the stream
    ``make_rng(plan.seed, b)``, so results do not depend on ``plan.n_jobs``.
    Replicates whose estimator raises a known estimation error are dropped.

    Returns
    -------
    se : float
    taus : ndarray
        Successful replicate estimates in replicate order.
    n_failed : int
    """
    data = _as_data(data)
    scheme = plan.scheme or ("unit_resample" if data.layout == PANEL else "stratified_by_T")
    if scheme == "stratified_by_T" and data.t is None:
        raise DataError("stratified bootstrap needs a time indicator")
    B = plan.replications
    if plan.n_jobs == 1:
        taus = [_one_replicate(data, estimator, scheme, plan.seed, b) for b in range(B)]
    else:
        taus = Parallel(n_jobs=plan.n_jobs)(
            delayed(_one_replicate)(data, estimator, scheme, plan.seed, b) for b in range(B))
    taus = np.asarray(taus, float)
    ok = np.isfinite(taus)
    n_failed = int(B - ok.sum())
    if n_failed > MAX_BOOT_FAILURE * B or ok.sum() < 2:
        raise BootstrapError(f"{n_failed} of {B} bootstrap replicates failed", n_failed)
    taus = taus[ok]
    return float(np.std(taus, ddof=1)), taus, n_failed


# ---------------------------------------------------------------------------
# public estimators
# ---------------------------------------------------------------------------

def _finish(method, core, data, se, plan, estimator, fit=None, diagnostics=(), avar_fn=None,
            intermediates=None):
    est = DidEstimate(
        method=method, theta=core["theta"], tau_att=core["tau"], se_tau=None, se_source=None,
        n_obs=data.n, nuisance=core["nuisance"], first_stage=fit,
        diagnostics=tuple(diagnostics),
        intermediates={"core": core, "data": data, **(intermediates or {})},
    )
    if se is None:
        return est
    if se == "analytic":
        _, s = avar_fn(est)
        return replace(est, se_tau=s, se_source="analytic")
    if se == "bootstrap":
        s, taus, n_failed = bootstrap_se(data, estimator, plan or BootstrapPlan())
        diag = est.diagnostics
        if n_failed:
            diag = diag + (f"{n_failed} bootstrap replicates failed and were dropped",)
        return replace(est, se_tau=s, se_source="bootstrap", replicate_taus=taus,
                       n_failed=n_failed, diagnostics=diag)
    raise ValueError("se must be 'bootstrap', 'analytic' or None")


def _naive_tau(data, use_true=False):
    d = data.dstar if use_true else data.d
    if data.layout == PANEL:
        _check_binary_groups(d)
    else:
        _check_rcs(replace(data, d=d), need_cells=True)
    return _core(data, d)


def did_fd_naive(panel, *, se: str | None = "bootstrap", plan: BootstrapPlan | None = None,
                 use_true_treatment: bool = False) -> DidEstimate:
    """First-difference DID with the observed treatment.

    With ``use_true_treatment=True`` the simulated ``D*`` replaces ``D``, giving
    the infeasible benchmark.
    """
    data = _as_data(panel)
    _check_panel(data)
    if use_true_treatment and data.dstar is None:
        raise DataError("dataset has no true_treatment column")
    core = _naive_tau(data, use_true_treatment)
    method = "fd_true" if use_true_treatment else "fd_naive"
    return _finish(method, core, data, se, plan,
                   lambda b: _naive_tau(b, use_true_treatment)["tau"],
                   avar_fn=lambda e: _avar_plain(core, data))


def did_pols_naive(rcs, *, se: str | None = "bootstrap", plan: BootstrapPlan | None = None,
                   use_true_treatment: bool = False) -> DidEstimate:
    """Pooled interacted OLS DID with the observed treatment."""
    data = _as_data(rcs)
    if use_true_treatment and data.dstar is None:
        raise DataError("dataset has no true_treatment column")
    _check_rcs(data, need_cells=False)
    core = _naive_tau(data, use_true_treatment)
    method = "pols_true" if use_true_treatment else "pols_naive"
    return _finish(method, core, data, se, plan,
                   lambda b: _naive_tau(b, use_true_treatment)["tau"],
                   avar_fn=lambda e: _avar_plain(core, data))


def twostep_from_probs(data, p) -> DidEstimate:
    """Second stage with externally supplied treatment probabilities (no SE)."""
    data = _as_data(data)
    if data.layout == RCS:
        _check_rcs(data, need_cells=False)
    core = _core(data, np.asarray(p, float))
    method = "fd_twostep" if data.layout == PANEL else "pols_twostep"
    return DidEstimate(method=method, theta=core["theta"], tau_att=core["tau"], se_tau=None,
                       se_source=None, n_obs=data.n, nuisance=core["nuisance"],
                       intermediates={"core": core, "data": data})


def _twostep(data: EstimationData, spec, fit_rows, fit_kwargs):
    R, Z = data.r, data.zmat
    rows = slice(None) if fit_rows is None else fit_rows
    fit = pop_fit_arrays(data.d[rows], R[rows], Z[rows], spec=spec, **fit_kwargs)
    if not fit.converged:
        raise FirstStageError("first stage did not converge: " + "; ".join(fit.diagnostics), fit)
    p = predict_dstar(fit, R)
    return fit, _core(data, p)


def _run_twostep(method, data, pop_spec, plan, se, fit_rows, fit_options):
    spec = pop_spec
    if spec is None:
        spec = PopSpec(("const",) + tuple(data.covariates), ("const",) + tuple(data.instruments))
    if data.z.shape[1] == 0:
        raise IdentificationError("no instruments for the misclassification index")
    fit, core = _twostep(data, spec, fit_rows, dict(fit_options or {}))

    def boot(b: EstimationData) -> float:
        rows = None if fit_rows is None else (b.t == 0)
        _, c = _twostep(b, spec, rows, {"init": fit.params, "hess_inv0": fit.hess_inv,
                                        "compute_vcov": False, **(fit_options or {})})
        return c["tau"]

    diag = tuple(f"first stage: {d}" for d in fit.diagnostics)
    return _finish(method, core, data, se, plan, boot, fit=fit, diagnostics=diag,
                   avar_fn=_avar_twostep, intermediates={"fit_rows": fit_rows})


def did_fd_twostep(panel, pop_spec: PopSpec | None = None, plan: BootstrapPlan | None = None, *,
                   se: str | None = "bootstrap", fit_options: dict | None = None) -> DidEstimate:
    """Two-step FD: partial observability probit, then FD with ``Phi(R gamma_hat)``.

    The bootstrap re-estimates both stages in every replicate, warm-starting the
    first stage at the full-sample estimate.
    """
    data = _as_data(panel)
    _check_panel(data)
    return _run_twostep("fd_twostep", data, pop_spec, plan, se, None, fit_options)


def did_pols_twostep(rcs, pop_spec: PopSpec | None = None, plan: BootstrapPlan | None = None, *,
                     se: str | None = "bootstrap", first_stage_rows: str = "pooled",
                     fit_options: dict | None = None) -> DidEstimate:
    """Two-step pooled OLS for repeated cross sections.

    The first stage uses all rows by default; ``first_stage_rows="baseline"``
    restricts it to ``T = 0``.
    """
    data = _as_data(rcs)
    _check_rcs(data, need_cells=False)
    if first_stage_rows not in ("pooled", "baseline"):
        raise ValueError("first_stage_rows must be 'pooled' or 'baseline'")
    fit_rows = None if first_stage_rows == "pooled" else (data.t == 0)
    return _run_twostep("pols_twostep", data, pop_spec, plan, se, fit_rows, fit_options)


ESTIMATORS = {
    "fd_naive": did_fd_naive,
    "fd_twostep": did_fd_twostep,
    "pols_naive": did_pols_naive,
    "pols_twostep": did_pols_twostep,
}
