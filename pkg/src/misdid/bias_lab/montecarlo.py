"""Monte Carlo harness for the DID estimators."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from ..estimators import (
    BootstrapPlan,
    EstimationData,
    did_fd_naive,
    did_fd_twostep,
    did_pols_naive,
    did_pols_twostep,
)
from ..estimators import _CAUGHT
from ..estimators import BootstrapError
from ..numerics import make_rng
from .dgp import DgpConfig, simulate

MAX_REP_FAILURE = 0.05
Z95 = 1.96

PANEL_ESTIMATORS = ("fd_naive", "fd_twostep", "fd_true")
RCS_ESTIMATORS = ("pols_naive", "pols_twostep", "pols_true")


class McError(RuntimeError):
    def __init__(self, message: str, failures=()):
        super().__init__(message)
        self.failures = list(failures)


def _run(name, data, se, plan):
    if name == "fd_naive":
        return did_fd_naive(data, se=se, plan=plan)
    if name == "fd_true":
        return did_fd_naive(data, se=se, plan=plan, use_true_treatment=True)
    if name == "fd_twostep":
        return did_fd_twostep(data, plan=plan, se=se)
    if name == "pols_naive":
        return did_pols_naive(data, se=se, plan=plan)
    if name == "pols_true":
        return did_pols_naive(data, se=se, plan=plan, use_true_treatment=True)
    if name == "pols_twostep":
        return did_pols_twostep(data, plan=plan, se=se)
    raise ValueError(f"unknown estimator {name!r}")


def replicate_seeds(seed: int, rep: int) -> tuple[int, int]:
    """Data and bootstrap seeds for replicate `rep`."""
    draws = make_rng(seed, rep).integers(0, 2**63 - 1, size=2)
    return int(draws[0]), int(draws[1])


def _replicate(dgp, layout, estimators, n, seed, rep, se, boot):
    data_seed, boot_seed = replicate_seeds(seed, rep)
    data = EstimationData.from_dataset(simulate(dgp, layout, n, data_seed))
    out = []
    for name in estimators:
        mode = se.get(name) if isinstance(se, dict) else se
        plan = BootstrapPlan(replications=boot, seed=boot_seed) if mode == "bootstrap" else None
        try:
            est = _run(name, data, mode, plan)
            out.append((rep, name, est.tau_att, est.se_tau, ""))
        except (*_CAUGHT, BootstrapError) as exc:
            out.append((rep, name, np.nan, None, f"{type(exc).__name__}: {exc}"))
    return out


@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    reps_ok: int
    failed: int
    mean: float
    bias: float
    sd: float
    mcse: float
    rmse: float
    coverage: float | None
    mean_se: float | None

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class McReport:
    summaries: tuple[EstimatorSummary, ...]
    truth: float
    n: int
    reps: int
    seed: int
    layout: str
    dgp: dict
    replicates: tuple = field(default=(), repr=False)

    def summary(self, estimator: str) -> EstimatorSummary:
        for s in self.summaries:
            if s.estimator == estimator:
                return s
        raise KeyError(estimator)

    def taus(self, estimator: str) -> np.ndarray:
        return np.array([r[2] for r in self.replicates if r[1] == estimator], float)

    def ses(self, estimator: str) -> np.ndarray:
        return np.array([np.nan if r[3] is None else r[3] for r in self.replicates
                         if r[1] == estimator], float)

    def to_dict(self) -> dict:
        return {
            "truth": self.truth, "n": self.n, "reps": self.reps, "seed": self.seed,
            "layout": self.layout, "dgp": self.dgp,
            "estimators": [s.as_row() for s in self.summaries],
        }

    def write_csv(self, path) -> None:
        cols = list(EstimatorSummary.__dataclass_fields__)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for s in self.summaries:
                writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v)
                                 for v in (getattr(s, c) for c in cols)])

    def write_replicates_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["replicate", "estimator", "tau", "se", "error"])
            for rep, name, tau, se, err in self.replicates:
                writer.writerow([rep, name, repr(float(tau)), "" if se is None else repr(float(se)),
                                 err])

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _summarise(name, rows, truth):
    taus = np.array([r[2] for r in rows], float)
    ok = np.isfinite(taus)
    t = taus[ok]
    ses = np.array([np.nan if r[3] is None else r[3] for r in rows], float)[ok]
    reps_ok = int(ok.sum())
    mean = float(t.mean()) if reps_ok else float("nan")
    sd = float(t.std(ddof=1)) if reps_ok > 1 else float("nan")
    coverage = None
    mean_se = None
    if reps_ok and np.all(np.isfinite(ses)):
        coverage = float(np.mean(np.abs(t - truth) <= Z95 * ses))
        mean_se = float(ses.mean())
    return EstimatorSummary(
        estimator=name, reps_ok=reps_ok, failed=int((~ok).sum()), mean=mean, bias=mean - truth,
        sd=sd, mcse=float(sd / np.sqrt(reps_ok)) if reps_ok > 1 else float("nan"),
        rmse=float(np.sqrt(np.mean((t - truth) ** 2))) if reps_ok else float("nan"),
        coverage=coverage, mean_se=mean_se,
    )


def monte_carlo(dgp: DgpConfig, layout: str, estimators, n: int, reps: int, seed: int, *,
                se="bootstrap", boot: int = 200, n_jobs: int = 1) -> McReport:
    """Simulate `reps` datasets and run every requested estimator on each.

    Parameters
    ----------
    se : {"bootstrap", "analytic", None} or dict
        Standard-error method, either for all estimators or per estimator name.
    n_jobs : int
        Worker processes for replicates; results do not depend on it.

    Raises
    ------
    McError
        If more than 5% of replicates fail for any estimator.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    estimators = tuple(estimators)
    layout = "panel" if layout == "panel" else "rcs"
    allowed = PANEL_ESTIMATORS if layout == "panel" else RCS_ESTIMATORS
    bad = [e for e in estimators if e not in allowed]
    if bad:
        raise ValueError(f"estimators {bad} do not apply to layout {layout!r}")
    args = (dgp, layout, estimators, n, seed)
    if n_jobs == 1:
        chunks = [_replicate(*args, r, se, boot) for r in range(reps)]
    else:
        chunks = Parallel(n_jobs=n_jobs)(delayed(_replicate)(*args, r, se, boot)
                                         for r in range(reps))
    rows = [row for chunk in chunks for row in chunk]
    truth = dgp.tau
    summaries = []
    failures = []
    for name in estimators:
        mine = [r for r in rows if r[1] == name]
        failed = [(r[0], name, r[4]) for r in mine if r[4]]
        failures += failed
        if len(failed) > MAX_REP_FAILURE * reps:
            first = failed[0]
            raise McError(f"{len(failed)} of {reps} replicates failed for {name}; "
                          f"first at replicate {first[0]}: {first[2]}", failed)
        summaries.append(_summarise(name, mine, truth))
    return McReport(tuple(summaries), truth, n, reps, seed, layout, dgp.to_mapping(), tuple(rows))
