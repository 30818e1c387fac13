from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from misdid.bias_lab import DgpConfig, benchmark_dgp, simulate_panel, simulate_rcs
from misdid.data import DataError, Dataset, Roles
from misdid.estimators import (
    BootstrapError,
    BootstrapPlan,
    EstimationData,
    EstimationError,
    OverlapError,
    avar_fd_twostep,
    avar_pols_twostep,
    bootstrap_se,
    did_fd_naive,
    did_fd_twostep,
    did_pols_naive,
    did_pols_twostep,
    twostep_from_probs,
)
from misdid.numerics import make_rng, std_normal_cdf
from misdid.pop import FirstStageError

NO_COVARIATES = DgpConfig(k=0, gamma=(0.2,), delta=(0.5,), theta=(1.0,), eta1=(1.0,),
                          eta2=(0.5,))
NO_MISCLASSIFICATION = DgpConfig(alpha=(8.0, 0.9))


def lstsq(X, y):
    return np.linalg.lstsq(X, y, rcond=None)[0]


def centred(x, w):
    mu = (w @ x) / w.sum()
    return np.column_stack([np.ones(len(x)), x - mu])


def subsample_theta(data: EstimationData, p):
    """Slope on ``p * R`` from separate regressions in each period, differenced."""
    R = centred(data.x, p)
    W = p[:, None] * R
    m = R.shape[1]
    out = []
    for tv in (1.0, 0.0):
        rows = data.t == tv
        out.append(lstsq(np.column_stack([R, W])[rows], data.y[rows])[m:])
    return out[0] - out[1]


@pytest.fixture(scope="module")
def panel():
    return simulate_panel(benchmark_dgp(), 600, 11)


@pytest.fixture(scope="module")
def rcs():
    return simulate_rcs(benchmark_dgp(), 1200, 12)


PLAN = BootstrapPlan(replications=20, seed=3)


class TestNaiveFd:
    def test_no_covariates_equals_cell_means(self):
        ds = simulate_panel(NO_COVARIATES, 2000, 1)
        est = did_fd_naive(ds, se=None)
        f = ds.frame
        cell = f.groupby(["d", "t"])["y"].mean()
        raw = (cell[1, 1] - cell[1, 0]) - (cell[0, 1] - cell[0, 0])
        assert est.tau_att == pytest.approx(raw, abs=1e-10)
        assert est.theta.shape == (1,)

    def test_constant_change_in_outcome(self, panel):
        ds = panel.with_outcome(np.where(panel.t == 1, 2.5, 0.0) + np.repeat(
            make_rng(0).standard_normal(panel.n_units), 2))
        est = did_fd_naive(ds, se=None)
        np.testing.assert_allclose(est.theta, 0, atol=1e-12)
        assert est.tau_att == pytest.approx(0, abs=1e-12)
        np.testing.assert_allclose(est.nuisance["delta"], [2.5, 0.0], atol=1e-12)

    def test_matches_long_regression(self, panel):
        data = EstimationData.from_dataset(panel)
        R = centred(data.x, data.d)
        ref = lstsq(np.column_stack([R, data.d[:, None] * R]), data.y)
        est = did_fd_naive(panel, se=None)
        np.testing.assert_allclose(est.theta, ref[2:], atol=1e-10)
        assert est.tau_att == pytest.approx(
            np.sum(data.d * (R @ est.theta)) / data.d.sum(), abs=1e-12)

    def test_unbiased_without_misclassification(self):
        ds = simulate_panel(NO_MISCLASSIFICATION, 50_000, 2)
        est = did_fd_naive(ds, se="analytic")
        assert abs(est.tau_att - 1.0) < 3 * est.se_tau

    def test_infeasible_benchmark_uses_true_treatment(self):
        ds = simulate_panel(benchmark_dgp(), 50_000, 3)
        est = did_fd_naive(ds, se="analytic", use_true_treatment=True)
        assert est.method == "fd_true"
        assert abs(est.tau_att - 1.0) < 3 * est.se_tau
        naive = did_fd_naive(ds, se="analytic")
        assert abs(naive.tau_att - 1.0) > 5 * naive.se_tau

    def test_no_treated_units(self, panel):
        with pytest.raises(DataError, match="no treated"):
            did_fd_naive(panel.with_treatment(np.zeros(panel.n_rows)), se=None)

    def test_rejects_cross_sections(self, rcs):
        with pytest.raises(DataError):
            did_fd_naive(rcs, se=None)

    def test_collinear_covariate_is_named(self, panel):
        f = panel.frame.copy()
        f["x2"] = 2.0 * f["x1"]
        roles = Roles(outcome="y", time="t", treatment="d", id="id", covariates=("x1", "x2"),
                      instruments=("z1",))
        with pytest.raises(EstimationError, match="x2|x1"):
            did_fd_naive(Dataset(f, roles), se=None)


class TestPooledNaive:
    def test_equals_subsample_difference(self, rcs):
        data = EstimationData.from_dataset(rcs)
        est = did_pols_naive(rcs, se=None)
        np.testing.assert_allclose(est.theta, subsample_theta(data, data.d), atol=1e-8)

    def test_unchanged_outcome_gives_zero(self):
        base = simulate_rcs(benchmark_dgp(), 400, 5).frame
        f = pd.concat([base.assign(t=0.0), base.assign(t=1.0)], ignore_index=True)
        ds = Dataset(f, simulate_rcs(benchmark_dgp(), 2, 0).roles)
        est = did_pols_naive(ds, se=None)
        assert est.tau_att == pytest.approx(0, abs=1e-10)

    def test_unbiased_without_misclassification(self):
        ds = simulate_rcs(NO_MISCLASSIFICATION, 50_000, 6)
        est = did_pols_naive(ds, se="analytic")
        assert abs(est.tau_att - 1.0) < 3 * est.se_tau

    def test_empty_cell_is_named(self, rcs):
        d = np.where(rcs.t == 1, 0.0, rcs.d)
        with pytest.raises(DataError, match="D=1, T=1"):
            did_pols_naive(rcs.with_treatment(d), se=None)

    def test_constant_time(self, rcs):
        keep = np.flatnonzero(rcs.t == 0)
        with pytest.raises(DataError, match="constant"):
            did_pols_naive(rcs.take(keep), se=None)

    def test_nuisance_blocks(self, rcs):
        est = did_pols_naive(rcs, se=None)
        assert set(est.nuisance) == {"eta1", "eta2", "delta"}
        assert all(v.shape == (2,) for v in est.nuisance.values())


class TestTwoStep:
    def test_observed_weights_reproduce_naive_fd(self, panel):
        data = EstimationData.from_dataset(panel)
        a = twostep_from_probs(data, data.d)
        b = did_fd_naive(panel, se=None)
        assert a.tau_att == pytest.approx(b.tau_att, abs=1e-10)
        np.testing.assert_allclose(a.theta, b.theta, atol=1e-10)

    def test_observed_weights_reproduce_naive_pols(self, rcs):
        data = EstimationData.from_dataset(rcs)
        assert twostep_from_probs(data, data.d).tau_att == pytest.approx(
            did_pols_naive(rcs, se=None).tau_att, abs=1e-10)

    def test_partialled_equals_long_regression(self, panel):
        est = did_fd_twostep(panel, se=None)
        data = EstimationData.from_dataset(panel)
        p = std_normal_cdf(data.r @ est.first_stage.gamma)
        R = centred(data.x, p)
        ref = lstsq(np.column_stack([R, p[:, None] * R]), data.y)
        np.testing.assert_allclose(est.theta, ref[2:], atol=1e-8)
        assert est.tau_att == pytest.approx(np.sum(p * (R @ est.theta)) / p.sum(), abs=1e-12)

    def test_pooled_equals_subsample_difference(self, rcs):
        est = did_pols_twostep(rcs, se=None)
        data = EstimationData.from_dataset(rcs)
        p = std_normal_cdf(data.r @ est.first_stage.gamma)
        np.testing.assert_allclose(est.theta, subsample_theta(data, p), atol=1e-8)

    def test_vanishing_probabilities(self, panel):
        data = EstimationData.from_dataset(panel)
        with pytest.raises(OverlapError):
            twostep_from_probs(data, np.full(data.n, 1e-9))

    def test_first_stage_failure_propagates(self, panel):
        with pytest.raises(FirstStageError) as info:
            did_fd_twostep(panel, se=None, fit_options={"max_iter": 1})
        assert info.value.fit is not None and not info.value.fit.converged

    def test_baseline_first_stage(self, rcs):
        est = did_pols_twostep(rcs, se=None, first_stage_rows="baseline")
        assert est.first_stage.n_obs == int((rcs.t == 0).sum())
        with pytest.raises(ValueError):
            did_pols_twostep(rcs, se=None, first_stage_rows="treated")

    def test_constant_time(self, rcs):
        with pytest.raises(DataError):
            did_pols_twostep(rcs.take(np.flatnonzero(rcs.t == 1)), se=None)

    def test_corrects_misclassification_bias(self):
        ds = simulate_panel(benchmark_dgp(), 20_000, 4)
        two = did_fd_twostep(ds, se="analytic")
        naive = did_fd_naive(ds, se="analytic")
        assert abs(two.tau_att - 1.0) < 3 * two.se_tau
        assert abs(naive.tau_att - 1.0) > 5 * naive.se_tau

    def test_report_is_json_serialisable(self, panel):
        est = did_fd_twostep(panel, plan=BootstrapPlan(replications=5, seed=1))
        out = json.loads(json.dumps(est.to_dict()))
        assert out["method"] == "fd_twostep"
        assert set(out["first_stage"]) >= {"gamma", "alpha", "rho"}
        assert out["se"] > 0


ALL = {
    "fd_naive": (did_fd_naive, "panel"),
    "fd_twostep": (did_fd_twostep, "panel"),
    "pols_naive": (did_pols_naive, "rcs"),
    "pols_twostep": (did_pols_twostep, "rcs"),
}


class TestEquivariance:
    @pytest.mark.parametrize("name", sorted(ALL))
    @pytest.mark.parametrize("c", [-3.0, 0.25])
    def test_outcome_scaling(self, name, c, request):
        fn, layout = ALL[name]
        ds = request.getfixturevalue(layout)
        a = fn(ds, plan=PLAN)
        b = fn(ds.with_outcome(c * ds.y), plan=PLAN)
        assert b.tau_att == pytest.approx(c * a.tau_att, rel=1e-10)
        assert b.se_tau == pytest.approx(abs(c) * a.se_tau, rel=1e-10)

    @pytest.mark.parametrize("name", sorted(ALL))
    def test_outcome_shift(self, name, request):
        fn, layout = ALL[name]
        ds = request.getfixturevalue(layout)
        a = fn(ds, se=None)
        b = fn(ds.with_outcome(ds.y + 17.0), se=None)
        assert b.tau_att == pytest.approx(a.tau_att, rel=1e-10, abs=1e-10)


class TestAnalyticVariance:
    @pytest.mark.parametrize("layout", ["panel", "rcs"])
    def test_symmetric_psd(self, layout, request):
        ds = request.getfixturevalue(layout)
        if layout == "panel":
            est = did_fd_twostep(ds, se=None)
            avar, se = avar_fd_twostep(est)
        else:
            est = did_pols_twostep(ds, se=None)
            avar, se = avar_pols_twostep(est)
        np.testing.assert_array_equal(avar, avar.T)
        assert np.linalg.eigvalsh(avar).min() >= -1e-12 * np.abs(avar).max()
        assert se == pytest.approx(np.sqrt(avar[0, 0] / est.n_obs))

    def test_method_checked(self, panel):
        with pytest.raises(ValueError):
            avar_pols_twostep(did_fd_twostep(panel, se=None))

    def test_baseline_first_stage_variance(self, rcs):
        est = did_pols_twostep(rcs, se="analytic", first_stage_rows="baseline")
        assert est.se_tau > 0

    @pytest.mark.slow
    def test_close_to_bootstrap(self):
        ds = simulate_panel(benchmark_dgp(), 4000, 21)
        est = did_fd_twostep(ds, plan=BootstrapPlan(replications=200, seed=5))
        _, analytic = avar_fd_twostep(est)
        assert abs(analytic / est.se_tau - 1) < 0.20


class TestBootstrap:
    def test_constant_estimator(self, panel):
        se, taus, failed = bootstrap_se(panel, lambda b: 4.0, PLAN)
        assert se == 0.0 and failed == 0
        assert np.all(taus == 4.0)

    def test_deterministic_and_job_independent(self, panel):
        est = lambda b: float(b.y.mean())
        one = bootstrap_se(panel, est, PLAN)
        again = bootstrap_se(panel, est, PLAN)
        two = bootstrap_se(panel, est, BootstrapPlan(replications=20, seed=3, n_jobs=2))
        assert one[0] == again[0] == two[0]
        np.testing.assert_array_equal(one[1], two[1])
        assert bootstrap_se(panel, est, BootstrapPlan(replications=20, seed=4))[0] != one[0]

    def test_stratified_scheme_keeps_period_sizes(self, rcs):
        se, _, _ = bootstrap_se(rcs, lambda b: float(b.t.sum()), PLAN)
        assert se == 0.0

    def test_failed_replicates_are_dropped(self, panel):
        calls = []

        def flaky(b):
            calls.append(1)
            if len(calls) == 2:
                raise EstimationError("boom")
            return float(b.y.mean())

        se, taus, failed = bootstrap_se(panel, flaky, PLAN)
        assert failed == 1 and taus.size == 19

    def test_excessive_failure(self, panel):
        def broken(b):
            raise OverlapError("no overlap")

        with pytest.raises(BootstrapError) as info:
            bootstrap_se(panel, broken, PLAN)
        assert info.value.n_failed == 20

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            BootstrapPlan(replications=1)
        with pytest.raises(ValueError):
            BootstrapPlan(scheme="wild")
