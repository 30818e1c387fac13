"""Acceptance suite.

Every test prints a single ``[criterion N] PASS|FAIL`` line with the measured
quantities and the tolerance it was judged against, then asserts.
"""

from __future__ import annotations

import itertools
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import integrate

from misdid.bias_lab import (
    DgpConfig,
    DiscreteJoint,
    benchmark_dgp,
    clean_dgp,
    decompose_did,
    monte_carlo,
    prop1_predict,
    simple_did_bias,
    simulate_panel,
    simulate_rcs,
    theorem1_bias_fd,
    theorem1_bias_pols,
)
from misdid.cli import main
from misdid.data import write_csv
from misdid.estimators import (
    EstimationData,
    did_fd_naive,
    did_fd_twostep,
    did_pols_naive,
    did_pols_twostep,
)
from misdid.numerics import bvn_cdf, bvn_pdf, make_rng, std_normal_cdf, tallis_moment
from misdid.pop import pop_design, pop_fit, pop_score

sys.path.insert(0, str(Path(__file__).parent))
from test_pop import fd_gradient  # noqa: E402

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

DATA = Path(__file__).parent / "data"
JOBS = os.cpu_count() or 1
K0 = dict(k=0, gamma=(0.2,), delta=(0.5,), theta=(1.0,), eta1=(1.0,), eta2=(0.5,))


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def test_criterion_1_bivariate_cdf(capsys):
    start = time.perf_counter()
    rows = np.array(json.loads((DATA / "bvn_grid.json").read_text())["rows"])
    assert rows.shape == (15 * 15 * 9, 4)
    a, b, rho, ref = rows.T
    got = bvn_cdf(a, b, rho)
    origin = (a == 0) & (b == 0)
    closed = 0.25 + np.arcsin(rho[origin]) / (2 * np.pi)
    err_origin = np.max(np.abs(got[origin] - closed))
    err_grid = np.max(np.abs(got[~origin] - ref[~origin]))
    # live two-dimensional adaptive quadrature on an evenly strided subset
    sub = np.flatnonzero(~origin)[::45]
    live = []
    for i in sub:
        r = rho[i]
        val, _ = integrate.dblquad(lambda y, x: bvn_pdf(x, y, r), -10, a[i], -10, b[i],
                                   epsabs=1e-14, epsrel=1e-13)
        live.append(abs(got[i] - val))
    err_live = max(live)
    elapsed = time.perf_counter() - start
    ok = err_origin <= 1e-12 and err_grid <= 1e-10 and err_live <= 1e-10 and elapsed < 10
    verdict(capsys, 1, ok,
            f"origin max err {err_origin:.1e} (tol 1e-12); grid max err {err_grid:.1e} over "
            f"{(~origin).sum()} points and 2-D quadrature max err {err_live:.1e} on {sub.size} "
            f"points (tol 1e-10); {elapsed:.1f}s (limit 10s)")


def test_criterion_2_tallis(capsys):
    start = time.perf_counter()
    sigma, psi = 1.3, 0.4
    rng = make_rng(2)
    n, chunks = 10_000_000, 5
    z_scores = []
    grid = list(itertools.product([-1.0, 0.0, 1.2], [-0.8, 0.3, 1.5], [-0.6, 0.0, 0.7]))
    for rg, za, rho in grid:
        # xi = sigma (c_u U + c_v V + c_e E) with Cov(xi, U) = 0 and Cov(xi, V) = psi sigma
        cu, cv = np.linalg.solve([[1.0, rho], [rho, 1.0]], [0.0, psi])
        ce = np.sqrt(1.0 - (cu * cu + cv * cv + 2 * cu * cv * rho))
        s = s2 = 0.0
        for _ in range(chunks):
            m = n // chunks
            u = rng.standard_normal(m)
            v = rho * u + np.sqrt(1 - rho * rho) * rng.standard_normal(m)
            xi = sigma * (cu * u + cv * v + ce * rng.standard_normal(m))
            f = xi * ((u >= -rg) & (v >= -za))
            s += f.sum()
            s2 += (f * f).sum()
        mean = s / n
        mcse = np.sqrt((s2 / n - mean * mean) / n)
        z_scores.append((tallis_moment(rg, za, rho, sigma, psi) - mean) / mcse)
    worst = float(np.max(np.abs(z_scores)))
    elapsed = time.perf_counter() - start
    ok = worst <= 3 and elapsed < 120
    verdict(capsys, 2, ok, f"max |closed form - MC| = {worst:.2f} MC SEs over {len(grid)} "
                           f"points at 1e7 draws (tol 3); {elapsed:.1f}s (limit 120s)")


def test_criterion_3_proposition_one(capsys):
    start = time.perf_counter()
    rng = make_rng(3)
    worst = 0.0
    n_cases = 1000
    for _ in range(n_cases):
        prob = rng.dirichlet(np.ones(4)).reshape(2, 2)
        att, atu, g1, g0 = rng.uniform(-5, 5, 4)
        joint = DiscreteJoint.non_differential(prob, att, atu, g1, g0)
        rep = decompose_did(joint)
        t1, t2 = prop1_predict(rep.att, rep.atu, rep.q1, rep.q0, rep.dt_star)
        worst = max(worst, abs(t1 - rep.term1), abs(t2 - rep.term2))
    degenerate = 0.0
    parallel = 0.0
    for _ in range(200):
        q1, p1 = rng.uniform(0.05, 0.95, 2)
        q0 = 1.0 - q1
        prob = np.array([[q0 * (1 - p1), (1 - q0) * (1 - p1)], [(1 - q1) * p1, q1 * p1]])
        att, atu, g1, g0, g = rng.uniform(-5, 5, 5)
        degenerate = max(degenerate, abs(decompose_did(
            DiscreteJoint.non_differential(prob, att, atu, g1, g0)).term2))
        # equal counterfactual trends across D* imply equal trends across D
        parallel = max(parallel, abs(decompose_did(
            DiscreteJoint.non_differential(prob, att, atu, g, g)).dt_obs))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and degenerate <= 1e-12 and parallel <= 1e-12 and elapsed < 5
    verdict(capsys, 3, ok, f"max |prediction - enumeration| {worst:.1e} over {n_cases} joints; "
                           f"q1+q0=1 max |term2| {degenerate:.1e}; equal-trend max |DT(D)| "
                           f"{parallel:.1e} (tol 1e-12); {elapsed:.2f}s (limit 5s)")


def test_criterion_4_pop_recovery(capsys):
    start = time.perf_counter()
    dgp = benchmark_dgp()
    truth = np.r_[dgp.gamma, dgp.alpha, dgp.rho]
    estimates = []
    n_failed = 0
    for seed in range(50):
        fit = pop_fit(simulate_panel(dgp, 20_000, 1000 + seed))
        n_failed += not fit.converged
        estimates.append(np.r_[fit.gamma, fit.alpha, fit.rho])
    median_err = np.abs(np.median(estimates, axis=0) - truth)
    # analytic score against Richardson central differences near the truth
    D, R, Z = pop_design(simulate_panel(dgp, 500, 99))
    rng = make_rng(4)
    packed = np.r_[dgp.gamma, dgp.alpha, np.arctanh(dgp.rho)]
    score_err = 0.0
    for _ in range(100):
        p = packed + rng.uniform(-1, 1, packed.size)
        g, fd = pop_score(p, D, R, Z), fd_gradient(p, D, R, Z)
        score_err = max(score_err, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8))))
    elapsed = time.perf_counter() - start
    ok = median_err.max() <= 0.05 and score_err <= 1e-5 and n_failed == 0 and elapsed < 300
    verdict(capsys, 4, ok, f"median |error| per coordinate {np.round(median_err, 4).tolist()} "
                           f"(tol 0.05, {n_failed} non-converged of 50); score max rel err "
                           f"{score_err:.1e} on 100 points (tol 1e-5); {elapsed:.0f}s (limit 300s)")


def test_criterion_5_theorem_one(capsys):
    start = time.perf_counter()
    dgp = benchmark_dgp()
    lines = []
    ok = True
    for layout, name, plug_in in (("panel", "fd_naive", theorem1_bias_fd),
                                  ("rcs", "pols_naive", theorem1_bias_pols)):
        rep = monte_carlo(dgp, layout, [name], 200_000, 200, 5, se=None, n_jobs=JOBS)
        s = rep.summary(name)
        predicted = plug_in(dgp)
        tol = max(3 * s.mcse, 0.005)
        ok &= abs(s.bias - predicted) <= tol
        lines.append(f"{name} MC bias {s.bias:.4f} vs plug-in {predicted:.4f} "
                     f"(|diff| {abs(s.bias - predicted):.4f}, tol {tol:.4f})")
    k0 = DgpConfig(**K0)
    nest = abs(theorem1_bias_fd(k0) - simple_did_bias(k0))
    ok &= nest <= 1e-3
    elapsed = time.perf_counter() - start
    ok &= elapsed < 900
    verdict(capsys, 5, ok, "; ".join(lines) + f"; k=0 nesting |diff| {nest:.1e} (tol 1e-3); "
                           f"{elapsed:.0f}s (limit 900s)")


def test_criterion_6_two_step_consistency(capsys):
    start = time.perf_counter()
    dgp = benchmark_dgp()
    lines = []
    ok = True
    for layout, prefix in (("panel", "fd"), ("rcs", "pols")):
        rep = monte_carlo(dgp, layout, [f"{prefix}_naive", f"{prefix}_twostep"], 4000, 500, 6,
                          se=None, n_jobs=JOBS)
        two, naive = rep.summary(f"{prefix}_twostep"), rep.summary(f"{prefix}_naive")
        ok &= abs(two.bias) <= 3 * two.mcse and abs(naive.bias) > 10 * naive.mcse
        lines.append(f"{prefix} two-step bias {two.bias:+.4f} = {two.bias / two.mcse:+.2f} MCSE "
                     f"(tol 3), naive bias {naive.bias:+.4f} = {naive.bias / naive.mcse:+.1f} "
                     f"MCSE (need > 10)")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1200
    verdict(capsys, 6, ok, "; ".join(lines) + f"; {elapsed:.0f}s (limit 1200s)")


def test_criterion_7_inference(capsys):
    start = time.perf_counter()
    boot = monte_carlo(benchmark_dgp(), "panel", ["fd_twostep"], 4000, 500, 6,
                       se="bootstrap", boot=200, n_jobs=JOBS).summary("fd_twostep")
    clean = monte_carlo(clean_dgp(), "panel", ["fd_twostep"], 4000, 500, 7,
                        se="analytic", n_jobs=JOBS).summary("fd_twostep")
    ratio = clean.mean_se / clean.sd
    elapsed = time.perf_counter() - start
    ok = 0.92 <= boot.coverage <= 0.975 and abs(ratio - 1) <= 0.20 and elapsed < 2700
    verdict(capsys, 7, ok, f"bootstrap 95% CI coverage {boot.coverage:.3f} over {boot.reps_ok} "
                           f"reps (need [0.92, 0.975]); clean-design mean analytic SE "
                           f"{clean.mean_se:.4f} vs MC SD {clean.sd:.4f}, ratio {ratio:.3f} "
                           f"(tol 20%); {elapsed:.0f}s (limit 2700s)")


def test_criterion_8_equivalences(capsys):
    panel = simulate_panel(benchmark_dgp(), 3000, 8)
    rcs = simulate_rcs(benchmark_dgp(), 6000, 9)

    def lstsq(X, y):
        return np.linalg.lstsq(X, y, rcond=None)[0]

    def centred(x, w):
        return np.column_stack([np.ones(len(x)), x - (w @ x) / w.sum()])

    # long regression against the partialled two-step coefficient block
    est = did_fd_twostep(panel, se=None)
    data = EstimationData.from_dataset(panel)
    p = std_normal_cdf(data.r @ est.first_stage.gamma)
    Rc = centred(data.x, p)
    fw = np.max(np.abs(lstsq(np.column_stack([Rc, p[:, None] * Rc]), data.y)[2:] - est.theta))

    # pooled interacted fit against differenced period-by-period fits
    sub = 0.0
    rdata = EstimationData.from_dataset(rcs)
    for est, w in ((did_pols_naive(rcs, se=None), rdata.d),
                   (did_pols_twostep(rcs, se=None), None)):
        if w is None:
            w = std_normal_cdf(rdata.r @ est.first_stage.gamma)
        Rc = centred(rdata.x, w)
        G = np.column_stack([Rc, w[:, None] * Rc])
        post = lstsq(G[rdata.t == 1], rdata.y[rdata.t == 1])[2:]
        pre = lstsq(G[rdata.t == 0], rdata.y[rdata.t == 0])[2:]
        sub = max(sub, np.max(np.abs(post - pre - est.theta)))

    # covariate-free naive FD against cell means
    k0 = simulate_panel(DgpConfig(**K0), 3000, 10)
    cell = k0.frame.groupby(["d", "t"])["y"].mean()
    raw = (cell[1, 1] - cell[1, 0]) - (cell[0, 1] - cell[0, 0])
    cells = abs(did_fd_naive(k0, se=None).tau_att - raw)

    equi = 0.0
    for fn, ds in ((did_fd_naive, panel), (did_fd_twostep, panel), (did_pols_naive, rcs),
                   (did_pols_twostep, rcs)):
        base = fn(ds, se=None).tau_att
        for c in (-2.5, 1e-3, 40.0):
            equi = max(equi, abs(fn(ds.with_outcome(c * ds.y), se=None).tau_att / (c * base) - 1))
        shifted = fn(ds.with_outcome(ds.y + 123.0), se=None).tau_att
        equi = max(equi, abs(shifted / base - 1))
    ok = fw <= 1e-8 and sub <= 1e-8 and cells <= 1e-10 and equi <= 1e-10
    verdict(capsys, 8, ok, f"Frisch-Waugh {fw:.1e} (tol 1e-8); subsample difference {sub:.1e} "
                           f"(tol 1e-8); k=0 cell means {cells:.1e} (tol 1e-10); scale/shift "
                           f"max rel {equi:.1e} (tol 1e-10)")


def test_criterion_9_cli_determinism(capsys, tmp_path):
    panel = tmp_path / "panel.csv"
    rcs = tmp_path / "rcs.csv"
    write_csv(simulate_panel(benchmark_dgp(), 1500, 1), panel)
    write_csv(simulate_rcs(benchmark_dgp(), 3000, 2), rcs)
    proles, rroles = tmp_path / "panel.yaml", tmp_path / "rcs.yaml"
    proles.write_text(yaml.safe_dump(simulate_panel(benchmark_dgp(), 2, 0).roles.to_mapping()))
    rroles.write_text(yaml.safe_dump(simulate_rcs(benchmark_dgp(), 2, 0).roles.to_mapping()))
    joint = tmp_path / "joint.yaml"
    joint.write_text(yaml.safe_dump({"prob": [[0.5, 0.1], [0.0, 0.4]],
                                     "te": [[0.2, 1.0], [0.2, 1.5]],
                                     "gain": [[0.0, 0.3], [0.0, 0.4]]}))
    commands = {
        "pop-fit": ["pop-fit", "--input", str(panel), "--roles", str(proles)],
        "estimate-panel": ["estimate", "--input", str(panel), "--roles", str(proles),
                           "--boot", "20", "--seed", "3", "--csv", "{dir}/est.csv"],
        "estimate-rcs": ["estimate", "--input", str(rcs), "--roles", str(rroles),
                         "--se", "analytic", "--first-stage-rows", "baseline"],
        "simulate": ["simulate", "--n", "2000", "--reps", "3", "--boot", "10", "--seed", "11",
                     "--dump-replicate", "{dir}/rep0.csv"],
        "decompose-joint": ["decompose", "--joint", str(joint)],
        "decompose-dgp": ["decompose", "--moment-sample", "100000", "--seed", "5"],
    }
    identical = []
    for label, argv in commands.items():
        outputs = []
        for run in ("a", "b"):
            folder = tmp_path / run / label
            folder.mkdir(parents=True)
            args = [a.format(dir=folder) for a in argv]
            target = folder if label == "simulate" else folder / "report.json"
            code = main(args + ["--out", str(target), "--jobs", "1"])
            assert code == 0, label
            outputs.append({p.relative_to(folder): p.read_bytes()
                            for p in sorted(folder.rglob("*")) if p.is_file()})
        identical.append(outputs[0] == outputs[1] and len(outputs[0]) > 0)
    capsys.readouterr()
    ok = all(identical)
    verdict(capsys, 9, ok, f"{sum(identical)} of {len(identical)} CLI runs byte-identical "
                           f"across repeats ({', '.join(commands)})")
