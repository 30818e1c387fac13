"""Population bias of the naive DID estimators under misclassification.

Moments over ``(X, Z)`` are approximated by a large design of scrambled Sobol
points mapped through the normal quantile function; the design size is
`moment_sample` rounded up to a power of two. The binary variables are integrated out analytically row by row (``D`` becomes
``Phi2(R gamma, Z alpha; rho)``, ``D*`` becomes ``Phi(R gamma)`` and
``E[D xi | X, Z]`` is the truncated-normal moment), which removes most of the
simulation noise.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg
from scipy.stats import norm, qmc

from ..numerics import bvn_cdf, make_rng, std_normal_cdf, tallis_moment
from .dgp import DgpConfig, DgpError

MOMENT_SEED = 20240601


def _design(dgp: DgpConfig, moment_sample: int, seed: int):
    dim = dgp.k + dgp.n_instruments
    m = max(1, int(np.ceil(np.log2(moment_sample))))
    g = norm.ppf(qmc.Sobol(dim, scramble=True, seed=make_rng(seed)).random_base2(m))
    n = g.shape[0]
    x, z = g[:, :dgp.k], g[:, dgp.k:]
    R = np.column_stack([np.ones(n), x])
    Z = np.column_stack([np.ones(n), z, x[:, :dgp.n_shared]])
    rg = R @ np.asarray(dgp.gamma)
    za = Z @ np.asarray(dgp.alpha)
    pd_ = bvn_cdf(rg, za, dgp.rho)             # P(D = 1 | X, Z)
    ps = std_normal_cdf(rg)                    # P(D* = 1 | X)
    m = tallis_moment(rg, za, dgp.rho, dgp.sigma, dgp.psi_v)  # E[D xi | X, Z]
    return x, pd_, ps, m


class _Moments:
    """Population regression pieces for the misclassified design ``(R., W.)``."""

    def __init__(self, dgp: DgpConfig, moment_sample: int, seed: int):
        x, pd_, ps, m = _design(dgp, moment_sample, seed)
        if pd_.mean() <= 0 or pd_.mean() >= 1:
            raise DgpError("P(D = 1) is degenerate")
        n = x.shape[0]
        mu_d = pd_ @ x / pd_.sum()              # E[X | D = 1]
        rdot = np.column_stack([np.ones(n), x - mu_d])
        rring = np.column_stack([np.ones(n), x - dgp.centering])
        Err = rdot.T @ rdot / n
        Ewr = (rdot * pd_[:, None]).T @ rdot / n     # E[W.'R.] = E[W.'W.]
        # E[W.'(W* - W.)] using D D* = D
        Ew_wstar = (rdot * pd_[:, None]).T @ rring / n
        Er_wstar = (rdot * ps[:, None]).T @ rring / n
        Ewr_ring = Ew_wstar                          # E[W.'R0]
        Err_ring = rdot.T @ rring / n
        proj = Ewr @ np.linalg.inv(Err)
        self.Q = Ewr - proj @ Ewr
        self.A = Ewr_ring - proj @ Err_ring
        self.B = (Ew_wstar - Ewr) - proj @ (Er_wstar - Ewr)
        Ewxi = rdot.T @ m / n
        self.C = Ewxi  # E[R.' xi] = 0, so only the W. part survives
        self.p = pd_.mean()

    def correction(self, level, slope):
        try:
            return linalg.solve(self.Q, self.A @ level + self.B @ slope + self.C, assume_a="sym")
        except linalg.LinAlgError as exc:
            raise DgpError("singular Q in the bias formula") from exc


def theorem1_bias_fd(dgp: DgpConfig, moment_sample: int = 1_000_000,
                     seed: int = MOMENT_SEED) -> float:
    """Probability limit of naive FD ``tau_hat`` minus ``tau``.

    Because ``E[R. | D = 1] = (1, 0, ..., 0)`` the ATT bias is the first
    coordinate of ``Q^{-1}(A delta + B theta + C)``.
    """
    mom = _Moments(dgp, moment_sample, seed)
    return float(mom.correction(np.asarray(dgp.delta), np.asarray(dgp.theta))[0])


def theorem1_bias_pols(dgp: DgpConfig, moment_sample: int = 1_000_000,
                       seed: int = MOMENT_SEED) -> float:
    """Probability limit of naive pooled-OLS ``tau_hat`` minus ``tau``.

    Evaluates ``Q1^{-1}(A1 pi1 + B1 pi2 + C1) - Q0^{-1}(A0 eta1 + B0 eta2 + C0)``
    with ``pi1 = eta1 + delta`` and ``pi2 = eta2 + theta``. The covariate law and
    the error law are the same in both periods, so both periods share one set
    of moments.
    """
    mom = _Moments(dgp, moment_sample, seed)
    eta1, eta2 = np.asarray(dgp.eta1), np.asarray(dgp.eta2)
    pi1 = eta1 + np.asarray(dgp.delta)
    pi2 = eta2 + np.asarray(dgp.theta)
    post = mom.correction(pi1, pi2)
    pre = mom.correction(eta1, eta2)
    return float(post[0] - pre[0])


def simple_did_bias(dgp: DgpConfig, nodes: int = 80) -> float:
    """Bias of the covariate-free DID slope (``k = 0``) by quadrature.

    ``tau_mis = tau [P(D*=1|D=1) - P(D*=1|D=0)] + E(xi|D=1) - E(xi|D=0)``; the
    probabilities and error means are averaged over the instrument law with
    Gauss-Hermite nodes.
    """
    if dgp.k != 0:
        raise DgpError("simple_did_bias needs a design without covariates (k = 0)")
    g0 = dgp.gamma[0]
    alpha = np.asarray(dgp.alpha)
    t, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    grids = np.meshgrid(*([t] * dgp.n_instruments), indexing="ij")
    zs = np.stack([g.ravel() for g in grids], axis=1)
    ws = np.prod(np.stack(np.meshgrid(*([w] * dgp.n_instruments), indexing="ij")).reshape(
        dgp.n_instruments, -1), axis=0)
    za = alpha[0] + zs @ alpha[1:]
    rg = np.full_like(za, g0)
    p = ws @ bvn_cdf(rg, za, dgp.rho)
    if not 0 < p < 1:
        raise DgpError("P(D = 1) is degenerate")
    pstar = std_normal_cdf(g0)
    m = ws @ tallis_moment(rg, za, dgp.rho, dgp.sigma, dgp.psi_v)
    tau = dgp.tau
    # P(D*=1|D=1) = 1 under one-sided errors; E(xi) = 0
    q_gap = 1.0 - (pstar - p) / (1.0 - p)
    trend_gap = m / p + m / (1.0 - p)
    return float(tau * q_gap + trend_gap - tau)


def joint_from_dgp(dgp: DgpConfig, moment_sample: int = 1_000_000, seed: int = MOMENT_SEED):
    """Population ``(D, D*)`` cell table implied by a simulation design.

    The effect in a cell is the mean of ``R0 theta``; the untreated gain is the
    mean of ``R0 delta + xi``. Only truly treated units receive the effect, so
    the ``D* = 0`` cells still carry the counterfactual effect ``R0 theta``.
    """
    from .decomposition import DiscreteJoint

    x, f, ps, m = _design(dgp, moment_sample, seed)
    n = x.shape[0]
    r0 = np.column_stack([np.ones(n), x - dgp.centering])
    te = r0 @ np.asarray(dgp.theta)
    trend = r0 @ np.asarray(dgp.delta)
    # cell weights indexed [d, d*]; xi has mean zero given D* (Cov(xi, U) = 0)
    wts = {(1, 1): f, (0, 1): ps - f, (0, 0): 1.0 - ps}
    xi = {(1, 1): m, (0, 1): -m, (0, 0): np.zeros(n)}
    prob = np.zeros((2, 2))
    te_tab = np.zeros((2, 2))
    gain = np.zeros((2, 2))
    for cell, w in wts.items():
        mass = w.sum()
        prob[cell] = mass / n
        te_tab[cell] = (w @ te) / mass
        gain[cell] = (w @ trend + xi[cell].sum()) / mass
    prob[1, 0] = 0.0
    prob /= prob.sum()
    return DiscreteJoint(prob, te_tab, gain)
