"""Simulation designs with one-sided treatment misclassification.

Latent errors ``(xi, U, V)`` are trivariate normal with

    Sigma = [[sigma^2, 0, psi_v sigma], [0, 1, rho], [psi_v sigma, rho, 1]]

and are independent of the standard normal covariates ``X`` and instruments.
The true treatment is ``D* = 1{R gamma + U >= 0}``, reporting is
``S = 1{Z alpha + V >= 0}`` and the observed treatment is ``D = D* S``.
Outcomes follow the centred linear model with ``R0 = (1, X - E[X | D* = 1])``
and ``W* = D* R0``:

* panel: ``dY = R0 delta + W* theta + xi``, ``Y0 = R0 eta1 + W* eta2 + xi0``
  with ``xi0 ~ N(0, sigma^2)`` independent (it cancels in first differences);
* repeated cross sections: ``Y = R0 eta1 + W* eta2 + T (R0 delta + W* theta) + xi``
  with ``T ~ Bernoulli(lam)``.

The misclassification index uses ``Z = (1, Z_excl, X_shared)`` where the
shared covariates are the first ``n_shared`` columns of ``X``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import pandas as pd
import yaml

from ..data import Dataset, Roles
from ..numerics import NumericsError, cholesky, make_rng, mvn_sample, std_normal_cdf, std_normal_pdf


class DgpError(ValueError):
    pass


def _vec(v):
    return tuple(float(a) for a in np.atleast_1d(np.asarray(v, float)))


@dataclass(frozen=True)
class DgpConfig:
    k: int = 1
    gamma: tuple = (0.2, 0.8)
    alpha: tuple = (0.3, 0.9)
    rho: float = -0.3
    psi_v: float = 0.4
    sigma: float = 1.0
    delta: tuple = (0.5, 0.3)
    theta: tuple = (1.0, 0.5)
    eta1: tuple = (1.0, 0.5)
    eta2: tuple = (0.5, 0.2)
    lam: float = 0.5
    n_instruments: int = 1
    n_shared: int = 0

    def __post_init__(self):
        for name in ("gamma", "alpha", "delta", "theta", "eta1", "eta2"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        m = self.k + 1
        for name in ("gamma", "delta", "theta", "eta1", "eta2"):
            if len(getattr(self, name)) != m:
                raise DgpError(f"{name} must have k + 1 = {m} entries")
        if len(self.alpha) != 1 + self.n_instruments + self.n_shared:
            raise DgpError("alpha must have 1 + n_instruments + n_shared entries")
        if self.n_instruments < 1:
            raise DgpError("at least one excluded instrument is required")
        if not 0 <= self.n_shared <= self.k:
            raise DgpError("n_shared must lie between 0 and k")
        if not self.sigma > 0:
            raise DgpError("sigma must be positive")
        if not (-1 < self.rho < 1 and -1 < self.psi_v < 1):
            raise DgpError("rho and psi_v must lie in (-1, 1)")
        if not 0 < self.lam < 1:
            raise DgpError("lam must lie in (0, 1)")
        try:
            cholesky(self.sigma_matrix)
        except NumericsError as exc:
            raise DgpError(f"error covariance is not positive definite: {exc}") from exc

    @property
    def tau(self) -> float:
        return self.theta[0]

    @property
    def sigma_matrix(self) -> np.ndarray:
        s, p, r = self.sigma, self.psi_v, self.rho
        return np.array([[s * s, 0.0, p * s], [0.0, 1.0, r], [p * s, r, 1.0]])

    @property
    def centering(self) -> np.ndarray:
        """``E[X | D* = 1]`` for standard normal ``X`` (probit selection formula)."""
        g0, gx = self.gamma[0], np.asarray(self.gamma[1:])
        s = np.sqrt(1.0 + gx @ gx)
        return gx / s * std_normal_pdf(g0 / s) / std_normal_cdf(g0 / s)

    def to_mapping(self) -> dict:
        out = asdict(self)
        for key, val in out.items():
            if isinstance(val, tuple):
                out[key] = list(val)
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "DgpConfig":
        if not isinstance(mapping, dict):
            raise DgpError("DGP configuration must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise DgpError(f"unknown DGP keys: {sorted(unknown)}")
        return cls(**mapping)

    @classmethod
    def load(cls, path) -> "DgpConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                mapping = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise DgpError(f"cannot parse DGP file {path}: {exc}") from exc
        return cls.from_mapping(mapping or {})

    def digest(self) -> str:
        blob = json.dumps(self.to_mapping(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_(self, **changes) -> "DgpConfig":
        return replace(self, **changes)


def benchmark_dgp() -> DgpConfig:
    """Default acceptance design: one covariate, one excluded instrument."""
    return DgpConfig()


def clean_dgp() -> DgpConfig:
    """Benchmark design without outcome-relevant misclassification.

    Reporting errors stay (so the first stage remains identified) but the
    selection on ``V`` is switched off and the effect is homogeneous.
    """
    return DgpConfig(psi_v=0.0, theta=(1.0, 0.0))


def _draw(dgp: DgpConfig, n: int, rng):
    x = rng.standard_normal((n, dgp.k))
    z = rng.standard_normal((n, dgp.n_instruments))
    e = mvn_sample(np.zeros(3), cholesky(dgp.sigma_matrix), rng, n)
    R = np.column_stack([np.ones(n), x])
    Z = np.column_stack([np.ones(n), z, x[:, :dgp.n_shared]])
    dstar = (R @ np.asarray(dgp.gamma) + e[:, 1] >= 0).astype(float)
    s = (Z @ np.asarray(dgp.alpha) + e[:, 2] >= 0).astype(float)
    r0 = np.column_stack([np.ones(n), x - dgp.centering])
    return x, z, e, dstar, s, r0


def _roles(dgp: DgpConfig, panel: bool) -> Roles:
    return Roles(
        outcome="y", time="t", treatment="d", id="id" if panel else None,
        covariates=tuple(f"x{j + 1}" for j in range(dgp.k)),
        instruments=tuple(f"z{j + 1}" for j in range(dgp.n_instruments)),
        shared=tuple(f"x{j + 1}" for j in range(dgp.n_shared)),
        true_treatment="dstar",
    )


def _frame(cols: dict) -> pd.DataFrame:
    return pd.DataFrame(cols)


def simulate_panel(dgp: DgpConfig, n: int, seed: int, *, latents: bool = False):
    """Two-period balanced panel of `n` units in long format.

    With ``latents=True`` also returns a dict holding the error draws
    ``xi`` (the trend error), ``u``, ``v``, ``s`` and ``xi0``.
    """
    rng = make_rng(seed)
    x, z, e, dstar, s, r0 = _draw(dgp, n, rng)
    xi0 = dgp.sigma * rng.standard_normal(n)
    w = dstar[:, None] * r0
    y0 = r0 @ np.asarray(dgp.eta1) + w @ np.asarray(dgp.eta2) + xi0
    dy = r0 @ np.asarray(dgp.delta) + w @ np.asarray(dgp.theta) + e[:, 0]
    d = dstar * s
    ids = np.repeat(np.arange(n, dtype=np.int64), 2)
    cols = {"id": ids, "t": np.tile([0.0, 1.0], n),
            "y": np.column_stack([y0, y0 + dy]).ravel(), "d": np.repeat(d, 2)}
    for j in range(dgp.k):
        cols[f"x{j + 1}"] = np.repeat(x[:, j], 2)
    for j in range(dgp.n_instruments):
        cols[f"z{j + 1}"] = np.repeat(z[:, j], 2)
    cols["dstar"] = np.repeat(dstar, 2)
    ds = Dataset(_frame(cols), _roles(dgp, True), validated=True)
    if latents:
        return ds, {"xi": e[:, 0], "u": e[:, 1], "v": e[:, 2], "s": s, "xi0": xi0}
    return ds


def simulate_rcs(dgp: DgpConfig, n: int, seed: int, *, latents: bool = False):
    """Repeated cross sections: `n` independent rows with ``T ~ Bernoulli(lam)``."""
    rng = make_rng(seed)
    x, z, e, dstar, s, r0 = _draw(dgp, n, rng)
    t = (rng.random(n) < dgp.lam).astype(float)
    w = dstar[:, None] * r0
    y = (r0 @ np.asarray(dgp.eta1) + w @ np.asarray(dgp.eta2)
         + t * (r0 @ np.asarray(dgp.delta) + w @ np.asarray(dgp.theta)) + e[:, 0])
    cols = {"t": t, "y": y, "d": dstar * s}
    for j in range(dgp.k):
        cols[f"x{j + 1}"] = x[:, j]
    for j in range(dgp.n_instruments):
        cols[f"z{j + 1}"] = z[:, j]
    cols["dstar"] = dstar
    ds = Dataset(_frame(cols), _roles(dgp, False), validated=True)
    if latents:
        return ds, {"xi": e[:, 0], "u": e[:, 1], "v": e[:, 2], "s": s}
    return ds


def simulate(dgp: DgpConfig, layout: str, n: int, seed: int):
    if layout == "panel":
        return simulate_panel(dgp, n, seed)
    if layout in ("rcs", "repeated_cross_section"):
        return simulate_rcs(dgp, n, seed)
    raise DgpError(f"unknown layout {layout!r}")
