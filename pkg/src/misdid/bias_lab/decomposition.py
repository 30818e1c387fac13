"""Exact decomposition of the 2x2 DID estimand under misclassification.

A :class:`DiscreteJoint` describes the population by the four ``(D, D*)``
cells: their probabilities, the mean treatment effect ``Y1(1) - Y1(0)`` and the
mean untreated gain ``G1(0)`` in each cell. Cells are indexed ``[d, d*]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class JointError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteJoint:
    prob: np.ndarray
    te: np.ndarray
    gain: np.ndarray

    def __post_init__(self):
        for name in ("prob", "te", "gain"):
            arr = np.asarray(getattr(self, name), float)
            if arr.shape != (2, 2):
                raise JointError(f"{name} must be a 2x2 table indexed [d, d*]")
            if not np.all(np.isfinite(arr)):
                raise JointError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        p = self.prob
        if np.any(p < 0):
            raise JointError("cell probabilities must be nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise JointError(f"cell probabilities sum to {p.sum():.15g}, not 1")
        if p[1].sum() <= 0 or p[0].sum() <= 0:
            raise JointError("both P(D = 1) and P(D = 0) must be positive")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "DiscreteJoint":
        try:
            return cls(np.asarray(mapping["prob"], float), np.asarray(mapping["te"], float),
                       np.asarray(mapping["gain"], float))
        except KeyError as exc:
            raise JointError(f"joint table is missing {exc.args[0]!r}") from exc

    @classmethod
    def non_differential(cls, prob, att, atu, gain_treated, gain_untreated) -> "DiscreteJoint":
        """Joint whose cell means depend on ``D*`` only."""
        te = np.array([[atu, att], [atu, att]], float)
        gain = np.array([[gain_untreated, gain_treated], [gain_untreated, gain_treated]], float)
        return cls(np.asarray(prob, float), te, gain)


@dataclass(frozen=True)
class DecompositionReport:
    att: float
    atu: float
    q1: float
    q0: float
    dt_star: float
    dt_obs: float
    term1: float
    term2: float
    did: float
    did_realized: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def _cond(prob, vals, mask):
    w = prob[mask]
    total = w.sum()
    if total <= 0:
        raise JointError("conditioning cell has zero probability")
    return float((w * vals[mask]).sum() / total)


def decompose_did(joint: DiscreteJoint) -> DecompositionReport:
    """Enumerate the population quantities of the misclassified DID.

    ``term1 = E[Y1(1) - Y1(0) | D = 1]`` and ``term2 = DT(D)``; ``did`` is
    their sum. ``did_realized`` is the DID of observed outcome means when only
    truly treated units receive the effect; it differs from ``did`` by
    ``-E[D* (Y1(1) - Y1(0)) | D = 0]``.
    """
    p, te, g = joint.prob, joint.te, joint.gain
    d = np.array([[0, 0], [1, 1]], bool)
    ds = np.array([[0, 1], [0, 1]], bool)
    p_d1 = p[1].sum()
    p_d0 = p[0].sum()
    if p[:, 1].sum() <= 0 or p[:, 0].sum() <= 0:
        raise JointError("both P(D* = 1) and P(D* = 0) must be positive")
    att = _cond(p, te, ds)
    atu = _cond(p, te, ~ds)
    q1 = float(p[1, 1] / p_d1)
    q0 = float(p[0, 0] / p_d0)
    dt_star = _cond(p, g, ds) - _cond(p, g, ~ds)
    dt_obs = _cond(p, g, d) - _cond(p, g, ~d)
    term1 = _cond(p, te, d)
    realized_te = te * ds
    did_realized = _cond(p, realized_te, d) - _cond(p, realized_te, ~d) + dt_obs
    return DecompositionReport(att=att, atu=atu, q1=q1, q0=q0, dt_star=dt_star, dt_obs=dt_obs,
                               term1=term1, term2=dt_obs, did=term1 + dt_obs,
                               did_realized=did_realized)


def prop1_predict(att: float, atu: float, q1: float, q0: float, dt_star: float):
    """Closed-form terms under non-differential misclassification."""
    for name, q in (("q1", q1), ("q0", q0)):
        if not 0.0 <= q <= 1.0:
            raise JointError(f"{name} must lie in [0, 1]")
    return att * q1 + atu * (1.0 - q1), dt_star * (q1 + q0 - 1.0)
