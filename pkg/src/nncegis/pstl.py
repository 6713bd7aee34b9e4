"""Parametric STL: valuations, monotone False/Valid estimation and volume-based
policy similarity.

Parameters are oriented so that larger values are "more valid": an increasing
parameter raises robustness when it grows, a decreasing one lowers it. A
valuation found False makes every valuation it dominates (in oriented
coordinates) False as well, so the union of the boxes spanned by False points
from the lower corner under-approximates the False set.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .stl import (Always, And, Eventually, Formula, Implies, Interval, Norm, Not, Or, Param, Pred,
                  TrueF, Until, Var, robustness_signal)

INCREASING = "increasing"
DECREASING = "decreasing"


class PolarityError(ValueError):
    pass


class EvaluationError(RuntimeError):
    def __init__(self, valuation: Mapping[str, float], cause: Exception):
        super().__init__(f"evaluation failed at valuation {dict(valuation)}: {cause}")
        self.valuation = dict(valuation)


@dataclass(frozen=True)
class PstlParam:
    name: str
    polarity: str
    lo: float
    hi: float

    def __post_init__(self):
        if self.polarity not in (INCREASING, DECREASING):
            raise ValueError(f"polarity must be {INCREASING!r} or {DECREASING!r}")
        if not self.lo < self.hi:
            raise ValueError(f"empty range for parameter {self.name}")


def occurrences(f: Formula, sign: int = 1) -> list[tuple[str, int]]:
    """Every parameter occurrence with its syntactic effect on robustness (+1 / -1)."""
    out: list[tuple[str, int]] = []
    if isinstance(f, Pred):
        if isinstance(f.threshold, Param):
            if f.cmp in ("==", "!="):
                raise PolarityError(f"parameter {f.threshold.name} in a non-monotone comparison")
            out.append((f.threshold.name, sign if f.cmp in ("<", "<=") else -sign))
        return out
    if isinstance(f, TrueF):
        return out
    if isinstance(f, Not):
        return occurrences(f.arg, -sign)
    if isinstance(f, Implies):
        return occurrences(f.left, -sign) + occurrences(f.right, sign)
    if isinstance(f, (And, Or)):
        return occurrences(f.left, sign) + occurrences(f.right, sign)
    iv = f.interval
    # widening a min-window lowers robustness, widening a max-window raises it
    widen = -1 if isinstance(f, Always) else 1
    if isinstance(iv.lo, Param):
        out.append((iv.lo.name, -widen * sign))
    if isinstance(iv.hi, Param):
        out.append((iv.hi.name, widen * sign))
    if isinstance(f, Until):
        return out + occurrences(f.left, sign) + occurrences(f.right, sign)
    return out + occurrences(f.arg, sign)


@dataclass(frozen=True)
class PstlFormula:
    template: Formula
    params: tuple[PstlParam, ...]

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        declared = {p.name: p for p in self.params}
        if len(declared) != len(self.params):
            raise ValueError("duplicate parameter names")
        occ = occurrences(self.template)
        used = {n for n, _ in occ}
        if used != set(declared):
            raise ValueError(f"template parameters {sorted(used)} do not match declared {sorted(declared)}")
        for name, s in occ:
            want = 1 if declared[name].polarity == INCREASING else -1
            if s != want:
                raise PolarityError(f"parameter {name} is declared {declared[name].polarity} "
                                    "but occurs with the opposite effect")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    @property
    def lo(self) -> np.ndarray:
        return np.array([p.lo for p in self.params])

    @property
    def hi(self) -> np.ndarray:
        return np.array([p.hi for p in self.params])

    @property
    def polarities(self) -> list[str]:
        return [p.polarity for p in self.params]


def _sub_bound(b, v: Mapping[str, float]):
    if isinstance(b, Param):
        if b.name not in v:
            raise ValueError(f"unbound parameter {b.name}")
        return float(v[b.name])
    return b


def substitute(f: Formula, v: Mapping[str, float]) -> Formula:
    """Replace named parameters by values (purely syntactic)."""
    if isinstance(f, TrueF):
        return f
    if isinstance(f, Pred):
        return Pred(f.expr, f.cmp, _sub_bound(f.threshold, v))
    if isinstance(f, Not):
        return Not(substitute(f.arg, v))
    if isinstance(f, (And, Or, Implies)):
        return type(f)(substitute(f.left, v), substitute(f.right, v))
    iv = Interval(_sub_bound(f.interval.lo, v), _sub_bound(f.interval.hi, v))
    if isinstance(f, Until):
        return Until(iv, substitute(f.left, v), substitute(f.right, v))
    return type(f)(iv, substitute(f.arg, v))


def instantiate(p: PstlFormula, v: Mapping[str, float], tol: float = 1e-12) -> Formula:
    for prm in p.params:
        if prm.name not in v:
            raise ValueError(f"unbound parameter {prm.name}")
        x = float(v[prm.name])
        if not prm.lo - tol <= x <= prm.hi + tol:
            raise ValueError(f"parameter {prm.name}={x} outside [{prm.lo}, {prm.hi}]")
    return substitute(p.template, v)


def build_phi_template(s_ov=(0.0, 20.0), s_st=(0.0, 20.0), tau_tr=(0.1, 10.0), tau_st=(0.1, 10.0),
                       output: str = "y") -> PstlFormula:
    """No overshoot above ``s_ov``, and whenever the output leaves the ``s_st`` band
    it re-enters within ``tau_tr`` and stays for ``tau_st``.

    Norms are infinity norms of the output vector.
    """
    ny = Norm(Var(output))
    mu_ov = Pred(ny, ">", Param("s_ov"))
    mu_st = Pred(ny, "<", Param("s_st"))
    whole = Interval(0.0, math.inf)
    phi_st = Implies(Not(mu_st), Eventually(Interval(0.0, Param("tau_tr")),
                                            Always(Interval(0.0, Param("tau_st")), mu_st)))
    template = And(Always(whole, Not(mu_ov)), Always(whole, phi_st))
    return PstlFormula(template, (
        PstlParam("s_ov", INCREASING, *s_ov), PstlParam("s_st", INCREASING, *s_st),
        PstlParam("tau_tr", INCREASING, *tau_tr), PstlParam("tau_st", DECREASING, *tau_st)))


def check_monotonicity(p: PstlFormula, envs: Sequence[Mapping[str, np.ndarray]], step: float,
                       n_pairs: int = 100, seed: int = 0, tol: float = 1e-12) -> None:
    """Sample ordered valuation pairs and confirm robustness respects the polarities.

    Raises:
        PolarityError: a pair ``v <= v'`` (oriented) with ``rho(v) > rho(v')``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = p.lo, p.hi
    sign = np.array([1.0 if s == INCREASING else -1.0 for s in p.polarities])
    for _ in range(n_pairs):
        a = lo + rng.random(len(lo)) * (hi - lo)
        b = lo + rng.random(len(lo)) * (hi - lo)
        # move b so that it dominates a in oriented coordinates
        b = np.where(sign > 0, np.maximum(a, b), np.minimum(a, b))
        fa = instantiate(p, dict(zip(p.names, a)))
        fb = instantiate(p, dict(zip(p.names, b)))
        for env in envs:
            ra = float(robustness_signal(fa, env, step)[..., 0].min())
            rb = float(robustness_signal(fb, env, step)[..., 0].min())
            if ra > rb + tol:
                raise PolarityError(f"robustness decreased from {ra} to {rb} between {a} and {b}")


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------


def orient(points, lo, hi, polarities: Sequence[str]) -> np.ndarray:
    """Shift points so every axis starts at 0 and grows towards "more valid"."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    inc = np.array([s == INCREASING for s in polarities])
    return np.where(inc, P - lo, hi - P)


def _pareto_max(P: np.ndarray) -> np.ndarray:
    """Drop points dominated (componentwise <=) by another point."""
    if len(P) <= 1:
        return P
    P = np.unique(P, axis=0)
    keep = np.ones(len(P), dtype=bool)
    for i in range(len(P)):
        if not keep[i]:
            continue
        dom = np.all(P <= P[i], axis=1)
        dom[i] = False
        keep &= ~dom
    return P[keep]


def _union_volume(P: np.ndarray) -> float:
    """Volume of the union of boxes ``[0, p]`` for rows ``p`` of ``P``."""
    if len(P) == 0:
        return 0.0
    d = P.shape[1]
    if d == 1:
        return float(P[:, 0].max())
    P = _pareto_max(P)
    if d == 2:
        order = np.argsort(-P[:, 0], kind="stable")
        x = P[order, 0]
        y = P[order, 1]
        # after the Pareto filter y increases as x decreases
        ymax = np.maximum.accumulate(y)
        widths = x - np.append(x[1:], 0.0)
        return float(np.sum(widths * ymax))
    # sweep the last axis: slab (c_{j-1}, c_j] is covered by points with last coordinate >= c_j
    cuts = np.unique(P[:, -1])
    vol = 0.0
    prev = 0.0
    for c in cuts:
        active = P[P[:, -1] >= c, :-1]
        vol += (c - prev) * _union_volume(active)
        prev = c
    return vol


def volume_underapprox(false_points, lo, hi, polarities: Sequence[str], tol: float = 1e-12) -> float:
    """Exact volume of the union of boxes dominated by the False points.

    Raises:
        ValueError: a point lies outside the parameter box.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    P = np.asarray(false_points, dtype=float)
    if P.size == 0:
        return 0.0
    P = np.atleast_2d(P)
    if np.any(P < lo - tol) or np.any(P > hi + tol):
        raise ValueError("false point outside the parameter box")
    Q = np.clip(orient(P, lo, hi, polarities), 0.0, hi - lo)
    return _union_volume(Q)


def policy_similarity(false_vol_nominal: float, false_vol_learned: float) -> float:
    """Ratio of the learned controller's False volume to the nominal one."""
    if not false_vol_nominal > 0:
        raise ZeroDivisionError("the nominal False volume must be positive")
    return float(false_vol_learned) / float(false_vol_nominal)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


@dataclass
class FalseSetEstimate:
    names: list[str]
    lo: np.ndarray
    hi: np.ndarray
    polarities: list[str]
    points: np.ndarray
    robustness: np.ndarray
    false_mask: np.ndarray
    volume_lower_bound: float

    @property
    def false_points(self) -> np.ndarray:
        return self.points[self.false_mask]

    @property
    def valid_points(self) -> np.ndarray:
        return self.points[~self.false_mask]

    @property
    def box_volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.names + ["class", "min_robustness"])
            for p, f, r in zip(self.points, self.false_mask, self.robustness):
                w.writerow([repr(float(x)) for x in p] + ["False" if f else "Valid", repr(float(r))])

    def summary(self) -> dict:
        return {"parameters": self.names, "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "polarities": self.polarities, "n_points": int(len(self.points)),
                "n_false": int(self.false_mask.sum()), "volume_lower_bound": self.volume_lower_bound,
                "box_volume": self.box_volume}


def monotone_closure(points: np.ndarray, false_mask: np.ndarray, lo, hi, polarities) -> np.ndarray:
    """Mark as False every point dominated (oriented) by a False point."""
    Q = orient(points, lo, hi, polarities)
    F = Q[false_mask]
    out = false_mask.copy()
    for f in F:
        out |= np.all(Q <= f + 1e-12, axis=1)
    return out


def classify_valuations(evaluator: Callable[[Mapping[str, float]], float], p: PstlFormula,
                        grid: Sequence[int]) -> FalseSetEstimate:
    """Classify a grid of valuations as Valid (min robustness > 0) or False.

    ``evaluator`` maps a valuation to the minimum robustness over a fixed set
    of behaviours. The classification is closed under domination afterwards.
    """
    if len(grid) != len(p.params):
        raise ValueError("one grid count per parameter is required")
    axes = [np.linspace(prm.lo, prm.hi, int(n)) for prm, n in zip(p.params, grid)]
    pts = np.array(list(itertools.product(*axes)), dtype=float)
    rho = np.empty(len(pts))
    for i, pt in enumerate(pts):
        v = dict(zip(p.names, pt))
        try:
            rho[i] = float(evaluator(v))
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise EvaluationError(v, exc) from exc
    mask = monotone_closure(pts, ~(rho > 0), p.lo, p.hi, p.polarities)
    vol = volume_underapprox(pts[mask], p.lo, p.hi, p.polarities)
    return FalseSetEstimate(p.names, p.lo, p.hi, p.polarities, pts, rho, mask, vol)


class TraceEvaluator:
    """Minimum robustness of an instantiated template over a fixed batch of traces."""

    def __init__(self, p: PstlFormula, env: Mapping[str, np.ndarray], step: float):
        self.p, self.env, self.step = p, env, step

    def __call__(self, v: Mapping[str, float]) -> float:
        f = instantiate(self.p, v)
        return float(robustness_signal(f, self.env, self.step)[..., 0].min())


def write_summary(path: str | Path, nominal: FalseSetEstimate, learned: FalseSetEstimate | None) -> dict:
    out = {"nominal": nominal.summary()}
    if learned is not None:
        out["learned"] = learned.summary()
        out["sigma"] = policy_similarity(nominal.volume_lower_bound, learned.volume_lower_bound)
    Path(path).write_text(json.dumps(out, indent=2))
    return out
