"""Optimisation-based falsification of closed-loop STL properties.

The search runs in the unit cube over the free axes of a :class:`SettingSpace`:
a Latin-hypercube batch first, then bounded Nelder-Mead restarts from the
lowest-robustness samples. The budget counts simulations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .coverage import CoverageTracker, SettingSpace, sup_distance
from .plant import Behaviour, ControlSetting, Plant, simulate_batch
from .stl import Formula, obligation_horizon, robustness_batch

COUNTEREXAMPLE = "counterexample"
EXAMPLE = "example"
DIVERGED = "diverged"


class ExclusionExhausted(RuntimeError):
    pass


class _BudgetSpent(Exception):
    pass


@dataclass
class ClosedLoop:
    """A plant with a (batched) controller and simulation parameters."""

    plant: Plant
    controller: object
    h: float = 0.1
    substeps: int = 10
    env_hook: Callable | None = None

    def run(self, settings: Sequence[ControlSetting], phi: Formula):
        """Simulate settings; returns ``(robustness, diverged mask, batch)``."""
        bb = simulate_batch(self.plant, self.controller, settings, self.h, self.substeps, on_diverge="mark")
        extra = self.env_hook(bb) if self.env_hook else {}
        rho = np.asarray(robustness_batch(phi, bb.env(**extra), self.h), dtype=float).copy()
        rho[bb.diverged] = -np.inf
        return rho, bb.diverged, bb


@dataclass
class Verdict:
    trial: int
    setting: ControlSetting
    embedding: np.ndarray
    robustness: float
    klass: str
    behaviour: Behaviour | None = field(default=None, repr=False)

    @property
    def is_cex(self) -> bool:
        return self.klass != EXAMPLE


def classify(rho: float, diverged: bool) -> str:
    if diverged:
        return DIVERGED
    return COUNTEREXAMPLE if rho <= 0 else EXAMPLE


@dataclass
class FalsifyConfig:
    budget: int = 300
    seed: int = 0
    init_fraction: float = 0.5
    k_best: int = 3
    simplex_scale: float = 0.1
    exclusion: np.ndarray | None = None
    exclusion_radius: float = 0.0
    max_resample: int = 1000
    keep_behaviours: bool = True

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if not 0 < self.init_fraction <= 1:
            raise ValueError("init_fraction must be in (0, 1]")


@dataclass
class FalsifyResult:
    counterexamples: list[Verdict]
    examples: list[Verdict]
    trials: list[Verdict]
    best_so_far: list[float]

    @property
    def n_trials(self) -> int:
        return len(self.trials)


class _Search:
    def __init__(self, system: ClosedLoop, phi: Formula, space: SettingSpace, cfg: FalsifyConfig,
                 tracker: CoverageTracker | None):
        self.system, self.phi, self.space, self.cfg, self.tracker = system, phi, space, cfg, tracker
        self.trials: list[Verdict] = []
        self.best: list[float] = []
        self.memo: dict[bytes, float] = {}
        self.excl = None
        if cfg.exclusion is not None and len(cfg.exclusion) and cfg.exclusion_radius > 0:
            self.excl = np.atleast_2d(np.asarray(cfg.exclusion, dtype=float))

    @property
    def left(self) -> int:
        return self.cfg.budget - len(self.trials)

    def excluded(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        if self.excl is None:
            return np.zeros(len(v), dtype=bool)
        d = sup_distance(v[:, None, :], self.excl[None, :, :])
        return np.any(d <= self.cfg.exclusion_radius, axis=1)

    def evaluate(self, V: np.ndarray) -> np.ndarray:
        V = np.atleast_2d(V)
        if len(V) > self.left:
            raise _BudgetSpent
        settings = [self.space.setting(v) for v in V]
        rho, div, bb = self.system.run(settings, self.phi)
        for i, s in enumerate(settings):
            r = float(rho[i])
            self.trials.append(Verdict(len(self.trials), s, V[i].copy(), r, classify(r, bool(div[i])),
                                       bb.behaviour(i) if self.cfg.keep_behaviours else None))
            self.best.append(min(r, self.best[-1]) if self.best else r)
            self.memo[V[i].tobytes()] = r
            if self.tracker is not None:
                self.tracker.record_visit(V[i])
        return rho


def falsify(system: ClosedLoop, phi: Formula, space: SettingSpace, cfg: FalsifyConfig,
            tracker: CoverageTracker | None = None) -> FalsifyResult:
    """Search for settings where the closed loop violates ``phi``.

    Every simulated setting becomes a :class:`Verdict` (counterexample iff
    robustness <= 0; diverged runs get robustness ``-inf``) and is recorded in
    ``tracker``. Both output lists are sorted by ascending robustness.

    Raises:
        ValueError: the property looks further ahead than the simulation horizon.
        ExclusionExhausted: no admissible setting could be sampled outside the
            exclusion zone.
    """
    H = obligation_horizon(phi)
    if H > space.T_sim + 1e-9:
        raise ValueError(f"property horizon {H} exceeds the simulation horizon {space.T_sim}")
    rng = np.random.default_rng(cfg.seed)
    search = _Search(system, phi, space, cfg, tracker)
    k = int(space.free.sum())

    n_init = min(cfg.budget, max(1, math.ceil(cfg.init_fraction * cfg.budget)))
    if k == 0:
        search.evaluate(space.from_unit(np.zeros((1, 0))))
        return _finish(search)
    lhs = qmc.LatinHypercube(d=k, seed=rng.integers(2**63)).random(n_init)
    Z = _resample_excluded(search, space, lhs, rng)
    rho0 = search.evaluate(space.from_unit(Z))

    # local refinement from the lowest-robustness samples
    ranked = list(np.argsort(rho0, kind="stable"))
    starts = [Z[i] for i in ranked]
    restart = 0
    while search.left > 0:
        if restart < len(starts):
            z0 = starts[restart]
        else:
            z0 = _resample_excluded(search, space, rng.random((1, k)), rng)[0]
        share = search.left // (cfg.k_best - restart) if restart < cfg.k_best else search.left
        _local(search, space, z0, max(share, 1), cfg, rng)
        restart += 1
    return _finish(search)


def _resample_excluded(search: _Search, space: SettingSpace, Z: np.ndarray, rng) -> np.ndarray:
    Z = Z.copy()
    bad = search.excluded(space.from_unit(Z))
    tries = 0
    while bad.any():
        tries += 1
        if tries > search.cfg.max_resample:
            raise ExclusionExhausted(
                "could not sample settings outside the exclusion zone; use a smaller exclusion radius")
        Z[bad] = rng.random((int(bad.sum()), Z.shape[1]))
        bad = search.excluded(space.from_unit(Z))
    return Z


def _local(search: _Search, space: SettingSpace, z0: np.ndarray, share: int, cfg: FalsifyConfig,
           rng: np.random.Generator) -> None:
    """Bounded Nelder-Mead from ``z0`` using at most ``share`` new simulations."""
    start = len(search.trials)
    stop_at = start + share
    k = z0.size
    simplex = [z0]
    for j in range(k):
        e = z0.copy()
        e[j] = e[j] + cfg.simplex_scale if e[j] + cfg.simplex_scale <= 1 else e[j] - cfg.simplex_scale
        simplex.append(e)
    wasted = [0]

    def obj(z):
        v = space.from_unit(np.clip(z, 0.0, 1.0)[None, :])
        key = v.tobytes()
        if key in search.memo:
            wasted[0] += 1
        elif search.excluded(v)[0]:
            wasted[0] += 1
            search.memo[key] = 1e6
        else:
            if len(search.trials) >= stop_at:
                raise _BudgetSpent
            search.evaluate(v)
        if wasted[0] > 10 * share + 2 * k + 2:
            raise _BudgetSpent
        return max(search.memo[key], -1e12)

    try:
        minimize(obj, z0, method="Nelder-Mead", bounds=[(0.0, 1.0)] * k,
                 options={"initial_simplex": np.array(simplex), "maxfev": 10 * share + 2 * k + 2,
                          "xatol": 1e-4, "fatol": 1e-9})
    except _BudgetSpent:
        pass
    if len(search.trials) == start:
        # the optimiser produced nothing new; spend one trial elsewhere so the search terminates
        search.evaluate(space.from_unit(_resample_excluded(search, space, rng.random((1, k)), rng)))


def _finish(search: _Search) -> FalsifyResult:
    order = sorted(search.trials, key=lambda v: (v.robustness, v.trial))
    cex = [v for v in order if v.is_cex]
    ex = [v for v in order if not v.is_cex]
    return FalsifyResult(cex, ex, search.trials, search.best)


def matching_test(system: ClosedLoop, settings: Sequence[ControlSetting], phi: Formula,
                  tracker: CoverageTracker | None = None, space: SettingSpace | None = None) -> list[Verdict]:
    """Simulate exactly at ``settings``; returns the violations sorted by robustness."""
    if not settings:
        return []
    rho, div, bb = system.run(list(settings), phi)
    out = []
    for i, s in enumerate(settings):
        emb = space.embed(s) if space is not None else np.concatenate([s.x0, s.ref_points.T.reshape(-1)])
        if tracker is not None:
            tracker.record_visit(emb)
        v = Verdict(i, s, emb, float(rho[i]), classify(float(rho[i]), bool(div[i])), bb.behaviour(i))
        if v.is_cex:
            out.append(v)
    return sorted(out, key=lambda v: (v.robustness, v.trial))


def generalisation_test(system: ClosedLoop, phi: Formula, space: SettingSpace, cfg: FalsifyConfig,
                        training_settings: Sequence[ControlSetting], radius: float,
                        tracker: CoverageTracker | None = None) -> FalsifyResult:
    """Falsify while rejecting settings within ``radius`` of any training setting."""
    excl = np.array([space.embed(s) for s in training_settings]) if training_settings else None
    return falsify(system, phi, space, replace(cfg, exclusion=excl, exclusion_radius=radius), tracker)


def write_trial_log(result: FalsifyResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = len(result.trials[0].embedding) if result.trials else 0
        w.writerow(["trial"] + [f"s{i}" for i in range(dim)] + ["robustness", "class"])
        for v in result.trials:
            w.writerow([v.trial] + [repr(float(c)) for c in v.embedding] + [repr(v.robustness), v.klass])
