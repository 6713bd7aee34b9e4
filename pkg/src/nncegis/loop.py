"""Counterexample-guided retraining of a neural controller.

One iteration: test the net on its training settings (matching test) and on
fresh settings away from them (generalisation test), select representative
counterexamples, replay the teacher at those settings, add the resulting data
and retrain from the current weights.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .clustering import select_cex, select_examples
from .controllers import generate_combined_traces
from .coverage import CoverageTracker, SettingSpace
from .falsify import ClosedLoop, FalsifyConfig, Verdict, generalisation_test, matching_test
from .nn import Dataset, Net, NetController, NetSpec, train
from .plant import Behaviour, ControlSetting, Plant, simulate_batch
from .stl import Formula, robustness_batch

log = logging.getLogger(__name__)


class PremiseViolation(RuntimeError):
    """The teacher itself violates the property at a setting it must teach."""

    def __init__(self, settings: Sequence[ControlSetting], robustness: Sequence[float]):
        desc = "; ".join(f"x0={s.x0.tolist()} r={s.ref_points.tolist()} rho={r:.4g}"
                         for s, r in zip(settings, robustness))
        super().__init__(f"teacher violates the property at {len(settings)} setting(s): {desc}")
        self.settings = list(settings)
        self.robustness = list(robustness)


# ---------------------------------------------------------------------------
# Teachers
# ---------------------------------------------------------------------------


class NominalTeacher:
    """Replays one nominal controller; every taught trace must satisfy ``phi``."""

    name = "nominal"

    def __init__(self, plant: Plant, controller, phi: Formula, h: float = 0.1, substeps: int = 10):
        self.plant, self.controller, self.phi, self.h, self.substeps = plant, controller, phi, h, substeps

    def teach(self, settings: Sequence[ControlSetting]) -> list[Behaviour]:
        if not settings:
            return []
        bb = simulate_batch(self.plant, self.controller, list(settings), self.h, self.substeps)
        rho = robustness_batch(self.phi, bb.env(), self.h)
        bad = np.flatnonzero(rho <= 0)
        if bad.size:
            raise PremiseViolation([settings[i] for i in bad], [float(rho[i]) for i in bad])
        return bb.behaviours()


class CombinedTeacher:
    """Stitches traces from several controllers; settings without a satisfying trace are skipped."""

    name = "combined"

    def __init__(self, plant: Plant, controllers, properties: Sequence[Formula], segment: float,
                 h: float = 0.1, substeps: int = 10):
        self.plant, self.controllers, self.properties = plant, controllers, list(properties)
        self.segment, self.h, self.substeps = segment, h, substeps
        self.skipped: list[ControlSetting] = []

    def teach(self, settings: Sequence[ControlSetting]) -> list[Behaviour]:
        if not settings:
            return []
        res = generate_combined_traces(self.plant, self.controllers, self.properties, list(settings),
                                       self.segment, self.h, self.substeps)
        self.skipped += [s for s, k in zip(settings, res.kept) if not k]
        return res.behaviours


# ---------------------------------------------------------------------------
# Configuration, state and reports
# ---------------------------------------------------------------------------


@dataclass
class LoopConfig:
    max_iterations: int = 5
    eps: float = 0.25
    falsify_budget: int = 300
    confirm_budget: int = 200
    cluster: bool = True
    k_rho: int = 3
    delta: float | None = None
    example_count: int | None = None
    exclusion_radius: float = 0.05
    epochs_initial: int = 100
    epochs_retrain: int = 100
    batch: int = 64
    lr: float = 1e-3
    val_fraction: float = 0.1
    warm_start: bool = True
    seed: int = 42
    init_fraction: float = 0.5
    k_best: int = 3
    simplex_scale: float = 0.1
    coverage_factor: int = 2

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    @property
    def separation(self) -> float:
        return 2 * self.eps if self.delta is None else self.delta


@dataclass
class IterationReport:
    i: int
    n_T: int
    n_C: int
    n_C_hat: int
    n_R: int
    n_C_tilde: int | None
    t_TCC: float
    t_R: float
    t_C_tilde: float
    coverage: float
    train_mse: float
    val_mse: float
    n_matching: int = 0
    n_examples: int = 0

    def counts(self) -> dict:
        d = asdict(self)
        for k in ("t_TCC", "t_R", "t_C_tilde"):
            d.pop(k)
        return d


@dataclass
class Problem:
    """Everything the loop needs to know about the system under design."""

    plant: Plant
    teacher: object
    phi: Formula
    space: SettingSpace
    spec: NetSpec
    h: float = 0.1
    substeps: int = 10


@dataclass
class LoopState:
    net: Net
    dataset: Dataset
    tracker: CoverageTracker
    iteration: int = 0
    reports: list[IterationReport] = field(default_factory=list)
    terminated: bool = False


def _closed_loop(problem: Problem, net: Net) -> ClosedLoop:
    return ClosedLoop(problem.plant, NetController(net), problem.h, problem.substeps)


def extract_data(dataset: Dataset, behaviours: Sequence[Behaviour], spec: NetSpec, source: str,
                 iteration: int) -> Dataset:
    return dataset.extend(behaviours, spec, source, iteration)


def initial_train(problem: Problem, cfg: LoopConfig, net: Net | None = None) -> LoopState:
    """Teach on the ε-net of the setting space and train the first net."""
    t0 = time.perf_counter()
    settings = problem.space.eps_net(cfg.eps)
    tracker = CoverageTracker(problem.space, cfg.eps, cfg.coverage_factor, seed=cfg.seed)
    tracker.record_many(settings)
    behaviours = problem.teacher.teach(settings)
    data = extract_data(Dataset.empty(problem.spec), behaviours, problem.spec, problem.teacher.name, 0)
    net0 = net if net is not None else Net.init(problem.spec, cfg.seed)
    t1 = time.perf_counter()
    net1, tr, va = train(net0, data, cfg.epochs_initial, cfg.batch, cfg.lr, cfg.val_fraction, cfg.seed)
    t2 = time.perf_counter()
    rep = IterationReport(0, 0, 0, 0, data.n_behaviours, None, t1 - t0, t2 - t1, 0.0,
                          tracker.coverage_ratio(), tr, va)
    return LoopState(net1, data, tracker, 0, [rep])


def _unique_settings(verdicts: Sequence[Verdict], space: SettingSpace):
    seen, out = set(), []
    for v in verdicts:
        key = space.embed(v.setting).tobytes()
        if key not in seen:
            seen.add(key)
            out.append(v)
    return out


def retrain_iteration(state: LoopState, problem: Problem, cfg: LoopConfig) -> tuple[LoopState, IterationReport]:
    """Run one test/select/replay/retrain round; returns the new state and its report."""
    i = state.iteration + 1
    space = problem.space
    budget = cfg.falsify_budget if i == 1 else cfg.confirm_budget
    t0 = time.perf_counter()
    system = _closed_loop(problem, state.net)
    train_settings = state.dataset.settings
    xi_m = matching_test(system, train_settings, problem.phi, state.tracker, space)
    fcfg = FalsifyConfig(budget, seed=cfg.seed + i, init_fraction=cfg.init_fraction, k_best=cfg.k_best,
                         simplex_scale=cfg.simplex_scale)
    res = generalisation_test(system, problem.phi, space, fcfg, train_settings, cfg.exclusion_radius,
                              state.tracker)
    xi = _unique_settings(xi_m + res.counterexamples, space)
    n_C = len(xi)
    coverage = state.tracker.coverage_ratio()
    if n_C == 0:
        t = time.perf_counter() - t0
        rep = IterationReport(i, res.n_trials, 0, 0, state.dataset.n_behaviours, 0, t, 0.0, 0.0, coverage,
                              math.nan, math.nan, len(xi_m), 0)
        state.iteration = i
        state.reports.append(rep)
        state.terminated = True
        return state, rep

    emb = np.array([space.embed(v.setting) for v in xi])
    rho = np.array([v.robustness for v in xi])
    rho = np.where(np.isfinite(rho), rho, -1e300)
    sel = select_cex(emb, rho, cfg.separation, cfg.k_rho, cfg.seed + i, cfg.cluster)
    chosen = [xi[j].setting for j in sel.indices]
    t1 = time.perf_counter()

    n_ex = len(chosen) if cfg.example_count is None else cfg.example_count
    ex_emb = np.array([space.embed(v.setting) for v in res.examples]) if res.examples else np.zeros((0, space.dim))
    picks = select_examples(ex_emb, [v.robustness for v in res.examples], cfg.separation, n_ex,
                            exclude=emb[sel.indices])
    ex_settings = [res.examples[j].setting for j in picks]

    cex_beh = problem.teacher.teach(chosen)
    ex_beh = problem.teacher.teach(ex_settings)
    data = extract_data(state.dataset, cex_beh, problem.spec, problem.teacher.name, i)
    data = extract_data(data, ex_beh, problem.spec, problem.teacher.name, i)
    start = state.net if cfg.warm_start else Net.init(problem.spec, cfg.seed + i)
    net, tr, va = train(start, data, cfg.epochs_retrain, cfg.batch, cfg.lr, cfg.val_fraction, cfg.seed + i)
    t2 = time.perf_counter()

    # re-test the new net on the enlarged training set and the raw counterexamples
    retest = list(data.settings) + [v.setting for v in xi]
    remaining = matching_test(_closed_loop(problem, net), retest, problem.phi)
    n_C_tilde = len(_unique_settings(remaining, space))
    t3 = time.perf_counter()

    rep = IterationReport(i, res.n_trials, n_C, len(chosen), data.n_behaviours, n_C_tilde, t1 - t0, t2 - t1,
                          t3 - t2, coverage, tr, va, len(xi_m), len(ex_beh))
    new = LoopState(net, data, state.tracker, i, state.reports + [rep], False)
    return new, rep


@dataclass
class LoopResult:
    net: Net
    reports: list[IterationReport]
    terminated: bool
    coverage: float
    dataset: Dataset

    @property
    def final_cex(self) -> int:
        return self.reports[-1].n_C

    def summary(self) -> str:
        last = self.reports[-1]
        if self.terminated:
            return (f"no counterexample found within a budget of {last.n_T} trials "
                    f"at coverage {self.coverage:.3f}")
        return (f"stopped after {len(self.reports) - 1} iteration(s) with {last.n_C} counterexample(s) "
                f"in the last falsification run")


def run_loop(problem: Problem, cfg: LoopConfig, net: Net | None = None,
             on_iteration: Callable[[LoopState], None] | None = None) -> LoopResult:
    """Iterate until a falsification run of at least ``confirm_budget`` trials finds nothing.

    At most ``max_iterations`` rounds are run after the initial training; an
    exhausted loop is reported as such, never as success. ``on_iteration`` is
    called with the state after the initial training and after every round.
    """
    state = initial_train(problem, cfg, net)
    if on_iteration:
        on_iteration(state)
    for _ in range(cfg.max_iterations):
        state, rep = retrain_iteration(state, problem, cfg)
        if on_iteration:
            on_iteration(state)
        log.info("iteration %d: n_T=%d n_C=%d n_C_hat=%d n_R=%d", rep.i, rep.n_T, rep.n_C, rep.n_C_hat, rep.n_R)
        if state.terminated:
            if rep.n_T >= cfg.confirm_budget:
                break
            state.terminated = False
    return LoopResult(state.net, state.reports, state.terminated, state.tracker.coverage_ratio(), state.dataset)


# ---------------------------------------------------------------------------
# Lipschitz deviation bound
# ---------------------------------------------------------------------------


def prop2_bound(eps: float, L_x: float, L_u: float, t) -> np.ndarray:
    """``eta(t) = (eps L_u / L_x) (exp(L_x t) - 1)``."""
    if L_x is None or L_u is None:
        raise ValueError("Lipschitz constants are required")
    if not L_x > 0:
        raise ValueError("L_x must be positive")
    return (eps * L_u / L_x) * np.expm1(L_x * np.asarray(t, dtype=float))


def check_prop2_bound(plant: Plant, eps: float, T_h: float, h: float = 0.1) -> np.ndarray:
    """Bound curve sampled on the grid ``0, h, ..., T_h`` using the plant's constants."""
    if plant.lipschitz_x is None or plant.lipschitz_u is None:
        raise ValueError(f"plant {plant.name!r} declares no Lipschitz constants")
    n = round(T_h / h)
    return prop2_bound(eps, plant.lipschitz_x, plant.lipschitz_u, np.arange(n + 1) * h)


@dataclass
class DeviationCheck:
    t: np.ndarray
    gap: np.ndarray
    bound: np.ndarray

    @property
    def holds(self) -> bool:
        return bool(np.all(self.gap <= self.bound + 1e-6))


def empirical_deviation(plant: Plant, x0, u: np.ndarray, du: np.ndarray, h: float, eps: float,
                        substeps: int = 20) -> DeviationCheck:
    """Simulate ``u`` and ``u + du`` (piecewise constant per ``h``) and compare states.

    ``u`` and ``du`` are ``(N, p)``; ``|du| <= eps`` is required.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float).reshape(len(u), -1))
    du = np.atleast_2d(np.asarray(du, dtype=float).reshape(len(du), -1))
    if np.any(np.abs(du) > eps + 1e-15):
        raise ValueError("perturbation exceeds eps")
    N = len(u)
    X = np.tile(np.atleast_1d(np.asarray(x0, dtype=float)), (2, 1))
    gaps = [0.0]
    h_int = h / substeps
    f = plant.dynamics
    nu = np.zeros((2, plant.q))
    for k in range(N):
        U = np.stack([u[k], u[k] + du[k]])
        for _ in range(substeps):
            k1 = f(X, U, nu)
            k2 = f(X + 0.5 * h_int * k1, U, nu)
            k3 = f(X + 0.5 * h_int * k2, U, nu)
            k4 = f(X + h_int * k3, U, nu)
            X = plant.project(X + (h_int / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
        gaps.append(float(np.max(np.abs(X[0] - X[1]))))
    t = np.arange(N + 1) * h
    bound = prop2_bound(eps, plant.lipschitz_x, plant.lipschitz_u, t)
    return DeviationCheck(t, np.array(gaps), bound)
