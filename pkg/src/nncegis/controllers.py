"""Nominal discrete-time controllers and robustness-guided controller switching.

Controllers are batched: ``reset(B)`` sizes the internal state for ``B``
parallel runs and ``step(y, r, nu)`` maps ``(B, m)`` measurements to ``(B, p)``
commands.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .plant import (Behaviour, ControlSetting, Plant, SimulationDiverged, num_samples,
                    prepare_signals, shift_next, simulate_segment)
from .stl import Formula, conjunction, obligation_horizon, robustness_signal


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float
    kd: float
    u_min: float
    u_max: float
    h: float

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ValueError(f"need u_min < u_max, got [{self.u_min}, {self.u_max}]")
        if not self.h > 0:
            raise ValueError("controller period must be positive")


def pid_step(gains: PidGains, z, y_k, r_k):
    """One PID update with saturation and conditional-integration anti-windup.

    Args:
        gains: PID gains and saturation bounds.
        z: ``(i_acc, e_prev)``; scalars or arrays.
        y_k: measured output.
        r_k: reference sample.

    Returns:
        ``((i_acc', e), u_k)``.
    """
    i_acc, e_prev = z
    e = np.asarray(r_k, dtype=float) - np.asarray(y_k, dtype=float)
    i_new = i_acc + gains.h * e
    u_raw = gains.kp * e + gains.ki * i_new + gains.kd * (e - e_prev) / gains.h
    u = np.clip(u_raw, gains.u_min, gains.u_max)
    clamped = u != u_raw
    i_new = np.where(clamped, i_acc, i_new)
    if np.ndim(u) == 0:
        return (float(i_new), float(e)), float(u)
    return (i_new, e), u


class PidController:
    """Batched PID controller; state is ``(i_acc, e_prev)`` per run and channel."""

    def __init__(self, gains: PidGains):
        self.gains = gains
        self.reset(1)

    def reset(self, batch: int) -> None:
        self.i_acc = np.zeros((batch, 1))
        self.e_prev = np.zeros((batch, 1))

    def step(self, y, r, nu=None):
        (self.i_acc, self.e_prev), u = pid_step(self.gains, (self.i_acc, self.e_prev), y, r)
        return u

    def snapshot(self):
        return (self.i_acc.copy(), self.e_prev.copy())

    def restore(self, snap) -> None:
        self.i_acc, self.e_prev = snap[0].copy(), snap[1].copy()


@dataclass(frozen=True)
class SwitchedGains:
    """Three locations chosen by ``|e|``: ``[0, dead_band)`` no action,
    ``[dead_band, p_band)`` proportional, ``[p_band, inf)`` PID."""

    pid: PidGains
    kp_p: float
    dead_band: float = 0.005
    p_band: float = 0.1

    def __post_init__(self):
        if not 0 <= self.dead_band <= self.p_band:
            raise ValueError("need 0 <= dead_band <= p_band")


NO_ACTION, P_LOC, PID_LOC = 0, 1, 2


def location(sw: SwitchedGains, e) -> np.ndarray:
    """Active location for tracking error ``e`` (left-closed, right-open bands)."""
    a = np.abs(np.asarray(e, dtype=float))
    return np.where(a < sw.dead_band, NO_ACTION, np.where(a < sw.p_band, P_LOC, PID_LOC))


def switched_step(sw: SwitchedGains, z, y_k, r_k):
    """One step of the 3-location controller.

    The PID state only evolves while the PID location is active.
    """
    e = np.asarray(r_k, dtype=float) - np.asarray(y_k, dtype=float)
    loc = location(sw, e)
    z_pid, u_pid = pid_step(sw.pid, z, y_k, r_k)
    u_p = np.clip(sw.kp_p * e, sw.pid.u_min, sw.pid.u_max)
    u = np.where(loc == NO_ACTION, 0.0, np.where(loc == P_LOC, u_p, u_pid))
    active = loc == PID_LOC
    z_new = (np.where(active, z_pid[0], z[0]), np.where(active, z_pid[1], z[1]))
    if np.ndim(u) == 0:
        return (float(z_new[0]), float(z_new[1])), float(u)
    return z_new, u


class SwitchedController(PidController):
    def __init__(self, sw: SwitchedGains):
        self.sw = sw
        super().__init__(sw.pid)

    def step(self, y, r, nu=None):
        (self.i_acc, self.e_prev), u = switched_step(self.sw, (self.i_acc, self.e_prev), y, r)
        return u


class ConstantController:
    """Emits a fixed command; handy for tests and open-loop runs."""

    def __init__(self, value, p: int = 1):
        self.value = np.broadcast_to(np.asarray(value, dtype=float), (p,))

    def reset(self, batch: int) -> None:
        self.batch = batch

    def step(self, y, r, nu=None):
        return np.tile(self.value, (np.shape(y)[0], 1))

    def snapshot(self):
        return None

    def restore(self, snap) -> None:
        pass


# ---------------------------------------------------------------------------
# Controller switching
# ---------------------------------------------------------------------------


class NoSatisfyingTraceError(RuntimeError):
    def __init__(self, worst: list[float]):
        super().__init__("no satisfying combined trace; robustness per setting: "
                         + ", ".join(f"{w:.4g}" for w in worst))
        self.worst = worst


@dataclass
class CombinedResult:
    behaviours: list[Behaviour]
    winners: list[list[int]]
    kept: list[bool]
    robustness: list[float]


def generate_combined_traces(plant: Plant, controllers: Sequence, properties: Sequence[Formula],
                             settings: Sequence[ControlSetting], segment: float, h: float = 0.1,
                             substeps: int = 10) -> CombinedResult:
    """Stitch traces by picking, per time segment, the controller with best robustness.

    For each setting and segment every controller is simulated from the same
    snapshot (plant state and its own internal state). Candidates are scored by
    the robustness at time 0 of the conjunction of ``properties`` on the trace
    prefix extended by the candidate; ties go to the lower index. Controllers
    that lose a segment are rolled back, so two controllers with identical
    gains but internal state can still produce different candidates after the
    first segment. The stitched trace is kept only if it satisfies the
    conjunction.

    Raises:
        ValueError: segment shorter than the property look-ahead, or reference
            pieces not aligned with segment boundaries.
        NoSatisfyingTraceError: every stitched trace was discarded.
    """
    if not controllers:
        raise ValueError("need at least one controller")
    phi = conjunction(*properties)
    need = obligation_horizon(phi)
    if segment + 1e-9 < need:
        raise ValueError(f"segment length {segment} is shorter than the property horizon {need}")
    seg_samples = round(segment / h)
    if seg_samples < 1 or abs(seg_samples * h - segment) > 1e-9:
        raise ValueError("segment length must be a multiple of the controller step")
    settings = list(settings)
    for s in settings:
        s.validate(plant)
        K = num_samples(s.T_sim, h)
        N = K - 1
        m = s.m_pieces
        if any((j * N) % m or ((j * N) // m) % seg_samples for j in range(1, m)):
            raise ValueError("reference pieces must start on segment boundaries")
    beh, winners = _combine_batch(plant, controllers, phi, settings, seg_samples, h, substeps)
    out = CombinedResult([], [], [], [])
    for i, b in enumerate(beh):
        rho = float(robustness_signal(phi, b.env(), h)[0])
        out.winners.append(winners[i])
        out.robustness.append(rho)
        out.kept.append(rho > 0)
        if rho > 0:
            out.behaviours.append(b)
    if not out.behaviours:
        raise NoSatisfyingTraceError(out.robustness)
    return out


def _pick_state(states: list, choice: np.ndarray):
    """Per-row selection among controller states (tuples of ``(B, ...)`` arrays)."""
    first = states[0]
    if first is None:
        return None
    if isinstance(first, tuple):
        return tuple(_pick_state([st[j] for st in states], choice) for j in range(len(first)))
    if not isinstance(first, np.ndarray):
        return first  # batch-wide flags are identical across candidates
    out = np.array(first, copy=True)
    for idx, st in enumerate(states[1:], start=1):
        mask = (choice == idx).reshape((-1,) + (1,) * (out.ndim - 1))
        out = np.where(mask, st, out)
    return out


def _combine_batch(plant, controllers, phi, settings, seg, h, substeps):
    K, r, nu, X = prepare_signals(plant, settings, h)
    B = len(settings)
    r_next = shift_next(r)
    xs = np.zeros((B, K, plant.n))
    us = np.zeros((B, K, plant.p))
    ys = np.zeros((B, K, plant.m))
    for c in controllers:
        c.reset(B)
    winners = [[] for _ in range(B)]
    rows = np.arange(B)
    k0 = 0
    while k0 < K:
        k1 = min(k0 + seg, K)
        if K - k1 == 1:
            k1 = K  # fold the final sample into the last segment
        snaps = [c.snapshot() for c in controllers]
        cands = []
        for idx, c in enumerate(controllers):
            c.restore(snaps[idx])
            cx, cu, cy = xs.copy(), us.copy(), ys.copy()
            alive = np.ones(B, dtype=bool)
            Xe = simulate_segment(plant, c, X.copy(), r, nu, k0, k1, h, substeps, alive, cx, cu, cy)
            if not alive.all():
                raise SimulationDiverged(f"controller {idx} diverged", k0 * h)
            end = min(k1 + 1, K)
            if k1 < K:
                cy[:, k1, :] = plant.output(Xe)
                cx[:, k1, :] = Xe
            env = {"r": r[:, :end], "r_next": r_next[:, :end], "y": cy[:, :end],
                   "x": cx[:, :end], "u": cu[:, :end]}
            score = robustness_signal(phi, env, h)[:, 0]
            cands.append((score, Xe, cx, cu, cy, c.snapshot()))
        scores = np.stack([cd[0] for cd in cands])
        # argmax returns the first maximum, i.e. the lower index on ties
        choice = np.argmax(scores, axis=0)
        X = np.stack([cd[1] for cd in cands])[choice, rows]
        xs = np.stack([cd[2] for cd in cands])[choice, rows]
        us = np.stack([cd[3] for cd in cands])[choice, rows]
        ys = np.stack([cd[4] for cd in cands])[choice, rows]
        for j, c in enumerate(controllers):
            # the winner keeps its evolved state, the others roll back
            c.restore(_pick_state([snaps[j], cands[j][5]], (choice == j).astype(int)))
        for i in range(B):
            winners[i].append(int(choice[i]))
        k0 = k1
    beh = [Behaviour(settings[i], h, r[i], xs[i], us[i], ys[i], nu[i]) for i in range(B)]
    return beh, winners


def clone_controller(c):
    return copy.deepcopy(c)
