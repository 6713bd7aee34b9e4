"""Plant models, RK4 integration and closed-loop simulation under zero-order hold.

All simulation routines are batched: states have shape ``(B, n)`` and a batch of
control settings is simulated in lock-step. Single runs are the ``B = 1`` case.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

DIVERGENCE_LIMIT = 1e8


class SimulationDiverged(RuntimeError):
    """Raised when the vector field or the controller produces non-finite values."""

    def __init__(self, message: str, t: float, x: np.ndarray | None = None):
        super().__init__(f"{message} at t={t:g}")
        self.t = t
        self.x = x


@dataclass(frozen=True)
class Plant:
    """Continuous-time plant ``x' = f(x, u, nu)``, ``y = g(x)``.

    ``dynamics`` and ``output`` operate on batches: ``x`` is ``(B, n)``,
    ``u`` is ``(B, p)``, ``nu`` is ``(B, q)``.
    """

    name: str
    n: int
    m: int
    p: int
    q: int
    dynamics: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    output: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    x0_box: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)
    ref_range: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)
    dist_range: tuple[np.ndarray, np.ndarray] | None = field(repr=False, default=None)
    lipschitz_x: float | None = None
    lipschitz_u: float | None = None
    x_floor: np.ndarray | None = field(repr=False, default=None)

    def project(self, X: np.ndarray) -> np.ndarray:
        """Clip states to the physical lower bound, if the plant declares one."""
        return X if self.x_floor is None else np.maximum(X, self.x_floor)

    @property
    def d_r(self) -> int:
        return self.m

    def with_x0_box(self, lo, hi) -> "Plant":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        return _replace(self, x0_box=(lo, hi))

    def with_ref_range(self, lo, hi) -> "Plant":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        return _replace(self, ref_range=(lo, hi))


def _replace(plant: Plant, **kw) -> Plant:
    return replace(plant, **kw)


@dataclass(frozen=True)
class ControlSetting:
    """Initial state plus piecewise-constant reference and disturbance points.

    ``ref_points`` has shape ``(d_r, m_pieces)``; piece ``j`` covers
    ``[j*T/m, (j+1)*T/m)``. ``dist_points`` is ``(q, m_pieces)`` or None (zero).
    """

    x0: np.ndarray
    ref_points: np.ndarray
    dist_points: np.ndarray | None = None
    T_sim: float = 10.0

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        ref = np.asarray(self.ref_points, dtype=float)
        if ref.ndim == 1:
            ref = ref[None, :]
        if ref.ndim != 2 or ref.shape[1] < 1:
            raise ValueError("ref_points must be (d_r, m_pieces) with m_pieces >= 1")
        dist = self.dist_points
        if dist is not None:
            dist = np.asarray(dist, dtype=float)
            if dist.ndim == 1:
                dist = dist[None, :]
            if dist.shape[1] != ref.shape[1]:
                raise ValueError("dist_points must have as many pieces as ref_points")
        if not self.T_sim > 0:
            raise ValueError("T_sim must be positive")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "ref_points", ref)
        object.__setattr__(self, "dist_points", dist)

    @property
    def m_pieces(self) -> int:
        return self.ref_points.shape[1]

    def validate(self, plant: Plant, tol: float = 1e-9) -> None:
        if self.x0.shape != (plant.n,):
            raise ValueError(f"x0 has shape {self.x0.shape}, plant needs ({plant.n},)")
        if self.ref_points.shape[0] != plant.d_r:
            raise ValueError("reference dimension does not match plant output dimension")
        if plant.x0_box is not None:
            lo, hi = plant.x0_box
            if np.any(self.x0 < lo - tol) or np.any(self.x0 > hi + tol):
                raise ValueError(f"x0 {self.x0} outside initial-state box")
        if plant.ref_range is not None:
            lo, hi = plant.ref_range
            if np.any(self.ref_points < lo[:, None] - tol) or np.any(self.ref_points > hi[:, None] + tol):
                raise ValueError("reference points outside reference range")

    def to_json(self) -> dict:
        return {
            "x0": self.x0.tolist(),
            "ref_points": self.ref_points.tolist(),
            "dist_points": None if self.dist_points is None else self.dist_points.tolist(),
            "T_sim": self.T_sim,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ControlSetting":
        return cls(np.asarray(d["x0"]), np.asarray(d["ref_points"]),
                   None if d.get("dist_points") is None else np.asarray(d["dist_points"]),
                   float(d["T_sim"]))


def num_samples(T_sim: float, h: float) -> int:
    """Number of samples ``K = T_sim/h + 1``; ``h`` must divide ``T_sim``."""
    N = round(T_sim / h)
    if N < 1 or abs(N * h - T_sim) > 1e-9 * max(1.0, T_sim):
        raise ValueError(f"controller step {h} does not divide T_sim={T_sim}")
    return N + 1


def piece_index(K: int, m_pieces: int) -> np.ndarray:
    """Reference piece active at each sample, computed in integer arithmetic."""
    N = K - 1
    k = np.arange(K)
    return np.minimum(k * m_pieces // N, m_pieces - 1)


def sample_pieces(points: np.ndarray, K: int) -> np.ndarray:
    """Sample piecewise-constant points ``(..., d, m)`` to ``(..., K, d)``."""
    idx = piece_index(K, points.shape[-1])
    return np.swapaxes(points[..., idx], -1, -2)


def shift_next(r: np.ndarray) -> np.ndarray:
    """One-sample look-ahead along the time axis (``-2``); last sample repeats."""
    out = np.empty_like(r)
    out[..., :-1, :] = r[..., 1:, :]
    out[..., -1, :] = r[..., -1, :]
    return out


# ---------------------------------------------------------------------------
# Behaviours
# ---------------------------------------------------------------------------


@dataclass
class Behaviour:
    """One closed-loop run; every signal is ``(K, dim)`` on the grid ``k*h``."""

    setting: ControlSetting
    step: float
    r: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    nu: np.ndarray
    diverged: bool = False

    @property
    def K(self) -> int:
        return self.r.shape[0]

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.K) * self.step

    def env(self, **extra: np.ndarray) -> dict[str, np.ndarray]:
        """Signal map for robustness evaluation, including ``r_next``."""
        d = {"r": self.r, "y": self.y, "u": self.u, "x": self.x, "r_next": shift_next(self.r)}
        if self.nu.shape[-1]:
            d["nu"] = self.nu
        d.update(extra)
        return d

    def to_csv(self, path: str | Path) -> None:
        """Write samples as CSV plus a ``.json`` sidecar header."""
        path = Path(path)
        cols = [self.t[:, None], self.r, self.y, self.u, self.nu, self.x]
        names = ["t"]
        for tag, arr in (("r", self.r), ("y", self.y), ("u", self.u), ("nu", self.nu), ("x", self.x)):
            names += [f"{tag}{i}" for i in range(arr.shape[1])]
        data = np.hstack(cols)
        np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.17g")
        header = {
            "step": self.step,
            "dims": {k: int(getattr(self, k).shape[1]) for k in ("r", "y", "u", "nu", "x")},
            "setting": self.setting.to_json(),
            "diverged": self.diverged,
        }
        path.with_suffix(".json").write_text(json.dumps(header, indent=2))

    @classmethod
    def from_csv(cls, path: str | Path) -> "Behaviour":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        dims = header["dims"]
        parts = {}
        col = 1
        for k in ("r", "y", "u", "nu", "x"):
            parts[k] = data[:, col: col + dims[k]].copy()
            col += dims[k]
        return cls(ControlSetting.from_json(header["setting"]), float(header["step"]),
                   diverged=bool(header.get("diverged", False)), **parts)


@dataclass
class BatchBehaviour:
    """A batch of runs; signals are ``(B, K, dim)``."""

    settings: list[ControlSetting]
    step: float
    r: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    nu: np.ndarray
    diverged: np.ndarray

    def __len__(self) -> int:
        return self.r.shape[0]

    def env(self, **extra: np.ndarray) -> dict[str, np.ndarray]:
        d = {"r": self.r, "y": self.y, "u": self.u, "x": self.x, "r_next": shift_next(self.r)}
        if self.nu.shape[-1]:
            d["nu"] = self.nu
        d.update(extra)
        return d

    def behaviour(self, i: int) -> Behaviour:
        return Behaviour(self.settings[i], self.step, self.r[i], self.x[i], self.u[i], self.y[i],
                         self.nu[i], bool(self.diverged[i]))

    def behaviours(self) -> list[Behaviour]:
        return [self.behaviour(i) for i in range(len(self))]


# ---------------------------------------------------------------------------
# Integration and simulation
# ---------------------------------------------------------------------------


def rk4_step(plant: Plant, x, u, nu, h_int: float, t: float = 0.0) -> np.ndarray:
    """Classic RK4 update with ``u`` and ``nu`` held constant over the step."""
    if not h_int > 0:
        raise ValueError("integration step must be positive")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    U = np.atleast_2d(np.asarray(u, dtype=float))
    NU = np.atleast_2d(np.asarray(nu, dtype=float)) if nu is not None else np.zeros((X.shape[0], plant.q))
    f = plant.dynamics
    k1 = f(X, U, NU)
    k2 = f(X + 0.5 * h_int * k1, U, NU)
    k3 = f(X + 0.5 * h_int * k2, U, NU)
    k4 = f(X + h_int * k3, U, NU)
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise SimulationDiverged("non-finite derivative", t, x)
    out = plant.project(X + (h_int / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
    return out[0] if single else out


class Controller(Protocol):
    """Batched discrete-time controller: ``u_k = C(y_k, r_k, nu_k)`` with internal state."""

    def reset(self, batch: int) -> None: ...

    def step(self, y: np.ndarray, r: np.ndarray, nu: np.ndarray) -> np.ndarray: ...

    def snapshot(self): ...

    def restore(self, snap) -> None: ...


def _advance(plant: Plant, X: np.ndarray, U: np.ndarray, NU: np.ndarray, h: float, substeps: int,
             alive: np.ndarray) -> np.ndarray:
    """Integrate over one controller period; rows with non-finite values are marked dead."""
    h_int = h / substeps
    f = plant.dynamics
    with np.errstate(all="ignore"):
        for _ in range(substeps):
            k1 = f(X, U, NU)
            k2 = f(X + 0.5 * h_int * k1, U, NU)
            k3 = f(X + 0.5 * h_int * k2, U, NU)
            k4 = f(X + h_int * k3, U, NU)
            X = plant.project(X + (h_int / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
    bad = ~np.all(np.isfinite(X), axis=1) | np.any(np.abs(X) > DIVERGENCE_LIMIT, axis=1)
    alive &= ~bad
    return X


def simulate_segment(plant: Plant, controller, X: np.ndarray, r: np.ndarray, nu: np.ndarray,
                     k0: int, k1: int, h: float, substeps: int, alive: np.ndarray,
                     out_x, out_u, out_y) -> np.ndarray:
    """Run samples ``k0 .. k1-1`` in place, integrating after each; returns the state at ``k1``.

    ``r`` and ``nu`` are the full sampled signals ``(B, K, dim)``. When
    ``k1 == K`` the last sample is recorded without integrating past the horizon.
    """
    K = r.shape[1]
    for k in range(k0, k1):
        Y = plant.output(X)
        with np.errstate(all="ignore"):
            U = np.asarray(controller.step(Y, r[:, k, :], nu[:, k, :]), dtype=float)
        U = U.reshape(X.shape[0], plant.p)
        bad_u = ~np.all(np.isfinite(U), axis=1)
        alive &= ~bad_u
        out_x[:, k, :] = X
        out_y[:, k, :] = Y
        out_u[:, k, :] = U
        if k < K - 1:
            X = _advance(plant, X, np.where(bad_u[:, None], 0.0, U), nu[:, k, :], h, substeps, alive)
            # keep dead rows finite so they do not poison batched controllers
            X = np.where(alive[:, None], X, 0.0)
    return X


def prepare_signals(plant: Plant, settings: Sequence[ControlSetting], h: float):
    T = settings[0].T_sim
    if any(abs(s.T_sim - T) > 1e-12 for s in settings):
        raise ValueError("all settings in a batch must share T_sim")
    K = num_samples(T, h)
    B = len(settings)
    r = np.stack([sample_pieces(s.ref_points, K) for s in settings])
    nu = np.zeros((B, K, plant.q))
    for i, s in enumerate(settings):
        if s.dist_points is not None:
            nu[i] = sample_pieces(s.dist_points, K)
    X0 = np.stack([s.x0 for s in settings]).astype(float)
    return K, r, nu, X0


def simulate_batch(plant: Plant, controller, settings: Sequence[ControlSetting], h: float = 0.1,
                   substeps: int = 10, on_diverge: str = "raise") -> BatchBehaviour:
    """Simulate a batch of settings in lock-step with one batched controller.

    ``on_diverge="raise"`` raises :class:`SimulationDiverged`; ``"mark"`` zeroes
    the offending rows from the divergence point on and flags them.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if not settings:
        raise ValueError("no settings to simulate")
    for s in settings:
        s.validate(plant)
    K, r, nu, X = prepare_signals(plant, settings, h)
    B = len(settings)
    xs = np.zeros((B, K, plant.n))
    us = np.zeros((B, K, plant.p))
    ys = np.zeros((B, K, plant.m))
    alive = np.ones(B, dtype=bool)
    controller.reset(B)
    simulate_segment(plant, controller, X, r, nu, 0, K, h, substeps, alive, xs, us, ys)
    if on_diverge == "raise" and not alive.all():
        i = int(np.flatnonzero(~alive)[0])
        raise SimulationDiverged(f"simulation of setting {i} diverged", float("nan"), xs[i, -1])
    return BatchBehaviour(list(settings), h, r, xs, us, ys, nu, ~alive)


def simulate_closed_loop(plant: Plant, controller, setting: ControlSetting, h: float = 0.1,
                         substeps: int = 10) -> Behaviour:
    """Simulate one setting; see :func:`simulate_batch`."""
    return simulate_batch(plant, controller, [setting], h, substeps).behaviour(0)


# ---------------------------------------------------------------------------
# Benchmark plants
# ---------------------------------------------------------------------------

TANK_AREA = 20.0
TANK_INFLOW = 5.0
TANK_OUTFLOW = 2.0


def _tank_dynamics(x, u, nu):
    return (TANK_INFLOW * u - TANK_OUTFLOW * np.sqrt(np.maximum(x, 0.0))) / TANK_AREA


def make_water_tank() -> Plant:
    """Water tank ``x' = (b u - a sqrt(max(x, 0))) / A`` with level output."""
    return Plant(
        name="water_tank", n=1, m=1, p=1, q=0,
        dynamics=_tank_dynamics, output=lambda x: x.copy(),
        x0_box=(np.array([5.0]), np.array([13.0])),
        ref_range=(np.array([8.0]), np.array([12.0])),
        # sqrt is not globally Lipschitz at 0; on levels >= 1 the slope is a/(2A)
        lipschitz_x=TANK_OUTFLOW / (2.0 * TANK_AREA),
        lipschitz_u=TANK_INFLOW / TANK_AREA,
        # RK4 stages can step a nearly empty tank slightly below zero
        x_floor=np.zeros(1),
    )


LIN2D_A = np.array([[0.0, 1.0], [-1.0, -1.0]])
LIN2D_B = np.array([0.0, 1.0])


def _lin2d_dynamics(x, u, nu):
    return x @ LIN2D_A.T + u[:, :1] * LIN2D_B


def make_linear2d() -> Plant:
    """Linear 2-D plant ``x' = A x + B u`` observed through ``y = x_1``."""
    return Plant(
        name="linear2d", n=2, m=1, p=1, q=0,
        dynamics=_lin2d_dynamics, output=lambda x: x[:, :1].copy(),
        x0_box=(np.array([0.0, 0.0]), np.array([0.0, 0.0])),
        ref_range=(np.array([0.0]), np.array([1.0])),
        lipschitz_x=float(np.linalg.norm(LIN2D_A, np.inf)),
        lipschitz_u=1.0,
    )


def make_first_order() -> Plant:
    """Scalar test plant ``x' = -x + u`` with ``y = x``."""
    return Plant(
        name="first_order", n=1, m=1, p=1, q=0,
        dynamics=lambda x, u, nu: -x + u[:, :1], output=lambda x: x.copy(),
        x0_box=(np.array([-10.0]), np.array([10.0])),
        ref_range=(np.array([-10.0]), np.array([10.0])),
        lipschitz_x=1.0, lipschitz_u=1.0,
    )


PLANTS = {"water_tank": make_water_tank, "linear2d": make_linear2d, "first_order": make_first_order}


def make_plant(name: str) -> Plant:
    try:
        return PLANTS[name]()
    except KeyError:
        raise ValueError(f"unknown plant {name!r}; choose from {sorted(PLANTS)}") from None
