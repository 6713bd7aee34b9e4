"""Grid-based ε-nets over piecewise-constant references and setting-space coverage.

A control setting is embedded as the flat vector ``x0 ++ refs ++ dists`` where
the reference block is piece-major (piece 0 of every reference channel first).
For piecewise-constant signals with a shared piece structure the sup-distance
between two signals is the max-norm distance between their embeddings.
"""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass

import numpy as np

from .plant import ControlSetting, Plant

log = logging.getLogger(__name__)

_INT_TOL = 1e-9


class GridError(ValueError):
    pass


def _cells(lo: float, hi: float, eps: float) -> int:
    c = (hi - lo) / (2.0 * eps)
    n = round(c)
    if n < 1 or abs(c - n) > _INT_TOL * max(1.0, c):
        raise GridError(f"(hi - lo) / (2 eps) = {c:g} is not a positive integer")
    return n


@dataclass(frozen=True)
class SignalGrid:
    """Partition of ``[lo, hi]^(m d_r)`` into cubes of side ``2 eps``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    m: int
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in np.atleast_1d(self.lo)))
        object.__setattr__(self, "hi", tuple(float(v) for v in np.atleast_1d(self.hi)))
        if len(self.lo) != len(self.hi):
            raise GridError("lo and hi must have the same dimension")
        if self.m < 1 or not self.eps > 0:
            raise GridError("need m >= 1 and eps > 0")
        for lo, hi in zip(self.lo, self.hi):
            _cells(lo, hi, self.eps)

    @property
    def d_r(self) -> int:
        return len(self.lo)

    @property
    def cells_per_axis(self) -> tuple[int, ...]:
        return tuple(_cells(lo, hi, self.eps) for lo, hi in zip(self.lo, self.hi))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells_per_axis, dtype=object) ** self.m)

    def axis_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds of the flattened piece-major box."""
        return np.tile(self.lo, self.m), np.tile(self.hi, self.m)


def beta(p, m: int, d_r: int = 1) -> np.ndarray:
    """Map a flat piece-major point to reference points of shape ``(d_r, m)``."""
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size != m * d_r:
        raise GridError(f"point has {p.size} coordinates, expected m*d_r = {m * d_r}")
    return p.reshape(m, d_r).T.copy()


def beta_inv(ref_points: np.ndarray) -> np.ndarray:
    """Inverse of :func:`beta`."""
    ref = np.asarray(ref_points, dtype=float)
    if ref.ndim == 1:
        ref = ref[None, :]
    return ref.T.reshape(-1).copy()


def beta_signal(p, T: float, m: int, t, d_r: int = 1) -> np.ndarray:
    """Evaluate the piecewise-constant signal ``beta(p)`` at times ``t`` in ``[0, T]``."""
    ref = beta(p, m, d_r)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > T):
        raise GridError("time outside [0, T]")
    idx = np.minimum(np.floor(t * m / T + _INT_TOL).astype(int), m - 1)
    return ref[:, idx].T


def grid_centers(grid: SignalGrid, cap: int = 100_000) -> np.ndarray:
    """Cell centers of ``grid`` in lexicographic order, shape ``(n_cells, m d_r)``."""
    n = grid.n_cells
    if n > cap:
        raise GridError(f"the net has {n} elements, above the cap of {cap}; raise the cap to at least {n}")
    axes = []
    for _ in range(grid.m):
        for lo, c in zip(grid.lo, grid.cells_per_axis):
            axes.append(lo + (2 * np.arange(c) + 1) * grid.eps)
    return np.array(list(itertools.product(*axes)), dtype=float).reshape(n, len(axes))


# ---------------------------------------------------------------------------
# Setting space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SettingSpace:
    """Box of control settings: initial state, reference pieces and disturbance pieces."""

    x0_lo: np.ndarray
    x0_hi: np.ndarray
    ref_lo: np.ndarray
    ref_hi: np.ndarray
    m: int
    T_sim: float
    dist_lo: np.ndarray | None = None
    dist_hi: np.ndarray | None = None
    x0_from_ref: bool = False

    @classmethod
    def for_plant(cls, plant: Plant, m: int, T_sim: float, x0_box=None, ref_range=None,
                  x0_from_ref: bool = False) -> "SettingSpace":
        """Setting box of ``plant``.

        With ``x0_from_ref`` the initial state equals the first reference piece
        (the plant state must be the output) and has no axes of its own.
        """
        if x0_from_ref:
            if plant.n != plant.d_r:
                raise ValueError("x0_from_ref needs state dimension equal to reference dimension")
            x0_box = (np.zeros(0), np.zeros(0))
        x0_lo, x0_hi = plant.x0_box if x0_box is None else x0_box
        r_lo, r_hi = plant.ref_range if ref_range is None else ref_range
        d_lo = d_hi = None
        if plant.dist_range is not None:
            d_lo, d_hi = plant.dist_range
        f = lambda v: None if v is None else np.atleast_1d(np.asarray(v, dtype=float))  # noqa: E731
        return cls(f(x0_lo), f(x0_hi), f(r_lo), f(r_hi), int(m), float(T_sim), f(d_lo), f(d_hi), x0_from_ref)

    @property
    def n(self) -> int:
        return self.x0_lo.size

    @property
    def d_r(self) -> int:
        return self.ref_lo.size

    @property
    def q(self) -> int:
        return 0 if self.dist_lo is None else self.dist_lo.size

    @property
    def lo(self) -> np.ndarray:
        parts = [self.x0_lo, np.tile(self.ref_lo, self.m)]
        if self.q:
            parts.append(np.tile(self.dist_lo, self.m))
        return np.concatenate(parts)

    @property
    def hi(self) -> np.ndarray:
        parts = [self.x0_hi, np.tile(self.ref_hi, self.m)]
        if self.q:
            parts.append(np.tile(self.dist_hi, self.m))
        return np.concatenate(parts)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def free(self) -> np.ndarray:
        """Mask of axes with nonzero extent."""
        return self.hi > self.lo

    def embed(self, s: ControlSetting) -> np.ndarray:
        parts = [np.zeros(0) if self.x0_from_ref else s.x0, beta_inv(s.ref_points)]
        if self.q:
            dist = s.dist_points if s.dist_points is not None else np.zeros((self.q, self.m))
            parts.append(beta_inv(dist))
        return np.concatenate(parts)

    def setting(self, v) -> ControlSetting:
        v = np.asarray(v, dtype=float)
        n, mr = self.n, self.m * self.d_r
        dist = beta(v[n + mr:], self.m, self.q) if self.q else None
        ref = beta(v[n:n + mr], self.m, self.d_r)
        x0 = ref[:, 0].copy() if self.x0_from_ref else v[:n].copy()
        return ControlSetting(x0, ref, dist, self.T_sim)

    def from_unit(self, z) -> np.ndarray:
        """Map points of ``[0, 1]^k`` over the free axes to full embeddings."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.tile(self.lo, (z.shape[0], 1))
        f = self.free
        out[:, f] = self.lo[f] + z * (self.hi[f] - self.lo[f])
        return out

    def to_unit(self, v) -> np.ndarray:
        v = np.atleast_2d(np.asarray(v, dtype=float))
        f = self.free
        return (v[:, f] - self.lo[f]) / (self.hi[f] - self.lo[f])

    def eps_net(self, eps: float, cap: int = 100_000) -> list[ControlSetting]:
        """ε-net settings: grid cell centers over every free axis, lexicographic order.

        Degenerate axes keep their single value. Initial-state axes are treated as
        constant signals and gridded like reference axes.
        """
        lo, hi, f = self.lo, self.hi, self.free
        axes = []
        for i in range(self.dim):
            if f[i]:
                c = _cells(lo[i], hi[i], eps)
                axes.append(lo[i] + (2 * np.arange(c) + 1) * eps)
            else:
                axes.append(np.array([lo[i]]))
        n = int(np.prod([len(a) for a in axes], dtype=object))
        if n > cap:
            raise GridError(f"the net has {n} elements, above the cap of {cap}; raise the cap to at least {n}")
        return [self.setting(np.array(p)) for p in itertools.product(*axes)]


def sup_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Max-norm distance between embeddings (broadcasting over leading axes)."""
    return np.max(np.abs(np.asarray(a) - np.asarray(b)), axis=-1)


def is_delta_separated(points, delta: float) -> tuple[bool, tuple[int, int] | None]:
    """True iff every pair of points is more than ``delta`` apart in max norm.

    Returns the first violating index pair (lexicographic) when not separated.
    ``points`` is ``(N, d)``; 1-D input is read as ``N`` constant signals.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    n = len(P)
    for i in range(n - 1):
        d = sup_distance(P[i + 1:], P[i])
        bad = np.flatnonzero(d <= delta)
        if bad.size:
            return False, (i, int(i + 1 + bad[0]))
    return True, None


# ---------------------------------------------------------------------------
# Coverage tracking
# ---------------------------------------------------------------------------


class CoverageTracker:
    """Visited-cell bookkeeping on a grid finer than the ε-net.

    The grid has ``factor`` times as many cells per free axis as the ε-net.
    Above ``cap`` total cells the ratio is estimated on a seeded random
    subsample of ``cap`` cells.
    """

    def __init__(self, space: SettingSpace, eps: float, factor: int = 2, cap: int = 1_000_000,
                 seed: int = 0):
        self.space = space
        f = space.free
        lo, hi = space.lo[f], space.hi[f]
        self.lo, self.hi = lo, hi
        self.shape = tuple(int(np.ceil((b - a) / (2 * eps) - _INT_TOL)) * factor for a, b in zip(lo, hi))
        self.total = int(np.prod(self.shape, dtype=object)) if self.shape else 1
        self.sample: set[int] | None = None
        if self.total > cap:
            rng = np.random.default_rng(seed)
            self.sample = set(int(i) for i in rng.choice(self.total, size=cap, replace=False))
        self.visited: set[int] = set()
        self._lock = threading.Lock()

    @property
    def n_cells(self) -> int:
        return self.total if self.sample is None else len(self.sample)

    def cell_index(self, v: np.ndarray) -> int:
        v = np.asarray(v, dtype=float)[self.space.free]
        if not self.shape:
            return 0
        z = (v - self.lo) / (self.hi - self.lo)
        if np.any(z < -_INT_TOL) or np.any(z > 1 + _INT_TOL):
            log.warning("setting outside the coverage box; clamped to the boundary cell")
        shape = np.array(self.shape)
        idx = np.clip(np.floor(z * shape).astype(int), 0, shape - 1)
        return int(np.ravel_multi_index(tuple(idx), self.shape))

    def record_visit(self, setting: ControlSetting | np.ndarray) -> None:
        v = self.space.embed(setting) if isinstance(setting, ControlSetting) else setting
        c = self.cell_index(v)
        with self._lock:
            self.visited.add(c)

    def record_many(self, settings) -> None:
        for s in settings:
            self.record_visit(s)

    def coverage_ratio(self) -> float:
        with self._lock:
            if self.sample is None:
                return len(self.visited) / self.total
            return len(self.visited & self.sample) / len(self.sample)
