"""Feedforward controller networks with history inputs, trained by MSE regression.

Inputs at sample ``k`` (``input_mode="separate"``)::

    r_k .. r_{k-n_r},  y_k .. y_{k-n_y},  u_{k-1} .. u_{k-n_u},  nu_k .. nu_{k-n_nu}

With ``input_mode="error"`` the reference and output blocks are replaced by the
tracking error ``e_k .. e_{k-n_y}`` with ``e = r - y`` (``n_r`` is ignored).
Training uses the teacher's past commands (teacher forcing); the deployed
controller feeds back its own past outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .plant import Behaviour, ControlSetting

SCHEMA_ID = "nncegis.net/1"
ACTIVATIONS = ("tanh", "relu")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class History:
    n_r: int = 0
    n_y: int = 0
    n_u: int = 0
    n_nu: int = 0

    def __post_init__(self):
        if min(self.n_r, self.n_y, self.n_u, self.n_nu) < 0:
            raise ValueError("history lengths must be >= 0")

    @property
    def longest(self) -> int:
        return max(self.n_r, self.n_y, self.n_u, self.n_nu)


@dataclass(frozen=True)
class NetSpec:
    hidden: tuple[tuple[int, str], ...]
    history: History = History()
    d_r: int = 1
    d_y: int = 1
    d_u: int = 1
    d_nu: int = 0
    input_mode: str = "separate"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple((int(w), str(a)) for w, a in self.hidden))
        for w, a in self.hidden:
            if w < 1 or a not in ACTIVATIONS:
                raise ValueError(f"bad hidden layer ({w}, {a!r})")
        if self.input_mode not in ("separate", "error"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.input_mode == "error" and self.d_r != self.d_y:
            raise ValueError("error inputs need d_r == d_y")

    @property
    def input_dim(self) -> int:
        h = self.history
        if self.input_mode == "error":
            head = self.d_y * (h.n_y + 1)
        else:
            head = self.d_r * (h.n_r + 1) + self.d_y * (h.n_y + 1)
        return head + self.d_u * h.n_u + self.d_nu * (h.n_nu + 1)

    @property
    def output_dim(self) -> int:
        return self.d_u

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w for w, _ in self.hidden] + [self.output_dim]

    def to_json(self) -> dict:
        return {"hidden": [list(x) for x in self.hidden], "history": vars(self.history),
                "d_r": self.d_r, "d_y": self.d_y, "d_u": self.d_u, "d_nu": self.d_nu,
                "input_mode": self.input_mode}

    @classmethod
    def from_json(cls, d: dict) -> "NetSpec":
        return cls(tuple(tuple(x) for x in d["hidden"]), History(**d["history"]), d["d_r"], d["d_y"],
                   d["d_u"], d["d_nu"], d.get("input_mode", "separate"))


def _window(sig: np.ndarray, n: int, k0: int, k1: int, lag0: int = 0) -> np.ndarray:
    """Stack ``sig[k-lag]`` for ``lag = lag0 .. lag0+n-1`` and ``k in [k0, k1)``."""
    cols = [sig[k0 - lag: k1 - lag] for lag in range(lag0, lag0 + n)]
    if not cols:
        return np.zeros((k1 - k0, 0))
    return np.hstack(cols)


def features(spec: NetSpec, r, y, u, nu, k0: int, k1: int) -> np.ndarray:
    """Network inputs for samples ``k0 .. k1-1`` of ``(K, dim)`` signal arrays."""
    h = spec.history
    if spec.input_mode == "error":
        parts = [_window(r - y, h.n_y + 1, k0, k1)]
    else:
        parts = [_window(r, h.n_r + 1, k0, k1), _window(y, h.n_y + 1, k0, k1)]
    parts.append(_window(u, h.n_u, k0, k1, lag0=1))
    if spec.d_nu:
        parts.append(_window(nu, h.n_nu + 1, k0, k1))
    return np.hstack(parts)


def make_io_pairs(b: Behaviour, spec: NetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Supervised pairs ``(input, u_k)`` for ``k = longest history .. K-1``."""
    k0 = spec.history.longest
    if b.K <= k0:
        raise ValueError(f"behaviour of {b.K} samples is too short for history {spec.history}")
    X = features(spec, b.r, b.y, b.u, b.nu, k0, b.K)
    return X, b.u[k0:].copy()


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Training rows with per-row provenance.

    ``setting_id`` indexes into ``settings``; ``source`` names the teacher and
    ``iteration`` the loop iteration in which the row was added.
    """

    X: np.ndarray
    T: np.ndarray
    setting_id: np.ndarray
    source: list[str] = field(default_factory=list)
    iteration: np.ndarray = None
    settings: list[ControlSetting] = field(default_factory=list)

    @classmethod
    def empty(cls, spec: NetSpec) -> "Dataset":
        return cls(np.zeros((0, spec.input_dim)), np.zeros((0, spec.output_dim)),
                   np.zeros(0, dtype=int), [], np.zeros(0, dtype=int), [])

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_behaviours(self) -> int:
        return len(self.settings)

    def add_behaviour(self, b: Behaviour, spec: NetSpec, source: str, iteration: int) -> "Dataset":
        """Return a new dataset with the rows extracted from ``b`` appended."""
        X, T = make_io_pairs(b, spec)
        sid = len(self.settings)
        return Dataset(
            np.vstack([self.X, X]), np.vstack([self.T, T]),
            np.concatenate([self.setting_id, np.full(len(X), sid)]),
            self.source + [source] * len(X),
            np.concatenate([self.iteration, np.full(len(X), iteration)]),
            self.settings + [b.setting],
        )

    def extend(self, behaviours: Sequence[Behaviour], spec: NetSpec, source: str,
               iteration: int) -> "Dataset":
        d = self
        for b in behaviours:
            d = d.add_behaviour(b, spec, source, iteration)
        return d

    def to_csv(self, path: str | Path) -> None:
        names = ([f"in{i}" for i in range(self.X.shape[1])] + [f"u{i}" for i in range(self.T.shape[1])]
                 + ["setting_id", "iteration"])
        data = np.hstack([self.X, self.T, self.setting_id[:, None], self.iteration[:, None]])
        np.savetxt(path, data, delimiter=",", header=",".join(names + ["source"]), comments="",
                   fmt="%.17g", footer="")
        # the source column is appended textually to keep numpy formatting exact
        lines = Path(path).read_text().splitlines()
        out = [lines[0]] + [f"{ln},{src}" for ln, src in zip(lines[1:], self.source)]
        Path(path).write_text("\n".join(out) + "\n")
        Path(path).with_suffix(".settings.json").write_text(
            json.dumps([s.to_json() for s in self.settings]))

    @classmethod
    def from_csv(cls, path: str | Path, spec: NetSpec) -> "Dataset":
        lines = Path(path).read_text().splitlines()[1:]
        nin, nout = spec.input_dim, spec.output_dim
        rows, src = [], []
        for ln in lines:
            *nums, s = ln.split(",")
            rows.append([float(v) for v in nums])
            src.append(s)
        data = np.asarray(rows, dtype=float).reshape(len(rows), nin + nout + 2)
        settings = [ControlSetting.from_json(d) for d in
                    json.loads(Path(path).with_suffix(".settings.json").read_text())]
        return cls(data[:, :nin], data[:, nin:nin + nout], data[:, -2].astype(int), src,
                   data[:, -1].astype(int), settings)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(float)


@dataclass
class Net:
    """Dense MLP with linear output and stored affine input/target scaling."""

    spec: NetSpec
    W: list[np.ndarray]
    b: list[np.ndarray]
    seed: int
    x_mean: np.ndarray
    x_std: np.ndarray
    t_mean: np.ndarray
    t_std: np.ndarray
    normalized: bool = False

    @classmethod
    def init(cls, spec: NetSpec, seed: int) -> "Net":
        """Glorot-uniform (tanh) or He-uniform (relu) initialisation; zero biases."""
        rng = np.random.default_rng(seed)
        sizes = spec.layer_sizes
        acts = [a for _, a in spec.hidden] + ["linear"]
        W, b = [], []
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            if acts[i] == "relu":
                lim = np.sqrt(6.0 / max(fan_in, 1))
            else:
                lim = np.sqrt(6.0 / (fan_in + fan_out))
            W.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            b.append(np.zeros(fan_out))
        return cls(spec, W, b, seed, np.zeros(spec.input_dim), np.ones(spec.input_dim),
                   np.zeros(spec.output_dim), np.ones(spec.output_dim))

    def copy(self) -> "Net":
        return replace(self, W=[w.copy() for w in self.W], b=[v.copy() for v in self.b],
                       x_mean=self.x_mean.copy(), x_std=self.x_std.copy(),
                       t_mean=self.t_mean.copy(), t_std=self.t_std.copy())

    @property
    def n_params(self) -> int:
        return sum(w.size + v.size for w, v in zip(self.W, self.b))

    def fit_normalization(self, X: np.ndarray, T: np.ndarray) -> None:
        """Per-feature standardisation; constant features get unit scale."""
        self.x_mean = X.mean(axis=0)
        sx = X.std(axis=0)
        self.x_std = np.where(sx > 1e-12, sx, 1.0)
        self.t_mean = T.mean(axis=0)
        st = T.std(axis=0)
        self.t_std = np.where(st > 1e-12, st, 1.0)
        self.normalized = True

    # forward / backward in normalised coordinates
    def _forward(self, Z: np.ndarray):
        acts = [Z]
        pre = []
        a = Z
        L = len(self.W)
        for i in range(L):
            z = a @ self.W[i] + self.b[i]
            pre.append(z)
            a = _act(self.spec.hidden[i][1], z) if i < L - 1 else z
            acts.append(a)
        return pre, acts

    def _loss_grad(self, Z: np.ndarray, Tn: np.ndarray):
        pre, acts = self._forward(Z)
        out = acts[-1]
        diff = out - Tn
        loss = float(np.mean(diff * diff))
        delta = 2.0 * diff / diff.size
        gW, gb = [None] * len(self.W), [None] * len(self.W)
        for i in range(len(self.W) - 1, -1, -1):
            gW[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.W[i].T) * _act_grad(self.spec.hidden[i - 1][1], pre[i - 1], acts[i])
        return loss, gW, gb

    def normalize_inputs(self, X: np.ndarray) -> np.ndarray:
        return (X - self.x_mean) / self.x_std

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Controller command for raw feature rows ``(N, input_dim)``."""
        _, acts = self._forward(self.normalize_inputs(np.asarray(X, dtype=float)))
        return acts[-1] * self.t_std + self.t_mean

    def mse(self, X: np.ndarray, T: np.ndarray) -> float:
        if len(X) == 0:
            return float("nan")
        d = self.predict(X) - T
        return float(np.mean(d * d))

    # serialisation
    def to_json(self) -> dict:
        return {
            "schema": SCHEMA_ID, "spec": self.spec.to_json(), "seed": self.seed,
            "normalized": self.normalized,
            "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
            "t_mean": self.t_mean.tolist(), "t_std": self.t_std.tolist(),
            "W": [w.tolist() for w in self.W], "b": [v.tolist() for v in self.b],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Net":
        if d.get("schema") != SCHEMA_ID:
            raise ValueError(f"unsupported net schema {d.get('schema')!r}")
        def arr(v):
            return np.asarray(v, dtype=float)

        spec = NetSpec.from_json(d["spec"])
        sizes = spec.layer_sizes
        W = [arr(w).reshape(sizes[i], sizes[i + 1]) for i, w in enumerate(d["W"])]
        return cls(spec, W, [arr(v) for v in d["b"]], int(d["seed"]), arr(d["x_mean"]), arr(d["x_std"]),
                   arr(d["t_mean"]), arr(d["t_std"]), bool(d.get("normalized", True)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Net":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def split_by_setting(dataset: Dataset, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Row masks (train, val); whole behaviours go to one side."""
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must be in [0, 1)")
    ids = np.unique(dataset.setting_id)
    n_val = int(np.floor(val_fraction * len(ids)))
    rng = np.random.default_rng([seed, 1])
    val_ids = rng.permutation(ids)[:n_val]
    val = np.isin(dataset.setting_id, val_ids)
    return ~val, val


def train(net: Net, dataset: Dataset, epochs: int = 200, batch: int = 64, lr: float = 1e-3,
          val_fraction: float = 0.1, seed: int = 0, beta1: float = 0.9, beta2: float = 0.999,
          adam_eps: float = 1e-8) -> tuple[Net, float, float]:
    """Minibatch Adam on the MSE loss; returns ``(trained copy, train_mse, val_mse)``.

    Normalisation is fitted on the training split the first time a net is
    trained and kept frozen for warm-started retraining. Errors are reported in
    the units of the command signal; the validation error is NaN when the split
    is empty.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    net = net.copy()
    tr, va = split_by_setting(dataset, val_fraction, seed)
    X, T = dataset.X[tr], dataset.T[tr]
    if not net.normalized:
        net.fit_normalization(X, T)
    Z = net.normalize_inputs(X)
    Tn = (T - net.t_mean) / net.t_std
    n = len(Z)
    rng = np.random.default_rng([seed, 2])
    mW = [np.zeros_like(w) for w in net.W]
    vW = [np.zeros_like(w) for w in net.W]
    mb = [np.zeros_like(v) for v in net.b]
    vb = [np.zeros_like(v) for v in net.b]
    step = 0
    bs = n if batch <= 0 or n <= batch else batch
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            loss, gW, gb = net._loss_grad(Z[idx], Tn[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            step += 1
            c1 = 1 - beta1 ** step
            c2 = 1 - beta2 ** step
            for P, G, M, V in ((net.W, gW, mW, vW), (net.b, gb, mb, vb)):
                for i in range(len(P)):
                    M[i] *= beta1
                    M[i] += (1 - beta1) * G[i]
                    V[i] *= beta2
                    V[i] += (1 - beta2) * G[i] * G[i]
                    P[i] -= lr * (M[i] / c1) / (np.sqrt(V[i] / c2) + adam_eps)
    train_mse = net.mse(X, T)
    if not np.isfinite(train_mse):
        raise TrainingDiverged(epochs)
    return net, train_mse, net.mse(dataset.X[va], dataset.T[va])


def _nudge_off_kinks(net: Net, Z: np.ndarray, margin: float, seed: int = 0) -> np.ndarray:
    """Perturb inputs until no relu pre-activation lies within ``margin`` of 0."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        pre, _ = net._forward(Z)
        near = [np.abs(z).min() < margin for z, (_, a) in zip(pre, net.spec.hidden) if a == "relu"]
        if not any(near):
            return Z
        Z = Z + rng.normal(scale=10 * margin, size=Z.shape)
    raise RuntimeError("could not move the input away from relu kinks")


def gradient_check(net: Net, x: np.ndarray, t: np.ndarray, eps: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences of the loss.

    The loss is the MSE in normalised coordinates for one row. Relative error is
    ``|g - g_fd| / max(|g| + |g_fd|, floor)``. For relu layers the input is first
    nudged so that no unit sits within finite-difference reach of its kink.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    Z = net.normalize_inputs(np.atleast_2d(np.asarray(x, dtype=float)))
    if any(a == "relu" for _, a in net.spec.hidden):
        scale = 1.0 + max(float(np.abs(w).max()) for w in net.W) + float(np.abs(Z).max())
        Z = _nudge_off_kinks(net, Z, 100 * eps * scale)
    Tn = (np.atleast_2d(np.asarray(t, dtype=float)) - net.t_mean) / net.t_std
    _, gW, gb = net._loss_grad(Z, Tn)
    worst = 0.0
    for P, G in ((net.W, gW), (net.b, gb)):
        for p, g in zip(P, G):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + eps
                lp = net._loss_grad(Z, Tn)[0]
                flat[j] = old - eps
                lm = net._loss_grad(Z, Tn)[0]
                flat[j] = old
                fd = (lp - lm) / (2 * eps)
                err = abs(gflat[j] - fd) / max(abs(gflat[j]) + abs(fd), floor)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Deployment
# ---------------------------------------------------------------------------


class NetController:
    """Batched closed-loop adapter around a trained :class:`Net`.

    Past ``r``/``y``/``nu`` buffers are filled with the first observed sample;
    the past-command buffer starts at zero.
    """

    def __init__(self, net: Net):
        self.net = net
        self.spec = net.spec
        self.reset(1)

    def reset(self, batch: int) -> None:
        self.batch = batch
        self.started = False
        h = self.spec.history
        s = self.spec
        n_ref = h.n_y if s.input_mode == "error" else h.n_r
        self.rb = np.zeros((batch, n_ref + 1, s.d_r))
        self.yb = np.zeros((batch, h.n_y + 1, s.d_y))
        self.ub = np.zeros((batch, h.n_u, s.d_u))
        self.nb = np.zeros((batch, h.n_nu + 1, s.d_nu))

    def _push(self, buf: np.ndarray, v: np.ndarray) -> np.ndarray:
        if buf.shape[1] == 0:
            return buf
        return np.concatenate([v[:, None, :], buf[:, :-1, :]], axis=1)

    def input_vector(self, y, r, nu=None) -> np.ndarray:
        """Update buffers with the new samples and return the network input."""
        y = np.asarray(y, dtype=float).reshape(self.batch, self.spec.d_y)
        r = np.asarray(r, dtype=float).reshape(self.batch, self.spec.d_r)
        nu = (np.zeros((self.batch, self.spec.d_nu)) if nu is None
              else np.asarray(nu, dtype=float).reshape(self.batch, -1)[:, : self.spec.d_nu])
        if not self.started:
            self.rb[:] = r[:, None, :]
            self.yb[:] = y[:, None, :]
            self.nb[:] = nu[:, None, :]
            self.started = True
        else:
            self.rb = self._push(self.rb, r)
            self.yb = self._push(self.yb, y)
            self.nb = self._push(self.nb, nu)
        B = self.batch
        if self.spec.input_mode == "error":
            parts = [(self.rb - self.yb).reshape(B, -1)]
        else:
            parts = [self.rb.reshape(B, -1), self.yb.reshape(B, -1)]
        parts.append(self.ub.reshape(B, -1))
        if self.spec.d_nu:
            parts.append(self.nb.reshape(B, -1))
        return np.hstack(parts)

    def step(self, y, r, nu=None) -> np.ndarray:
        u = self.net.predict(self.input_vector(y, r, nu))
        self.ub = self._push(self.ub, u)
        return u

    def snapshot(self):
        return (self.rb.copy(), self.yb.copy(), self.ub.copy(), self.nb.copy(), self.started)

    def restore(self, snap) -> None:
        self.rb, self.yb, self.ub, self.nb = (a.copy() for a in snap[:4])
        self.started = snap[4]


def as_controller(net: Net) -> NetController:
    return NetController(net)
