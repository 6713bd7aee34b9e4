import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nncegis.nn import (Dataset, History, Net, NetController, NetSpec, TrainingDiverged, features,
                        gradient_check, make_io_pairs, split_by_setting, train)
from nncegis.plant import Behaviour, ControlSetting


def behaviour(K=5, seed=0, const=None):
    rng = np.random.default_rng(seed)
    sig = (lambda: np.full((K, 1), const)) if const is not None else (lambda: rng.normal(size=(K, 1)))
    s = ControlSetting(np.array([10.0]), np.array([[10.0]]), None, (K - 1) * 0.1)
    return Behaviour(s, 0.1, sig(), sig(), sig(), sig(), np.zeros((K, 0)))


SPEC = NetSpec(((8, "tanh"), (8, "tanh")), History(1, 1, 2, 0))


# --- data extraction ------------------------------------------------------------------


def test_pairs_start_at_longest_history():
    b = behaviour(K=5)
    X, T = make_io_pairs(b, SPEC)
    assert len(X) == 3 and np.array_equal(T, b.u[2:])
    # row for k = 2: r2 r1 y2 y1 u1 u0
    want = [b.r[2, 0], b.r[1, 0], b.y[2, 0], b.y[1, 0], b.u[1, 0], b.u[0, 0]]
    assert X[0].tolist() == want


def test_memoryless_pairs():
    b = behaviour(K=4)
    spec = NetSpec(((4, "tanh"),), History())
    X, T = make_io_pairs(b, spec)
    assert len(X) == 4 and np.array_equal(X, np.hstack([b.r, b.y]))


def test_error_mode_inputs():
    b = behaviour(K=6)
    spec = NetSpec(((4, "tanh"),), History(0, 1, 1, 0), input_mode="error")
    X, _ = make_io_pairs(b, spec)
    e = b.r - b.y
    assert X[0].tolist() == [e[1, 0], e[0, 0], b.u[0, 0]]


def test_constant_behaviour_gives_identical_rows():
    X, T = make_io_pairs(behaviour(K=7, const=3.0), SPEC)
    assert np.all(X == X[0]) and np.all(T == T[0])


def test_too_short_behaviour_rejected():
    with pytest.raises(ValueError):
        make_io_pairs(behaviour(K=2), SPEC)


def test_dataset_union_and_csv_round_trip(tmp_path):
    d = Dataset.empty(SPEC).extend([behaviour(seed=1), behaviour(seed=2)], SPEC, "nominal", 0)
    assert len(d) == 6 and d.n_behaviours == 2 and set(d.setting_id) == {0, 1}
    d.to_csv(tmp_path / "d.csv")
    e = Dataset.from_csv(tmp_path / "d.csv", SPEC)
    assert np.array_equal(e.X, d.X) and np.array_equal(e.T, d.T) and e.source == d.source
    assert np.array_equal(e.setting_id, d.setting_id) and len(e.settings) == 2


def test_split_keeps_behaviours_whole():
    d = Dataset.empty(SPEC).extend([behaviour(K=8, seed=i) for i in range(20)], SPEC, "nominal", 0)
    tr, va = split_by_setting(d, 0.1, 0)
    assert va.sum() == 2 * 6
    assert not set(d.setting_id[tr]) & set(d.setting_id[va])


# --- network ------------------------------------------------------------------------


@given(st.integers(0, 10_000), st.sampled_from(["tanh", "relu"]))
@settings(max_examples=25, deadline=None)
def test_gradient_check(seed, act):
    rng = np.random.default_rng(seed)
    spec = NetSpec(((8, act), (8, act)), History(1, 1, 1, 0))
    net = Net.init(spec, seed)
    x = rng.normal(size=spec.input_dim)
    assert gradient_check(net, x, rng.normal(size=1)) < 1e-5


def test_gradient_check_small_tanh_net():
    net = Net.init(NetSpec(((8, "tanh"), (8, "tanh")), History()), 3)
    assert gradient_check(net, np.array([0.3, -0.2]), np.array([0.5])) < 1e-6


def test_zero_net_has_zero_gradient():
    net = Net.init(NetSpec(((4, "tanh"),), History()), 0)
    net.W = [np.zeros_like(w) for w in net.W]
    _, gW, gb = net._loss_grad(np.zeros((1, 2)), np.zeros((1, 1)))
    assert all(np.all(g == 0) for g in gW + gb)


def test_one_row_is_memorised():
    d = Dataset(np.array([[0.3, -0.1]]), np.array([[0.7]]), np.zeros(1, dtype=int), ["t"], np.zeros(1, dtype=int),
                [behaviour().setting])
    net, tr, va = train(Net.init(NetSpec(((8, "tanh"),), History()), 0), d, epochs=3000, lr=1e-2)
    assert tr < 1e-8 and np.isnan(va)


def test_linear_target_is_learned():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(100, 2))
    T = 2.0 * X[:, :1]
    d = Dataset(X, T, np.arange(100), ["t"] * 100, np.zeros(100, dtype=int), [behaviour().setting] * 100)
    # least squares on the same data recovers the map exactly, so it is realizable
    coef, *_ = np.linalg.lstsq(np.hstack([X, np.ones((100, 1))]), T, rcond=None)
    assert np.allclose(coef[:, 0], [2, 0, 0])
    net, tr, va = train(Net.init(NetSpec((), History()), 0), d, epochs=500, lr=1e-2, batch=16)
    assert va < 1e-4


def test_zero_epochs_leaves_weights_unchanged():
    d = Dataset.empty(SPEC).extend([behaviour(seed=i) for i in range(3)], SPEC, "t", 0)
    net0 = Net.init(SPEC, 1)
    net, tr, _ = train(net0, d, epochs=0)
    assert all(np.array_equal(a, b) for a, b in zip(net.W, net0.W))
    assert tr == pytest.approx(net.mse(d.X, d.T))


def test_training_is_bitwise_deterministic():
    d = Dataset.empty(SPEC).extend([behaviour(K=20, seed=i) for i in range(5)], SPEC, "t", 0)
    a, _, _ = train(Net.init(SPEC, 4), d, epochs=20, seed=4)
    b, _, _ = train(Net.init(SPEC, 4), d, epochs=20, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.W + a.b, b.W + b.b))


def test_loss_mostly_decreases():
    d = Dataset.empty(SPEC).extend([behaviour(K=30, seed=i) for i in range(6)], SPEC, "t", 0)
    net = Net.init(SPEC, 0)
    losses = []
    for _ in range(30):
        net, tr, _ = train(net, d, epochs=1, val_fraction=0.0)
        losses.append(tr)
    drops = sum(b <= a for a, b in zip(losses, losses[1:]))
    assert drops > len(losses[1:]) / 2


def test_divergence_is_reported():
    d = Dataset.empty(SPEC).extend([behaviour(K=10, seed=i) for i in range(3)], SPEC, "t", 0)
    net = Net.init(SPEC, 0)
    net.W[0][0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(net, d, epochs=1)


def test_json_round_trip(tmp_path):
    net = Net.init(SPEC, 7)
    net.save(tmp_path / "n.json")
    back = Net.load(tmp_path / "n.json")
    x = np.random.default_rng(0).normal(size=(5, SPEC.input_dim))
    assert np.array_equal(back.predict(x), net.predict(x))


# --- deployment adapter ---------------------------------------------------------------


def test_constant_net_gives_constant_command():
    net = Net.init(NetSpec(((4, "tanh"),), History(1, 1, 1, 0)), 0)
    net.W[-1][:] = 0.0
    net.b[-1][:] = 2.5
    c = NetController(net)
    c.reset(3)
    for k in range(5):
        assert np.all(c.step(np.full((3, 1), k), np.ones((3, 1))) == 2.5)


def test_identity_on_reference():
    spec = NetSpec((), History())
    net = Net.init(spec, 0)
    net.W = [np.array([[1.0], [0.0]])]
    c = NetController(net)
    c.reset(2)
    r = np.array([[8.5], [11.0]])
    assert np.array_equal(c.step(np.zeros((2, 1)), r), r)


def test_first_input_vector_repeats_samples_and_zero_fills_commands():
    c = NetController(Net.init(SPEC, 0))
    c.reset(1)
    v = c.input_vector(np.array([[2.0]]), np.array([[3.0]]))
    assert v.tolist() == [[3.0, 3.0, 2.0, 2.0, 0.0, 0.0]]


def test_adapter_matches_teacher_forced_features():
    b = behaviour(K=12, seed=5)
    c = NetController(Net.init(SPEC, 0))
    c.reset(1)
    rows = []
    for k in range(b.K):
        rows.append(c.input_vector(b.y[k:k + 1], b.r[k:k + 1])[0])
        c.ub = c._push(c.ub, b.u[k:k + 1])
    feats = features(SPEC, b.r, b.y, b.u, b.nu, 2, b.K)
    assert np.array_equal(np.array(rows[2:]), feats)


def test_two_adapters_are_pure():
    net = Net.init(SPEC, 2)
    a, b = NetController(net), NetController(net)
    a.reset(1)
    b.reset(1)
    rng = np.random.default_rng(0)
    for _ in range(10):
        y, r = rng.normal(size=(1, 1)), rng.normal(size=(1, 1))
        assert np.array_equal(a.step(y, r), b.step(y, r))
