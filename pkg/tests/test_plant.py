import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nncegis.controllers import ConstantController, PidController, PidGains
from nncegis.plant import (Behaviour, ControlSetting, SimulationDiverged, make_plant, num_samples, piece_index,
                           rk4_step, sample_pieces, shift_next, simulate_batch, simulate_closed_loop)

DECAY = make_plant("first_order")  # x' = -x + u
TANK = make_plant("water_tank")


def setting(x0, refs, T=10.0):
    return ControlSetting(np.atleast_1d(np.asarray(x0, dtype=float)), np.atleast_2d(refs), None, T)


# --- integration ---------------------------------------------------------------


def test_rk4_single_step_value():
    assert rk4_step(DECAY, np.array([1.0]), np.array([0.0]), None, 0.1)[0] == pytest.approx(0.9048375, abs=5e-9)


def test_rk4_leaves_equilibrium_unchanged():
    still = make_plant("linear2d")
    assert np.array_equal(rk4_step(still, np.zeros(2), np.zeros(1), None, 0.1), np.zeros(2))


def test_rk4_exact_for_constant_derivative():

    integrator = replace(DECAY, dynamics=lambda x, u, nu: np.broadcast_to(u, x.shape).copy())
    assert rk4_step(integrator, np.array([3.0]), np.array([2.0]), None, 0.5)[0] == 4.0


def test_rk4_fourth_order_convergence():
    errs = []
    for n in (5, 10, 20):
        x = np.array([1.0])
        for _ in range(n):
            x = rk4_step(DECAY, x, np.array([0.0]), None, 1.0 / n)
        errs.append(abs(x[0] - math.exp(-1.0)))
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 3.5


def test_rk4_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        rk4_step(DECAY, np.array([1.0]), np.array([0.0]), None, 0.0)


# --- sampling helpers ---------------------------------------------------------


def test_num_samples():
    assert num_samples(10.0, 0.1) == 101
    with pytest.raises(ValueError):
        num_samples(10.0, 0.3)


def test_piece_index_and_sampling():
    assert piece_index(101, 2)[49] == 0 and piece_index(101, 2)[50] == 1 and piece_index(101, 2)[100] == 1
    r = sample_pieces(np.array([[8.25, 11.75]]), 101)
    assert r.shape == (101, 1) and r[0, 0] == 8.25 and r[-1, 0] == 11.75


def test_shift_next_repeats_last():
    r = np.arange(4.0).reshape(4, 1)
    assert shift_next(r)[:, 0].tolist() == [1.0, 2.0, 3.0, 3.0]


# --- closed loop ----------------------------------------------------------------


def test_zero_control_matches_analytic_decay():
    b = simulate_closed_loop(DECAY, ConstantController(0.0), setting(1.0, [[0.0]]), h=0.1)
    k = np.arange(b.K)
    assert np.max(np.abs(b.x[:, 0] - np.exp(-0.1 * k))) < 1e-6


def test_constant_input_approaches_target_monotonically():
    b = simulate_closed_loop(DECAY, ConstantController(3.0), setting(0.0, [[3.0]]), h=0.1)
    assert np.all(np.diff(b.x[:, 0]) > 0) and b.x[-1, 0] < 3.0 and b.x[-1, 0] > 2.99


def test_tank_dynamics_values():
    assert TANK.dynamics(np.array([[4.0]]), np.array([[1.0]]), np.zeros((1, 0)))[0, 0] == pytest.approx(0.05)
    assert TANK.dynamics(np.array([[0.0]]), np.array([[0.0]]), np.zeros((1, 0)))[0, 0] == 0.0
    assert TANK.ref_range[0][0] == 8 and TANK.ref_range[1][0] == 12


def test_linear2d_equilibrium_output_and_range():
    lin = make_plant("linear2d")
    assert np.array_equal(lin.dynamics(np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 0))), np.zeros((1, 2)))
    assert lin.output(np.array([[0.7, -0.2]]))[0, 0] == 0.7
    assert lin.ref_range[0][0] == 0 and lin.ref_range[1][0] == 1


def test_linear2d_decays_without_input():
    lin = make_plant("linear2d").with_x0_box([-1, -1], [1, 1])
    s = ControlSetting(np.array([0.8, -0.5]), np.array([[0.0]]), None, 6.0)
    b = simulate_closed_loop(lin, ConstantController(0.0), s)
    assert np.linalg.norm(b.x[-1]) < np.linalg.norm(b.x[0])


@given(st.floats(0.0, 13.0), st.floats(0.0, 2.0))
@settings(max_examples=30, deadline=None)
def test_tank_level_stays_nonnegative(x0, u):
    tank = TANK.with_x0_box([0.0], [13.0])
    b = simulate_closed_loop(tank, ConstantController(u), setting(x0, [[10.0]], T=20.0))
    assert np.all(b.x >= 0)


def test_batch_equals_individual_runs():
    gains = PidGains(30, 20, 0, -20, 20, 0.1)
    ss = [setting(10.0, [[9.0, 11.5]]), setting(6.0, [[12.0, 8.0]]), setting(13.0, [[8.5, 8.5]])]
    bb = simulate_batch(TANK, PidController(gains), ss)
    for i, s in enumerate(ss):
        one = simulate_closed_loop(TANK, PidController(gains), s)
        assert np.array_equal(bb.behaviour(i).x, one.x) and np.array_equal(bb.behaviour(i).u, one.u)


def test_invalid_setting_rejected():
    with pytest.raises(ValueError):
        simulate_closed_loop(TANK, ConstantController(0.0), setting(10.0, [[20.0]]))
    with pytest.raises(ValueError):
        setting(10.0, np.zeros((1, 0)))


class Exploding:
    def reset(self, B):
        pass

    def step(self, y, r, nu=None):
        return 1e300 * np.ones_like(y)

    def snapshot(self):
        return None

    def restore(self, s):
        pass


def test_divergence_raises_or_marks():
    s = setting(0.0, [[0.0]])
    with pytest.raises(SimulationDiverged):
        simulate_closed_loop(DECAY, Exploding(), s)
    bb = simulate_batch(DECAY, Exploding(), [s], on_diverge="mark")
    assert bb.diverged[0]


def test_behaviour_csv_round_trip(tmp_path):
    b = simulate_closed_loop(TANK, PidController(PidGains(30, 20, 0, -20, 20, 0.1)), setting(9.0, [[8.5, 11.0]]))
    b.to_csv(tmp_path / "b.csv")
    c = Behaviour.from_csv(tmp_path / "b.csv")
    for name in ("r", "x", "u", "y"):
        assert np.array_equal(getattr(b, name), getattr(c, name))
    assert np.array_equal(c.setting.ref_points, b.setting.ref_points)
