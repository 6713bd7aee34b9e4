import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nncegis import stl
from nncegis.controllers import ConstantController, PidController, PidGains
from nncegis.coverage import SettingSpace
from nncegis.falsify import ClosedLoop, matching_test
from nncegis.loop import (LoopConfig, NominalTeacher, PremiseViolation, Problem, empirical_deviation,
                          extract_data, initial_train, prop2_bound, retrain_iteration, run_loop)
from nncegis.nn import Dataset, History, NetController, NetSpec
from nncegis.plant import make_plant, simulate_batch
from nncegis.stl import Pred, Var

TANK = make_plant("water_tank")
PID = PidController(PidGains(30, 20, 0, -20, 20, 0.1))
OVERSHOOT = stl.build_property("overshoot", dict(eps_r=0.01, T7=0.0, T8=5.0, eps_y=0.07, T_sim=10.0))
STAB = stl.build_property("stabilization", dict(eps_r=0.01, T1=0, T2=3.5, T3=0, T4=1.5, e=0.025, T_sim=10.0))
SPEC = NetSpec(((16, "tanh"),), History(0, 1, 1, 0), input_mode="error")
SPACE = SettingSpace.for_plant(TANK, 2, 10.0, x0_box=([10.0], [10.0]))


def problem(teacher_ctrl=PID, phi=OVERSHOOT):
    return Problem(TANK, NominalTeacher(TANK, teacher_ctrl, phi), phi, SPACE, SPEC)


def cfg(**kw):
    base = dict(eps=1.0, falsify_budget=30, confirm_budget=20, epochs_initial=2, epochs_retrain=2, seed=0)
    base.update(kw)
    return LoopConfig(**base)


def test_extract_data_counts_and_union():
    ss = SPACE.eps_net(1.0)[:2]
    bb = simulate_batch(TANK, PID, ss).behaviours()
    d = extract_data(Dataset.empty(SPEC), bb, SPEC, "nominal", 0)
    assert len(d) == 2 * (bb[0].K - 1) and sorted(set(d.setting_id)) == [0, 1]


def test_initial_training_on_the_tank_net():
    assert initial_train(problem(), cfg(eps=0.25)).reports[0].n_R == 64
    assert initial_train(problem(), cfg(eps=1.0)).reports[0].n_R == 4


def test_broken_teacher_is_a_premise_violation():
    with pytest.raises(PremiseViolation) as ei:
        initial_train(problem(ConstantController(0.0), STAB), cfg())
    assert ei.value.settings and all(r <= 0 for r in ei.value.robustness)


def test_max_iterations_must_be_positive():
    with pytest.raises(ValueError):
        LoopConfig(max_iterations=0)


def test_iteration_grows_the_dataset_with_teacher_replays():
    p = problem()
    state = initial_train(p, cfg())
    old_net = state.net
    old = state.dataset
    new, rep = retrain_iteration(state, p, cfg())
    assert rep.n_C > 0 and 0 < rep.n_C_hat <= rep.n_C
    d = new.dataset
    assert np.array_equal(d.X[:len(old)], old.X) and np.array_equal(d.T[:len(old)], old.T)
    assert d.n_behaviours == old.n_behaviours + rep.n_C_hat + rep.n_examples == rep.n_R
    chosen = d.settings[old.n_behaviours:old.n_behaviours + rep.n_C_hat]
    # every selected setting was a counterexample of the previous net ...
    sys = ClosedLoop(TANK, NetController(old_net))
    assert len(matching_test(sys, chosen, OVERSHOOT)) == len(chosen)
    # ... and its rows are the teacher's own commands
    teach = p.teacher.teach(chosen)
    for j, b in enumerate(teach):
        rows = d.T[d.setting_id == old.n_behaviours + j]
        assert np.array_equal(rows, b.u[1:])
    assert np.all(d.iteration[len(old):] == 1)


def test_trivial_property_terminates_at_first_iteration():
    top = stl.Always(stl.Interval(0, 10), Pred(Var("y"), ">", -1e9))
    res = run_loop(problem(phi=top), cfg())
    assert res.terminated and len(res.reports) == 2
    assert res.reports[1].n_C == 0 and res.reports[1].n_T == 30
    assert "no counterexample found within a budget of 30 trials" in res.summary()


def test_short_final_run_does_not_count_as_termination():
    top = stl.Always(stl.Interval(0, 10), Pred(Var("y"), ">", -1e9))
    res = run_loop(problem(phi=top), cfg(falsify_budget=10, confirm_budget=20, max_iterations=2))
    assert [r.n_T for r in res.reports[1:]] == [10, 20] and res.terminated


def test_exhausted_loop_is_not_reported_as_success():
    res = run_loop(problem(), cfg(max_iterations=1, epochs_initial=0, epochs_retrain=0))
    assert not res.terminated and "stopped after 1 iteration" in res.summary()


def test_callback_sees_every_state():
    seen = []
    run_loop(problem(), cfg(max_iterations=2), on_iteration=lambda s: seen.append(s.iteration))
    assert seen[0] == 0 and seen == list(range(len(seen)))


# --- deviation bound ----------------------------------------------------------------


def test_bound_examples():
    assert float(prop2_bound(0.1, 1.0, 1.0, 1.0)) == pytest.approx(0.171828, abs=1e-6)
    assert np.all(prop2_bound(0.0, 1.0, 1.0, np.linspace(0, 5, 11)) == 0)
    with pytest.raises(ValueError):
        prop2_bound(0.1, None, 1.0, 1.0)


def test_first_order_gap_has_closed_form():
    plant = make_plant("first_order")
    chk = empirical_deviation(plant, [0.0], np.zeros((20, 1)), np.full((20, 1), 0.1), 0.1, 0.1)
    assert chk.holds
    assert np.max(np.abs(chk.gap - 0.1 * (1 - np.exp(-chk.t)))) < 1e-9


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_random_bounded_perturbations_respect_the_bound(seed):
    rng = np.random.default_rng(seed)
    for name, x0 in (("first_order", rng.uniform(-1, 1, 1)), ("linear2d", rng.uniform(-1, 1, 2))):
        plant = make_plant(name)
        u = rng.uniform(-1, 1, size=(20, 1))
        du = rng.uniform(-0.1, 0.1, size=(20, 1))
        assert empirical_deviation(plant, x0, u, du, 0.1, 0.1).holds


def test_perturbation_larger_than_eps_rejected():
    with pytest.raises(ValueError):
        empirical_deviation(make_plant("first_order"), [0.0], np.zeros((2, 1)), np.full((2, 1), 0.2), 0.1, 0.1)
