import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nncegis import stl
from nncegis.pstl import (DECREASING, INCREASING, EvaluationError, PolarityError, PstlFormula, PstlParam,
                          TraceEvaluator, build_phi_template, check_monotonicity, classify_valuations,
                          instantiate, occurrences, orient, policy_similarity, volume_underapprox)
from nncegis.stl import Always, Interval, Norm, Param, Pred, Var

# band with a parametric width and duration: "a" widens the band, "b" lengthens the obligation
BAND = PstlFormula(Always(Interval(0.0, Param("b")), Pred(Norm(Var("y")), "<", Param("a"))),
                   (PstlParam("a", INCREASING, 0.0, 1.0), PstlParam("b", DECREASING, 0.0, 1.0)))


# --- instantiation ------------------------------------------------------------------


def test_substitution_example():
    p = PstlFormula(Always(Interval(0.0, Param("tau")), Pred(stl.Abs(Var("y")), "<", Param("s"))),
                    (PstlParam("tau", DECREASING, 0.0, 5.0), PstlParam("s", INCREASING, 0.0, 20.0)))
    f = instantiate(p, {"tau": 2.0, "s": 10.0})
    assert f == Always(Interval(0.0, 2.0), Pred(stl.Abs(Var("y")), "<", 10.0))
    mid = instantiate(p, {"tau": 2.5, "s": 10.0})
    assert mid.interval.hi == 2.5


def test_missing_and_out_of_range_parameters():
    with pytest.raises(ValueError, match="unbound parameter a"):
        instantiate(BAND, {"b": 0.5})
    with pytest.raises(ValueError):
        instantiate(BAND, {"a": 2.0, "b": 0.5})


def test_polarity_is_checked_syntactically():
    with pytest.raises(PolarityError):
        PstlFormula(BAND.template, (PstlParam("a", DECREASING, 0, 1), PstlParam("b", DECREASING, 0, 1)))
    with pytest.raises(ValueError):
        PstlFormula(BAND.template, (PstlParam("a", INCREASING, 0, 1),))
    with pytest.raises(PolarityError):
        occurrences(Pred(Var("y"), "==", Param("c")))


# --- volumes ------------------------------------------------------------------------


UNIT2 = (np.zeros(2), np.ones(2), [INCREASING, INCREASING])


def test_volume_examples():
    assert volume_underapprox([[0.5, 0.5]], *UNIT2) == 0.25
    assert volume_underapprox([[0.5, 0.8], [0.8, 0.5]], *UNIT2) == pytest.approx(0.55, abs=1e-15)
    assert volume_underapprox(np.zeros((0, 2)), *UNIT2) == 0.0


def test_volume_respects_decreasing_axes():
    assert volume_underapprox([[0.5, 0.2]], np.zeros(2), np.ones(2), [INCREASING, DECREASING]) == pytest.approx(0.4)


def test_point_outside_box_rejected():
    with pytest.raises(ValueError):
        volume_underapprox([[1.5, 0.5]], *UNIT2)


def _grid_bounds(P, d, n):
    """Inner and outer measures of the dominated region on an ``n^d`` grid of cells."""
    g = (np.arange(n) / n)
    mesh = np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)
    lo_hit = np.zeros(len(mesh), dtype=bool)
    hi_hit = np.zeros(len(mesh), dtype=bool)
    for p in P:
        lo_hit |= np.all(mesh < p, axis=1)
        hi_hit |= np.all(mesh + 1 / n <= p + 1e-12, axis=1)
    return hi_hit.mean(), lo_hit.mean()


@given(st.integers(0, 10_000), st.sampled_from([2, 3]))
@settings(max_examples=30, deadline=None)
def test_volume_is_bracketed_by_fine_grid(seed, d):
    rng = np.random.default_rng(seed)
    P = rng.random((int(rng.integers(1, 8)), d))
    vol = volume_underapprox(P, np.zeros(d), np.ones(d), [INCREASING] * d)
    inner, outer = _grid_bounds(P, d, 200 if d == 2 else 60)
    assert inner - 1e-12 <= vol <= outer + 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_adding_a_point_never_shrinks_volume(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    P = rng.random((int(rng.integers(0, 10)), d))
    q = rng.random((1, d))
    box = (np.zeros(d), np.ones(d), [INCREASING] * d)
    base = volume_underapprox(P, *box)
    more = volume_underapprox(np.vstack([P, q]), *box)
    assert base <= more <= 1.0


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_volume_matches_inclusion_exclusion(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    P = rng.random((int(rng.integers(1, 6)), d))
    want = 0.0
    for r in range(1, len(P) + 1):
        for sub in itertools.combinations(range(len(P)), r):
            want += (-1) ** (r + 1) * float(np.prod(P[list(sub)].min(axis=0)))
    assert volume_underapprox(P, np.zeros(d), np.ones(d), [INCREASING] * d) == pytest.approx(want, abs=1e-12)


def test_similarity_examples():
    assert policy_similarity(0.4, 0.2) == 0.5
    assert policy_similarity(0.4, 0.4) == 1.0
    with pytest.raises(ZeroDivisionError):
        policy_similarity(0.0, 0.1)


# --- template -----------------------------------------------------------------------


def test_template_has_four_parameters():
    p = build_phi_template()
    assert p.names == ["s_ov", "s_st", "tau_tr", "tau_st"]
    assert p.polarities == [INCREASING, INCREASING, INCREASING, DECREASING]


@given(st.floats(0.0, 20.0), st.floats(0.0, 20.0), st.floats(0.1, 10.0), st.floats(0.1, 10.0))
@settings(max_examples=30, deadline=None)
def test_zero_output_robustness_is_min_threshold(s_ov, s_st, tau_tr, tau_st):
    f = instantiate(build_phi_template(), dict(s_ov=s_ov, s_st=s_st, tau_tr=tau_tr, tau_st=tau_st))
    rho = stl.robustness_signal(f, {"y": np.zeros((101, 1))}, 0.1)[0]
    assert rho == min(s_ov, s_st)


def test_overshoot_violates_template():
    y = np.concatenate([np.linspace(0, 3, 20), np.full(81, 0.1)])[:, None]
    f = instantiate(build_phi_template(), dict(s_ov=2.0, s_st=0.5, tau_tr=5.0, tau_st=1.0))
    assert stl.robustness_signal(f, {"y": y}, 0.1)[0] < 0


def test_monotonicity_check_passes_and_detects_misdeclaration():
    rng = np.random.default_rng(0)
    envs = [{"y": rng.normal(size=(101, 1))} for _ in range(3)]
    p = build_phi_template(s_ov=(0, 4), s_st=(0, 4), tau_tr=(0.1, 5), tau_st=(0.1, 5))
    check_monotonicity(p, envs, 0.1, n_pairs=30)
    flipped = PstlFormula.__new__(PstlFormula)
    object.__setattr__(flipped, "template", BAND.template)
    object.__setattr__(flipped, "params", (PstlParam("a", DECREASING, 0, 1), PstlParam("b", DECREASING, 0, 1)))
    with pytest.raises(PolarityError):
        check_monotonicity(flipped, [{"y": np.full((11, 1), 0.5)}], 0.1, n_pairs=50)


# --- classification -----------------------------------------------------------------


def test_constant_evaluators():
    valid = classify_valuations(lambda v: 1.0, BAND, [5, 5])
    assert not valid.false_mask.any() and valid.volume_lower_bound == 0.0
    false = classify_valuations(lambda v: -1.0, BAND, [5, 5])
    assert false.false_mask.all() and false.volume_lower_bound == false.box_volume


def test_staircase_oracle_matches_half_space():
    # Valid iff a > b: monotone for a increasing and b decreasing; the exact False area is 1/2
    est = classify_valuations(lambda v: v["a"] - v["b"], BAND, [21, 21])
    pts = est.points
    assert np.array_equal(est.false_mask, pts[:, 0] <= pts[:, 1])
    assert 0.5 - 2 / 20 <= est.volume_lower_bound <= 0.5


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_no_valid_point_is_dominated_by_a_false_point(seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.2, 2.0, size=2)
    noise = {}

    def oracle(v):
        key = (v["a"], v["b"])
        noise.setdefault(key, rng.normal(scale=0.05))
        return w[0] * v["a"] - w[1] * v["b"] + noise[key]

    est = classify_valuations(oracle, BAND, [8, 8])
    Q = orient(est.points, est.lo, est.hi, est.polarities)
    for f in Q[est.false_mask]:
        assert not np.any(np.all(Q[~est.false_mask] <= f, axis=1))


def test_evaluator_failure_carries_valuation():
    def bad(v):
        raise RuntimeError("boom")

    with pytest.raises(EvaluationError) as ei:
        classify_valuations(bad, BAND, [2, 2])
    assert ei.value.valuation == {"a": 0.0, "b": 0.0}


def test_trace_evaluator_on_identical_controllers_gives_unit_similarity():
    p = build_phi_template(s_ov=(0, 4), s_st=(0, 4), tau_tr=(0.1, 5), tau_st=(0.1, 5))
    t = np.linspace(0, 10, 101)
    env = {"y": (2.0 * np.exp(-t) * np.cos(3 * t))[None, :, None]}
    a = classify_valuations(TraceEvaluator(p, env, 0.1), p, [4, 4, 4, 4])
    b = classify_valuations(TraceEvaluator(p, env, 0.1), p, [4, 4, 4, 4])
    assert a.volume_lower_bound > 0 and policy_similarity(a.volume_lower_bound, b.volume_lower_bound) == 1.0
    assert math.isclose(a.volume_lower_bound, b.volume_lower_bound)


def test_estimate_csv(tmp_path):
    est = classify_valuations(lambda v: v["a"] - v["b"], BAND, [3, 3])
    est.to_csv(tmp_path / "e.csv")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "a,b,class,min_robustness" and len(rows) == 10
