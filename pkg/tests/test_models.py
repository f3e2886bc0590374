import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pomdp
from pomdpsynth.benchmarks import FAMILIES, GridConfig, benchmark, generate_benchmark
from pomdpsynth.modelfile import ModelSyntaxError, parse_model, serialize_model
from pomdpsynth.models import (
    ModelError, ModelValidationError, build_pomdp,
    fully_observable, same_structure, underlying_mdp, validate,
)
from pomdpsynth.modelfile import DanglingReferenceError

ROWS_SUM_09 = """pomdp t
states 3
actions a0
observations z0 z1
observe 0 -> z0
observe 1 -> z0
observe 2 -> z1
trans 0 a0 : 0.5->1, 0.4->2
trans 1 a0 : 1.0->1
trans 2 a0 : 1.0->2
init 0
"""


class TestParse:
    def test_tiny_corridor(self, tiny):
        assert tiny.num_states == 4
        assert tiny.num_observations == 2
        assert tiny.actions == ("left", "right")
        assert tiny.observation_names == ("z_corridor", "z_goal")
        assert tiny.observations.tolist() == [0, 0, 1, 1]
        assert validate(tiny) == []

    def test_two_state_self_loops(self):
        m = parse_model("pomdp two\nstates 2\nactions a\nobserve 0 -> z\nobserve 1 -> z\n"
                        "trans 0 a : 1->0\ntrans 1 a : 1->1\ninit 0\n")
        assert m.num_states == 2
        assert [len(m.enabled(s)) for s in range(2)] == [1, 1]

    def test_row_sum_reported(self):
        with pytest.raises(ModelValidationError, match="row sums to 0.9"):
            parse_model(ROWS_SUM_09)

    @pytest.mark.parametrize("old,new,err", [
        ("0.4->2", "0.5->7", DanglingReferenceError),
        ("trans 1 a0", "trans 1 a9", DanglingReferenceError),
        ("observe 2 -> z1", "observe 2 -> zz", DanglingReferenceError),
        ("init 0", "init 0 0", ModelSyntaxError),
        ("trans 1 a0 : 1.0->1", "trans 1 a0 : x->1", ModelSyntaxError),
    ])
    def test_errors(self, old, new, err):
        text = ROWS_SUM_09.replace("0.4->2", "0.5->2") if old != "0.4->2" else ROWS_SUM_09
        with pytest.raises(err):
            parse_model(text.replace(old, new))

    def test_unreferenced_observation_rejected(self):
        text = ROWS_SUM_09.replace("0.4->2", "0.5->2").replace("observations z0 z1", "observations z0 z1 z2")
        with pytest.raises(DanglingReferenceError, match="never observed"):
            parse_model(text)

    def test_syntax_error_has_position(self):
        with pytest.raises(ModelSyntaxError, match=r"line \d+, column \d+"):
            parse_model(ROWS_SUM_09.replace("trans 1 a0 : 1.0->1", "trans 1 a0 : 1.0=>1"))

    def test_errors_are_model_errors(self):
        assert issubclass(DanglingReferenceError, ModelError)
        assert issubclass(ModelSyntaxError, ModelError)


class TestValidate:
    def _rows(self):
        return {(0, 0): {1: 1.0}, (1, 0): {1: 1.0}}

    def test_tolerance_boundary(self):
        rows = self._rows()
        rows[(0, 0)] = {0: 0.5, 1: 0.5 + 1e-6}
        m = build_pomdp("t", 2, ["a"], rows, check=False)
        diags = validate(m)
        assert [d.kind for d in diags] == ["stochasticity"]
        rows[(0, 0)] = {0: 0.5, 1: 0.5 + 1e-12}
        assert validate(build_pomdp("t", 2, ["a"], rows, check=False)) == []

    def test_deadlock(self):
        m = build_pomdp("t", 2, ["a"], {(0, 0): {1: 1.0}}, check=False)
        diags = validate(m)
        assert [d.kind for d in diags] == ["deadlock"]
        assert diags[0].state == 1

    def test_build_raises(self):
        with pytest.raises(ModelValidationError):
            build_pomdp("t", 2, ["a"], {(0, 0): {1: 1.0}})


class TestUnderlying:
    def test_rows_identical(self, tiny):
        M = underlying_mdp(tiny)
        assert M.num_states == tiny.num_states
        assert (M.transitions != tiny.transitions).nnz == 0
        assert np.array_equal(M.row_actions, tiny.row_actions)
        assert not hasattr(M, "observations")

    def test_fully_observable_identity(self, tiny):
        M = underlying_mdp(tiny)
        full = fully_observable(M)
        assert full.num_observations == full.num_states
        assert same_structure(underlying_mdp(full), M)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.booleans())
def test_round_trip_random(seed, rewards):
    m = random_pomdp(np.random.default_rng(seed), n=7, rewards=rewards)
    again = parse_model(serialize_model(m))
    assert same_structure(m, again)
    assert np.array_equal(again.observations, m.observations)
    assert (again.transitions != m.transitions).nnz == 0
    assert np.array_equal(again.row_rewards, m.row_rewards)
    assert again.labels == m.labels


@pytest.mark.parametrize("family,size", [("maze", 2), ("navigation", 3), ("rocksample", 2), ("slippery", 4)])
def test_round_trip_benchmarks(family, size):
    m = benchmark(family, size)
    again = parse_model(serialize_model(m))
    assert same_structure(m, again)
    assert np.allclose(again.initial_vector(), m.initial_vector(), atol=0)


class TestBenchmarks:
    @pytest.mark.parametrize("c", range(1, 11))
    def test_maze_count(self, c):
        m = benchmark("maze", c)
        assert (m.num_states, m.num_actions, m.num_observations) == (3 * c + 8, 4, 7)

    @pytest.mark.parametrize("c", range(2, 11))
    def test_grid_count(self, c):
        m = benchmark("grid", c)
        assert (m.num_states, m.num_actions, m.num_observations) == (c * c, 4, 2)

    def test_rocksample(self):
        m = benchmark("rocksample", 4)
        assert (m.num_states, m.num_actions, m.num_observations) == (257, 9, 2)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_deterministic_and_stochastic(self, family):
        size = 4
        a = generate_benchmark(GridConfig(family, size))
        b = generate_benchmark(GridConfig(family, size))
        assert same_structure(a, b)
        assert validate(a) == []
        sums = np.asarray(a.transitions.sum(axis=1)).ravel()
        assert np.all(np.abs(sums - 1) <= 1e-9) and np.all(a.transitions.data >= 0)

    def test_grid_minimum_size(self):
        with pytest.raises(ModelError):
            benchmark("grid", 1)

    def test_obstacle_outside_grid(self):
        with pytest.raises(ModelError):
            GridConfig("navigation", 3, obstacles=((5, 5),))

    def test_navigation_alphabet(self):
        m = benchmark("navigation", 3)
        assert m.num_actions == 4
        assert m.num_observations <= 256
        assert set(m.labels) >= {"A", "X"}

    def test_generation_fast(self):
        t0 = time.perf_counter()
        for c in (1, 2, 3, 4, 5, 6, 10):
            benchmark("maze", c)
        benchmark("rocksample", 4)
        assert time.perf_counter() - t0 < 1.0
