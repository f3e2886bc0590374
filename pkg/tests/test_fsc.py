import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pomdp
from pomdpsynth.benchmarks import benchmark
from pomdpsynth.checker import ObservationStrategy, check
from pomdpsynth.fsc import (
    Fsc, FscError, MemoryUpdate, fsc_as_product, load_fsc, load_strategy, memory_update, product,
    project_fsc, save_fsc, save_strategy,
)
from pomdpsynth.models import same_structure, validate
from pomdpsynth.spec import parse_spec

PHI = parse_spec("Pmax [ true U goal ]")


def random_table(rng, m, rows):
    mask = m.enabled_mask()
    t = rng.random((rows, m.num_actions)) * (rng.random((rows, m.num_actions)) < 0.8)
    for i in range(rows):
        t[i] *= mask[m.observations == i].all(axis=0) if rows == m.num_observations else 1
        if t[i].sum() == 0:
            t[i, np.argmax(mask[m.observations == i].all(axis=0)) if rows == m.num_observations else 0] = 1
    return t / t.sum(axis=1, keepdims=True)


class TestMemoryUpdate:
    def test_single_node_constant(self, tiny):
        for kind in ("observation-repeat",):
            u = memory_update(kind, 1, tiny)
            for n, z, a, z2 in itertools.product([0], range(2), range(2), range(2)):
                assert u(n, z, a, z2) == 0

    def test_repeat_enumeration(self):
        m = random_pomdp(np.random.default_rng(0), n=6, num_obs=3)
        u = memory_update("observation-repeat", 2, m)
        for n, z, a, z2 in itertools.product(range(2), range(3), range(m.num_actions), range(3)):
            expect = min(n + 1, 1) if z2 == z else n
            assert u(n, z, a, z2) == expect

    def test_spec_driven_delivery(self):
        m = benchmark("delivery", 3)
        u = memory_update("spec-driven", 2, m, label="A")
        marked = m.label_mask("A")
        for z in range(m.num_observations):
            inside = marked[m.observations == z].all()
            assert np.all(u.table[0, z] == (1 if inside else 0))
            assert np.all(u.table[1, z] == 1)
        assert (u.table[0] == 1).any()

    def test_errors(self, tiny):
        with pytest.raises(FscError):
            memory_update("bogus", 2, tiny)
        with pytest.raises(FscError):
            memory_update("observation-repeat", 0, tiny)
        with pytest.raises(FscError):
            MemoryUpdate("explicit-table", 2, np.full((2, 2, 2), 2))


class TestProduct:
    def test_tiny_hand_expansion(self, tiny):
        prod = product(tiny, memory_update("observation-repeat", 2, tiny))
        assert prod.num_states == 8 and prod.num_observations == 4
        # (state, node) -> index s*2+n ; names s0 s1 goal bad = 0 1 2 3
        expected = {
            # s0: right -> s1 (same observation, advance), left -> bad (new observation, stay)
            (0, 0, "right"): {2 * 1 + 1: 1.0}, (0, 0, "left"): {2 * 3 + 0: 1.0},
            (0, 1, "right"): {2 * 1 + 1: 1.0}, (0, 1, "left"): {2 * 3 + 1: 1.0},
            (1, 0, "right"): {2 * 2 + 0: 1.0}, (1, 0, "left"): {2 * 0 + 1: 1.0},
            (1, 1, "right"): {2 * 2 + 1: 1.0}, (1, 1, "left"): {2 * 0 + 1: 1.0},
            (2, 0, "left"): {2 * 2 + 1: 1.0}, (2, 1, "right"): {2 * 2 + 1: 1.0},
            (3, 0, "left"): {2 * 3 + 1: 1.0}, (3, 1, "left"): {2 * 3 + 1: 1.0},
        }
        for (s, n, a), row in expected.items():
            succ, probs = prod.row(s * 2 + n, tiny.actions.index(a))
            assert dict(zip(succ.tolist(), probs.tolist())) == row
        assert prod.observations.tolist() == [0, 1, 0, 1, 2, 3, 2, 3]
        assert prod.initial_vector().tolist() == [1, 0, 0, 0, 0, 0, 0, 0]
        assert prod.label_mask("goal").tolist() == [False] * 4 + [True, True] + [False] * 2
        assert validate(prod) == []

    def test_identity_for_k1(self, tiny):
        prod = product(tiny, memory_update("observation-repeat", 1, tiny))
        assert same_structure(prod, tiny)
        assert np.array_equal(prod.observations, tiny.observations)

    @pytest.mark.parametrize("k", [2, 3])
    def test_navigation_factor(self, k):
        m = benchmark("navigation", 4)
        prod = product(m, memory_update("observation-repeat", k, m))
        assert prod.num_states == k * m.num_states
        assert prod.num_choices == k * m.num_choices
        assert prod.num_observations == k * m.num_observations

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(1, 4))
    def test_product_stochastic_and_rewards(self, seed, k):
        m = random_pomdp(np.random.default_rng(seed), n=6, rewards=True)
        prod = product(m, memory_update("observation-repeat", k, m))
        assert prod.num_states == 6 * k
        assert validate(prod) == []
        for s, n in itertools.product(range(6), range(k)):
            for a in m.enabled(s):
                r0 = m.row_rewards[m.row_index(s, a)]
                assert prod.row_rewards[prod.row_index(s * k + n, a)] == r0
                succ, probs = prod.row(s * k + n, a)
                base_succ, base_probs = m.row(s, a)
                # marginal over nodes reproduces the flat row
                marg = np.zeros(6)
                np.add.at(marg, succ // k, probs)
                flat = np.zeros(6)
                flat[base_succ] = base_probs
                assert np.allclose(marg, flat, atol=1e-15)


class TestProjection:
    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_value_preservation_tiny(self, tiny, k):
        u = memory_update("observation-repeat", k, tiny)
        prod = product(tiny, u)
        rng = np.random.default_rng(k)
        for _ in range(20):
            sigma = ObservationStrategy(random_table(rng, prod, prod.num_observations), memory=k)
            a = check(tiny, project_fsc(sigma, u), PHI).value
            b = check(prod, sigma, PHI).value
            assert abs(a - b) <= 1e-12

    def test_k1_verbatim(self, tiny):
        sigma = ObservationStrategy(np.array([[0.25, 0.75], [1.0, 0.0]]))
        f = project_fsc(sigma, memory_update("observation-repeat", 1, tiny))
        assert np.array_equal(f.gamma[0], sigma.table)

    def test_deterministic_stays_deterministic(self, tiny):
        u = memory_update("observation-repeat", 2, tiny)
        t = np.zeros((4, 2))
        t[[0, 1, 2, 3], [1, 0, 1, 1]] = 1
        f = project_fsc(ObservationStrategy(t, memory=2), u)
        assert set(np.unique(f.gamma)) <= {0.0, 1.0}
        assert np.array_equal(f.product_strategy().table, t)

    def test_missing_entries(self, tiny):
        u = memory_update("observation-repeat", 2, tiny)
        with pytest.raises(Exception):
            project_fsc(ObservationStrategy(np.full((2, 2), 0.5)), u)

    def test_gamma_must_be_distribution(self, tiny):
        u = memory_update("observation-repeat", 2, tiny)
        with pytest.raises(FscError):
            Fsc(np.full((2, 2, 2), 0.4), u)


class TestFiles:
    def test_strategy_round_trip(self, tiny, tmp_path):
        sigma = ObservationStrategy(np.array([[1 / 3, 2 / 3], [0.1, 0.9]]))
        save_strategy(sigma, tiny, tmp_path / "s.strat")
        text = (tmp_path / "s.strat").read_text()
        assert text.startswith("# strategy format v1")
        assert "z_corridor : left=0.3333333333333333 right=0.6666666666666666" in text
        again = load_strategy(tmp_path / "s.strat", tiny)
        assert np.array_equal(again.table, sigma.table)

    def test_product_strategy_round_trip(self, tiny, tmp_path):
        u = memory_update("observation-repeat", 2, tiny)
        prod = product(tiny, u)
        sigma = ObservationStrategy(random_table(np.random.default_rng(3), prod, 4), memory=2)
        save_strategy(sigma, tiny, tmp_path / "p.strat")
        again = load_strategy(tmp_path / "p.strat", tiny)
        assert again.memory == 2 and np.array_equal(again.table, sigma.table)

    def test_fsc_round_trip(self, tiny, tmp_path):
        u = memory_update("observation-repeat", 2, tiny)
        f = project_fsc(ObservationStrategy(random_table(np.random.default_rng(4), product(tiny, u), 4),
                                            memory=2), u)
        save_fsc(f, tiny, tmp_path / "c.fsc")
        g = load_fsc(tmp_path / "c.fsc", tiny)
        assert np.array_equal(g.gamma, f.gamma)
        assert np.array_equal(g.update.table, u.table) and g.update.repeat
        assert check(tiny, g, PHI).value == check(tiny, f, PHI).value

    def test_incomplete_strategy_file(self, tiny, tmp_path):
        (tmp_path / "bad.strat").write_text("strategy memory=1\nz_corridor : right=1.0\n")
        with pytest.raises(FscError, match="misses"):
            load_strategy(tmp_path / "bad.strat", tiny)

    def test_unknown_observation(self, tiny, tmp_path):
        (tmp_path / "bad.strat").write_text("strategy memory=1\nnope : right=1.0\n")
        with pytest.raises(FscError, match="unknown observation"):
            load_strategy(tmp_path / "bad.strat", tiny)


def test_fsc_as_product(tiny):
    u = memory_update("observation-repeat", 2, tiny)
    t = np.array([[0.0, 1.0], [0.0, 1.0], [0.5, 0.5], [0.5, 0.5]])
    prod, sigma = fsc_as_product(tiny, project_fsc(ObservationStrategy(t, memory=2), u))
    assert prod.num_states == 8 and np.array_equal(sigma.table, t)
    assert check(prod, sigma, PHI).value == 1.0
