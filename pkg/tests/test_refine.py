import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pomdp
from pomdpsynth.checker import ObservationStrategy, StateStrategy, check, mdp_optimal
from pomdpsynth.learner import TrainConfig
from pomdpsynth.models import build_pomdp
from pomdpsynth.refine import (
    SynthesisConfig, badness, class_backups, criticality_threshold, critical_decisions,
    critical_states, goodness, improve_lp, local_improvement, prune_strategy, resample_from_critical,
    solve_maxmin,
    synthesize,
)
from pomdpsynth.spec import parse_spec

PHI = parse_spec("Pmax [ true U goal ]")


# --- orientation and criticality ---------------------------------------------

@pytest.mark.parametrize("text,values,expected", [
    ("Pmax [ F a ]", [0.2, 1.0], [0.8, 0.0]),
    ("P>=0.5 [ F a ]", [0.2, 1.0], [0.8, 0.0]),
    ("P<=0.5 [ F a ]", [0.2, 1.0], [0.2, 1.0]),
    ("Emin [ F a ]", [3.0, 7.0], [3.0, 7.0]),
    ("Emax [ F a ]", [3.0, 7.0], [-3.0, -7.0]),
])
def test_badness(text, values, expected):
    spec = parse_spec(text)
    assert badness(np.array(values), spec).tolist() == expected
    assert goodness(np.array(values), spec).tolist() == [-e for e in expected]


def test_critical_states_trivial():
    bad = np.array([0.0, 0.3, 1.0])
    assert critical_states(bad, 1.0).size == 0
    assert critical_states(bad, 0.0).tolist() == [1, 2]
    assert critical_states(bad, np.array([0.5, 0.2, 1.0])).tolist() == [1]


def test_threshold_mode():
    spec = parse_spec("P>=0.9 [ F a ]")
    lam = criticality_threshold(spec)
    assert lam == pytest.approx(0.1)
    # satisfied strict spec where every state meets the bound -> no critical states
    values = np.array([0.95, 1.0, 0.91])
    assert critical_states(badness(values, spec), lam).size == 0


def test_mdp_relative_mode():
    spec = parse_spec("Pmax [ F a ]")
    lam = criticality_threshold(spec, np.array([1.0, 0.5]), ratio=0.9)
    assert np.allclose(lam, [0.1, 0.55])
    cost = parse_spec("Emin [ F a ]")
    assert np.allclose(criticality_threshold(cost, np.array([9.0]), ratio=0.9), [10.0])
    with pytest.raises(ValueError):
        criticality_threshold(PHI, mode="threshold")


# --- critical decisions --------------------------------------------------------

def test_tiny_left_flagged(tiny):
    sigma = ObservationStrategy.uniform(tiny)
    cex = critical_decisions(tiny, sigma, np.array([3]))
    # left from s0 falls into bad; bad's own self-loops re-enter it
    assert cex.decisions == {(0, 0): (0, 3), (1, 0): (3, 3), (1, 1): (3, 3)}
    assert cex.classes == [1, 0]
    sigma = ObservationStrategy(np.array([[0.5, 0.5], [0.0, 1.0]]))
    tail = critical_decisions(tiny, sigma, np.array([0, 3]))
    assert tail.decisions[(0, 0)] in {(0, 3), (1, 0)}


def test_no_critical_states(tiny):
    assert critical_decisions(tiny, ObservationStrategy.uniform(tiny), np.array([], int)).decisions == {}


def test_deterministic_into_absorbing():
    rows = {(0, 0): {1: 1.0}, (0, 1): {2: 1.0}, (1, 0): {1: 1.0}, (1, 1): {1: 1.0},
            (2, 0): {2: 1.0}, (2, 1): {2: 1.0}}
    m = build_pomdp("t", 3, ["a", "b"], rows, observations=[0, 1, 2])
    sigma = ObservationStrategy(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    cex = critical_decisions(m, sigma, np.array([1]))
    assert cex.decisions == {(0, 0): (0, 1), (1, 0): (1, 1)}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_counterexample_soundness_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = random_pomdp(rng, n=10, num_obs=4)
    t = rng.random((4, m.num_actions)) * (rng.random((4, m.num_actions)) < 0.6)
    mask = m.enabled_mask()
    for z in range(4):
        t[z] *= mask[m.observations == z].all(axis=0)
        if t[z].sum() == 0:
            t[z, np.argmax(mask[m.observations == z].all(axis=0))] = 1.0
    sigma = ObservationStrategy(t / t.sum(axis=1, keepdims=True))
    crit = np.nonzero(rng.random(10) < 0.3)[0]
    cex = critical_decisions(m, sigma, crit)
    expected = set()
    for s in range(10):
        z = m.observations[s]
        for a in m.enabled(s):
            succ, probs = m.row(s, a)
            if sigma.table[z, a] > 0 and np.any(np.isin(succ[probs > 0], crit)):
                expected.add((int(z), int(a)))
    assert set(cex.decisions) == expected
    for (z, a), (s, s2) in cex.decisions.items():
        succ, probs = m.row(s, a)
        assert m.observations[s] == z and s2 in crit and probs[list(succ).index(s2)] > 0


# --- max-min LP --------------------------------------------------------------

def test_matrix_game():
    B = np.array([[0.9, 0.1], [0.1, 0.9]])
    d, val, kept = solve_maxmin(B, np.array([1.0, 0.0]))
    assert np.allclose(d, [0.5, 0.5], atol=1e-9) and val == pytest.approx(0.5, abs=1e-9) and not kept


def test_single_state_point_mass():
    d, val, _ = solve_maxmin(np.array([[0.2, 0.7, 0.4]]), np.full(3, 1 / 3))
    assert np.allclose(d, [0, 1, 0], atol=1e-9) and val == pytest.approx(0.7)


def test_dominance():
    B = np.array([[0.5, 0.6, 0.1], [0.2, 0.3, 0.25], [0.0, 0.9, 0.8]])
    d, _, _ = solve_maxmin(B, np.full(3, 1 / 3))
    assert np.allclose(d, [0, 1, 0], atol=1e-9)


def test_improve_lp_tiny(tiny):
    sigma = ObservationStrategy.uniform(tiny)
    values = check(tiny, sigma, PHI).values
    lp = improve_lp(tiny, sigma, goodness(values, PHI), 0, PHI)
    # backups: s0 -> (left 0, right v1), s1 -> (left v0, right 1)
    assert lp.distribution.tolist() == pytest.approx([0.0, 1.0], abs=1e-9)
    assert lp.value >= lp.incumbent_value
    assert lp.support == 1


def test_prune():
    sigma = ObservationStrategy(np.array([[0.0005, 0.9995], [0.5, 0.5]]))
    assert prune_strategy(sigma, 1e-3).table.tolist() == [[0.0, 1.0], [0.5, 0.5]]
    assert prune_strategy(ObservationStrategy(np.array([[0.5, 0.5]])), 1e-3) is None


def test_class_backups_with_rewards():
    rows = {(0, 0): {1: 1.0}, (0, 1): {0: 0.5, 1: 0.5}, (1, 0): {1: 1.0}, (1, 1): {1: 1.0}}
    m = build_pomdp("r", 2, ["a", "b"], rows, observations=[0, 1], rewards={(0, 0): 2.0, (0, 1): 1.0})
    v = np.array([-4.0, 0.0])
    B = class_backups(m, v, 0, np.array([0, 1]), include_rewards=True, reward_sign=-1.0)
    assert B.tolist() == [[-2.0, -3.0]]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 6), st.integers(1, 5))
def test_lp_soundness(seed, nS, nA):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(nS, nA))
    inc = rng.dirichlet(np.ones(nA))
    d, val, _ = solve_maxmin(B, inc)
    assert np.all(d >= 0) and abs(d.sum() - 1) <= 1e-12
    assert (B @ d).min() >= (B @ inc).min() - 1e-9
    assert val == pytest.approx((B @ d).min())


# --- resampling ---------------------------------------------------------------

def test_resample_absorbing(tiny):
    ds = resample_from_critical(tiny, ObservationStrategy.uniform(tiny), np.array([3]), 50, 10, seed=0)
    assert all(len(a) == 0 and len(z) == 1 for z, a in zip(ds.observations, ds.actions))


def test_resample_deterministic(tiny):
    a = resample_from_critical(tiny, ObservationStrategy.uniform(tiny), np.array([0, 1]), 100, 5, seed=4)
    b = resample_from_critical(tiny, ObservationStrategy.uniform(tiny), np.array([0, 1]), 100, 5, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.actions, b.actions))


def test_resample_follows_lp(tiny):
    lp_row = np.array([0.25, 0.75])
    base = StateStrategy(np.full((4, 2), 0.5))
    sampler = local_improvement(tiny, base, {0: lp_row})
    assert np.array_equal(sampler.table[0], lp_row) and np.array_equal(sampler.table[2], [0.5, 0.5])
    ds = resample_from_critical(tiny, sampler, np.array([0, 1]), 10_000, 1, seed=1)
    freq = np.bincount([a[0] for a in ds.actions], minlength=2) / 10_000
    assert np.abs(freq - lp_row).max() <= 0.02


# --- the loop ----------------------------------------------------------------

FAST = TrainConfig(hidden=8, epochs=30, learning_rate=1e-2)


def test_tiny_solved_first_iteration(tiny):
    res = synthesize(tiny, PHI, SynthesisConfig(train=FAST, sample_count=300, max_len=6))
    assert len(res.log) == 1 and res.value == 1.0 and res.best_iteration == 1
    assert res.mdp_value == 1.0


def test_threshold_early_stop(tiny):
    res = synthesize(tiny, parse_spec("P>=0.99 [ F goal ]"),
                     SynthesisConfig(train=FAST, sample_count=300, max_len=6))
    assert res.satisfied is True and len(res.log) == 1


def test_exact_iterations_and_log_reverification():
    m = random_pomdp(np.random.default_rng(11), n=9, num_obs=3)
    spec = parse_spec("Pmax [ !bad U goal ]")
    cfg = SynthesisConfig(max_iterations=10, early_stop=False, train=TrainConfig(hidden=4, epochs=2),
                          retrain_epochs=1, sample_count=60, resample_count=30, max_len=5, seed=2)
    res = synthesize(m, spec, cfg)
    assert [r.iteration for r in res.log] == list(range(1, 11))
    for r in res.log:
        assert abs(check(res.product_model, r.strategy, res.spec).value - r.value) <= 1e-12
        assert r.value <= res.mdp_value + 1e-12
    assert res.value == max(r.value for r in res.log)
    rows = list(res.csv_rows())
    assert rows[0] == ("iter", "value", "critical_states", "critical_decisions", "train_loss", "seconds")
    assert len(rows) == 11


def test_cost_best_is_minimum():
    m = random_pomdp(np.random.default_rng(5), n=8, num_obs=3, rewards=True)
    spec = parse_spec("Emin [ F goal ]")
    cfg = SynthesisConfig(max_iterations=3, early_stop=False, train=TrainConfig(hidden=4, epochs=2),
                          sample_count=50, resample_count=20, max_len=5)
    res = synthesize(m, spec, cfg)
    assert res.value == min(r.value for r in res.log)
    assert res.value >= res.mdp_value - 1e-9


def test_fsc_result_projected(tiny):
    cfg = SynthesisConfig(fsc_k=2, train=FAST, sample_count=300, max_len=6)
    res = synthesize(tiny, PHI, cfg)
    assert res.strategy.k == 2 and res.product_model.num_states == 8
    assert check(tiny, res.strategy, PHI).value == res.value


def test_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(max_iterations=0)
    with pytest.raises(ValueError):
        SynthesisConfig(eps_prog=-1)
