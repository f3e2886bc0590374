import numpy as np
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import random_dtmc, random_pomdp
from pomdpsynth.graph import (
    backward_reachable, bottom_sccs, maximal_end_components, state_graph,
    strongly_connected_components,
)


def closure(adj):
    """Reflexive-transitive closure by repeated boolean squaring."""
    n = adj.shape[0]
    R = (adj.toarray() > 0) | np.eye(n, dtype=bool)
    while True:
        R2 = R | ((R.astype(np.int64) @ R.astype(np.int64)) > 0)
        if np.array_equal(R2, R):
            return R
        R = R2


def oracle_sccs(adj):
    R = closure(adj)
    mutual = R & R.T
    comps = {tuple(np.nonzero(row)[0]) for row in mutual}
    return sorted(comps)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 40))
def test_scc_matches_closure(seed, n):
    P = random_dtmc(np.random.default_rng(seed), n, density=0.1)
    ours = sorted(tuple(c.tolist()) for c in strongly_connected_components(P))
    assert ours == oracle_sccs(P)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 40))
def test_scc_reverse_topological(seed, n):
    P = random_dtmc(np.random.default_rng(seed), n, density=0.1)
    sccs = strongly_connected_components(P)
    order = np.empty(n, dtype=int)
    for i, c in enumerate(sccs):
        order[c] = i
    coo = P.tocoo()
    # every edge goes to a component emitted no later than its source
    assert np.all(order[coo.col] <= order[coo.row])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 40))
def test_bottom_sccs(seed, n):
    P = random_dtmc(np.random.default_rng(seed), n, density=0.1)
    R = closure(P)
    expected = sorted(c for c in oracle_sccs(P)
                      if all(set(np.nonzero(R[s])[0]) <= set(c) for s in c))
    assert sorted(tuple(c.tolist()) for c in bottom_sccs(P)) == expected


def test_backward_reachable_through():
    # 0 -> 1 -> 2, 3 -> 2
    P = sp.csr_matrix(np.array([[0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 1, 0], [0, 0, 1, 0]], float))
    goal = np.array([False, False, True, False])
    assert backward_reachable(P, goal).tolist() == [True, True, True, True]
    through = np.array([True, False, True, True])
    assert backward_reachable(P, goal, through).tolist() == [False, False, True, True]


def test_scc_subset():
    P = sp.csr_matrix(np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], float))
    assert [c.tolist() for c in strongly_connected_components(P)] == [[0, 1, 2]]
    parts = strongly_connected_components(P, np.array([True, True, False]))
    assert sorted(c.tolist() for c in parts) == [[0], [1]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_mec_properties(seed):
    m = random_pomdp(np.random.default_rng(seed), n=8, num_actions=3)
    mecs = maximal_end_components(m)
    P = m.transitions
    rs = m.row_states
    seen = np.zeros(m.num_states, dtype=bool)
    for states, rows in mecs:
        assert not seen[states].any()  # disjoint
        seen[states] = True
        inside = np.zeros(m.num_states, dtype=bool)
        inside[states] = True
        for r in rows:
            assert inside[rs[r]]
            assert inside[P.indices[P.indptr[r]:P.indptr[r + 1]]].all()  # closed
        assert set(rs[rows].tolist()) == set(states.tolist())
        # strongly connected under the kept rows
        coo = P[rows].tocoo()
        G = sp.csr_matrix((np.ones(coo.nnz), (rs[rows][coo.row], coo.col)), shape=(m.num_states, m.num_states))
        comps = strongly_connected_components(G, inside)
        assert len(comps) == 1
    # maximality: every row closed in a MEC's state set is one of its rows
    for states, rows in mecs:
        inside = np.isin(np.arange(m.num_states), states)
        for r in range(m.num_choices):
            if inside[rs[r]] and inside[P.indices[P.indptr[r]:P.indptr[r + 1]]].all():
                assert r in rows


def test_state_graph_union(tiny):
    G = state_graph(tiny).toarray()
    assert G[0, 1] == 1 and G[0, 3] == 1 and G[1, 0] == 1 and G[1, 2] == 1
    assert G.sum() == 6
