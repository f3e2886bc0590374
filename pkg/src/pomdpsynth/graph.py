"""Graph routines on sparse transition structures: SCCs, BSCCs, end components."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def strongly_connected_components(adj: sp.csr_matrix, nodes=None) -> list[np.ndarray]:
    """Tarjan's algorithm, iterative. Returns SCCs in reverse topological order.

    ``nodes`` optionally restricts the graph to a subset (boolean mask);
    edges leaving the subset are ignored.
    """
    n = adj.shape[0]
    indptr, indices = adj.indptr, adj.indices
    inside = np.ones(n, dtype=bool) if nodes is None else np.asarray(nodes, dtype=bool)
    index = np.full(n, -1, dtype=np.int64)
    low = np.zeros(n, dtype=np.int64)
    on_stack = np.zeros(n, dtype=bool)
    stack: list[int] = []
    out: list[np.ndarray] = []
    counter = 0
    for root in range(n):
        if not inside[root] or index[root] >= 0:
            continue
        work = [(root, indptr[root])]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack[root] = True
        while work:
            v, ptr = work[-1]
            end = indptr[v + 1]
            while ptr < end:
                w = indices[ptr]
                ptr += 1
                if not inside[w]:
                    continue
                if index[w] < 0:
                    work[-1] = (v, ptr)
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack[w] = True
                    work.append((w, indptr[w]))
                    break
                if on_stack[w] and index[w] < low[v]:
                    low[v] = index[w]
            else:
                work.pop()
                if low[v] == index[v]:
                    comp = []
                    while True:
                        w = stack.pop()
                        on_stack[w] = False
                        comp.append(w)
                        if w == v:
                            break
                    out.append(np.array(sorted(comp), dtype=np.int64))
                if work:
                    u = work[-1][0]
                    if low[v] < low[u]:
                        low[u] = low[v]
    return out


def bottom_sccs(P: sp.csr_matrix) -> list[np.ndarray]:
    """SCCs of a Markov chain with no transition leaving the component."""
    P = sp.csr_matrix(P)
    P.eliminate_zeros()
    comp_of = np.full(P.shape[0], -1)
    sccs = strongly_connected_components(P)
    for i, c in enumerate(sccs):
        comp_of[c] = i
    out = []
    for i, c in enumerate(sccs):
        succ = P[c].indices
        if np.all(comp_of[succ] == i):
            out.append(c)
    return out


def backward_reachable(P: sp.csr_matrix, targets: np.ndarray, through: np.ndarray | None = None) -> np.ndarray:
    """States that reach ``targets`` (boolean mask) via states in ``through``.

    Targets themselves are included; intermediate states must lie in
    ``through`` (default: everywhere).
    """
    n = P.shape[0]
    Pt = sp.csr_matrix(P.T)
    Pt.eliminate_zeros()
    seen = np.asarray(targets, dtype=bool).copy()
    allowed = np.ones(n, dtype=bool) if through is None else np.asarray(through, dtype=bool)
    frontier = np.nonzero(seen)[0]
    while frontier.size:
        cand = np.unique(Pt[frontier].indices)
        cand = cand[~seen[cand] & allowed[cand]]
        seen[cand] = True
        frontier = cand
    return seen


def state_graph(m) -> sp.csr_matrix:
    """Boolean state-to-state adjacency of an MDP (union over actions)."""
    rs = m.row_states
    P = m.transitions.tocoo()
    A = sp.csr_matrix((np.ones(P.nnz), (rs[P.row], P.col)), shape=(m.num_states, m.num_states))
    A.data[:] = 1.0
    return A


def maximal_end_components(m, allowed_states: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """MEC decomposition of an MDP restricted to ``allowed_states``.

    Returns ``(states, rows)`` pairs, ``rows`` being the choice rows that stay
    inside the component.
    """
    n = m.num_states
    P = m.transitions
    rs = m.row_states
    alive_state = np.ones(n, dtype=bool) if allowed_states is None else np.asarray(allowed_states, bool).copy()
    alive_row = alive_state[rs].copy()
    comp_of = np.full(n, -1, dtype=np.int64)
    while True:
        # Drop rows that can leave the alive set.
        for r in np.nonzero(alive_row)[0]:
            if not np.all(alive_state[P.indices[P.indptr[r]:P.indptr[r + 1]]]):
                alive_row[r] = False
        has_row = np.zeros(n, dtype=bool)
        has_row[rs[alive_row]] = True
        dead = alive_state & ~has_row
        if dead.any():
            alive_state &= ~dead
            alive_row &= alive_state[rs]
            continue
        coo = P[alive_row].tocoo()
        src = rs[np.nonzero(alive_row)[0]][coo.row]
        G = sp.csr_matrix((np.ones(coo.nnz), (src, coo.col)), shape=(n, n))
        sccs = strongly_connected_components(G, alive_state)
        comp_of[:] = -1
        for i, c in enumerate(sccs):
            comp_of[c] = i
        changed = False
        for r in np.nonzero(alive_row)[0]:
            succ = P.indices[P.indptr[r]:P.indptr[r + 1]]
            if np.any(comp_of[succ] != comp_of[rs[r]]):
                alive_row[r] = False
                changed = True
        if not changed:
            break
        has_row = np.zeros(n, dtype=bool)
        has_row[rs[alive_row]] = True
        alive_state &= has_row
        alive_row &= alive_state[rs]
    out = []
    for c in sccs:
        rows = np.nonzero(alive_row & np.isin(rs, c))[0]
        if rows.size:
            out.append((c, rows))
    return out
