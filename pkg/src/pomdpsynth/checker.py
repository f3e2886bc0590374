"""Exact verification of strategies on explicit POMDPs.

A strategy is resolved into an induced DTMC (optionally composed with the
specification automaton) and checked by graph precomputation followed by a
linear solve. The underlying MDP can also be solved to optimality, which
gives training data and upper (lower, for minimisation) bounds.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .graph import backward_reachable, bottom_sccs, maximal_end_components, state_graph
from .models import STOCHASTIC_TOL, Dtmc, Mdp, Pomdp, build_pomdp
from .spec import (
    Eventually, RecurrenceSafety, SeqReach, SpecAutomaton, Specification, Until,
    UnsupportedFormulaError, build_automaton,
)

log = logging.getLogger(__name__)

SOLVER_TOL = 1e-12
DIRECT_LIMIT = 200  # sweeps cost more than a factorisation below this size
RESIDUAL_RTOL = 1e-9  # accepted residual relative to |A||x| + |b| after refinement
DOMAIN_TOL = 1e-6  # values outside their natural range by more than this are solver failures
ACCEPT_LABEL = "_accept"


class StrategyError(ValueError):
    pass


class SolverError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class ObservationStrategy:
    """Memoryless observation-based strategy: one action distribution per observation.

    ``memory`` > 1 marks a strategy over a product alphabet ``Z x N`` (the
    observation id of pair ``(z, n)`` is ``z * memory + n``).
    """

    table: np.ndarray
    memory: int = 1

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        object.__setattr__(self, "table", t)
        if t.ndim != 2:
            raise StrategyError("strategy table must be 2-dimensional")
        if np.any(t < -STOCHASTIC_TOL) or np.any(np.abs(t.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
            bad = int(np.argmax(np.abs(t.sum(axis=1) - 1.0)))
            raise StrategyError(f"row for observation {bad} is not a distribution")

    @property
    def mode(self) -> str:
        return "memoryless" if self.memory == 1 else f"fsc({self.memory})"

    def state_table(self, m: Pomdp) -> np.ndarray:
        if self.table.shape != (m.num_observations, m.num_actions):
            raise StrategyError(
                f"strategy shape {self.table.shape} does not match model "
                f"({m.num_observations} observations, {m.num_actions} actions)")
        return self.table[m.observations]

    def replace_row(self, z: int, dist: np.ndarray) -> "ObservationStrategy":
        t = self.table.copy()
        t[z] = dist
        return ObservationStrategy(t, self.memory)

    @classmethod
    def uniform(cls, m: Pomdp) -> "ObservationStrategy":
        t = np.zeros((m.num_observations, m.num_actions))
        mask = m.enabled_mask()
        for z in range(m.num_observations):
            allowed = mask[m.observations == z].all(axis=0)
            t[z, allowed] = 1.0 / allowed.sum()
        return cls(t)

    @classmethod
    def deterministic(cls, m: Pomdp, choice) -> "ObservationStrategy":
        """``choice`` maps observation id (or name) to an action name or index."""
        t = np.zeros((m.num_observations, m.num_actions))
        for z, a in choice.items():
            z = m.observation_names.index(z) if isinstance(z, str) else z
            a = m.actions.index(a) if isinstance(a, str) else a
            t[z, a] = 1.0
        return cls(t)


@dataclass(frozen=True, eq=False)
class StateStrategy:
    """Per-state strategy of an MDP (not observation-consistent in general)."""

    table: np.ndarray

    def state_table(self, m: Mdp) -> np.ndarray:
        return self.table


@dataclass
class VerificationResult:
    satisfied: bool | None
    value: float
    values: np.ndarray
    model_values: np.ndarray
    num_states: int
    num_transitions: int
    seconds: float
    dtmc: Dtmc | None = field(default=None, repr=False)


# --- linear algebra --------------------------------------------------------

def solve_linear(A: sp.csr_matrix, b: np.ndarray, tol: float = SOLVER_TOL,
                 max_iter: int = 10 ** 6, patience: int = 5000) -> np.ndarray:
    """Solve ``A x = b`` by Gauss-Seidel; fall back to sparse LU.

    The fallback triggers when the observed contraction rate predicts more
    than ``patience`` further sweeps, or when ``max_iter`` is exhausted.
    Systems with at most ``DIRECT_LIMIT`` unknowns are factorised directly.
    """
    n = A.shape[0]
    if n == 0:
        return np.zeros(0)
    A = sp.csr_matrix(A)
    lower = sp.tril(A, format="csr")
    upper = sp.triu(A, k=1, format="csr")
    x = np.zeros(n)
    res0 = res = np.abs(b).max() if b.size else 0.0
    if res <= tol:
        return x
    checkpoint, checkpoint_res = 0, res
    if n <= DIRECT_LIMIT or np.any(lower.diagonal() == 0):
        max_iter = 0  # small, or Gauss-Seidel undefined: go straight to LU
    for it in range(1, max_iter + 1):
        x = spla.spsolve_triangular(lower, b - upper @ x, lower=True)
        res = np.abs(A @ x - b).max()
        if res <= tol:
            return x
        if it - checkpoint >= 25:
            rate = (res / checkpoint_res) ** (1.0 / (it - checkpoint)) if checkpoint_res > 0 else 1.0
            if rate >= 1.0 or np.log(tol / res) / np.log(rate) > patience:
                break
            checkpoint, checkpoint_res = it, res
    log.debug("Gauss-Seidel stalled (residual %.3g from %.3g); using LU", res, res0)
    try:
        lu = spla.splu(sp.csc_matrix(A))
    except RuntimeError as exc:  # exactly singular
        raise SolverError(f"linear system is numerically singular ({exc})") from None
    x = lu.solve(b)
    for _ in range(3):
        r = b - A @ x
        if not np.all(np.isfinite(r)) or np.abs(r).max() <= tol:
            break
        x = x + lu.solve(r)
    if not np.all(np.isfinite(x)):
        raise SolverError("linear system is numerically singular")
    # LU on a nearly singular system can return garbage silently
    r = np.abs(b - A @ x).max()
    scale = abs(A).max() * np.abs(x).max() + np.abs(b).max()
    if r > max(tol, RESIDUAL_RTOL * scale):
        raise SolverError(f"linear system is ill-conditioned (relative residual {r / scale:.2g})")
    return np.asarray(x, dtype=float)


# --- qualitative precomputation & DTMC value computations ---------------------

def _mask(n: int, states) -> np.ndarray:
    if states is None:
        return np.zeros(n, dtype=bool)
    states = np.asarray(states)
    if states.dtype == bool:
        return states.copy()
    m = np.zeros(n, dtype=bool)
    m[states.astype(np.int64)] = True
    return m


def reach_qualitative(P: sp.csr_matrix, goal: np.ndarray, avoid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (prob0, prob1) masks for reaching ``goal`` while avoiding ``avoid``."""
    can = backward_reachable(P, goal, through=~avoid)
    prob0 = ~can
    prob1 = ~backward_reachable(P, prob0, through=~goal)
    return prob0, prob1


def reach_prob(d: Dtmc, goal, avoid=None) -> np.ndarray:
    """Probability of reaching ``goal`` without visiting ``avoid`` first."""
    n = d.num_states
    goal = _mask(n, goal)
    avoid = _mask(n, avoid)
    if np.any(goal & avoid):
        raise ValueError("goal and avoid sets overlap")
    P = d.transitions
    prob0, prob1 = reach_qualitative(P, goal, avoid)
    x = np.zeros(n)
    x[prob1] = 1.0
    unk = ~prob0 & ~prob1
    if unk.any():
        idx = np.nonzero(unk)[0]
        Puu = P[idx][:, idx]
        b = np.asarray(P[idx][:, np.nonzero(prob1)[0]].sum(axis=1)).ravel()
        A = sp.identity(idx.size, format="csr") - Puu
        y = solve_linear(A, b)
        if y.min() < -DOMAIN_TOL or y.max() > 1.0 + DOMAIN_TOL:
            raise SolverError("reachability solve left [0, 1]; the chain is numerically ill-conditioned")
        x[idx] = np.clip(y, 0.0, 1.0)
    return x


def expected_total_reward(d: Dtmc, goal) -> np.ndarray:
    """Expected reward accumulated before reaching ``goal``; inf where goal is not sure."""
    n = d.num_states
    goal = _mask(n, goal)
    P = d.transitions
    _, prob1 = reach_qualitative(P, goal, np.zeros(n, dtype=bool))
    x = np.full(n, np.inf)
    x[goal] = 0.0
    unk = prob1 & ~goal
    if unk.any():
        idx = np.nonzero(unk)[0]
        A = sp.identity(idx.size, format="csr") - P[idx][:, idx]
        r = d.rewards[idx]
        y = solve_linear(A, r)
        slack = DOMAIN_TOL * max(1.0, np.abs(y).max())
        if (r.min() >= 0 and y.min() < -slack) or (r.max() <= 0 and y.max() > slack):
            raise SolverError("expected reward has the wrong sign; the chain is numerically ill-conditioned")
        x[idx] = y
    return x


def buchi_value(d: Dtmc, rec1, rec2, safe) -> np.ndarray:
    """Probability of visiting ``rec1`` and ``rec2`` infinitely often while staying in ``safe``."""
    n = d.num_states
    rec1, rec2, safe = _mask(n, rec1), _mask(n, rec2), _mask(n, safe)
    target = np.zeros(n, dtype=bool)
    for comp in accepting_bsccs(d, rec1, rec2, safe):
        target[comp] = True
    return reach_prob(d, target, ~safe & ~target)


def accepting_bsccs(d: Dtmc, rec1, rec2, safe) -> list[np.ndarray]:
    out = []
    for comp in bottom_sccs(d.transitions):
        if safe[comp].all() and rec1[comp].any() and rec2[comp].any():
            out.append(comp)
    return out


# --- induced chains ---------------------------------------------------------

def _node_successors(m: Mdp, aut: SpecAutomaton) -> np.ndarray:
    """``nxt[q, s]``: automaton node after reading the labels of state ``s`` from ``q``."""
    masks = {ap: m.label_mask(ap) for ap in aut.relevant}
    nxt = np.zeros((aut.num_nodes, m.num_states), dtype=np.int64)
    for s in range(m.num_states):
        holding = frozenset(ap for ap in aut.relevant if masks[ap][s])
        for q in range(aut.num_nodes):
            nxt[q, s] = aut.step[q][holding]
    return nxt


def induced_dtmc(m: Mdp, strategy, aut: SpecAutomaton | None = None, *, mdp_eval: bool = False) -> Dtmc:
    """Markov chain of ``m`` under ``strategy``, composed with ``aut`` if given.

    Chain state ``s * Q + q`` corresponds to model state ``s`` and automaton
    node ``q``. State-based strategies are only accepted with ``mdp_eval``.
    """
    if isinstance(strategy, StateStrategy):
        if not mdp_eval:
            raise StrategyError("state-based strategy is not observation-consistent (use mdp_eval)")
        table = np.asarray(strategy.table, dtype=float)
    elif isinstance(strategy, ObservationStrategy):
        if not isinstance(m, Pomdp):
            raise StrategyError("observation-based strategy needs a POMDP")
        table = strategy.state_table(m)
    else:
        raise StrategyError(f"unsupported strategy type {type(strategy).__name__}")
    rs = m.row_states
    w = table[rs, m.row_actions]
    enabled_mass = np.bincount(rs, weights=w, minlength=m.num_states)
    leak = table.sum(axis=1) - enabled_mass
    if np.any(leak > STOCHASTIC_TOL):
        s = int(np.argmax(leak))
        enabled = set(m.enabled(s))
        a = next(a for a in range(m.num_actions) if table[s, a] > 0 and a not in enabled)
        raise StrategyError(f"strategy puts mass {table[s, a]:.3g} on disabled action "
                            f"{m.actions[a]!r} in state {s}")
    W = sp.csr_matrix((w, (rs, np.arange(m.num_choices))), shape=(m.num_states, m.num_choices))
    Ps = sp.csr_matrix(W @ m.transitions)
    rew = np.bincount(rs, weights=w * m.row_rewards, minlength=m.num_states)
    mix = sp.csr_matrix(table)
    init = m.initial_vector()
    if aut is None or aut.num_nodes == 1:
        n = m.num_states
        return Dtmc(transitions=Ps, rewards=rew, labels=dict(m.labels),
                    provenance=np.column_stack([np.arange(n), np.zeros(n, dtype=np.int64)]),
                    initial_distribution=init, action_mix=mix)
    Q = aut.num_nodes
    nxt = _node_successors(m, aut)
    coo = Ps.tocoo()
    rows, cols, vals = [], [], []
    for q in range(Q):
        rows.append(coo.row * Q + q)
        cols.append(coo.col * Q + nxt[q, coo.col])
        vals.append(coo.data)
    N = m.num_states * Q
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    prov = np.column_stack([np.repeat(np.arange(m.num_states), Q), np.tile(np.arange(Q), m.num_states)])
    labels = {ap: frozenset(int(s) * Q + q for s in states for q in range(Q)) for ap, states in m.labels.items()}
    init_p = np.zeros(N)
    np.add.at(init_p, np.arange(m.num_states) * Q + nxt[aut.initial], init)
    return Dtmc(transitions=P, rewards=np.repeat(rew, Q), labels=labels, provenance=prov,
                initial_distribution=init_p, action_mix=mix)


def _targets(d: Dtmc, aut: SpecAutomaton):
    n = d.num_states
    node = d.provenance[:, 1]
    goal = d.label_mask(aut.goal) & (node == aut.accept_node) if aut.goal else np.zeros(n, bool)
    avoid = d.label_mask(aut.avoid) & ~goal if aut.avoid else np.zeros(n, bool)
    return goal, avoid


def chain_values(d: Dtmc, spec: Specification, aut: SpecAutomaton | None = None) -> np.ndarray:
    aut = aut or build_automaton(spec)
    if isinstance(spec.template, RecurrenceSafety):
        r1, r2 = (d.label_mask(ap) for ap in aut.recurrence)
        return buchi_value(d, r1, r2, ~d.label_mask(aut.avoid))
    goal, avoid = _targets(d, aut)
    if spec.kind == "reward":
        return expected_total_reward(d, goal)
    return reach_prob(d, goal, avoid)


def initial_value(values: np.ndarray, init: np.ndarray) -> float:
    support = init > 0
    return float(np.sum(values[support] * init[support]))


def check(m: Pomdp, strategy, spec: Specification, *, mdp_eval: bool = False,
          keep_chain: bool = False) -> VerificationResult:
    """Verify ``strategy`` (memoryless or :class:`~pomdpsynth.fsc.Fsc`) against ``spec``."""
    from .fsc import Fsc, fsc_as_product

    t0 = time.perf_counter()
    spec.check_labels(m)
    if isinstance(strategy, Fsc):
        m, strategy = fsc_as_product(m, strategy)
    aut = build_automaton(spec)
    d = induced_dtmc(m, strategy, aut, mdp_eval=mdp_eval)
    values = chain_values(d, spec, aut)
    value = initial_value(values, d.initial_distribution)
    Q = aut.num_nodes
    if Q == 1:
        model_values = values
    else:
        nxt = _node_successors(m, aut)
        model_values = values[np.arange(m.num_states) * Q + nxt[aut.initial]]
    return VerificationResult(
        satisfied=spec.satisfied_by(value), value=value, values=values,
        model_values=model_values, num_states=d.num_states,
        num_transitions=d.num_transitions, seconds=time.perf_counter() - t0,
        dtmc=d if keep_chain else None,
    )


# --- specification product --------------------------------------------------

def spec_product(m: Pomdp, spec: Specification) -> tuple[Pomdp, Specification]:
    """Fold a multi-node specification automaton into the model.

    The automaton node becomes part of the state and of the observation
    (``(z, q)``), and the specification is rewritten to plain reachability
    of the ``_accept`` label. One-node automata return the inputs unchanged.
    """
    aut = build_automaton(spec)
    if aut.num_nodes == 1:
        return m, spec
    spec.check_labels(m)
    Q = aut.num_nodes
    nxt = _node_successors(m, aut)
    P = m.transitions.tocsr()
    rs = m.row_states
    rows, rewards = {}, {}
    for s in range(m.num_states):
        for r in m.choice_rows(s):
            a = int(m.row_actions[r])
            succ = P.indices[P.indptr[r]:P.indptr[r + 1]]
            probs = P.data[P.indptr[r]:P.indptr[r + 1]]
            for q in range(Q):
                row: dict[int, float] = {}
                for t, p in zip(succ, probs):
                    key = int(t) * Q + int(nxt[q, t])
                    row[key] = row.get(key, 0.0) + float(p)
                rows[(s * Q + q, a)] = row
                if r in m.reward_rows:
                    rewards[(s * Q + q, a)] = float(m.row_rewards[r])
    del rs
    goal = m.label_mask(aut.goal)
    labels = {ap: [s * Q + q for s in states for q in range(Q)] for ap, states in m.labels.items()}
    labels[ACCEPT_LABEL] = [s * Q + aut.accept_node for s in np.nonzero(goal)[0]]
    init = np.zeros(m.num_states * Q)
    np.add.at(init, np.arange(m.num_states) * Q + nxt[aut.initial], m.initial_vector())
    obs = np.repeat(m.observations, Q) * Q + np.tile(np.arange(Q), m.num_states)
    obs_names = [f"{z}|q{q}" for z in m.observation_names for q in range(Q)]
    names = [f"{m.state_names[s] if m.state_names else s}|q{q}"
             for s in range(m.num_states) for q in range(Q)]
    prod = build_pomdp(
        f"{m.name}_x_spec", m.num_states * Q, m.actions, rows, observations=obs,
        observation_names=obs_names, rewards=rewards, labels=labels,
        initial=int(np.argmax(init)), initial_distribution=init, state_names=names,
    )
    reduced = Specification(kind=spec.kind, template=Eventually(ACCEPT_LABEL),
                            direction=spec.direction, comparison=spec.comparison,
                            threshold=spec.threshold)
    return prod, reduced


# --- MDP optimisation -------------------------------------------------------

def _row_max(q: np.ndarray, m: Mdp, maximize: bool, allowed: np.ndarray | None = None) -> np.ndarray:
    fill = -np.inf if maximize else np.inf
    if allowed is not None:
        q = np.where(allowed, q, fill)
    red = np.maximum if maximize else np.minimum
    return red.reduceat(q, m.row_starts[:-1])


def _bool_rows(m: Mdp) -> sp.csr_matrix:
    B = m.transitions.copy()
    B.eliminate_zeros()
    B.data[:] = 1.0
    return B


def prob1_exists(m: Mdp, goal: np.ndarray, avoid: np.ndarray) -> np.ndarray:
    """States from which some strategy reaches ``goal`` (avoiding ``avoid``) almost surely."""
    B = _bool_rows(m)
    rs = m.row_states
    U = ~avoid | goal
    while True:
        R = goal.copy()
        while True:
            all_in = (B @ (~U).astype(float)) == 0
            some = (B @ R.astype(float)) > 0
            ok = all_in & some & U[rs] & ~avoid[rs]
            new = R.copy()
            new[rs[ok]] = True
            if np.array_equal(new, R):
                break
            R = new
        if np.array_equal(R, U):
            return U
        U = R


def prob0_exists(m: Mdp, goal: np.ndarray, avoid: np.ndarray) -> np.ndarray:
    """States from which some strategy never reaches ``goal`` before ``avoid``."""
    B = _bool_rows(m)
    rs = m.row_states
    Z = ~goal
    while True:
        all_in = (B @ (~Z).astype(float)) == 0
        keep = np.zeros(m.num_states, dtype=bool)
        keep[rs[all_in]] = True
        new = Z & (keep | avoid)
        if np.array_equal(new, Z):
            return Z
        Z = new


def _progress_choice(m: Mdp, q: np.ndarray, x: np.ndarray, goal: np.ndarray,
                     maximize: bool, allowed: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Pick one optimal row per state, preferring rows that move closer to ``goal``.

    Among value-optimal rows the lowest action index that has a successor
    strictly closer to the goal (in the graph of optimal rows) wins; this
    rules out strategies that stall in value-preserving loops.
    """
    n = m.num_states
    rs = m.row_states
    scale = np.maximum(1.0, np.abs(np.where(np.isfinite(x), x, 0.0)))
    xs = x[rs]
    with np.errstate(invalid="ignore"):
        gap = (xs - q) if maximize else (q - xs)
    opt = allowed & np.isfinite(q) & (np.abs(np.where(np.isfinite(gap), gap, np.inf)) <= 1e-9 * scale[rs])
    P = m.transitions
    dist = np.full(n, np.iinfo(np.int64).max)
    dist[goal] = 0
    level = goal.copy()
    d = 0
    while level.any():
        d += 1
        hit = (P @ level.astype(float)) > 0
        cand = opt & hit & active[rs]
        newly = np.zeros(n, dtype=bool)
        newly[rs[cand]] = True
        newly &= dist == np.iinfo(np.int64).max
        dist[newly] = d
        level = newly
    choice = np.full(n, -1, dtype=np.int64)
    for s in range(n):
        lo, hi = m.row_starts[s], m.row_starts[s + 1]
        best = -1
        if active[s] and not goal[s] and dist[s] < np.iinfo(np.int64).max:
            for r in range(lo, hi):
                if opt[r]:
                    succ = P.indices[P.indptr[r]:P.indptr[r + 1]]
                    if np.any(dist[succ] < dist[s]):
                        best = r
                        break
        if best < 0:
            cand = [r for r in range(lo, hi) if opt[r]] or [r for r in range(lo, hi) if allowed[r]]
            best = cand[0] if cand else lo
        choice[s] = best
    return choice


def _strategy_from_rows(m: Mdp, choice: np.ndarray) -> StateStrategy:
    t = np.zeros((m.num_states, m.num_actions))
    t[np.arange(m.num_states), m.row_actions[choice]] = 1.0
    return StateStrategy(t)


def _value_iteration(m: Mdp, x0: np.ndarray, fixed: np.ndarray, maximize: bool,
                     reward: np.ndarray | None, allowed: np.ndarray | None,
                     tol: float = SOLVER_TOL, max_iter: int = 10 ** 6) -> np.ndarray:
    x = x0.copy()
    free = ~fixed
    P = m.transitions
    for _ in range(max_iter):
        q = P @ x
        if reward is not None:
            q = q + reward
        new = _row_max(q, m, maximize, allowed)
        new[fixed] = x[fixed]
        diff = np.abs(new[free] - x[free])
        x = new
        if diff.size == 0 or diff.max() <= tol * max(1.0, np.abs(x[free]).max()):
            return x
    log.warning("value iteration hit the iteration cap")
    return x


def _mdp_reach(m: Mdp, goal: np.ndarray, avoid: np.ndarray, maximize: bool):
    n = m.num_states
    avoid = avoid & ~goal
    if maximize:
        zero = ~backward_reachable(state_graph(m), goal, through=~avoid)
        one = prob1_exists(m, goal, avoid)
    else:
        zero = prob0_exists(m, goal, avoid)
        one = goal.copy()
    x = np.zeros(n)
    x[one] = 1.0
    fixed = zero | one
    x = _value_iteration(m, x, fixed, maximize, None, None)
    allowed = np.ones(m.num_choices, dtype=bool)
    active = ~zero
    for _ in range(100):
        q = m.transitions @ x
        choice = _progress_choice(m, q, x, goal, maximize, allowed, active)
        strat = _strategy_from_rows(m, choice)
        d = induced_dtmc(m, strat, mdp_eval=True)
        x_new = reach_prob(d, goal, avoid)
        if np.abs(x_new - x).max() <= 1e-12:
            x = x_new
            break
        x = np.maximum(x, x_new) if maximize else np.minimum(x, x_new)
    return x, strat


def _mdp_reward(m: Mdp, goal: np.ndarray, maximize: bool):
    n = m.num_states
    sure = prob1_exists(m, goal, np.zeros(n, dtype=bool))
    B = _bool_rows(m)
    rs = m.row_states
    allowed = ((B @ (~sure).astype(float)) == 0) & sure[rs]
    x = np.zeros(n)
    x[~sure] = np.inf
    fixed = goal | ~sure
    x_fin = np.where(sure, 0.0, 0.0)
    x_fin = _value_iteration(m, x_fin, fixed, maximize, m.row_rewards, allowed)
    x = np.where(sure, x_fin, np.inf)
    x[goal] = 0.0
    for _ in range(100):
        q = m.transitions @ np.where(sure, x, 0.0) + m.row_rewards
        choice = _progress_choice(m, q, x, goal, maximize, allowed, sure)
        strat = _strategy_from_rows(m, choice)
        d = induced_dtmc(m, strat, mdp_eval=True)
        x_new = expected_total_reward(d, goal)
        x_new[~sure] = np.inf
        fin = sure
        if np.abs(x_new[fin] - x[fin]).max(initial=0.0) <= 1e-12 * max(1.0, np.abs(x[fin]).max(initial=0.0)):
            x = x_new
            break
        x = np.where(fin, np.maximum(x, x_new) if maximize else np.minimum(x, x_new), np.inf)
    return x, strat


def _mdp_buchi(m: Mdp, rec1: np.ndarray, rec2: np.ndarray, safe: np.ndarray):
    n = m.num_states
    target = np.zeros(n, dtype=bool)
    inside = []
    for states, rows in maximal_end_components(m, safe):
        if rec1[states].any() and rec2[states].any():
            target[states] = True
            inside.append((states, rows))
    x, strat = _mdp_reach(m, target, ~safe, True)
    table = strat.table.copy()
    rs = m.row_states
    for states, rows in inside:
        table[states] = 0.0
        for s in states:
            acts = m.row_actions[rows[rs[rows] == s]]
            table[s, acts] = 1.0 / acts.size
    return x, StateStrategy(table)


def mdp_optimal(M: Mdp, spec: Specification) -> tuple[np.ndarray, StateStrategy]:
    """Optimal values and a memoryless strategy of the (fully observable) MDP.

    The direction follows the specification: maximise for ``max``/``>``/``>=``,
    minimise otherwise. Multi-node automata are first folded into the model,
    in which case values and strategy refer to the product states.
    Inside accepting end components of recurrence objectives the strategy
    randomises uniformly over the component's actions.
    """
    aut = build_automaton(spec)
    spec.check_labels(M)
    if aut.num_nodes > 1:
        from .models import fully_observable
        prod, reduced = spec_product(M if isinstance(M, Pomdp) else fully_observable(M), spec)
        return mdp_optimal(prod, reduced)
    maximize = spec.maximizing
    if isinstance(spec.template, RecurrenceSafety):
        if not maximize:
            raise UnsupportedFormulaError("minimising recurrence objectives on MDPs is not supported")
        r1, r2 = (M.label_mask(ap) for ap in aut.recurrence)
        return _mdp_buchi(M, r1, r2, ~M.label_mask(aut.avoid))
    goal = M.label_mask(aut.goal)
    avoid = M.label_mask(aut.avoid) if aut.avoid else np.zeros(M.num_states, dtype=bool)
    if spec.kind == "reward":
        return _mdp_reward(M, goal, maximize)
    return _mdp_reach(M, goal, avoid, maximize)
