"""Explicit-state MDP, POMDP and DTMC containers.

Transitions are stored Storm-style: one sparse row per enabled
(state, action) choice, grouped by state through ``row_starts``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

STOCHASTIC_TOL = 1e-9


class ModelError(ValueError):
    """Base class for malformed models."""


class ModelValidationError(ModelError):
    def __init__(self, diagnostics: list["Diagnostic"]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str
    state: int | None = None
    action: str | None = None

    def __str__(self) -> str:
        where = ""
        if self.state is not None:
            where = f" at state {self.state}"
            if self.action is not None:
                where += f", action {self.action}"
        return f"{self.kind}{where}: {self.message}"


@dataclass(frozen=True, eq=False, kw_only=True)
class Mdp:
    name: str
    num_states: int
    actions: tuple[str, ...]
    row_starts: np.ndarray
    row_actions: np.ndarray
    transitions: sp.csr_matrix
    row_rewards: np.ndarray
    labels: Mapping[str, frozenset[int]] = field(default_factory=dict)
    initial: int = 0
    initial_distribution: np.ndarray | None = None
    state_names: tuple[str, ...] | None = None
    reward_rows: frozenset[int] = frozenset()

    @property
    def num_choices(self) -> int:
        return int(self.row_actions.shape[0])

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    def choice_rows(self, s: int) -> range:
        return range(int(self.row_starts[s]), int(self.row_starts[s + 1]))

    def enabled(self, s: int) -> tuple[int, ...]:
        lo, hi = self.row_starts[s], self.row_starts[s + 1]
        return tuple(int(a) for a in self.row_actions[lo:hi])

    def row_index(self, s: int, a: int) -> int:
        lo, hi = int(self.row_starts[s]), int(self.row_starts[s + 1])
        hits = np.nonzero(self.row_actions[lo:hi] == a)[0]
        if hits.size == 0:
            raise KeyError(f"action {self.actions[a]!r} not enabled in state {s}")
        return lo + int(hits[0])

    def row(self, s: int, a: int) -> tuple[np.ndarray, np.ndarray]:
        r = self.row_index(s, a)
        lo, hi = self.transitions.indptr[r], self.transitions.indptr[r + 1]
        return self.transitions.indices[lo:hi], self.transitions.data[lo:hi]

    @property
    def row_states(self) -> np.ndarray:
        """State index owning each choice row."""
        return np.repeat(np.arange(self.num_states), np.diff(self.row_starts))

    def enabled_mask(self) -> np.ndarray:
        """Boolean (num_states, num_actions) matrix of enabled actions."""
        mask = np.zeros((self.num_states, self.num_actions), dtype=bool)
        mask[self.row_states, self.row_actions] = True
        return mask

    def label_mask(self, name: str) -> np.ndarray:
        mask = np.zeros(self.num_states, dtype=bool)
        mask[list(self.labels.get(name, ()))] = True
        return mask

    def initial_vector(self) -> np.ndarray:
        if self.initial_distribution is not None:
            return np.asarray(self.initial_distribution, dtype=float)
        v = np.zeros(self.num_states)
        v[self.initial] = 1.0
        return v

    def is_absorbing(self) -> np.ndarray:
        """States where every enabled action is a probability-1 self-loop."""
        P = self.transitions
        rs = self.row_states
        diag = np.asarray(P[np.arange(self.num_choices), rs]).ravel()
        loop = np.abs(diag - 1.0) <= STOCHASTIC_TOL
        out = np.ones(self.num_states, dtype=bool)
        np.logical_and.at(out, rs, loop)
        return out


@dataclass(frozen=True, eq=False, kw_only=True)
class Pomdp(Mdp):
    observations: np.ndarray
    observation_names: tuple[str, ...]

    @property
    def num_observations(self) -> int:
        return len(self.observation_names)

    def observation_class(self, z: int) -> np.ndarray:
        return np.nonzero(self.observations == z)[0]


@dataclass(frozen=True, eq=False, kw_only=True)
class Dtmc:
    """Markov chain induced by resolving every choice of a (PO)MDP.

    ``provenance[i]`` is the (model state, automaton/memory node) pair that
    chain state ``i`` was built from; ``action_mix`` keeps the per-state
    action distribution that produced each row.
    """

    transitions: sp.csr_matrix
    rewards: np.ndarray
    labels: Mapping[str, frozenset[int]]
    provenance: np.ndarray
    initial_distribution: np.ndarray
    action_mix: sp.csr_matrix | None = None

    @property
    def num_states(self) -> int:
        return int(self.transitions.shape[0])

    @property
    def num_transitions(self) -> int:
        return int(self.transitions.nnz)

    def label_mask(self, name: str) -> np.ndarray:
        mask = np.zeros(self.num_states, dtype=bool)
        mask[list(self.labels.get(name, ()))] = True
        return mask


def dtmc_from_matrix(
    P,
    rewards=None,
    labels: Mapping[str, Iterable[int]] | None = None,
    initial: int = 0,
) -> Dtmc:
    """Wrap a plain transition matrix as a Dtmc (tests and small examples)."""
    P = sp.csr_matrix(P, dtype=float)
    n = P.shape[0]
    init = np.zeros(n)
    init[initial] = 1.0
    return Dtmc(
        transitions=P,
        rewards=np.zeros(n) if rewards is None else np.asarray(rewards, dtype=float),
        labels={k: frozenset(int(s) for s in v) for k, v in (labels or {}).items()},
        provenance=np.column_stack([np.arange(n), np.zeros(n, dtype=int)]),
        initial_distribution=init,
    )


def build_pomdp(
    name: str,
    num_states: int,
    actions: Iterable[str],
    rows: Mapping[tuple[int, int], Mapping[int, float]],
    observations: Iterable[int] | None = None,
    observation_names: Iterable[str] | None = None,
    rewards: Mapping[tuple[int, int], float] | None = None,
    labels: Mapping[str, Iterable[int]] | None = None,
    initial: int = 0,
    initial_distribution: Mapping[int, float] | np.ndarray | None = None,
    state_names: Iterable[str] | None = None,
    check: bool = True,
) -> Pomdp:
    """Assemble a Pomdp from ``{(s, a): {s': p}}`` rows.

    With ``check`` (the default) the result is validated and
    :class:`ModelValidationError` is raised on any diagnostic.
    """
    actions = tuple(actions)
    rewards = rewards or {}
    keys = sorted(rows)
    row_actions = np.fromiter((a for _, a in keys), dtype=np.int64, count=len(keys))
    counts = np.bincount(np.fromiter((s for s, _ in keys), dtype=np.int64, count=len(keys)),
                         minlength=num_states)[:num_states]
    row_starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    row_rewards = np.zeros(len(keys))
    reward_rows = set()
    for r, key in enumerate(keys):
        succ = rows[key]
        for t in sorted(succ):
            indices.append(int(t))
            data.append(float(succ[t]))
        indptr.append(len(indices))
        if key in rewards:
            row_rewards[r] = float(rewards[key])
            reward_rows.add(r)
    P = sp.csr_matrix(
        (np.asarray(data, dtype=float), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(len(keys), num_states),
    )

    if observations is None:
        obs = np.arange(num_states)
        obs_names = tuple(f"z{s}" for s in range(num_states))
    else:
        obs = np.asarray(list(observations), dtype=np.int64)
        obs_names = (
            tuple(observation_names)
            if observation_names is not None
            else tuple(f"z{z}" for z in range(int(obs.max()) + 1 if obs.size else 0))
        )

    init_dist = None
    if initial_distribution is not None:
        if isinstance(initial_distribution, Mapping):
            init_dist = np.zeros(num_states)
            for s, p in initial_distribution.items():
                init_dist[s] = p
        else:
            init_dist = np.asarray(initial_distribution, dtype=float)

    m = Pomdp(
        name=name,
        num_states=num_states,
        actions=actions,
        row_starts=row_starts,
        row_actions=row_actions,
        transitions=P,
        row_rewards=row_rewards,
        labels={k: frozenset(int(s) for s in v) for k, v in (labels or {}).items()},
        initial=initial,
        initial_distribution=init_dist,
        state_names=tuple(state_names) if state_names is not None else None,
        reward_rows=frozenset(reward_rows),
        observations=obs,
        observation_names=obs_names,
    )
    if check:
        diags = validate(m)
        if diags:
            raise ModelValidationError(diags)
    return m


def validate(m: Mdp, tol: float = STOCHASTIC_TOL) -> list[Diagnostic]:
    """Return one diagnostic per violated model invariant (empty if valid)."""
    out: list[Diagnostic] = []
    n = m.num_states
    P = m.transitions
    if m.row_starts.shape[0] != n + 1 or m.row_starts[-1] != m.num_choices:
        out.append(Diagnostic("structure", "row grouping does not cover all choice rows"))
        return out
    rs = m.row_states
    for s in np.nonzero(np.diff(m.row_starts) == 0)[0]:
        out.append(Diagnostic("deadlock", "no enabled action", state=int(s)))
    sums = np.asarray(P.sum(axis=1)).ravel()
    for r in np.nonzero(np.abs(sums - 1.0) > tol)[0]:
        out.append(Diagnostic(
            "stochasticity", f"row sums to {sums[r]:.12g}",
            state=int(rs[r]), action=m.actions[int(m.row_actions[r])],
        ))
    if P.nnz:
        bad = (P.data < 0) | (P.data > 1) | ~np.isfinite(P.data)
        for k in np.nonzero(bad)[0]:
            r = int(np.searchsorted(P.indptr, k, side="right") - 1)
            out.append(Diagnostic(
                "probability", f"entry {P.data[k]!r} outside [0, 1]",
                state=int(rs[r]), action=m.actions[int(m.row_actions[r])],
            ))
    for r in np.nonzero(~np.isfinite(m.row_rewards))[0]:
        out.append(Diagnostic("reward", "non-finite reward", state=int(rs[r]),
                              action=m.actions[int(m.row_actions[r])]))
    for s in range(n):
        acts = m.row_actions[m.row_starts[s]:m.row_starts[s + 1]]
        if np.unique(acts).size != acts.size:
            out.append(Diagnostic("duplicate", "action listed twice", state=s))
        if acts.size and (acts.min() < 0 or acts.max() >= m.num_actions):
            out.append(Diagnostic("reference", "unknown action index", state=s))
    for name, states in m.labels.items():
        for s in states:
            if not 0 <= s < n:
                out.append(Diagnostic("label", f"label {name!r} references state {s}"))
    if not 0 <= m.initial < n:
        out.append(Diagnostic("initial", f"initial state {m.initial} out of range"))
    if m.initial_distribution is not None:
        d = np.asarray(m.initial_distribution)
        if d.shape != (n,) or np.any(d < 0) or abs(d.sum() - 1.0) > tol:
            out.append(Diagnostic("initial", "initial distribution is not a distribution"))
    if isinstance(m, Pomdp):
        obs = m.observations
        if obs.shape != (n,):
            out.append(Diagnostic("observation", "observation map is not total"))
        elif n and (obs.min() < 0 or obs.max() >= m.num_observations):
            out.append(Diagnostic("observation", "observation id out of range"))
    return out


def underlying_mdp(m: Pomdp) -> Mdp:
    """Drop the observation function; indices and rows are shared, not copied."""
    return Mdp(
        name=m.name,
        num_states=m.num_states,
        actions=m.actions,
        row_starts=m.row_starts,
        row_actions=m.row_actions,
        transitions=m.transitions,
        row_rewards=m.row_rewards,
        labels=m.labels,
        initial=m.initial,
        initial_distribution=m.initial_distribution,
        state_names=m.state_names,
        reward_rows=m.reward_rows,
    )


def fully_observable(m: Mdp) -> Pomdp:
    """Pomdp view of an MDP with one observation per state."""
    names = m.state_names or tuple(f"s{s}" for s in range(m.num_states))
    return Pomdp(
        name=m.name, num_states=m.num_states, actions=m.actions,
        row_starts=m.row_starts, row_actions=m.row_actions,
        transitions=m.transitions, row_rewards=m.row_rewards, labels=m.labels,
        initial=m.initial, initial_distribution=m.initial_distribution,
        state_names=m.state_names, reward_rows=m.reward_rows,
        observations=np.arange(m.num_states), observation_names=tuple(names),
    )


def same_structure(a: Mdp, b: Mdp) -> bool:
    """Index-preserving structural equality (names of observations ignored)."""
    if (a.num_states, a.actions, a.initial) != (b.num_states, b.actions, b.initial):
        return False
    if not (np.array_equal(a.row_starts, b.row_starts) and np.array_equal(a.row_actions, b.row_actions)):
        return False
    if (a.transitions != b.transitions).nnz or not np.allclose(a.row_rewards, b.row_rewards):
        return False
    if {k: v for k, v in a.labels.items() if v} != {k: v for k, v in b.labels.items() if v}:
        return False
    ia, ib = a.initial_vector(), b.initial_vector()
    if not np.allclose(ia, ib):
        return False
    if isinstance(a, Pomdp) != isinstance(b, Pomdp):
        return False
    if isinstance(a, Pomdp):
        return np.array_equal(a.observations, b.observations)
    return True
