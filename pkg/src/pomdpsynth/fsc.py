"""Finite-state controllers: memory updates, the product M x A, projection, file IO.

Memory nodes are folded into the model so that a memoryless strategy on the
product is exactly a k-FSC on the original POMDP. Product state ``(s, n)``
has index ``s * k + n`` and observation ``(z, n)`` has id ``z * k + n``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .checker import ObservationStrategy, StrategyError
from .models import STOCHASTIC_TOL, Pomdp

FSC_FORMAT_VERSION = 1
STRATEGY_FORMAT_VERSION = 1
UPDATE_KINDS = ("observation-repeat", "spec-driven", "explicit-table")


class FscError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MemoryUpdate:
    """Memory update ``delta``.

    ``table[n, z, a]`` is the successor node after playing ``a`` under
    observation ``z`` in node ``n``. With ``repeat`` set, a successor
    observation equal to ``z`` overrides the table and advances the node
    (saturating at ``k - 1``).
    """

    kind: str
    k: int
    table: np.ndarray
    repeat: bool = False

    def __post_init__(self):
        if self.kind not in UPDATE_KINDS:
            raise FscError(f"unknown memory update kind {self.kind!r}")
        t = np.asarray(self.table, dtype=np.int64)
        object.__setattr__(self, "table", t)
        if self.k < 1:
            raise FscError("an FSC needs at least one memory node")
        if t.ndim != 3 or t.shape[0] != self.k:
            raise FscError(f"update table must have shape (k, |Z|, |Act|), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= self.k):
            raise FscError("update table references a node outside 0..k-1")

    @property
    def num_observations(self) -> int:
        return self.table.shape[1]

    @property
    def num_actions(self) -> int:
        return self.table.shape[2]

    def __call__(self, n, z, a, z_next):
        """Vectorised ``delta(n, z, a)`` refined by the successor observation."""
        out = self.table[n, z, a]
        if self.repeat:
            out = np.where(np.asarray(z_next) == np.asarray(z), np.minimum(np.asarray(n) + 1, self.k - 1), out)
        return out


def memory_update(kind: str, k: int, m: Pomdp, *, label: str = "A", table=None) -> MemoryUpdate:
    """Predefined memory updates.

    ``observation-repeat``: advance ``n -> min(n+1, k-1)`` whenever the next
    observation equals the current one, otherwise keep the node.
    ``spec-driven``: flip ``0 -> 1`` when acting under an observation whose
    states all carry ``label`` (the landmark class), otherwise keep the node.
    ``explicit-table``: use ``table`` verbatim.
    """
    if k < 1:
        raise FscError("an FSC needs at least one memory node")
    Z, A = m.num_observations, m.num_actions
    stay = np.broadcast_to(np.arange(k)[:, None, None], (k, Z, A)).copy()
    if kind == "observation-repeat":
        return MemoryUpdate(kind, k, stay, repeat=True)
    if kind == "spec-driven":
        if label not in m.labels:
            raise FscError(f"model has no label {label!r}")
        marked = m.label_mask(label)
        cls = [z for z in range(Z) if marked[m.observations == z].all() and (m.observations == z).any()]
        if not cls:
            raise FscError(f"no observation class lies inside label {label!r}")
        stay[0, cls, :] = min(1, k - 1)
        return MemoryUpdate(kind, k, stay)
    if kind == "explicit-table":
        if table is None:
            raise FscError("explicit-table update needs a table")
        t = np.asarray(table, dtype=np.int64)
        if t.shape != (k, Z, A):
            raise FscError(f"table shape {t.shape} != {(k, Z, A)}")
        return MemoryUpdate(kind, k, t)
    raise FscError(f"unknown memory update kind {kind!r}")


def product(m: Pomdp, update: MemoryUpdate) -> Pomdp:
    """Flat POMDP over ``S x N`` with observations ``Z x N``."""
    k = update.k
    if (update.num_observations, update.num_actions) != (m.num_observations, m.num_actions):
        raise FscError("memory update alphabet does not match the model")
    rs = m.row_states
    counts = np.repeat(np.diff(m.row_starts), k)
    row_starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    R = m.num_choices
    offset = np.arange(R) - m.row_starts[rs]
    P = m.transitions.tocoo()
    z_src = m.observations[rs[P.row]]
    a_src = m.row_actions[P.row]
    z_dst = m.observations[P.col]
    nrows = R * k
    row_actions = np.empty(nrows, dtype=np.int64)
    row_rewards = np.empty(nrows)
    reward_rows: set[int] = set()
    rows, cols, vals = [], [], []
    base_rewarded = np.zeros(R, dtype=bool)
    base_rewarded[list(m.reward_rows)] = True
    for n in range(k):
        prow = row_starts[rs * k + n] + offset
        row_actions[prow] = m.row_actions
        row_rewards[prow] = m.row_rewards
        reward_rows.update(int(r) for r in prow[base_rewarded])
        nn = update(np.full(P.nnz, n), z_src, a_src, z_dst)
        rows.append(prow[P.row])
        cols.append(P.col * k + nn)
        vals.append(P.data)
    T = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nrows, m.num_states * k))
    T.sum_duplicates()
    T.sort_indices()
    init = np.zeros(m.num_states * k)
    init[np.arange(m.num_states) * k] = m.initial_vector()
    names = m.state_names or tuple(str(s) for s in range(m.num_states))
    return Pomdp(
        name=f"{m.name}_x_fsc{k}", num_states=m.num_states * k, actions=m.actions,
        row_starts=row_starts, row_actions=row_actions, transitions=T,
        row_rewards=row_rewards,
        labels={ap: frozenset(s * k + n for s in v for n in range(k)) for ap, v in m.labels.items()},
        initial=m.initial * k,
        initial_distribution=init if m.initial_distribution is not None else None,
        state_names=tuple(f"{s}|n{n}" for s in names for n in range(k)),
        reward_rows=frozenset(reward_rows),
        observations=np.repeat(m.observations, k) * k + np.tile(np.arange(k), m.num_states),
        observation_names=tuple(f"{z}|n{n}" for z in m.observation_names for n in range(k)),
    )


@dataclass(frozen=True, eq=False)
class Fsc:
    """k-FSC with initial node 0: action mapping ``gamma[n, z]`` and update ``delta``."""

    gamma: np.ndarray
    update: MemoryUpdate

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        object.__setattr__(self, "gamma", g)
        u = self.update
        if g.shape != (u.k, u.num_observations, u.num_actions):
            raise FscError(f"gamma shape {g.shape} does not match the memory update")
        if np.any(g < -STOCHASTIC_TOL) or np.any(np.abs(g.sum(axis=2) - 1.0) > STOCHASTIC_TOL):
            raise FscError("every gamma(n, z) must be a distribution")

    @property
    def k(self) -> int:
        return self.update.k

    @property
    def initial(self) -> int:
        return 0

    def product_strategy(self) -> ObservationStrategy:
        k, Z, A = self.gamma.shape
        return ObservationStrategy(self.gamma.transpose(1, 0, 2).reshape(Z * k, A), memory=k)


def project_fsc(sigma: ObservationStrategy, update: MemoryUpdate) -> Fsc:
    """Read a memoryless strategy over ``Z x N`` as a k-FSC with the given update."""
    k, Z, A = update.k, update.num_observations, update.num_actions
    if sigma.table.shape != (Z * k, A):
        raise StrategyError(f"strategy covers {sigma.table.shape[0]} observation/node pairs, "
                            f"expected {Z * k}")
    return Fsc(sigma.table.reshape(Z, k, A).transpose(1, 0, 2), update)


def fsc_as_product(m: Pomdp, fsc: Fsc) -> tuple[Pomdp, ObservationStrategy]:
    return product(m, fsc.update), fsc.product_strategy()


# --- file formats -------------------------------------------------------------

def _dist_text(actions, dist) -> str:
    return " ".join(f"{actions[a]}={float(p)!r}" for a, p in enumerate(dist) if p > 0)


def _parse_dist(tokens, actions, where) -> np.ndarray:
    dist = np.zeros(len(actions))
    for tok in tokens:
        name, _, p = tok.partition("=")
        if name not in actions or not p:
            raise FscError(f"{where}: bad action entry {tok!r}")
        dist[actions.index(name)] = float(p)
    return dist


def save_strategy(sigma: ObservationStrategy, m: Pomdp, path) -> None:
    """One line per observation (``z : a=p ...``) or per pair (``z n : a=p ...``)."""
    k = sigma.memory
    lines = [f"# strategy format v{STRATEGY_FORMAT_VERSION}", f"strategy memory={k}"]
    for idx, dist in enumerate(sigma.table):
        z, n = divmod(idx, k)
        key = m.observation_names[z] if k == 1 else f"{m.observation_names[z]} {n}"
        lines.append(f"{key} : {_dist_text(m.actions, dist)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_strategy(path, m: Pomdp) -> ObservationStrategy:
    """Read a strategy file; observation ids refer to ``m`` (or its product, for memory > 1)."""
    k = 1
    table = None
    seen = set()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("strategy"):
            for tok in line.split()[1:]:
                key, _, val = tok.partition("=")
                if key == "memory":
                    k = int(val)
            continue
        if table is None:
            table = np.zeros((m.num_observations * k, m.num_actions))
        head, sep, body = line.partition(":")
        if not sep:
            raise FscError(f"line {lineno}: expected 'z [n] : a=p ...'")
        parts = head.split()
        if parts[0] not in m.observation_names:
            raise FscError(f"line {lineno}: unknown observation {parts[0]!r}")
        z = m.observation_names.index(parts[0])
        n = int(parts[1]) if len(parts) > 1 else 0
        if not 0 <= n < k:
            raise FscError(f"line {lineno}: memory node {n} outside 0..{k - 1}")
        table[z * k + n] = _parse_dist(body.split(), m.actions, f"line {lineno}")
        seen.add(z * k + n)
    if table is None or len(seen) != table.shape[0]:
        missing = sorted(set(range(m.num_observations * k)) - seen)
        raise FscError(f"strategy file misses entries for observation ids {missing[:5]}")
    return ObservationStrategy(table, memory=k)


def save_fsc(fsc: Fsc, m: Pomdp, path) -> None:
    u = fsc.update
    zs, acts = m.observation_names, m.actions
    lines = [f"# fsc format v{FSC_FORMAT_VERSION}",
             f"fsc k={fsc.k} init=0 update={u.kind} repeat={int(u.repeat)}"]
    for n in range(fsc.k):
        for z in range(len(zs)):
            lines.append(f"gamma {n} {zs[z]} : {_dist_text(acts, fsc.gamma[n, z])}")
    for n in range(fsc.k):
        for z in range(len(zs)):
            for a in range(len(acts)):
                lines.append(f"delta {n} {zs[z]} {acts[a]} -> {u.table[n, z, a]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_fsc(path, m: Pomdp) -> Fsc:
    k = None
    kind, repeat = "explicit-table", False
    gamma = table = None
    zs, acts = list(m.observation_names), list(m.actions)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if toks[0] == "fsc":
            opts = dict(t.partition("=")[::2] for t in toks[1:])
            k = int(opts["k"])
            if int(opts.get("init", 0)) != 0:
                raise FscError("only initial node 0 is supported")
            kind = opts.get("update", kind)
            repeat = bool(int(opts.get("repeat", 0)))
            gamma = np.full((k, len(zs), len(acts)), np.nan)
            table = np.full((k, len(zs), len(acts)), -1, dtype=np.int64)
            continue
        if k is None:
            raise FscError(f"line {lineno}: missing 'fsc k=...' header")
        try:
            if toks[0] == "gamma":
                n, z = int(toks[1]), zs.index(toks[2])
                if toks[3] != ":":
                    raise FscError(f"line {lineno}: expected ':'")
                gamma[n, z] = _parse_dist(toks[4:], acts, f"line {lineno}")
            elif toks[0] == "delta":
                n, z, a = int(toks[1]), zs.index(toks[2]), acts.index(toks[3])
                if toks[4] != "->":
                    raise FscError(f"line {lineno}: expected '->'")
                table[n, z, a] = int(toks[5])
            else:
                raise FscError(f"line {lineno}: unknown directive {toks[0]!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, FscError):
                raise
            raise FscError(f"line {lineno}: malformed entry ({exc})") from None
    if k is None:
        raise FscError("empty FSC file")
    if np.isnan(gamma).any():
        raise FscError("gamma is not defined for every (node, observation)")
    if (table < 0).any():
        raise FscError("delta is not total over (node, observation, action)")
    return Fsc(gamma, MemoryUpdate(kind, k, table, repeat=repeat))
