"""Generators for the gridworld benchmark families.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row; cell
index is ``y * c + x``. The four move actions are north/east/south/west.

Family notes (state counts are exact for the generated models):

* ``navigation``: ``c**4`` states, one per (agent cell, obstacle cell).
  Collision states (agent on a static obstacle, or on the moving
  obstacle) are absorbing and labelled ``X``; states with the agent on the
  goal cell are absorbing and labelled ``A``. The moving obstacle picks one
  of the four cardinal moves uniformly and stays put when blocked by a wall
  or a static obstacle. If agent and obstacle swap cells the move counts as
  a collision.
* ``delivery``: ``c**2`` states, no obstacles, unit cost per step, landmarks
  ``A`` (top-right corner) and ``B`` (bottom-left corner).
* ``slippery``: ``c**2`` states; the agent moves as intended with
  probability ``1 - 2*slip`` and perpendicular with ``slip`` each way.
  Static obstacle cells are absorbing ``X`` states; ``A``/``B`` are not
  absorbing.
* ``maze``: ``3c + 8`` states: a five-cell top corridor and three shafts of
  depth ``c + 1``; the goal sits at the bottom of the middle shaft.
  Observations are the seven wall configurations. The initial distribution
  is uniform over non-goal cells.
* ``grid``: ``c**2`` states, observation only tells whether the goal (the
  bottom-right corner) is reached; uniform initial distribution.
* ``rocksample``: ``n**2 * 2**b + 1`` states, ``5 + b`` actions and two
  observations (whether the agent stands on a still-good rock).

Observations of the first three families are 8-bit codes: bit ``i`` is set
when the ``i``-th neighbour (NW, N, NE, W, E, SW, S, SE) is a wall or holds
an obstacle (static or moving; landmarks for ``delivery``). Only codes that
actually occur are put in the alphabet, so ``|Z| <= 256``.

Static obstacles are placed at ``(1, y)`` for even ``y < c - 1``; this is a
fixed rule, not a copy of any published instance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ModelError, Pomdp, build_pomdp

MOVES = ("north", "east", "south", "west")
DELTAS = ((0, 1), (1, 0), (0, -1), (-1, 0))
# Perpendicular directions of each move, as indices into MOVES.
PERPENDICULAR = ((1, 3), (0, 2), (1, 3), (0, 2))
NEIGHBOURS = ((-1, 1), (0, 1), (1, 1), (-1, 0), (1, 0), (-1, -1), (0, -1), (1, -1))

FAMILIES = ("navigation", "delivery", "slippery", "maze", "grid", "rocksample")
MIN_SIZE = {"navigation": 2, "delivery": 2, "slippery": 3, "maze": 1, "grid": 2, "rocksample": 2}


@dataclass(frozen=True)
class GridConfig:
    family: str
    size: int
    obstacles: tuple[tuple[int, int], ...] | None = None
    landmark_a: tuple[int, int] | None = None
    landmark_b: tuple[int, int] | None = None
    slip: float = 0.1
    rocks: int | None = None
    view_range: int = 1
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown benchmark family {self.family!r}")
        if self.size < MIN_SIZE[self.family]:
            raise ModelError(f"{self.family} needs size >= {MIN_SIZE[self.family]}, got {self.size}")
        if not 0 <= self.slip < 0.5:
            raise ModelError("slip probability must lie in [0, 0.5)")
        if self.view_range != 1:
            raise ModelError("only viewing range 1 is supported")
        c = self.size
        cells = list(self.obstacles or ()) + [x for x in (self.landmark_a, self.landmark_b) if x]
        for x, y in cells:
            if not (0 <= x < c and 0 <= y < c):
                raise ModelError(f"cell {(x, y)} lies outside the {c}x{c} grid")
        if self.family == "rocksample" and self.rocks is not None and not 1 <= self.rocks <= c * c - 1:
            raise ModelError("rock count must be between 1 and size**2 - 1")


def default_obstacles(c: int) -> tuple[tuple[int, int], ...]:
    return tuple((1, y) for y in range(0, c - 1, 2))


def _step(cell, d, c):
    x, y = cell
    dx, dy = DELTAS[d]
    nx, ny = x + dx, y + dy
    if 0 <= nx < c and 0 <= ny < c:
        return (nx, ny)
    return cell


def _neighbour_code(cell, c, occupied) -> int:
    x, y = cell
    code = 0
    for bit, (dx, dy) in enumerate(NEIGHBOURS):
        nx, ny = x + dx, y + dy
        if not (0 <= nx < c and 0 <= ny < c) or (nx, ny) in occupied:
            code |= 1 << bit
    return code


def _compact(codes: list[int]) -> tuple[list[int], list[str]]:
    used = sorted(set(codes))
    index = {code: i for i, code in enumerate(used)}
    return [index[code] for code in codes], [f"o{code:08b}" for code in used]


def navigation(cfg: GridConfig) -> Pomdp:
    c = cfg.size
    static = set(cfg.obstacles if cfg.obstacles is not None else default_obstacles(c))
    goal = cfg.landmark_a or (c - 1, c - 1)
    start = (0, 0)
    ob_start = (c - 2, 1) if c >= 3 else (1, 0)
    if goal in static or start in static or ob_start in static:
        raise ModelError("start, obstacle start or goal cell coincides with a static obstacle")
    cells = [(x, y) for y in range(c) for x in range(c)]
    cidx = {cell: i for i, cell in enumerate(cells)}
    n2 = c * c

    def sid(ag, ob):
        return cidx[ag] * n2 + cidx[ob]

    def ob_moves(ob):
        out: dict[tuple[int, int], float] = {}
        for d in range(4):
            nxt = _step(ob, d, c)
            if nxt in static:
                nxt = ob
            out[nxt] = out.get(nxt, 0.0) + 0.25
        return out

    rows = {}
    codes = []
    goal_states, crash_states = [], []
    names = []
    for ag in cells:
        for ob in cells:
            s = sid(ag, ob)
            names.append(f"a{ag[0]}_{ag[1]}o{ob[0]}_{ob[1]}")
            codes.append(_neighbour_code(ag, c, static | {ob}))
            crashed = ag in static or ag == ob
            if crashed:
                crash_states.append(s)
            elif ag == goal:
                goal_states.append(s)
            if crashed or ag == goal:
                for a in range(4):
                    rows[(s, a)] = {s: 1.0}
                continue
            obs_next = ob_moves(ob)
            for a in range(4):
                ag2 = _step(ag, a, c)
                row: dict[int, float] = {}
                for ob2, p in obs_next.items():
                    if ag2 == ob2 or (ag2 == ob and ob2 == ag):
                        t = sid(ag2, ag2)
                    else:
                        t = sid(ag2, ob2)
                    row[t] = row.get(t, 0.0) + p
                rows[(s, a)] = row
    obs, obs_names = _compact(codes)
    return build_pomdp(
        f"navigation{c}", c ** 4, MOVES, rows, observations=obs,
        observation_names=obs_names, labels={"A": goal_states, "X": crash_states},
        initial=sid(start, ob_start), state_names=names,
    )


def delivery(cfg: GridConfig) -> Pomdp:
    c = cfg.size
    a_cell = cfg.landmark_a or (c - 1, c - 1)
    b_cell = cfg.landmark_b or (0, 0)
    cells = [(x, y) for y in range(c) for x in range(c)]
    cidx = {cell: i for i, cell in enumerate(cells)}
    rows, rewards, codes = {}, {}, []
    for cell in cells:
        s = cidx[cell]
        codes.append(_neighbour_code(cell, c, {a_cell, b_cell}))
        for a in range(4):
            rows[(s, a)] = {cidx[_step(cell, a, c)]: 1.0}
            rewards[(s, a)] = 1.0
    obs, obs_names = _compact(codes)
    return build_pomdp(
        f"delivery{c}", c * c, MOVES, rows, observations=obs, observation_names=obs_names,
        rewards=rewards, labels={"A": [cidx[a_cell]], "B": [cidx[b_cell]]},
        initial=cidx[b_cell], state_names=[f"c{x}_{y}" for x, y in cells],
    )


def slippery(cfg: GridConfig) -> Pomdp:
    c = cfg.size
    static = set(cfg.obstacles if cfg.obstacles is not None else default_obstacles(c))
    a_cell = cfg.landmark_a or (c - 1, c - 1)
    b_cell = cfg.landmark_b or (0, 0)
    if a_cell in static or b_cell in static:
        raise ModelError("landmark placed on a static obstacle")
    cells = [(x, y) for y in range(c) for x in range(c)]
    cidx = {cell: i for i, cell in enumerate(cells)}
    rows, codes = {}, []
    p_main = 1.0 - 2 * cfg.slip
    for cell in cells:
        s = cidx[cell]
        codes.append(_neighbour_code(cell, c, static))
        for a in range(4):
            if cell in static:
                rows[(s, a)] = {s: 1.0}
                continue
            row: dict[int, float] = {}
            for d, p in ((a, p_main), (PERPENDICULAR[a][0], cfg.slip), (PERPENDICULAR[a][1], cfg.slip)):
                if p == 0:
                    continue
                t = cidx[_step(cell, d, c)]
                row[t] = row.get(t, 0.0) + p
            rows[(s, a)] = row
    obs, obs_names = _compact(codes)
    return build_pomdp(
        f"slippery{c}", c * c, MOVES, rows, observations=obs, observation_names=obs_names,
        labels={"A": [cidx[a_cell]], "B": [cidx[b_cell]], "X": sorted(cidx[x] for x in static)},
        initial=cidx[b_cell], state_names=[f"c{x}_{y}" for x, y in cells],
    )


def maze(cfg: GridConfig) -> Pomdp:
    c = cfg.size
    # Rows counted from the top; row 0 is the corridor.
    cells = [(col, 0) for col in range(5)]
    cells += [(col, row) for row in range(1, c + 2) for col in (0, 2, 4)]
    cidx = {cell: i for i, cell in enumerate(cells)}
    goal = cidx[(2, c + 1)]
    deltas = ((0, -1), (1, 0), (0, 1), (-1, 0))

    def obs_of(cell):
        col, row = cell
        if row == 0:
            return {0: 0, 1: 1, 2: 2, 3: 1, 4: 3}[col]
        if row < c + 1:
            return 4
        return 6 if col == 2 else 5

    rows, rewards = {}, {}
    for cell, s in cidx.items():
        for a, (dc, dr) in enumerate(deltas):
            if s == goal:
                rows[(s, a)] = {s: 1.0}
                continue
            t = cidx.get((cell[0] + dc, cell[1] + dr), s)
            rows[(s, a)] = {t: 1.0}
            rewards[(s, a)] = 1.0
    n = len(cells)
    init = {s: 1.0 / (n - 1) for s in range(n) if s != goal}
    return build_pomdp(
        f"maze{c}", n, MOVES, rows,
        observations=[obs_of(cell) for cell in cells],
        observation_names=("nw_corner", "ns_walls", "n_wall", "ne_corner", "ew_walls", "dead_end", "goal"),
        rewards=rewards, labels={"goal": [goal]}, initial=0, initial_distribution=init,
        state_names=[f"m{col}_{row}" for col, row in cells],
    )


def grid(cfg: GridConfig) -> Pomdp:
    c = cfg.size
    cells = [(x, y) for y in range(c) for x in range(c)]
    cidx = {cell: i for i, cell in enumerate(cells)}
    goal = cidx[(c - 1, 0)]
    rows, rewards = {}, {}
    for cell, s in cidx.items():
        for a in range(4):
            if s == goal:
                rows[(s, a)] = {s: 1.0}
            else:
                rows[(s, a)] = {cidx[_step(cell, a, c)]: 1.0}
                rewards[(s, a)] = 1.0
    init = {s: 1.0 / (c * c - 1) for s in range(c * c) if s != goal}
    return build_pomdp(
        f"grid{c}", c * c, MOVES, rows,
        observations=[1 if s == goal else 0 for s in range(c * c)],
        observation_names=("clear", "goal"), rewards=rewards, labels={"goal": [goal]},
        initial=0, initial_distribution=init, state_names=[f"g{x}_{y}" for x, y in cells],
    )


def rock_positions(n: int, b: int) -> list[tuple[int, int]]:
    """Deterministic rock placement: a seeded draw of distinct cells."""
    start = (0, n // 2)
    free = [(x, y) for y in range(n) for x in range(n) if (x, y) != start]
    rng = np.random.default_rng(1000 * n + b)
    pick = rng.choice(len(free), size=b, replace=False)
    return [free[i] for i in sorted(pick)]


def rocksample(cfg: GridConfig) -> Pomdp:
    n = cfg.size
    b = cfg.rocks if cfg.rocks is not None else n
    rocks = rock_positions(n, b)
    rock_at = {pos: i for i, pos in enumerate(rocks)}
    cells = [(x, y) for y in range(n) for x in range(n)]
    cidx = {cell: i for i, cell in enumerate(cells)}
    nmask = 1 << b
    terminal = n * n * nmask
    actions = MOVES + ("sample",) + tuple(f"check{i + 1}" for i in range(b))

    def sid(cell, mask):
        return cidx[cell] * nmask + mask

    rows, rewards = {}, {}
    obs = [0] * (terminal + 1)
    for cell in cells:
        for mask in range(nmask):
            s = sid(cell, mask)
            r = rock_at.get(cell)
            obs[s] = 1 if r is not None and mask >> r & 1 else 0
            for a in range(4):
                if a == 1 and cell[0] == n - 1:
                    rows[(s, a)] = {terminal: 1.0}
                    rewards[(s, a)] = 10.0
                else:
                    rows[(s, a)] = {sid(_step(cell, a, n), mask): 1.0}
                    rewards[(s, a)] = 0.0
            if r is None:
                rows[(s, 4)] = {s: 1.0}
                rewards[(s, 4)] = 0.0
            else:
                rows[(s, 4)] = {sid(cell, mask & ~(1 << r)): 1.0}
                rewards[(s, 4)] = 10.0 if mask >> r & 1 else -10.0
            for i in range(b):
                rows[(s, 5 + i)] = {s: 1.0}
    for a in range(len(actions)):
        rows[(terminal, a)] = {terminal: 1.0}
    start = (0, n // 2)
    init = {sid(start, mask): 1.0 / nmask for mask in range(nmask)}
    return build_pomdp(
        f"rocksample{n}_{b}", terminal + 1, actions, rows, observations=obs,
        observation_names=("none", "good"), rewards=rewards, labels={"exit": [terminal]},
        initial=sid(start, 0), initial_distribution=init,
    )


_GENERATORS = {
    "navigation": navigation, "delivery": delivery, "slippery": slippery,
    "maze": maze, "grid": grid, "rocksample": rocksample,
}

DEFAULT_SPECS = {
    "navigation": "Pmax [ !X U A ]",
    "delivery": "Emin [ F (A & F B) ]",
    "slippery": "Pmax [ GF A & GF B & !F X ]",
    "maze": "Emin [ F goal ]",
    "grid": "Emin [ F goal ]",
    "rocksample": "Emax [ F exit ]",
}


def generate_benchmark(cfg: GridConfig) -> Pomdp:
    return _GENERATORS[cfg.family](cfg)


def benchmark(family: str, size: int, **kwargs) -> Pomdp:
    return generate_benchmark(GridConfig(family, size, **kwargs))
