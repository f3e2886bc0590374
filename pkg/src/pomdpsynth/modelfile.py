"""Line-oriented text format for explicit POMDPs.

Example::

    pomdp corridor
    states 3 s0 s1 goal
    actions left right
    observations corridor end
    observe s0 -> corridor
    observe s1 -> corridor
    observe goal -> end
    trans s0 right : 1->s1
    trans s0 left  : 0.5->s0, 1/2->s1
    ...
    reward s0 right = 1
    label goal : goal
    init s0                 # or a distribution: init 0.5->s0, 0.5->s1

``#`` starts a comment. States are referenced by index or declared name;
``→`` is accepted for ``->``. Probabilities may be decimals or fractions.
"""
from __future__ import annotations

import re
from fractions import Fraction

import numpy as np

from .models import ModelError, ModelValidationError, Pomdp, build_pomdp, validate

FORMAT_VERSION = 1

_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_.\-']*$")


class ModelSyntaxError(ModelError):
    def __init__(self, line: int, column: int, message: str):
        self.line, self.column = line, column
        super().__init__(f"line {line}, column {column}: {message}")


class DanglingReferenceError(ModelError):
    pass


class _Line:
    def __init__(self, lineno: int, raw: str):
        self.lineno = lineno
        self.raw = raw
        self.tokens: list[tuple[str, int]] = [
            (m.group(0), m.start() + 1) for m in re.finditer(r"\S+", raw)
        ]

    def error(self, index: int, message: str) -> ModelSyntaxError:
        col = self.tokens[index][1] if index < len(self.tokens) else len(self.raw) + 1
        return ModelSyntaxError(self.lineno, col, message)


def _prob(text: str, line: _Line, idx: int) -> float:
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise line.error(idx, f"invalid probability {text!r}") from None


def _split_outcomes(line: _Line, start: int) -> list[tuple[str, str, int]]:
    """Parse ``p->s [, p->s]*`` from token ``start`` onwards."""
    col0 = line.tokens[start][1] - 1 if start < len(line.tokens) else len(line.raw)
    body = line.raw[col0:].replace("→", "->")
    out = []
    offset = col0
    for part in body.split(","):
        stripped = part.strip()
        pos = offset + part.find(stripped) + 1 if stripped else offset + 1
        if "->" not in stripped:
            raise ModelSyntaxError(line.lineno, pos, f"expected 'p->state', got {stripped!r}")
        p, _, target = stripped.partition("->")
        out.append((p.strip(), target.strip(), pos))
        offset += len(part) + 1
    return out


def parse_model(text: str) -> Pomdp:
    """Parse and validate a model document.

    Raises :class:`ModelSyntaxError` (with line/column),
    :class:`DanglingReferenceError` or :class:`ModelValidationError`.
    """
    name = None
    num_states = None
    state_names: list[str] | None = None
    actions: list[str] | None = None
    declared_obs: list[str] | None = None
    observe: dict[int, str] = {}
    rows: dict[tuple[int, int], dict[int, float]] = {}
    rewards: dict[tuple[int, int], float] = {}
    labels: dict[str, set[int]] = {}
    initial = None
    init_dist = None

    def state(tok: str, line: _Line, idx: int) -> int:
        if num_states is None:
            raise line.error(idx, "'states' must be declared first")
        if state_names is not None and tok in state_names:
            return state_names.index(tok)
        if re.fullmatch(r"\d+", tok):
            s = int(tok)
            if s < num_states:
                return s
        raise DanglingReferenceError(f"line {line.lineno}: unknown state {tok!r}")

    def action(tok: str, line: _Line, idx: int) -> int:
        if actions is None:
            raise line.error(idx, "'actions' must be declared first")
        if tok not in actions:
            raise DanglingReferenceError(f"line {line.lineno}: unknown action {tok!r}")
        return actions.index(tok)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        raw = raw.split("#", 1)[0].rstrip()
        line = _Line(lineno, raw)
        if not line.tokens:
            continue
        key = line.tokens[0][0]
        toks = [t for t, _ in line.tokens]
        if key == "pomdp":
            if len(toks) != 2:
                raise line.error(1, "expected 'pomdp <name>'")
            name = toks[1]
        elif name is None:
            raise line.error(0, "document must start with 'pomdp <name>'")
        elif key == "states":
            if len(toks) < 2 or not toks[1].isdigit() or int(toks[1]) < 1:
                raise line.error(1, "expected 'states N' with N >= 1")
            num_states = int(toks[1])
            if len(toks) > 2:
                state_names = toks[2:]
                if len(state_names) != num_states:
                    raise line.error(2, f"{len(state_names)} state names for {num_states} states")
                if len(set(state_names)) != num_states:
                    raise line.error(2, "duplicate state name")
        elif key == "actions":
            if len(toks) < 2:
                raise line.error(1, "expected at least one action")
            actions = toks[1:]
            if len(set(actions)) != len(actions):
                raise line.error(1, "duplicate action name")
        elif key == "observations":
            declared_obs = toks[1:]
            if len(set(declared_obs)) != len(declared_obs):
                raise line.error(1, "duplicate observation name")
        elif key == "observe":
            if len(toks) != 4 or toks[2] not in ("->", "→"):
                raise line.error(min(len(toks), 2), "expected 'observe s -> z'")
            s = state(toks[1], line, 1)
            z = toks[3]
            if declared_obs is not None and z not in declared_obs:
                raise DanglingReferenceError(f"line {lineno}: undeclared observation {z!r}")
            observe[s] = z
        elif key == "trans":
            if len(toks) < 5 or toks[3] != ":":
                raise line.error(min(len(toks), 3), "expected 'trans s a : p->s' [, p->s']*'")
            s = state(toks[1], line, 1)
            a = action(toks[2], line, 2)
            if (s, a) in rows:
                raise line.error(0, f"duplicate row for ({toks[1]}, {toks[2]})")
            dist: dict[int, float] = {}
            for p, target, col in _split_outcomes(line, 4):
                t = state(target, line, 4)
                try:
                    pv = float(Fraction(p))
                except (ValueError, ZeroDivisionError):
                    raise ModelSyntaxError(lineno, col, f"invalid probability {p!r}") from None
                dist[t] = dist.get(t, 0.0) + pv
            rows[(s, a)] = dist
        elif key == "reward":
            if len(toks) != 5 or toks[3] != "=":
                raise line.error(min(len(toks), 3), "expected 'reward s a = r'")
            s = state(toks[1], line, 1)
            a = action(toks[2], line, 2)
            try:
                rewards[(s, a)] = float(toks[4])
            except ValueError:
                raise line.error(4, f"invalid reward {toks[4]!r}") from None
        elif key == "label":
            if len(toks) < 3 or toks[2] != ":":
                raise line.error(min(len(toks), 2), "expected 'label ap : s1 s2 ...'")
            if not _NAME.match(toks[1]):
                raise line.error(1, f"invalid proposition name {toks[1]!r}")
            labels.setdefault(toks[1], set()).update(
                state(t, line, i) for i, t in enumerate(toks[3:], start=3)
            )
        elif key == "init":
            if len(toks) < 2:
                raise line.error(1, "expected 'init s' or 'init p->s, ...'")
            if "->" in raw or "→" in raw:
                init_dist = {}
                for p, target, col in _split_outcomes(line, 1):
                    try:
                        init_dist[state(target, line, 1)] = float(Fraction(p))
                    except (ValueError, ZeroDivisionError):
                        raise ModelSyntaxError(lineno, col, f"invalid probability {p!r}") from None
                initial = max(init_dist, key=lambda s: (init_dist[s], -s))
            else:
                if len(toks) != 2:
                    raise line.error(2, "unexpected token after initial state")
                initial = state(toks[1], line, 1)
        else:
            raise line.error(0, f"unknown section {key!r}")

    if name is None:
        raise ModelSyntaxError(1, 1, "empty document")
    if num_states is None or actions is None:
        raise ModelSyntaxError(1, 1, "missing 'states' or 'actions' section")
    missing = [s for s in range(num_states) if s not in observe]
    if missing:
        raise DanglingReferenceError(f"no observation for state(s) {missing[:10]}")
    obs_names = declared_obs if declared_obs is not None else list(dict.fromkeys(
        observe[s] for s in range(num_states)))
    obs = [obs_names.index(observe[s]) for s in range(num_states)]
    for z in obs_names:
        if z not in observe.values():
            raise DanglingReferenceError(f"observation {z!r} is declared but never observed")
    for (s, a) in rewards:
        if (s, a) not in rows:
            raise DanglingReferenceError(f"reward for disabled action {actions[a]!r} in state {s}")

    m = build_pomdp(
        name, num_states, actions, rows,
        observations=obs, observation_names=obs_names, rewards=rewards,
        labels=labels, initial=initial if initial is not None else 0,
        initial_distribution=init_dist, state_names=state_names, check=False,
    )
    diags = validate(m)
    if diags:
        raise ModelValidationError(diags)
    return m


def serialize_model(m: Pomdp) -> str:
    """Inverse of :func:`parse_model` (index-preserving, floats via repr)."""
    names = m.state_names
    ref = (lambda s: names[s]) if names else str
    out = [f"# pomdp format v{FORMAT_VERSION}", f"pomdp {m.name}"]
    out.append(f"states {m.num_states}" + (" " + " ".join(names) if names else ""))
    out.append("actions " + " ".join(m.actions))
    out.append("observations " + " ".join(m.observation_names))
    for s in range(m.num_states):
        out.append(f"observe {ref(s)} -> {m.observation_names[m.observations[s]]}")
    P = m.transitions
    rs = m.row_states
    for r in range(m.num_choices):
        lo, hi = P.indptr[r], P.indptr[r + 1]
        succ = ", ".join(f"{float(P.data[k])!r}->{ref(int(P.indices[k]))}" for k in range(lo, hi))
        out.append(f"trans {ref(int(rs[r]))} {m.actions[m.row_actions[r]]} : {succ}")
    for r in sorted(m.reward_rows):
        out.append(f"reward {ref(int(rs[r]))} {m.actions[m.row_actions[r]]} = {float(m.row_rewards[r])!r}")
    for ap in sorted(m.labels):
        states = sorted(m.labels[ap])
        out.append(f"label {ap} :" + "".join(f" {ref(int(s))}" for s in states))
    if m.initial_distribution is not None:
        d = np.asarray(m.initial_distribution)
        out.append("init " + ", ".join(f"{float(d[s])!r}->{ref(int(s))}" for s in np.nonzero(d)[0]))
    else:
        out.append(f"init {ref(m.initial)}")
    return "\n".join(out) + "\n"


def load_model(path) -> Pomdp:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read())


def save_model(m: Pomdp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_model(m))
