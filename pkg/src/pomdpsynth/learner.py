"""Trajectory sampling, a numpy LSTM policy trained by BPTT, and strategy extraction."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checker import ObservationStrategy, StateStrategy
from .models import Mdp, Pomdp

log = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
PARAM_NAMES = ("Wx", "Wh", "b", "Wy", "by")


class TrainingError(RuntimeError):
    pass


def model_hash(m: Mdp) -> str:
    h = hashlib.sha256()
    for arr in (m.row_starts, m.row_actions, m.transitions.indptr, m.transitions.indices,
                m.transitions.data, m.row_rewards):
        h.update(np.ascontiguousarray(arr).tobytes())
    if isinstance(m, Pomdp):
        h.update(np.ascontiguousarray(m.observations).tobytes())
    return h.hexdigest()[:16]


# --- sampling -------------------------------------------------------------

def _sample_rows(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Index of the first entry of each cumulative row exceeding ``u``."""
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def sample_trajectories(M: Mdp, strategy, count: int, max_len: int, seed: int,
                        starts=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sample ``count`` paths of the chain induced by a state-based strategy.

    Start states are uniform over ``starts`` (default: all states). A path
    has at most ``max_len`` actions and stops early in absorbing states.
    Each path is ``(states, actions)`` with ``len(states) == len(actions) + 1``.
    """
    table = np.asarray(strategy.table if hasattr(strategy, "table") else strategy, dtype=float)
    if table.shape != (M.num_states, M.num_actions):
        raise ValueError("strategy table must be (num_states, num_actions)")
    rng = np.random.default_rng(seed)
    pool = np.arange(M.num_states) if starts is None else np.asarray(sorted(starts), dtype=np.int64)
    if count == 0:
        return []
    if pool.size == 0:
        raise ValueError("no start states to sample from")
    cur = pool[rng.integers(0, pool.size, size=count)]
    act_cum = np.cumsum(table, axis=1)
    absorbing = M.is_absorbing()
    P = M.transitions
    cdata = np.cumsum(P.data)
    lookup = np.full((M.num_states, M.num_actions), -1, dtype=np.int64)
    lookup[M.row_states, M.row_actions] = np.arange(M.num_choices)
    states = [cur.copy()]
    actions = []
    alive = ~absorbing[cur]
    lengths = np.zeros(count, dtype=np.int64)
    for _ in range(max_len):
        if not alive.any():
            break
        a = _sample_rows(act_cum[cur], rng.random(count))
        r = lookup[cur, a]
        if np.any(r[alive] < 0):
            raise ValueError("strategy chose an action that is not enabled")
        r = np.maximum(r, 0)
        lo, hi = P.indptr[r], P.indptr[r + 1]
        base = np.where(lo > 0, cdata[np.maximum(lo - 1, 0)], 0.0)
        total = cdata[hi - 1] - base
        target = base + rng.random(count) * total
        pos = np.searchsorted(cdata, target, side="right")
        pos = np.clip(pos, lo, hi - 1)
        nxt = P.indices[pos]
        actions.append(np.where(alive, a, -1))
        cur = np.where(alive, nxt, cur)
        states.append(np.where(alive, cur, -1))
        lengths += alive
        alive &= ~absorbing[cur]
    S = np.stack(states, axis=1)
    A = np.stack(actions, axis=1) if actions else np.zeros((count, 0), dtype=np.int64)
    return [(S[i, :lengths[i] + 1].copy(), A[i, :lengths[i]].copy()) for i in range(count)]


@dataclass
class TrajectoryDataset:
    """Observation-action sequences ``z0 a0 z1 ... zn`` (integer ids)."""

    observations: list[np.ndarray]
    actions: list[np.ndarray]
    num_observations: int
    num_actions: int
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def num_steps(self) -> int:
        return int(sum(a.size for a in self.actions))

    def extend(self, other: "TrajectoryDataset") -> "TrajectoryDataset":
        if (other.num_observations, other.num_actions) != (self.num_observations, self.num_actions):
            raise ValueError("dataset alphabets differ")
        meta = dict(self.metadata)
        meta["count"] = len(self) + len(other)
        return TrajectoryDataset(self.observations + other.observations, self.actions + other.actions,
                                 self.num_observations, self.num_actions, meta)

    def one_hot(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        z, a = self.observations[i], self.actions[i]
        return np.eye(self.num_observations)[z], np.eye(self.num_actions)[a]

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Inputs ``(N, T)`` and labels ``(N, T)``, padded with -1 (T = longest action count)."""
        T = max((a.size for a in self.actions), default=0)
        X = np.full((len(self), T), -1, dtype=np.int64)
        Y = np.full((len(self), T), -1, dtype=np.int64)
        for i, (z, a) in enumerate(zip(self.observations, self.actions)):
            X[i, :a.size] = z[:a.size]
            Y[i, :a.size] = a
        return X, Y


def to_observation_sequences(paths, m: Pomdp, metadata=None) -> TrajectoryDataset:
    """Replace every state of each path by its observation (aliasing is kept)."""
    obs = [m.observations[s] for s, _ in paths]
    acts = [np.asarray(a, dtype=np.int64) for _, a in paths]
    meta = {"model": model_hash(m), "count": len(paths)}
    meta.update(metadata or {})
    return TrajectoryDataset(obs, acts, m.num_observations, m.num_actions, meta)


def save_dataset(ds: TrajectoryDataset, m: Pomdp, path) -> None:
    zs, acts = m.observation_names, m.actions
    meta = " ".join(f"{k}={v}" for k, v in sorted(ds.metadata.items()))
    lines = [f"# dataset format v{DATASET_FORMAT_VERSION}", f"meta {meta}".rstrip()]
    for z, a in zip(ds.observations, ds.actions):
        toks = []
        for t in range(a.size):
            toks += [zs[z[t]], acts[a[t]]]
        toks.append(zs[z[-1]])
        lines.append(" ".join(toks))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, m: Pomdp) -> TrajectoryDataset:
    zi = {z: i for i, z in enumerate(m.observation_names)}
    ai = {a: i for i, a in enumerate(m.actions)}
    obs, acts, meta = [], [], {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if toks[0] == "meta":
            meta = dict(t.partition("=")[::2] for t in toks[1:])
            continue
        if len(toks) % 2 == 0:
            raise ValueError(f"line {lineno}: sequence must alternate z a ... z")
        try:
            obs.append(np.array([zi[t] for t in toks[0::2]], dtype=np.int64))
            acts.append(np.array([ai[t] for t in toks[1::2]], dtype=np.int64))
        except KeyError as exc:
            raise ValueError(f"line {lineno}: unknown symbol {exc.args[0]!r}") from None
    return TrajectoryDataset(obs, acts, m.num_observations, m.num_actions, meta)


# --- recurrent policy -------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class RecurrentPolicy:
    """Single-layer LSTM over one-hot observations with a softmax action head.

    Gate order in the stacked weights is (input, forget, output, candidate).
    """

    def __init__(self, num_inputs: int, num_actions: int, hidden: int = 32, seed: int = 0,
                 init_scale: float = 0.1):
        if min(num_inputs, num_actions, hidden) < 1:
            raise ValueError("dimensions must be positive")
        self.num_inputs, self.num_actions, self.hidden = num_inputs, num_actions, hidden
        rng = np.random.default_rng(seed)
        H = hidden
        self.params = {
            "Wx": rng.normal(0.0, init_scale, (num_inputs, 4 * H)),
            "Wh": rng.normal(0.0, init_scale, (H, 4 * H)),
            "b": np.zeros(4 * H),
            "Wy": rng.normal(0.0, init_scale, (H, num_actions)),
            "by": np.zeros(num_actions),
        }
        self.params["b"][H:2 * H] = 1.0  # forget-gate bias
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0

    def copy(self) -> "RecurrentPolicy":
        other = RecurrentPolicy.__new__(RecurrentPolicy)
        other.num_inputs, other.num_actions, other.hidden = self.num_inputs, self.num_actions, self.hidden
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.adam_m = {k: v.copy() for k, v in self.adam_m.items()}
        other.adam_v = {k: v.copy() for k, v in self.adam_v.items()}
        other.step = self.step
        return other

    # forward / backward over a padded batch -----------------------------------
    def forward(self, X: np.ndarray):
        """Action distributions ``(B, T, |Act|)`` for padded inputs ``X`` (pad = -1)."""
        p = self.params
        B, T = X.shape
        H = self.hidden
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        cache = []
        probs = np.empty((B, T, self.num_actions))
        for t in range(T):
            x = X[:, t]
            valid = x >= 0
            a = h @ p["Wh"] + p["b"]
            a[valid] += p["Wx"][x[valid]]
            i, f, o = _sigmoid(a[:, :H]), _sigmoid(a[:, H:2 * H]), _sigmoid(a[:, 2 * H:3 * H])
            g = np.tanh(a[:, 3 * H:])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            probs[:, t] = _softmax(h_new @ p["Wy"] + p["by"])
            cache.append((x, valid, h, c, i, f, o, g, tc, h_new))
            h, c = h_new, c_new
        return probs, cache

    def loss_and_grad(self, X: np.ndarray, Y: np.ndarray):
        """Mean per-step cross-entropy over labelled steps and its gradient."""
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        mask = Y >= 0
        count = int(mask.sum())
        if count == 0:
            return 0.0, grads
        probs, cache = self.forward(X)
        B, T = X.shape
        H = self.hidden
        rows, cols = np.nonzero(mask)
        picked = probs[rows, cols, Y[rows, cols]]
        loss = float(-np.log(np.maximum(picked, 1e-300)).sum() / count)
        dlogits = probs.copy()
        dlogits[rows, cols, Y[rows, cols]] -= 1.0
        dlogits *= mask[:, :, None] / count
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            x, valid, h_prev, c_prev, i, f, o, g, tc, h = cache[t]
            dl = dlogits[:, t]
            grads["Wy"] += h.T @ dl
            grads["by"] += dl.sum(axis=0)
            dh = dl @ p["Wy"].T + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc ** 2) + dc_next
            di, df, dg = dc * g, dc * c_prev, dc * i
            da = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g ** 2)], axis=1)
            grads["Wh"] += h_prev.T @ da
            grads["b"] += da.sum(axis=0)
            np.add.at(grads["Wx"], x[valid], da[valid])
            dh_next = da @ p["Wh"].T
            dc_next = dc * f
        return loss, grads

    def loss(self, X: np.ndarray, Y: np.ndarray) -> float:
        mask = Y >= 0
        if not mask.any():
            return 0.0
        probs, _ = self.forward(X)
        rows, cols = np.nonzero(mask)
        return float(-np.log(np.maximum(probs[rows, cols, Y[rows, cols]], 1e-300)).mean())

    def adam_step(self, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip=5.0) -> float:
        norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise TrainingError(f"non-finite gradient at optimiser step {self.step + 1}")
        scale = clip / norm if clip and norm > clip else 1.0
        self.step += 1
        for k, g in grads.items():
            g = g * scale
            self.adam_m[k] = beta1 * self.adam_m[k] + (1 - beta1) * g
            self.adam_v[k] = beta2 * self.adam_v[k] + (1 - beta2) * g * g
            mhat = self.adam_m[k] / (1 - beta1 ** self.step)
            vhat = self.adam_v[k] / (1 - beta2 ** self.step)
            self.params[k] -= lr * mhat / (np.sqrt(vhat) + eps)
        return norm

    # checkpoints ---------------------------------------------------------------
    def save(self, path) -> None:
        arrays = {f"param_{k}": v for k, v in self.params.items()}
        arrays.update({f"adam_m_{k}": v for k, v in self.adam_m.items()})
        arrays.update({f"adam_v_{k}": v for k, v in self.adam_v.items()})
        header = np.array([CHECKPOINT_FORMAT_VERSION, self.num_inputs, self.num_actions, self.hidden, self.step])
        with open(path, "wb") as fh:
            np.savez(fh, header=header, **arrays)

    @classmethod
    def load(cls, path) -> "RecurrentPolicy":
        with np.load(path) as data:
            version, Z, A, H, step = (int(v) for v in data["header"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            p = cls(Z, A, H)
            for k in PARAM_NAMES:
                p.params[k] = data[f"param_{k}"].copy()
                p.adam_m[k] = data[f"adam_m_{k}"].copy()
                p.adam_v[k] = data[f"adam_v_{k}"].copy()
                if p.params[k].shape != p.adam_m[k].shape:
                    raise ValueError(f"checkpoint tensor {k} has inconsistent shape")
            p.step = step
        return p


def policy_forward(p: RecurrentPolicy, obs_sequence) -> np.ndarray:
    """Action distribution after reading ``obs_sequence`` from the zero state."""
    seq = np.asarray(obs_sequence, dtype=np.int64).ravel()
    if seq.size == 0:
        raise ValueError("observation sequence must be non-empty")
    if seq.min() < 0 or seq.max() >= p.num_inputs:
        raise ValueError(f"unknown observation symbol in {seq.tolist()}")
    probs, _ = p.forward(seq[None, :])
    return probs[0, -1]


# --- training -------------------------------------------------------------

@dataclass
class TrainConfig:
    hidden: int = 32
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    clip: float = 5.0
    seed: int = 0
    max_len: int | None = None

    def __post_init__(self):
        if self.hidden < 1 or self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.clip <= 0:
            raise ValueError("training hyperparameters must be positive")


@dataclass
class TrainReport:
    epoch_losses: list[float]
    initial_loss: float
    final_loss: float
    steps: int
    flagged: bool = False


def train(p: RecurrentPolicy, D: TrajectoryDataset, cfg: TrainConfig) -> TrainReport:
    """Adam on mean per-step cross-entropy, mini-batches reshuffled each epoch."""
    if (D.num_observations, D.num_actions) != (p.num_inputs, p.num_actions):
        raise ValueError("dataset alphabets do not match the policy")
    X, Y = D.padded()
    if cfg.max_len is not None:
        X, Y = X[:, :cfg.max_len], Y[:, :cfg.max_len]
    keep = (Y >= 0).any(axis=1)
    X, Y = X[keep], Y[keep]
    lengths = (Y >= 0).sum(axis=1)
    initial = p.loss(X, Y)
    if cfg.epochs == 0 or X.shape[0] == 0:
        return TrainReport([], initial, initial, 0)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    steps = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(X.shape[0])
        total, weight = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            T = int(lengths[idx].max())
            loss, grads = p.loss_and_grad(X[idx, :T], Y[idx, :T])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at optimiser step {p.step + 1}")
            p.adam_step(grads, lr=cfg.learning_rate, clip=cfg.clip)
            steps += 1
            n = int(lengths[idx].sum())
            total += loss * n
            weight += n
        losses.append(total / weight)
    final = p.loss(X, Y)
    flagged = final > initial
    if flagged:
        log.warning("training loss rose from %.4f to %.4f", initial, final)
    return TrainReport(losses, initial, final, steps, flagged)


def finite_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)).max())


def gradient_check(p: RecurrentPolicy, X: np.ndarray, Y: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between BPTT and central finite differences."""
    X = np.atleast_2d(np.asarray(X, dtype=np.int64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.int64)).reshape(X.shape)
    _, grads = p.loss_and_grad(X, Y)
    worst = 0.0
    for k in PARAM_NAMES:
        num = finite_difference(lambda: p.loss_and_grad(X, Y)[0], p.params[k], eps)
        worst = max(worst, relative_error(grads[k], num))
    return worst


# --- extraction -------------------------------------------------------------

def extract_strategy(p: RecurrentPolicy, m: Pomdp, update=None) -> ObservationStrategy:
    """Query the policy once per observation (or per (z, n) pair with an FSC update).

    Each prediction is restricted to the actions enabled in every state of
    the observation class and renormalised; without remaining mass the row
    falls back to uniform over those actions.
    """
    k = 1
    if update is not None:
        from .fsc import product
        k = update.k
        m = product(m, update)
    if p.num_inputs != m.num_observations or p.num_actions != m.num_actions:
        raise ValueError("policy alphabets do not match the model")
    Z = m.num_observations
    probs, _ = p.forward(np.arange(Z)[:, None])
    probs = probs[:, 0]
    mask = m.enabled_mask()
    table = np.zeros((Z, m.num_actions))
    for z in range(Z):
        members = m.observations == z
        allowed = mask[members].all(axis=0) if members.any() else np.ones(m.num_actions, bool)
        row = np.where(allowed, probs[z], 0.0)
        total = row.sum()
        if total <= 0 or not np.isfinite(total):
            log.info("observation %d: no predicted mass on enabled actions, using uniform", z)
            row = allowed / allowed.sum()
        else:
            row = row / total
        table[z] = row
    return ObservationStrategy(table, memory=k)
