"""Counterexample-guided improvement of learned strategies.

Each round trains the recurrent policy, extracts and verifies a strategy,
collects critical states and decisions, repairs the affected observation
classes with a max-min LP and adds fresh training paths that start in the
critical states.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .checker import (
    ObservationStrategy, SolverError, StateStrategy, VerificationResult, check, mdp_optimal, spec_product,
)
from .fsc import Fsc, MemoryUpdate, memory_update, product, project_fsc
from .learner import (
    RecurrentPolicy, TrainConfig, TrajectoryDataset, extract_strategy,
    sample_trajectories, to_observation_sequences, train,
)
from .models import Pomdp
from .spec import Specification

log = logging.getLogger(__name__)


# --- value orientation -----------------------------------------------------

def badness(values: np.ndarray, spec: Specification) -> np.ndarray:
    """Values oriented so that larger means worse (probability of failing, or cost)."""
    v = np.asarray(values, dtype=float)
    if spec.kind == "prob":
        return 1.0 - v if spec.maximizing else v.copy()
    return -v if spec.maximizing else v.copy()


def goodness(values: np.ndarray, spec: Specification) -> np.ndarray:
    return -badness(values, spec)


def criticality_threshold(spec: Specification, mdp_values: np.ndarray | None = None,
                          mode: str = "auto", ratio: float = 0.9) -> np.ndarray | float:
    """Per-state threshold lambda' on the badness scale.

    ``threshold`` uses the specification bound uniformly. ``mdp-relative``
    marks a state critical when it falls short of ``ratio`` times the
    optimal MDP value there (for costs: exceeds it by a factor ``1/ratio``).
    ``auto`` picks ``threshold`` when the specification has a bound.
    """
    if mode == "auto":
        mode = "threshold" if spec.threshold is not None else "mdp-relative"
    if mode == "threshold":
        if spec.threshold is None:
            raise ValueError("threshold criticality needs a bounded specification")
        return float(badness(np.array([spec.threshold]), spec)[0])
    if mode != "mdp-relative":
        raise ValueError(f"unknown criticality mode {mode!r}")
    if mdp_values is None:
        raise ValueError("mdp-relative criticality needs MDP values")
    v = np.asarray(mdp_values, dtype=float)
    if spec.kind == "prob":
        target = ratio * v if spec.maximizing else np.minimum(1.0, v / ratio)
    elif spec.maximizing:
        target = np.where(v >= 0, ratio * v, v / ratio)
    else:
        target = np.where(v >= 0, v / ratio, ratio * v)
    return badness(target, spec)


def critical_states(bad_values: np.ndarray, lam) -> np.ndarray:
    """States whose badness exceeds ``lam`` (scalar or per-state array)."""
    bad_values = np.asarray(bad_values, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), bad_values.shape)
    with np.errstate(invalid="ignore"):
        hit = bad_values > lam
    return np.nonzero(hit)[0]


@dataclass
class Counterexample:
    states: np.ndarray
    state_values: np.ndarray
    decisions: dict  # (z, a) -> witness (s, s')
    threshold: object = None

    @property
    def classes(self) -> list[int]:
        """Observation classes with critical decisions, most decisions first."""
        count: dict[int, int] = {}
        for z, _ in self.decisions:
            count[z] = count.get(z, 0) + 1
        return sorted(count, key=lambda z: (-count[z], z))


def critical_decisions(m: Pomdp, sigma: ObservationStrategy, crit, values=None, threshold=None) -> Counterexample:
    """All ``(z, a)`` played with positive probability that can enter a critical state."""
    crit = np.asarray(crit, dtype=np.int64)
    mask = np.zeros(m.num_states, dtype=bool)
    mask[crit] = True
    decisions: dict = {}
    if crit.size:
        P = m.transitions
        rs = m.row_states
        played = sigma.state_table(m)[rs, m.row_actions] > 0
        enters = (P @ mask.astype(float)) > 0
        for r in np.nonzero(played & enters)[0]:
            s = int(rs[r])
            key = (int(m.observations[s]), int(m.row_actions[r]))
            if key in decisions:
                continue
            succ = P.indices[P.indptr[r]:P.indptr[r + 1]]
            hit = succ[mask[succ] & (P.data[P.indptr[r]:P.indptr[r + 1]] > 0)]
            decisions[key] = (s, int(hit[0]))
    vals = np.asarray(values)[crit] if values is not None else np.zeros(crit.size)
    return Counterexample(crit, vals, decisions, threshold)


# --- local improvement -----------------------------------------------------

@dataclass
class LpResult:
    distribution: np.ndarray
    value: float
    incumbent_value: float
    support: int
    conflict: bool
    used_incumbent: bool


def class_backups(m: Pomdp, values: np.ndarray, z: int, actions: np.ndarray,
                  include_rewards: bool = False, reward_sign: float = 1.0) -> np.ndarray:
    """One-step backups ``B[s, a] = sum_s' P(s,a,s') v(s')`` over the class ``O^-1(z)``."""
    members = m.observation_class(z)
    B = np.empty((members.size, actions.size))
    for i, s in enumerate(members):
        for j, a in enumerate(actions):
            succ, probs = m.row(int(s), int(a))
            B[i, j] = probs @ values[succ]
            if include_rewards:
                B[i, j] += reward_sign * m.row_rewards[m.row_index(int(s), int(a))]
    return B


def candidate_actions(m: Pomdp, z: int) -> np.ndarray:
    members = m.observation_class(z)
    return np.nonzero(m.enabled_mask()[members].all(axis=0))[0]


def solve_maxmin(B: np.ndarray, incumbent: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, float, bool]:
    """``argmax_d min_s (B d)_s`` over the probability simplex.

    The incumbent is feasible, so the optimum cannot be worse; the solver
    answer is clipped, renormalised and only kept if it does not lose to
    the incumbent.
    """
    nS, nA = B.shape
    inc_val = float((B @ incumbent).min())
    if nA == 1:
        return np.ones(1), float(B[:, 0].min()), False
    # variables: d_0..d_{nA-1}, t ; minimise -t
    c = np.zeros(nA + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-B, np.ones((nS, 1))])
    b_ub = np.zeros(nS)
    A_eq = np.hstack([np.ones((1, nA)), np.zeros((1, 1))])
    bounds = [(0, None)] * nA + [(None, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": tol, "dual_feasibility_tolerance": tol})
    if res.status != 0:
        log.warning("LP solver returned status %d (%s); keeping incumbent", res.status, res.message)
        return incumbent.copy(), inc_val, True
    d = np.clip(res.x[:nA], 0.0, None)
    d /= d.sum()
    val = float((B @ d).min())
    if val < inc_val:
        return incumbent.copy(), inc_val, True
    return d, val, False


def improve_lp(m: Pomdp, sigma: ObservationStrategy, values: np.ndarray, z: int,
               spec: Specification | None = None, tol: float = 1e-9) -> LpResult:
    """Repair the distribution of class ``z`` against fixed state values.

    ``values`` must be oriented so that larger is better. For reward
    specifications (``spec.kind == "reward"``) the immediate reward enters
    the backup; infinite values are capped below the worst finite one.
    """
    v = np.asarray(values, dtype=float)
    finite = np.isfinite(v)
    if not finite.all():
        lo = v[finite].min() if finite.any() else 0.0
        hi = v[finite].max() if finite.any() else 0.0
        v = np.where(finite, v, np.where(v > 0, hi + 1.0, lo - 10.0 * (abs(lo) + 1.0)))
    acts = candidate_actions(m, z)
    reward = spec is not None and spec.kind == "reward"
    sign = (1.0 if spec.maximizing else -1.0) if reward else 1.0
    B = class_backups(m, v, z, acts, include_rewards=reward, reward_sign=sign)
    inc = sigma.table[z, acts]
    inc = inc / inc.sum() if inc.sum() > 0 else np.full(acts.size, 1.0 / acts.size)
    d, val, kept = solve_maxmin(B, inc, tol)
    dist = np.zeros(m.num_actions)
    dist[acts] = d
    best_per_state = {int(np.argmax(row)) for row in B}
    return LpResult(dist, val, float((B @ inc).min()), int((d > tol).sum()),
                    len(best_per_state) > 1, kept)


def local_improvement(m: Pomdp, base, repairs: dict) -> StateStrategy:
    """State-based sampling strategy: ``base`` everywhere, LP rows on repaired classes.

    ``base`` is a state-based strategy (typically MDP-optimal) or an
    observation strategy; ``repairs`` maps observation ids to distributions.
    """
    table = np.array(base.state_table(m), dtype=float, copy=True)
    for z, dist in repairs.items():
        table[m.observations == z] = dist
    return StateStrategy(table)


def prune_strategy(sigma: ObservationStrategy, eps: float) -> ObservationStrategy | None:
    """Drop actions played with probability below ``eps`` (None if nothing changes)."""
    t = sigma.table
    small = (t > 0) & (t < eps)
    if not small.any():
        return None
    t = np.where(small, 0.0, t)
    return ObservationStrategy(t / t.sum(axis=1, keepdims=True), sigma.memory)


def resample_from_critical(m: Pomdp, strategy, crit, count: int,
                           max_len: int, seed: int) -> TrajectoryDataset:
    """Paths on the underlying MDP under ``strategy``, started uniformly in ``crit``.

    ``strategy`` is a state-based strategy or an observation strategy.
    """
    if isinstance(strategy, ObservationStrategy):
        strategy = StateStrategy(strategy.state_table(m))
    paths = sample_trajectories(m, strategy, count, max_len, seed, starts=crit)
    return to_observation_sequences(paths, m, {"seed": seed, "max_len": max_len, "source": "critical"})


# --- the loop --------------------------------------------------------------

@dataclass
class SynthesisConfig:
    max_iterations: int = 10
    eps_prog: float = 0.0
    early_stop: bool = True
    criticality: str = "auto"
    ratio: float = 0.9
    lp_tol: float = 1e-9
    fsc_k: int = 1
    memory: str = "observation-repeat"
    memory_label: str = "A"
    sample_count: int = 2000
    resample_count: int = 1000
    max_len: int = 20
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60))
    retrain_epochs: int | None = 30
    seed: int = 0
    threads: int = 1
    prune: float = 0.01

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.eps_prog < 0:
            raise ValueError("eps_prog must be non-negative")
        if self.fsc_k < 1:
            raise ValueError("fsc_k must be at least 1")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if not 0 <= self.prune < 0.5:
            raise ValueError("prune must lie in [0, 0.5)")


@dataclass
class IterationRecord:
    iteration: int
    value: float
    critical_states: int
    critical_decisions: int
    train_loss: float
    seconds: float
    satisfied: bool | None
    strategy: ObservationStrategy = field(repr=False)
    improved_classes: list = field(default_factory=list, repr=False)


@dataclass
class SynthesisResult:
    strategy: ObservationStrategy | Fsc
    value: float
    satisfied: bool | None
    best_iteration: int
    log: list[IterationRecord]
    model: Pomdp
    product_model: Pomdp
    spec: Specification
    update: MemoryUpdate | None
    mdp_value: float
    policy: RecurrentPolicy = field(repr=False)

    def csv_rows(self):
        yield ("iter", "value", "critical_states", "critical_decisions", "train_loss", "seconds")
        for r in self.log:
            yield (r.iteration, repr(r.value), r.critical_states, r.critical_decisions,
                   repr(r.train_loss), f"{r.seconds:.3f}")


def _better(a: float, b: float, spec: Specification) -> bool:
    ga, gb = goodness(np.array([a]), spec)[0], goodness(np.array([b]), spec)[0]
    return bool(ga > gb)


def synthesize(m: Pomdp, spec: Specification, cfg: SynthesisConfig | None = None,
               policy: RecurrentPolicy | None = None, donor_data: TrajectoryDataset | None = None) -> SynthesisResult:
    """Learn, verify and repair a (finite-memory) observation-based strategy.

    Multi-node specification automata are folded into the model first; with
    ``fsc_k > 1`` the memory product is built on top, and the returned
    strategy is an :class:`Fsc` for the (specification-)model.
    """
    cfg = cfg or SynthesisConfig()
    model, work_spec = spec_product(m, spec)
    update = None
    work = model
    if cfg.fsc_k > 1:
        update = memory_update(cfg.memory, cfg.fsc_k, model, label=cfg.memory_label)
        work = product(model, update)
    mdp_values, mdp_strategy = mdp_optimal(work, work_spec)
    init = work.initial_vector()
    support = init > 0
    mdp_value = float(np.sum(mdp_values[support] * init[support]))
    lam = criticality_threshold(work_spec, mdp_values, cfg.criticality, cfg.ratio)
    log.info("model %s: %d states, %d observations; MDP value %.6g",
             work.name, work.num_states, work.num_observations, mdp_value)

    paths = sample_trajectories(work, mdp_strategy, cfg.sample_count, cfg.max_len, cfg.seed)
    data = to_observation_sequences(paths, work, {"seed": cfg.seed, "max_len": cfg.max_len, "source": "mdp"})
    if donor_data is not None:
        data = donor_data.extend(data)
    if policy is None:
        policy = RecurrentPolicy(work.num_observations, work.num_actions, cfg.train.hidden, seed=cfg.seed)
    records: list[IterationRecord] = []
    best = None
    prev_value = None
    for it in range(1, cfg.max_iterations + 1):
        t0 = time.perf_counter()
        tcfg = cfg.train
        if it > 1 and cfg.retrain_epochs is not None:
            tcfg = TrainConfig(**{**tcfg.__dict__, "epochs": cfg.retrain_epochs})
        tcfg = TrainConfig(**{**tcfg.__dict__, "seed": cfg.seed * 1000 + it})
        try:
            report = train(policy, data, tcfg)
        except Exception as exc:  # keep the best-so-far result
            log.error("training failed in iteration %d: %s", it, exc)
            if best is None:
                raise
            break
        sigma = extract_strategy(policy, work)
        pruned = prune_strategy(sigma, cfg.prune) if cfg.prune > 0 else None
        try:
            res: VerificationResult | None = check(work, sigma, work_spec)
        except SolverError as exc:  # near-zero escape probabilities; the pruned candidate may verify
            log.warning("iteration %d: %s", it, exc)
            res = None
        if pruned is not None:
            try:
                alt = check(work, pruned, work_spec)
            except SolverError:
                alt = None
            if alt is not None and (res is None or _better(alt.value, res.value, work_spec)):
                sigma, res = pruned, alt
        if res is None:
            log.error("iteration %d: strategy could not be verified; stopping", it)
            if best is None:
                raise SolverError("the first extracted strategy could not be verified")
            break
        bad = badness(res.values, work_spec)
        crit = critical_states(bad, lam)
        cex = critical_decisions(work, sigma, crit, res.values, lam)
        rec = IterationRecord(it, res.value, int(crit.size), len(cex.decisions),
                              report.final_loss, 0.0, res.satisfied, sigma)
        records.append(rec)
        if best is None or _better(res.value, best.value, work_spec):
            best = rec
        log.info("iteration %d: value %.6g, %d critical states, %d critical decisions",
                 it, res.value, crit.size, len(cex.decisions))
        # no observation-based strategy beats the underlying MDP
        at_bound = not _better(mdp_value, res.value, work_spec) or abs(res.value - mdp_value) <= 1e-12
        stop = ((res.satisfied or at_bound) and cfg.early_stop) or it == cfg.max_iterations
        if not stop and prev_value is not None and cfg.eps_prog > 0 and abs(res.value - prev_value) < cfg.eps_prog:
            stop = True
        prev_value = res.value
        if not stop and crit.size:
            good = goodness(res.values, work_spec)
            repairs = {}
            solve = lambda z: improve_lp(work, sigma, good, z, work_spec, cfg.lp_tol)  # noqa: E731
            if cfg.threads > 1 and len(cex.classes) > 1:
                with ThreadPoolExecutor(cfg.threads) as pool:
                    lps = list(pool.map(solve, cex.classes))
            else:
                lps = [solve(z) for z in cex.classes]
            for z, lp in zip(cex.classes, lps):
                repairs[z] = lp.distribution
                rec.improved_classes.append((z, lp.support, lp.conflict))
            sampler = local_improvement(work, mdp_strategy, repairs)
            extra = resample_from_critical(work, sampler, crit, cfg.resample_count, cfg.max_len,
                                           cfg.seed * 1000 + it)
            data = data.extend(extra)
        rec.seconds = time.perf_counter() - t0
        if stop:
            break

    strategy = best.strategy
    if update is not None:
        strategy = project_fsc(best.strategy, update)
    return SynthesisResult(
        strategy=strategy, value=best.value, satisfied=best.satisfied,
        best_iteration=best.iteration, log=records, model=model, product_model=work,
        spec=work_spec, update=update, mdp_value=mdp_value, policy=policy,
    )
