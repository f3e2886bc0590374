import sys
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from pomdpsynth.modelfile import load_model
from pomdpsynth.models import build_pomdp, dtmc_from_matrix

DATA = Path(__file__).parent / "data"


@pytest.fixture
def tiny():
    return load_model(DATA / "tiny_corridor.pomdp")


def random_dtmc(rng, n, density=0.2, absorbing=0.1):
    """Random sparse chain; a fraction of states is made absorbing."""
    P = np.zeros((n, n))
    for s in range(n):
        if rng.random() < absorbing:
            P[s, s] = 1.0
            continue
        k = max(1, rng.binomial(n, min(1.0, density / 2 + 2 / n)))
        succ = rng.choice(n, size=min(k, n), replace=False)
        w = rng.random(succ.size) + 0.05
        P[s, succ] = w / w.sum()
    return sp.csr_matrix(P)


def random_pomdp(rng, n=6, num_actions=3, num_obs=3, p_enabled=0.8, rewards=False):
    """Random POMDP with per-class shared action sets and labels ``goal``/``bad``."""
    obs = rng.integers(0, num_obs, size=n)
    obs[:num_obs] = np.arange(num_obs)  # every observation is used
    enabled = {}
    for z in range(num_obs):
        acts = [a for a in range(num_actions) if rng.random() < p_enabled] or [0]
        enabled[z] = acts
    rows, rew = {}, {}
    for s in range(n):
        for a in enabled[obs[s]]:
            k = int(rng.integers(1, min(n, 3) + 1))
            succ = rng.choice(n, size=k, replace=False)
            w = rng.random(k) + 0.1
            rows[(s, a)] = {int(t): float(x) for t, x in zip(succ, w / w.sum())}
            if rewards:
                rew[(s, a)] = float(rng.integers(1, 4))
    goal = [int(x) for x in rng.choice(n, size=max(1, n // 4), replace=False)]
    return build_pomdp(
        "rand", n, [f"a{i}" for i in range(num_actions)], rows,
        observations=obs, observation_names=[f"o{z}" for z in range(num_obs)],
        rewards=rew, labels={"goal": goal, "bad": [s for s in range(n) if s not in goal][:1]},
    )


__all__ = ["random_dtmc", "random_pomdp", "dtmc_from_matrix"]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
