"""Counterexample-guided synthesis of observation-based strategies for POMDPs.

The package learns randomized finite-memory strategies with a recurrent
sequence policy, verifies them exactly on the induced Markov chain and
repairs them with critical-state counterexamples and a per-observation
max-min linear program.
"""
__version__ = "0.1.0"

from .models import Dtmc, Mdp, ModelError, Pomdp, build_pomdp  # noqa: E402
from .modelfile import load_model, parse_model, save_model, serialize_model  # noqa: E402
from .spec import Specification, parse_spec  # noqa: E402
from .benchmarks import benchmark  # noqa: E402
from .checker import ObservationStrategy, StateStrategy, check, mdp_optimal  # noqa: E402
from .fsc import Fsc, memory_update, product, project_fsc  # noqa: E402
from .learner import RecurrentPolicy, TrainConfig, extract_strategy, train  # noqa: E402
from .refine import SynthesisConfig, synthesize  # noqa: E402

__all__ = [
    "Dtmc", "Mdp", "ModelError", "Pomdp", "build_pomdp",
    "load_model", "parse_model", "save_model", "serialize_model",
    "Specification", "parse_spec", "benchmark",
    "ObservationStrategy", "StateStrategy", "check", "mdp_optimal",
    "Fsc", "memory_update", "product", "project_fsc",
    "RecurrentPolicy", "TrainConfig", "extract_strategy", "train",
    "SynthesisConfig", "synthesize",
]
