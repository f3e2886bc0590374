"""Command-line front end.

Subcommands::

    bench gen   generate a benchmark model file
    check       verify a strategy (or FSC) against a specification
    sample      sample training paths from the underlying-MDP optimum
    train       fit the recurrent policy to a dataset
    extract     turn a policy checkpoint into a strategy file
    synth       run the full learn / verify / repair loop

Exit codes: 0 success, 1 specification violated (threshold ``check``),
2 usage or model errors. Every command writes a JSON run manifest next to
its main output (or to ``--manifest``).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .benchmarks import DEFAULT_SPECS, FAMILIES, benchmark
from .checker import SolverError, StrategyError, check, mdp_optimal, spec_product
from .fsc import (
    UPDATE_KINDS, Fsc, FscError, load_fsc, load_strategy, memory_update, product,
    project_fsc, save_fsc, save_strategy,
)
from .learner import (
    RecurrentPolicy, TrainConfig, TrainingError, extract_strategy, load_dataset, model_hash,
    sample_trajectories, save_dataset, to_observation_sequences, train,
)
from .modelfile import load_model, save_model
from .models import ModelError
from .refine import SynthesisConfig, synthesize
from .spec import SpecError, format_spec, parse_spec

THREADS_ENV = "POMDPSYNTH_THREADS"
MANIFEST_VERSION = 1

log = logging.getLogger("pomdpsynth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- helpers ----------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _read_spec(text: str | None, family: str | None = None):
    if text is None:
        if family is None:
            raise UsageError("--spec is required")
        text = DEFAULT_SPECS[family]
    path = Path(text)
    if text.endswith(".spec") and path.is_file():
        text = path.read_text().strip()
    return parse_spec(text)


def _work_model(m, spec, k: int, memory: str, label: str):
    """The model the learner sees: specification product, then memory product."""
    model, work_spec = (m, None) if spec is None else spec_product(m, spec)
    update = None
    if k > 1:
        update = memory_update(memory, k, model, label=label)
        model = product(model, update)
    return model, work_spec, update


class Manifest:
    def __init__(self, args, argv):
        self.data = {
            "manifest_version": MANIFEST_VERSION,
            "tool": "pomdpsynth",
            "version": __version__,
            "command": args.command if args.command != "bench" else "bench gen",
            "argv": list(argv),
            "config": {k: v for k, v in vars(args).items() if k not in ("func", "command")},
            "seeds": {},
            "model_hash": None,
            "spec": None,
            "started": _now(),
            "finished": None,
            "outputs": {},
            "result": {},
        }

    def write(self, path) -> None:
        self.data["finished"] = _now()
        Path(path).write_text(json.dumps(self.data, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return repr(obj)


def _manifest_path(args, default) -> Path:
    return Path(args.manifest) if args.manifest else Path(str(default) + ".manifest.json")


# --- subcommands ------------------------------------------------------------

def cmd_bench(args, man: Manifest) -> int:
    m = benchmark(args.family, args.size, slip=args.slip)
    out = Path(args.out or f"{args.family}{args.size}.pomdp")
    save_model(m, out)
    man.data["model_hash"] = model_hash(m)
    man.data["outputs"]["model"] = str(out)
    man.data["result"] = {"states": m.num_states, "observations": m.num_observations,
                          "actions": m.num_actions, "choices": m.num_choices}
    print(f"{out}: {m.num_states} states, {m.num_actions} actions, {m.num_observations} observations")
    man.write(_manifest_path(args, out))
    return 0


def cmd_check(args, man: Manifest) -> int:
    m = load_model(args.model)
    spec = _read_spec(args.spec)
    man.data["model_hash"] = model_hash(m)
    man.data["spec"] = format_spec(spec)
    if (args.strategy is None) == (args.fsc is None):
        raise UsageError("exactly one of --strategy / --fsc is required")
    if args.fsc:
        strategy = load_fsc(args.fsc, m)
    else:
        strategy = load_strategy(args.strategy, m)
        if strategy.memory > 1:
            raise UsageError("strategies with memory > 1 refer to a product model; use --fsc")
    res = check(m, strategy, spec)
    print(repr(res.value))
    if res.satisfied is not None:
        print("satisfied" if res.satisfied else "specification violated")
    man.data["result"] = {"value": res.value, "satisfied": res.satisfied,
                          "chain_states": res.num_states, "chain_transitions": res.num_transitions}
    man.write(_manifest_path(args, args.fsc or args.strategy))
    return 1 if res.satisfied is False else 0


def cmd_sample(args, man: Manifest) -> int:
    m = load_model(args.model)
    spec = _read_spec(args.spec)
    work, work_spec, _ = _work_model(m, spec, args.fsc_k, args.memory, args.memory_label)
    if args.strategy:
        strategy = load_strategy(args.strategy, work)
    else:
        _, strategy = mdp_optimal(work, work_spec)
    paths = sample_trajectories(work, strategy, args.count, args.max_len, args.seed)
    meta = {"model": model_hash(work), "seed": args.seed, "max_len": args.max_len, "count": args.count}
    ds = to_observation_sequences(paths, work, meta)
    save_dataset(ds, work, args.out)
    man.data.update(model_hash=model_hash(m), spec=format_spec(spec))
    man.data["seeds"]["sampling"] = args.seed
    man.data["outputs"]["dataset"] = str(args.out)
    man.data["result"] = {"sequences": len(ds.observations), "steps": ds.num_steps}
    print(f"{args.out}: {len(ds.observations)} sequences, {ds.num_steps} steps")
    man.write(_manifest_path(args, args.out))
    return 0


def cmd_train(args, man: Manifest) -> int:
    m = load_model(args.model)
    spec = _read_spec(args.spec) if args.spec else None
    work, _, _ = _work_model(m, spec, args.fsc_k, args.memory, args.memory_label)
    ds = load_dataset(args.data, work)
    cfg = TrainConfig(hidden=args.hidden, learning_rate=args.lr, batch_size=args.batch_size,
                      epochs=args.epochs, seed=args.seed)
    if args.init:
        policy = RecurrentPolicy.load(args.init)
    else:
        policy = RecurrentPolicy(work.num_observations, work.num_actions, args.hidden, seed=args.seed)
    report = train(policy, ds, cfg)
    policy.save(args.out)
    for i, loss in enumerate(report.epoch_losses, 1):
        print(f"epoch {i}: loss {loss:.6f}")
    if report.flagged:
        print("warning: final loss exceeds initial loss", file=sys.stderr)
    man.data.update(model_hash=model_hash(m), spec=format_spec(spec) if spec else None)
    man.data["seeds"]["training"] = args.seed
    man.data["outputs"]["checkpoint"] = str(args.out)
    man.data["result"] = {"initial_loss": report.initial_loss, "final_loss": report.final_loss,
                          "steps": report.steps, "flagged": report.flagged}
    man.write(_manifest_path(args, args.out))
    return 0


def cmd_extract(args, man: Manifest) -> int:
    m = load_model(args.model)
    spec = _read_spec(args.spec) if args.spec else None
    base, _, update = _work_model(m, spec, 1, args.memory, args.memory_label)
    if args.fsc_k > 1:
        update = memory_update(args.memory, args.fsc_k, base, label=args.memory_label)
    policy = RecurrentPolicy.load(args.policy)
    sigma = extract_strategy(policy, base, update)
    for _ in range(args.predictions - 1):
        again = extract_strategy(policy, base, update)
        if not np.array_equal(again.table, sigma.table):
            raise RuntimeError("policy inference is not deterministic")
    if update is not None:
        save_fsc(project_fsc(sigma, update), base, args.out)
    else:
        save_strategy(sigma, base, args.out)
    man.data.update(model_hash=model_hash(m), spec=format_spec(spec) if spec else None)
    man.data["outputs"]["strategy"] = str(args.out)
    print(f"{args.out}: {sigma.table.shape[0]} rows")
    man.write(_manifest_path(args, args.out))
    return 0


def cmd_synth(args, man: Manifest) -> int:
    m = load_model(args.model)
    spec = _read_spec(args.spec)
    epochs = args.epochs if args.epochs is not None else 60
    cfg = SynthesisConfig(
        max_iterations=args.iters, eps_prog=args.eps_prog, early_stop=not args.no_early_stop,
        criticality=args.criticality, ratio=args.ratio, fsc_k=args.fsc_k, memory=args.memory,
        memory_label=args.memory_label, sample_count=args.samples, resample_count=args.resamples,
        max_len=args.max_len,
        train=TrainConfig(hidden=args.hidden, learning_rate=args.lr, batch_size=args.batch_size,
                          epochs=epochs, seed=args.seed),
        retrain_epochs=args.retrain_epochs if args.retrain_epochs is not None else max(1, epochs // 2),
        seed=args.seed, threads=args.threads,
    )
    donor = None
    if args.donor:
        if args.fsc_k > 1:
            raise UsageError("--donor is only supported for memoryless synthesis")
        dm = load_model(args.donor)
        dwork, dspec = spec_product(dm, spec)
        target, _ = spec_product(m, spec)
        if dwork.observation_names != target.observation_names or dwork.actions != target.actions:
            raise ModelError("donor model must share the observation and action alphabets")
        _, dstrat = mdp_optimal(dwork, dspec)
        paths = sample_trajectories(dwork, dstrat, cfg.sample_count, cfg.max_len, cfg.seed)
        donor = to_observation_sequences(paths, target, {"source": "donor", "seed": cfg.seed})
    result = synthesize(m, spec, cfg, donor_data=donor)

    out_dir = Path(args.out_dir or (Path(args.log).with_suffix("") if args.log else "synth_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    # Strategies are written for the (specification-)model they refer to.
    model_file = Path(args.model)
    if result.model is not m:
        model_file = out_dir / "model.pomdp"
        save_model(result.model, model_file)
    strategy_files = []
    for rec in result.log:
        if result.update is not None:
            path = out_dir / f"iter{rec.iteration:03d}.fsc"
            save_fsc(project_fsc(rec.strategy, result.update), result.model, path)
        else:
            path = out_dir / f"iter{rec.iteration:03d}.strat"
            save_strategy(rec.strategy, result.model, path)
        strategy_files.append(str(path))
    best = Path(strategy_files[result.best_iteration - 1])
    best_copy = out_dir / ("best" + best.suffix)
    best_copy.write_text(best.read_text())
    result.policy.save(out_dir / "policy.npz")

    log_path = Path(args.log) if args.log else out_dir / "log.csv"
    with open(log_path, "w", newline="") as fh:
        csv.writer(fh).writerows(result.csv_rows())

    for rec in result.log:
        print(f"iter {rec.iteration}: value {rec.value:.6g}, {rec.critical_states} critical states, "
              f"{rec.critical_decisions} critical decisions, loss {rec.train_loss:.4f}, {rec.seconds:.1f}s")
    verdict = "" if result.satisfied is None else (" (satisfied)" if result.satisfied else " (violated)")
    print(f"best: iteration {result.best_iteration}, value {result.value!r}{verdict}; "
          f"MDP bound {result.mdp_value!r}")

    man.data.update(model_hash=model_hash(m), spec=format_spec(spec))
    man.data["config"]["synthesis"] = asdict(cfg)
    man.data["seeds"] = {"synthesis": cfg.seed}
    man.data["outputs"] = {"log": str(log_path), "strategies": strategy_files, "best": str(best_copy),
                           "check_model": str(model_file), "check_spec": format_spec(result.spec),
                           "policy": str(out_dir / "policy.npz")}
    man.data["result"] = {"best_iteration": result.best_iteration, "value": result.value,
                          "satisfied": result.satisfied, "mdp_value": result.mdp_value,
                          "values": [r.value for r in result.log]}
    man.write(_manifest_path(args, log_path))
    return 0


# --- parser -----------------------------------------------------------------

def _add_memory(p, default_k=1):
    p.add_argument("--fsc-k", type=int, default=default_k, help="FSC memory nodes (default %(default)s)")
    p.add_argument("--memory", choices=UPDATE_KINDS[:2], default="observation-repeat",
                   help="memory update rule")
    p.add_argument("--memory-label", default="A", help="label driving the spec-driven update")


def _add_train(p):
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    default_threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    parser = _Parser(prog="pomdpsynth", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    bench = sub.add_parser("bench", help="benchmark models")
    bsub = bench.add_subparsers(dest="bench_command", parser_class=_Parser, required=True)
    gen = bsub.add_parser("gen", help="write a benchmark model file")
    gen.add_argument("--family", choices=FAMILIES, required=True)
    gen.add_argument("--size", type=int, required=True)
    gen.add_argument("--slip", type=float, default=0.1)
    gen.add_argument("--out")
    gen.set_defaults(func=cmd_bench)

    chk = sub.add_parser("check", help="verify a strategy")
    chk.add_argument("--model", required=True)
    chk.add_argument("--spec", required=True, help="formula or path to a .spec file")
    chk.add_argument("--strategy")
    chk.add_argument("--fsc")
    chk.set_defaults(func=cmd_check)

    smp = sub.add_parser("sample", help="sample a training dataset")
    smp.add_argument("--model", required=True)
    smp.add_argument("--spec", required=True)
    smp.add_argument("--strategy", help="sample with this strategy instead of the MDP optimum")
    smp.add_argument("--count", type=int, default=2000)
    smp.add_argument("--max-len", type=int, default=20)
    smp.add_argument("--seed", type=int, default=0)
    smp.add_argument("--out", required=True)
    _add_memory(smp)
    smp.set_defaults(func=cmd_sample)

    trn = sub.add_parser("train", help="train the recurrent policy")
    trn.add_argument("--model", required=True)
    trn.add_argument("--spec")
    trn.add_argument("--data", required=True)
    trn.add_argument("--init", help="continue from this checkpoint")
    trn.add_argument("--epochs", type=int, default=20)
    trn.add_argument("--out", required=True)
    _add_train(trn)
    _add_memory(trn)
    trn.set_defaults(func=cmd_train)

    ext = sub.add_parser("extract", help="extract a strategy from a checkpoint")
    ext.add_argument("--model", required=True)
    ext.add_argument("--spec")
    ext.add_argument("--policy", required=True)
    ext.add_argument("--predictions", type=int, default=1,
                     help="repeat inference n times and require identical results")
    ext.add_argument("--out", required=True)
    _add_memory(ext)
    ext.set_defaults(func=cmd_extract)

    syn = sub.add_parser("synth", help="counterexample-guided synthesis")
    syn.add_argument("--model", required=True)
    syn.add_argument("--spec", required=True)
    syn.add_argument("--iters", type=int, default=10)
    syn.add_argument("--eps-prog", type=float, default=0.0)
    syn.add_argument("--no-early-stop", action="store_true")
    syn.add_argument("--criticality", choices=("auto", "threshold", "mdp-relative"), default="auto")
    syn.add_argument("--ratio", type=float, default=0.9)
    syn.add_argument("--samples", type=int, default=2000)
    syn.add_argument("--resamples", type=int, default=1000)
    syn.add_argument("--max-len", type=int, default=20)
    syn.add_argument("--epochs", type=int)
    syn.add_argument("--retrain-epochs", type=int)
    syn.add_argument("--donor", help="sample initial data from this smaller model")
    syn.add_argument("--log", help="CSV log (iter,value,critical_states,critical_decisions,train_loss,seconds)")
    syn.add_argument("--out-dir")
    syn.add_argument("--threads", type=int, default=default_threads,
                     help=f"parallel LP solves per iteration (env {THREADS_ENV})")
    _add_train(syn)
    _add_memory(syn)
    syn.set_defaults(func=cmd_synth)

    for p in (gen, chk, smp, trn, ext, syn):
        p.add_argument("--manifest", help="where to write the run manifest")
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"pomdpsynth: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    man = Manifest(args, argv)
    try:
        return args.func(args, man)
    except UsageError as exc:
        print(f"pomdpsynth: error: {exc}", file=sys.stderr)
        return 2
    except (ModelError, SpecError, FscError, StrategyError, SolverError, TrainingError,
            ValueError, OSError) as exc:
        print(f"pomdpsynth: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
