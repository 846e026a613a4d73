"""Command-line experiment runner.

    distrl ddp --mdp model.json --out results/
    distrl convergence --random 5,2,0.9,0 --n 10,100,1000,10000 --reps 20
    distrl coverage --random 5,2,0.9,0 --n 100 --reps 200 --alpha 0.05
    distrl validate model.json

Every CSV is written with a ``<name>.meta.json`` sidecar that echoes the
configuration, the package version and the seed.  Outputs depend only on the
configuration, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .bellman import BellmanOperator, ddp, sup_w1
from .experiments import (
    BALL_KINDS,
    FUNCTIONALS,
    Context,
    convergence_replicate,
    coverage_replicate,
    make_context,
    replicate_seed,
)
from .mdp import MdpParseError, MdpValidationError, Policy, TabularMdp, load_mdp, random_mdp
from .measures import ReturnGrid

__all__ = ["ConfigError", "ExperimentConfig", "main"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    mdp: str | None = None
    random: tuple[int, int, float, int] = (5, 2, 0.9, 0)
    grid_k: int = 1000
    n: tuple[float, ...] = (100,)
    reps: int = 20
    alpha: float = 0.05
    mc_draws: int = 1000
    tail_tol: float = 1e-5
    ddp_tol: float = 1e-8
    max_iters: int = 10_000
    seed: int = 0
    out: str = "results"
    gammas: tuple[float, ...] | None = None
    state: int = 0

    def __post_init__(self) -> None:
        S, A, gamma, _ = self.random
        checks = [
            (S >= 1 and A >= 1, "random MDP needs S >= 1 and A >= 1"),
            (0.0 < gamma < 1.0, "random MDP gamma must lie in (0, 1)"),
            (self.grid_k >= 1, "grid-k must be positive"),
            (len(self.n) > 0 and all(v >= 1 for v in self.n), "every n must be a positive integer or inf"),
            (all(math.isinf(v) or float(v).is_integer() for v in self.n), "every n must be an integer or inf"),
            (self.reps >= 1, "reps must be positive"),
            (0.0 < self.alpha < 1.0, "alpha must lie in (0, 1)"),
            (self.mc_draws >= 2, "mc-draws must be at least 2"),
            (self.tail_tol > 0 and self.ddp_tol > 0, "tolerances must be positive"),
            (self.max_iters >= 1, "max-iters must be positive"),
            (self.state >= 0, "state must be nonnegative"),
            (self.gammas is None or all(0.0 < g < 1.0 for g in self.gammas), "gammas must lie in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def load(self) -> tuple[TabularMdp, Policy]:
        if self.mdp is not None:
            return load_mdp(self.mdp)
        S, A, gamma, seed = self.random
        return random_mdp(int(S), int(A), float(gamma), int(seed))

    def to_json(self) -> dict:
        d = asdict(self)
        d["n"] = [_n_json(v) for v in self.n]
        return d


def _n_json(v: float) -> int | str:
    return "inf" if math.isinf(v) else int(v)


# -- parsing ----------------------------------------------------------------


def _n_list(text: str) -> tuple[float, ...]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        out.append(math.inf if tok in ("inf", "infinity") else float(int(tok)))
    return tuple(out)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(","))


def _random_spec(text: str) -> tuple[int, int, float, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("expected S,A,gamma,seed")
    return int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])


_CONVERTERS: dict[str, Callable[[Any], Any]] = {
    "random": lambda v: _random_spec(v) if isinstance(v, str) else tuple(v),
    "n": lambda v: _n_list(v if isinstance(v, str) else ",".join(map(str, v if isinstance(v, list) else [v]))),
    "gammas": lambda v: _float_list(v) if isinstance(v, str) else tuple(float(x) for x in v),
}


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    # Defaults are None so flags given on the command line can be told apart
    # from values that come from --config or the dataclass defaults.
    src = p.add_mutually_exclusive_group()
    src.add_argument("--mdp", help="MDP JSON file")
    src.add_argument("--random", type=_random_spec, metavar="S,A,GAMMA,SEED", help="random MDP (default 5,2,0.9,0)")
    p.add_argument("--config", help="JSON file with any of these options; flags take precedence")
    p.add_argument("--grid-k", type=int, help="grid size K (K+1 atoms, default 1000)")
    p.add_argument("--n", type=_n_list, help="comma list of samples per state-action pair; 'inf' uses the true model")
    p.add_argument("--reps", type=int, help="replicates per setting")
    p.add_argument("--alpha", type=float, help="miscoverage level")
    p.add_argument("--mc-draws", type=int, help="Monte-Carlo draws for plug-in quantiles")
    p.add_argument("--tail-tol", type=float, help="Neumann tail tolerance")
    p.add_argument("--ddp-tol", type=float, help="DDP stopping tolerance (sup-state W1 step)")
    p.add_argument("--max-iters", type=int, help="DDP iteration cap")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory (default ./results)")
    p.add_argument("--gammas", type=_float_list, help="comma list of discounts overriding the MDP's")
    p.add_argument("--state", type=int, help="state for confidence sets (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distrl", description="Distributional policy evaluation experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("ddp", "fixed point by distributional dynamic programming"),
        ("convergence", "error of the empirical fixed point versus n"),
        ("coverage", "coverage of confidence sets and functional intervals"),
    ]:
        _add_experiment_flags(sub.add_parser(name, help=help_text))
    v = sub.add_parser("validate", help="check an MDP file")
    v.add_argument("path")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    names = {f.name for f in fields(ExperimentConfig)}
    values: dict[str, Any] = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, val in raw.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _CONVERTERS.get(key, lambda x: x)(val)
    for key in names:
        val = getattr(args, key, None)
        if val is not None:
            values[key] = val
    if getattr(args, "random", None) is not None:
        values.pop("mdp", None)
    elif getattr(args, "mdp", None) is not None:
        values.pop("random", None)
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# -- output -----------------------------------------------------------------


def write_csv(path: Path, header: Sequence[str], rows, config: ExperimentConfig, command: str, extra=None) -> None:
    """RFC-4180 CSV (CRLF line ends, repr floats) plus a ``.meta.json`` sidecar."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        writer.writerows(rows)
    meta = {"command": command, "version": __version__, "seed": config.seed, "config": config.to_json()}
    meta.update(extra or {})
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- worker pool ------------------------------------------------------------


def worker_count() -> int:
    raw = os.environ.get("DISTRL_THREADS", "")
    try:
        cap = int(raw) if raw else os.cpu_count() or 1
    except ValueError:
        raise ConfigError(f"DISTRL_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, os.cpu_count() or 1))


_CTX: dict[int, Context] = {}


def _init_worker(contexts: dict[int, Context]) -> None:
    _CTX.update(contexts)


def _call(task):
    fn, gi, kwargs = task
    return fn(_CTX[gi], **kwargs)


def run_tasks(contexts: dict[int, Context], tasks: list) -> list:
    """Run ``fn(context, **kwargs)`` for each task; results keep task order."""
    workers = min(worker_count(), len(tasks))
    if workers <= 1:
        _init_worker(contexts)
        return [_call(t) for t in tasks]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(contexts,)) as pool:
        return list(pool.map(_call, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


# -- commands ---------------------------------------------------------------


def _contexts(config: ExperimentConfig) -> tuple[list[float], dict[int, Context]]:
    mdp, policy = config.load()
    if not 0 <= config.state < mdp.num_states:
        raise ConfigError(f"state {config.state} out of range for {mdp.num_states} states")
    gammas = list(config.gammas) if config.gammas else [mdp.gamma]
    ctxs = {
        gi: make_context(mdp.with_gamma(g), policy, config.grid_k, config.ddp_tol, config.max_iters)
        for gi, g in enumerate(gammas)
    }
    return gammas, ctxs


def cmd_ddp(config: ExperimentConfig) -> int:
    mdp, policy = config.load()
    grid = ReturnGrid.from_k(config.grid_k, mdp.gamma)
    op = BellmanOperator.from_mdp(mdp, policy, grid)
    iterates: list[np.ndarray] = []
    eta, trace = ddp(op, tol=config.ddp_tol, max_iters=config.max_iters, callback=iterates.append)
    out = Path(config.out)
    extra = {"converged": trace.converged, "iterations": trace.iterations}
    rows = (
        [s, k, repr(float(grid.atoms[k])), repr(float(eta.weights[s, k]))]
        for s in range(op.num_states)
        for k in range(grid.num_atoms)
    )
    write_csv(out / "ddp.csv", ["state", "k", "x", "weight"], rows, config, "ddp", extra)
    trace_rows = (
        [i + 1, repr(step), repr(sup_w1(w, eta.weights, grid.delta))]
        for i, (step, w) in enumerate(zip(trace.steps, iterates))
    )
    write_csv(out / "ddp_trace.csv", ["iteration", "step_sup_w1", "sup_w1_to_final"], trace_rows, config, "ddp", extra)
    status = "converged" if trace.converged else "INCOMPLETE (max-iters reached)"
    print(f"ddp: {status} after {trace.iterations} iterations; wrote {out / 'ddp.csv'}")
    return 0


def cmd_convergence(config: ExperimentConfig) -> int:
    gammas, ctxs = _contexts(config)
    keys = [(gi, ni, r) for gi in range(len(gammas)) for ni in range(len(config.n)) for r in range(config.reps)]
    tasks = [
        (convergence_replicate, gi, {"n": config.n[ni], "seed": replicate_seed(config.seed, gi, ni, r)})
        for gi, ni, r in keys
    ]
    results = run_tasks(ctxs, tasks)
    rows, trace_rows = [], []
    for (gi, ni, r), res in zip(keys, results):
        g, n = repr(gammas[gi]), _n_json(config.n[ni])
        for metric, err in res["errors"].items():
            rows.append([g, n, r, metric, repr(err)])
        trace_rows.extend([g, n, r, t + 1, repr(e)] for t, e in enumerate(res["trace"]))
    for gi in range(len(gammas)):
        for ni in range(len(config.n)):
            block = results[(gi * len(config.n) + ni) * config.reps : (gi * len(config.n) + ni + 1) * config.reps]
            for kind in BALL_KINDS:
                mean = float(np.mean([res["errors"][kind.value] for res in block]))
                rows.append([repr(gammas[gi]), _n_json(config.n[ni]), "mean", kind.value, repr(mean)])
    out = Path(config.out)
    write_csv(out / "convergence.csv", ["gamma", "n", "replicate", "metric", "sup_state_error"], rows, config, "convergence")
    write_csv(
        out / "convergence_traces.csv",
        ["gamma", "n", "replicate", "iteration", "sup_w1_to_truth"],
        trace_rows,
        config,
        "convergence",
    )
    print(f"convergence: {len(keys)} replicates; wrote {out / 'convergence.csv'}")
    return 0


def cmd_coverage(config: ExperimentConfig) -> int:
    if any(math.isinf(v) for v in config.n):
        raise ConfigError("coverage needs finite n")
    gammas, ctxs = _contexts(config)
    keys = [(gi, ni, r) for gi in range(len(gammas)) for ni in range(len(config.n)) for r in range(config.reps)]
    tasks = [
        (
            coverage_replicate,
            gi,
            {
                "n": int(config.n[ni]),
                "seed": replicate_seed(config.seed, gi, ni, r),
                "state": config.state,
                "alpha": config.alpha,
                "m": config.mc_draws,
                "tail_tol": config.tail_tol,
            },
        )
        for gi, ni, r in keys
    ]
    results = run_tasks(ctxs, tasks)
    names = [k.value for k in BALL_KINDS] + list(FUNCTIONALS)
    per_rep, summary = [], []
    for (gi, ni, r), res in zip(keys, results):
        for name in names:
            covered, size = res[name]
            per_rep.append([repr(gammas[gi]), _n_json(config.n[ni]), r, name, int(covered), repr(float(size))])
    for gi in range(len(gammas)):
        for ni in range(len(config.n)):
            lo = (gi * len(config.n) + ni) * config.reps
            block = results[lo : lo + config.reps]
            for name in names:
                covered = np.array([res[name][0] for res in block], dtype=float)
                sizes = np.array([res[name][1] for res in block], dtype=float)
                summary.append(
                    [
                        repr(gammas[gi]),
                        _n_json(config.n[ni]),
                        name,
                        repr(float(covered.mean())),
                        repr(float(np.nanmean(sizes))) if np.isfinite(sizes).any() else "nan",
                        repr(float(np.nanstd(sizes))) if np.isfinite(sizes).any() else "nan",
                        config.reps,
                    ]
                )
    out = Path(config.out)
    write_csv(
        out / "coverage.csv",
        ["gamma", "n", "kind", "coverage", "mean_size", "std_size", "replicates"],
        summary,
        config,
        "coverage",
    )
    write_csv(
        out / "coverage_replicates.csv",
        ["gamma", "n", "replicate", "kind", "covered", "size"],
        per_rep,
        config,
        "coverage",
    )
    print(f"coverage: {len(keys)} replicates; wrote {out / 'coverage.csv'}")
    return 0


def cmd_validate(path: str) -> int:
    try:
        mdp, policy = load_mdp(path)
    except OSError as exc:
        print(f"invalid: cannot read {path}: {exc.strerror}", file=sys.stderr)
        return 1
    except (MdpParseError, MdpValidationError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    kinds = sorted({type(r).__name__ for row in mdp.rewards for r in row})
    print(f"valid: {path}")
    print(f"  states={mdp.num_states} actions={mdp.num_actions} gamma={mdp.gamma!r}")
    print(f"  reward types: {', '.join(kinds)}")
    print(f"  transition rows: {mdp.num_states * mdp.num_actions} probability vectors")
    return 0


_COMMANDS = {"ddp": cmd_ddp, "convergence": cmd_convergence, "coverage": cmd_coverage}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args.path)
    try:
        config = config_from_args(args)
        return _COMMANDS[args.command](config)
    except (ConfigError, MdpParseError, MdpValidationError, FileNotFoundError) as exc:
        print(f"distrl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
