"""Command-line interface.

    bsdefilter simulate    --config run.yaml --out runs/sim
    bsdefilter train       --config run.yaml --out runs/ou16
    bsdefilter evaluate    --config run.yaml --out runs/ou16 [--filter DIR]
    bsdefilter reference   --config run.yaml --out runs/ref
    bsdefilter convergence --config run.yaml --out runs/conv

The config file is YAML; command-line flags override its values. Every
command writes ``run.json`` into the output directory with the resolved
configuration, the package version and the produced files.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing artifact.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from . import deepbsde as db
from . import evaluation as ev
from . import reference as rf
from .errors import (
    ConfigError,
    DegenerateError,
    DivergenceError,
    DomainError,
    EllipticityError,
    MissingArtifactError,
)
from .model import make_problem
from .sim import TimeGrid, save_batch, simulate_observations

log = logging.getLogger("bsdefilter")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

# Training settings of desk mode; paper mode uses the TrainConfig defaults.
DESK_TRAIN = dict(
    batches_per_epoch=200, max_epochs=10, patience=3, lr=3e-3, lr_decay=0.7, lr_min=1e-4,
    obs_pool=512, x0_std=3.0,
)
# Desk overrides per problem. Euler steps of the cubic double-well drift
# diverge for |x| beyond about 7, so its rollouts start from the process.
DESK_PROBLEM_TRAIN = {"bistable": dict(x0_std=None)}
MODE_DEFAULTS = {
    "desk": {
        "train": DESK_TRAIN,
        "eval": dict(m_eval=1000, particles=10**4, probes=16, inner_batch=128),
        "N_list": [1, 4, 16],
        "simulate_m": 1000,
    },
    "paper": {
        "train": {},
        "eval": dict(m_eval=10**4, particles=10**5, probes=64, inner_batch=256),
        "N_list": [1, 2, 4, 8, 16, 32, 64],
        "simulate_m": 10**4,
    },
}

_SECTIONS = {
    "grid": {"N", "N_list"},
    "simulate": {"m"},
    "reference": {"sequence", "kind"},
    "train": {f.name for f in dataclasses.fields(db.TrainConfig)} - {"seed"},
    "eval": {f.name for f in dataclasses.fields(ev.EvalConfig)} - {"seed"},
}
_TOP = {"problem", "problem_params", "mode", "seed"} | set(_SECTIONS)


@dataclasses.dataclass
class RunConfig:
    """Fully resolved settings of one command."""

    problem: str = "ou"
    problem_params: dict = dataclasses.field(default_factory=dict)
    mode: str = "desk"
    seed: int = 0
    N: int = 16
    N_list: list = dataclasses.field(default_factory=lambda: [1, 4, 16])
    train: db.TrainConfig = dataclasses.field(default_factory=db.TrainConfig)
    eval: ev.EvalConfig = dataclasses.field(default_factory=ev.EvalConfig)
    simulate_m: int = 1000
    reference_sequence: int = 0
    reference_kind: str | None = None

    def problem_instance(self):
        return make_problem(self.problem, **self.problem_params)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d


def _section(raw, name):
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    unknown = set(sec) - _SECTIONS[name]
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return sec


def resolve_config(raw=None, mode=None, seed=None):
    """Merge a parsed config mapping with mode defaults and flag overrides."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    mode = mode or raw.get("mode", "desk")
    if mode not in MODE_DEFAULTS:
        raise ConfigError(f"mode must be one of {sorted(MODE_DEFAULTS)}")
    defaults = MODE_DEFAULTS[mode]
    seed = int(raw.get("seed", 0) if seed is None else seed)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")

    problem = raw.get("problem", "ou")
    params = raw.get("problem_params") or {}
    if not isinstance(params, dict):
        raise ConfigError("problem_params must be a mapping")
    try:
        make_problem(problem, **params)
    except (TypeError, DomainError) as exc:
        raise ConfigError(f"bad problem settings: {exc}") from None

    grid = _section(raw, "grid")
    n_list = [int(n) for n in grid.get("N_list", defaults["N_list"])]
    N = int(grid.get("N", 16))
    if N < 1 or any(n < 1 for n in n_list):
        raise ConfigError("N values must be positive")

    try:
        per_problem = DESK_PROBLEM_TRAIN.get(problem, {}) if mode == "desk" else {}
        train = db.TrainConfig(
            **{**defaults["train"], **per_problem, **_section(raw, "train"), "seed": seed}
        )
        # the evaluation data gets its own seed so it never overlaps training data
        evalc = ev.EvalConfig(**{**defaults["eval"], **_section(raw, "eval"), "seed": seed + 1})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    sim = _section(raw, "simulate")
    ref = _section(raw, "reference")
    cfg = RunConfig(
        problem=problem,
        problem_params=dict(params),
        mode=mode,
        seed=seed,
        N=N,
        N_list=n_list,
        train=train,
        eval=evalc,
        simulate_m=int(sim.get("m", defaults["simulate_m"])),
        reference_sequence=int(ref.get("sequence", 0)),
        reference_kind=ref.get("kind", evalc.reference),
    )
    if cfg.simulate_m < 1:
        raise ConfigError("simulate.m must be >= 1")
    return cfg


def load_config(path=None, mode=None, seed=None):
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return resolve_config(raw, mode, seed)


# -- commands -----------------------------------------------------------------------

def _reference(cfg, prob):
    return rf.make_reference(
        prob, cfg.reference_kind, particles=cfg.eval.particles, seed=cfg.seed + 2
    )


def cmd_simulate(cfg, args):
    prob = cfg.problem_instance()
    grid = TimeGrid.for_problem(prob, cfg.N)
    batch = simulate_observations(prob, grid, cfg.simulate_m, cfg.seed)
    path = os.path.join(args.out, "batch.bin")
    save_batch(path, batch)
    print(f"wrote {path}: M={batch.m} K={grid.K} N={grid.N} d={prob.dim}")
    print(f"  x0 mean {batch.x0.mean():+.4f} var {batch.x0.var():.4f}")
    print(f"  dw var / tau {batch.dw.var() / grid.tau:.4f}")
    for k in range(grid.K):
        o = batch.obs[:, k]
        print(f"  o_{k + 1} mean {o.mean():+.4f} var {o.var():.4f}")
    return [path]


def cmd_train(cfg, args):
    prob = cfg.problem_instance()
    grid = TimeGrid.for_problem(prob, cfg.N)
    out = os.path.join(args.out, "filter")
    tf = db.train_filter(prob, grid, cfg.train, out_dir=out)
    for k, losses in enumerate(tf.losses):
        last = f"{losses[-1]:.4e}" if losses else "n/a"
        print(f"step {k}: {len(losses)} epochs, final loss {last}")
    return [out]


def cmd_evaluate(cfg, args):
    tf = db.load_filter(args.filter or os.path.join(args.out, "filter"))
    if tf.num_steps < tf.grid.K:
        raise MissingArtifactError(f"filter has {tf.num_steps} of {tf.grid.K} steps trained")
    rep = ev.evaluate_filter(tf, cfg.eval, _reference(cfg, tf.problem), log=log.info)
    for k in range(len(rep.e)):
        print(f"k={k + 1} t={rep.times[k]:.2f} e_k={rep.e[k]:.6f} E_k={rep.E_steps[k]:.6f}")
    print(f"E={rep.E:.6f}")
    return ev.write_reports(args.out, [rep])


def cmd_reference(cfg, args):
    prob = cfg.problem_instance()
    obs = ev.evaluation_observations(prob, cfg.reference_sequence + 1, cfg.eval.seed)
    x = cfg.eval.x_grid
    dens = _reference(cfg, prob).densities(obs, x)
    path = os.path.join(args.out, "reference.csv")
    rf.write_density_csv(path, x, dens, seq=cfg.reference_sequence)
    dz = x[1] - x[0]
    for k in range(dens.shape[1]):
        print(f"k={k + 1} mass {np.sum(dens[cfg.reference_sequence, k]) * dz:.6f}")
    return [path]


def cmd_convergence(cfg, args):
    if len(set(cfg.N_list)) < 2:
        raise ConfigError("convergence needs at least two distinct N values")
    prob = cfg.problem_instance()
    obs = ev.evaluation_observations(prob, cfg.eval.m_eval, cfg.eval.seed)
    t0 = time.perf_counter()
    ref_dens = _reference(cfg, prob).densities(obs, cfg.eval.x_grid)
    log.info("reference densities in %.1fs", time.perf_counter() - t0)
    reports = []
    for N in sorted(set(cfg.N_list)):
        grid = TimeGrid.for_problem(prob, N)
        t0 = time.perf_counter()
        tf = db.train_filter(prob, grid, cfg.train, out_dir=os.path.join(args.out, f"filter_N{N}"))
        log.info("N=%d trained in %.1fs", N, time.perf_counter() - t0)
        rep = ev.evaluate_filter(tf, cfg.eval, obs=obs, ref_densities=ref_dens, log=log.info)
        reports.append(rep)
        print(f"N={N}: e_K={rep.e_final:.6f} E={rep.E:.6f}")
    table = ev.convergence_table(reports)
    print(f"slope e_K {table.slope_e:+.4f}  slope E {table.slope_E:+.4f}")
    return ev.write_reports(args.out, reports, table)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "reference": cmd_reference,
    "convergence": cmd_convergence,
}


def _sha256(path):
    if os.path.isdir(path):
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def write_manifest(out_dir, command, cfg, outputs, seconds, argv):
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
        "seconds": round(seconds, 3),
    }
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise ConfigError("--threads must be positive")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl is not installed; --threads has no effect")
        return None
    return threadpool_limits(limits=n)


def build_parser():
    p = argparse.ArgumentParser(prog="bsdefilter", description="Deep BSDE filtering experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML config file")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        s.add_argument("--mode", choices=sorted(MODE_DEFAULTS), help="desk or paper scale")
        s.add_argument("--threads", type=int, help="cap on BLAS threads")
        s.add_argument("-v", "--verbose", action="store_true", help="log training progress")
        if name == "evaluate":
            s.add_argument("--filter", help="trained filter directory (default OUT/filter)")
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        _limit_threads(args.threads)
        cfg = load_config(args.config, args.mode, args.seed)
        try:
            os.makedirs(args.out, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {args.out}: {exc}") from None
        t0 = time.perf_counter()
        outputs = COMMANDS[args.command](cfg, args)
        write_manifest(args.out, args.command, cfg, outputs, time.perf_counter() - t0, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DomainError, DivergenceError, DegenerateError, EllipticityError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PermissionError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
