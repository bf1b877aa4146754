"""Command line entry point: ``fedflow {train,sample,eval,verify}``.

Exit codes are 0 on success, 1 on runtime or numeric failure and 2 on usage,
config or input-format errors.  ``FFM_OUTPUT_DIR`` and ``FFM_SEED`` override
the output directory and master seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .checkpoint import load_state, save_state, sha256_file
from .config import ExperimentConfig, apply_env, load_config
from .data import distribution_from_dict, distribution_to_dict, make_rng, sample
from .errors import CheckpointError, ConfigError, NumericError
from .federation import RoundError, RoundReport, Simulation, run_experiment
from .flow import IntegratorCfg, integrate, trajectory_to_csv
from .metrics import w2_vs_nfe, write_eval_csv
from .nn import ParamVector, read_checkpoint
from .verify import SUITES, run_suite

log = logging.getLogger("fedflow")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# substream purposes used only by the CLI
_SAMPLE, _HELDOUT = 5, 7


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _env_seed(default: int) -> int:
    raw = os.environ.get("FFM_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"FFM_SEED must be an integer, got {raw!r}") from exc


def _checkpoint_extra(cfg: ExperimentConfig) -> dict:
    s = cfg.spec
    return {
        "algorithm": s.algorithm,
        "name": cfg.name,
        "seed": s.seed,
        "source": distribution_to_dict(s.source),
        "target": distribution_to_dict(s.target),
    }


def _load_field(path) -> tuple[ParamVector, dict]:
    try:
        params, extra = read_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    arch = params.arch
    if not arch.time_conditioned or arch.input_dim != arch.output_dim:
        raise CheckpointError(f"{path} does not hold a velocity field (arch {arch})")
    return params, extra


def _source_from(extra: dict, path):
    if "source" not in extra:
        raise CheckpointError(f"{path} records no source distribution")
    return distribution_from_dict(extra["source"])


# --- train -----------------------------------------------------------------------


def _write_manifest(out: Path, cfg: ExperimentConfig, started: str, artifacts: dict[str, Path],
                    status: str) -> Path:
    manifest = {
        "config_hash": cfg.digest(),
        "master_seed": cfg.spec.seed,
        "algorithm": cfg.spec.algorithm,
        "started": started,
        "finished": _now(),
        "status": status,
        "version": __version__,
        "output_dir": str(out),
        "artifacts": {k: str(p.relative_to(out)) for k, p in sorted(artifacts.items())},
        "sha256": {k: sha256_file(p) for k, p in sorted(artifacts.items()) if p.suffix in (".ffmp", ".npz")},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def cmd_train(args) -> int:
    cfg = apply_env(load_config(args.config))
    if args.output:
        cfg = replace(cfg, output=replace(cfg.output, dir=args.output))
    spec = cfg.spec
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    started = _now()
    extra = _checkpoint_extra(cfg)
    ckpt_dir = out / "checkpoints"

    state = None
    if args.resume:
        state = load_state(args.resume, spec)
        log.info("resuming from round %d", state.round)

    held = None
    if cfg.eval.every > 0:
        held = sample(spec.target, cfg.eval.n_target, make_rng(spec.seed, _HELDOUT))
    eval_path = out / "eval.csv"
    first_eval = [True]

    def evaluate(sim: Simulation):
        reports = w2_vs_nfe(sim.state.theta, spec.source, held, cfg.eval.nfe, cfg.eval.n_eval,
                            cfg.eval.scheme, seed=spec.seed)
        write_eval_csv(eval_path, [(cfg.name, spec.algorithm, sim.state.round, r) for r in reports],
                       append=not first_eval[0])
        first_eval[0] = False

    rounds_path = out / "rounds.csv"
    resuming = state is not None and rounds_path.exists()
    fh = open(rounds_path, "a" if resuming else "w", newline="")
    writer = csv.writer(fh)
    if not resuming:
        writer.writerow(RoundReport.FIELDS)

    def on_round(sim: Simulation, reports):
        for r in reports:
            writer.writerow(r.row())
        rnd = sim.state.round
        if cfg.output.checkpoint_every and rnd % cfg.output.checkpoint_every == 0:
            save_state(ckpt_dir / f"round_{rnd:06d}", sim.state, extra)
        if held is not None and rnd % cfg.eval.every == 0:
            evaluate(sim)
        if rnd % 500 == 0:
            log.info("round %d  loss %.4f", rnd, reports[len(sim.clients)].loss)

    t0 = time.perf_counter()
    artifacts: dict[str, Path] = {"rounds": rounds_path, "config": out / "config.yaml"}
    try:
        sim = run_experiment(spec, threads=args.threads, state=state, on_round=on_round)
    except RoundError as exc:
        fh.close()
        failed = save_state(ckpt_dir / f"failed_round_{exc.round:06d}", exc.state, extra)
        artifacts.update({f"resume_{k}": p for k, p in failed.items()})
        _write_manifest(out, cfg, started, artifacts, f"failed at round {exc.round}")
        print(f"error: {exc}; resumable state saved under {failed['theta'].parent}", file=sys.stderr)
        return EXIT_RUNTIME
    fh.close()
    final = save_state(ckpt_dir / "final", sim.state, extra)
    artifacts.update(final)
    if held is not None:
        if sim.state.round % cfg.eval.every != 0 or sim.state.round == 0:
            evaluate(sim)
        artifacts["eval"] = eval_path
    manifest = _write_manifest(out, cfg, started, artifacts, "ok")
    print(f"trained {spec.algorithm} for {sim.state.round} rounds in {time.perf_counter() - t0:.1f}s; "
          f"manifest {manifest}")
    return EXIT_OK


# --- sample ----------------------------------------------------------------------


def cmd_sample(args) -> int:
    params, extra = _load_field(args.checkpoint)
    source = _source_from(extra, args.checkpoint)
    seed = _env_seed(args.seed)
    cfg = IntegratorCfg(args.scheme, args.nfe)
    x0 = sample(source, args.n, make_rng(seed, _SAMPLE))
    t0 = time.perf_counter()
    x1, traj = integrate(params, x0, cfg, record=args.trajectory is not None)
    wall = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"x_{k + 1}" for k in range(x1.shape[1])])
        for i, row in enumerate(x1):
            w.writerow([i] + [repr(float(v)) for v in row])
    if traj is not None:
        trajectory_to_csv(traj, args.trajectory)
    print(f"sampled {args.n} points with {args.scheme} nfe={args.nfe} in {wall * 1e3:.1f} ms -> {out}")
    return EXIT_OK


# --- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    if not args.nfe:
        raise ConfigError("--nfe needs at least one value")
    params, extra = _load_field(args.checkpoint)
    seed = _env_seed(args.seed)
    if args.config:
        cfg = load_config(args.config)
        if cfg.spec.field_arch() != params.arch:
            raise CheckpointError(f"checkpoint arch {params.arch} does not match config {cfg.spec.field_arch()}")
        source, target, name = cfg.spec.source, cfg.spec.target, cfg.name
    else:
        source = _source_from(extra, args.checkpoint)
        if "target" not in extra:
            raise CheckpointError(f"{args.checkpoint} records no target; pass --config")
        target, name = distribution_from_dict(extra["target"]), extra.get("name", "eval")
    held = sample(target, args.n_target, make_rng(seed, _HELDOUT))
    reports = w2_vs_nfe(params, source, held, args.nfe, args.n_eval, args.scheme, seed=seed)
    tag = args.tag or name
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_csv(out, [(tag, extra.get("algorithm", "unknown"), int(extra.get("round", -1)), r)
                         for r in reports])
    print(f"{'nfe':>5} {'w2':>10} {'straightness':>13}")
    for r in reports:
        print(f"{r.nfe:>5} {r.w2:>10.5f} {r.straightness:>13.5f}")
    return EXIT_OK


# --- verify ----------------------------------------------------------------------


def cmd_verify(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    ok = True
    print(f"{'suite':<10} {'pass':>9}  worst")
    for name in names:
        res = run_suite(name, seed=_env_seed(args.seed))
        print(res.row())
        for dump in res.failures[: args.max_dumps]:
            print("  violation:", dump)
        ok &= res.ok
    return EXIT_OK if ok else EXIT_RUNTIME


# --- wiring ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedflow", description="Federated flow matching simulator.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run a federated training experiment from a YAML config")
    t.add_argument("config", help="experiment config (YAML)")
    t.add_argument("--threads", type=int, default=1, help="max concurrent client steps per round")
    t.add_argument("--output", help="output directory (overrides the config and FFM_OUTPUT_DIR)")
    t.add_argument("--resume", metavar="STATE_DIR", help="resume from a saved server state directory")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate samples from a velocity-field checkpoint")
    s.add_argument("checkpoint", help="theta.ffmp checkpoint")
    s.add_argument("--nfe", type=int, default=100)
    s.add_argument("--n", type=int, default=1000, help="number of samples")
    s.add_argument("--scheme", choices=("euler", "midpoint", "rk4"), default="euler")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="samples CSV path")
    s.add_argument("--trajectory", help="also write the full trajectory CSV here")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="W2 and straightness of a checkpoint at several NFEs")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="take source and target from this config instead of the checkpoint")
    e.add_argument("--nfe", type=int, nargs="*", default=[2, 5, 10, 50])
    e.add_argument("--n-eval", type=int, default=2048)
    e.add_argument("--n-target", type=int, default=2048)
    e.add_argument("--scheme", choices=("euler", "midpoint", "rk4"), default="euler")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--tag", help="tag column value (default: experiment name)")
    e.add_argument("--out", required=True, help="evaluation CSV path")
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("verify", help="run an oracle suite")
    v.add_argument("suite", choices=SUITES + ("all",))
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--max-dumps", type=int, default=5, help="violating instances to print")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
