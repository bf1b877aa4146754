"""Multi-seed 2D comparison of the three federated couplings, with a result cache.

The cache key covers the config digest, the seed list and a hash of every
module on the training and evaluation path, so a code change in any of
them forces a rerun.  Modules are hashed by their parsed AST with
docstrings removed, which leaves comments and prose out of the key.
"""

from __future__ import annotations

import ast
import csv
import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from .config import ExperimentConfig
from .data import make_rng, sample
from .federation import run_experiment
from .metrics import w2_vs_nfe

COUPLINGS = ("vanilla", "local_ot", "global_ot")
FIELDS = ("coupling", "seed", "nfe", "w2", "straightness", "rounds", "wall_s")
_HELDOUT = 7
_NUMERIC_MODULES = ("config", "data", "errors", "experiments", "federation", "flow", "metrics", "nn",
                    "ot", "semidual")


def _strip_docstrings(tree: ast.AST) -> ast.AST:
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return tree


def package_hash() -> str:
    h = hashlib.sha256()
    for name in _NUMERIC_MODULES:
        tree = ast.parse((Path(__file__).parent / f"{name}.py").read_text())
        h.update(name.encode())
        h.update(ast.dump(_strip_docstrings(tree)).encode())
    return h.hexdigest()


def cache_key(cfg: ExperimentConfig, seeds: Sequence[int], couplings: Sequence[str]) -> str:
    payload = {"config": cfg.digest(), "seeds": list(seeds), "couplings": list(couplings),
               "package": package_hash()}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def run_one(cfg: ExperimentConfig, coupling: str, seed: int) -> list[dict]:
    spec = replace(cfg.spec, coupling=coupling, seed=seed)
    t0 = time.perf_counter()
    sim = run_experiment(spec)
    wall = time.perf_counter() - t0
    held = sample(spec.target, cfg.eval.n_target, make_rng(seed, _HELDOUT))
    reports = w2_vs_nfe(sim.state.theta, spec.source, held, cfg.eval.nfe, cfg.eval.n_eval,
                        cfg.eval.scheme, seed=seed)
    return [dict(coupling=coupling, seed=seed, nfe=r.nfe, w2=r.w2, straightness=r.straightness,
                 rounds=spec.rounds, wall_s=wall) for r in reports]


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_rows(path) -> list[dict]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"], r["nfe"], r["rounds"] = int(r["seed"]), int(r["nfe"]), int(r["rounds"])
        r["w2"], r["straightness"], r["wall_s"] = float(r["w2"]), float(r["straightness"]), float(r["wall_s"])
    return rows


def run_comparison(cfg: ExperimentConfig, seeds: Sequence[int], couplings: Sequence[str] = COUPLINGS,
                   cache_dir=None, force: bool = False,
                   log: Callable[[str], None] | None = None) -> list[dict]:
    """W2 and straightness rows for every (coupling, seed, nfe).

    With ``cache_dir``, results are stored as ``<key>.csv`` and reused while
    the key matches.
    """
    key = cache_key(cfg, seeds, couplings)
    path = Path(cache_dir) / f"{key[:16]}.csv" if cache_dir is not None else None
    if path is not None and path.exists() and not force:
        if log:
            log(f"reusing cached results {path}")
        return read_rows(path)
    rows = []
    for seed in seeds:
        for coupling in couplings:
            part = run_one(cfg, coupling, seed)
            if log:
                w = " ".join(f"{r['w2']:.3f}" for r in part)
                log(f"seed {seed} {coupling:<9} w2 {w} straightness {part[-1]['straightness']:.4f} "
                    f"({part[0]['wall_s']:.0f}s)")
            rows.extend(part)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_rows(path, rows)
    return rows


def wins(rows, better: str, worse: str, nfe: int, key: str = "w2") -> dict[int, bool]:
    """Per seed: is ``better`` strictly below ``worse`` on ``key`` at ``nfe``."""
    table = {(r["coupling"], r["seed"]): r[key] for r in rows if r["nfe"] == nfe}
    seeds = sorted({s for _, s in table})
    return {s: table[(better, s)] < table[(worse, s)] for s in seeds}
