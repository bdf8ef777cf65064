"""Command-line front end: ``stacklq run config.json``.

Exit status: 0 success, 2 invalid configuration, 3 violated structural
assumption, 4 blow-up of an integration or simulation.  Every CSV file has
a header row; floats are written in shortest round-trip form, so reruns
with the same seed produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import _numba
from .config import RunConfig, load_config
from .errors import AssumptionViolated, DegenerateFit, NonFinite, StackLQError, ValidationError
from .game_model import LEVEL_NAMES, TimeGrid

EXIT_OK, EXIT_VALIDATION, EXIT_ASSUMPTION, EXIT_BLOWUP = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def fmt(x) -> str:
    """Shortest round-trip decimal form of a float."""
    return repr(float(x))


def _clean(obj):
    """Convert numpy scalars/arrays to plain JSON types (floats stay exact)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    return obj


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def matrix_columns(prefix: str, shape) -> list:
    return [f"{prefix}_{i}_{j}" for i in range(shape[0]) for j in range(shape[1])]


def write_riccati(path: Path, grid: TimeGrid, named_paths: dict) -> None:
    header = ["node", "t"]
    for name, p in named_paths.items():
        header += matrix_columns(name, p.shape)
    rows = []
    for k in range(grid.n_steps + 1):
        row = [k, grid.time(k)]
        for p in named_paths.values():
            row += [float(v) for v in p[k].ravel()]
        rows.append(row)
    write_csv(path, header, rows)


def write_paths(path: Path, ensemble, labels, n_out: int, u1_names, u2_names) -> None:
    grid = ensemble.grid
    header = ["path", "node", "t"]
    for level in LEVEL_NAMES:
        header += [f"{lab}_{level}" for lab in labels]
    header += list(u1_names) + list(u2_names)
    rows = []
    n_out = min(n_out, ensemble.n_paths)
    for p in range(n_out):
        pid = int(ensemble.path_ids[p])
        for k in range(grid.n_steps + 1):
            row = [pid, k, grid.time(k)]
            for level in range(4):
                row += [float(v) for v in ensemble.level(level)[p, k]]
            row += [float(v) for v in ensemble.u1[p, k]] + [float(v) for v in ensemble.u2[p, k]]
            rows.append(row)
    write_csv(path, header, rows)


def write_summary(path: Path, ensemble, u1_names, u2_names) -> None:
    grid = ensemble.grid
    n = ensemble.n
    header = ["node", "t"]
    for level in LEVEL_NAMES:
        header += [f"mean_x{j}_{level}" for j in range(n)]
    header += [f"sd_x{j}" for j in range(n)]
    header += [f"mean_{u}" for u in u1_names] + [f"mean_{u}" for u in u2_names]
    means = [ensemble.level(lv)[:, :, :n].mean(axis=0) for lv in range(4)]
    sd = ensemble.x.std(axis=0, ddof=1)
    mu1 = ensemble.u1.mean(axis=0)
    mu2 = ensemble.u2.mean(axis=0)
    rows = []
    for k in range(grid.n_steps + 1):
        row = [k, grid.time(k)]
        for m in means:
            row += [float(v) for v in m[k]]
        row += [float(v) for v in sd[k]]
        row += [float(v) for v in mu1[k]] + [float(v) for v in mu2[k]]
        rows.append(row)
    write_csv(path, header, rows)


def failure_record(exc: Exception) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("t", "which", "node", "condition", "path"):
        v = getattr(exc, attr, None)
        if v is not None:
            rec[attr] = v
    return rec


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------

def _stationarity(spec, L, system, cfg: RunConfig, directions) -> dict:
    from .equilibrium import stationarity_test
    out = {}
    for d in directions:
        try:
            rep = stationarity_test(spec, None, L, d, cfg.perturbation.epsilons,
                                    cfg.perturbation.n_paths, cfg.perturbation_seed,
                                    system=system)
            out[d.player] = rep.to_dict()
        except DegenerateFit as exc:
            out[d.player] = {"pass": False, "error": str(exc)}
    return out


def run_cid(cfg: RunConfig) -> int:
    from .equilibrium import Direction, evaluate_cost
    from .filtering_sim import closed_loop_system, simulate_cid_closed_loop, tower_check
    from .riccati_solvers import solve_cid

    spec, grid, out = cfg.spec, cfg.grid, cfg.output_dir
    L = solve_cid(spec, grid, model=cfg.model)
    named = {"P": L.follower}
    if L.Pi is not None:
        named["Pi"] = L.Pi
    named.update({f"Pcal{j + 1}": b for j, b in enumerate(L.blocks)})
    write_riccati(out / "riccati.csv", grid, named)

    system = closed_loop_system(spec, L)
    ens = simulate_cid_closed_loop(spec, None, L, cfg.sim.n_paths, cfg.sim.seed, system=system)
    m = L.dim
    labels = [f"X{j}" for j in range(m)]
    u1n = [f"u1_{a}" for a in range(spec.k1)]
    u2n = [f"u2_{b}" for b in range(spec.k2)]
    write_paths(out / "paths.csv", ens, labels, cfg.sim.n_output_paths, u1n, u2n)
    write_summary(out / "summary.csv", ens, u1n, u2n)

    tower = tower_check(ens)
    ver = {"mode": "cid", "model": cfg.model, "n_paths": cfg.sim.n_paths,
           "seed": cfg.sim.seed, "tower": tower.to_dict(),
           "costs": {"follower": evaluate_cost(ens, "follower", spec).to_dict(),
                     "leader": evaluate_cost(ens, "leader", spec).to_dict()}}
    passed = tower.passed
    if cfg.perturbation is not None:
        dirs = [Direction.on_state("follower", spec, m), Direction.on_state("leader", spec, m)]
        ver["stationarity"] = _stationarity(spec, L, system, cfg, dirs)
        passed = passed and all(r["pass"] for r in ver["stationarity"].values())
    ver["pass"] = passed
    write_json(out / "verification.json", ver)
    return EXIT_OK


def _fbsde_dict(fb) -> dict:
    def forms(d):
        return {str(k): np.asarray(v) for k, v in sorted(d.items(), key=lambda kv: str(kv[0]))}
    return {"dim": fb.dim, "terminal": fb.terminal, "drift_x": forms(fb.drift_x),
            "drift_y": forms(fb.drift_y), "diff_x": forms(fb.diff_x),
            "diff_const": forms(fb.diff_const), "gen_x": forms(fb.gen_x),
            "gen_y": forms(fb.gen_y), "gen_z": forms(fb.gen_z)}


def _sigma_rows(k: int, t: float, sig) -> list:
    rows = []
    for i in (1, 2, 3):
        for level, M in sorted(sig.sigma[i].items()):
            for r in range(M.shape[0]):
                for c in range(M.shape[1]):
                    rows.append([k, t, i, LEVEL_NAMES[level], r, c, float(M[r, c])])
    return rows


def run_general(cfg: RunConfig) -> int:
    from .general_assembly import compute_sigma_chain, leader_blocks_at
    from .riccati_solvers import attempt_general_leader_system, solve_follower_riccati

    spec, grid, out = cfg.spec, cfg.grid, cfg.output_dir
    sigma_header = ["node", "t", "noise", "level", "row", "col", "value"]
    try:
        P = solve_follower_riccati(spec, grid)
    except (AssumptionViolated, NonFinite) as exc:
        write_json(out / "failure.json", {"stage": "follower", **failure_record(exc)})
        raise
    ends = {"t0": leader_blocks_at(spec, P[0], 0.0, node=0),
            "T": leader_blocks_at(spec, P[-1], grid.horizon_T, node=grid.n_steps)}
    write_json(out / "blocks.json", {name: {"t": (0.0 if name == "t0" else grid.horizon_T),
                                            **_fbsde_dict(b.fbsde)}
                                     for name, b in ends.items()})
    res = attempt_general_leader_system(spec, grid)
    rows = []
    if res.ok:
        for k in range(grid.n_steps + 1):
            blk = leader_blocks_at(spec, P[k], grid.time(k), node=k)
            sig = compute_sigma_chain(blk, [b[k] for b in res.blocks], grid.time(k),
                                      node=k, check=False)
            rows += _sigma_rows(k, grid.time(k), sig)
        write_csv(out / "sigma.csv", sigma_header, rows)
        named = {"P": res.follower}
        named.update({f"Pcal{j + 1}": b for j, b in enumerate(res.blocks)})
        write_riccati(out / "riccati.csv", grid, named)
        return EXIT_OK
    # terminal-node representation is always available
    blk = ends["T"]
    m = blk.fbsde.dim
    term = [blk.fbsde.terminal] + [np.zeros((m, m))] * 3
    try:
        sig = compute_sigma_chain(blk, term, grid.horizon_T, node=grid.n_steps, check=False)
        rows = _sigma_rows(grid.n_steps, grid.horizon_T, sig)
    except np.linalg.LinAlgError:
        rows = []
    write_csv(out / "sigma.csv", sigma_header, rows)
    write_json(out / "failure.json", {"stage": "leader", **failure_record(res.failure)})
    raise res.failure


def run_principal_agent(cfg: RunConfig) -> int:
    from .filtering_sim import closed_loop_system, simulate_cid_closed_loop, tower_check
    from .principal_agent import (as_leader_system, default_directions, preference_values,
                                  solve_pa)

    params, grid, out = cfg.spec, cfg.grid, cfg.output_dir
    sol = solve_pa(params, grid)
    header = ["node", "t"]
    for name in ("e", "c", "s", "d"):
        header += [f"{name}_{v}" for v in sol.gains[name].names]
    rows = []
    for k in range(grid.n_steps + 1):
        row = [k, grid.time(k)]
        for name in ("e", "c", "s", "d"):
            row += [float(v) for v in sol.gains[name].values[k]]
        rows.append(row)
    write_csv(out / "gains.csv", header, rows)

    L = as_leader_system(sol)
    system = closed_loop_system(sol.spec, L)
    ens = simulate_cid_closed_loop(sol.spec, None, L, cfg.sim.n_paths, cfg.sim.seed,
                                   system=system)
    write_paths(out / "paths.csv", ens, ["y", "m", "p1", "p2"], cfg.sim.n_output_paths,
                ["e", "c"], ["s", "d"])
    costs = preference_values(ens)
    write_json(out / "costs.json", {"convention": "preference values (larger is better)",
                                    "n_paths": cfg.sim.n_paths, "seed": cfg.sim.seed,
                                    **{k: v.to_dict() for k, v in costs.items()}})
    tower = tower_check(ens)
    ver = {"mode": "principal_agent", "tower": tower.to_dict()}
    passed = tower.passed
    if cfg.perturbation is not None:
        ver["stationarity"] = _stationarity(sol.spec, L, system, cfg, default_directions())
        passed = passed and all(r["pass"] for r in ver["stationarity"].values())
    ver["pass"] = passed
    write_json(out / "verification.json", ver)
    return EXIT_OK


RUNNERS = {"cid": run_cid, "general": run_general, "principal_agent": run_principal_agent}


def run(cfg: RunConfig) -> int:
    """Execute one configuration; exceptions propagate to :func:`main`."""
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError([f"output_dir {cfg.output_dir} is not writable: "
                               f"{exc.strerror}"]) from exc
    if not os.access(cfg.output_dir, os.W_OK):
        raise ValidationError([f"output_dir {cfg.output_dir} is not writable"])
    return RUNNERS[cfg.mode](cfg)


def _report(kind: str, exc: Exception) -> None:
    if isinstance(exc, ValidationError):
        for m in exc.messages:
            print(f"error: {kind}: {m}", file=sys.stderr)
    else:
        print(f"error: {kind}: {exc}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stacklq", description=(
        "Solve, simulate and verify leader-follower LQ games with overlapping information."))
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one JSON configuration")
    r.add_argument("config", help="path to the configuration file")
    r.add_argument("--output-dir", help="override the configured output directory")
    r.add_argument("--threads", type=int, help="worker threads (default: $STACKLQ_THREADS)")
    r.add_argument("--seed-override", type=int, help="replace every configured seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None and os.environ.get("STACKLQ_THREADS"):
        try:
            threads = int(os.environ["STACKLQ_THREADS"])
        except ValueError:
            print("error: validation: STACKLQ_THREADS must be an integer", file=sys.stderr)
            return EXIT_VALIDATION
    if threads is not None and threads < 1:
        print("error: validation: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = load_config(args.config)
        if args.output_dir:
            cfg = RunConfig(cfg.mode, cfg.grid, cfg.spec, cfg.sim, cfg.perturbation,
                            Path(args.output_dir), cfg.model, cfg.raw)
        if args.seed_override is not None:
            if args.seed_override < 0 or args.seed_override >= 2 ** 64:
                raise ValidationError(["--seed-override must be an unsigned 64-bit integer"])
            cfg = cfg.with_seed(args.seed_override)
        _numba.set_threads(threads)
        return run(cfg)
    except ValidationError as exc:
        _report("validation", exc)
        return EXIT_VALIDATION
    except AssumptionViolated as exc:
        _report("assumption", exc)
        return EXIT_ASSUMPTION
    except NonFinite as exc:
        _report("blow-up", exc)
        return EXIT_BLOWUP
    except StackLQError as exc:
        _report("error", exc)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
