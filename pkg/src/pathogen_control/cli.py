"""Command-line drivers for the sweeps, training runs and single simulations.

Every command writes CSV artifacts plus ``manifest.txt`` and the effective
``config.ini`` into the output directory.
"""
from __future__ import annotations

import argparse
import csv
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import oracle
from .config import ConfigError, RunConfig, load_config, parse_config
from .envs import RoomEnv, action_bounds
from .mesh import build_mesh
from .ppo import NonFiniteLoss, PolicyParams, policy_forward, squash, train
from .transport import SolverError

log = logging.getLogger("pathogen_control")

GENERATOR = "numpy.random.PCG64 seeded through SeedSequence(seed)"


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_manifest(out: Path, command: str, cfg: RunConfig, seeds, started: float, files):
    lines = [
        f"command: {command}",
        f"config_hash: {cfg.config_hash()}",
        f"seeds: {' '.join(str(s) for s in seeds)}",
        f"generator: {GENERATOR} (numpy {np.__version__})",
        f"python: {platform.python_version()}",
        f"wall_clock_s: {time.time() - started:.3f}",
        "files:",
        *(f"  {Path(f).relative_to(out)}" for f in files),
    ]
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    (out / "config.ini").write_text(cfg.serialize())
    return path


def _sweep_report(result: oracle.SweepResult, label: str):
    for p, j in zip(result.params, result.J):
        print(f"{label} = {p:g}: J_e = {j:.6g}")
    print(f"argmin {label} = {result.argmin:g} (J_e = {result.min_value:.6g})")


def cmd_mesh_study(cfg: RunConfig, out: Path):
    res = oracle.mesh_study(cfg.mesh_nx_values(), cfg.episode_spec("vortex"),
                            l=cfg["sweep.mesh_l"], workers=cfg["run.workers"])
    path = res.to_csv(out / "mesh_study.csv")
    _sweep_report(res, "nx")
    for n, rel in zip(res.params[1:], res.relative_changes()):
        print(f"relative change at nx = {n:g}: {rel:.3%}")
    return [path], []


def _grid(lo, hi, step):
    n = int(np.floor((hi - lo) / step + 1e-9))
    return lo + step * np.arange(n + 1)


def cmd_sweep_vortex(cfg: RunConfig, out: Path):
    ls = _grid(cfg["sweep.l_min"], cfg["sweep.l_max"], cfg["sweep.l_step"])
    res = oracle.sweep_vortex_length(ls, cfg.episode_spec("vortex"), workers=cfg["run.workers"])
    _sweep_report(res, "l")
    return [res.to_csv(out / "sweep_vortex.csv")], []


def cmd_sweep_hp(cfg: RunConfig, out: Path):
    xs = _grid(cfg["sweep.hp_min"], cfg["sweep.hp_max"], cfg["sweep.hp_step"])
    res = oracle.sweep_hp_position(xs, cfg.episode_spec("hp"), workers=cfg["run.workers"])
    _sweep_report(res, "x_hp")
    return [res.to_csv(out / "sweep_hp.csv")], []


def _train_one(job):
    cfg_text, problem, seed = job
    cfg = parse_config(cfg_text)
    env = RoomEnv(cfg.episode_spec(problem))
    curve, params = train(env, cfg.ppo_config(), cfg.total_steps(problem), seed)
    return curve, params


def cmd_train(cfg: RunConfig, out: Path, problem: str):
    base = cfg["run.seed"]
    seeds = [base + k for k in range(cfg["run.seeds"])]
    jobs = [(cfg.serialize(), problem, s) for s in seeds]
    workers = min(cfg["run.workers"] or oracle.default_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]

    tdir = out / f"train_{problem}"
    tdir.mkdir(parents=True, exist_ok=True)
    files = []
    for seed, (curve, params) in zip(seeds, results):
        path = tdir / f"curve_seed{seed}.csv"
        curve.to_csv(path)
        files.append(path)
        ckpt = tdir / f"policy_seed{seed}.npz"
        params.save(ckpt)
        files.append(ckpt)
        print(f"seed {seed}: final action {curve.mean_action[-1]:.4f}")
    agg = tdir / "aggregate.csv"
    _write_aggregate(agg, [c for c, _ in results])
    files.append(agg)
    final = np.array([c.mean_action[-1] for c, _ in results])
    print(f"final action over {len(seeds)} seeds: mean {final.mean():.4f}, std {final.std():.4f}")
    return files, seeds


def _write_aggregate(path: Path, curves):
    acts = np.array([c.mean_action for c in curves])
    rets = np.array([c.mean_episode_return for c in curves])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update", "steps", "mean_action_mean", "mean_action_std",
                    "episode_return_mean", "episode_return_std"])
        for k, (u, s) in enumerate(zip(curves[0].update, curves[0].steps)):
            r = rets[:, k]
            finite = r[np.isfinite(r)]
            rm = finite.mean() if len(finite) else float("nan")
            rs = finite.std() if len(finite) else float("nan")
            w.writerow([u, s, _fmt(acts[:, k].mean()), _fmt(acts[:, k].std()), _fmt(rm), _fmt(rs)])


def cmd_simulate(cfg: RunConfig, out: Path, snapshot_every: int, policy_path=None):
    spec = cfg.episode_spec()
    mesh = build_mesh(spec.mesh)
    bounds = action_bounds(spec.problem)
    action = cfg["run.action"]
    if action is None:
        action = 0.5 * (bounds[0] + bounds[1])
    params = PolicyParams.load(policy_path) if policy_path else None
    env = RoomEnv(spec, mesh=mesh)
    obs = env.reset(seed=cfg["run.seed"])

    sdir = out / "snapshots"
    sdir.mkdir(parents=True, exist_ok=True)
    files = list(mesh.to_csv(out))
    files.append(_snapshot(sdir, 0, env))
    series = out / "exposure.csv"
    acc_total = 0.0
    with open(series, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "action", "region_integral", "J_e"])
        w.writerow([0, _fmt(0.0), "", _fmt(env.q), _fmt(0.0)])
        while not env.done:
            if params is not None:
                a = float(squash(policy_forward(params, obs)[0][0], bounds))
            else:
                a = action
            obs, reward, done = env.step(a)
            acc_total -= reward
            w.writerow([env.t_step, _fmt(env.t_step * spec.dt), _fmt(a), _fmt(env.q), _fmt(acc_total)])
            if env.t_step % snapshot_every == 0 or done:
                files.append(_snapshot(sdir, env.t_step, env))
    files.append(series)
    print(f"J_e over [0, {spec.T:g}] s in region x <= {spec.region.xmax:g} m: {acc_total:.6g}")
    return files, [cfg["run.seed"]]


def _snapshot(directory: Path, step: int, env: RoomEnv) -> Path:
    path = directory / f"state_{step:06d}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if env.chp is None:
            w.writerow(["vertex_id", "c"])
            for k, c in enumerate(env.c):
                w.writerow([k, _fmt(c)])
        else:
            w.writerow(["vertex_id", "c", "c_hp"])
            for k, (c, h) in enumerate(zip(env.c, env.chp)):
                w.writerow([k, _fmt(c), _fmt(h)])
    return path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI configuration file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config key (repeatable); e.g. --set K=0.11")
    common.add_argument("--out", metavar="DIR", help="output directory (run.out)")
    common.add_argument("--seed", type=int, help="base random seed (run.seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pathogen-control", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("mesh-study", parents=[common], help="J_e under mesh refinement")
    sub.add_parser("sweep-vortex", parents=[common], help="J_e over the left-vortex length")
    sub.add_parser("sweep-hp", parents=[common], help="J_e over the disinfectant source position")
    p = sub.add_parser("train", parents=[common], help="train PPO agents over several seeds")
    p.add_argument("--problem", choices=("vortex", "hp"), default="vortex")
    p.add_argument("--seeds", type=int, help="number of seeds (run.seeds)")
    p = sub.add_parser("simulate", parents=[common], help="one episode with state snapshots")
    p.add_argument("--snapshot-every", type=int, metavar="K", help="steps between snapshots")
    p.add_argument("--policy", metavar="NPZ", help="act with a trained policy mean instead of run.action")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "seeds", None) is not None:
        overrides.append(f"run.seeds={args.seeds}")
    if getattr(args, "snapshot_every", None) is not None:
        overrides.append(f"run.snapshot_every={args.snapshot_every}")
    if args.command == "train":
        overrides.append(f"episode.problem={args.problem}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        if args.command == "mesh-study":
            files, seeds = cmd_mesh_study(cfg, out)
        elif args.command == "sweep-vortex":
            files, seeds = cmd_sweep_vortex(cfg, out)
        elif args.command == "sweep-hp":
            files, seeds = cmd_sweep_hp(cfg, out)
        elif args.command == "train":
            files, seeds = cmd_train(cfg, out, args.problem)
        else:
            files, seeds = cmd_simulate(cfg, out, cfg["run.snapshot_every"], args.policy)
    except (SolverError, NonFiniteLoss, ValueError, OSError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1
    manifest = write_manifest(out, args.command, cfg, seeds, started, files)
    print(f"wrote {len(files)} files and {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
