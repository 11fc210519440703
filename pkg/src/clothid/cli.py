"""Command-line pipeline: msn <command> [options].

Exit codes: 0 success, 1 usage error, 2 data error (bad config, missing or
corrupt files), 3 numerical failure (divergence, aborted training).  Logs go
to stderr; every data product goes to a file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import femsrc
from .datagen import (build_clipset, build_source, generate_rollouts,
                      sample_boundary_condition, sample_initial_condition)
from .io import (MAGIC, FormatError, ModelFile, RolloutFile, atomic_write, canonical_json, engine_name,
                 file_to_source_rollout, file_to_target, read_clipset_file, read_manifest,
                 read_model_file, read_rollout_file, source_rollout_to_file, target_to_file,
                 write_clipset_file, write_manifest, write_model_file, write_rollout_file)
from .lattice import CLASS_NAMES, GridSpec, build_lattice, rest_layout
from .metrics import motion_rmse, replay_target, rmse_params, write_motion_csv, write_params_csv
from .resample import TargetTrajectory, assign_masses, build_map, resample_rollout
from .simcore import (ColliderSet, ExternalForceSpec, Plane, SimState, SimulationDiverged, Sphere,
                      kinetic_energy, net_force, resolve_contacts, step_semi_implicit)
from .train import TrainingAborted, TrainState, dual_pass_train, single_pass_train

log = logging.getLogger("clothid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_ENV = "MSN_CONFIG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> cfgmod.PipelineConfig:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if not path:
        return cfgmod.PipelineConfig()
    if not Path(path).exists():
        raise cfgmod.ConfigError(f"config file {path} not found")
    return cfgmod.load(path)


def _config_hash(cfg: cfgmod.PipelineConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()[:16]


def _out_dir(args, cfg, sub: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.output.dir) / sub


# ----------------------------------------------------------------- commands

def cmd_gen_source(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg, "source")
    spec = cfg.rollouts
    if args.count is not None:
        spec = replace(spec, count=args.count)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    first = args.first_index
    model = build_source(cfg.source)
    log.info("generating %d %s rollouts (engine %s, seed %d)", spec.count, cfg.source.kind,
             engine_name(cfg.source.kind), spec.seed)
    rollouts = generate_rollouts(cfg.source, spec, model=model,
                                 indices=range(first, first + spec.count))
    if not rollouts:
        raise SimulationDiverged("every rollout diverged")
    entries = []
    for ro in rollouts:
        name = f"rollout_{ro.index:05d}.msnr"
        write_rollout_file(out / name, source_rollout_to_file(ro))
        entries.append({"file": name, "index": ro.index, "frames": ro.n_frames})
    extra = {"type": "source", "kind": cfg.source.kind, "engine": engine_name(cfg.source.kind),
             "seed": spec.seed, "spec_hash": cfg.source.spec_hash(), "dt": cfg.source.dt,
             "dropped": spec.count - len(rollouts)}
    if model.net is not None:
        truth = ModelFile(model.net, model.params, {"type": "source", "spec_hash": cfg.source.spec_hash()})
        write_model_file(out / "source_model.json", truth)
        extra["source_model"] = "source_model.json"
    write_manifest(out / "manifest.json", entries, extra)
    log.info("wrote %d rollouts to %s", len(rollouts), out)
    return EXIT_OK


def _load_sources(manifest_path):
    man = read_manifest(manifest_path)
    if man.get("type") != "source":
        raise FormatError(f"{manifest_path} is not a source manifest")
    base = Path(manifest_path).parent
    return man, [file_to_source_rollout(read_rollout_file(base / e["file"])) for e in man["files"]]


def _load_targets(manifest_path, grid: GridSpec | None = None):
    """Targets from a manifest or a single target rollout file.

    A source manifest is resampled on the fly onto ``grid``.
    """
    with open(manifest_path, "rb") as fh:
        single = fh.read(4) == MAGIC
    if single:
        tgt, g = file_to_target(read_rollout_file(manifest_path))
        if grid is not None and g != grid:
            raise FormatError("target grid does not match the model grid")
        return dict(tgt.meta), [tgt]
    man = read_manifest(manifest_path)
    base = Path(manifest_path).parent
    if man.get("type") == "target":
        out = [file_to_target(read_rollout_file(base / e["file"])) for e in man["files"]]
        if grid is not None and any(g != grid for _, g in out):
            raise FormatError("target grid does not match the model grid")
        return man, [t for t, _ in out]
    if man.get("type") == "source":
        if grid is None:
            raise UsageError("a source manifest needs a surrogate grid to resample onto")
        _, ros = _load_sources(manifest_path)
        rmap = build_map(ros[0].rest, rest_layout(grid))
        return man, [resample_rollout(r, grid, rmap) for r in ros]
    raise FormatError(f"{manifest_path}: unknown manifest type {man.get('type')!r}")


def cmd_resample(args) -> int:
    cfg = _load_config(args)
    man, ros = _load_sources(args.manifest)
    src = ros[0].source
    rows = args.rows or cfg.surrogate.rows
    cols = args.cols or cfg.surrogate.cols
    grid = GridSpec(rows, cols, cfg.surrogate.width or src.width, cfg.surrogate.height or src.height)
    rmap = build_map(ros[0].rest, rest_layout(grid))
    log.info("resampling %d rollouts %dx%d -> %dx%d; %d extrapolation warnings", len(ros),
             src.rows, src.cols, rows, cols, rmap.warning_count)
    out = _out_dir(args, cfg, "targets")
    entries = []
    for ro in ros:
        if ro.source.spec_hash() != src.spec_hash():
            raise FormatError("rollouts in one manifest must share a source spec")
        tgt = resample_rollout(ro, grid, rmap)
        name = f"target_{ro.index:05d}.msnr"
        write_rollout_file(out / name, target_to_file(tgt, grid, {"spec_hash": src.spec_hash(),
                                                                   "seed": ro.seed}))
        entries.append({"file": name, "index": ro.index, "frames": len(tgt.xhat)})
    write_manifest(out / "manifest.json", entries,
                   {"type": "target", "grid": [rows, cols, grid.width, grid.height], "dt": src.dt,
                    "warnings": rmap.warning_count, "spec_hash": src.spec_hash(), "seed": man["seed"]})
    return EXIT_OK


def cmd_clipset(args) -> int:
    cfg = _load_config(args)
    man = read_manifest(args.manifest)
    c = cfg.clipset
    counts = {int(e["index"]): int(e["frames"]) for e in man["files"]}
    cs = build_clipset(counts, float(man["dt"]), T=c.T, keep_fraction=c.keep_fraction,
                       low_velocity_seconds=c.low_velocity_seconds,
                       low_velocity_keep=c.low_velocity_keep, seed=cfg.seed)
    out = Path(args.out) if args.out else Path(cfg.output.dir) / "clips.json"
    write_clipset_file(out, cs, {"spec_hash": man.get("spec_hash")})
    log.info("clip set: %d general, %d low-velocity clips of %d frames", int(cs.general.sum()),
             int(cs.low_velocity.sum()), cs.T)
    return EXIT_OK


def _final_losses(log_path) -> dict:
    last = {}
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            last[rec["pass"]] = {k: rec[k] for k in ("loss", "force", "impulse", "position",
                                                      "k_neg", "b_neg", "iteration")}
    return last


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tc = cfg.train
    man, targets = _load_targets(args.targets)
    clipset, _ = read_clipset_file(args.clips)
    tmap = {t.rollout_id: t for t in targets}
    g = targets[0].meta
    grid = GridSpec(int(g["rows"]), int(g["cols"]), float(g["width"]), float(g["height"]))
    net = build_lattice(grid, cfg.surrogate.flags)
    rho = float(np.sum(targets[0].masses)) / grid.area
    out = Path(args.out) if args.out else Path(cfg.output.dir) / "model.json"
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    chash = _config_hash(cfg)
    state = None
    if args.resume:
        if ckpt is None or not ckpt.exists():
            raise UsageError("--resume needs an existing --checkpoint file")
        d = json.loads(ckpt.read_text())
        if d.get("config_hash") != chash or d.get("single_pass", False) != args.single_pass:
            raise FormatError("checkpoint was written for a different configuration")
        state = TrainState.from_dict(d["state"])
        log.info("resuming at iteration %d (%s pass)", state.iteration, state.pass_name)
    else:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    def checkpoint(st):
        if ckpt is not None and (st.done or st.iteration % args.checkpoint_every == 0):
            atomic_write(ckpt, canonical_json({"config_hash": chash, "single_pass": args.single_pass,
                                               "state": st.to_dict()}).encode())

    trainer = single_pass_train if args.single_pass else dual_pass_train
    params, state = trainer(net, clipset, tmap, tc, rho=rho, log_path=log_path, state=state,
                            checkpoint_fn=checkpoint)
    counts: dict = {}
    with open(log_path) as fh:
        for line in fh:
            p = json.loads(line)["pass"]
            counts[p] = counts.get(p, 0) + 1
    prov = {"config_hash": chash, "curriculum": "single" if args.single_pass else "dual",
            "seed": cfg.seed, "iterations": counts, "final_losses": _final_losses(log_path),
            "rho": rho, "dt": targets[0].dt, "gravity": list(targets[0].gravity),
            "rayleigh_b": targets[0].rayleigh_b, "spec_hash": man.get("spec_hash"),
            "train_config": tc.to_dict()}
    write_model_file(out, ModelFile(net, params, prov))
    log.info("model written to %s (%d iterations)", out, state.iteration)
    return EXIT_OK


def _colliders_from_meta(meta) -> ColliderSet | None:
    items = meta.get("colliders")
    return cfgmod.parse_colliders(items) if items else None


def cmd_eval(args) -> int:
    model = read_model_file(args.model)
    man, targets = _load_targets(args.targets, model.net.spec)
    preds, tg = [], []
    for t in targets:
        if t.xhat.shape[1] != model.net.n_particles:
            raise FormatError("target particle count does not match the model")
        preds.append(replay_target(model.net, model.params, t, _colliders_from_meta(t.meta or {})))
        tg.append(t.xhat)
    rep = motion_rmse(preds, tg)
    write_motion_csv(args.out, rep, targets[0].dt, [t.rollout_id for t in targets])
    print(f"motion_rmse mean={rep.mean:.6g} std={rep.std:.6g} rollouts={len(targets)}")
    if args.truth:
        truth = read_model_file(args.truth)
        same = (truth.net.spec == model.net.spec and truth.net.n_springs == model.net.n_springs
                and np.array_equal(truth.net.a, model.net.a) and np.array_equal(truth.net.b, model.net.b))
        if same:
            pr = rmse_params(model.params, truth.params, model.net.spring_class)
            print(f"rmse_k={pr.rmse_k:.6g} rmse_b={pr.rmse_b:.6g}")
            if args.params_out:
                write_params_csv(args.params_out, pr)
        else:
            log.warning("topologies differ; parameter RMSE is undefined and not reported")
    return EXIT_OK


def _write_obj(path, x, tris):
    lines = [f"v {p[0]!r} {p[1]!r} {p[2]!r}" for p in x]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in tris]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def cmd_fold_test(args) -> int:
    res = femsrc.fold_experiment(args.resolution, args.alignment, membrane=args.membrane,
                                 bending=args.bending, side=args.side, rho=args.rho,
                                 damping_ratio=args.damping_ratio, duration=args.duration,
                                 orientation=args.orientation)
    out = Path(args.out)
    summary = {"resolution": res.resolution, "alignment": res.alignment, "sag": res.sag,
               "lowest_z": res.min_z, "converged": res.converged, "steps": res.steps,
               "time": res.time, "membrane": args.membrane, "bending": args.bending,
               "side": args.side, "rho": args.rho}
    atomic_write(out / f"fold_{args.resolution}_{args.alignment}.json",
                 canonical_json(summary, indent=1).encode())
    mesh = femsrc.build_tri_grid(args.resolution, args.resolution, args.side, args.side, args.orientation)
    _write_obj(out / f"fold_{args.resolution}_{args.alignment}.obj", res.positions, mesh.triangles)
    print(f"sag={res.sag:.6g} converged={res.converged}")
    return EXIT_OK if res.converged else EXIT_NUMERIC


SCENARIOS = ("sphere", "plane", "pinned")


def scenario_setup(scenario: str, grid: GridSpec, seed: int):
    """Initial state and colliders of a generalization scenario.

    ``sphere`` drops the flat sheet centred over a ball one third of the
    sheet's width across, resting on the floor z = -radius; ``plane`` drops
    a randomly rotated sheet, lowest point a tenth of its side up, onto the
    floor z = 0; ``pinned`` uses training-style random anchors and rotation.
    All particles are free in the two drape scenarios.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, SCENARIOS.index(scenario)]))
    rest = rest_layout(grid)
    centre = rest.mean(axis=0)
    side = min(grid.width, grid.height)
    pinned = np.zeros(grid.n_particles, dtype=bool)
    if scenario == "sphere":
        r = side / 6.0
        x = rest - centre + np.array([0.0, 0.0, r + 0.05 * side])
        cols = ColliderSet(planes=(Plane((0.0, 0.0, -r), (0.0, 0.0, 1.0)),),
                           spheres=(Sphere((0.0, 0.0, 0.0), r),))
    elif scenario == "plane":
        x, _ = sample_initial_condition(rest, rng)
        x = x - centre
        x[:, 2] += 0.1 * side - x[:, 2].min()
        cols = ColliderSet(planes=(Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0)),))
    elif scenario == "pinned":
        pinned = sample_boundary_condition(rest, 1.5 * min(grid.spacing), rng, 0.5 * side)
        x, _ = sample_initial_condition(rest, rng)
        cols = None
    else:
        raise UsageError(f"unknown scenario {scenario!r}")
    return SimState(x, np.zeros_like(x), pinned), cols


def cmd_simulate(args) -> int:
    model = read_model_file(args.model)
    prov = model.provenance
    net, grid = model.net, model.net.spec
    rho = args.rho if args.rho is not None else float(prov.get("rho", 0.2))
    dt = args.dt if args.dt is not None else float(prov.get("dt", 1e-3))
    ext = ExternalForceSpec(tuple(prov.get("gravity", (0.0, 0.0, -9.81))),
                            args.rayleigh_b if args.rayleigh_b is not None else float(prov.get("rayleigh_b", 0.1)))
    masses = assign_masses(rho, grid)
    state, colliders = scenario_setup(args.scenario, grid, args.seed)
    steps = int(round(args.duration / dt))
    xs = [state.x.copy()]
    calm, settled, total_m = 0, False, masses.sum()
    for j in range(1, steps + 1):
        f = net_force(net, model.params, state.x, state.v, masses, ext)
        state = resolve_contacts(step_semi_implicit(state, f, masses, dt), colliders)
        xs.append(state.x.copy())
        calm = calm + 1 if kinetic_energy(state.v, masses) / total_m < args.settle_tol else 0
        if calm >= args.settle_steps:
            settled = True
            break
    y = np.stack(xs)
    tgt = TargetTrajectory(y, state.pinned, masses, dt, ext.gravity, ext.rayleigh_b, 0)
    meta = {"scenario": args.scenario, "settled": settled, "steps": len(xs) - 1, "seed": args.seed}
    if colliders:
        meta["colliders"] = cfgmod.colliders_to_list(colliders)
    write_rollout_file(args.out, target_to_file(tgt, grid, meta))
    print(f"scenario={args.scenario} steps={len(xs) - 1} settled={settled}")
    return EXIT_OK


def cmd_export_csv(args) -> int:
    if args.rollout:
        rf: RolloutFile = read_rollout_file(args.rollout)
        header = ["frame", "particle", "x", "y", "z"]
        rows = ([j * args.stride, p, repr(float(x)), repr(float(y)), repr(float(z))]
                for j, frame in enumerate(rf.positions[::args.stride])
                for p, (x, y, z) in enumerate(frame))
    else:
        m = read_model_file(args.model)
        header = ["spring", "a", "b", "class", "rest_length", "k", "damping"]
        rows = ([s, int(m.net.a[s]), int(m.net.b[s]), CLASS_NAMES[int(m.net.spring_class[s])],
                 repr(float(m.net.rest_length[s])), repr(float(m.params.k[s])), repr(float(m.params.b[s]))]
                for s in range(m.net.n_springs))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msn", description=__doc__.splitlines()[0],
                formatter_class=argparse.RawDescriptionHelpFormatter,
                epilog="Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.\n"
                       f"The config path may also come from ${CONFIG_ENV}.")
    p.add_argument("--log-level", default=None, help="logging level (default from config, else INFO)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    s = add("gen-source", cmd_gen_source, "simulate randomized source rollouts and write a manifest")
    s.add_argument("--config")
    s.add_argument("--out", help="output directory (default <output.dir>/source)")
    s.add_argument("--count", type=int, help="override rollouts.count")
    s.add_argument("--seed", type=int, help="override the rollout seed (e.g. for test sets)")
    s.add_argument("--first-index", type=int, default=0, help="index of the first rollout")

    s = add("resample", cmd_resample, "map source rollouts onto the surrogate grid")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True, help="source manifest")
    s.add_argument("--out", help="output directory (default <output.dir>/targets)")
    s.add_argument("--rows", type=int)
    s.add_argument("--cols", type=int)

    s = add("clipset", cmd_clipset, "partition target trajectories into training clips")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True, help="target manifest")
    s.add_argument("--out", help="clip set file (default <output.dir>/clips.json)")

    s = add("train", cmd_train, "fit per-spring stiffness and damping")
    s.add_argument("--config")
    s.add_argument("--targets", required=True, help="target manifest")
    s.add_argument("--clips", required=True, help="clip set file")
    s.add_argument("--out", help="model file (default <output.dir>/model.json)")
    s.add_argument("--log", help="JSONL training log (default next to the model)")
    s.add_argument("--checkpoint", help="checkpoint file written during training")
    s.add_argument("--checkpoint-every", type=int, default=1)
    s.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    s.add_argument("--single-pass", action="store_true", help="joint training ablation")

    s = add("eval", cmd_eval, "replay a model against target trajectories")
    s.add_argument("--model", required=True)
    s.add_argument("--targets", required=True, help="target or source manifest, or one target rollout file")
    s.add_argument("--out", required=True, help="motion RMSE CSV")
    s.add_argument("--truth", help="ground-truth model for parameter RMSE")
    s.add_argument("--params-out", help="parameter RMSE CSV (with --truth)")

    s = add("fold-test", cmd_fold_test, "hang an FEM sheet from two opposite corners")
    s.add_argument("--resolution", type=int, default=16)
    s.add_argument("--alignment", choices=("aligned", "misaligned"), default="misaligned")
    s.add_argument("--membrane", type=float, default=100.0)
    s.add_argument("--bending", type=float, default=1e-4)
    s.add_argument("--side", type=float, default=1.0)
    s.add_argument("--rho", type=float, default=0.2)
    s.add_argument("--damping-ratio", type=float, default=8.0)
    s.add_argument("--duration", type=float, default=10.0)
    s.add_argument("--orientation", choices=("uniform", "alternating"), default="uniform")
    s.add_argument("--out", required=True, help="output directory")

    s = add("simulate", cmd_simulate, "run a trained model in a generalization scenario")
    s.add_argument("--model", required=True)
    s.add_argument("--scenario", choices=SCENARIOS, default="sphere")
    s.add_argument("--out", required=True, help="output rollout file")
    s.add_argument("--duration", type=float, default=5.0)
    s.add_argument("--dt", type=float)
    s.add_argument("--rho", type=float)
    s.add_argument("--rayleigh-b", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--settle-tol", type=float, default=1e-6,
                   help="kinetic energy per unit mass (J/kg) counted as at rest")
    s.add_argument("--settle-steps", type=int, default=200)

    s = add("export-csv", cmd_export_csv, "dump a rollout or a model as CSV")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--rollout")
    g.add_argument("--model")
    s.add_argument("--stride", type=int, default=1, help="frame stride for rollouts")
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    level = args.log_level
    if level is None:
        level = "INFO"
        if getattr(args, "config", None) or os.environ.get(CONFIG_ENV):
            try:
                level = _load_config(args).output.log_level
            except (cfgmod.ConfigError, OSError):
                pass
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.fn(args)
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (SimulationDiverged, TrainingAborted, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except (cfgmod.ConfigError, FormatError, OSError, KeyError, ValueError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
