"""Command-line pipeline: rooms, collect, train, eval, dagger, gradcheck, plot.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 expert
failure, 4 I/O error. Every command that writes outputs also writes one
``*.run.json`` manifest describing how it was invoked.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import datastore, nn
from .data import Dataset
from .datastore import DatastoreError
from .expert import ExpertConfig
from .evaluation import (TEST_START, ExpertController, ExpertFailure, StudentController, collect_expert,
                         evaluate_suite, export_trajectories, parse_csv_name, per_room_table,
                         read_trajectory_csv, room_one_starts, room_svg, room_two_start, table_header,
                         table_row)
from .training import DaggerConfig, TrainConfig, augment_recovery, dagger_iterate, guideline_report, train
from .world import ROOM_TWO_BASE_SEED, room_one_catalog, room_two_catalog

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_EXPERT, EXIT_IO = 0, 1, 2, 3, 4
ARCHES = {"fc": "FC", "fc5": "FC5", "lstm": "LSTM", "cnn-fc": "CNN-FC", "cnn-lstm": "CNN-LSTM",
          "cnn-fc5": "CNN-FC5"}


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(path: Path, args: argparse.Namespace, argv, started: str, outputs, config=None) -> Path:
    """RunManifest: command line, seed, config snapshot, timestamps, output paths."""
    record = {
        "command": ["roomcross", *argv],
        "subcommand": args.command,
        "seed": getattr(args, "seed", None),
        "deterministic": args.deterministic,
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
        "started": started,
        "finished": _now(),
        "outputs": [str(p) for p in outputs],
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _catalog(name: str):
    if name == "one":
        return room_one_catalog()
    if name == "two":
        return room_two_catalog(ROOM_TWO_BASE_SEED)
    raise UsageError(f"unknown room set {name!r}; use 'one' or 'two'")


def _load_catalog(directory) -> list:
    d = Path(directory)
    if not (d / datastore.CATALOG).exists():
        raise UsageError(f"no room catalog in {d}; run 'roomcross rooms' first")
    return datastore.read_catalog(d)


# ---------------------------------------------------------------- commands

def cmd_rooms(args, argv):
    pairs = _catalog(args.set)
    started = _now()
    out = Path(args.out)
    paths = datastore.write_catalog(out, pairs)
    for (role, room), path in zip(pairs, paths):
        print(f"room\t{room.id}\t{role}\t{path}")
    write_run_manifest(out / "rooms.run.json", args, argv, started, paths + [out / datastore.CATALOG])
    return EXIT_OK


def cmd_collect(args, argv):
    pairs = _load_catalog(args.rooms) if args.rooms else _catalog(args.set)
    started = _now()
    if args.set == "one":
        rooms = [room for _, room in pairs]
        flights = room_one_starts(rooms)
    else:
        rooms = [room for role, room in pairs if role == "train-initial"]
        flights = [(room, room_two_start(room, args.seed)) for room in rooms]
    out = Path(args.out)
    if datastore.read_manifest(out):
        raise UsageError(f"{out} already holds a dataset")
    try:
        ecfg = ExpertConfig(yaw_jitter=args.yaw_jitter, z_jitter=args.z_jitter, jitter_hold=args.jitter_hold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    dataset = collect_expert(flights, args.obs, expert_cfg=ecfg, seed=args.seed, log=print)
    if args.recovery:
        dataset = augment_recovery(dataset, {r.id: r for _, r in pairs})
    entries = datastore.write_dataset(out, dataset)
    datastore.write_catalog(out / "rooms", pairs)
    print(f"episodes\t{len(entries)}\tframes\t{dataset.total_frames}")
    write_run_manifest(out / "collect.run.json", args, argv, started, [out / datastore.MANIFEST])
    return EXIT_OK


def _spec_for(arch: str, dataset: Dataset, hidden: Optional[str], obs: Optional[str]) -> nn.NetworkSpec:
    variant = ARCHES[arch]
    first = dataset.episodes[0]
    kind = obs or ("rgb" if variant.startswith("CNN") and first.rgb is not None else "depth")
    raster = first.depth if kind == "depth" else first.rgb
    if raster is None:
        raise UsageError(f"dataset has no {kind} observations for --arch {arch}")
    h, w = raster.shape[1:3]
    shape = (1 if kind == "depth" else 3, h, w)
    dims = tuple(int(v) for v in hidden.split(",")) if hidden else ()
    try:
        return nn.NetworkSpec(variant, shape, dims)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args, argv):
    data_dir = Path(args.data)
    if not datastore.read_manifest(data_dir):
        raise UsageError(f"no dataset in {data_dir}")
    try:
        cfg = TrainConfig(scheme=args.scheme, window=args.window, stride=args.stride, batch_size=args.batch_size,
                          epochs=args.epochs, lr=args.lr, lr_final=args.lr_final, ema=args.ema,
                          seed=args.seed, window_min=args.window_min, window_max=args.window_max,
                          replay=args.replay, finetune_from=args.init)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    dataset = datastore.read_dataset(data_dir)
    spec = _spec_for(args.arch, dataset, args.hidden, args.obs)
    params = None
    if args.init:
        try:
            params = datastore.load_for_finetune(args.init, spec)
        except datastore.SpecMismatch as exc:
            raise UsageError(str(exc)) from exc
    started = _now()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    print(guideline_report(spec, dataset.total_frames, cfg.window), end="")
    log_path = out.with_suffix(".loss.tsv")
    lines = ["epoch\tscheme\tw\tloss\twall"]

    def log(line):
        print(line, flush=True)
        lines.append(line)

    result = train(spec, dataset, cfg, params=params, log=log)
    datastore.write_checkpoint(out, spec, result.final, cfg.to_text())
    log_path.write_text("\n".join(lines) + "\n")
    write_run_manifest(out.with_suffix(".run.json"), args, argv, started, [out, log_path], asdict(cfg))
    return EXIT_OK


def _controller(model: str):
    if model == "expert":
        return ExpertController()
    path = Path(model)
    if not path.exists():
        raise UsageError(f"no checkpoint at {path}")
    spec, params, _ = datastore.read_checkpoint(path)
    return StudentController(spec, params, name=path.stem)


def _split(pairs, split: str):
    if split == "all":
        return [r for _, r in pairs], []
    known = [r for role, r in pairs if role != "test-unknown"]
    unknown = [r for role, r in pairs if role == "test-unknown"]
    if split == "known":
        return known, []
    if split == "unknown":
        return unknown, []
    raise UsageError(f"unknown split {split!r}")


def cmd_eval(args, argv):
    pairs = _load_catalog(args.rooms)
    controller = _controller(args.model)
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.split == "both":
        known, unknown = _split(pairs, "known")[0], _split(pairs, "unknown")[0]
    else:
        known, unknown = _split(pairs, args.split)[0], None
    if not known:
        raise UsageError(f"no rooms in split {args.split!r}")
    m_known = evaluate_suite(controller, known, TEST_START)
    m_unknown = evaluate_suite(controller, unknown, TEST_START) if unknown else None
    table = table_header() + "\n" + table_row(controller.name, m_known, m_unknown) + "\n"
    print(table, end="")
    (out / "metrics.tsv").write_text(table)
    (out / "rooms.tsv").write_text(per_room_table(m_known) + (per_room_table(m_unknown) if m_unknown else ""))
    trajs = m_known.trajectories + (m_unknown.trajectories if m_unknown else [])
    rooms = {r.id: r for _, r in pairs}
    paths = export_trajectories(trajs, out / "trajectories", "csv")
    paths += export_trajectories(trajs, out / "plots", "svg", rooms)
    write_run_manifest(out / "eval.run.json", args, argv, started,
                       [out / "metrics.tsv", out / "rooms.tsv"] + paths)
    return EXIT_OK


def cmd_dagger(args, argv):
    pairs = _load_catalog(args.rooms)
    stored, params, config_text = datastore.read_checkpoint(args.model)
    base = TrainConfig.from_text(config_text) if config_text else TrainConfig()
    overrides = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr), ("seed", args.seed)) if v is not None}
    tcfg = replace(base, finetune_from=None, **overrides)
    dcfg = DaggerConfig(iterations=args.iterations, finetune=args.finetune)
    data_dir = Path(args.data)
    dataset = datastore.read_dataset(data_dir)
    started = _now()
    out = Path(args.out) if args.out else data_dir
    out.mkdir(parents=True, exist_ok=True)
    known = [r for role, r in pairs if role != "test-unknown"]
    unknown = [r for role, r in pairs if role == "test-unknown"]
    report = [table_header()]
    outputs = []
    for k in range(1, dcfg.iterations + 1):
        before = len(dataset)
        params, dataset, record = dagger_iterate(stored, params, pairs, dataset, dcfg, tcfg, k, log=print)
        datastore.aggregate(data_dir, dataset.episodes[before:])
        ckpt = out / f"dagger-{k}.rckp"
        datastore.write_checkpoint(ckpt, stored, params, replace(tcfg, seed=tcfg.seed + k).to_text())
        student = StudentController(stored, params, name=f"dagger-{k}")
        row = table_row(f"LSTM DAgger {k}" if stored.is_recurrent else f"{stored.variant} DAgger {k}",
                        evaluate_suite(student, known), evaluate_suite(student, unknown) if unknown else None)
        report.append(row)
        print(f"dagger\t{k}\trooms {record.rooms}\tepisodes {record.dataset_size}\t"
              f"step0 finetune {record.step0_finetune:.4f}\tstep0 fresh {record.step0_fresh:.4f}")
        print(row, flush=True)
        outputs.append(ckpt)
    (out / "dagger_report.tsv").write_text("\n".join(report) + "\n")
    outputs += [out / "dagger_report.tsv", data_dir / datastore.MANIFEST]
    write_run_manifest(out / "dagger.run.json", args, argv, started, outputs, asdict(tcfg))
    return EXIT_OK


def _tiny_case(variant: str, rng: np.random.Generator):
    """Small network and sequence for finite-difference checks."""
    if variant.startswith("CNN"):
        spec = nn.NetworkSpec(variant, (1, 9, 8), (4, 3) if "LSTM" in variant else (5, 4),
                              conv=((2, 3, 2), (3, 3, 1)), stack=2)
    else:
        spec = nn.NetworkSpec(variant, (7,), (5, 4), stack=2)
    B, T = 2, 4
    x = rng.normal(size=(B, T) + spec.step_shape)
    y = rng.uniform(-1, 1, size=(B, T, nn.N_OUT))
    mask = np.ones((B, T))
    mask[1, -1] = 0
    state0 = None
    if spec.is_recurrent:
        state0 = [(rng.normal(size=(B, h)) * 0.5, rng.normal(size=(B, h)) * 0.5) for h in spec.hidden]
    return spec, x, y, mask, state0


def gradcheck_variant(variant: str, seed: int, fault: Optional[str] = None) -> nn.GradCheck:
    """Finite-difference check of one variant on a tiny instance at fp64."""
    rng = np.random.default_rng(seed)
    spec, x, y, mask, state0 = _tiny_case(variant, rng)
    params = nn.init_params(spec, seed, np.float64)
    for name in params:
        if name.endswith("bias"):
            params[name] = params[name] + rng.normal(size=params[name].shape) * 0.1
    if fault:
        with nn.fault_injection(fault):
            return nn.grad_check(spec, params, x, y, state0, mask)
    return nn.grad_check(spec, params, x, y, state0, mask)


def cmd_gradcheck(args, argv):
    variants = list(ARCHES.values()) if args.arch == "all" else [ARCHES[args.arch]]
    failed = False
    for variant in variants:
        for seed in range(args.seed, args.seed + args.seeds):
            err, worst, skipped = gradcheck_variant(variant, seed, args.inject_fault)
            ok = err <= args.tolerance
            failed |= not ok
            print(f"gradcheck\t{variant}\tseed {seed}\t{err:.3e}\t{worst}\tkinks {skipped}\t"
                  f"{'pass' if ok else 'FAIL'}")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_plot(args, argv):
    src = Path(args.traj)
    files = sorted(src.glob("*.csv")) if src.is_dir() else []
    if not files:
        raise UsageError(f"no trajectory csv files in {src}")
    rooms = {}
    if args.rooms:
        rooms = {r.id: r for _, r in _load_catalog(args.rooms)}
    by_room = {}
    for f in files:
        controller, room_id = parse_csv_name(f.name)
        by_room.setdefault(room_id, {})[controller] = read_trajectory_csv(f)[:, 1:3]
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for room_id, paths_xy in sorted(by_room.items()):
        path = out / f"room{room_id}.svg"
        path.write_text(room_svg(room_id, paths_xy, rooms.get(room_id)))
        paths.append(path)
        print(f"plot\t{path}")
    write_run_manifest(out / "plot.run.json", args, argv, started, paths)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roomcross", description=__doc__.splitlines()[0])
    p.add_argument("--deterministic", action="store_true",
                   help="force single-worker execution (the only mode currently implemented)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("rooms", help="write a room catalog")
    s.add_argument("--set", required=True, choices=("one", "two"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rooms)

    s = sub.add_parser("collect", help="record expert flights")
    s.add_argument("--set", required=True, choices=("one", "two"))
    s.add_argument("--obs", default="depth", choices=("depth", "rgb", "both"))
    s.add_argument("--recovery", action="store_true", help="add left/right recovery episodes")
    s.add_argument("--rooms", help="catalog directory (default: generate the set)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--yaw-jitter", type=float, default=ExpertConfig.yaw_jitter,
                   help="yaw-rate perturbation amplitude in rad/s")
    s.add_argument("--z-jitter", type=float, default=ExpertConfig.z_jitter, help="climb perturbation amplitude")
    s.add_argument("--jitter-hold", type=int, default=ExpertConfig.jitter_hold,
                   help="steps each perturbation is held")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_collect)

    s = sub.add_parser("train", help="train a control network")
    s.add_argument("--data", required=True)
    s.add_argument("--arch", required=True, choices=sorted(ARCHES))
    s.add_argument("--obs", choices=("depth", "rgb"), help="observation to train on (default by arch)")
    s.add_argument("--hidden", help="comma-separated layer widths (default by arch)")
    s.add_argument("--scheme", default="window", choices=("full", "sliding", "window"))
    s.add_argument("--window", type=int, default=20)
    s.add_argument("--stride", type=int, help="sliding stride (default: window)")
    s.add_argument("--window-min", type=int)
    s.add_argument("--window-max", type=int)
    s.add_argument("--replay", default="epoch", choices=("epoch", "exact"))
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--lr-final", type=float, help="decay the rate geometrically to this value by the last epoch")
    s.add_argument("--ema", type=float, help="keep a moving weight average with this per-step decay and save it")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--init", help="checkpoint to fine-tune from")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint or the expert")
    s.add_argument("--model", required=True, help="checkpoint path or 'expert'")
    s.add_argument("--rooms", required=True)
    s.add_argument("--split", default="all", choices=("known", "unknown", "all", "both"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("dagger", help="run DAgger iterations on Room Two")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--rooms", required=True)
    s.add_argument("--iterations", type=int, default=4)
    s.add_argument("--finetune", action="store_true")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="checkpoint and report directory (default: the data directory)")
    s.set_defaults(func=cmd_dagger)

    s = sub.add_parser("gradcheck", help="finite-difference check of the backward passes")
    s.add_argument("--arch", default="all", choices=sorted(ARCHES) + ["all"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--inject-fault", choices=("lstm-forget", "dense-weight", "conv-weight"))
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("plot", help="top-down svg overlays from trajectory csv files")
    s.add_argument("--traj", required=True)
    s.add_argument("--rooms")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExpertFailure as exc:
        print(f"expert failure: {exc}", file=sys.stderr)
        return EXIT_EXPERT
    except (OSError, DatastoreError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
