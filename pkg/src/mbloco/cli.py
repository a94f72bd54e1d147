"""Command-line experiment runner.

Subcommands: ``collect``, ``train``, ``eval``, ``compare-speed`` and
``matrix``. Each takes ``--config <path> --seed <u64> --out <dir>`` and
writes its results into ``--out``. Exit codes: 0 success, 2 configuration or
usage error, 3 artifact mismatch (missing, corrupt or built under a different
world configuration).
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import datapipe, dynmodel, experiments, mpc, plots
from . import simworld as sw
from .config import ConfigError, config_hash, load_config, world_hash

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT = 0, 2, 3
U64_MAX = 2 ** 64 - 1


class ArtifactError(RuntimeError):
    pass


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64-1], got {v}")
    return v


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _speeds(text):
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad speed list {text!r}")


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def sidecar_path(model_path):
    return Path(str(model_path) + ".json")


def load_dataset_checked(path, cfg):
    try:
        ds = datapipe.load_dataset(path)
    except (OSError, datapipe.DatasetFileError) as exc:
        raise ArtifactError(f"dataset {path}: {exc}") from exc
    h = ds.meta.get("world_hash")
    if h is not None and h != world_hash(cfg):
        raise ArtifactError(f"dataset {path} was collected under a different world configuration")
    return ds


def load_model_checked(path, cfg, label=None):
    """Load a model file plus its JSON sidecar; ``label`` names the report cell on errors."""
    where = f"{label}: " if label else ""
    try:
        model = dynmodel.load_model(path)
    except (OSError, dynmodel.ModelFileError) as exc:
        raise ArtifactError(f"{where}model {path}: {exc}") from exc
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ArtifactError(f"{where}model sidecar {side}: {exc}") from exc
        if meta.get("world_hash") not in (None, world_hash(cfg)):
            raise ArtifactError(f"{where}model {path} was trained under a different world configuration")
        model = replace(model, meta=meta)
    return model


def mpc_config_for(cfg, model):
    if model.meta.get("abstraction") == sw.Abstraction.PWM.value:
        return mpc.MPCConfig.from_config(cfg, abstraction=sw.Abstraction.PWM, action_low=-1.0, action_high=1.0)
    return mpc.MPCConfig.from_config(cfg)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_collect(args, cfg):
    terrain = sw.get_terrain(args.terrain, cfg)
    n = args.rollouts or cfg["collect"]["rollouts"]
    horizon = args.horizon or cfg["collect"]["horizon"]
    ds = datapipe.build_dataset(cfg, terrain, n, horizon, args.seed, sw.Abstraction(args.abstraction))
    out = experiments.path_output(args.out, f"{terrain.name}.rchd")
    datapipe.save_dataset(ds, out)
    print(f"collected {n} rollouts x {horizon} steps on {terrain.name}: {len(ds)} pairs "
          f"({ds.meta['robot_seconds']:.0f} s of robot time) -> {out}")
    return out


def cmd_train(args, cfg):
    dss = [load_dataset_checked(p, cfg) for p in args.data]
    abstractions = {d.meta.get("abstraction", "velocity") for d in dss}
    if len(abstractions) > 1:
        raise ArtifactError("datasets mix velocity and PWM actions")
    order = list(sw.terrain_presets(cfg))
    try:
        ds = datapipe.merge(dss, terrain_order=order) if len(dss) > 1 else dss[0]
    except ValueError as exc:
        raise ArtifactError(str(exc)) from exc
    if len(dss) == 1:
        ds.meta["terrain_order"] = order
    tc, mc = cfg["train"], cfg["model"]
    train_set, val_set = datapipe.split(ds, 1.0 - tc["val_ratio"], args.seed)
    log = None
    if not args.quiet:
        def log(ep, tr, va):
            print(f"epoch {ep + 1:3d}  train {tr:.5f}  val {va if va is None else round(va, 5)}")
    res = dynmodel.train(train_set, args.variant, epochs=args.epochs or tc["epochs"], lr=tc["lr"],
                         batch=tc["batch"], seed=args.seed, val_set=val_set, hidden=tuple(mc["hidden"]),
                         sa_hidden=mc["sa_hidden"], post_hidden=(mc["post_hidden"],), log=log)
    name = args.name or f"{args.variant}_{'_'.join(ds.meta.get('terrains', []))}"
    out = experiments.path_output(args.out, f"{name}.rchm")
    dynmodel.save_model(res.model, out)
    meta = {"variant": args.variant, "terrains": ds.meta.get("terrains", []), "terrain_order": order,
            "abstraction": abstractions.pop(), "world_hash": world_hash(cfg), "config_hash": config_hash(cfg),
            "datasets": [d.digest() for d in dss], "seed": args.seed, **res.model.meta}
    sidecar_path(out).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    loss_csv = out.with_name(f"{name}_loss.csv")
    rows = [[i + 1, repr(t), repr(res.val_loss[i]) if res.val_loss else ""] for i, t in enumerate(res.train_loss)]
    experiments._write_csv(loss_csv, ["epoch", "train_loss", "val_loss"], rows)
    print(f"trained {args.variant} model on {len(train_set)} pairs -> {out}")
    return out


def _controller(spec, cfg, label):
    if spec == "dd":
        return None
    return load_model_checked(spec, cfg, label)


def cmd_eval(args, cfg):
    experiments.path_for(cfg, args.path)
    sw.get_terrain(args.terrain, cfg)
    ctrl = _controller(args.controller, cfg, f"cell ({args.controller}, {args.terrain}, {args.path})")
    name = "dd" if ctrl is None else Path(args.controller).stem
    mc = None if ctrl is None else mpc_config_for(cfg, ctrl)
    seeds = experiments.seed_list(args.seed, args.n_seeds or cfg["eval"]["n_seeds"])
    report = experiments.evaluate(cfg, {name: ctrl}, [args.terrain], [args.path], seeds, mpc_cfg=mc,
                                  workers=args.workers)
    report.write_cells(experiments.path_output(args.out, "eval.csv"))
    report.write_runs(experiments.path_output(args.out, "eval_runs.csv"))
    for c in report.cells():
        print(f"{c.controller} on {c.terrain}/{c.path}: {c.mean:.3f} +/- {c.std:.3f} over {c.n_seeds} runs")
    print(f"report digest {report.digest()}")
    return report


def cmd_compare_speed(args, cfg):
    sw.get_terrain(args.terrain, cfg)
    speeds = args.speeds if args.speeds is not None else cfg["eval"]["speeds"]
    if not speeds:
        raise ConfigError("empty speed list")
    model = load_model_checked(args.model, cfg, "speed sweep")
    seeds = experiments.seed_list(args.seed, args.n_seeds or cfg["eval"]["n_seeds"])
    rows = experiments.speed_sweep(cfg, model, args.terrain, speeds, seeds, args.path, workers=args.workers)
    out = experiments.path_output(args.out, "speed.csv")
    experiments.write_speed_csv(rows, out, config_hash(cfg))
    plots.line_chart(out.with_suffix(".svg"), f"cost vs nominal leg speed ({args.terrain})",
                     [r.speed for r in rows], {"differential drive": [r.dd_mean for r in rows],
                                               "MPC": [r.mpc_mean for r in rows]},
                     xlabel="nominal leg speed (rad/s)")
    for r in rows:
        print(f"speed {r.speed:g}: dd {r.dd_mean:.2f}  mpc {r.mpc_mean:.2f}  gap {r.gap:.2f}")
    return rows


def _named_models(entries, cfg):
    out = {}
    for entry in entries or []:
        name, sep, path = entry.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"expected NAME=PATH, got {entry!r}")
        sw.get_terrain(name, cfg)
        out[name] = load_model_checked(path, cfg, f"matrix cell (model={name})")
    return out


def cmd_matrix(args, cfg):
    specialists = _named_models(args.model, cfg)
    terrains = args.terrains or list(specialists)
    if not terrains:
        raise ConfigError("no terrains given")
    for t in terrains:
        sw.get_terrain(t, cfg)
    seeds = experiments.seed_list(args.seed, args.n_seeds or cfg["eval"]["n_seeds"])
    h = config_hash(cfg)
    result = {}
    if specialists:
        names = list(specialists)
        report = experiments.evaluate(cfg, specialists, terrains, ["straight"], seeds, workers=args.workers)
        mat = experiments.cost_matrix(report, names, terrains)
        experiments.write_matrix_csv(mat, names, terrains, experiments.path_output(args.out, "matrix.csv"), h)
        report.write_runs(experiments.path_output(args.out, "matrix_runs.csv"))
        plots.bar_chart(experiments.path_output(args.out, "matrix.svg"), "straight-path cost by training terrain",
                        terrains, {f"trained on {n}": list(row) for n, row in zip(names, mat)})
        for n, row in zip(names, mat):
            print(f"model {n}: " + "  ".join(f"{t} {v:.2f}" for t, v in zip(terrains, row)))
        result["matrix"] = mat
    methods = {}
    for label, path in (("naive-joint", args.naive), ("one-hot", args.one_hot), ("conditioned", args.conditioned)):
        if path:
            methods[label] = load_model_checked(path, cfg, f"method cell ({label})")
    if methods:
        missing = [t for t in terrains if t not in specialists]
        if specialists and missing:
            raise ArtifactError(f"method cell (per-terrain, {missing[0]}): no specialist model for this terrain")
        controllers = {"dd": None, **methods}
        if specialists:
            controllers["per-terrain"] = specialists
        paths = args.paths or list(sw.PATH_KINDS)
        report = experiments.evaluate(cfg, controllers, terrains, paths, seeds, workers=args.workers)
        report.write_cells(experiments.path_output(args.out, "methods.csv"))
        report.write_runs(experiments.path_output(args.out, "methods_runs.csv"))
        means = {c: experiments.terrain_means(report, c, terrains) for c in controllers}
        plots.bar_chart(experiments.path_output(args.out, "methods.svg"), "mean path cost by method",
                        terrains, {c: [means[c][t] for t in terrains] for c in controllers})
        for c in controllers:
            print(f"{c}: " + "  ".join(f"{t} {means[c][t]:.2f}" for t in terrains))
        result["methods"] = report
    if not result:
        raise ConfigError("matrix needs --model entries and/or method models")
    return result


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="mbloco", description="Model-based legged locomotion experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config layered over the packaged defaults")
    common.add_argument("--seed", type=_u64, default=0, help="base seed (u64)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--workers", type=int, default=1, help="parallel evaluation processes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", parents=[common], help="collect random-action rollouts")
    p.add_argument("--terrain", required=True)
    p.add_argument("--rollouts", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--abstraction", choices=[a.value for a in sw.Abstraction], default="velocity")

    p = sub.add_parser("train", parents=[common], help="train a dynamics model")
    p.add_argument("--data", nargs="+", required=True, help="dataset files (several are merged)")
    p.add_argument("--variant", choices=[v.value for v in dynmodel.Variant], default="plain")
    p.add_argument("--epochs", type=int)
    p.add_argument("--name", help="output file stem")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="evaluate a controller on one terrain and path")
    p.add_argument("--controller", required=True, help="'dd' or a model file")
    p.add_argument("--terrain", required=True)
    p.add_argument("--path", default="straight")
    p.add_argument("--n-seeds", type=int)

    p = sub.add_parser("compare-speed", parents=[common], help="DD vs MPC cost across nominal speeds")
    p.add_argument("--model", required=True)
    p.add_argument("--terrain", default="styrofoam")
    p.add_argument("--speeds", type=_speeds)
    p.add_argument("--path", default="straight")
    p.add_argument("--n-seeds", type=int)

    p = sub.add_parser("matrix", parents=[common], help="cross-terrain matrix and method comparison")
    p.add_argument("--model", action="append", help="TERRAIN=PATH of a per-terrain model (repeatable)")
    p.add_argument("--terrains", type=_csv_list)
    p.add_argument("--paths", type=_csv_list)
    p.add_argument("--naive", help="model trained on pooled data without terrain input")
    p.add_argument("--one-hot", dest="one_hot", help="model conditioned on terrain labels")
    p.add_argument("--conditioned", help="model conditioned on image embeddings")
    p.add_argument("--n-seeds", type=int)
    return parser


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "eval": cmd_eval,
            "compare-speed": cmd_compare_speed, "matrix": cmd_matrix}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
