"""Command line entry point: inject, train, eval, serve, client, simulate, report.

Every subcommand accepts ``--config FILE`` (JSON), ``--seed`` and ``--out``.
Values are resolved as built-in defaults, then the config file, then flags
given on the command line.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
3 missing artifacts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from splitcomp import codec as C
from splitcomp import sim
from splitcomp.errors import MissingConfig, SplitCompError
from splitcomp.injector import SplitConfig, inject, split
from splitcomp.model import checkpoint
from splitcomp.model.zoo import ARCHITECTURES, build_teacher

log = logging.getLogger("splitcomp")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING = 0, 1, 2, 3

DEFAULTS = {
    "arch": "small_resnet",
    "input_size": 32,
    "num_classes": 10,
    "split_point": "SP1",
    "channels": 3,
    "spatial_factor": 1,
    "recipe": "bottlefit_ft_fe",
    "data": "synthetic",
    "n_train": 3000,
    "n_val": 1000,
    "epochs": [10, 10],
    "teacher_epochs": 10,
    "batch_size": 64,
    "codec": "bq8",
    "host": "127.0.0.1",
    "port": 5555,
    "timeout": 10.0,
    "seed": 0,
    "out": "runs/out",
    "rates": None,
    "jpeg_bytes": None,
}


class UsageError(Exception):
    pass


class MissingArtifacts(Exception):
    pass


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


def resolve(args) -> dict:
    """Defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        with open(args.config) as f:
            try:
                file_cfg = json.load(f)
            except json.JSONDecodeError as e:
                raise UsageError(f"{args.config}: invalid JSON ({e})") from e
        unknown = set(file_cfg) - set(DEFAULTS) - {"teacher", "checkpoint", "profiles", "channels_file",
                                                   "models", "endpoint", "images", "report", "runs"}
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if k in ("config", "func", "command", "verbose") or v is None:
            continue
        cfg[k] = v
    return cfg


def _need(cfg, key, what=None):
    v = cfg.get(key)
    if v in (None, ""):
        raise UsageError(f"missing required setting --{key.replace('_', '-')}" + (f" ({what})" if what else ""))
    return v


def _load_checkpoint(path, what="checkpoint"):
    if not os.path.exists(os.path.join(path, checkpoint.MANIFEST)):
        raise UsageError(f"{what} not found: {os.path.join(path, checkpoint.MANIFEST)}")
    return checkpoint.load(path)


def load_data(cfg, split_name: str):
    """Dataset for ``split_name`` in {"train", "val"} from the ``data`` setting.

    ``synthetic`` uses the procedural benchmark (train and val come from
    different generator seeds); a directory is read as an image folder,
    using ``train/`` and ``val/`` sub-folders when present; ``.npz`` files
    are loaded directly.
    """
    from splitcomp.data import load_image_folder, load_npz, synthetic_benchmark

    src = cfg["data"]
    size = int(cfg["input_size"])
    seed = int(cfg["seed"])
    if src == "synthetic":
        n = int(cfg["n_train"] if split_name == "train" else cfg["n_val"])
        # train, val and client images use disjoint generator streams
        offset = {"train": 1, "val": 2, "client": 3}[split_name]
        return synthetic_benchmark(n, size=size, seed=1000 * seed + offset)
    if src.endswith(".npz"):
        if not os.path.exists(src):
            raise UsageError(f"dataset not found: {src}")
        return load_npz(src)
    if not os.path.isdir(src):
        raise UsageError(f"dataset not found: {src}")
    sub = os.path.join(src, "val" if split_name != "train" else "train")
    if os.path.isdir(sub):
        return load_image_folder(sub, size)
    ds = load_image_folder(src, size)
    order = np.random.default_rng(seed).permutation(len(ds))
    cut = int(0.8 * len(ds))
    return ds.subset(order[:cut] if split_name == "train" else order[cut:])


def _split_config(cfg) -> SplitConfig:
    return SplitConfig(cfg["split_point"], int(cfg["channels"]), int(cfg["spatial_factor"]), seed=int(cfg["seed"]))


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_inject(cfg) -> int:
    teacher_path = _need(cfg, "teacher", "teacher checkpoint directory")
    teacher = _load_checkpoint(teacher_path, "teacher weights")
    bm = inject(teacher, _split_config(cfg))
    out = cfg["out"]
    checkpoint.save(bm, out)
    print(f"bottleneck {bm.bottleneck_shape} k*={bm.config.k_star} l_ed={bm.config.l_ed} -> {out}")
    return EXIT_OK


def _train_teacher(cfg) -> int:
    from splitcomp.train import evaluate_accuracy, train_teacher, write_log

    size = int(cfg["input_size"])
    t = build_teacher(cfg["arch"], (3, size, size), int(cfg["num_classes"]), seed=int(cfg["seed"]))
    tr, va = load_data(cfg, "train"), load_data(cfg, "val")
    rows = []
    t = train_teacher(t, tr, epochs=int(cfg["teacher_epochs"]), batch_size=int(cfg["batch_size"]),
                      decay=(0.1, max(1, int(cfg["teacher_epochs"]) * 7 // 10)), seed=int(cfg["seed"]),
                      log_rows=rows)
    out = cfg["out"]
    checkpoint.save(t, os.path.join(out, "checkpoint"))
    write_log(rows, os.path.join(out, "train_log.csv"))
    top1 = evaluate_accuracy(t, va)
    _write_json(os.path.join(out, "run.json"), {
        "kind": "teacher", "arch": cfg["arch"], "seed": int(cfg["seed"]), "top1": top1, "teacher_top1": top1,
    })
    print(f"teacher top-1 {100 * top1:.2f}% -> {out}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    from splitcomp.train import (
        autoencoder_model,
        evaluate_accuracy,
        expand_recipe,
        train_recipe,
        write_log,
    )

    recipe_name = cfg["recipe"]
    os.makedirs(cfg["out"], exist_ok=True)
    if recipe_name == "teacher":
        return _train_teacher(cfg)
    epochs = cfg["epochs"]
    epochs = [int(e) for e in (epochs if isinstance(epochs, (list, tuple)) else [epochs])]
    if len(epochs) == 1:
        epochs *= 2
    if len(epochs) != 2:
        raise UsageError(f"--epochs takes one or two values, got {epochs}")
    recipe = expand_recipe(recipe_name, epochs, seed=int(cfg["seed"]), batch_size=int(cfg["batch_size"]))
    teacher_path = _need(cfg, "teacher", "teacher checkpoint directory")
    teacher = _load_checkpoint(teacher_path, "teacher weights")
    if cfg.get("checkpoint"):
        model = _load_checkpoint(cfg["checkpoint"])
    elif recipe_name == "baseline_autoencoder":
        model = autoencoder_model(teacher, _split_config(cfg), seed=int(cfg["seed"]))
    else:
        model = inject(teacher, _split_config(cfg))
    tr, va = load_data(cfg, "train"), load_data(cfg, "val")
    model = train_recipe(model, teacher, tr, recipe)
    out = cfg["out"]
    checkpoint.save(model, os.path.join(out, "checkpoint"))
    write_log(model.meta["train_log"], os.path.join(out, "train_log.csv"))
    top1 = evaluate_accuracy(model, va)
    _write_json(os.path.join(out, "run.json"), {
        "kind": "student",
        "recipe": recipe_name,
        "arch": teacher.meta.get("arch", teacher.name),
        "split_point": model.config.split_point,
        "channels": model.config.bottleneck_channels,
        "spatial_factor": model.config.spatial_factor,
        "bottleneck_shape": list(model.bottleneck_shape),
        "input_shape": list(model.input_shape),
        "seed": int(cfg["seed"]),
        "top1": top1,
        "teacher_top1": evaluate_accuracy(teacher, va),
        "stages": [s.to_dict() for s in recipe.stages],
    })
    print(f"{recipe_name}: top-1 {100 * top1:.2f}% -> {out}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    from splitcomp.runtime import infer_local_split
    from splitcomp.train import evaluate_accuracy

    model = _load_checkpoint(_need(cfg, "checkpoint"))
    va = load_data(cfg, "val")
    result = {"n": len(va)}
    if hasattr(model, "encoder"):
        pair = split(model)
        labels = {}
        for codec in ("float32", "bq8"):
            labels[codec] = np.array([infer_local_split(pair.head, pair.tail, x, codec) for x in va.x])
            result[f"top1_{codec}"] = float(np.mean(labels[codec] == va.y))
        result["argmax_agreement"] = float(np.mean(labels["float32"] == labels["bq8"]))
        shape = model.bottleneck_shape
        result["bottleneck_shape"] = list(shape)
        result["payload_bytes_bq8"] = C.payload_size(shape, "bq8")
        result["payload_bytes_float32"] = C.payload_size(shape, "float32")
        result["element_reduction"] = C.element_reduction(model.input_shape, shape)
    else:
        result["top1"] = evaluate_accuracy(model, va)
    os.makedirs(cfg["out"], exist_ok=True)
    _write_json(os.path.join(cfg["out"], "eval.json"), result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_serve(cfg) -> int:
    from splitcomp.runtime import SplitServer

    model = _load_checkpoint(_need(cfg, "checkpoint"))
    tail = split(model).tail
    srv = SplitServer(tail, cfg["host"], int(cfg["port"]), cfg["codec"])
    print(f"serving tail on {srv.endpoint[0]}:{srv.endpoint[1]} codec={cfg['codec']}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.close()
    return EXIT_OK


def _parse_endpoint(s: str):
    host, _, port = s.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"endpoint must look like host:port, got {s!r}")
    return host, int(port)


def cmd_client(cfg) -> int:
    from splitcomp.runtime import SplitClient, infer_local_split, infer_remote

    model = _load_checkpoint(_need(cfg, "checkpoint"))
    pair = split(model)
    endpoint = _parse_endpoint(_need(cfg, "endpoint"))
    images = cfg.get("images") or "synthetic"
    ds = load_data({**cfg, "data": images, "n_val": cfg.get("n_val")}, "client")
    codec = cfg["codec"]
    report = cfg.get("report") or os.path.join(cfg["out"], "client.csv")
    os.makedirs(os.path.dirname(os.path.abspath(report)), exist_ok=True)
    agree = 0
    with SplitClient(endpoint, float(cfg["timeout"])) as client, open(report, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "label", "local_label", "true_label", "payload_bytes", "d_head_s", "d_serialize_s",
                    "d_net_up_s", "d_tail_s", "d_net_down_s", "total_s"])
        for i, x in enumerate(ds.x):
            label, bd, payload = infer_remote(pair.head, x, endpoint, codec, client=client, return_payload=True)
            local = infer_local_split(pair.head, pair.tail, x, codec)
            agree += label == local
            w.writerow([i, label, local, int(ds.y[i]), len(payload), bd.d_head_s, bd.d_serialize_s,
                        bd.d_net_up_s, bd.d_tail_s, bd.d_net_down_s, bd.total_s])
    print(f"{len(ds)} images, {agree} labels agree with the local split path -> {report}")
    return EXIT_OK


def _models_from_runs(run_dirs, jpeg_bytes=None):
    models = []
    for d in run_dirs:
        info = _read_run(d)
        if info.get("kind") != "student":
            continue
        shape = info["bottleneck_shape"]
        input_bytes = jpeg_bytes if jpeg_bytes else C.payload_size(info["input_shape"], "float32")
        models.append(sim.ModelEntry(
            name=f"{info['arch']}/{info['recipe']}/{info['split_point']}-{info['channels']}ch",
            split_point=info["split_point"], channels=info["channels"], codec="bq8",
            payload_bytes=C.payload_size(shape, "bq8"), top1=info["top1"], input_bytes=int(input_bytes),
            teacher_top1=info.get("teacher_top1"),
        ))
    return models


def cmd_simulate(cfg) -> int:
    profiles_path = _need(cfg, "profiles", "execution profile JSON")
    if not os.path.exists(profiles_path):
        raise UsageError(f"profile file not found: {profiles_path}")
    profiles = sim.load_profiles(profiles_path)
    channels = []
    if cfg.get("channels_file"):
        if not os.path.exists(cfg["channels_file"]):
            raise UsageError(f"channel file not found: {cfg['channels_file']}")
        channels = sim.load_channels(cfg["channels_file"])
    if cfg.get("rates"):
        channels += [sim.ChannelModel.fixed(float(r)) for r in cfg["rates"]]
    if not channels:
        raise UsageError("no channels: give --channels-file and/or --rates")
    if cfg.get("models"):
        if not os.path.exists(cfg["models"]):
            raise UsageError(f"model list not found: {cfg['models']}")
        with open(cfg["models"]) as f:
            models = [sim.ModelEntry.from_dict(m) for m in json.load(f)]
    elif cfg.get("runs"):
        models = _models_from_runs(cfg["runs"], cfg.get("jpeg_bytes"))
    else:
        raise UsageError("no models: give --models JSON or --runs directories")
    rows = sim.sweep(models, channels, profiles)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    sim.write_rows(rows, os.path.join(out, "sweep.csv"))
    summary = sim.summarize(rows)
    _write_json(os.path.join(out, "sweep_summary.json"), summary)
    sim.plot_curves(rows, os.path.join(out, "sweep"))
    print(f"{len(rows)} rows -> {os.path.join(out, 'sweep.csv')}")
    return EXIT_OK


RUN_ARTIFACTS = ("run.json", "train_log.csv", os.path.join("checkpoint", checkpoint.MANIFEST))


def _read_run(d):
    with open(os.path.join(d, "run.json")) as f:
        return json.load(f)


def format_cell(top1: float, teacher: float) -> str:
    """Accuracy in percent with the difference to the teacher in brackets."""
    acc, ref = round(100 * top1, 2), round(100 * teacher, 2)
    return f"{acc:.2f} ({acc - ref:+.2f})"


def accuracy_table(runs) -> list[list[str]]:
    header = ["arch", "split_point", "channels", "recipe", "seed", "top1 [%] (delta)"]
    rows = []
    for info in runs:
        if info.get("kind") != "student":
            continue
        rows.append([info["arch"], info["split_point"], str(info["channels"]), info["recipe"], str(info["seed"]),
                     format_cell(info["top1"], info["teacher_top1"])])
    rows.sort()
    return [header] + rows


def cmd_report(cfg) -> int:
    run_dirs = cfg.get("runs") or []
    if not run_dirs:
        raise MissingArtifacts("no run directories given")
    missing = [os.path.join(d, a) for d in run_dirs for a in RUN_ARTIFACTS if not os.path.exists(os.path.join(d, a))]
    if missing:
        raise MissingArtifacts("missing artifacts:\n  " + "\n  ".join(missing))
    runs = [_read_run(d) for d in run_dirs]
    table = accuracy_table(runs)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    lines = ["| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |" for r in table]
    lines.insert(1, "|" + "|".join("-" * (w + 2) for w in widths) + "|")
    with open(os.path.join(out, "accuracy_table.md"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(out, "accuracy_table.csv"), "w", newline="") as f:
        csv.writer(f).writerows(table)
    if cfg.get("profiles"):
        rates = cfg.get("rates") or list(np.geomspace(1e4, 1e8, 17))
        models = _models_from_runs(run_dirs, cfg.get("jpeg_bytes"))
        if models:
            profiles = sim.load_profiles(cfg["profiles"])
            rows = sim.sweep(models, [sim.ChannelModel.fixed(float(r)) for r in rates], profiles)
            sim.write_rows(rows, os.path.join(out, "sweep.csv"))
            sim.plot_curves(rows, os.path.join(out, "report"))
    print("\n".join(lines))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    split_opts = argparse.ArgumentParser(add_help=False)
    split_opts.add_argument("--split-point", dest="split_point", choices=("SP1", "SP2"))
    split_opts.add_argument("--channels", type=int, help="bottleneck channels")
    split_opts.add_argument("--spatial-factor", dest="spatial_factor", type=int)

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--data", help="'synthetic', an image folder or a .npz file")
    data_opts.add_argument("--n-train", dest="n_train", type=int)
    data_opts.add_argument("--n-val", dest="n_val", type=int)
    data_opts.add_argument("--input-size", dest="input_size", type=int)

    p = argparse.ArgumentParser(prog="splitcomp", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("inject", parents=[common, split_opts], help="insert a bottleneck into a teacher")
    s.add_argument("--teacher", help="teacher checkpoint directory")
    s.set_defaults(func=cmd_inject)

    s = sub.add_parser("train", parents=[common, split_opts, data_opts], help="train a teacher or a student")
    s.add_argument("--recipe", help="recipe name, or 'teacher' to train a teacher")
    s.add_argument("--teacher", help="teacher checkpoint directory")
    s.add_argument("--checkpoint", help="start from this bottlenecked checkpoint instead of injecting")
    s.add_argument("--arch", choices=ARCHITECTURES)
    s.add_argument("--epochs", type=int, nargs="+", help="stage lengths (two values) or one per stage")
    s.add_argument("--teacher-epochs", dest="teacher_epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, data_opts], help="accuracy of float32 and bq8 split paths")
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", parents=[common], help="serve a tail model")
    s.add_argument("--checkpoint")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--codec", choices=("any", "float32", "bq8"))
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("client", parents=[common, data_opts], help="run split inference against a server")
    s.add_argument("--checkpoint")
    s.add_argument("--endpoint", help="host:port")
    s.add_argument("--images", help="'synthetic', an image folder or a .npz file")
    s.add_argument("--codec", choices=("float32", "bq8"))
    s.add_argument("--report", help="per-image CSV")
    s.add_argument("--timeout", type=float)
    s.set_defaults(func=cmd_client)

    s = sub.add_parser("simulate", parents=[common], help="latency/energy sweep")
    s.add_argument("--profiles", help="execution profile JSON")
    s.add_argument("--channels-file", dest="channels_file", help="channel list JSON")
    s.add_argument("--rates", type=float, nargs="+", help="extra fixed rates in bit/s")
    s.add_argument("--models", help="model list JSON")
    s.add_argument("--runs", nargs="+", help="training run directories to take models from")
    s.add_argument("--jpeg-bytes", dest="jpeg_bytes", type=int, help="edge upload size instead of raw float32")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("report", parents=[common], help="accuracy table and sweep curves from runs")
    s.add_argument("runs", nargs="*", help="run directories")
    s.add_argument("--profiles", help="execution profile JSON for the sweep curves")
    s.add_argument("--rates", type=float, nargs="+")
    s.add_argument("--jpeg-bytes", dest="jpeg_bytes", type=int)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        return args.func(cfg)
    except MissingArtifacts as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (UsageError, SplitCompError, MissingConfig, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # pragma: no cover - surfaced as exit code 1
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
