"""Command line entry point.

    voxcrf synth      --out DIR [--rooms N] [--density D] [--seed S]
    voxcrf train      --data PATH... --out DIR [--config F] [--set k=v] [--crf on|off]
    voxcrf infer      --model CKPT --input FILE --out FILE [--crf on|off] [--format ascii|ply-binary]
    voxcrf eval       --pred FILE --gt FILE [--out DIR]
    voxcrf gridsearch --model CKPT --data PATH... --out DIR
    voxcrf export-ply --input FILE --out FILE
    voxcrf experiment --out DIR [--seeds 0 1 2]

Every command returns 0 on success and prints ``voxcrf: error: ...`` with a
nonzero status otherwise.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment, synth, train
from .cloud import FORMATS, CloudFormatError, load_cloud, save_cloud, save_predictions
from .config import ConfigError, TrainConfig, desk_config, parse_config_text
from .metrics import accumulate, confusion_matrix, report_csv, report_text, scores
from .pipeline import predict

log = logging.getLogger("voxcrf")

U64_MAX = 2 ** 64 - 1
BACKEND_CHOICES = {"bruteforce": "bruteforce", "lattice": "permutohedral"}


def _seed(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="settings file with 'section.key = value' lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting, e.g. --set stage1.epochs=5")
    p.add_argument("--seed", type=_seed, help="run seed (unsigned 64-bit)")
    p.add_argument("--crf", choices=("on", "off"), default="on")
    p.add_argument("--crf-iters", type=_positive_int, default=None,
                   help="mean-field iterations at inference (default 10)")
    p.add_argument("--backend", choices=sorted(BACKEND_CHOICES), default=None)
    p.add_argument("--desk", action="store_true",
                   help="start from the CPU-sized desk settings (always on for experiment)")
    p.add_argument("--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="voxcrf", description=__doc__.split("\n")[0],
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, allow_abbrev=False)

    p = add("synth", "generate synthetic labeled rooms")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rooms", type=_positive_int, default=1)
    p.add_argument("--density", type=float, default=600.0, help="points per square meter")
    p.add_argument("--label-noise", type=float, default=0.0)

    p = add("train", "stage-1 then (with --crf on) stage-2 training")
    p.add_argument("--data", nargs="+", required=True, help="cloud files or directories")
    p.add_argument("--out", required=True, help="run directory")

    p = add("infer", "predict per-point labels for one cloud")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="prediction file")
    p.add_argument("--format", choices=("ascii", "ply-binary"), default="ascii")

    p = add("eval", "score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=_positive_int, default=None,
                   help="label count (default: inferred from both files)")
    p.add_argument("--out", help="directory for metrics.csv")

    p = add("gridsearch", "pick theta_alpha on validation clouds")
    p.add_argument("--model", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True, help="directory for the table and tuned checkpoint")

    p = add("export-ply", "convert a labeled ascii cloud to a colored binary PLY")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = add("experiment", "stage-1 vs manual CRF vs end-to-end CRF on synthetic rooms")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seed, nargs="+", default=[0, 1, 2])
    p.add_argument("--rooms", type=_positive_int, default=20, help="total rooms, 5 held out")
    return parser


# --- helpers -----------------------------------------------------------------

def sniff_format(path):
    """Pick the ascii format from the column count of the first data row."""
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts and not parts[0].startswith("#"):
                for name, ncol in FORMATS.items():
                    if len(parts) == ncol:
                        return name
                raise CloudFormatError(f"{path}: {len(parts)} columns matches no known format")
    raise CloudFormatError(f"{path}: empty file")


def read_cloud(path, label_count=None):
    return load_cloud(path, sniff_format(path), label_count)


def expand(paths):
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            found = sorted(q for q in p.iterdir() if q.suffix == ".txt")
            if not found:
                raise FileNotFoundError(f"{p}: no .txt clouds")
            out += found
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"{p}: no such file")
    return out


def read_clouds(paths):
    files = expand(paths)
    clouds = [read_cloud(f) for f in files]
    L = max(c.label_count for c in clouds)
    return [replace(c, label_count=L) for c in clouds]


def make_config(args):
    cfg = desk_config() if args.desk or args.command == "experiment" else TrainConfig()
    if args.config:
        cfg = parse_config_text(Path(args.config).read_text(), cfg)
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    if args.seed is not None:
        pairs["run.seed"] = args.seed
    if args.backend is not None:
        pairs["run.backend"] = BACKEND_CHOICES[args.backend]
    if args.crf_iters is not None:
        pairs["crf.test_iters"] = args.crf_iters
    if args.command == "train" and args.crf == "off":
        pairs["stage2.enabled"] = False
    return cfg.with_overrides(pairs)


# --- commands ----------------------------------------------------------------

def cmd_synth(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.run.seed
    for i in range(args.rooms):
        spec = synth.random_room(seed + i, args.density, args.label_noise)
        cloud = synth.generate(spec)
        path = out / f"room_{i:03d}.txt"
        save_cloud(cloud, path)
        print(f"{path}\t{len(cloud)} points")
    return 0


def cmd_train(args, cfg):
    clouds = read_clouds(args.data)
    model = train.build_model(cfg, clouds)
    curve = train.train(model, clouds, cfg)
    ckpt = train.save_run(args.out, model, curve)
    print(f"wrote {ckpt}")
    return 0


def cmd_infer(args, cfg):
    model = train.load_model(args.model)
    cloud = read_cloud(args.input)
    cfg = cfg.with_overrides({"run.voxel_size": model.voxel_size})
    net_L = model.network.config.label_count
    cloud = replace(cloud, label_count=max(net_L, cloud.label_count))
    params = model.crf if args.crf == "on" else None
    labels = predict(model.network, cloud, cfg, params, stats=model.stats)
    if np.any(labels < 0):
        raise RuntimeError("some points received no prediction")
    save_predictions(cloud, labels, args.out, args.format)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args, cfg):
    pred = read_cloud(args.pred)
    gt = read_cloud(args.gt)
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth points")
    L = args.classes or max(pred.label_count, gt.label_count)
    cm = accumulate(confusion_matrix(L), gt.labels, pred.labels)
    s = scores(cm)
    names = list(synth.CLASSES) if L == len(synth.CLASSES) else None
    sys.stdout.write(report_text(s, names))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report_csv(s, names))
        np.savetxt(out / "confusion.txt", cm, fmt="%d")
    return 0


def cmd_gridsearch(args, cfg):
    model = train.load_model(args.model)
    cfg = cfg.with_overrides({"run.voxel_size": model.voxel_size})
    clouds = read_clouds(args.data)
    best, table = train.grid_search_theta_alpha(model, clouds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gridsearch.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta_alpha", "mIOU"])
        for theta, miou in sorted(table.items()):
            w.writerow([theta, f"{miou:.6f}"])
    model.crf = model.crf.copy(theta_alpha=float(best))
    train.save_model(out / "model.ckpt", model)
    print(f"best theta_alpha {best} (mIOU {table[best]:.4f})")
    return 0


def cmd_export_ply(args, cfg):
    cloud = read_cloud(args.input)
    if np.any(cloud.labels < 0):
        raise ValueError("cannot color unlabeled points")
    save_predictions(cloud, cloud.labels, args.out, "ply-binary")
    print(f"wrote {args.out}")
    return 0


def cmd_experiment(args, cfg):
    if args.rooms < 6:
        raise ValueError("need at least 6 rooms (5 are held out)")
    results = experiment.run(tuple(args.seeds), args.rooms - 5, 5, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.as_dict() for r in results]
    with open(out / "experiment.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    summary = experiment.summarize(results)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "gridsearch": cmd_gridsearch, "export-ply": cmd_export_ply, "experiment": cmd_experiment,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"voxcrf: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
