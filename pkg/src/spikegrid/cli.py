"""Command-line interface: ``spikegrid {train,eval,predict-map,sweep,gen-synthetic}``.

Exit codes: 0 success, 2 usage/config/data error, 3 runtime training error.
Every output file is written to a temporary name and renamed into place, and
nothing is written until all inputs have been read and validated.
"""

import argparse
import colorsys
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import cube_bytes, generate_synthetic, labels_bytes, prepare
from .errors import (ConfigError, ConvergenceError, DataError, NonFiniteError, ShapeError,
                     TrainingError)
from .network import KERNEL_MODES
from .training import EpochRecord, Metrics, classify, evaluate, train

log = logging.getLogger("spikegrid")

EXIT_OK, EXIT_USAGE, EXIT_TRAINING = 0, 2, 3
CHUNK = 4096  # patches materialised at once; a multiple of the eval batch size

SWEEP_AXES = {"spatial": "patch_size", "timesteps": "time_steps",
              "kernels": "kernels", "width": "width_factor"}
SWEEP_COLUMNS = ("value", "oa_mean", "oa_std", "aa_mean", "aa_std", "kappa_mean", "kappa_std",
                 "train_seconds", "test_seconds")


# ---------------------------------------------------------------- file output

def atomic_write(path, data):
    """Write ``data`` (bytes or str) to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(path):
    """Rows of a CSV written by this module, numeric fields converted back."""
    def conv(v):
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
        return v
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], [[conv(v) for v in r] for r in rows[1:]]


def pm(mean, std) -> str:
    """Percent display in the ``99.51±0.23`` style."""
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def class_palette(num_classes: int) -> np.ndarray:
    """``[K, 3]`` uint8 colours for classes 1..K; distinct for K <= 32, never black.

    Hues step by the golden ratio; brightness alternates over four levels so
    neighbouring class indices stay easy to tell apart.
    """
    colors = []
    for i in range(num_classes):
        h = (i * 0.618033988749895) % 1.0
        v = (1.0, 0.78, 0.9, 0.66)[i % 4]
        s = 0.85 if (i // 4) % 2 == 0 else 0.6
        colors.append([round(255 * c) for c in colorsys.hsv_to_rgb(h, s, v)])
    return np.asarray(colors, dtype=np.uint8).reshape(num_classes, 3)


def ppm_bytes(class_map, palette) -> bytes:
    """Binary P6 image; class 0 is black, class k uses ``palette[k-1]``."""
    h, w = class_map.shape
    lut = np.vstack([np.zeros((1, 3), np.uint8), palette])
    return f"P6\n{w} {h}\n255\n".encode() + lut[class_map].tobytes()


# ---------------------------------------------------------------- experiment

@dataclass
class RunOutcome:
    repeat: int
    seed: int
    metrics: Metrics
    history: list
    params: dict
    train_seconds: float
    test_seconds: float


def classify_coords(net, params, data, coords):
    out = np.empty(len(coords), dtype=np.int64)
    for start in range(0, len(coords), CHUNK):
        sl = slice(start, start + CHUNK)
        out[sl] = classify(net, params, data.patches(coords[sl]))
    return out


def prepared(cfg: RunConfig, cube, labels, repeat=0):
    return prepare(cube, labels, cfg.split_spec(repeat), cfg.pca_components,
                   cfg.doc["network"]["patch_size"])


def run_once(cfg: RunConfig, cube, labels, repeat=0, on_epoch=None) -> RunOutcome:
    data = prepared(cfg, cube, labels, repeat)
    net = cfg.network_spec(labels.num_classes)
    tcfg = cfg.train_config(repeat)
    t0 = time.perf_counter()
    res = train(net, data.patches(data.train_coords), data.targets(data.train_coords), tcfg,
                on_epoch=on_epoch)
    t1 = time.perf_counter()
    pred = classify_coords(net, res.params, data, data.test_coords)
    t2 = time.perf_counter()
    _, m = evaluate(pred, data.targets(data.test_coords), labels.num_classes)
    return RunOutcome(repeat, tcfg.seed, m, res.history, res.params, t1 - t0, t2 - t1)


def summarize(values):
    """Mean and sample standard deviation (0 for a single run)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


# ---------------------------------------------------------------- commands

def _load(args):
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides("train", seed=args.seed).with_overrides("split", seed=args.seed)
    cube, labels = cfg.load_data()
    cfg.network_spec(labels.num_classes)
    return cfg, cube, labels


def cmd_train(args) -> int:
    cfg, cube, labels = _load(args)
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    for r in range(args.repeats):  # fail on bad splits before any training
        prepared(cfg, cube, labels, r)
    net = cfg.network_spec(labels.num_classes)

    outcomes = []
    for r in range(args.repeats):
        def on_epoch(rec, r=r):
            log.info("run %d epoch %d lr %.4g loss %.4f val OA %.4f",
                     r, rec.epoch, rec.lr, rec.loss, rec.oa)
        out = run_once(cfg, cube, labels, r, on_epoch)
        outcomes.append(out)
        print(f"run {r} seed {out.seed}: OA {out.metrics.oa:.4f} AA {out.metrics.aa:.4f} "
              f"Kappa {out.metrics.kappa:.4f} ({out.train_seconds:.1f}s train, "
              f"{out.test_seconds:.1f}s test)")

    files = {}
    for out in outcomes:
        name = "model.sgck" if out.repeat == 0 else f"model_run{out.repeat}.sgck"
        files[name] = checkpoint.dumps(net, out.params, {"seed": out.seed, "repeat": out.repeat})
    files["epochs.csv"] = csv_text(("run",) + EpochRecord.FIELDS,
                                   [[o.repeat] + rec.row() for o in outcomes for rec in o.history])
    rows = [[o.repeat, o.seed, o.metrics.oa, o.metrics.aa, o.metrics.kappa,
             o.train_seconds, o.test_seconds] for o in outcomes]
    files["metrics.csv"] = csv_text(
        ("run", "seed", "oa", "aa", "kappa", "train_seconds", "test_seconds"), rows)
    columns = {"oa": [o.metrics.oa for o in outcomes], "aa": [o.metrics.aa for o in outcomes],
               "kappa": [o.metrics.kappa for o in outcomes],
               "train_seconds": [o.train_seconds for o in outcomes],
               "test_seconds": [o.test_seconds for o in outcomes]}
    summary = []
    for key, values in columns.items():
        mean, std = summarize(values)
        display = pm(mean, std) if key in ("oa", "aa", "kappa") else f"{mean:.2f}±{std:.2f}"
        summary.append([key, mean, std, display])
    files["metrics_summary.csv"] = csv_text(("metric", "mean", "std", "display"), summary)
    for name, data in files.items():
        atomic_write(cfg.output_dir / name, data)
    for key, _, _, display in summary[:3]:
        print(f"{key.upper()}: {display}")
    return EXIT_OK


def _restore(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    cfg, cube, labels = _load(args)
    net = cfg.network_spec(labels.num_classes)
    ckpt = checkpoint.load(args.checkpoint, expect=net)
    data = prepared(cfg, cube, labels)
    return cfg, labels, net, ckpt.params, data


def _metrics_rows(m: Metrics, seconds):
    return [[m.oa, m.aa, m.kappa, seconds] + [float(a) for a in m.per_class_accuracy]]


def _metrics_header(k):
    return ("oa", "aa", "kappa", "test_seconds") + tuple(f"class{i + 1}" for i in range(k))


def cmd_eval(args) -> int:
    cfg, labels, net, params, data = _restore(args)
    t0 = time.perf_counter()
    pred = classify_coords(net, params, data, data.test_coords)
    seconds = time.perf_counter() - t0
    _, m = evaluate(pred, data.targets(data.test_coords), labels.num_classes)
    atomic_write(cfg.output_dir / "eval_metrics.csv",
                 csv_text(_metrics_header(labels.num_classes), _metrics_rows(m, seconds)))
    print(f"OA {m.oa:.4f} AA {m.aa:.4f} Kappa {m.kappa:.4f}")
    return EXIT_OK


def cmd_predict_map(args) -> int:
    cfg, labels, net, params, data = _restore(args)
    t0 = time.perf_counter()
    # test pixels first and on their own, so batches match the training run's evaluation
    test_pred = classify_coords(net, params, data, data.test_coords)
    seconds = time.perf_counter() - t0
    _, m = evaluate(test_pred, data.targets(data.test_coords), labels.num_classes)

    class_map = np.zeros(labels.labels.shape, dtype=np.int64)
    class_map[data.test_coords[:, 0], data.test_coords[:, 1]] = test_pred
    rest = [data.train_coords]
    if args.full:
        rest.append(np.argwhere(labels.labels == 0))
    rest = np.concatenate(rest)
    if len(rest):
        class_map[rest[:, 0], rest[:, 1]] = classify_coords(net, params, data, rest)
    atomic_write(cfg.output_dir / "map.ppm", ppm_bytes(class_map, class_palette(net.num_classes)))
    atomic_write(cfg.output_dir / "map_metrics.csv",
                 csv_text(_metrics_header(labels.num_classes), _metrics_rows(m, seconds)))
    print(f"map {labels.labels.shape[1]}x{labels.labels.shape[0]} written; "
          f"OA {m.oa:.4f} AA {m.aa:.4f} Kappa {m.kappa:.4f}")
    return EXIT_OK


def parse_sweep_value(axis, raw):
    """Canonical value for a sweep axis; raises ConfigError for anything invalid."""
    if axis == "kernels":
        v = raw.strip().strip("()").replace(" ", "")
        if v.lower() == "mixed":
            v = "mixed"
        if v not in KERNEL_MODES:
            raise ConfigError(f"invalid kernels value {raw!r}; choose from {sorted(KERNEL_MODES)}")
        return v
    try:
        v = int(raw)
    except ValueError:
        raise ConfigError(f"invalid {axis} value {raw!r}: expected an integer") from None
    if v < 1:
        raise ConfigError(f"invalid {axis} value {v}: must be >= 1")
    if axis == "spatial" and v % 2 == 0:
        raise ConfigError(f"invalid spatial value {v}: patch size must be odd")
    return v


def _sweep_job(job):
    cfg, cube, labels, repeat = job
    out = run_once(cfg, cube, labels, repeat)
    m = out.metrics
    return [m.oa, m.aa, m.kappa, out.train_seconds, out.test_seconds]


def worker_cap(requested: int) -> int:
    cap = os.environ.get("SPIKEGRID_THREADS")
    n = max(1, requested)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"SPIKEGRID_THREADS must be an integer, got {cap!r}") from None
    return n


def cmd_sweep(args) -> int:
    axis = args.axis.lower().replace("_", "").replace("-", "")
    aliases = {"spatialsize": "spatial", "timestep": "timesteps", "kernel": "kernels",
               "widthfactor": "width"}
    axis = aliases.get(axis, axis)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; choose from {sorted(SWEEP_AXES)}")
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    cfg, cube, labels = _load(args)
    values = [parse_sweep_value(axis, v) for v in args.values]
    configs = []
    for v in values:
        c = cfg.with_overrides("network", **{SWEEP_AXES[axis]: v})
        c.network_spec(labels.num_classes)  # every value validated before the first run
        for r in range(args.repeats):
            prepared(c, cube, labels, r)
        configs.append(c)

    jobs = [(c, cube, labels, r) for c in configs for r in range(args.repeats)]
    workers = worker_cap(args.jobs)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]

    runs, table = [], []
    for i, v in enumerate(values):
        chunk = results[i * args.repeats:(i + 1) * args.repeats]
        for r, res in enumerate(chunk):
            runs.append([v, r] + res)
        cols = list(zip(*chunk))
        row = [v]
        for j in range(3):
            row += list(summarize(cols[j]))
        row += [summarize(cols[3])[0], summarize(cols[4])[0]]
        table.append(row)
        print(f"{axis}={v}: OA {pm(row[1], row[2])} AA {pm(row[3], row[4])} "
              f"Kappa {pm(row[5], row[6])}")
    atomic_write(cfg.output_dir / f"sweep_{axis}.csv", csv_text(SWEEP_COLUMNS, table))
    atomic_write(cfg.output_dir / f"sweep_{axis}_runs.csv",
                 csv_text(("value", "run", "oa", "aa", "kappa", "train_seconds",
                           "test_seconds"), runs))
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    cube, labels = generate_synthetic(args.classes, args.height, args.width, args.bands,
                                      args.separation, args.sigma, args.seed)
    out = Path(args.out_dir)
    atomic_write(out / "synthetic.hsic", cube_bytes(cube))
    atomic_write(out / "synthetic.hsil", labels_bytes(labels))
    if args.write_config:
        doc = {"data": {"cube": str((out / "synthetic.hsic").resolve()),
                        "labels": str((out / "synthetic.hsil").resolve()),
                        "pca_components": min(30, args.bands)},
               "network": {"patch_size": 9, "time_steps": 10},
               "train": {"epochs": 30},
               "split": {"mode": "count", "value": 50, "seed": args.seed},
               "output_dir": str((out / "run").resolve())}
        atomic_write(args.write_config, json.dumps(doc, indent=2) + "\n")
    print(f"wrote {out / 'synthetic.hsic'} and {out / 'synthetic.hsil'}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="spikegrid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the training and split seeds")
        if ckpt:
            sp.add_argument("--checkpoint", required=True, help="trained .sgck file")

    sp = sub.add_parser("train", help="train and evaluate on the configured split")
    common(sp)
    sp.add_argument("--repeats", type=int, default=1, help="independent runs (seeds s..s+n-1)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(sp, ckpt=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict-map", help="classify the scene and write a PPM map")
    common(sp, ckpt=True)
    sp.add_argument("--full", action="store_true", help="also classify unlabeled pixels")
    sp.set_defaults(func=cmd_predict_map)

    sp = sub.add_parser("sweep", help="one training run per value of an ablation axis")
    common(sp)
    sp.add_argument("--axis", required=True, help="spatial | timesteps | kernels | width")
    sp.add_argument("--values", required=True, nargs="+",
                    help="axis values, e.g. 9 11 13 or 1,3 3,5 mixed")
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--jobs", type=int, default=1, help="parallel runs (capped by SPIKEGRID_THREADS)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gen-synthetic", help="write a synthetic cube and label map")
    sp.add_argument("--out-dir", default=".")
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--bands", type=int, default=20)
    sp.add_argument("--separation", type=float, default=1.0)
    sp.add_argument("--sigma", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--write-config", metavar="PATH", help="also write a starter config here")
    sp.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, DataError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NonFiniteError, ConvergenceError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
