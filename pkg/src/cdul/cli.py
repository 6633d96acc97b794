"""Command-line entry point.

    cdul build-cache --config synthetic
    cdul eval-pseudo --config synthetic
    cdul train --config synthetic train.pl_update_frequency=1
    cdul report runs/train_* --out report/

Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import subprocess
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .cache import cache_filename, cache_read, generate_or_resume
from .config import ExperimentConfig, load_config, make_backend, preset_names
from .dataset import (DatasetManifest, ClassVocabulary, SYNTHETIC_SCHEME, load_manifest,
                      make_synthetic_dataset)
from .errors import CDULError, ConfigError, MissingFileError
from .metrics import mean_average_precision
from .plots import plot_grid, plot_run, write_curves_csv
from .pseudo import tile_image
from .trainer import read_metrics_csv, train, write_run_outputs

log = logging.getLogger("cdul")


# --- helpers ----------------------------------------------------------------

def _git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def prepare_run_dir(config: ExperimentConfig, command: str, run_dir=None) -> Path:
    if run_dir is None:
        name = config.run_name or f"{command}_{config.dataset_tag}_{datetime.now():%Y%m%d-%H%M%S}"
        run_dir = Path(config.output_dir) / name
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config.to_json())
    import torch

    info = {"command": command, "seed": config.seed, "train_seed": config.train.seed,
            "version": __version__, "git": _git_revision(), "python": platform.python_version(),
            "torch": torch.__version__, "numpy": np.__version__,
            "started": datetime.now().isoformat(timespec="seconds")}
    (run_dir / "run_info.json").write_text(json.dumps(info, indent=2))
    return run_dir


def load_split(config: ExperimentConfig, split: str) -> DatasetManifest:
    d = config.dataset
    if d.name == "synthetic":
        s = d.synthetic
        n = s.n_samples if split == "train" else s.n_val
        return make_synthetic_dataset(n, s.n_classes, s.seed, split=split, image_size=s.image_size, grid=s.grid)
    return load_manifest(d.root, split, ClassVocabulary.voc(), include_difficult=d.include_difficult)


def cache_path(config: ExperimentConfig, backend_id: str, split: str, kind: str, k: int = 0) -> Path:
    slug = backend_id.replace(":", "_").replace("/", "_")
    return config.resolved_cache_dir / config.dataset_tag / split / slug / cache_filename(kind, k)


def _image_hw(path: str) -> tuple[int, int]:
    if path.startswith(SYNTHETIC_SCHEME):
        size = int(path.split("-r", 1)[1].split("-", 1)[0])
        return size, size
    from PIL import Image

    with Image.open(path) as im:
        return im.height, im.width


def _mean_snippets(manifest: DatasetManifest, k: int) -> float:
    counts = [math.ceil(h / k) * math.ceil(w / k) for h, w in map(_image_hw, (s.image_path for s in manifest.samples))]
    return float(np.mean(counts)) if counts else 0.0


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --- commands ---------------------------------------------------------------

def cmd_build_cache(config: ExperimentConfig, run_dir=None, backend=None) -> dict:
    """Global and per-k aggregate caches for each configured split, with timings."""
    run_dir = prepare_run_dir(config, "build-cache", run_dir)
    backend = backend or make_backend(config)
    rows = []
    for split in config.pseudo.cache_splits:
        manifest = load_split(config, split)
        manifest.save(run_dir / f"manifest_{split}.json")
        jobs = [("global", 0)] + [("aggregate", k) for k in config.pseudo.snippet_sizes]
        for kind, k in jobs:
            path = cache_path(config, backend.backend_id, split, kind, k)
            cache = generate_or_resume(manifest, kind, k, backend, path, zeta=config.pseudo.zeta,
                                       template=config.backend.template)
            gen = cache.generation
            row = {"split": split, "kind": kind, "snippet_size": k, "images": len(manifest),
                   "computed": gen["computed"], "resumed": gen["resumed"], "seconds": gen["seconds"],
                   "per_image_seconds": gen["per_image_seconds"],
                   "snippets_per_image": 1.0 if kind == "global" else _mean_snippets(manifest, k),
                   "path": str(path)}
            rows.append(row)
            print(f"{split} {kind}{'' if kind == 'global' else f' k={k}'}: computed {gen['computed']}, "
                  f"resumed {gen['resumed']}, remaining 0 ({gen['seconds']:.1f}s)")
    report = {"backend_id": backend.backend_id, "caches": rows}
    (run_dir / "timing.json").write_text(json.dumps(report, indent=2))
    fields = ["split", "kind", "snippet_size", "images", "computed", "resumed", "seconds",
              "per_image_seconds", "snippets_per_image"]
    _write_csv(run_dir / "timing.csv", fields, [[r[f] for f in fields] for r in rows])
    return report


def _require_cache(config, backend_id, split, kind, k=0):
    path = cache_path(config, backend_id, split, kind, k)
    if not path.exists():
        what = "global" if kind == "global" else f"aggregate k={k}"
        raise MissingFileError(f"no {what} cache for split {split!r} at {path}; "
                               f"run `cdul build-cache` with the same config first")
    return cache_read(path, expected_backend_id=backend_id)


def cmd_eval_pseudo(config: ExperimentConfig, run_dir=None, backend=None) -> dict:
    """mAP of global and final pseudo labels for every snippet size."""
    run_dir = prepare_run_dir(config, "eval-pseudo", run_dir)
    backend = backend or make_backend(config)
    split = config.dataset.train_split
    manifest = load_split(config, split)
    targets, names, ids = manifest.targets(), manifest.vocabulary.names, manifest.image_ids
    global_m = _require_cache(config, backend.backend_id, split, "global").matrix(ids).astype(np.float64)
    results = [("global", 0, mean_average_precision(global_m, targets, names))]
    for k in config.pseudo.snippet_sizes:
        cache = _require_cache(config, backend.backend_id, split, "aggregate", k)
        if cache.params.get("zeta") != config.pseudo.zeta:
            raise ConfigError(f"aggregate cache k={k} was built with zeta={cache.params.get('zeta')}, "
                              f"config asks for {config.pseudo.zeta}; rebuild into another cache_dir")
        final = 0.5 * (global_m + cache.matrix(ids).astype(np.float64))
        results.append((f"{k}x{k}", k, mean_average_precision(final, targets, names)))
    table = [[src, k, 100 * rep.map] for src, k, rep in results]
    _write_csv(run_dir / "pseudo_map.csv", ["source", "snippet_size", "map_percent"], table)
    report = {"split": split, "n_images": len(manifest),
              "rows": [{"source": src, "snippet_size": k, **rep.to_dict()} for src, k, rep in results]}
    (run_dir / "pseudo_map.json").write_text(json.dumps(report, indent=2))
    print(f"pseudo-label mAP on {config.dataset_tag}/{split} ({len(manifest)} images)")
    for src, k, value in table:
        print(f"  {src:>8}: {value:6.2f}")
    return report


def initial_pseudo_labels(config: ExperimentConfig, manifest: DatasetManifest, backend,
                          build_missing: bool = False) -> np.ndarray:
    split = manifest.split
    ids = manifest.image_ids
    needed = [("global", 0)]
    if config.pseudo.init_source == "final":
        needed.append(("aggregate", config.pseudo.init_snippet_size))
    mats = []
    for kind, k in needed:
        path = cache_path(config, backend.backend_id, split, kind, k)
        if not path.exists() and build_missing:
            generate_or_resume(manifest, kind, k, backend, path, zeta=config.pseudo.zeta,
                               template=config.backend.template)
        mats.append(_require_cache(config, backend.backend_id, split, kind, k).matrix(ids).astype(np.float64))
    return mats[0] if len(mats) == 1 else 0.5 * (mats[0] + mats[1])


def cmd_train(config: ExperimentConfig, run_dir=None, backend=None, build_missing: bool = False):
    """Gradient-alignment training run; everything lands in the run directory."""
    run_dir = prepare_run_dir(config, "train", run_dir)
    backend = backend or make_backend(config)
    train_m = load_split(config, config.dataset.train_split)
    val_m = load_split(config, config.dataset.val_split) if config.dataset.val_split else None
    init = initial_pseudo_labels(config, train_m, backend, build_missing)
    t0 = time.perf_counter()
    result = train(train_m, init, config.train, val_m, run_dir)
    write_run_outputs(result, run_dir)
    freq = config.train.pl_update_frequency
    write_curves_csv([(freq, result.log)], run_dir / "curves.csv")
    plot_run(result.log, freq, run_dir, result.initial_pl_map)
    summary = json.loads((run_dir / "summary.json").read_text())
    summary["seconds"] = time.perf_counter() - t0
    summary["pl_update_frequency"] = freq
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    f = summary["final"]
    print(f"{config.train.epochs} epochs, F={freq}: train mAP {100 * f['train_map']:.2f}, "
          f"pl mAP {100 * result.initial_pl_map:.2f} -> {100 * f['pl_map']:.2f}"
          + (f", val mAP {100 * f['val_map']:.2f}" if f["val_map"] is not None else "")
          + f"  [{run_dir}]")
    return result


def cmd_report(run_dirs, out_dir) -> dict:
    """Collect training runs into one summary CSV and a combined curve figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs, table, pseudo_tables = [], [], []
    for d in map(Path, run_dirs):
        if (d / "pseudo_map.csv").exists():
            with open(d / "pseudo_map.csv") as fh:
                pseudo_tables.extend({**row, "run": d.name} for row in csv.DictReader(fh))
        if not (d / "metrics.csv").exists():
            continue
        cfg = json.loads((d / "config.json").read_text())
        summary = json.loads((d / "summary.json").read_text())
        rows = read_metrics_csv(d / "metrics.csv")
        freq = cfg["train"]["pl_update_frequency"]
        runs.append((freq, rows, summary.get("initial_pl_map")))
        last = rows[-1]
        table.append([d.name, len(rows), freq, 100 * last.train_map, 100 * summary["initial_pl_map"],
                      100 * last.pl_map, "" if math.isnan(last.val_map) else 100 * last.val_map])
    if not runs and not pseudo_tables:
        raise MissingFileError("none of the given directories holds training or eval-pseudo outputs")
    report = {"training": table, "pseudo": pseudo_tables}
    if runs:
        _write_csv(out_dir / "training.csv", ["run", "epochs", "pl_update_frequency", "train_map",
                                            "pl_map_initial", "pl_map", "val_map"], table)
        write_curves_csv([(f, r) for f, r, _ in runs], out_dir / "curves.csv")
        plot_grid(runs, out_dir / "figure_map_curves.png")
    if pseudo_tables:
        _write_csv(out_dir / "pseudo_map.csv", ["run", "source", "snippet_size", "map_percent"],
                   [[r["run"], r["source"], r["snippet_size"], r["map_percent"]] for r in pseudo_tables])
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    for row in table:
        print("{}: {} epochs, F={}: train {:.2f}, pl {:.2f} -> {:.2f}, val {}".format(
            row[0], row[1], row[2], row[3], row[4], row[5], row[6] if row[6] == "" else f"{row[6]:.2f}"))
    return report


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdul", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help=f"YAML/JSON file or preset ({', '.join(preset_names())})")
        p.add_argument("--run-dir", help="write outputs here instead of output_dir/<generated name>")
        p.add_argument("overrides", nargs="*", metavar="key.path=value", help="dotted config overrides")
        return p

    experiment("build-cache", "compute global and aggregate similarity caches")
    experiment("eval-pseudo", "mAP of cached pseudo labels against ground truth")
    p = experiment("train", "gradient-alignment training run")
    p.add_argument("--build-missing", action="store_true", help="build required caches if absent")
    p = sub.add_parser("report", help="combine run directories into tables and figures")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.run_dirs, args.out)
            return 0
        config = load_config(args.config, args.overrides)
        if args.command == "build-cache":
            cmd_build_cache(config, args.run_dir)
        elif args.command == "eval-pseudo":
            cmd_eval_pseudo(config, args.run_dir)
        else:
            cmd_train(config, args.run_dir, build_missing=args.build_missing)
    except CDULError as exc:
        print(f"cdul {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
