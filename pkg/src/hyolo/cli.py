"""Command-line entry point: ``hyolo <subcommand> ...``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Run directories always hold ``config.txt``, ``loss.csv``, ``report.csv``,
``summary.txt`` and ``model.ckpt``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__, config
from .config import RunConfig, parse_kv
from .errors import ConfigError, DataError, DatasetEmpty, HyoloError, NumericError
from .evalkit import evaluate, match, read_detections, write_detections
from .synthdata import (GenConfig, generate_dataset, leaf_histogram, load_dataset, load_split,
                        read_labels)
from .taxonomy import load_taxonomy
from .tensor import load_checkpoint, save_checkpoint

log = logging.getLogger("hyolo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

REPORT_COLUMNS = ("run", "variant", "alpha", "cls", "flat_f1", "l0.flat_f1", "hier_precision", "hier_f1",
                  "hier_f1_worst", "tp_conf", "fp_conf", "fp_same_subgraph", "path_consistency")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _load_config(cls, path, overrides):
    values = {}
    if path is not None:
        try:
            values = parse_kv(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    values.update(_overrides(overrides))
    return config.from_mapping(cls, values)


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(GenConfig, args.config, args.set)
    out = generate_dataset(cfg, args.out)
    ds = load_dataset(out, splits=("train",))
    hist = leaf_histogram(ds["train"].labels, ds.tax)
    print(f"wrote {out} (depth {cfg.depth}, levels {ds.tax.level_sizes})")
    print("leaf histogram (train):")
    for leaf, count in hist.items():
        print(f"  {leaf} {count}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import evaluate_split, model_for, train

    cfg = _load_config(RunConfig, args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text(cfg))
    ds = load_dataset(args.data, splits=("train", "val"))
    model = model_for(cfg, ds.tax)

    def progress(epoch, rows, f1):
        total = sum(r["total"] for r in rows) / len(rows)
        print(f"epoch {epoch:3d}  loss {total:.4f}  val_f1 {f1:.4f}", flush=True)

    res = train(model, ds, cfg, on_epoch=None if args.quiet else progress)
    (out / "loss.csv").write_text(res.loss_csv())
    save_checkpoint(out / "model.ckpt", model.state_dict())
    report = evaluate_split(model, ds["val"], cfg)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(_summary_text(report, cfg, split="val", extra={
        "best_epoch": res.best_epoch, "epochs_run": len(res.val_f1), "stopped_early": int(res.stopped_early)}))
    print(f"best epoch {res.best_epoch} (val F1 {res.best_f1:.4f}); run saved to {out}")
    return EXIT_OK


def _summary_text(report, cfg: RunConfig | None, split: str, extra: dict | None = None) -> str:
    head = {"split": split}
    if cfg is not None:
        head.update({"variant": cfg.variant, "alpha": cfg.alpha, "cls": cfg.cls, "seed": cfg.seed})
    head.update(extra or {})
    lines = [f"{k}={v}" for k, v in head.items()]
    return "\n".join(lines) + "\n" + report.summary_text()


def cmd_eval(args) -> int:
    data = Path(args.data)
    if (args.checkpoint is None) == (args.detections is None):
        raise ConfigError("eval needs exactly one of --checkpoint or --detections")
    out = Path(args.out) if args.out else None
    if args.checkpoint is not None:
        from .training import evaluate_split, model_for, predict

        ckpt = Path(args.checkpoint)
        cfg_path = Path(args.config) if args.config else ckpt.parent / "config.txt"
        cfg = _load_config(RunConfig, cfg_path, args.set)
        tax = load_taxonomy(data / "taxonomy.txt")
        split = load_split(data, args.split, tax)
        model = model_for(cfg, tax)
        model.load_state_dict(load_checkpoint(ckpt))
        dets = predict(model, split.images, cfg.conf, cfg.iou)
        report = evaluate_split(model, split, cfg, dets)
        out = out or ckpt.parent
        if args.dump:
            dump = out / "detections" / args.split
            dump.mkdir(parents=True, exist_ok=True)
            for stem, d in zip(split.stems, dets):
                write_detections(dump / f"{stem}.txt", d)
    else:
        cfg = _load_config(RunConfig, args.config, args.set) if (args.config or args.set) else RunConfig()
        tax = load_taxonomy(data / "taxonomy.txt")
        label_dir = data / "labels" / args.split
        stems = sorted(p.stem for p in label_dir.glob("*.txt"))
        if not stems:
            raise DatasetEmpty(f"no label files in {label_dir}")
        det_dir = Path(args.detections)
        results = []
        for stem in stems:
            truths = read_labels(label_dir / f"{stem}.txt", tax)
            dpath = det_dir / f"{stem}.txt"
            preds = read_detections(dpath, tax.depth) if dpath.exists() else []
            results.append(match(preds, truths, cfg.match_iou))
        report = evaluate(results, tax, mode=cfg.metric_mode)
        cfg = None if not (args.config or args.set) else cfg
        out = out or det_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(_summary_text(report, cfg, split=args.split))
    s = report.summary()
    print(f"flat F1 {s['flat_f1']:.4f}  hier F1 {s['hier_f1']:.4f}  worst class {s['hier_f1_worst']:.4f}  "
          f"-> {out}")
    return EXIT_OK


def cmd_validate_tax(args) -> int:
    tax = load_taxonomy(args.file)
    print(f"ok: depth {tax.depth}, classes per level {tax.level_sizes}, {len(tax.leaves)} leaves")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .training import composite_gradcheck

    cfg = _load_config(RunConfig, args.config, args.set) if (args.config or args.set) else RunConfig()
    err = composite_gradcheck(cfg.variant, size=args.size, width=args.width, alpha=cfg.alpha or 25.0,
                              seed=cfg.seed, max_coords=args.coords)
    ok = err < args.tol
    print(f"composite loss gradcheck ({cfg.variant}, {args.size}x{args.size}): max rel err {err:.3e} "
          f"{'<' if ok else '>='} {args.tol:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


def _read_summary(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        k, sep, v = line.partition("=")
        if sep:
            out[k] = v
    return out


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        path = Path(run) / "summary.txt"
        if not path.exists():
            raise DataError(f"{path} not found")
        s = _read_summary(path)
        rows.append([Path(run).name] + [s.get(k, "") for k in REPORT_COLUMNS[1:]])
    key = {"alpha": 2, "cls": 3}.get(args.sort, 1)
    rows.sort(key=lambda r: (float(r[key]) if key > 1 and r[key] else 0.0, r[1], r[0]))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


# -- wiring -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyolo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log debug output")
    sub = p.add_subparsers(dest="command", required=True)

    def with_set(sp):
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    g = sub.add_parser("gen-data", help="generate a synthetic hierarchical dataset")
    g.add_argument("--config", help="generator config (key=value)")
    g.add_argument("--out", required=True, help="output dataset directory")
    with_set(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a run directory")
    t.add_argument("--config", help="run config (key=value)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--quiet", action="store_true", help="no per-epoch progress")
    with_set(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or detection dumps on a split")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--checkpoint", help="model.ckpt; its config.txt is read from the same directory")
    e.add_argument("--detections", help="directory of per-image detection dumps")
    e.add_argument("--config", help="run config (defaults to config.txt next to the checkpoint)")
    e.add_argument("--out", help="where to write report.csv and summary.txt")
    e.add_argument("--dump", action="store_true", help="also write per-image detection dumps")
    with_set(e)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("validate-tax", help="parse and validate a taxonomy file")
    v.add_argument("file")
    v.set_defaults(func=cmd_validate_tax)

    gc = sub.add_parser("gradcheck", help="central-difference check of the composite loss")
    gc.add_argument("--config", help="run config; variant, alpha and seed are used")
    gc.add_argument("--size", type=int, default=16, help="image side in pixels")
    gc.add_argument("--width", type=int, default=4, help="channel width of the tiny model")
    gc.add_argument("--coords", type=int, default=8, help="coordinates checked per parameter (0 = all)")
    gc.add_argument("--tol", type=float, default=1e-4)
    with_set(gc)
    gc.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="tabulate run directories into one CSV")
    r.add_argument("runs", nargs="+", help="run directories")
    r.add_argument("--sort", choices=("variant", "alpha", "cls"), default="variant")
    r.add_argument("--out", help="CSV path (default stdout)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, HyoloError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
