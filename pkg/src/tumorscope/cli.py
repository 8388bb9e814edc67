"""``tumorscope`` command line: synth, train, search, extract, classify, evaluate, localize.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import classifiers as C
from . import cnn
from . import gradcam as G
from . import persistence
from .config import ConfigError, RunConfig
from .dataset import (Dataset, DatasetError, DatasetManifest, build_dataset, load_directory, preprocess,
                      split, synthesize)
from .features import FeatureFormatError, FeatureMatrix
from .imageio import ImageDecodeError, read_image, write_pnm
from .metrics import evaluate, reports_to_csv
from .plot import training_curves_svg

log = logging.getLogger("tumorscope")


class UsageError(Exception):
    """Bad flags or unusable input; exit code 2."""


INPUT_ERRORS = (UsageError, ConfigError, DatasetError, FeatureFormatError, ImageDecodeError,
                persistence.CheckpointError, cnn.ModelError, C.ClassifierError)


# -- argument parsing -----------------------------------------------------------

# flag dest -> (config section, key)
FLAG_KEYS = {
    "data": ("data", "root"),
    "positive": ("data", "positive"),
    "negative": ("data", "negative"),
    "size": ("data", "target_size"),
    "fraction": ("data", "split_fraction"),
    "split_seed": ("data", "split_seed"),
    "manifest": ("data", "manifest"),
    "synthetic": ("data", "synthetic"),
    "synthetic_size": ("data", "synthetic_size"),
    "synthetic_seed": ("data", "synthetic_seed"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "seed": ("train", "seed"),
    "checkpoint_interval": ("train", "checkpoint_interval"),
    "trials": ("search", "trials"),
    "budget_epochs": ("search", "budget_epochs"),
    "target_class": ("localize", "target_class"),
    "alpha": ("localize", "alpha"),
    "upsample": ("localize", "upsample"),
}


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--seed", type=int, help="training / search seed")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded numerics for byte-identical reruns")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--data", help="dataset root with one subdirectory per class")
        p.add_argument("--synthetic", type=int, metavar="N", help="use N+N generated images instead of --data")
        p.add_argument("--synthetic-size", type=int)
        p.add_argument("--synthetic-seed", type=int)
        p.add_argument("--positive", help="tumor class subdirectory (default yes)")
        p.add_argument("--negative", help="healthy class subdirectory (default no)")
        p.add_argument("--size", type=int, help="network input size S")
        p.add_argument("--fraction", type=float, help="training fraction of each class")
        p.add_argument("--split-seed", type=int)
        p.add_argument("--manifest", help="reuse the split recorded in this manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tumorscope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic two-class image directory")
    _common(p, data=False)
    p.add_argument("--count", type=int, default=200, help="images per class")
    p.add_argument("--image-size", type=int, default=64)

    p = sub.add_parser("train", help="train the scratch CNN")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-interval", type=int)

    p = sub.add_parser("search", help="random hyperparameter search")
    _common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--budget-epochs", type=int)

    p = sub.add_parser("extract", help="write CNN features as CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-only", action="store_true", help="only rows in the validation split")

    p = sub.add_parser("classify", help="fit the six classifiers on feature CSVs")
    _common(p, data=False)
    p.add_argument("features", nargs="+", help="feature CSV files (one grid row each)")
    p.add_argument("--manifest", help="train/val split by id; otherwise a stratified split")
    p.add_argument("--fraction", type=float)
    p.add_argument("--split-seed", type=int)

    p = sub.add_parser("evaluate", help="score the CNN head on the validation split")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("localize", help="Grad-CAM heatmaps and overlays")
    _common(p, data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--class", dest="target_class", type=int, choices=(0, 1),
                   help="explain this class instead of the predicted one")
    p.add_argument("--alpha", type=float)
    p.add_argument("--upsample", choices=("bilinear", "nearest"))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.merge_file(args.config)
    flags = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if hasattr(args, dest)}
    if getattr(args, "deterministic", None):
        flags[("train", "deterministic")] = True
    cfg.merge_flags(flags)
    return cfg


# -- shared helpers ---------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path exists and is not a directory: {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_data(cfg: RunConfig) -> tuple[Dataset, DatasetManifest]:
    d = cfg["data"]
    if d["synthetic"]:
        records = synthesize(int(d["synthetic"]), int(d["synthetic_size"]), int(d["synthetic_seed"]))
        source = f"synthetic:{d['synthetic']}x{d['synthetic_size']}@{d['synthetic_seed']}"
    else:
        if not d["root"]:
            raise UsageError("no dataset: pass --data DIR or --synthetic N")
        root = Path(str(d["root"]))
        if not root.is_dir():
            raise UsageError(f"dataset directory not found: {root}")
        records = load_directory(root, str(d["positive"]), str(d["negative"])).records
        source = str(root)
    if d["manifest"]:
        manifest = DatasetManifest.read(d["manifest"])
        missing = [r.id for r in records if r.id not in manifest.split_of()]
        if missing:
            raise DatasetError(f"{len(missing)} images not in manifest {d['manifest']}, e.g. {missing[0]}")
    else:
        manifest = split(records, float(d["split_fraction"]), int(d["split_seed"]), source,
                         int(d["target_size"]))
    blobs = [getattr(r, "blob", None) for r in records]
    return build_dataset(records, manifest, int(d["target_size"]), blobs), manifest


def model_spec(cfg: RunConfig) -> cnn.ModelSpec:
    m = cfg["model"]
    return cnn.ModelSpec(input_size=int(cfg["data"]["target_size"]), filters=m["filters"],
                         kernels=m["kernels"], dropout=float(m["dropout"]))


def train_config(cfg: RunConfig) -> cnn.TrainConfig:
    t = cfg["train"]
    return cnn.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], seed=t["seed"],
                           deterministic=bool(t["deterministic"]),
                           checkpoint_interval=t["checkpoint_interval"])


def _load_checkpoint(path) -> cnn.ScratchCNN:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return persistence.load(path)


def _check_size(model: cnn.ScratchCNN, cfg: RunConfig) -> None:
    if model.spec.input_size != cfg["data"]["target_size"]:
        log.info("using the checkpoint's input size %d", model.spec.input_size)
        cfg.set("data", "target_size", model.spec.input_size)


# -- commands -------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else int(cfg["data"]["synthetic_seed"])
    records = synthesize(args.count, args.image_size, seed)
    rows = io.StringIO()
    w = csv.writer(rows, lineterminator="\n")
    w.writerow(["id", "label", "cx", "cy", "radius", "amplitude"])
    for r in records:
        path = out / r.id
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pnm(path, r.pixels)
        b = r.blob
        w.writerow([r.id, r.label, *(["", "", "", ""] if b is None else
                                     [f"{b.cx:.6f}", f"{b.cy:.6f}", f"{b.radius:.6f}", f"{b.amplitude:.6f}"])])
    (out / "blobs.csv").write_bytes(rows.getvalue().encode("utf-8"))
    log.info("wrote %d images to %s", len(records), out)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    cfg.echo(out)
    ds, manifest = load_data(cfg)
    manifest.write(out / "manifest.txt")
    tcfg = train_config(cfg)
    model = cnn.ScratchCNN(model_spec(cfg), seed=tcfg.seed)
    logs = []

    def on_epoch(entry, m):
        logs.append(entry)
        (out / "epochs.csv").write_bytes(cnn.epochs_to_csv(logs).encode("utf-8"))
        if entry.epoch % tcfg.checkpoint_interval == 0:
            persistence.save(m, out / "last.tsck")

    res = cnn.train(model, ds, tcfg, on_epoch)
    persistence.save(res.best_model, out / "model.tsck")
    persistence.save(res.model, out / "last.tsck")
    (out / "curves.svg").write_bytes(training_curves_svg(res.logs).encode("utf-8"))
    print(f"best epoch {res.best_epoch}: val accuracy {res.best_val_acc:.4f} -> {out / 'model.tsck'}")
    return 0


def cmd_search(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    cfg.echo(out)
    ds, _ = load_data(cfg)
    res = cnn.random_search(ds, trials=int(cfg["search"]["trials"]),
                            budget_epochs=int(cfg["search"]["budget_epochs"]),
                            seed=int(cfg["train"]["seed"]), deterministic=bool(cfg["train"]["deterministic"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "filters", "kernels", "dropout", "lr", "batch_size", "val_acc", "val_loss", "error"])
    for t in res.trials:
        w.writerow([t.index, ",".join(map(str, t.spec.filters)), ",".join(map(str, t.spec.kernels)),
                    t.spec.dropout, f"{t.config.lr:.6g}", t.config.batch_size, f"{t.val_acc:.6f}",
                    f"{t.val_loss:.6f}", t.error])
    (out / "search.csv").write_bytes(buf.getvalue().encode("utf-8"))
    best = RunConfig(cfg.values)
    best.set("model", "filters", res.best_spec.filters)
    best.set("model", "kernels", res.best_spec.kernels)
    best.set("model", "dropout", res.best_spec.dropout)
    best.set("train", "lr", res.best_config.lr)
    best.set("train", "batch_size", res.best_config.batch_size)
    (out / "best.ini").write_bytes(best.to_text(["model", "train"]).encode("utf-8"))
    t = res.trials[res.best_index]
    print(f"best trial {t.index}: val accuracy {t.val_acc:.4f} -> {out / 'best.ini'}")
    return 0


def cmd_extract(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    model = _load_checkpoint(args.checkpoint)
    _check_size(model, cfg)
    cfg.echo(out)
    ds, _ = load_data(cfg)
    if args.eval_only:
        ds = ds.subset("val")
    fm = cnn.extract_features(model, ds)
    fm.write_csv(out / "features.csv")
    print(f"{len(fm)} rows x {fm.dim} features -> {out / 'features.csv'}")
    return 0


def _classify_split(fm: FeatureMatrix, cfg: RunConfig, manifest_path: str | None):
    if manifest_path:
        split_of = DatasetManifest.read(manifest_path).split_of()
        missing = [i for i in fm.ids if i not in split_of]
        if missing:
            raise DatasetError(f"{len(missing)} feature rows not in manifest, e.g. {missing[0]}")
        which = [split_of[i] for i in fm.ids]
    else:
        m = split(list(zip(fm.ids, fm.y.tolist())), float(cfg["data"]["split_fraction"]),
                  int(cfg["data"]["split_seed"]))
        which = [s for _, _, s in m.entries]
    tr = [i for i, s in enumerate(which) if s == "train"]
    va = [i for i, s in enumerate(which) if s == "val"]
    if not tr or not va:
        raise DatasetError("split leaves the train or validation part empty")
    return fm.take(tr), fm.take(va)


def _classifier_config(cfg: RunConfig) -> C.ClassifierConfig:
    return C.ClassifierConfig(**{k: v for k, v in cfg["classifiers"].items()})


def cmd_classify(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    cfg.echo(out, ["data", "classifiers"])
    ccfg = _classifier_config(cfg)
    grid: dict[str, dict] = {}
    metric_rows = []
    for path in args.features:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"feature file not found: {p}")
        fm = FeatureMatrix.read_csv(p)
        train, val = _classify_split(fm, cfg, args.manifest)
        name = p.stem if p.stem not in grid else str(p)
        grid[name] = C.fit_all(train, val, ccfg)
        metric_rows += [(name, k, r) for k, r in grid[name].items() if not isinstance(r, Exception)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["features", *C.CLASSIFIER_ORDER])
    for name, res in grid.items():
        w.writerow([name, *(f"{res[k].accuracy:.6f}" if not isinstance(res[k], Exception)
                            and res[k].accuracy is not None else "err" for k in C.CLASSIFIER_ORDER)])
    (out / "grid.csv").write_bytes(buf.getvalue().encode("utf-8"))
    table = C.render_grid(grid)
    (out / "grid.txt").write_bytes(table.encode("utf-8"))
    (out / "metrics.csv").write_bytes(reports_to_csv(metric_rows).encode("utf-8"))
    print(table, end="")
    failed = sum(isinstance(r, Exception) for res in grid.values() for r in res.values())
    total = sum(len(res) for res in grid.values())
    return 1 if failed == total else 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    model = _load_checkpoint(args.checkpoint)
    _check_size(model, cfg)
    cfg.echo(out)
    ds, _ = load_data(cfg)
    va = ds.subset("val")
    if len(va) == 0:
        raise DatasetError("the validation split is empty")
    pred = cnn.predict_logits(model, va.images).argmax(1)
    rep = evaluate(pred, va.labels)
    (out / "metrics.csv").write_bytes(reports_to_csv([("scratch_cnn", "cnn_head", rep)]).encode("utf-8"))
    cm = rep.confusion
    print(f"accuracy {rep.accuracy:.4f} (tp={cm.tp} tn={cm.tn} fp={cm.fp} fn={cm.fn})")
    return 0


def cmd_localize(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    model = _load_checkpoint(args.checkpoint)
    cfg.echo(out, ["localize"])
    lc = cfg["localize"]
    target = None if lc["target_class"] < 0 else int(lc["target_class"])
    size = model.spec.input_size
    failures = []
    stems: set[str] = set()
    for path in args.images:
        p = Path(path)
        try:
            pixels, maxval = read_image(p)
            image = preprocess(pixels, size, maxval)
            h = G.gradcam(model, image[None, None].astype(np.float32), target, str(p), str(lc["upsample"]))
        except (OSError, ImageDecodeError, DatasetError, G.GradCamError) as exc:
            log.error("%s: %s", p, exc)
            failures.append(p)
            continue
        stem = p.stem
        while stem in stems:
            stem += "_"
        stems.add(stem)
        G.write_outputs(out, stem, h, image, float(lc["alpha"]))
        flag = " (degenerate)" if h.degenerate else ""
        print(f"{p}: class {h.target_class} (predicted {h.predicted_class}){flag}")
    if failures and len(failures) == len(args.images):
        log.error("every image failed")
        return 1
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "search": cmd_search,
    "extract": cmd_extract,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "localize": cmd_localize,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        with cnn.deterministic_numerics(bool(cfg["train"]["deterministic"])):
            return COMMANDS[args.command](args, cfg)
    except INPUT_ERRORS as exc:
        print(f"tumorscope {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, don't dump a traceback
        log.debug("traceback", exc_info=True)
        print(f"tumorscope {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
