"""``rainforge`` command-line entry point.

Every run writes ``run.cfg`` to its output directory: the fully resolved
configuration, which reproduces the run via ``rainforge <command> --config
run.cfg``.  Exit status is 0 on success, 1 if any item failed (the batch
still completes), 2 on a usage, configuration or fatal input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__, ops
from .attack import attack_classifier, attack_detector, image_seed
from .augment import augment_dataset
from .config import COMMANDS, KEYS, format_config, load_config
from .errors import ConfigError, RainforgeError
from .imageio import (
    encode_png, format_boxes, parse_boxes, read_image, read_manifest, write_image, write_manifest,
    write_rain_png,
)
from .metrics import average_precision, psnr, ssim
from .rain import composite, generate_rain_layer, random_factors
from .shapes import LabeledDataset, make_classification_data, make_detection_data
from .victim import ToyDetector, load_model, save_model, train_victim

log = logging.getLogger("rainforge")

EXIT_OK, EXIT_ITEM_ERRORS, EXIT_FATAL = 0, 1, 2
_FLAG_KEYS = [k for k in KEYS if k not in ("command", "version")]


def build_parser():
    parser = argparse.ArgumentParser(prog="rainforge", description="Adversarial rain generation toolkit.")
    parser.add_argument("--version", action="version", version=f"rainforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in _FLAG_KEYS:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE")
    return parser


# -- helpers ------------------------------------------------------------------


def _write_report(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _write_errors(out, errors):
    write_manifest(out / "errors.tsv", ("id", "error"),
                   [{"id": i, "error": str(e).replace("\t", " ").replace("\n", " ")} for i, e in errors])


def _is_detection(manifest):
    return "boxes" in manifest.columns


def load_labeled(path):
    """Labelled images from a manifest with columns ``id path label`` or ``id path boxes``."""
    m = read_manifest(path, required=("id", "path"))
    if "label" not in m.columns and "boxes" not in m.columns:
        raise RainforgeError(f"{path}: manifest needs a 'label' or 'boxes' column")
    images = [read_image(m.path(r, "path")) for r in m.rows]
    if len({im.shape for im in images}) > 1:
        raise RainforgeError(f"{path}: training images must share one shape")
    stack = np.stack(images) if images else np.zeros((0, 32, 32, 3), np.float32)
    if _is_detection(m):
        return LabeledDataset(stack, annotations=[parse_boxes(r["boxes"]) for r in m.rows], split=Path(path).stem)
    return LabeledDataset(stack, labels=np.array([int(r["label"]) for r in m.rows], np.int64), split=Path(path).stem)


def _model_view(model, shape):
    size = (model.input_size, model.input_size)
    return None if tuple(shape[:2]) == size else partial(ops.resize_bilinear, size=size)


def _to_model(model, image):
    return ops.resize_bilinear(image, (model.input_size, model.input_size)).data


# -- commands -----------------------------------------------------------------


def _write_dataset(out, split, ds):
    rows = []
    for i, img in enumerate(ds.images):
        rel = f"{split}/{i:05d}.png"
        write_image(out / rel, img)
        row = {"id": f"{split}-{i:05d}", "path": rel}
        if ds.annotations is not None:
            row["boxes"] = format_boxes(ds.annotations[i])
        else:
            row["label"] = int(ds.labels[i])
        rows.append(row)
    cols = ("id", "path", "boxes") if ds.annotations is not None else ("id", "path", "label")
    write_manifest(out / f"{split}.tsv", cols, rows)


def cmd_generate(cfg, out):
    if cfg.kind in ("classification", "detection"):
        make = make_classification_data if cfg.kind == "classification" else make_detection_data
        for ds in make(n_train=cfg.n_train, n_test=cfg.n_test, size=cfg.size, seed=cfg.seed):
            _write_dataset(out, ds.split, ds)
        return []
    # kind = rain: normal rain over every image of the input manifest
    if not cfg.input:
        raise ConfigError("generate with kind = rain needs an input manifest")
    m = read_manifest(cfg.input, required=("id", "path"))
    rows, errors = [], []
    for idx, r in enumerate(m.rows):
        try:
            clean = read_image(m.path(r, "path"))
            h, w = clean.shape[:2]
            factors = random_factors(h, w, cfg.bounds(), cfg.steps, (cfg.interval_low, cfg.interval_high),
                                     image_seed(cfg.seed, idx))
            layer = generate_rain_layer(factors)
        except (RainforgeError, ValueError) as exc:
            errors.append((r["id"], exc))
            continue
        write_rain_png(out / "rain" / f"{r['id']}.png", layer)
        write_image(out / "rainy" / f"{r['id']}.png", composite(clean, layer))
        rows.append({"id": r["id"], "clean": str(m.path(r, "path").resolve()),
                     "rainy": f"rainy/{r['id']}.png", "rain": f"rain/{r['id']}.png"})
    write_manifest(out / "pairs.tsv", ("id", "clean", "rainy", "rain"), rows)
    return errors


def cmd_train(cfg, out):
    if cfg.input:
        train = load_labeled(cfg.input)
        test = load_labeled(cfg.test_input) if cfg.test_input else None
    else:
        make = make_detection_data if cfg.kind == "detection" else make_classification_data
        train, test = make(n_train=cfg.n_train, n_test=cfg.n_test, size=cfg.size, seed=cfg.seed)
    model, rep = train_victim(train, epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed, test=test,
                              batch_size=cfg.batch_size)
    save_model(out / "model.rfmd", model)
    _write_report(out / "report.json", {
        "metric": rep.metric_name, "train": rep.train_metric, "test": rep.test_metric,
        "epoch_losses": [float(x) for x in rep.epoch_losses],
    })
    log.info("train %s %.4f, test %s", rep.metric_name, rep.train_metric, rep.test_metric)
    return []


def _attack_item(job, model, cfg):
    idx, item_id, path, target_text = job
    detection = isinstance(model, ToyDetector)
    try:
        clean = read_image(path)
        target = parse_boxes(target_text) if detection else int(target_text)
        h, w = clean.shape[:2]
        acfg = cfg.attack_config("detection" if detection else "classification")
        seed = image_seed(cfg.seed, idx)
        f0 = random_factors(h, w, acfg.bounds, acfg.steps, acfg.interval, seed)
        view = _model_view(model, clean.shape)
        if detection:
            rep = attack_detector(clean, target, model, f0, acfg, view=view)
        else:
            rep = attack_classifier(clean, target, model, f0, acfg, view=view)
        base = composite(clean, generate_rain_layer(f0)) if cfg.baseline else None
    except (RainforgeError, ValueError, OSError) as exc:
        return item_id, None, f"{type(exc).__name__}: {exc}"
    record = {
        "id": item_id, "losses": [float(x) for x in rep.losses], "best_iteration": rep.best_iteration,
        "best_loss": float(rep.best_loss), "feasible": all(rep.audit),
        "theta": [float(t) for t in rep.best_factors.theta], "support": int(rep.best_factors.noise.count),
    }
    pngs = {
        "clean": encode_png(clean), "rain": encode_png(rep.rain, 16), "adv": encode_png(rep.adversarial),
    }
    if base is not None:
        pngs["baseline"] = encode_png(base)
    return item_id, (record, pngs), None


def cmd_attack(cfg, out):
    model = load_model(cfg.model)
    detection = isinstance(model, ToyDetector)
    m = read_manifest(cfg.input, required=("id", "path", "boxes" if detection else "label"))
    col = "boxes" if detection else "label"
    jobs = [(i, r["id"], m.path(r, "path"), r[col]) for i, r in enumerate(m.rows)]
    work = partial(_attack_item, model=model, cfg=cfg)
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    rows, errors, records = [], [], []
    for (_, item_id, _, target), (_, payload, err) in zip(jobs, results):
        if err is not None:
            log.error("%s: %s", item_id, err)
            errors.append((item_id, err))
            continue
        record, pngs = payload
        row = {"id": item_id, col: target}
        for name, png in pngs.items():
            rel = f"images/{item_id}_{name}.png"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            (out / rel).write_bytes(png)
            row[name] = rel
        rows.append(row)
        records.append(record)
    cols = ("id", col, "clean", "adv", "rain") + (("baseline",) if cfg.baseline else ())
    write_manifest(out / "results.tsv", cols, rows)
    (out / "log.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
    return errors


def cmd_augment(cfg, out):
    model = load_model(cfg.model)
    mode = "detection" if isinstance(model, ToyDetector) else "classification"
    res = augment_dataset(cfg.input, model, cfg.augment_config(mode), out, workers=cfg.workers)
    log.info("augmented %d, kept %d, failed %d", len(res.generated), len(res.skipped), len(res.errors))
    return res.errors


def cmd_evaluate(cfg, out):
    model = load_model(cfg.model)
    detection = isinstance(model, ToyDetector)
    col = "boxes" if detection else "label"
    m = read_manifest(cfg.input, required=("id", col, "clean", "adv"))
    arms = ["clean", "adv"] + (["baseline"] if "baseline" in m.columns else [])
    errors, items = [], []
    for r in m.rows:
        try:
            imgs = {a: read_image(m.path(r, a)) for a in arms}
            target = parse_boxes(r[col]) if detection else int(r[col])
        except (RainforgeError, ValueError) as exc:
            errors.append((r["id"], exc))
            continue
        items.append((r["id"], imgs, target))
    summary = {"n_images": len(items), "n_errors": len(errors), "task": "detection" if detection else "classification"}
    if items:
        quality = [(psnr(i["clean"], i["adv"]), ssim(i["clean"], i["adv"]) if min(i["clean"].shape[:2]) >= 11 else None)
                   for _, i, _ in items]
        finite = [q[0] for q in quality if np.isfinite(q[0])]
        summary["psnr_db"] = float(np.mean(finite)) if finite else float("inf")
        ss = [q[1] for q in quality if q[1] is not None]
        summary["ssim"] = float(np.mean(ss)) if ss else None
    table = []
    if detection and items:
        gt = {k: t for k, (_, _, t) in enumerate(items)}
        for arm in arms:
            dets = [(k, d[:4], d[4]) for k, (_, imgs, _) in enumerate(items)
                    for d in model.detect(_to_model(model, imgs[arm]), 0.01)]
            summary[f"ap50_{arm}"] = average_precision(dets, gt) if any(gt.values()) else None
            table.append({"arm": arm, "metric": "ap50", "value": summary[f"ap50_{arm}"]})
    elif items:
        labels = np.array([t for _, _, t in items])
        pred = {a: model.predict(np.stack([_to_model(model, i[a]) for _, i, _ in items])) for a in arms}
        keep = pred["clean"] == labels
        summary["n_eligible"] = int(keep.sum())
        summary["clean_accuracy"] = float(keep.mean())
        for arm in arms[1:]:
            value = float((pred[arm][keep] != labels[keep]).mean()) if keep.any() else None
            summary[f"success_rate_{arm}"] = value
            table.append({"arm": arm, "metric": "success_rate", "value": value})
    _write_report(out / "summary.json", summary)
    write_manifest(out / "summary.tsv", ("arm", "metric", "value"), table)
    return errors


HANDLERS = {
    "generate": cmd_generate, "attack": cmd_attack, "augment": cmd_augment,
    "train-victim": cmd_train, "evaluate": cmd_evaluate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, k) for k in _FLAG_KEYS}
    try:
        cfg = load_config(args.config, overrides, command=args.command)
        cfg.version = __version__
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        for key in ("input", "test_input", "model"):
            if getattr(cfg, key):
                setattr(cfg, key, str(Path(getattr(cfg, key)).resolve()))
        (out / "run.cfg").write_text(format_config(cfg), encoding="utf-8")
        errors = HANDLERS[args.command](cfg, out)
    except (RainforgeError, OSError) as exc:
        print(f"rainforge {args.command}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    if errors:
        _write_errors(out, errors)
        print(f"rainforge {args.command}: {len(errors)} item(s) failed; see {out / 'errors.tsv'}", file=sys.stderr)
        return EXIT_ITEM_ERRORS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
