"""Adversarial rain augmentation for rainy/clean training pairs.

Each augmented image mixes ``k`` independently attacked rain layers with
Dirichlet weights and adds them to either the clean or the rainy image of a
pair.  The victim's own prediction on the clean image serves as the label the
layers are attacked against, so unlabelled deraining data can be augmented.
"""
from __future__ import annotations

import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from . import ops
from .attack import AttackConfig, attack_classifier, attack_detector
from .errors import FormatError, InvalidArgumentError, RainforgeError
from .imageio import encode_png, read_image, read_manifest, write_manifest
from .rain import composite, random_factors
from .victim import ToyDetector

log = logging.getLogger(__name__)

BASES = ("clean", "rainy")
OUTPUT_COLUMNS = ("id", "clean", "rainy", "augmented", "weights", "seeds", "base", "source")


@dataclass
class AugmentConfig:
    k: int = 3
    dirichlet_alpha: float = 1.0
    base_choice_prob: float = 0.5  # probability of building on the rainy image
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(iterations=5))
    seed: int = 0
    multiplier: int = 1  # augmented pairs emitted per input pair

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("k must be >= 1")
        if not self.dirichlet_alpha > 0:
            raise InvalidArgumentError("dirichlet_alpha must be > 0")
        if not 0 <= self.base_choice_prob <= 1:
            raise InvalidArgumentError("base_choice_prob must be in [0, 1]")
        if self.multiplier < 1:
            raise InvalidArgumentError("multiplier must be >= 1")


@dataclass
class Provenance:
    weights: np.ndarray  # float64, sums to 1
    layer_seeds: list  # entropy tuples, one per layer
    base: str  # "clean" or "rainy"
    target: object  # class label or pseudo-label boxes the layers were attacked against


@dataclass
class AugmentedPair:
    clean: np.ndarray
    augmented: np.ndarray
    provenance: Provenance
    layers: list = field(default_factory=list)  # (H, W, 1) rain layers


def sample_weights(k, alpha=1.0, rng=None):
    """Symmetric Dirichlet mixing weights of length ``k``."""
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if k == 1:
        return np.ones(1)
    rng = np.random.default_rng(rng)
    w = rng.dirichlet(np.full(k, float(alpha)))
    return w / w.sum()


def mix_layers(base, layers, weights):
    """``clamp(base + sum_i w_i * R_i, 0, 1)``."""
    base = np.asarray(base)
    rain = np.zeros(base.shape[:2] + (1,), dtype=np.float64)
    for w, layer in zip(weights, layers):
        rain += float(w) * np.asarray(layer, dtype=np.float64)
    return composite(base, rain.astype(base.dtype))


def item_key(item_id):
    """Stable integer for seeding from a string or integer id."""
    if isinstance(item_id, (int, np.integer)):
        return int(item_id)
    return zlib.crc32(str(item_id).encode("utf-8"))


def _seeds(cfg, key, copy):
    root = [int(cfg.seed), key, int(copy)]
    return np.random.SeedSequence(root + [0]), [tuple(root + [1, j]) for j in range(cfg.k)]


def _model_view(model, shape):
    size = (model.input_size, model.input_size)
    if tuple(shape[:2]) == size:
        return None
    return partial(ops.resize_bilinear, size=size)


def pseudo_target(model, clean):
    """The victim's own prediction on ``clean`` (label, or boxes in model pixels)."""
    x = ops.resize_bilinear(clean, (model.input_size, model.input_size)).data
    if isinstance(model, ToyDetector):
        return [tuple(float(v) for v in d[:4]) for d in model.detect(x, 0.5)]
    return model.predict(x)


def attacked_layer(clean, model, target, attack_cfg, seed):
    """One adversarial rain layer for ``clean`` from a fresh noise draw."""
    h, w = clean.shape[:2]
    f0 = random_factors(h, w, attack_cfg.bounds, attack_cfg.steps, attack_cfg.interval,
                        np.random.SeedSequence(list(seed)))
    view = _model_view(model, clean.shape)
    if isinstance(model, ToyDetector):
        rep = attack_detector(clean, target, model, f0, replace(attack_cfg, mode="detection"), view=view)
    else:
        rep = attack_classifier(clean, target, model, f0, replace(attack_cfg, mode="classification"), view=view)
    return rep.rain


def augment_pair(clean, rainy, model, cfg=None, item_id=0, copy=0):
    clean = np.asarray(clean, dtype=np.float32)
    rainy = np.asarray(rainy, dtype=np.float32)
    cfg = cfg or AugmentConfig()
    if cfg.k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if clean.shape != rainy.shape:
        raise InvalidArgumentError(f"clean {clean.shape} and rainy {rainy.shape} differ in shape")
    mix_seed, layer_seeds = _seeds(cfg, item_key(item_id), copy)
    rng = np.random.default_rng(mix_seed)
    weights = sample_weights(cfg.k, cfg.dirichlet_alpha, rng)
    base = "rainy" if rng.random() < cfg.base_choice_prob else "clean"
    target = pseudo_target(model, clean)
    layers = [attacked_layer(clean, model, target, cfg.attack, s) for s in layer_seeds]
    out = mix_layers(rainy if base == "rainy" else clean, layers, weights)
    return AugmentedPair(clean, out, Provenance(weights, layer_seeds, base, target), layers)


def replay_pair(clean, rainy, model, cfg, provenance):
    """Rebuild the augmented image from its provenance alone."""
    clean = np.asarray(clean, dtype=np.float32)
    rainy = np.asarray(rainy, dtype=np.float32)
    layers = [attacked_layer(clean, model, provenance.target, cfg.attack, s) for s in provenance.layer_seeds]
    return mix_layers(rainy if provenance.base == "rainy" else clean, layers, provenance.weights)


# -- dataset driver -----------------------------------------------------------


@dataclass
class AugmentResult:
    rows: list  # output manifest rows in input order
    generated: list  # ids produced by this run
    skipped: list  # ids already present from an earlier run
    errors: list  # (id, message)


def _format_seeds(seeds):
    return ",".join(":".join(str(v) for v in s) for s in seeds)


def _work(job, model, cfg):
    out_id, src_id, copy, clean_path, rainy_path = job
    try:
        clean = read_image(clean_path)
        rainy = read_image(rainy_path)
        pair = augment_pair(clean, rainy, model, cfg, item_id=src_id, copy=copy)
    except (RainforgeError, ValueError, OSError) as exc:
        return out_id, None, f"{type(exc).__name__}: {exc}"
    p = pair.provenance
    meta = {
        "weights": ",".join(repr(float(w)) for w in p.weights),
        "seeds": _format_seeds(p.layer_seeds),
        "base": p.base,
    }
    return out_id, (encode_png(pair.augmented), meta), None


def augment_dataset(manifest, model, cfg, out_dir, workers=1):
    """Augment every pair listed in ``manifest`` (columns id, clean, rainy).

    Writes ``images/<id>_<copy>.png`` and ``manifest.tsv`` under ``out_dir``.
    Entries whose image already exists and is listed in an earlier manifest are
    kept as-is, so an interrupted run can be resumed.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    out_manifest = out_dir / "manifest.tsv"
    src = read_manifest(manifest, required=("id", "clean", "rainy"))

    previous = {}
    if out_manifest.exists():
        try:
            for row in read_manifest(out_manifest, required=OUTPUT_COLUMNS).rows:
                if (out_dir / row["augmented"]).exists():
                    previous[row["id"]] = row
        except FormatError as exc:
            log.warning("ignoring unreadable previous manifest: %s", exc)

    jobs, order, errors = [], [], []
    base_rows = {}
    for row in src.rows:
        clean_path, rainy_path = src.path(row, "clean"), src.path(row, "rainy")
        for copy in range(cfg.multiplier):
            out_id = f"{row['id']}_{copy}"
            order.append(out_id)
            base_rows[out_id] = {"id": out_id, "clean": str(clean_path), "rainy": str(rainy_path),
                                 "augmented": f"images/{out_id}.png", "source": row["id"]}
            if out_id not in previous:
                jobs.append((out_id, row["id"], copy, clean_path, rainy_path))

    work = partial(_work, model=model, cfg=cfg)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(work, jobs)
            done = _collect(results, out_dir, base_rows, errors)
    else:
        done = _collect(map(work, jobs), out_dir, base_rows, errors)

    rows = []
    for out_id in order:
        if out_id in previous:
            rows.append(previous[out_id])
        elif out_id in done:
            rows.append(done[out_id])
    write_manifest(out_manifest, OUTPUT_COLUMNS, rows)
    write_manifest(out_dir / "errors.tsv", ("id", "error"), [{"id": i, "error": e} for i, e in errors])
    return AugmentResult(rows, sorted(done, key=order.index), sorted(previous, key=order.index), errors)


def _collect(results, out_dir, base_rows, errors):
    # single writer: only the coordinating process touches the output directory
    done = {}
    for out_id, payload, err in results:
        if err is not None:
            log.error("%s: %s", out_id, err)
            errors.append((out_id, err.replace("\t", " ").replace("\n", " ")))
            continue
        png, meta = payload
        row = dict(base_rows[out_id], **meta)
        (out_dir / row["augmented"]).write_bytes(png)
        done[out_id] = row
    return done
