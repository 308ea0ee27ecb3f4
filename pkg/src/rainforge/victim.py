"""Differentiable victim models: a small CNN classifier and a grid-cell detector."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .errors import FormatError, InvalidArgumentError
from .shapes import NUM_CLASSES
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


def _he(rng, shape, fan_in):
    return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _param_tensors(params, requires_grad):
    return {k: Tensor(v, requires_grad=requires_grad, dtype=v.dtype) for k, v in params.items()}


ACTIVATIONS = {"relu": ops.relu, "silu": ops.silu}
POOLS = {"max": ops.max_pool2d, "avg": ops.avg_pool2d}


class _Model:
    kind = ""

    def __init__(self, params, **meta):
        self.params = {k: np.ascontiguousarray(v) for k, v in params.items()}
        meta.setdefault("activation", "relu")
        meta.setdefault("pool", "max")
        if meta["activation"] not in ACTIVATIONS or meta["pool"] not in POOLS:
            raise InvalidArgumentError(f"unknown activation/pool {meta['activation']!r}/{meta['pool']!r}")
        self.meta = meta

    def _block(self, h, p, name, pool=True):
        h = ACTIVATIONS[self.meta["activation"]](ops.conv2d(h, p[name + ".w"], p[name + ".b"]))
        return POOLS[self.meta["pool"]](h) if pool else h

    def tensors(self, requires_grad=False):
        return _param_tensors(self.params, requires_grad)

    def astype(self, dtype):
        return type(self)({k: v.astype(dtype) for k, v in self.params.items()}, **self.meta)

    def copy(self):
        return type(self)({k: v.copy() for k, v in self.params.items()}, **self.meta)


class ToyClassifier(_Model):
    """Inputs centred to [-1, 1], then conv-act-pool x2, conv-act, flatten, dense.

    ReLU and max pooling by default; SiLU with average pooling gives a loss
    that is smooth in the input, which finite-difference checks need.
    """

    kind = "classifier"

    @classmethod
    def init(cls, seed=0, num_classes=NUM_CLASSES, input_size=32, channels=3, widths=(16, 32, 32),
             activation="relu", pool="max"):
        rng = np.random.default_rng(seed)
        c1, c2, c3 = widths
        feat = (input_size // 4) ** 2 * c3
        params = {
            "conv1.w": _he(rng, (3, 3, channels, c1), 9 * channels),
            "conv1.b": np.zeros(c1, np.float32),
            "conv2.w": _he(rng, (3, 3, c1, c2), 9 * c1),
            "conv2.b": np.zeros(c2, np.float32),
            "conv3.w": _he(rng, (3, 3, c2, c3), 9 * c2),
            "conv3.b": np.zeros(c3, np.float32),
            "fc.w": (rng.normal(size=(feat, num_classes)) * np.sqrt(1.0 / feat)).astype(np.float32),
            "fc.b": np.zeros(num_classes, np.float32),
        }
        return cls(params, num_classes=num_classes, input_size=input_size, channels=channels,
                   activation=activation, pool=pool)

    @property
    def num_classes(self):
        return self.meta["num_classes"]

    @property
    def input_size(self):
        return self.meta["input_size"]

    def logits(self, x, p=None):
        p = p or self.tensors()
        x = ops.as_tensor(x)
        batched = x.data.ndim == 4
        h = ops.scale(ops.add_scalar(x, -0.5), 2.0)
        h = self._block(h, p, "conv1")
        h = self._block(h, p, "conv2")
        h = self._block(h, p, "conv3", pool=False)
        h = ops.reshape(h, (h.shape[0], -1) if batched else (-1,))
        return ops.dense(h, p["fc.w"], p["fc.b"])

    def predict(self, images, batch_size=256):
        images = np.asarray(images, dtype=self.params["fc.w"].dtype)
        single = images.ndim == 3
        images = images[None] if single else images
        out = [self.logits(Tensor(images[i:i + batch_size], dtype=images.dtype)).data.argmax(axis=1)
               for i in range(0, len(images), batch_size)]
        pred = np.concatenate(out) if out else np.zeros(0, np.int64)
        return int(pred[0]) if single else pred


def _check_image(model, image):
    t = ops.as_tensor(image)
    want = (model.input_size, model.input_size, model.meta["channels"])
    if t.shape != want:
        raise InvalidArgumentError(f"expected an image of shape {want}, got {t.shape}")
    return t


def classify_loss(model, image, label, params=None):
    """Softmax cross-entropy of the classifier on one image; differentiable to the image."""
    if not 0 <= int(label) < model.num_classes:
        raise InvalidArgumentError(f"label {label} out of range [0, {model.num_classes})")
    x = _check_image(model, image)
    return ops.softmax_cross_entropy(model.logits(x, params), [int(label)])


# -- detector -----------------------------------------------------------------


class ToyDetector(_Model):
    """Shared conv backbone down to a G x G grid with two 3x3 heads:
    objectness logits (G, G, 1) and box parameters (G, G, 4).

    Box parameters per cell are ``(tx, ty, tw, th)``: the centre offset inside
    the cell in cell units and the size as a fraction of the image side.
    """

    kind = "detector"

    @classmethod
    def init(cls, seed=0, input_size=32, grid=4, channels=3, widths=(16, 32, 32), activation="relu", pool="max"):
        rng = np.random.default_rng(seed)
        c1, c2, c3 = widths
        params = {
            "conv1.w": _he(rng, (3, 3, channels, c1), 9 * channels),
            "conv1.b": np.zeros(c1, np.float32),
            "conv2.w": _he(rng, (3, 3, c1, c2), 9 * c1),
            "conv2.b": np.zeros(c2, np.float32),
            "conv3.w": _he(rng, (3, 3, c2, c3), 9 * c2),
            "conv3.b": np.zeros(c3, np.float32),
            "obj.w": (rng.normal(size=(3, 3, c3, 1)) * 0.01).astype(np.float32),
            "obj.b": np.full(1, -2.0, np.float32),
            "box.w": (rng.normal(size=(3, 3, c3, 4)) * 0.01).astype(np.float32),
            "box.b": np.array([0.5, 0.5, 0.25, 0.25], np.float32),
        }
        return cls(params, input_size=input_size, grid=grid, channels=channels, activation=activation, pool=pool)

    @property
    def grid(self):
        return self.meta["grid"]

    @property
    def input_size(self):
        return self.meta["input_size"]

    def backbone(self, x, p):
        h = ops.scale(ops.add_scalar(x, -0.5), 2.0)
        h = self._block(h, p, "conv1")
        h = self._block(h, p, "conv2")
        return self._block(h, p, "conv3")

    def heads(self, x, p=None):
        p = p or self.tensors()
        h = self.backbone(x, p)
        return ops.conv2d(h, p["obj.w"], p["obj.b"]), ops.conv2d(h, p["box.w"], p["box.b"])

    def detect(self, image, score_threshold=0.0):
        """Decoded ``[(x0, y0, x1, y1, score), ...]`` for one image, one per grid cell."""
        obj, box = self.heads(Tensor(np.asarray(image), dtype=self.params["obj.w"].dtype))
        return decode_boxes(obj.data, box.data, self.input_size, score_threshold)


def decode_boxes(obj_logits, box, image_size, score_threshold=0.0):
    g = obj_logits.shape[0]
    cell = image_size / g
    scores = 1.0 / (1.0 + np.exp(-obj_logits[..., 0].astype(np.float64)))
    out = []
    for gy in range(g):
        for gx in range(g):
            s = float(scores[gy, gx])
            if s < score_threshold:
                continue
            tx, ty, tw, th = (float(v) for v in box[gy, gx])
            cx, cy = (gx + tx) * cell, (gy + ty) * cell
            w, h = max(tw, 0.0) * image_size, max(th, 0.0) * image_size
            out.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, s))
    return out


@dataclass
class DetectionTargets:
    objectness: np.ndarray  # (G, G, 1) in {0, 1}
    boxes: np.ndarray  # (G, G, 4)
    box_mask: np.ndarray  # (G, G) cells whose box regression counts


def encode_targets(annotations, image_size, grid):
    """Ground-truth targets: each box is owned by the cell holding its centre."""
    obj = np.zeros((grid, grid, 1), np.float32)
    boxes = np.zeros((grid, grid, 4), np.float32)
    cell = image_size / grid
    for x0, y0, x1, y1 in annotations:
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        gx = min(int(cx // cell), grid - 1)
        gy = min(int(cy // cell), grid - 1)
        obj[gy, gx, 0] = 1
        boxes[gy, gx] = (cx / cell - gx, cy / cell - gy, (x1 - x0) / image_size, (y1 - y0) / image_size)
    return DetectionTargets(obj, boxes, obj[..., 0].copy())


def adversarial_targets(annotations, image_size, grid):
    """Background everywhere, and every ground-truth box collapsed to zero size."""
    gt = encode_targets(annotations, image_size, grid)
    boxes = gt.boxes.copy()
    boxes[..., 2:] = 0
    return DetectionTargets(np.zeros_like(gt.objectness), boxes, gt.box_mask)


BOX_BETA = 0.1


def detect_losses(model, image, targets, params=None):
    """``[objectness BCE, smooth-L1 box loss]`` against ``targets`` for one image."""
    x = _check_image(model, image)
    obj, box = model.heads(x, params)
    if obj.shape[:2] != targets.objectness.shape[:2]:
        raise InvalidArgumentError(f"targets are for a {targets.objectness.shape[:2]} grid, model gives {obj.shape[:2]}")
    l_obj = ops.bce_with_logits(obj, targets.objectness)
    l_box = ops.smooth_l1(box, targets.boxes, targets.box_mask, beta=BOX_BETA)
    return [l_obj, l_box]


# -- training -----------------------------------------------------------------


@dataclass
class TrainReport:
    train_metric: float
    test_metric: float | None
    epoch_losses: list = field(default_factory=list)
    metric_name: str = "accuracy"


def _sgd_step(params, tensors, velocity, lr, momentum, clip_norm=None):
    scale = 1.0
    if clip_norm is not None:
        norm = math.sqrt(sum(float(np.vdot(t.grad, t.grad)) for t in tensors.values()))
        scale = min(1.0, clip_norm / max(norm, 1e-12))
    for k, t in tensors.items():
        v = velocity[k]
        v *= momentum
        v += np.float32(scale) * t.grad
        params[k] -= np.float32(lr) * v


def accuracy(model, dataset):
    if len(dataset) == 0:
        return float("nan")
    return float((model.predict(dataset.images) == dataset.labels).mean())


DEFAULT_LR = {"classifier": 0.05, "detector": 0.02}


def train_victim(dataset, epochs=20, lr=None, seed=0, test=None, batch_size=64, momentum=0.9, model=None,
                 clip_norm=5.0):
    """Minibatch SGD with momentum; picks the classifier or the detector from
    the kind of labels ``dataset`` carries (``lr=None`` uses the per-kind
    default in ``DEFAULT_LR``).  Gradients are rescaled to a global
    norm of at most ``clip_norm`` (``None`` disables).  Returns ``(model, TrainReport)``."""
    if len(dataset) == 0:
        raise InvalidArgumentError("training split is empty")
    detection = dataset.annotations is not None
    size = dataset.images.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    if model is None:
        model = ToyDetector.init(seed, input_size=size) if detection else ToyClassifier.init(seed, input_size=size)
    model = model.copy()
    if lr is None:
        lr = DEFAULT_LR[model.kind]
    if detection:
        tgts = [encode_targets(a, size, model.grid) for a in dataset.annotations]
        obj_all = np.stack([t.objectness for t in tgts])
        box_all = np.stack([t.boxes for t in tgts])
        mask_all = np.stack([t.box_mask for t in tgts])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    losses = []
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            with Tape() as tape:
                p = model.tensors(requires_grad=True)
                x = Tensor(dataset.images[idx])
                if detection:
                    obj, box = model.heads(x, p)
                    loss = ops.add(ops.bce_with_logits(obj, obj_all[idx]),
                                   ops.scale(ops.smooth_l1(box, box_all[idx], mask_all[idx], beta=BOX_BETA), 5.0))
                else:
                    loss = ops.softmax_cross_entropy(model.logits(x, p), dataset.labels[idx])
            tape.backward(loss)
            _sgd_step(model.params, p, velocity, lr, momentum, clip_norm)
            total += loss.item() * len(idx)
        losses.append(total / n)
        log.info("epoch %d loss %.4f", epoch + 1, losses[-1])
    if detection:
        from .metrics import detector_ap

        report = TrainReport(detector_ap(model, dataset), detector_ap(model, test) if test is not None else None,
                             losses, "ap50")
    else:
        report = TrainReport(accuracy(model, dataset), accuracy(model, test) if test is not None else None, losses)
    return model, report


# -- checkpoints --------------------------------------------------------------
#
#   b"RFMD" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 n_tensors
#   per tensor: u16 name_len | name | u8 ndim | ndim x u32 dims
#   f32 payload: every tensor, row-major, in table order            (little endian)

MODEL_MAGIC = b"RFMD"
MODEL_VERSION = 1
_MODEL_KINDS = {"classifier": ToyClassifier, "detector": ToyDetector}


def dumps_model(model):
    meta = json.dumps({"kind": model.kind, **model.meta}, sort_keys=True).encode()
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(meta)), meta, struct.pack("<I", len(model.params))]
    names = sorted(model.params)
    for name in names:
        arr = model.params[name]
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        parts.append(model.params[name].astype("<f4").tobytes())
    return b"".join(parts)


def loads_model(buf, name="<bytes>"):
    try:
        if buf[:4] != MODEL_MAGIC:
            raise FormatError(f"{name}: not a model checkpoint")
        version, mlen = struct.unpack_from("<II", buf, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"{name}: unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(buf[pos:pos + mlen].decode())
        pos += mlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            pname = buf[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            table.append((pname, dims))
        params = {}
        for pname, dims in table:
            n = int(np.prod(dims, dtype=np.int64))
            params[pname] = np.frombuffer(buf, "<f4", count=n, offset=pos).astype(np.float32).reshape(dims)
            pos += 4 * n
        if pos != len(buf):
            raise FormatError(f"{name}: {len(buf) - pos} trailing bytes")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{name}: corrupt checkpoint ({exc})") from exc
    kind = meta.pop("kind")
    if kind not in _MODEL_KINDS:
        raise FormatError(f"{name}: unknown model kind {kind!r}")
    return _MODEL_KINDS[kind](params, **meta)


def save_model(path, model):
    Path(path).write_bytes(dumps_model(model))


def load_model(path):
    return loads_model(Path(path).read_bytes(), str(path))
