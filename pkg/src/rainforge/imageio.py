"""PNG codecs and tab-separated manifests.

Images in memory are float32 arrays on [0, 1] shaped (H, W, C) with C = 1 or 3,
channels in RGB order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import FormatError, InvalidArgumentError
from .rain import RainLayer

_SCALE = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}
_DEPTH = {8: np.uint8, 16: np.uint16}


def read_image(path):
    """Read an 8- or 16-bit PNG with 1 or 3 channels."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise FormatError(f"{path}: only PNG images are supported")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"{path}: unreadable or missing PNG")
    if raw.dtype not in _SCALE:
        raise FormatError(f"{path}: unsupported bit depth ({raw.dtype})")
    if raw.ndim == 2:
        raw = raw[..., None]
    elif raw.shape[2] == 3:
        raw = raw[..., ::-1]
    else:
        raise FormatError(f"{path}: unsupported channel count {raw.shape[2]}")
    return (raw.astype(np.float32) / np.float32(_SCALE[raw.dtype])).astype(np.float32)


def encode_png(image, bit_depth=8):
    if bit_depth not in _DEPTH:
        raise InvalidArgumentError(f"bit depth must be 8 or 16, got {bit_depth}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise InvalidArgumentError(f"expected (H, W, 1|3) image, got {img.shape}")
    dt = _DEPTH[bit_depth]
    q = np.rint(np.clip(img, 0.0, 1.0) * float(np.iinfo(dt).max)).astype(dt)
    q = q[..., 0] if q.shape[2] == 1 else np.ascontiguousarray(q[..., ::-1])
    ok, buf = cv2.imencode(".png", q)
    if not ok:
        raise FormatError("PNG encoding failed")
    return buf.tobytes()


def write_image(path, image, bit_depth=8):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(image, bit_depth))


def write_rain_png(path, layer):
    """Rain layer as a 16-bit grayscale PNG (value * 65535, rounded)."""
    values = layer.values if isinstance(layer, RainLayer) else np.asarray(layer)
    write_image(path, values, bit_depth=16)


def read_rain_png(path):
    img = read_image(path)
    if img.shape[2] != 1:
        raise FormatError(f"{path}: a rain layer must be single-channel")
    return RainLayer(img)


# -- manifests ----------------------------------------------------------------
#
# One record per line, tab-separated, '#' starts a comment line.  The first
# comment line names the columns.  Relative paths resolve against the
# manifest's directory.


@dataclass
class Manifest:
    columns: tuple
    rows: list  # of dicts keyed by column
    root: Path

    def path(self, row, column):
        value = row[column]
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.root / p


def read_manifest(path, required=()):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FormatError(f"{path}: manifest must start with a '# column ...' header")
    columns = tuple(lines[0][1:].strip().split("\t"))
    missing = [c for c in required if c not in columns]
    if missing:
        raise FormatError(f"{path}: manifest lacks column(s) {', '.join(missing)}")
    rows = []
    body = [ln for ln in lines[1:] if ln and not ln.startswith("#")]
    for lineno, rec in enumerate(csv.reader(body, delimiter="\t", quoting=csv.QUOTE_NONE), start=2):
        if len(rec) != len(columns):
            raise FormatError(f"{path}: record {lineno} has {len(rec)} fields, expected {len(columns)}")
        rows.append(dict(zip(columns, rec)))
    return Manifest(columns, rows, path.parent)


def format_manifest(columns, rows):
    out = ["#" + "\t".join(columns)]
    for row in rows:
        fields = [str(row.get(c, "")) for c in columns]
        if any("\t" in f or "\n" in f for f in fields):
            raise InvalidArgumentError(f"manifest field contains a tab or newline: {fields}")
        out.append("\t".join(fields))
    return "\n".join(out) + "\n"


def write_manifest(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_manifest(columns, rows), encoding="utf-8")


def format_boxes(boxes):
    return ";".join(",".join(f"{v:.6g}" for v in b[:4]) for b in boxes)


def parse_boxes(text):
    if not text:
        return []
    try:
        boxes = [tuple(float(v) for v in part.split(",")) for part in text.split(";")]
    except ValueError as exc:
        raise FormatError(f"bad box list {text!r}") from exc
    if any(len(b) != 4 for b in boxes):
        raise FormatError(f"boxes need 4 coordinates: {text!r}")
    return boxes
