"""Rain factors, streak rendering and compositing.

A rain layer is built from three factor groups:

* a sparse noise field (fixed support, learnable intensities),
* a translation ``theta = (dx, dy)`` in fractions of the image width/height,
* per-support-pixel kernels of ``steps + 1`` weights.

Each support pixel is swept along ``theta`` in ``steps`` equal sub-translations
and the ``steps + 1`` copies are summed with that pixel's kernel weights.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .errors import ContractError, EmptySupportError, FormatError, InvalidArgumentError
from .tensor import Tensor, default_dtype

DEFAULT_INTERVAL = (0.7, 1.0)
DEFAULT_STEPS = 8


@dataclass(frozen=True)
class Bounds:
    eps_n: float = 0.005
    eps_theta: float = 0.2
    eps_k: float = 0.3

    def __post_init__(self):
        if not 0 < self.eps_n <= 1:
            raise InvalidArgumentError(f"eps_n must be in (0, 1], got {self.eps_n}")
        if self.eps_theta < 0 or self.eps_k < 0:
            raise InvalidArgumentError("eps_theta and eps_k must be non-negative")


@dataclass
class NoiseField:
    height: int
    width: int
    support: np.ndarray  # sorted flat pixel indices, int64
    intensities: np.ndarray  # one per support index

    @property
    def count(self):
        return int(self.support.shape[0])

    @property
    def rows(self):
        return self.support // self.width

    @property
    def cols(self):
        return self.support % self.width

    def dense(self):
        out = np.zeros(self.height * self.width, dtype=self.intensities.dtype)
        out[self.support] = self.intensities
        return out.reshape(self.height, self.width)

    def copy(self):
        return NoiseField(self.height, self.width, self.support.copy(), self.intensities.copy())


@dataclass
class RainFactors:
    noise: NoiseField
    theta: np.ndarray  # (dx, dy), fraction of width / height
    steps: int
    kernels: np.ndarray  # (count, steps + 1)
    bounds: Bounds = field(default_factory=Bounds)

    def copy(self):
        return RainFactors(self.noise.copy(), self.theta.copy(), self.steps, self.kernels.copy(), self.bounds)

    def violations(self):
        """Names of violated invariants (empty when feasible)."""
        b = self.bounds
        bad = []
        n = self.noise
        if n.count > math.floor(b.eps_n * n.height * n.width + 1e-9):
            bad.append("l0")
        if np.any(n.intensities < 0) or np.any(n.intensities > 1):
            bad.append("intensity")
        if np.any(np.abs(self.theta) > b.eps_theta):
            bad.append("theta")
        if np.any(self.kernels < 0) or np.any(self.kernels > b.eps_k):
            bad.append("kernel")
        if self.kernels.shape != (n.count, self.steps + 1):
            bad.append("kernel_shape")
        return bad

    def is_feasible(self):
        return not self.violations()


@dataclass
class RainLayer:
    values: np.ndarray  # (H, W, 1)

    @property
    def shape(self):
        return self.values.shape


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def support_size(height, width, eps_n):
    # the epsilon guards products like 0.29 * 100 landing just under an integer
    return math.floor(eps_n * height * width + 1e-9)


def sample_noise(height, width, eps_n=0.005, interval=DEFAULT_INTERVAL, seed=None, dtype=None):
    """Pick ``floor(eps_n * H * W)`` pixels uniformly without replacement and give
    each an intensity drawn from ``U(a, b)``."""
    a, b = interval
    if not 0 < eps_n <= 1:
        raise InvalidArgumentError(f"density must be in (0, 1], got {eps_n}")
    if not 0 <= a <= b <= 1:
        raise InvalidArgumentError(f"interval must satisfy 0 <= a <= b <= 1, got {interval}")
    count = support_size(height, width, eps_n)
    if count < 1:
        raise EmptySupportError(f"eps_n * H * W = {eps_n * height * width:g} < 1: no noise pixels")
    rng = _rng(seed)
    support = np.sort(rng.choice(height * width, size=count, replace=False)).astype(np.int64)
    values = rng.uniform(a, b, size=count).astype(dtype or default_dtype())
    return NoiseField(height, width, support, values)


def init_factors(noise, steps=DEFAULT_STEPS, bounds=None, theta=None, seed=None):
    """Wrap a noise field into feasible factors.

    Kernel weights start at ``min(1/(steps+1), eps_k)``.  Without an explicit
    ``theta`` a mostly downward direction is drawn: ``dy`` in
    ``[eps_theta/2, eps_theta]`` and ``dx`` in ``[-eps_theta/2, eps_theta/2]``.
    """
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    bounds = bounds or Bounds()
    dtype = noise.intensities.dtype
    if theta is None:
        rng = _rng(seed)
        e = bounds.eps_theta
        theta = (rng.uniform(-0.5 * e, 0.5 * e), rng.uniform(0.5 * e, e))
    theta = np.asarray(theta, dtype=dtype).reshape(2)
    w = min(1.0 / (steps + 1), bounds.eps_k)
    kernels = np.full((noise.count, steps + 1), w, dtype=dtype)
    return RainFactors(noise, theta, int(steps), kernels, bounds)


def random_factors(height, width, bounds=None, steps=DEFAULT_STEPS, interval=DEFAULT_INTERVAL, seed=None):
    """Noise field plus initial factors, all drawn from one seed."""
    bounds = bounds or Bounds()
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    noise_ss, theta_ss = ss.spawn(2)
    noise = sample_noise(height, width, bounds.eps_n, interval, seed=np.random.default_rng(noise_ss))
    return init_factors(noise, steps, bounds, seed=np.random.default_rng(theta_ss))


def factor_tensors(factors, requires_grad=True):
    """Leaf tensors ``(intensities, theta, kernels)`` for differentiation."""
    dt = factors.noise.intensities.dtype
    return (
        Tensor(factors.noise.intensities, requires_grad=requires_grad, dtype=dt),
        Tensor(factors.theta, requires_grad=requires_grad, dtype=dt),
        Tensor(factors.kernels, requires_grad=requires_grad, dtype=dt),
    )


def rain_layer_tensor(factors, intensities=None, theta=None, kernels=None):
    """Differentiable rain layer (H, W, 1); missing tensors are taken as constants."""
    n = factors.noise
    dt = n.intensities.dtype
    intensities = intensities if intensities is not None else Tensor(n.intensities, dtype=dt)
    theta = theta if theta is not None else Tensor(factors.theta, dtype=dt)
    kernels = kernels if kernels is not None else Tensor(factors.kernels, dtype=dt)
    return ops.splat_streaks(intensities, kernels, theta, n.rows, n.cols, n.height, n.width, factors.steps)


def generate_rain_layer(factors):
    if factors.steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    return RainLayer(rain_layer_tensor(factors).data)


def composite_tensor(clean, rain):
    """``clamp(clean + rain, 0, 1)`` with the single rain channel copied to every colour channel."""
    clean, rain = ops.as_tensor(clean), ops.as_tensor(rain)
    if clean.data.ndim != 3 or rain.data.ndim != 3 or clean.shape[:2] != rain.shape[:2]:
        raise InvalidArgumentError(f"cannot composite rain {rain.shape} onto image {clean.shape}")
    if rain.shape[2] != clean.shape[2]:
        if rain.shape[2] != 1:
            raise InvalidArgumentError(f"rain must have 1 or {clean.shape[2]} channels, got {rain.shape[2]}")
        rain = ops.repeat_channels(rain, clean.shape[2])
    return ops.clamp(ops.add(clean, rain), 0.0, 1.0)


def composite(clean, rain):
    values = rain.values if isinstance(rain, RainLayer) else rain
    clean = np.asarray(clean)
    return composite_tensor(Tensor(clean, dtype=clean.dtype), Tensor(values, dtype=clean.dtype)).data


def project_factors(factors):
    """Clip every factor group back into its feasible box; the support is untouched."""
    b = factors.bounds
    noise = replace(factors.noise, intensities=np.clip(factors.noise.intensities, 0, 1))
    theta = np.clip(factors.theta, -b.eps_theta, b.eps_theta)
    kernels = np.clip(factors.kernels, 0, b.eps_k)
    return RainFactors(noise, theta, factors.steps, kernels, b)


# -- binary format ------------------------------------------------------------
#
#   b"RAIN" | u32 version | u32 H | u32 W | u32 kind | payload      (little endian)
#   kind 0 (layer): H*W f32, row-major
#   kind 1 (field): u32 count, then count pairs of (u32 flat index, f32 value)

RAIN_MAGIC = b"RAIN"
RAIN_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_PAIR = np.dtype([("index", "<u4"), ("value", "<f4")])


def dumps_rain(obj):
    if isinstance(obj, RainLayer):
        h, w = obj.values.shape[:2]
        return _HEADER.pack(RAIN_MAGIC, RAIN_VERSION, h, w, 0) + obj.values.reshape(h, w).astype("<f4").tobytes()
    if isinstance(obj, NoiseField):
        pairs = np.empty(obj.count, dtype=_PAIR)
        pairs["index"] = obj.support
        pairs["value"] = obj.intensities
        return (_HEADER.pack(RAIN_MAGIC, RAIN_VERSION, obj.height, obj.width, 1)
                + struct.pack("<I", obj.count) + pairs.tobytes())
    raise ContractError(f"cannot serialise {type(obj).__name__}")


def loads_rain(buf, name="<bytes>"):
    if len(buf) < _HEADER.size:
        raise FormatError(f"{name}: truncated header")
    magic, version, h, w, kind = _HEADER.unpack_from(buf)
    if magic != RAIN_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != RAIN_VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    body = buf[_HEADER.size:]
    if kind == 0:
        if len(body) != 4 * h * w:
            raise FormatError(f"{name}: expected {4 * h * w} payload bytes, found {len(body)}")
        return RainLayer(np.frombuffer(body, "<f4").astype(np.float32).reshape(h, w, 1))
    if kind == 1:
        (count,) = struct.unpack_from("<I", body)
        pairs = np.frombuffer(body, _PAIR, count=count, offset=4)
        if len(body) != 4 + count * _PAIR.itemsize:
            raise FormatError(f"{name}: field payload size mismatch")
        return NoiseField(h, w, pairs["index"].astype(np.int64), pairs["value"].astype(np.float32))
    raise FormatError(f"{name}: unknown record kind {kind}")


def save_rain(path, obj):
    Path(path).write_bytes(dumps_rain(obj))


def load_rain(path):
    return loads_rain(Path(path).read_bytes(), str(path))
