"""Sign-gradient attacks that optimise rain factors against a victim model.

Classification ascends the cross-entropy and keeps the highest-loss iterate;
detection descends each detector loss in turn and keeps the iterate with the
lowest summed loss.  Factors are projected back into their bounds after every
update, so every evaluated iterate is feasible.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import InvalidArgumentError
from .rain import (
    DEFAULT_INTERVAL, DEFAULT_STEPS, Bounds, RainFactors, composite, composite_tensor,
    factor_tensors, generate_rain_layer, project_factors, rain_layer_tensor, random_factors,
)
from .tensor import Tape, Tensor
from .victim import adversarial_targets, classify_loss, detect_losses

log = logging.getLogger(__name__)

UPDATE_RULES = ("sign", "momentum")
MODES = ("classification", "detection")


@dataclass
class AttackConfig:
    iterations: int = 20
    alpha_noise: float = 0.02
    alpha_theta: float = 0.01
    alpha_kernel: float = 0.02
    update_rule: str = "momentum"
    momentum: float = 0.9
    mode: str = "classification"
    bounds: Bounds = field(default_factory=Bounds)
    steps: int = DEFAULT_STEPS
    interval: tuple = DEFAULT_INTERVAL
    # replace dL/dX' by its sign before it reaches the factors
    sign_image_grad: bool = True
    # detection: update after each loss (True) or once on the summed gradient
    sequential: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if min(self.alpha_noise, self.alpha_theta, self.alpha_kernel) < 0:
            raise InvalidArgumentError("step sizes must be non-negative")
        if self.update_rule not in UPDATE_RULES:
            raise InvalidArgumentError(f"update_rule must be one of {UPDATE_RULES}")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError("momentum must be in [0, 1)")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")


@dataclass
class AttackReport:
    losses: list  # per iteration; summed over loss terms for detection
    best_iteration: int  # 1-based
    best_loss: float
    adversarial: np.ndarray
    rain: np.ndarray  # rain layer of the best iterate
    best_factors: RainFactors
    final_factors: RainFactors
    audit: list  # feasibility of each evaluated iterate
    history: list  # factors evaluated at each iteration
    loss_terms: list = field(default_factory=list)  # detection: per-iteration [L_1, ..., L_J]


class _Stepper:
    """Per-group sign updates, optionally with L1-normalised momentum."""

    def __init__(self, cfg, direction):
        self.cfg = cfg
        self.direction = direction
        self.alphas = (cfg.alpha_noise, cfg.alpha_theta, cfg.alpha_kernel)
        self.buffers = None

    def step(self, factors, grads):
        if self.cfg.update_rule == "momentum":
            if self.buffers is None:
                self.buffers = [np.zeros_like(g, dtype=np.float64) for g in grads]
            for buf, g in zip(self.buffers, grads):
                buf *= self.cfg.momentum
                buf += g / (np.abs(g).mean() + 1e-12)
            grads = self.buffers
        a_n, a_t, a_k = self.alphas
        f = factors.copy()
        d = self.direction
        dt = f.noise.intensities.dtype
        s_n, s_t, s_k = (np.sign(g).astype(dt) for g in grads)
        f.noise.intensities = f.noise.intensities + d * a_n * s_n
        f.theta = f.theta + d * a_t * s_t
        f.kernels = f.kernels + d * a_k * s_k
        return project_factors(f)


def _check_start(factors):
    bad = factors.violations()
    if bad:
        raise InvalidArgumentError(f"initial rain factors are infeasible: {', '.join(bad)}")


def _forward(clean, factors, sign_image_grad):
    leaves = factor_tensors(factors)
    rain = rain_layer_tensor(factors, *leaves)
    x_adv = composite_tensor(clean, rain)
    return leaves, x_adv, (ops.sign_grad(x_adv) if sign_image_grad else x_adv)


def _grads(leaves):
    out = tuple(t.grad.copy() for t in leaves)
    for t in leaves:
        t.zero_grad()
    return out


def _finish(clean, best, history, losses, best_s, best_loss, final, audit, terms=()):
    layer = generate_rain_layer(best)
    return AttackReport(
        losses=losses, best_iteration=best_s, best_loss=best_loss,
        adversarial=composite(clean, layer), rain=layer.values, best_factors=best,
        final_factors=final, audit=audit, history=history, loss_terms=list(terms),
    )


def attack_classifier(clean, label, model, factors0, cfg=None, view=None):
    """Maximise the classifier loss over the rain factors.

    ``view`` optionally maps the rainy image tensor to the model input (e.g. a
    resize); it must be differentiable.
    """
    cfg = cfg or AttackConfig()
    _check_start(factors0)
    clean_t = Tensor(clean, dtype=factors0.noise.intensities.dtype)
    stepper = _Stepper(cfg, +1.0)
    f = factors0.copy()
    losses, history, audit = [], [], []
    best, best_s, best_loss = f, 1, -np.inf
    for s in range(1, cfg.iterations + 1):
        audit.append(f.is_feasible())
        history.append(f)
        with Tape() as tape:
            leaves, _, x_in = _forward(clean_t, f, cfg.sign_image_grad)
            if view is not None:
                x_in = view(x_in)
            loss = classify_loss(model, x_in, label)
        tape.backward(loss)
        value = loss.item()
        losses.append(value)
        if value > best_loss:
            best, best_s, best_loss = f, s, value
        f = stepper.step(f, _grads(leaves))
    return _finish(clean, best, history, losses, best_s, best_loss, f, audit)


def attack_detector(clean, annotations, model, factors0, cfg=None, targets=None, view=None):
    """Minimise the detector losses toward adversarial targets over the rain factors.

    ``annotations`` are boxes in model-input pixels; ``view`` is as in
    :func:`attack_classifier`.
    """
    cfg = cfg or AttackConfig(mode="detection")
    _check_start(factors0)
    if targets is None:
        targets = adversarial_targets(annotations, model.input_size, model.grid)
    clean_t = Tensor(clean, dtype=factors0.noise.intensities.dtype)
    stepper = _Stepper(cfg, -1.0)
    f = factors0.copy()
    losses, terms, history, audit = [], [], [], []
    best, best_s, best_loss = f, 1, np.inf
    for s in range(1, cfg.iterations + 1):
        audit.append(f.is_feasible())
        history.append(f)
        with Tape() as tape:
            leaves, _, x_in = _forward(clean_t, f, cfg.sign_image_grad)
            if view is not None:
                x_in = view(x_in)
            parts = detect_losses(model, x_in, targets)
            total = parts[0]
            for p in parts[1:]:
                total = ops.add(total, p)
        values = [p.item() for p in parts]
        if cfg.sequential:
            per_loss = []
            for p in parts:
                tape.backward(p)
                per_loss.append(_grads(leaves))
            for g in per_loss:
                f = stepper.step(f, g)
        else:
            tape.backward(total)
            f = stepper.step(f, _grads(leaves))
        l_sum = float(np.sum(values))
        losses.append(l_sum)
        terms.append(values)
        if l_sum < best_loss:
            best, best_s, best_loss = history[-1], s, l_sum
    return _finish(clean, best, history, losses, best_s, best_loss, f, audit, terms)


def normal_rain_baseline(clean, bounds=None, steps=DEFAULT_STEPS, interval=DEFAULT_INTERVAL, seed=0):
    """Rainy image from un-optimised random factors; the control arm of an attack
    started from ``random_factors`` with the same seed.  Returns ``(image, factors)``."""
    h, w = np.asarray(clean).shape[:2]
    factors = random_factors(h, w, bounds, steps, interval, seed)
    return composite(clean, generate_rain_layer(factors)), factors


def image_seed(base_seed, index):
    return np.random.SeedSequence([int(base_seed), int(index)])


def _attack_one(args):
    idx, image, target, model, cfg = args
    h, w = image.shape[:2]
    f0 = random_factors(h, w, cfg.bounds, cfg.steps, cfg.interval, image_seed(cfg.seed, idx))
    if cfg.mode == "detection":
        return attack_detector(image, target, model, f0, cfg)
    return attack_classifier(image, target, model, f0, cfg)


def attack_batch(images, targets, model, cfg, workers=1, indices=None):
    """Attack each image from its own seeded start (``image_seed(cfg.seed, index)``).

    ``targets`` are labels (classification) or box lists (detection).  Results
    do not depend on ``workers``.
    """
    indices = range(len(images)) if indices is None else indices
    jobs = [(i, np.asarray(images[k]), targets[k], model, cfg) for k, i in enumerate(indices)]
    if workers <= 1:
        return [_attack_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_attack_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def baseline_batch(images, cfg, indices=None):
    indices = range(len(images)) if indices is None else indices
    return [normal_rain_baseline(np.asarray(images[k]), cfg.bounds, cfg.steps, cfg.interval, image_seed(cfg.seed, i))[0]
            for k, i in enumerate(indices)]
