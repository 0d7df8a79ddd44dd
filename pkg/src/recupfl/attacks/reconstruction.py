"""Gradient-matching input reconstruction.

Starting from a seeded Gaussian guess, the attacker minimizes the cosine
distance between the gradient its guess would produce and the observed update,
plus a total-variation prior for image-shaped inputs. The guess moves by Adam
steps on the sign of the (second-order) gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from recupfl.errors import ConfigError, NumericError
from recupfl.models import MlpSpec, training_loss
from recupfl.numerics import autodiff as ad
from recupfl.numerics.optim import adam_init, adam_step

LABEL_MODES = ("known-label", "optimize")


@dataclass(frozen=True)
class ReconstructionConfig:
    iterations: int = 2000
    lr: float = 0.1
    tv_weight: float = 1e-2
    label_mode: str = "known-label"
    image_shape: tuple[int, int] | None = None
    init_scale: float = 1.0
    decay_milestones: tuple[float, ...] = (3 / 8, 5 / 8, 7 / 8)  # lr *= 0.1 at these fractions

    def __post_init__(self):
        if self.iterations < 1 or self.lr <= 0:
            raise ConfigError("reconstruction needs positive iterations and learning rate")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label mode must be one of {LABEL_MODES}")


@dataclass
class ReconstructionResult:
    x: np.ndarray  # best iterate, shape (input_dim,)
    label: int
    best_loss: float
    best_iteration: int
    trace: list[float] = field(default_factory=list)


class ReconstructionError(NumericError):
    """The objective became non-finite; ``trace`` holds the losses so far."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


def total_variation(x: ad.Tensor, shape: tuple[int, int]) -> ad.Tensor:
    h, w = shape
    img = ad.reshape(x, (h, w))
    tv = ad.constant(0.0)
    if h > 1:
        tv = tv + ad.mean(ad.abs(img[1:, :] - img[:-1, :]))
    if w > 1:
        tv = tv + ad.mean(ad.abs(img[:, 1:] - img[:, :-1]))
    return tv


def _flat(tensors: Sequence[ad.Tensor]) -> ad.Tensor:
    return ad.concat([ad.reshape(t, (-1,)) for t in tensors], axis=0)


def matching_loss(
    x: ad.Tensor, label, weights: Sequence[np.ndarray], spec: MlpSpec, target: np.ndarray, cfg: ReconstructionConfig, loss_kind="cross-entropy"
) -> ad.Tensor:
    """``1 - cos(grad_w L(x, label), target)`` (+ TV), recorded for differentiation in ``x``."""
    leaves = [ad.tensor(w, requires_grad=True) for w in weights]
    g = _flat(ad.grad(training_loss(leaves, ad.reshape(x, (1, -1)), label, spec, loss_kind), leaves, create_graph=True))
    t = np.asarray(target, dtype=np.float64)
    tnorm = float(np.linalg.norm(t))
    if tnorm == 0.0:
        raise ConfigError("cannot match an all-zero update")
    gnorm = ad.sqrt(ad.clip_min((g * g).sum(), 1e-30))
    obj = 1.0 - (g * t).sum() / (gnorm * tnorm)
    if cfg.image_shape is not None and cfg.tv_weight > 0:
        obj = obj + cfg.tv_weight * total_variation(x, cfg.image_shape)
    return obj


def reconstruct(
    update,
    weights: Sequence[np.ndarray],
    spec: MlpSpec,
    label: int | None = None,
    cfg: ReconstructionConfig = ReconstructionConfig(),
    seed: int = 0,
    x_init: np.ndarray | None = None,
    loss_kind: str = "cross-entropy",
) -> ReconstructionResult:
    """Recover the single record behind ``update`` (a ``ModelUpdate``, layer list or flat vector)."""
    from recupfl.fl import ModelUpdate

    if isinstance(update, ModelUpdate):
        target = update.flat()
    elif isinstance(update, (list, tuple)):
        target = np.concatenate([np.ravel(a) for a in update])
    else:
        target = np.ravel(np.asarray(update, dtype=np.float64))
    if target.size != spec.num_params:
        raise ConfigError(f"update has {target.size} values, model has {spec.num_params}")
    if cfg.image_shape is not None and int(np.prod(cfg.image_shape)) != spec.input_dim:
        raise ConfigError("image shape does not cover the model input")
    rng = np.random.default_rng(seed)
    x0 = rng.normal(0.0, cfg.init_scale, spec.input_dim) if x_init is None else np.ravel(np.asarray(x_init, dtype=np.float64)).copy()
    optimize_label = cfg.label_mode == "optimize"
    if not optimize_label and label is None:
        raise ConfigError("known-label reconstruction needs the label")
    params = [x0]
    if optimize_label:
        params.append(rng.normal(0.0, 1.0, spec.num_classes))
    state = adam_init(params)
    best = (np.inf, params[0].copy(), -1, label)
    trace: list[float] = []
    milestones = sorted(int(m * cfg.iterations) for m in cfg.decay_milestones)
    for it in range(cfg.iterations + 1):
        leaves = [ad.tensor(p, requires_grad=True) for p in state.params]
        lab = ad.reshape(ad.softmax(leaves[1]), (1, -1)) if optimize_label else label
        try:
            obj = matching_loss(leaves[0], lab, weights, spec, target, cfg, loss_kind)
            grads = ad.grad(obj, leaves)
        except NumericError as exc:
            raise ReconstructionError(f"reconstruction diverged at iteration {it}: {exc}", trace) from exc
        value = obj.item()
        trace.append(value)
        if value < best[0]:
            cur_label = int(np.argmax(state.params[1])) if optimize_label else label
            best = (value, state.params[0].copy(), it, cur_label)
        if it == cfg.iterations:
            break
        lr = cfg.lr * 0.1 ** sum(it >= m for m in milestones)
        state = adam_step(state, [np.sign(g.value) for g in grads], lr)
    return ReconstructionResult(best[1], int(best[3]), float(best[0]), best[2], trace)


def reconstruction_mse(x_hat: np.ndarray, x_true: np.ndarray) -> float:
    a, b = np.asarray(x_hat, dtype=np.float64), np.asarray(x_true, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def quantize(x: np.ndarray) -> np.ndarray:
    """8-bit levels ``floor(255 * clamp(x, 0, 1) + 0.5)``."""
    return np.floor(255.0 * np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) + 0.5).astype(np.uint8)


def to_csv_grid(x: np.ndarray, shape: tuple[int, int]) -> str:
    grid = np.asarray(x, dtype=np.float64).reshape(shape)
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in grid)


def to_pgm(x: np.ndarray, shape: tuple[int, int]) -> bytes:
    """Binary 8-bit grayscale PGM."""
    h, w = shape
    pixels = quantize(np.asarray(x).reshape(h, w))
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(payload: bytes) -> np.ndarray:
    from recupfl.errors import ParseError

    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(payload) and payload[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(payload) and not payload[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", offset=pos)
        tokens.append(payload[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise ParseError("not a binary PGM image", offset=0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError(f"bad PGM header: {exc}", offset=0) from exc
    data = payload[pos:]
    if maxval != 255 or len(data) != w * h:
        raise ParseError("PGM pixel data does not match its header", offset=pos)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
