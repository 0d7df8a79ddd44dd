"""Meta-learned adversarial perturbation of model updates.

Each outer iteration samples ``Q`` defender models from a zoo. ``Q - 1`` of them
drive a short iterative FGSM walk (steps of ``eps / Q``) away from the current
accumulated update; the last one then takes a full ``eps`` FGSM step from the
end of that walk. Only this final step is added to the accumulated update, so
after ``P`` iterations the perturbation has sup-norm at most ``P * eps``.

All routines work on a batch of flattened updates at once (one row per client);
every row owns its random generator, so a row's result does not depend on the
other rows of the batch.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from recupfl.attacks.features import defender_features
from recupfl.errors import ConfigError, DataError
from recupfl.models import ModelZoo, loss_from_logits, logits
from recupfl.numerics import autodiff as ad

VARIANTS = ("one-step", "average", "iterative", "momentum")
MOMENTUM = 0.9
DEFAULT_EPSILON = 0.01  # per-iteration budget used when none is given


@dataclass(frozen=True)
class AttributeSpec:
    id: str
    gamma: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"attribute weight for {self.id!r} must be non-negative")


@dataclass(frozen=True)
class RecupConfig:
    epsilon: float = DEFAULT_EPSILON
    iterations: int = 10  # P
    sampled: int = 5  # Q

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.iterations < 1:
            raise ConfigError("P must be at least 1")
        if self.sampled < 2:
            raise ConfigError("Q must be at least 2 (Q - 1 meta-train models and one meta-test model)")


def attribute_seed(seed: int, attribute: str) -> list[int]:
    """Seed material for one attribute's generator, stable across runs."""
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(attribute.encode("utf-8"))]


def row_seed(seed: int, round_: int, client_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(round_), int(client_id)]).generate_state(1)[0])


def _check(zoo: ModelZoo, u: np.ndarray, labels: np.ndarray, sampled: int) -> None:
    if zoo.layer_sizes and sum(zoo.layer_sizes) != u.shape[1]:
        raise ConfigError(f"zoo expects updates of {sum(zoo.layer_sizes)} values, got {u.shape[1]}")
    if sampled > len(zoo):
        raise ConfigError(f"cannot sample {sampled} members from a zoo of {len(zoo)}")
    if labels.shape != (u.shape[0],):
        raise DataError("every update needs its attribute label")
    if labels.size and (labels.min() < 0 or labels.max() >= zoo.num_classes):
        raise DataError(f"attribute label out of range for {zoo.attribute!r}")


def member_gradients(zoo: ModelZoo, u: np.ndarray, labels: np.ndarray, members: np.ndarray, with_loss: bool = False):
    """Gradient of each row's attribute loss under its own zoo member, w.r.t. the raw update.

    Returns ``(grads, losses)``; losses are only filled in when ``with_loss``.
    """
    grads = np.zeros_like(u)
    losses = np.full(len(u), np.nan)
    sizes = zoo.layer_sizes or (u.shape[1],)
    for m in np.unique(members):
        rows = np.nonzero(members == m)[0]
        member = zoo.members[int(m)]
        leaf = ad.tensor(u[rows], requires_grad=True)
        f = defender_features(leaf, sizes, zoo.pool_window, zoo.shift, zoo.scale)
        per_row = loss_from_logits(logits(member.weights, f, member.spec), labels[rows], member.spec, reduce="sum")
        (g,) = ad.grad(per_row, [leaf])
        grads[rows] = g.value
        if with_loss:
            losses[rows] = _row_losses(member, f.value, labels[rows])
    return grads, losses


def _row_losses(member, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits(member.weights, features, member.spec).value
    if member.spec.output == "sigmoid":
        z = np.concatenate([np.zeros_like(z), z], axis=1)
    z = z - z.max(axis=1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -lp[np.arange(len(labels)), labels]


def member_losses(zoo: ModelZoo, u: np.ndarray, labels: np.ndarray, members: np.ndarray) -> np.ndarray:
    out = np.zeros(len(u))
    sizes = zoo.layer_sizes or (u.shape[1],)
    for m in np.unique(members):
        rows = np.nonzero(members == m)[0]
        f = defender_features(ad.constant(u[rows]), sizes, zoo.pool_window, zoo.shift, zoo.scale).value
        out[rows] = _row_losses(zoo.members[int(m)], f, labels[rows])
    return out


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (a * b).sum(axis=1) / (na * nb)
    return np.where((na > 0) & (nb > 0), c, np.nan)


@dataclass
class RecupTrace:
    """Diagnostics of one batched run, indexed ``[iteration][step]``.

    ``steps`` holds per-row (member, loss before, loss after) for every FGSM
    step; ``alignment`` holds per-row cosine between the meta-train walk and
    the meta-test step of each outer iteration (NaN when either is zero).
    """

    steps: list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = field(default_factory=list)
    alignment: list[np.ndarray] = field(default_factory=list)


def recup_batch(
    u: np.ndarray,
    labels: np.ndarray,
    zoo: ModelZoo,
    cfg: RecupConfig,
    rngs: Sequence[np.random.Generator],
    trace: RecupTrace | None = None,
) -> np.ndarray:
    """Perturbations (not perturbed updates) for a batch of flattened updates."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    labels = np.asarray(labels).astype(int).reshape(-1)
    _check(zoo, u, labels, cfg.sampled)
    if len(rngs) != len(u):
        raise ConfigError("one generator per update is required")
    eps, q = cfg.epsilon, cfg.sampled
    acc = np.zeros_like(u)  # sum of kept meta-test steps
    for _ in range(cfg.iterations):
        base = u + acc
        members = np.stack([r.choice(len(zoo), size=q, replace=False) for r in rngs]) if len(u) else np.zeros((0, q), int)
        steps = []
        x = base.copy()
        for s in range(q):
            g, before = member_gradients(zoo, x, labels, members[:, s], trace is not None)
            size = eps if s == q - 1 else eps / q
            step = size * np.sign(g)
            if s == q - 1:
                walk = x - base
                meta_test = step
            x = x + step
            if trace is not None:
                steps.append((members[:, s].copy(), before, member_losses(zoo, x, labels, members[:, s])))
        acc = acc + meta_test
        if trace is not None:
            trace.steps.append(steps)
            trace.alignment.append(_cos_rows(walk, meta_test))
    return acc


def _generators(seeds: Sequence[int], attribute: str) -> list[np.random.Generator]:
    return [np.random.default_rng(attribute_seed(s, attribute)) for s in seeds]


def recup_single(update, label: int, zoo: ModelZoo, cfg: RecupConfig, rng=None, trace: RecupTrace | None = None):
    """Perturbation protecting one attribute of one update, shaped like ``update``.

    ``label`` is the client's own value of the attribute; ``rng`` may be a
    generator or an integer seed.
    """
    from recupfl.defenses.baselines import _split

    vec, rebuild = _split(update)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return rebuild(recup_batch(vec[None], np.array([label]), zoo, cfg, [gen], trace)[0])


def normalized_gammas(attributes: Sequence[AttributeSpec]) -> np.ndarray:
    g = np.array([a.gamma for a in attributes], dtype=np.float64)
    if not attributes or g.sum() <= 0:
        raise ConfigError("at least one attribute needs a positive weight")
    return g / g.sum()


def recup_multi_batch(
    u: np.ndarray,
    labels: Mapping[str, np.ndarray],
    attributes: Sequence[AttributeSpec],
    zoos: Mapping[str, ModelZoo],
    cfg: RecupConfig,
    seeds: Sequence[int],
) -> np.ndarray:
    """Perturbed updates ``u + sum_m gamma_m * delta_m`` with weights normalized to sum 1.

    Each attribute draws members from its own generator seeded by ``(seed, attribute)``.
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    gammas = normalized_gammas(attributes)
    total = np.zeros_like(u)
    for attr, gamma in zip(attributes, gammas):
        if attr.id not in zoos:
            raise ConfigError(f"no zoo for attribute {attr.id!r}")
        if attr.id not in labels:
            raise DataError(f"missing label for attribute {attr.id!r}")
        if gamma == 0:
            continue
        total += gamma * recup_batch(u, np.asarray(labels[attr.id]), zoos[attr.id], cfg, _generators(seeds, attr.id))
    return u + total


def recup_multi(update, labels: Mapping[str, int], attributes: Sequence[AttributeSpec], zoos: Mapping[str, ModelZoo], cfg: RecupConfig, seed: int = 0):
    from recupfl.defenses.baselines import _split

    vec, rebuild = _split(update)
    out = recup_multi_batch(vec[None], {k: np.array([v]) for k, v in labels.items()}, attributes, zoos, cfg, [seed])
    return rebuild(out[0])


def fgsm_variant_batch(
    u: np.ndarray, labels: np.ndarray, zoo: ModelZoo, epsilon: float, sampled: int, variant: str, rngs: Sequence[np.random.Generator]
) -> np.ndarray:
    """Single-shot FGSM-style perturbations (returns perturbed updates)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    labels = np.asarray(labels).astype(int).reshape(-1)
    q = 1 if variant == "one-step" else sampled
    _check(zoo, u, labels, q)
    members = np.stack([r.choice(len(zoo), size=q, replace=False) for r in rngs])
    if variant == "one-step":
        g, _ = member_gradients(zoo, u, labels, members[:, 0])
        return u + epsilon * np.sign(g)
    if variant == "average":
        steps = [np.sign(member_gradients(zoo, u, labels, members[:, s])[0]) for s in range(q)]
        return u + epsilon * np.mean(steps, axis=0)
    x = u.copy()
    velocity = np.zeros_like(u)
    for s in range(q):
        g, _ = member_gradients(zoo, x, labels, members[:, s])
        if variant == "momentum":
            l1 = np.abs(g).sum(axis=1, keepdims=True)
            velocity = MOMENTUM * velocity + g / np.where(l1 > 0, l1, 1.0)
            g = velocity
        x = x + (epsilon / q) * np.sign(g)
    return x


def fgsm_variant(update, label: int, zoo: ModelZoo, epsilon: float, sampled: int, variant: str, rng=None):
    from recupfl.defenses.baselines import _split

    vec, rebuild = _split(update)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return rebuild(fgsm_variant_batch(vec[None], np.array([label]), zoo, epsilon, sampled, variant, [gen])[0])


def alignment_diagnostic(a: np.ndarray, b: np.ndarray) -> float | None:
    """Cosine of two perturbation directions; ``None`` when either is zero."""
    a, b = np.ravel(a), np.ravel(b)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return None
    return float(a @ b / (na * nb))
