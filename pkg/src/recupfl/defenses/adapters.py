"""Defenses packaged as per-client callables for the FL round loop.

Each adapter maps ``(update, client_context)`` to the shared update and offers
``apply_batch`` for a whole round. Randomness is derived from
``(seed, round, client_id)`` so batched and per-client calls agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from recupfl.defenses import baselines
from recupfl.defenses.recup import (
    AttributeSpec,
    RecupConfig,
    _generators,
    fgsm_variant_batch,
    recup_multi_batch,
    row_seed,
)
from recupfl.errors import DataError
from recupfl.models import ModelZoo


def client_attribute(ctx, attribute: str) -> int:
    """The client's value of ``attribute`` (majority over its records)."""
    values = ctx.data.attributes.get(attribute)
    if values is None or len(values) == 0:
        raise DataError(f"client {ctx.client_id} has no label for attribute {attribute!r}")
    return int(np.argmax(np.bincount(np.asarray(values).astype(int))))


class _PerClient:
    def apply_batch(self, updates, contexts):
        return [self(u, c) for u, c in zip(updates, contexts)]


@dataclass
class IdentityDefense(_PerClient):
    def __call__(self, update, ctx):
        return update


@dataclass
class ClipDefense(_PerClient):
    bound: float

    def __call__(self, update, ctx):
        return baselines.clip(update, self.bound)


@dataclass
class DpDefense(_PerClient):
    cfg: baselines.DpConfig
    noise: str = "gaussian"
    seed: int = 0

    def __call__(self, update, ctx):
        rng = np.random.default_rng([self.seed, ctx.round, ctx.client_id, 11])
        fn = baselines.dp_gaussian if self.noise == "gaussian" else baselines.dp_laplace
        return fn(update, self.cfg, rng)


@dataclass
class SparsifyDefense(_PerClient):
    ratio: float

    def __call__(self, update, ctx):
        return baselines.sparsify(update, self.ratio)


@dataclass
class SoteriaDefense(_PerClient):
    cfg: baselines.SoteriaConfig

    def __call__(self, update, ctx):
        return baselines.soteria(update, list(ctx.weights), ctx.spec, ctx.data.x, self.cfg)


ZooProvider = Callable[[int, Sequence[np.ndarray]], Mapping[str, ModelZoo]]


class RecupDefense:
    """Protects the configured attributes of every client.

    ``zoos`` is either a mapping attribute -> zoo or a callable
    ``(round, weights) -> mapping`` for zoos that track the global model.
    """

    def __init__(self, attributes: Sequence[AttributeSpec], zoos, cfg: RecupConfig, seed: int = 0):
        self.attributes = list(attributes)
        self.zoos = zoos
        self.cfg = cfg
        self.seed = seed

    def _zoos(self, ctx) -> Mapping[str, ModelZoo]:
        return self.zoos(ctx.round, ctx.weights) if callable(self.zoos) else self.zoos

    def __call__(self, update, ctx):
        return self.apply_batch([update], [ctx])[0]

    def apply_batch(self, updates, contexts):
        if not updates:
            return []
        u = np.stack([x.flat() for x in updates])
        labels = {a.id: np.array([client_attribute(c, a.id) for c in contexts]) for a in self.attributes}
        seeds = [row_seed(self.seed, c.round, c.client_id) for c in contexts]
        out = recup_multi_batch(u, labels, self.attributes, self._zoos(contexts[0]), self.cfg, seeds)
        return [x.with_flat(row) for x, row in zip(updates, out)]


class VariantDefense:
    """One of the single-shot FGSM variants against one attribute."""

    def __init__(self, attribute: str, zoo: ModelZoo, epsilon: float, sampled: int, variant: str, seed: int = 0):
        self.attribute = attribute
        self.zoo = zoo
        self.epsilon = epsilon
        self.sampled = sampled
        self.variant = variant
        self.seed = seed

    def __call__(self, update, ctx):
        return self.apply_batch([update], [ctx])[0]

    def apply_batch(self, updates, contexts):
        if not updates:
            return []
        u = np.stack([x.flat() for x in updates])
        labels = np.array([client_attribute(c, self.attribute) for c in contexts])
        rngs = _generators([row_seed(self.seed, c.round, c.client_id) for c in contexts], self.attribute)
        out = fgsm_variant_batch(u, labels, self.zoo, self.epsilon, self.sampled, self.variant, rngs)
        return [x.with_flat(row) for x, row in zip(updates, out)]
