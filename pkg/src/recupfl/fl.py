"""Simulated federated learning: client updates, FedAvg, partitioning, rounds.

A round ``t`` (1-based) starts from the global state holding ``t - 1``
completed rounds. Selected clients compute plain loss gradients against those
weights, each shared update passes through the optional defense, observers see
the shared updates, and the server applies ``w <- w - lr * mean(updates)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from recupfl.data import Dataset
from recupfl.errors import ConfigError, DataError, RecupError
from recupfl.models import MlpSpec, decode_array, encode_array, init_model, loss_from_logits, training_loss, ACTIVATIONS
from recupfl.numerics import autodiff as ad


@dataclass(frozen=True)
class FlConfig:
    num_clients: int
    rounds: int
    lr: float = 0.1
    participation_ratio: float = 1.0
    local_epochs: int = 1
    batch_size: int = 0  # 0 = the client's whole local dataset
    seed: int = 0
    loss_kind: str = "cross-entropy"

    def __post_init__(self):
        if self.num_clients < 1 or self.rounds < 1:
            raise ConfigError("need at least one client and one round")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.participation_ratio <= 1.0:
            raise ConfigError("participation ratio must lie in (0, 1]")
        if self.local_epochs < 1 or self.batch_size < 0:
            raise ConfigError("local epochs must be >= 1 and batch size >= 0")
        if self.selected_count < 1:
            raise ConfigError("participation ratio selects no clients")

    @property
    def selected_count(self) -> int:
        return int(round(self.participation_ratio * self.num_clients))


@dataclass(frozen=True)
class ModelUpdate:
    """Per-layer gradient arrays shared by one client in one round."""

    client_id: int
    round: int
    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(np.asarray(a, dtype=np.float64) for a in self.layers))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(int(a.size) for a in self.layers)

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(a.shape for a in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.layers])

    def with_flat(self, vector: np.ndarray) -> "ModelUpdate":
        return ModelUpdate(self.client_id, self.round, unflatten(vector, self.shapes))

    def read_only(self) -> "ModelUpdate":
        layers = []
        for a in self.layers:
            v = a.view()
            v.flags.writeable = False
            layers.append(v)
        return ModelUpdate(self.client_id, self.round, tuple(layers))


def unflatten(vector: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> tuple[np.ndarray, ...]:
    vector = np.asarray(vector, dtype=np.float64)
    sizes = [int(np.prod(s)) for s in shapes]
    if vector.size != sum(sizes):
        raise ConfigError(f"vector of {vector.size} values cannot fill shapes {list(shapes)}")
    out, start = [], 0
    for s, n in zip(shapes, sizes):
        out.append(vector[start : start + n].reshape(s).copy())
        start += n
    return tuple(out)


@dataclass
class GlobalModelState:
    round: int
    weights: list[np.ndarray]
    history: dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ClientContext:
    """What a client-side defense may use: its own data and the received model."""

    client_id: int
    round: int
    data: Dataset
    weights: tuple[np.ndarray, ...]
    spec: MlpSpec
    seed: int


class Defense(Protocol):
    def __call__(self, update: ModelUpdate, client: ClientContext) -> ModelUpdate: ...


Observer = Callable[[int, int, ModelUpdate], None]


class ClientError(RecupError):
    """A client or its defense failed; carries the round and client id."""

    def __init__(self, round_: int, client_id: int, cause: BaseException):
        self.round = round_
        self.client_id = client_id
        self.cause = cause
        super().__init__(f"round {round_}, client {client_id}: {type(cause).__name__}: {cause}")


# ---------------------------------------------------------------------------
# client side


def _xy(local_data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(local_data, Dataset):
        return local_data.x, local_data.y
    x, y = local_data
    return np.atleast_2d(np.asarray(x, dtype=np.float64)), np.atleast_1d(np.asarray(y))


def loss_gradient(weights: Sequence[np.ndarray], spec: MlpSpec, x, y, loss_kind: str = "cross-entropy") -> list[np.ndarray]:
    leaves = [ad.tensor(w, requires_grad=True) for w in weights]
    return [g.value for g in ad.grad(training_loss(leaves, x, y, spec, loss_kind), leaves)]


def client_update(global_state: GlobalModelState, spec: MlpSpec, local_data, config: FlConfig, client_id: int = 0) -> ModelUpdate:
    """Mean local loss gradient, averaged over local epochs.

    Within an epoch the client takes local SGD steps (rate ``config.lr``) over
    seeded mini-batches and averages the batch gradients; the shared update is
    the mean of the epoch averages. One epoch with a full batch is exactly the
    loss gradient at the received weights.
    """
    x, y = _xy(local_data)
    if len(x) == 0:
        raise DataError(f"client {client_id} holds no data")
    weights = [np.array(w) for w in global_state.weights]
    n = len(x)
    bs = n if config.batch_size in (0, None) else min(config.batch_size, n)
    rng = np.random.default_rng([config.seed, global_state.round + 1, client_id, 3])
    total = [np.zeros_like(w) for w in weights]
    for _ in range(config.local_epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        epoch = [np.zeros_like(w) for w in weights]
        batches = 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            g = loss_gradient(weights, spec, x[idx], y[idx], config.loss_kind)
            for i in range(len(epoch)):
                epoch[i] += g[i]
            if config.local_epochs > 1 or bs < n:
                weights = [w - config.lr * gi for w, gi in zip(weights, g)]
            batches += 1
        for i in range(len(total)):
            total[i] += epoch[i] / batches
    return ModelUpdate(client_id, global_state.round + 1, tuple(t / config.local_epochs for t in total))


def per_sample_gradients(weights: Sequence[np.ndarray], spec: MlpSpec, x, y, loss_kind: str = "cross-entropy") -> np.ndarray:
    """Flattened loss gradient of every row separately, shape ``(n, num_params)``.

    Row ``i`` equals ``client_update`` for a client holding only sample ``i``
    (one epoch, full batch). Computed in one backward pass by differentiating
    the summed loss with respect to each layer's pre-activations.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    n_layers = len(spec.layer_widths)
    act = ACTIVATIONS[spec.activation]
    h = ad.constant(x)
    inputs, pre = [], []
    for i in range(n_layers):
        inputs.append(h.value)
        z = ad.matmul(h, ad.tensor(weights[2 * i], requires_grad=True)) + weights[2 * i + 1]
        pre.append(z)
        if i < n_layers - 1:
            h = act(z)
    total = loss_from_logits(pre[-1], y, spec, loss_kind, reduce="sum")
    deltas = ad.grad(total, pre)
    n = len(x)
    blocks = []
    for a, d in zip(inputs, deltas):
        dz = d.value
        blocks.append((a[:, :, None] * dz[:, None, :]).reshape(n, -1))
        blocks.append(dz)
    return np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# server side


def fedavg(layer_updates: Sequence[Sequence[np.ndarray]]) -> list[np.ndarray]:
    """Mean of per-layer updates, summed sequentially in the given order."""
    total = [np.zeros_like(a) for a in layer_updates[0]]
    for layers in layer_updates:
        for i, a in enumerate(layers):
            total[i] = total[i] + a
    return [t / len(layer_updates) for t in total]


def aggregate(
    updates: Sequence[ModelUpdate],
    global_state: GlobalModelState,
    lr: float,
    aggregator: Callable[[Sequence[Sequence[np.ndarray]]], list[np.ndarray]] = fedavg,
) -> GlobalModelState:
    """Apply ``w <- w - lr * aggregator(updates)`` with updates sorted by client id."""
    if not updates:
        raise ConfigError("cannot aggregate an empty list of updates")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise ConfigError(f"updates come from different rounds: {sorted(rounds)}")
    shapes = tuple(np.shape(w) for w in global_state.weights)
    for u in updates:
        if u.shapes != shapes:
            raise ConfigError(f"client {u.client_id}: update shapes {u.shapes} do not match the model {shapes}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    step = aggregator([u.layers for u in ordered])
    new = [w - lr * s for w, s in zip(global_state.weights, step)]
    return GlobalModelState(global_state.round + 1, new, dict(global_state.history))


def partition(
    dataset_or_size,
    num_clients: int,
    mode: str = "iid",
    seed: int = 0,
    groups: Sequence | None = None,
    strict: bool = False,
) -> list[np.ndarray]:
    """Disjoint index sets covering the dataset, one per client.

    ``iid`` shuffles and deals contiguous near-equal chunks. ``by-group`` keeps
    every group key on one client, assigning shuffled groups largest-first to
    the currently smallest client; ``strict`` demands exactly one group per
    client.
    """
    if isinstance(dataset_or_size, Dataset):
        n = len(dataset_or_size)
        if groups is None:
            groups = dataset_or_size.groups
    else:
        n = int(dataset_or_size)
    if num_clients < 1 or n < num_clients:
        raise ConfigError(f"cannot split {n} samples across {num_clients} clients")
    rng = np.random.default_rng(seed)
    if mode == "iid":
        return [np.sort(c) for c in np.array_split(rng.permutation(n), num_clients)]
    if mode != "by-group":
        raise ConfigError(f"unknown partition mode {mode!r}")
    if groups is None:
        raise ConfigError("by-group partitioning needs group keys")
    groups = np.asarray(groups)
    keys = list(dict.fromkeys(groups.tolist()))
    if len(keys) < num_clients:
        raise ConfigError(f"{len(keys)} groups cannot fill {num_clients} clients")
    if strict and len(keys) > num_clients:
        raise ConfigError(f"strict by-group partitioning: {len(keys)} groups for {num_clients} clients")
    members = {k: np.flatnonzero(groups == k) for k in keys}
    shuffled = [keys[i] for i in rng.permutation(len(keys))]
    shuffled.sort(key=lambda k: -len(members[k]))
    load = np.zeros(num_clients, dtype=int)
    assigned: list[list[int]] = [[] for _ in range(num_clients)]
    for k in shuffled:
        c = int(np.argmin(load))
        assigned[c].extend(members[k].tolist())
        load[c] += len(members[k])
    return [np.sort(np.asarray(a, dtype=int)) for a in assigned]


def test_loss(weights: Sequence[np.ndarray], spec: MlpSpec, data: Dataset, loss_kind: str = "cross-entropy") -> float:
    return float(training_loss(weights, data.x, data.y, spec, loss_kind).value)


test_loss.__test__ = False  # not a pytest test


@dataclass
class RoundRecord:
    round: int
    selected: tuple[int, ...]
    test_loss: float | None
    weights: list[np.ndarray] | None = None


def select_clients(config: FlConfig, round_: int) -> np.ndarray:
    rng = np.random.default_rng([config.seed, round_, 2])
    return np.sort(rng.choice(config.num_clients, size=config.selected_count, replace=False))


def run_rounds(
    config: FlConfig,
    spec: MlpSpec,
    clients: Sequence[Dataset],
    test_data: Dataset | None = None,
    defense: Defense | None = None,
    observers: Iterable[Observer] = (),
    weights: Sequence[np.ndarray] | None = None,
    keep_weights: Iterable[int] = (),
) -> tuple[GlobalModelState, list[RoundRecord]]:
    """Run ``config.rounds`` FedAvg rounds.

    Observers receive ``(client_id, round, shared_update)`` in client-id order
    with read-only arrays, after the defense. ``keep_weights`` lists round
    numbers whose starting weights are stored on the record.
    """
    if len(clients) != config.num_clients:
        raise ConfigError(f"config declares {config.num_clients} clients, got {len(clients)} datasets")
    observers = list(observers)
    keep = set(keep_weights)
    state = GlobalModelState(0, [np.array(w) for w in (weights if weights is not None else init_model(spec))])
    records = []
    for t in range(1, config.rounds + 1):
        selected = select_clients(config, t)
        start_weights = [w.copy() for w in state.weights] if t in keep else None
        updates = []
        contexts = []
        for cid in selected:
            cid = int(cid)
            try:
                updates.append(client_update(state, spec, clients[cid], config, client_id=cid))
            except Exception as exc:  # noqa: BLE001 - re-raised with location
                raise ClientError(t, cid, exc) from exc
            contexts.append(ClientContext(cid, t, clients[cid], tuple(state.weights), spec, config.seed))
        if defense is not None:
            updates = apply_defense(defense, updates, contexts)
        for u in updates:
            shared = u.read_only()
            for obs in observers:
                obs(u.client_id, t, shared)
        state = aggregate(updates, state, config.lr)
        loss_t = test_loss(state.weights, spec, test_data, config.loss_kind) if test_data is not None else None
        if loss_t is not None:
            state.history[t] = loss_t
        records.append(RoundRecord(t, tuple(int(c) for c in selected), loss_t, start_weights))
    return state, records


def apply_defense(defense, updates: list[ModelUpdate], contexts: list[ClientContext]) -> list[ModelUpdate]:
    """Run a defense over one round's updates, batched when the defense supports it."""
    batch = getattr(defense, "apply_batch", None)
    if batch is not None:
        try:
            return list(batch(updates, contexts))
        except ClientError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise ClientError(contexts[0].round if contexts else 0, -1, exc) from exc
    out = []
    for u, c in zip(updates, contexts):
        try:
            out.append(defense(u, c))
        except Exception as exc:  # noqa: BLE001
            raise ClientError(c.round, c.client_id, exc) from exc
    return out


# ---------------------------------------------------------------------------
# checkpoints (same array encoding as zoo files)


def save_checkpoint(state: GlobalModelState, spec: MlpSpec, path: str | Path) -> None:
    payload = {
        "format": "recupfl.checkpoint",
        "version": 1,
        "round": state.round,
        "spec": spec.to_dict(),
        "weights": [encode_array(w) for w in state.weights],
        "history": {str(k): v for k, v in sorted(state.history.items())},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))


def load_checkpoint(path: str | Path) -> tuple[GlobalModelState, MlpSpec]:
    d = json.loads(Path(path).read_text())
    spec = MlpSpec.from_dict(d["spec"])
    weights = [decode_array(w) for w in d["weights"]]
    history = {int(k): float(v) for k, v in d.get("history", {}).items()}
    return GlobalModelState(int(d["round"]), weights, history), spec
