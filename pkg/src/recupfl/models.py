"""Fully-connected classifiers, losses, and defender model zoos.

Weights are stored as a flat list ``[W1, b1, W2, b2, ...]`` with ``W`` of
shape ``(fan_in, fan_out)`` so a layer computes ``h @ W + b``. Initial weights
are drawn uniformly from ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for both ``W``
and ``b`` using ``numpy.random.default_rng(spec.seed)``.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from recupfl.errors import ConfigError, DataError, ParseError
from recupfl.numerics import autodiff as ad

ZOO_WIDTHS = (128, 256, 512, 1024, 2048)
ZOO_DEPTH = 3
ZOO_SIZE = 20
DEFENDER_EPOCHS = 80
DEFENDER_LR = 0.01
CE_CLAMP = 1e-12

ACTIVATIONS = {"relu": ad.relu, "sigmoid": ad.sigmoid, "tanh": ad.tanh}


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected classifier.

    ``layer_widths`` lists every layer after the input, the last one being the
    output layer. A single entry gives a (multinomial) logistic regression.
    """

    input_dim: int
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    output: str = "softmax"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.input_dim < 1 or not self.layer_widths or min(self.layer_widths) < 1:
            raise ConfigError(f"invalid layer widths {self.layer_widths} for input {self.input_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.output not in ("softmax", "sigmoid"):
            raise ConfigError(f"unknown output {self.output!r}")
        if self.output == "sigmoid" and self.layer_widths[-1] != 1:
            raise ConfigError("sigmoid output needs a single output unit")

    @property
    def num_classes(self) -> int:
        return 2 if self.output == "sigmoid" else self.layer_widths[-1]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.layer_widths

    @property
    def num_params(self) -> int:
        d = self.dims
        return sum(a * b + b for a, b in zip(d[:-1], d[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            layer_widths=tuple(d["layer_widths"]),
            activation=d.get("activation", "relu"),
            output=d.get("output", "softmax"),
            seed=int(d.get("seed", 0)),
        )


def init_model(spec: MlpSpec) -> list[np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    weights = []
    for fan_in, fan_out in zip(spec.dims[:-1], spec.dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        weights.append(rng.uniform(-bound, bound, size=fan_out))
    return weights


def layer_shapes(spec: MlpSpec) -> list[tuple[int, ...]]:
    shapes: list[tuple[int, ...]] = []
    for fan_in, fan_out in zip(spec.dims[:-1], spec.dims[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    return shapes


def logits(params: Sequence, x, spec: MlpSpec, *, hidden: list | None = None) -> ad.Tensor:
    """Pre-output activations of the network as a recorded tensor.

    ``params`` may mix numpy arrays and tensors. When ``hidden`` is a list, the
    post-activation output of every hidden layer is appended to it.
    """
    if len(params) != 2 * len(spec.layer_widths):
        raise ConfigError(f"expected {2 * len(spec.layer_widths)} weight arrays, got {len(params)}")
    h = x if isinstance(x, ad.Tensor) else ad.constant(np.atleast_2d(x))
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ConfigError(f"input width {h.shape[-1]} does not match model input {spec.input_dim}")
    act = ACTIVATIONS[spec.activation]
    n = len(spec.layer_widths)
    for i in range(n):
        h = ad.matmul(h, params[2 * i]) + params[2 * i + 1]
        if i < n - 1:
            h = act(h)
            if hidden is not None:
                hidden.append(h)
    return h


def log_probs(params: Sequence, x, spec: MlpSpec) -> ad.Tensor:
    z = logits(params, x, spec)
    if spec.output == "sigmoid":
        z = ad.concat([ad.constant(np.zeros(z.shape)), z], axis=1)
    return ad.log_softmax(z)


def predict(weights: Sequence[np.ndarray], spec: MlpSpec, x) -> np.ndarray:
    """Class probabilities, one row per input row."""
    return np.exp(log_probs(weights, x, spec).value)


def predict_class(weights: Sequence[np.ndarray], spec: MlpSpec, x) -> np.ndarray:
    return np.argmax(logits_to_scores(weights, spec, x), axis=1)


def logits_to_scores(weights, spec, x) -> np.ndarray:
    return log_probs(weights, x, spec).value


def _onehot(target, num_classes: int):
    if isinstance(target, ad.Tensor):  # soft labels that are themselves optimized
        return target
    target = np.asarray(target)
    if target.ndim == 2:
        return target.astype(np.float64)
    if target.ndim == 0:
        target = target.reshape(1)
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise ConfigError("class index out of range")
    return np.eye(num_classes)[target.astype(int)]


def loss(pred, target, kind: str = "cross-entropy") -> ad.Tensor:
    """Mean loss over rows of ``pred``.

    ``cross-entropy`` expects probability rows (summing to 1 within 1e-6) and
    class indices or one-hot targets; the log argument is clamped at 1e-12.
    ``mean-squared-error`` averages squared differences over all elements;
    integer class targets are one-hot encoded first when ``pred`` is 2-D.
    """
    p = pred if isinstance(pred, ad.Tensor) else ad.constant(pred)
    if kind in ("cross-entropy", "ce"):
        p2 = p if p.ndim == 2 else ad.reshape(p, (1, -1))
        v = p2.value
        if np.any(v < -1e-12) or np.any(v > 1 + 1e-12) or np.any(np.abs(v.sum(axis=1) - 1.0) > 1e-6):
            raise ConfigError("cross-entropy needs probability rows summing to 1")
        t = _onehot(target, p2.shape[1])
        if t.shape != p2.shape:
            raise ConfigError(f"target shape {t.shape} does not match predictions {p2.shape}")
        return -(ad.log(ad.clip_min(p2, CE_CLAMP)) * t).sum() / float(p2.shape[0])
    if kind in ("mean-squared-error", "mse"):
        t = np.asarray(target, dtype=np.float64)
        if p.ndim == 2 and t.ndim == 1 and t.shape[0] == p.shape[0] and p.shape[1] > 1:
            t = _onehot(target, p.shape[1])
        if t.shape != p.shape:
            raise ConfigError(f"target shape {t.shape} does not match predictions {p.shape}")
        d = p - t
        return (d * d).sum() / float(max(p.size, 1))
    raise ConfigError(f"unknown loss kind {kind!r}")


def training_loss(params: Sequence, x, y, spec: MlpSpec, kind: str = "cross-entropy", reduce: str = "mean") -> ad.Tensor:
    """Loss from logits (numerically stable form of :func:`loss`).

    With ``reduce='sum'`` the per-row losses are summed, so the gradient with
    respect to each input row is that row's own loss gradient.
    """
    return loss_from_logits(logits(params, x, spec), y, spec, kind, reduce)


def loss_from_logits(z: ad.Tensor, y, spec: MlpSpec, kind: str = "cross-entropy", reduce: str = "mean") -> ad.Tensor:
    if spec.output == "sigmoid":
        z = ad.concat([ad.constant(np.zeros(z.shape)), z], axis=1)
    lp = ad.log_softmax(z)
    t = _onehot(y, lp.shape[1])
    n = float(lp.shape[0]) if reduce == "mean" else 1.0
    if kind in ("cross-entropy", "ce"):
        return -(lp * t).sum() / n
    if kind in ("mean-squared-error", "mse"):
        d = ad.exp(lp) - t
        return (d * d).sum() / (n * lp.shape[1])
    raise ConfigError(f"unknown loss kind {kind!r}")


def accuracy(weights, spec: MlpSpec, x, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        return 0.0
    return float(np.mean(predict_class(weights, spec, x) == y))


def train_mlp(
    spec: MlpSpec,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int = DEFENDER_EPOCHS,
    lr: float = DEFENDER_LR,
    batch_size: int = 32,
    loss_kind: str = "cross-entropy",
    weights: Sequence[np.ndarray] | None = None,
    momentum: float = 0.0,
) -> list[np.ndarray]:
    """Mini-batch SGD from ``init_model(spec)`` (or ``weights``); shuffling seeded by ``spec.seed``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) != len(y) or len(x) == 0:
        raise DataError("training set must be non-empty with one label per row")
    params = [np.array(w) for w in (weights if weights is not None else init_model(spec))]
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng([spec.seed, 1])
    n = len(x)
    bs = max(1, min(batch_size, n))
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            leaves = [ad.tensor(p, requires_grad=True) for p in params]
            grads = ad.grad(training_loss(leaves, x[idx], y[idx], spec, loss_kind), leaves)
            for i, g in enumerate(grads):
                velocity[i] = momentum * velocity[i] + g.value
                params[i] = params[i] - lr * velocity[i]
    return params


# ---------------------------------------------------------------------------
# defender model zoo


@dataclass
class ZooMember:
    spec: MlpSpec
    weights: list[np.ndarray]
    train_accuracy: float = float("nan")


@dataclass
class ModelZoo:
    """Substitute attribute classifiers over pooled-gradient features.

    Every member shares the same input pipeline: the raw update (flattened
    layers of sizes ``layer_sizes``) is max-pooled over absolute values with
    ``pool_window`` and standardized with ``shift``/``scale`` before the MLP.
    """

    members: list[ZooMember]
    feature_dim: int
    attribute: str
    num_classes: int
    layer_sizes: tuple[int, ...] = ()
    pool_window: int = 1
    shift: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: np.ndarray = field(default_factory=lambda: np.ones(0))
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.members:
            raise ConfigError("a model zoo needs at least one member")
        for m in self.members:
            if m.spec.input_dim != self.feature_dim:
                raise ConfigError("zoo members must share the feature dimension")
            if m.spec.num_classes != self.num_classes:
                raise ConfigError("zoo members must share the attribute cardinality")
        if self.shift.size == 0:
            self.shift = np.zeros(self.feature_dim)
        if self.scale.size == 0:
            self.scale = np.ones(self.feature_dim)

    def __len__(self) -> int:
        return len(self.members)

    def subset(self, indices: Sequence[int]) -> "ModelZoo":
        return ModelZoo(
            members=[self.members[i] for i in indices],
            feature_dim=self.feature_dim,
            attribute=self.attribute,
            num_classes=self.num_classes,
            layer_sizes=self.layer_sizes,
            pool_window=self.pool_window,
            shift=self.shift,
            scale=self.scale,
            metadata=dict(self.metadata),
        )


def fit_standardizer(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature centering with one shared scale (RMS of the centered features).

    A shared scale keeps the relative magnitudes of the pooled coordinates;
    per-feature scaling would blow up near-constant coordinates, making any
    classifier on top hypersensitive to tiny changes in them.
    """
    features = np.asarray(features, dtype=np.float64)
    shift = features.mean(axis=0)
    rms = float(np.sqrt(np.mean((features - shift) ** 2))) if features.size else 0.0
    return shift, np.full(features.shape[1], rms if rms > 1e-12 else 1.0)


def sample_member_spec(
    rng: np.random.Generator,
    input_dim: int,
    num_classes: int,
    widths: Sequence[int] = ZOO_WIDTHS,
    depth: int = ZOO_DEPTH,
    activation: str = "relu",
) -> MlpSpec:
    hidden = tuple(int(w) for w in rng.choice(np.asarray(widths), size=depth))
    seed = int(rng.integers(0, 2**63 - 1))
    return MlpSpec(input_dim, hidden + (num_classes,), activation=activation, seed=seed)


def train_zoo(
    features: np.ndarray,
    labels: np.ndarray,
    count: int = ZOO_SIZE,
    spec_sampler: Callable[[np.random.Generator, int, int], MlpSpec] | None = None,
    epochs: int = DEFENDER_EPOCHS,
    lr: float = DEFENDER_LR,
    *,
    min_members: int = 5,
    attribute: str = "attribute",
    num_classes: int | None = None,
    layer_sizes: Sequence[int] = (),
    pool_window: int = 1,
    batch_size: int = 32,
    seed: int = 0,
    standardize: bool = True,
) -> ModelZoo:
    """Train ``count`` independently seeded defender models on pooled features.

    Member ``k`` draws its architecture and seed from a generator seeded with
    ``(seed, k)``, so the first ``n`` members of a larger zoo are exactly the
    members of a size-``n`` zoo trained with the same arguments.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if count < max(1, min_members):
        raise ConfigError(f"zoo of {count} members cannot supply {min_members} models per iteration")
    if len(x) != len(y) or len(x) == 0:
        raise DataError("zoo training set must be non-empty with one label per row")
    classes = np.unique(y)
    if classes.size < 2:
        raise DataError(f"attribute {attribute!r} has a single class ({classes.tolist()}); nothing to learn")
    k = int(num_classes) if num_classes is not None else int(y.max()) + 1
    shift, scale = fit_standardizer(x) if standardize else (np.zeros(x.shape[1]), np.ones(x.shape[1]))
    xs = (x - shift) / scale
    sampler = spec_sampler or (lambda r, d, c: sample_member_spec(r, d, c))
    members = []
    for i in range(count):
        spec = sampler(np.random.default_rng([seed, i]), x.shape[1], k)
        w = train_mlp(spec, xs, y, epochs=epochs, lr=lr, batch_size=batch_size)
        members.append(ZooMember(spec, w, accuracy(w, spec, xs, y)))
    chance = float(np.bincount(y).max() / len(y))
    return ModelZoo(
        members=members,
        feature_dim=x.shape[1],
        attribute=attribute,
        num_classes=k,
        layer_sizes=tuple(int(s) for s in layer_sizes),
        pool_window=int(pool_window),
        shift=shift,
        scale=scale,
        metadata={"epochs": epochs, "lr": lr, "seed": seed, "majority_rate": chance, "train_size": int(len(y))},
    )


# ---------------------------------------------------------------------------
# serialization (``.zoo.json``)

ZOO_FORMAT = "recupfl.zoo"
ZOO_VERSION = 1


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in d["shape"])
        raw = base64.b64decode(d["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad array record: {exc}") from exc
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise ParseError(f"array data holds {len(raw)} bytes, shape {shape} needs {8 * int(np.prod(shape))}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def zoo_to_dict(zoo: ModelZoo) -> dict:
    return {
        "format": ZOO_FORMAT,
        "version": ZOO_VERSION,
        "attribute": zoo.attribute,
        "feature_dim": zoo.feature_dim,
        "num_classes": zoo.num_classes,
        "layer_sizes": list(zoo.layer_sizes),
        "pool_window": zoo.pool_window,
        "shift": encode_array(zoo.shift),
        "scale": encode_array(zoo.scale),
        "metadata": zoo.metadata,
        "members": [
            {
                "spec": m.spec.to_dict(),
                "train_accuracy": m.train_accuracy,
                "weights": [encode_array(w) for w in m.weights],
            }
            for m in zoo.members
        ],
    }


def serialize_zoo(zoo: ModelZoo) -> bytes:
    return json.dumps(zoo_to_dict(zoo), sort_keys=True, separators=(",", ":")).encode("utf-8")


def load_zoo(payload: bytes | str) -> ModelZoo:
    text = payload.decode("utf-8") if isinstance(payload, (bytes, bytearray)) else payload
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed zoo payload: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(d, dict) or d.get("format") != ZOO_FORMAT:
        raise ParseError("payload is not a recupfl zoo")
    if d.get("version") != ZOO_VERSION:
        raise ParseError(f"unsupported zoo version {d.get('version')!r}")
    try:
        members = [
            ZooMember(
                spec=MlpSpec.from_dict(m["spec"]),
                weights=[decode_array(w) for w in m["weights"]],
                train_accuracy=float(m.get("train_accuracy", float("nan"))),
            )
            for m in d["members"]
        ]
        return ModelZoo(
            members=members,
            feature_dim=int(d["feature_dim"]),
            attribute=str(d["attribute"]),
            num_classes=int(d["num_classes"]),
            layer_sizes=tuple(int(s) for s in d["layer_sizes"]),
            pool_window=int(d["pool_window"]),
            shift=decode_array(d["shift"]),
            scale=decode_array(d["scale"]),
            metadata=dict(d.get("metadata", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"incomplete zoo payload: {exc}") from exc
