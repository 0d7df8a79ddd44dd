"""Experiment runners behind the CLI.

Per seed, a scenario splits the data into an auxiliary set (what defenders
and adversaries train on), one small local dataset per client, and a test
set. A sweep cell is (defense, parameter, seed, evaluation round ``t``):

* privacy: every client computes its update at the round-``t`` starting
  weights of the clean (undefended) run; the cell's defense is applied and
  adversaries trained on clean auxiliary updates at those same weights
  classify the result (ASR);
* utility: the test loss after round ``t`` of a federated run with the
  defense switched on from the first round.

Defender zoos are trained once per seed on auxiliary updates at the initial
weights, before any federated round, and reused everywhere.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from recupfl import defenses as D
from recupfl.attacks import (
    AdversaryHyper,
    ReconstructionConfig,
    asr,
    build_adversary_dataset,
    default_pool_window,
    reconstruct,
    reconstruction_mse,
    train_adversary,
)
from recupfl.data import Dataset, SynthSpec, load_csv_split, split, synth_generate
from recupfl.defenses.adapters import client_attribute
from recupfl.errors import ConfigError, RecupError
from recupfl.fl import (
    ClientContext,
    FlConfig,
    GlobalModelState,
    aggregate,
    apply_defense,
    client_update,
    partition,
    run_rounds,
    select_clients,
    test_loss,
)
from recupfl.harness.config import DefenseSection, ExperimentConfig
from recupfl.harness.results import ConvergenceRow, TradeoffPoint
from recupfl.models import MlpSpec, ModelZoo, init_model, sample_member_spec, train_zoo


def derive_seed(*parts) -> int:
    """Stable integer seed from a mix of integers and strings."""
    words = [zlib.crc32(p.encode("utf-8")) if isinstance(p, str) else int(p) & 0xFFFFFFFF for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# ---------------------------------------------------------------------------
# scenario: data, model, clean trajectory and zoos for one seed


@dataclass
class Scenario:
    cfg: ExperimentConfig
    seed: int
    spec: MlpSpec
    aux: Dataset
    clients: list[Dataset]
    test: Dataset
    fl: FlConfig
    attributes: dict[str, int]  # id -> cardinality
    zoo_capacity: int = 0  # members trained per zoo; smaller zoos take a prefix
    _trajectory: dict[int, list[np.ndarray]] = field(default_factory=dict)
    _aux: dict = field(default_factory=dict)
    _zoos: dict = field(default_factory=dict)

    def __post_init__(self):
        self.zoo_capacity = self.zoo_capacity or self.cfg.zoo.size

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        d = self.spec.dims
        sizes = []
        for a, b in zip(d[:-1], d[1:]):
            sizes += [a * b, b]
        return tuple(sizes)

    @property
    def pool_window(self) -> int:
        w = self.cfg.attack.pool_window
        return w if w > 0 else default_pool_window(self.layer_sizes)

    def weights_at(self, round_: int) -> list[np.ndarray]:
        """Starting weights of ``round_`` on the clean (undefended) trajectory."""
        if not self._trajectory:
            self._trajectory[1] = init_model(self.spec)
        last = max(self._trajectory)
        w = self._trajectory[last]
        for t in range(last, round_):
            ids = [int(c) for c in select_clients(self.fl, t)]
            updates, _ = self.updates_at(t, w, ids)
            w = aggregate(updates, GlobalModelState(t - 1, w), self.fl.lr).weights
            self._trajectory[t + 1] = w
        return self._trajectory[round_]

    def updates_at(self, round_: int, weights, client_ids: Sequence[int] | None = None):
        """Client updates (and contexts) for ``round_`` at ``weights``; all clients by default."""
        ids = range(len(self.clients)) if client_ids is None else client_ids
        state = GlobalModelState(round_ - 1, weights)
        updates, contexts = [], []
        for cid in ids:
            updates.append(client_update(state, self.spec, self.clients[cid], self.fl, client_id=cid))
            contexts.append(ClientContext(cid, round_, self.clients[cid], tuple(weights), self.spec, self.seed))
        return updates, contexts

    def aux_dataset(self, round_: int, attribute: str):
        key = (round_, attribute)
        if key not in self._aux:
            self._aux[key] = build_adversary_dataset(
                self.weights_at(round_), self.spec, self.aux.x, self.aux.y, self.aux.attributes[attribute], self.pool_window
            )
        return self._aux[key]

    def zoo(self, attribute: str, size: int | None = None) -> ModelZoo:
        """Defender zoo for ``attribute`` trained before the first round; ``size`` takes a prefix."""
        if attribute not in self._zoos:
            z = self.cfg.zoo
            data = self.aux_dataset(1, attribute)
            self._zoos[attribute] = train_zoo(
                data.pooled,
                data.labels,
                count=self.zoo_capacity,
                spec_sampler=lambda r, d, c: sample_member_spec(r, d, c, widths=z.widths, depth=z.depth),
                epochs=z.epochs,
                lr=z.lr,
                attribute=attribute,
                num_classes=self.attributes[attribute],
                layer_sizes=data.layer_sizes,
                pool_window=data.window,
                batch_size=z.batch_size,
                seed=derive_seed(self.seed, "zoo", attribute),
                min_members=1,
            )
        zoo = self._zoos[attribute]
        if size is None or size == len(zoo):
            return zoo
        if size > len(zoo):
            raise ConfigError(f"zoo size {size} exceeds the trained {len(zoo)} members")
        return zoo.subset(range(size))

    def zoos(self, attributes: Sequence[str], size: int | None = None) -> dict[str, ModelZoo]:
        return {a: self.zoo(a, size) for a in attributes}

    def utility(self, defense, rounds: Sequence[int]) -> dict[int, float]:
        """Test loss after each of ``rounds`` when training with ``defense`` always on."""
        wanted = set(rounds)
        flc = replace(self.fl, rounds=max(wanted))
        _, records = run_rounds(flc, self.spec, self.clients, self.test, defense, weights=self.weights_at(1))
        return {r.round: r.test_loss for r in records if r.round in wanted}


def build_scenario(cfg: ExperimentConfig, seed: int, dataset=None) -> Scenario:
    ds = cfg.dataset if dataset is None else dataset
    if ds.kind == "synthetic":
        spec = SynthSpec(ds.n_features, ds.task_classes, ds.attributes, ds.attribute_block, ds.correlation, ds.image_shape)
        full = synth_generate(spec, ds.n_aux + ds.n_clients + ds.n_test, seed)
        aux = full.take(np.arange(ds.n_aux))
        pool = full.take(np.arange(ds.n_aux, ds.n_aux + ds.n_clients))
        test = full.take(np.arange(ds.n_aux + ds.n_clients, len(full)))
    else:
        train, test = load_csv_split(ds.path, ds.schema, 0.8, seed)
        aux, pool = split(train, 0.5, seed)
    attrs = {a.id: a.cardinality for a in aux.meta.attributes}
    mspec = MlpSpec(aux.meta.feature_dim, cfg.model.hidden + (aux.meta.task_classes,), activation=cfg.model.activation, seed=seed)
    flc = FlConfig(
        num_clients=cfg.fl.num_clients,
        rounds=cfg.fl.rounds,
        lr=cfg.fl.lr,
        participation_ratio=cfg.fl.participation_ratio,
        local_epochs=cfg.fl.local_epochs,
        batch_size=cfg.fl.batch_size,
        seed=seed,
    )
    parts = partition(pool, flc.num_clients, mode=cfg.fl.partition, seed=derive_seed(seed, "partition"))
    return Scenario(cfg, seed, mspec, aux, [pool.take(p) for p in parts], test, flc, attrs)


# ---------------------------------------------------------------------------
# per-round attack state: every client's clean update and the adversaries


class RoundArtifacts:
    def __init__(self, scn: Scenario, round_: int):
        self.scn = scn
        self.round = round_
        self.weights = scn.weights_at(round_)
        self.updates, self.contexts = scn.updates_at(round_, self.weights)
        self._adversaries = {}

    def labels(self, attribute: str) -> np.ndarray:
        return np.array([client_attribute(c, attribute) for c in self.contexts])

    def adversary(self, kind: str, attribute: str):
        key = (kind, attribute)
        if key not in self._adversaries:
            a, z = self.scn.cfg.attack, self.scn.cfg.zoo
            hyper = AdversaryHyper(
                zoo_widths=z.widths,
                unknown_widths=a.unknown_widths,
                epochs=a.epochs,
                lr=a.lr,
                batch_size=a.batch_size,
                svm_c=a.svm_c,
                forest_trees=a.forest_trees,
            )
            self._adversaries[key] = train_adversary(
                kind,
                self.scn.aux_dataset(self.round, attribute),
                self.scn.attributes[attribute],
                hyper,
                seed=derive_seed(self.scn.seed, self.round, "adversary", kind, attribute),
                attribute=attribute,
            )
        return self._adversaries[key]


def protected_attributes(cfg: ExperimentConfig, scn: Scenario) -> list[D.AttributeSpec]:
    if cfg.recup.attributes:
        return [D.AttributeSpec(a, g) for a, g in cfg.recup.attributes]
    return [D.AttributeSpec(a, 1.0) for a in scn.attributes]


def attacked_attributes(cfg: ExperimentConfig, scn: Scenario) -> list[str]:
    if cfg.attack.attributes:
        return list(cfg.attack.attributes)
    return [a.id for a in protected_attributes(cfg, scn)]


def make_defense(
    section: DefenseSection,
    param: float,
    scn: Scenario,
    *,
    zoo_size: int | None = None,
    attributes: Sequence[D.AttributeSpec] | None = None,
):
    """The per-client defense for one sweep cell."""
    cfg, kind = scn.cfg, section.kind
    seed = derive_seed(scn.seed, "defense")
    if kind == "none":
        return D.IdentityDefense()
    if kind == "clip":
        return D.ClipDefense(param)
    if kind in ("dp-gaussian", "dp-laplace"):
        return D.DpDefense(D.DpConfig(section.clip_bound, param), kind.split("-")[1], seed)
    if kind == "sparsify":
        return D.SparsifyDefense(param)
    if kind == "soteria":
        return D.SoteriaDefense(D.SoteriaConfig(param, section.defend_layer))
    attrs = list(attributes) if attributes is not None else protected_attributes(cfg, scn)
    if kind == "recup":
        rc = D.RecupConfig(param, cfg.recup.iterations, cfg.recup.sampled)
        return D.RecupDefense(attrs, scn.zoos([a.id for a in attrs], zoo_size), rc, seed)
    variant = kind[len("fgsm-") :]
    target = attrs[0].id
    return D.VariantDefense(target, scn.zoo(target, zoo_size), param, cfg.recup.sampled, variant, seed)


# ---------------------------------------------------------------------------
# sweeps


def evaluate_cell(
    art: RoundArtifacts,
    section: DefenseSection,
    param: float,
    *,
    name: str | None = None,
    defense=None,
    loss: float | None = None,
    zoo_size: int | None = None,
    attributes: Sequence[D.AttributeSpec] | None = None,
) -> list[TradeoffPoint]:
    """One point per (adversary, attacked attribute) for a single cell.

    ``defense`` and ``loss`` may be supplied when the caller already built the
    defense and ran its utility trajectory; otherwise both are computed here.
    """
    scn, cfg = art.scn, art.scn.cfg
    name = name or section.name
    if defense is None:
        defense = make_defense(section, param, scn, zoo_size=zoo_size, attributes=attributes)
    if loss is None:
        loss = scn.utility(defense, [art.round])[art.round]
    defended = apply_defense(defense, art.updates, art.contexts)
    u = np.stack([d.flat() for d in defended])
    attacked = attacked_attributes(cfg, scn)
    points = []
    for kind in cfg.attack.adversaries:
        for attr in attacked:
            label = kind if len(attacked) == 1 else f"{kind}@{attr}"
            rate = asr(art.adversary(kind, attr), u, art.labels(attr))
            points.append(TradeoffPoint(name, param, art.round, label, rate, loss, None, scn.seed))
    return points


def _threads() -> int:
    raw = os.environ.get("RECUP_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RECUP_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("RECUP_THREADS must be >= 0")
    return n


def _map_seeds(fn, seeds):
    n = _threads()
    if n <= 1 or len(seeds) == 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, seeds))


@dataclass(frozen=True)
class Job:
    """A labelled curve: one defense swept over ``params``."""

    name: str
    section: DefenseSection
    params: tuple
    zoo_size: int | None = None
    attributes: tuple | None = None


def _default_jobs(cfg: ExperimentConfig) -> list[Job]:
    if not cfg.defenses:
        raise ConfigError("no [[defense]] tables configured")
    return [Job(d.name, d, d.values) for d in cfg.defenses]


def run_jobs(cfg: ExperimentConfig, jobs: Sequence[Job], log=None) -> list[TradeoffPoint]:
    """Evaluate every (job, parameter, seed, round) cell; rows ordered by job, parameter, seed, round."""
    capacity = max([j.zoo_size for j in jobs if j.zoo_size] + [cfg.zoo.size])
    rounds = cfg.eval_rounds

    def per_seed(seed):
        scn = build_scenario(cfg, seed)
        scn.zoo_capacity = capacity
        arts: dict[int, RoundArtifacts] = {}
        out = {}
        for ji, job in enumerate(jobs):
            for pi, param in enumerate(job.params):
                failure = None
                try:
                    defense = make_defense(job.section, param, scn, zoo_size=job.zoo_size, attributes=job.attributes)
                    losses = scn.utility(defense, rounds)
                except RecupError as exc:
                    failure = exc
                for t in rounds:
                    try:
                        if failure is not None:
                            raise failure
                        if t not in arts:
                            arts[t] = RoundArtifacts(scn, t)
                        cell = evaluate_cell(arts[t], job.section, param, name=job.name, defense=defense, loss=losses[t])
                    except RecupError as exc:
                        if log:
                            log(f"cell {job.name} param={param} seed={seed} round={t} failed: {exc}")
                        cell = [TradeoffPoint(job.name, param, t, "error", None, None, None, seed)]
                    out[(ji, pi, t)] = cell
        return out

    results = _map_seeds(per_seed, list(cfg.seeds))
    points = []
    for ji, job in enumerate(jobs):
        for pi in range(len(job.params)):
            for res in results:  # seeds in configured order
                for t in rounds:
                    points.extend(res[(ji, pi, t)])
    return points


def run_sweep(cfg: ExperimentConfig, log=None) -> list[TradeoffPoint]:
    """Trade-off points for every configured defense, parameter, seed and evaluation round."""
    return run_jobs(cfg, _default_jobs(cfg), log)


def _recup_values(cfg: ExperimentConfig, override: Sequence[float]) -> tuple[float, ...]:
    if override:
        return tuple(override)
    for d in cfg.defenses:
        if d.kind == "recup":
            return d.values
    raise ConfigError("no RecUP parameter values configured")


def run_variant_ablation(cfg: ExperimentConfig, log=None) -> list[TradeoffPoint]:
    """RecUP against the single-shot FGSM variants on shared seeds and parameter values."""
    values = _recup_values(cfg, cfg.ablation.values)
    jobs = [Job("recup", DefenseSection("recup", values=values), values)]
    for v in cfg.ablation.variants:
        kind = f"fgsm-{v}"
        jobs.append(Job(kind, DefenseSection(kind, values=values), values))
    return run_jobs(cfg, jobs, log)


def run_zoo_size_study(cfg: ExperimentConfig, sizes: Sequence[int] | None = None, log=None) -> list[TradeoffPoint]:
    """RecUP with nested zoos of increasing size (members of a smaller zoo belong to every larger one)."""
    sizes = tuple(sizes or cfg.zoo_study.sizes)
    for s in sizes:
        if s < cfg.recup.sampled:
            raise ConfigError(f"zoo size {s} is smaller than Q={cfg.recup.sampled}")
    values = _recup_values(cfg, cfg.zoo_study.values)
    jobs = [Job(f"recup-zoo{s}", DefenseSection("recup", values=values), values, zoo_size=s) for s in sizes]
    return run_jobs(cfg, jobs, log)


def _single_epsilon(cfg: ExperimentConfig, epsilon: float | None) -> tuple[float, ...]:
    return (float(epsilon if epsilon is not None else D.DEFAULT_EPSILON),)


def run_attribute_weight_study(
    cfg: ExperimentConfig,
    pair: Sequence[str] = ("a0", "a1"),
    gammas: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    epsilon: float | None = None,
    log=None,
) -> list[TradeoffPoint]:
    """RecUP on two attributes with weights ``(g, 1 - g)``; jobs are named ``gamma=<g>``.

    Both attributes are attacked, so adversary labels read ``kind@attr``.
    """
    a, b = pair
    values = _single_epsilon(cfg, epsilon)
    section = DefenseSection("recup", values=values)
    jobs = [
        Job(f"gamma={g:g}", section, values, attributes=(D.AttributeSpec(a, float(g)), D.AttributeSpec(b, 1.0 - float(g))))
        for g in gammas
    ]
    return run_jobs(replace(cfg, attack=replace(cfg.attack, attributes=(a, b))), jobs, log)


def run_attribute_count_study(
    cfg: ExperimentConfig, counts: Sequence[int] = (1, 3, 5), epsilon: float | None = None, log=None
) -> list[TradeoffPoint]:
    """RecUP protecting the first ``k`` dataset attributes at equal weight, plus an undefended job.

    Every dataset attribute is attacked in every job; jobs are named ``none``
    and ``protect=<k>``.
    """
    ids = [a[0] for a in cfg.dataset.attributes]
    if max(counts) > len(ids):
        raise ConfigError(f"cannot protect {max(counts)} of {len(ids)} attributes")
    values = _single_epsilon(cfg, epsilon)
    jobs = [Job("none", DefenseSection("none", values=(0.0,)), (0.0,))]
    jobs += [
        Job(f"protect={k}", DefenseSection("recup", values=values), values, attributes=tuple(D.AttributeSpec(i) for i in ids[:k]))
        for k in counts
    ]
    return run_jobs(replace(cfg, attack=replace(cfg.attack, attributes=tuple(ids))), jobs, log)


# ---------------------------------------------------------------------------
# convergence


def run_convergence(cfg: ExperimentConfig, log=None) -> list[ConvergenceRow]:
    """Per-round test loss with and without RecUP (always on) for each participation ratio."""
    conv = cfg.convergence
    rounds = conv.rounds or cfg.fl.rounds

    def per_seed(seed):
        scn = build_scenario(cfg, seed)
        rows = []
        for ratio in conv.participation:
            flc = replace(scn.fl, participation_ratio=ratio, rounds=rounds)
            for name in ("none", "recup"):
                defense = None
                if name == "recup":
                    attrs = protected_attributes(cfg, scn)
                    rc = D.RecupConfig(conv.epsilon, cfg.recup.iterations, cfg.recup.sampled)
                    defense = D.RecupDefense(attrs, scn.zoos([a.id for a in attrs]), rc, derive_seed(seed, "defense"))
                _, records = run_rounds(flc, scn.spec, scn.clients, scn.test, defense, weights=scn.weights_at(1))
                rows += [ConvergenceRow(name, ratio, r.round, r.test_loss, seed) for r in records]
        return rows

    out = _map_seeds(per_seed, list(cfg.seeds))
    return [row for rows in out for row in rows]


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class ReconstructionOutcome:
    seed: int
    defense: str
    param: float
    mse: float
    loss: float
    x_true: np.ndarray
    x_hat: np.ndarray


def run_reconstruction(cfg: ExperimentConfig, log=None) -> list[ReconstructionOutcome]:
    """Single-record gradient inversion against a small MLP, undefended and with RecUP.

    The attacked record is client 0's first record at the initial weights;
    ``loss`` is the test loss after one step on that single update.
    """
    rc = cfg.reconstruction
    ds = replace(cfg.dataset, n_features=rc.input_dim, image_shape=rc.image_shape, kind="synthetic")
    sub = replace(cfg, model=replace(cfg.model, hidden=rc.hidden, activation=rc.activation))
    rcfg = ReconstructionConfig(iterations=rc.iterations, lr=rc.lr, tv_weight=rc.tv_weight, image_shape=rc.image_shape)

    def per_seed(seed):
        scn = build_scenario(sub, seed, dataset=ds)
        weights = scn.weights_at(1)
        (target,), (ctx,) = scn.updates_at(1, weights, [0])
        x0, label = ctx.data.x[0], int(ctx.data.y[0])
        attrs = protected_attributes(sub, scn)
        rcp = D.RecupConfig(rc.epsilon, sub.recup.iterations, sub.recup.sampled)
        recup = D.RecupDefense(attrs, scn.zoos([a.id for a in attrs]), rcp, derive_seed(seed, "defense"))
        out = []
        for name, param, update in (("none", 0.0, target), ("recup", rc.epsilon, recup(target, ctx))):
            res = reconstruct(update, weights, scn.spec, label, rcfg, seed=derive_seed(seed, "reconstruct"))
            stepped = aggregate([update], GlobalModelState(0, weights), scn.fl.lr)
            out.append(
                ReconstructionOutcome(
                    seed, name, param, reconstruction_mse(res.x, x0), test_loss(stepped.weights, scn.spec, scn.test), x0, res.x
                )
            )
        return out

    res = _map_seeds(per_seed, list(cfg.seeds))
    return [o for group in res for o in group]
