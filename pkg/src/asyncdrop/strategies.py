"""Client-round strategies: AsyncDrop, Hetero AsyncDrop and the baselines."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .masking import hetero_mask, layerwise_mask, ordered_mask, random_mask
from .nn import sgd_step
from .params import ModelParams
from .store import BUFFERED, GlobalStore, UpdateEnvelope


class Kind(str, enum.Enum):
    ASYNCDROP = "asyncdrop"
    HETERO = "hetero"
    FEDAVG = "fedavg"
    WEIGHTED = "weighted"
    FEDPROX = "fedprox"
    FJORD = "fjord"
    FEDBUFF = "fedbuff"
    SYNC = "sync"


MASKED_KINDS = {Kind.ASYNCDROP, Kind.HETERO, Kind.FJORD}


@dataclass(frozen=True)
class StrategySpec:
    kind: Kind = Kind.ASYNCDROP
    keep_rate: float = 0.75
    alpha: float = 1.0
    lr: float = 0.01
    local_iters: int = 50
    mu: float = 0.0
    buffer_size: int = 4
    mask_mode: str = "exact-k"
    grouping: str = "unit"
    batch_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.local_iters < 1:
            raise ConfigError("local_iters must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 < self.keep_rate <= 1.0:
            raise ConfigError(f"keep_rate must be in (0, 1], got {self.keep_rate}")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")
        if self.buffer_size < 1:
            raise ConfigError("buffer_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.mask_mode not in ("exact-k", "bernoulli"):
            raise ConfigError(f"mask_mode must be exact-k or bernoulli, got {self.mask_mode!r}")
        if self.grouping not in ("unit", "layer"):
            raise ConfigError(f"grouping must be unit or layer, got {self.grouping!r}")
        if self.batch_size < 0:
            raise ConfigError("batch_size must be >= 0")

    @property
    def score_grouping(self) -> str | None:
        """Which score table the store must maintain for this strategy."""
        return self.grouping if self.kind is Kind.HETERO else None


@dataclass(frozen=True)
class CostReceipt:
    params_down: int
    params_up: int
    kept_fraction: float
    compute_units: float


def make_mask(spec: StrategySpec, store: GlobalStore, num_units: int, capacity_level: int,
              levels: int, rng):
    if spec.kind is Kind.ASYNCDROP:
        return random_mask(num_units, spec.keep_rate, spec.mask_mode, rng)
    if spec.kind is Kind.HETERO:
        if store.scores is None:
            raise ContractError("hetero strategy needs a store that tracks scores")
        build = layerwise_mask if spec.grouping == "layer" else hetero_mask
        return build(store.scores, capacity_level, levels, spec.keep_rate)
    if spec.kind is Kind.FJORD:
        return ordered_mask(num_units, capacity_level, levels)
    return None


def proximal_term(mu: float, local: dict, fetched: dict) -> float:
    if mu == 0:
        return 0.0
    sq = sum(float(np.sum((local[k] - fetched[k]) ** 2)) for k in local)
    return 0.5 * mu * sq


def local_objective(spec: StrategySpec, task, local: dict, fetched: dict, data, mask=None,
                    indices=None) -> float:
    """Data objective, plus ``mu/2 * ||local - fetched||^2`` for FedProx."""
    value = task.objective(local, data, mask, indices)
    if spec.kind is Kind.FEDPROX:
        value += proximal_term(spec.mu, local, fetched)
    return value


def _batches(spec: StrategySpec, n: int, rng):
    if spec.batch_size == 0 or spec.batch_size >= n:
        while True:
            yield None
    while True:
        order = rng.permutation(n)
        for start in range(0, n - spec.batch_size + 1, spec.batch_size):
            yield order[start:start + spec.batch_size]


def train_local(spec: StrategySpec, task, start: ModelParams, data, mask, rng=None):
    """Run ``local_iters`` SGD steps on ``data``, touching only kept coordinates."""
    rng = np.random.default_rng(rng)
    masks = start.element_masks(mask) if mask is not None else None
    fetched = start.groups
    if masks is not None and mask.mode != "layerwise":
        params = {k: np.where(masks[k], v, 0.0) for k, v in fetched.items()}
    else:
        params = {k: v.copy() for k, v in fetched.items()}
    unit_mask = None if (mask is None or mask.mode == "layerwise") else mask
    batches = _batches(spec, len(data), rng)
    for _ in range(spec.local_iters):
        idx = next(batches)
        grad = task.gradient(params, data, unit_mask, idx)
        if spec.kind is Kind.FEDPROX and spec.mu != 0:
            grad = {k: grad[k] + spec.mu * (params[k] - fetched[k]) for k in grad}
        if masks is not None:
            grad = {k: np.where(masks[k], g, 0.0) for k, g in grad.items()}
        params = sgd_step(params, grad, spec.lr)
    if masks is not None:
        params = {k: np.where(masks[k], v, 0.0) for k, v in params.items()}
    return ModelParams(params, start.unit_axes, start.version)


def client_round(spec: StrategySpec, client, store: GlobalStore, task, data, rng_seed=None,
                 levels: int = 1):
    """Fetch, mask, train locally, and package the result.

    Returns the envelope and a :class:`CostReceipt`. Masked strategies move
    only the kept parameters in each direction; mask and mini-batch draws use
    independent streams spawned from ``rng_seed``; layerwise masks still
    download the whole model because frozen layers are needed in the forward
    pass.
    """
    if not isinstance(rng_seed, np.random.SeedSequence):
        rng_seed = np.random.SeedSequence(rng_seed)
    mask_seq, batch_seq = rng_seed.spawn(2)
    snapshot, version = store.fetch()
    mask = make_mask(spec, store, snapshot.num_units, client.capacity_level, levels,
                     np.random.default_rng(mask_seq))
    local = train_local(spec, task, snapshot, data, mask, np.random.default_rng(batch_seq))
    kept = snapshot.kept_count(mask)
    down = snapshot.size if (mask is not None and mask.mode == "layerwise") else kept
    frac = kept / snapshot.size
    receipt = CostReceipt(down, kept, frac, spec.local_iters * frac)
    env = UpdateEnvelope(client.id, mask, local, version, strategy=spec.kind.value)
    return env, receipt


@dataclass
class SyncBarrier:
    """Collects one update per active client, then commits their average."""

    cohort: int
    pending: list = field(default_factory=list)

    def add(self, store: GlobalStore, envelope: UpdateEnvelope):
        self.pending.append(envelope)
        envelope.staleness = store.version - envelope.base_version
        if len(self.pending) < self.cohort:
            return BUFFERED
        batch, self.pending = self.pending, []
        names = batch[0].local_params.names
        groups = {}
        for k in names:
            total = batch[0].local_params.groups[k]
            for env in batch[1:]:
                total = total + env.local_params.groups[k]
            groups[k] = total / float(len(batch))
        avg = UpdateEnvelope(batch[-1].client_id, None,
                             ModelParams(groups, store.unit_axes), batch[-1].base_version,
                             strategy=Kind.SYNC.value)
        return store.plain_merge(avg, 1.0)


def merge_for(spec: StrategySpec, store: GlobalStore, envelope: UpdateEnvelope,
              barrier: SyncBarrier | None = None):
    """Route an envelope to its strategy's write-back rule.

    Returns the new version, or ``BUFFERED`` when the write was held back.
    """
    if envelope.strategy and envelope.strategy != spec.kind.value:
        raise ContractError(f"{envelope.strategy} envelope routed to {spec.kind.value}")
    kind = spec.kind
    if kind in MASKED_KINDS:
        return store.masked_merge(envelope, spec.alpha)
    if kind in (Kind.FEDAVG, Kind.FEDPROX):
        return store.plain_merge(envelope, spec.alpha)
    if kind is Kind.WEIGHTED:
        return store.weighted_merge(envelope, spec.alpha)
    if kind is Kind.FEDBUFF:
        return store.buffered_merge(envelope, spec.buffer_size, spec.alpha)
    if kind is Kind.SYNC:
        if barrier is None:
            raise ContractError("sync strategy needs a SyncBarrier")
        return barrier.add(store, envelope)
    raise ContractError(f"unhandled strategy {kind}")
