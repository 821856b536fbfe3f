"""Discrete-event simulation of heterogeneous asynchronous clients.

Event mode runs every fetch, local round and merge on one logical timeline,
so equal inputs give bit-identical traces. Each of the ``active_clients``
slots is bound to a capacity level; when a slot's client finishes, the next
client of that level is dispatched at the same instant and the finished one
goes to the back of its level's queue.
"""

from __future__ import annotations

import heapq
import logging
import threading
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .metrics import MetricsRecord
from .store import BUFFERED, GlobalStore
from .strategies import Kind, StrategySpec, SyncBarrier, client_round, merge_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientProfile:
    id: int
    capacity_level: int
    compute_delay: float
    comm_delay: float
    shard_id: int


@dataclass(frozen=True)
class SimConfig:
    num_clients: int = 104
    active_clients: int = 8
    levels: int = 8
    speed_ratio: float = 5.0
    compute_delay: float = 1.0
    comm_delay: float = 0.0
    max_merges: int | None = 200
    epochs: float | None = None
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.active_clients < 1:
            raise ConfigError("active_clients must be >= 1")
        if self.active_clients > self.num_clients:
            raise ConfigError("active_clients must not exceed num_clients")
        if not 1 <= self.levels <= self.num_clients:
            raise ConfigError("levels must be in 1..num_clients")
        if self.speed_ratio < 1:
            raise ConfigError("speed_ratio must be >= 1")
        if self.compute_delay < 0 or self.comm_delay < 0:
            raise ConfigError("delays must be >= 0")
        if self.max_merges is None and self.epochs is None:
            raise ConfigError("set max_merges or epochs")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")


@dataclass(order=True, frozen=True)
class SimEvent:
    time: float
    sequence_no: int
    kind: str = field(compare=False)
    client_id: int = field(compare=False)


def level_factor(level: int, levels: int, speed_ratio: float) -> float:
    """Delay multiplier, linear from 1 (level 1) to ``speed_ratio`` (level L)."""
    if levels == 1:
        return 1.0
    return 1.0 + (speed_ratio - 1.0) * (level - 1) / (levels - 1)


def build_clients(config: SimConfig) -> list[ClientProfile]:
    """Round-robin capacity levels; client ``i`` owns shard ``i``."""
    clients = []
    for i in range(config.num_clients):
        level = i % config.levels + 1
        f = level_factor(level, config.levels, config.speed_ratio)
        clients.append(ClientProfile(i, level, config.compute_delay * f,
                                     config.comm_delay * f, i))
    return clients


def slot_levels(config: SimConfig) -> list[int]:
    return [s % config.levels + 1 for s in range(config.active_clients)]


@dataclass
class SimResult:
    records: list
    events: list
    store: GlobalStore
    compute_time: dict
    rounds: dict
    truncated: int
    inflight: list
    envelopes: list = field(default_factory=list)


def run(config: SimConfig, strategy: StrategySpec, task, train, shards, test=None,
        clients=None, on_record=None, keep_envelopes: bool = False) -> SimResult:
    """Simulate until ``max_merges`` writes or the fastest level's epoch budget.

    ``shards`` maps shard id to a :class:`~asyncdrop.nn.Dataset`. One trace
    row is produced per client write; ``train_loss`` is the global model's
    loss on ``train`` and test metrics are filled on rows written by a
    level-1 client (or every ``eval_every`` rows), and on the last row.
    In-flight rounds at termination are discarded and counted in
    ``truncated``.
    """
    if len(train) == 0:
        raise ConfigError("empty training dataset")
    clients = clients if clients is not None else build_clients(config)
    by_level: dict[int, deque] = {}
    for c in clients:
        by_level.setdefault(c.capacity_level, deque()).append(c)
    slots = slot_levels(config)
    for level, need in Counter(slots).items():
        if len(by_level.get(level, ())) < need:
            raise ConfigError(f"level {level} has fewer clients than active slots")
    for c in clients:
        if len(shards[c.shard_id]) == 0:
            raise ConfigError(f"client {c.id} has an empty shard")

    store = GlobalStore(task.init_params(), track_scores=strategy.score_grouping)
    seeds = np.random.SeedSequence(config.seed)
    barrier = SyncBarrier(config.active_clients) if strategy.kind is Kind.SYNC else None

    queue: list = []
    seq = 0
    events: list[SimEvent] = []
    pending: dict[int, tuple] = {}
    compute_time = {c.id: 0.0 for c in clients}
    rounds = {c.id: 0 for c in clients}
    epochs_done = {c.id: 0.0 for c in clients}
    records: list[MetricsRecord] = []
    inflight_log: list[tuple[float, int]] = []
    envelopes = []
    cum_down = cum_up = 0
    writes = 0

    def dispatch(now: float, client: ClientProfile):
        nonlocal seq
        round_seed = seeds.spawn(1)[0]
        env, receipt = client_round(strategy, client, store, task, shards[client.shard_id],
                                    round_seed, config.levels)
        work = strategy.local_iters * client.compute_delay * receipt.kept_fraction
        duration = work + client.comm_delay * (receipt.params_down + receipt.params_up)
        events.append(SimEvent(now, seq, "dispatch", client.id))
        seq += 1
        ev = SimEvent(now + duration, seq, "complete", client.id)
        seq += 1
        pending[seq - 1] = (client, env, receipt, work)
        heapq.heappush(queue, ev)

    def batch_epochs(client):
        n = len(shards[client.shard_id])
        b = strategy.batch_size if 0 < strategy.batch_size < n else n
        return strategy.local_iters * b / n

    for level in slots:
        dispatch(0.0, by_level[level].popleft())

    level1 = [c.id for c in clients if c.capacity_level == 1]
    done = False
    while queue and not done:
        ev = heapq.heappop(queue)
        client, env, receipt, work = pending.pop(ev.sequence_no)
        events.append(ev)
        result = merge_for(strategy, store, env, barrier)
        writes += 1
        compute_time[client.id] += work
        rounds[client.id] += 1
        epochs_done[client.id] += batch_epochs(client)
        cum_down += receipt.params_down
        cum_up += receipt.params_up
        if keep_envelopes:
            envelopes.append(env)
        by_level[client.capacity_level].append(client)

        if config.max_merges is not None and writes >= config.max_merges:
            done = True
        if config.epochs is not None and any(epochs_done[i] >= config.epochs for i in level1):
            done = True

        snapshot = store.snapshot()
        train_loss, _ = task.evaluate(snapshot, train)
        evaluate = test is not None and (
            done
            or (config.eval_every > 0 and writes % config.eval_every == 0)
            or (config.eval_every == 0 and client.capacity_level == 1)
        )
        test_loss = test_acc = None
        if evaluate:
            test_loss, test_acc = task.evaluate(snapshot, test)
        rec = MetricsRecord(ev.time, writes - 1, store.version, client.id, client.capacity_level,
                            train_loss, test_loss, test_acc, cum_down, cum_up, int(env.staleness))
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if done:
            break

        if barrier is None:
            dispatch(ev.time, by_level[client.capacity_level].popleft())
        elif result is not BUFFERED and result != BUFFERED:
            for level in slots:
                dispatch(ev.time, by_level[level].popleft())
        inflight_log.append((ev.time, len(queue)))

    truncated = len(queue)
    if truncated:
        log.info("discarded %d in-flight rounds at termination", truncated)
    return SimResult(records, events, store, compute_time, rounds, truncated, inflight_log,
                     envelopes)


def staleness_histogram(records) -> tuple[dict, int]:
    """Counts of each staleness value, and the maximum."""
    records = list(records)
    if not records:
        raise ConfigError("empty trace")
    counts = Counter(r.staleness for r in records)
    return dict(sorted(counts.items())), max(counts)


def bounded_config(max_staleness: int, max_merges: int = 100, seed: int = 0,
                   compute_delay: float = 1.0) -> SimConfig:
    """Equal-speed schedule whose staleness never exceeds ``max_staleness``.

    With ``E + 1`` equally fast active clients each round overlaps exactly
    ``E`` other commits.
    """
    a = max_staleness + 1
    return SimConfig(num_clients=a, active_clients=a, levels=1, speed_ratio=1.0,
                     compute_delay=compute_delay, comm_delay=0.0, max_merges=max_merges,
                     seed=seed)


def run_threaded(config: SimConfig, strategy: StrategySpec, task, shards, clients=None,
                 timeout: float = 60.0):
    """Lock-free demonstration: one thread per active slot over a concurrent store.

    Interleavings are nondeterministic; only the commit count and finiteness
    of the final model are meaningful. Returns the store.
    """
    if strategy.kind in (Kind.SYNC, Kind.FEDBUFF):
        raise ConfigError("threaded mode supports only per-write strategies")
    if config.max_merges is None:
        raise ConfigError("threaded mode needs max_merges")
    clients = clients if clients is not None else build_clients(config)
    store = GlobalStore(task.init_params(), concurrent=True,
                        track_scores=strategy.score_grouping)
    by_level: dict[int, deque] = {}
    for c in clients:
        by_level.setdefault(c.capacity_level, deque()).append(c)
    lock = threading.Lock()
    budget = [config.max_merges]
    seeds = np.random.SeedSequence(config.seed)

    def worker(level):
        while True:
            with lock:
                if budget[0] <= 0:
                    return
                budget[0] -= 1
                client = by_level[level].popleft()
                seed = seeds.spawn(1)[0]
            env, _ = client_round(strategy, client, store, task, shards[client.shard_id],
                                  seed, config.levels)
            merge_for(strategy, store, env)
            with lock:
                by_level[level].append(client)

    threads = [threading.Thread(target=worker, args=(lv,), daemon=True)
               for lv in slot_levels(config)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    return store
