"""Deterministic event-driven simulation of decentralised GAN training by gossip.

One logical tick is one local epoch. Every UE trains in chunks of ``interval``
epochs; at each chunk boundary the loop, in a fixed order:

1. records a ``train-chunk`` event per UE,
2. lets every UE send its current (G, D) pair to freshly selected peers
   (``send`` or ``drop`` events),
3. delivers every message whose arrival tick has passed, in send order,
   merging a UE's inbox as soon as it holds ``n_peers`` distinct senders.

Randomness (initialisation, per-UE training, peer choice, drops, delays)
comes from independent streams spawned from the master seed, so the trace
and the final parameters are a pure function of (config, shards, seed).
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gan import GanConfig, GanHistory, GanTrainer, build_gan
from .nn import ParamVector

TOPOLOGIES = ("random_k", "full")
POLICIES = ("literal", "inclusive")


@dataclass(frozen=True)
class Topology:
    kind: str
    n_ues: int
    k: int | None = None

    def __post_init__(self):
        if self.kind not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        if self.n_ues < 2:
            raise ValueError("gossip needs at least two UEs")
        if self.kind == "random_k" and not (self.k is not None and 1 <= self.k <= self.n_ues - 1):
            raise ValueError(f"random_k needs 1 <= k <= K-1 = {self.n_ues - 1}, got k={self.k}")

    @property
    def fan_out(self) -> int:
        return self.n_ues - 1 if self.kind == "full" else self.k


def select_peers(topology: Topology, ue_id: int, rng: np.random.Generator) -> list[int]:
    """Peers for one send round; never includes ``ue_id``."""
    others = [j for j in range(topology.n_ues) if j != ue_id]
    if topology.kind == "full":
        return others
    picks = rng.choice(len(others), size=topology.k, replace=False)
    return sorted(others[i] for i in picks)


@dataclass
class GossipConfig:
    n_ues: int = 10
    topology: str = "full"
    k: int | None = None
    interval: int = 10
    n_peers: int | None = None  # default: the topology's fan-out
    delay: int = 0
    delay_jitter: int = 0
    drop_prob: float = 0.0
    budget_epochs: int = 1000
    policy: str = "literal"
    common_init: bool = True
    shared_streams: bool = False
    seed: int = 0
    init_seed: int | None = None  # default: derived from seed
    train_seed: int | None = None  # default: derived from seed

    def __post_init__(self):
        topo = self.topology_obj()
        if self.n_peers is None:
            self.n_peers = topo.fan_out
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if not 1 <= self.n_peers <= self.n_ues - 1:
            raise ValueError(f"n_peers must lie in 1..K-1, got {self.n_peers}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop probability must lie in [0, 1]")
        if self.delay < 0 or self.delay_jitter < 0:
            raise ValueError("delays are non-negative tick counts")
        if self.budget_epochs < 1:
            raise ValueError("epoch budget must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"merge policy must be one of {POLICIES}")

    def topology_obj(self) -> Topology:
        return Topology(self.topology, self.n_ues, self.k)

    @property
    def rounds(self) -> int:
        return -(-self.budget_epochs // self.interval)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- merging


def _check_layout(vectors: list[ParamVector]) -> None:
    ref = vectors[0].layout()
    for v in vectors[1:]:
        if v.layout() != ref:
            raise ValueError("cannot merge parameter vectors with different layouts")


def merge_models(received: list[ParamVector], own: ParamVector | None = None, policy: str = "literal") -> ParamVector:
    """Elementwise mean of the received vectors (plus ``own`` under the inclusive policy).

    Inputs are put in a canonical order (by content digest) and averaged as
    ref + sum(x_i - ref)/n, so the result is bit-identical under any
    permutation and exactly equal to the input when all inputs agree.
    Batch-norm buffers are averaged the same way.
    """
    if policy not in POLICIES:
        raise ValueError(f"merge policy must be one of {POLICIES}")
    vectors = list(received) + ([own] if policy == "inclusive" and own is not None else [])
    if not vectors:
        raise ValueError("nothing to merge")
    _check_layout(vectors)
    vectors.sort(key=lambda v: v.digest())
    ref = vectors[0].flat(with_buffers=True)
    acc = np.zeros_like(ref)
    for v in vectors[1:]:
        acc += v.flat(with_buffers=True) - ref
    # where nothing differs keep ref as is: ref + 0.0 would turn -0.0 into +0.0
    return vectors[0].with_flat(np.where(acc == 0, ref, ref + acc / len(vectors)))


def pair_digest(g: ParamVector, d: ParamVector) -> str:
    h = hashlib.sha256(g.flat(True).tobytes())
    h.update(d.flat(True).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- simulation


@dataclass
class Message:
    seq: int
    src: int
    dst: int
    sent: int
    arrives: int
    g: ParamVector
    d: ParamVector


@dataclass
class UEState:
    id: int
    data: np.ndarray
    trainer: GanTrainer
    inbox: dict[int, tuple[ParamVector, ParamVector]] = field(default_factory=dict)
    merges: int = 0

    @property
    def G(self):
        return self.trainer.G

    @property
    def D(self):
        return self.trainer.D

    @property
    def epochs_done(self) -> int:
        return self.trainer.epochs_done

    @property
    def history(self) -> GanHistory:
        return self.trainer.history

    def states(self) -> tuple[ParamVector, ParamVector]:
        return self.trainer.states()


@dataclass
class Counters:
    """Parameters moved over each link type; BS-bound traffic is uplink."""

    bs_uplink: int = 0
    bs_downlink: int = 0
    d2d: int = 0
    sends: int = 0
    delivered: int = 0
    dropped: int = 0
    merges: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GossipTrace:
    events: list[dict] = field(default_factory=list)

    def log(self, tick: int, kind: str, src: int, dst: int, digest: str) -> None:
        self.events.append({"tick": tick, "kind": kind, "src": src, "dst": dst, "digest": digest})

    def kinds(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


@dataclass
class GossipResult:
    ues: list[UEState]
    trace: GossipTrace
    counters: Counters
    merge_snapshots: list[list[str]] = field(default_factory=list)
    round_snapshots: list[list[str]] = field(default_factory=list)


@dataclass
class _Streams:
    init: list[int]
    train: list[np.random.SeedSequence]
    peers: np.random.Generator
    drops: np.random.Generator
    delays: np.random.Generator


def _streams(config: GossipConfig, k: int | None = None) -> _Streams:
    root = np.random.SeedSequence(config.seed)
    init_ss, train_ss, peer_ss, drop_ss, delay_ss = root.spawn(5)
    if config.init_seed is not None:
        init_ss = np.random.SeedSequence(config.init_seed)
    if config.train_seed is not None:
        train_ss = np.random.SeedSequence(config.train_seed)
    k = config.n_ues if k is None else k
    if config.common_init:
        init = [int(init_ss.generate_state(1)[0])] * k
    else:
        init = [int(s.generate_state(1)[0]) for s in init_ss.spawn(k)]
    train = [train_ss] * k if config.shared_streams else train_ss.spawn(k)
    return _Streams(init, train, np.random.default_rng(peer_ss), np.random.default_rng(drop_ss),
                    np.random.default_rng(delay_ss))


def _make_ues(shards, gan_config: GanConfig, streams: _Streams) -> list[UEState]:
    ues = []
    for i, shard in enumerate(shards):
        shard = np.asarray(shard, dtype=float)
        if len(shard) == 0:
            raise ValueError(f"UE {i} has an empty dataset shard")
        G, D = build_gan(gan_config, streams.init[i])
        # a fresh Generator per UE from the (possibly shared) seed sequence state
        seed = np.random.default_rng(streams.train[i].generate_state(4))
        ues.append(UEState(i, shard, GanTrainer(G, D, shard, gan_config, seed)))
    return ues


def _train_chunk(ues: list[UEState], n_epochs: int, workers: int) -> None:
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda u: u.trainer.train_epochs(n_epochs), ues))
    else:
        for u in ues:
            u.trainer.train_epochs(n_epochs)


def run_gossip(
    config: GossipConfig,
    shards,
    gan_config: GanConfig,
    workers: int = 1,
    on_merge=None,
) -> GossipResult:
    """Simulate gossip training until every UE has spent ``budget_epochs`` local epochs."""
    shards = list(shards)
    if len(shards) != config.n_ues:
        raise ValueError(f"expected {config.n_ues} shards, got {len(shards)}")
    topo = config.topology_obj()
    streams = _streams(config)
    ues = _make_ues(shards, gan_config, streams)
    trace, counters = GossipTrace(), Counters()
    snapshots: list[list[str]] = []  # after each merge event
    rounds: list[list[str]] = []  # after each tick's deliveries
    in_flight: list[Message] = []
    seq = 0
    tick = 0
    payload = None
    while tick < config.budget_epochs:
        chunk = min(config.interval, config.budget_epochs - tick)
        _train_chunk(ues, chunk, workers)
        tick += chunk
        states = [u.states() for u in ues]
        for u, (g, d) in zip(ues, states):
            trace.log(tick, "train-chunk", u.id, u.id, pair_digest(g, d))
        if payload is None:
            payload = states[0][0].count() + states[0][1].count()

        for u, (g, d) in zip(ues, states):
            digest = pair_digest(g, d)
            for peer in select_peers(topo, u.id, streams.peers):
                counters.sends += 1
                counters.d2d += payload
                if streams.drops.random() < config.drop_prob:
                    counters.dropped += 1
                    trace.log(tick, "drop", u.id, peer, digest)
                    continue
                lag = config.delay + (int(streams.delays.integers(0, config.delay_jitter + 1))
                                      if config.delay_jitter else 0)
                in_flight.append(Message(seq, u.id, peer, tick, tick + lag, g, d))
                seq += 1
                trace.log(tick, "send", u.id, peer, digest)

        due = sorted((m for m in in_flight if m.arrives <= tick), key=lambda m: m.seq)
        in_flight = [m for m in in_flight if m.arrives > tick]
        for m in due:
            dst = ues[m.dst]
            counters.delivered += 1
            trace.log(tick, "deliver", m.src, m.dst, pair_digest(m.g, m.d))
            dst.inbox[m.src] = (m.g, m.d)  # newest message per sender wins
            if len(dst.inbox) >= config.n_peers:
                own_g, own_d = dst.states()
                gs = [dst.inbox[s][0] for s in sorted(dst.inbox)]
                ds = [dst.inbox[s][1] for s in sorted(dst.inbox)]
                new_g = merge_models(gs, own_g, config.policy)
                new_d = merge_models(ds, own_d, config.policy)
                dst.trainer.load_states(new_g, new_d)
                dst.inbox.clear()
                dst.merges += 1
                counters.merges += 1
                trace.log(tick, "merge", m.dst, m.dst, pair_digest(new_g, new_d))
                snap = [pair_digest(*u.states()) for u in ues]
                snapshots.append(snap)
                if on_merge is not None:
                    on_merge(tick, m.dst, ues)
        rounds.append([pair_digest(*u.states()) for u in ues])
    return GossipResult(ues, trace, counters, snapshots, rounds)


def baseline_no_connection(shards, gan_config: GanConfig, config: GossipConfig) -> list[UEState]:
    """Pure local training with the same seed derivation as :func:`run_gossip`."""
    shards = list(shards)
    if len(shards) != config.n_ues:
        raise ValueError(f"expected {config.n_ues} shards, got {len(shards)}")
    ues = _make_ues(shards, gan_config, _streams(config))
    for u in ues:
        u.trainer.train_epochs(config.budget_epochs)
    return ues


@dataclass
class FederatedResult:
    G: object
    D: object
    ues: list[UEState]
    counters: Counters
    rounds: int


def baseline_federated(shards, gan_config: GanConfig, config: GossipConfig, rounds: int | None = None) -> FederatedResult:
    """Synchronous rounds of local training followed by server averaging of all K pairs.

    Each round every UE trains ``config.interval`` epochs, uploads G and D,
    and downloads the average: 2*K*(|G|+|D|) parameters per round.
    """
    shards = list(shards)
    k = len(shards)
    if k < 1:
        raise ValueError("need at least one shard")
    rounds = config.rounds if rounds is None else rounds
    streams = _streams(config, k)
    ues = _make_ues(shards, gan_config, streams)
    counters = Counters()
    for _ in range(rounds):
        for u in ues:
            u.trainer.train_epochs(config.interval)
        states = [u.states() for u in ues]
        payload = states[0][0].count() + states[0][1].count()
        g = merge_models([s[0] for s in states])
        d = merge_models([s[1] for s in states])
        counters.bs_uplink += k * payload
        counters.bs_downlink += k * payload
        counters.merges += 1
        for u in ues:
            u.trainer.load_states(g, d)
    return FederatedResult(ues[0].G, ues[0].D, ues, counters, rounds)

