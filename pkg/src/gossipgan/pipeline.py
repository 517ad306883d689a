"""End-to-end runs: gossip GAN training, synthetic data, DAE training and evaluation.

Also hosts the comparison baselines, parameter sweeps, the generative-replay
continual-learning scheme and repeated-seed statistics.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import stats as sps

from .autoencoder import DaeConfig, build_dae, nmse_db, train_dae
from .channel import ChannelConfig, NormalizedDataset, ScenarioSpec, generate_channels, normalize_dataset, preset
from .gan import GanConfig, Generator, build_gan, sample_fake, train_gan
from .gossip import GossipConfig, baseline_federated, baseline_no_connection, run_gossip
from .nn import ParamVector

RUN_KINDS = ("gossip", "true_csi", "centralized_gan", "no_connection", "federated", "untrained")
SWEEP_AXES = ("fake_count", "gamma", "ue_count")
STANDARD_GAMMAS = (1 / 16, 1 / 32, 1 / 64, 1 / 128)
METRIC_COLUMNS = (
    "run_id", "kind", "scenario", "gamma", "S", "K", "seed", "nmse_db_per_scenario",
    "bs_uplink_params", "d2d_params", "memory_bytes", "epochs", "wall_seconds",
)


@dataclass
class Seeds:
    """One named seed per stochastic stage; no ambient entropy anywhere."""

    data: int = 0
    init: int = 1
    gossip: int = 2
    selection: int = 3
    dropout: int = 4
    sample: int = 5
    dae: int = 6

    def shifted(self, offset: int) -> "Seeds":
        return Seeds(**{f.name: getattr(self, f.name) + 1000 * offset for f in fields(self)})


@dataclass
class ChannelSettings:
    n_t: int = 8
    n_c: int = 8
    bandwidth: float = 50e6
    n_paths: int | None = None
    literal: bool = False

    def config(self) -> ChannelConfig:
        return ChannelConfig(self.n_t, self.n_c, self.bandwidth, self.n_paths, literal=self.literal)


def desk_gan() -> GanConfig:
    return GanConfig(latent_dim=32, width_scale=0.125, size=(8, 8), batch_size=50, epochs=40)


def desk_dae() -> DaeConfig:
    # gamma 1/16 at 8x8 leaves an 8-number codeword with no headroom over an untrained model
    return DaeConfig(n_t=8, n_c=8, gamma=1 / 4, lr=3e-3, epochs=30, batch_size=50, width_scale=0.5)


@dataclass
class ExperimentConfig:
    scenario: str = "sparse"
    custom_scenario: ScenarioSpec | None = None
    channel: ChannelSettings = field(default_factory=ChannelSettings)
    n_ues: int = 4
    per_ue: int = 200
    test_count: int = 200
    fake_count: int = 1000
    gan: GanConfig = field(default_factory=desk_gan)
    dae: DaeConfig = field(default_factory=desk_dae)
    gossip: GossipConfig = field(default_factory=lambda: GossipConfig(n_ues=4, interval=10, budget_epochs=40))
    seeds: Seeds = field(default_factory=Seeds)
    per_generator_draws: bool = False  # draw fake_count per stored generator instead of splitting it

    def __post_init__(self):
        if self.fake_count < 1:
            raise ValueError("fake_count S must be >= 1")
        if self.n_ues < 2 or self.per_ue < 2 or self.test_count < 1:
            raise ValueError("need K >= 2, per_ue >= 2 and test_count >= 1")
        dims = (self.channel.n_t, self.channel.n_c)
        if tuple(self.gan.size) != dims or (self.dae.n_t, self.dae.n_c) != dims:
            raise ValueError(f"GAN size {self.gan.size} and DAE dims must match the channel {dims}")
        if self.gossip.n_ues != self.n_ues:
            raise ValueError(f"gossip.n_ues={self.gossip.n_ues} but n_ues={self.n_ues}")
        if self.gossip.budget_epochs != self.gan.epochs:
            raise ValueError("gossip.budget_epochs must equal gan.epochs")
        self.scenario_spec()

    def scenario_spec(self) -> ScenarioSpec:
        if self.scenario == "custom":
            if self.custom_scenario is None:
                raise ValueError("scenario 'custom' needs custom_scenario")
            return self.custom_scenario
        return preset(self.scenario)

    def gossip_config(self) -> GossipConfig:
        return replace(self.gossip, seed=self.seeds.gossip, init_seed=self.seeds.init, train_seed=self.seeds.dropout)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_ue_count(self, k: int) -> "ExperimentConfig":
        g = self.gossip
        kk = None if g.topology == "full" else min(g.k, k - 1)
        gossip = replace(g, n_ues=k, k=kk, n_peers=None)
        return replace(self, n_ues=k, gossip=gossip)

    def with_seeds(self, seeds: Seeds) -> "ExperimentConfig":
        return replace(self, seeds=seeds)


def full_scale_config(seeds: Seeds | None = None) -> ExperimentConfig:
    """The reference-scale setting: 32x32 CSI, 10 UEs with 500 samples each, 10^4 fake samples.

    Far too slow for this engine; kept for parameter and byte accounting.
    """
    return ExperimentConfig(
        channel=ChannelSettings(n_t=32, n_c=32), n_ues=10, per_ue=500, test_count=1000, fake_count=10_000,
        gan=GanConfig(), dae=DaeConfig(),
        gossip=GossipConfig(n_ues=10, topology="full", interval=10, budget_epochs=1000),
        seeds=seeds or Seeds(),
    )


# ---------------------------------------------------------------- data


@dataclass
class AreaData:
    """Real CSI of one area: UE shards plus a held-out test split, all in normalised units."""

    name: str
    dataset: NormalizedDataset
    shards: list[np.ndarray]

    @property
    def pooled(self) -> np.ndarray:
        return np.concatenate(self.shards)

    @property
    def test(self) -> np.ndarray:
        return self.dataset.test_tensors

    def data_bytes(self) -> int:
        return 4 * int(self.pooled.size)


def make_area(config: ExperimentConfig) -> AreaData:
    total = config.n_ues * config.per_ue + config.test_count
    H = generate_channels(config.channel.config(), config.scenario_spec(), total, config.seeds.data)
    ds = normalize_dataset(H, config.test_count / total, split_seed=config.seeds.data)
    train = ds.train_tensors
    shards = [train[i * config.per_ue : (i + 1) * config.per_ue] for i in range(config.n_ues)]
    return AreaData(config.scenario if config.scenario != "custom" else config.custom_scenario.name, ds, shards)


# ---------------------------------------------------------------- reports


@dataclass
class RunReport:
    run_id: str
    kind: str
    scenario: str
    gamma: float
    S: int
    K: int
    seed: int
    nmse_db: dict[str, float] = field(default_factory=dict)
    histories: dict[str, list[float]] = field(default_factory=dict)
    bs_uplink_params: int = 0
    d2d_params: int = 0
    memory_bytes: int = 0
    epochs: int = 0
    wall: dict[str, float] = field(default_factory=dict)
    generator: ParamVector | None = None
    extras: dict = field(default_factory=dict)

    @property
    def wall_seconds(self) -> float:
        return float(sum(self.wall.values()))

    def nmse(self, scenario: str | None = None) -> float:
        return self.nmse_db[scenario or self.scenario]

    def row(self, wall_clock: bool = False) -> dict:
        nmse = ";".join(f"{k}={_fmt(v)}" for k, v in sorted(self.nmse_db.items()))
        return {
            "run_id": self.run_id, "kind": self.kind, "scenario": self.scenario,
            "gamma": repr(float(self.gamma)), "S": self.S, "K": self.K, "seed": self.seed,
            "nmse_db_per_scenario": nmse, "bs_uplink_params": self.bs_uplink_params,
            "d2d_params": self.d2d_params, "memory_bytes": self.memory_bytes, "epochs": self.epochs,
            "wall_seconds": f"{self.wall_seconds:.3f}" if wall_clock else "",
        }


def _fmt(v: float) -> str:
    return "perfect" if v == -math.inf else repr(float(v))


class _Clock:
    def __init__(self):
        self.wall: dict[str, float] = {}

    @contextmanager
    def phase(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.wall[name] = self.wall.get(name, 0.0) + time.perf_counter() - t


def _select(n: int, seed: int) -> int:
    return int(np.random.default_rng(seed).integers(n))


@dataclass
class GeneratorOutcome:
    """What a GAN-producing run kind hands to the DAE stage."""

    generator: Generator | None
    bs_uplink: int = 0
    d2d: int = 0
    histories: dict[str, list[float]] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def train_generator(config: ExperimentConfig, area: AreaData, kind: str) -> GeneratorOutcome:
    """Run the GAN stage of ``kind`` and return the generator the BS would use."""
    if kind == "gossip":
        res = run_gossip(config.gossip_config(), area.shards, config.gan)
        chosen = res.ues[_select(config.n_ues, config.seeds.selection)]
        return GeneratorOutcome(chosen.G, res.counters.bs_uplink, res.counters.d2d,
                                {"d_loss": chosen.history.d_loss, "g_loss": chosen.history.g_loss},
                                {"selected_ue": chosen.id, "merges": res.counters.merges, "trace": res.trace})
    if kind == "no_connection":
        ues = baseline_no_connection(area.shards, config.gan, config.gossip_config())
        chosen = ues[_select(config.n_ues, config.seeds.selection)]
        return GeneratorOutcome(chosen.G, 0, 0, {"d_loss": chosen.history.d_loss, "g_loss": chosen.history.g_loss},
                                {"selected_ue": chosen.id})
    if kind == "federated":
        res = baseline_federated(area.shards, config.gan, config.gossip_config())
        ue = res.ues[0]
        return GeneratorOutcome(res.G, res.counters.bs_uplink, 0,
                                {"d_loss": ue.history.d_loss, "g_loss": ue.history.g_loss},
                                {"rounds": res.rounds, "bs_downlink": res.counters.bs_downlink})
    if kind == "centralized_gan":
        G, D = build_gan(config.gan, config.seeds.init)
        _, _, hist = train_gan(G, D, area.pooled, config.gan, config.seeds.dropout)
        return GeneratorOutcome(G, 0, 0, {"d_loss": hist.d_loss, "g_loss": hist.g_loss},
                                {"pooled": len(area.pooled)})
    if kind in ("true_csi", "untrained"):
        return GeneratorOutcome(None)
    raise ValueError(f"unknown run kind {kind!r}; choose from {RUN_KINDS}")


def fit_and_evaluate(config: ExperimentConfig, train_data: np.ndarray | None, eval_sets: dict[str, np.ndarray]):
    """Train a fresh DAE on ``train_data`` (None: leave it untrained) and report NMSE per eval set."""
    dae = build_dae(config.dae, config.seeds.init)
    history: list[float] = []
    if train_data is not None:
        _, history = train_dae(dae, train_data, config.dae, config.seeds.dae)
    nmse = {name: nmse_db(x, dae.reconstruct(x)) for name, x in eval_sets.items()}
    return dae, nmse, history


def _run_id(config: ExperimentConfig, kind: str) -> str:
    return f"{kind}-{config.digest()}"


def run_experiment(config: ExperimentConfig, kind: str = "gossip", area: AreaData | None = None,
                   outcome: GeneratorOutcome | None = None) -> RunReport:
    """One end-to-end run of the given kind: GAN stage, synthetic data, DAE training, evaluation."""
    if kind not in RUN_KINDS:
        raise ValueError(f"unknown run kind {kind!r}; choose from {RUN_KINDS}")
    clock = _Clock()
    with clock.phase("data"):
        area = area or make_area(config)
    with clock.phase("gan"):
        outcome = outcome or train_generator(config, area, kind)
    with clock.phase("synth"):
        if kind == "true_csi":
            train_data = area.pooled
        elif kind == "untrained":
            train_data = None
        else:
            train_data = sample_fake(outcome.generator, config.fake_count, config.seeds.sample)
    with clock.phase("dae"):
        dae, nmse, dae_hist = fit_and_evaluate(config, train_data, {area.name: area.test})
    gen_state = outcome.generator.state() if outcome.generator is not None else None
    if kind == "true_csi":
        memory = area.data_bytes()
    elif gen_state is not None:
        memory = gen_state.memory_bytes()
    else:
        memory = 0
    histories = dict(outcome.histories, dae_loss=dae_hist)
    return RunReport(
        _run_id(config, kind), kind, area.name, config.dae.gamma, config.fake_count, config.n_ues,
        config.seeds.data, nmse, histories, outcome.bs_uplink, outcome.d2d, memory,
        config.gan.epochs if outcome.generator is not None else 0, clock.wall, gen_state,
        dict(outcome.extras, dae=dae),
    )


def run_gossip_gan(config: ExperimentConfig) -> RunReport:
    return run_experiment(config, "gossip")


def run_baseline(config: ExperimentConfig, kind: str) -> RunReport:
    if kind == "gossip":
        raise ValueError("use run_gossip_gan for the proposed scheme")
    return run_experiment(config, kind)


# ---------------------------------------------------------------- sweeps


def _apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "fake_count":
        return replace(config, fake_count=int(value))
    if axis == "gamma":
        return replace(config, dae=replace(config.dae, gamma=value))
    if axis == "ue_count":
        return config.with_ue_count(int(value))
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def sweep(config: ExperimentConfig, axis: str, values, kind: str = "gossip") -> list[tuple[object, RunReport]]:
    """One run per axis value with the base seeds held fixed.

    S and gamma do not affect the GAN stage, so for those axes the generator
    is trained once and shared, which is exactly what separate runs would
    produce.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    values = list(values)
    out = []
    area = outcome = None
    for v in values:
        cfg = _apply_axis(config, axis, v)
        if axis == "ue_count" or area is None:
            area = make_area(cfg)
            outcome = train_generator(cfg, area, kind)
        out.append((v, run_experiment(cfg, kind, area, outcome)))
    return out


# ---------------------------------------------------------------- continual learning


@dataclass
class GeneratorMemory:
    """Stored generator snapshots G_0..G_t, each labelled with its scenario."""

    gan: GanConfig
    snapshots: list[tuple[str, ParamVector]] = field(default_factory=list)

    def append(self, label: str, state: ParamVector) -> None:
        if self.snapshots and state.layout() != self.snapshots[0][1].layout():
            raise ValueError("generator snapshot is not shape-compatible with the stored ones")
        self.snapshots.append((label, state))

    def __len__(self) -> int:
        return len(self.snapshots)

    def bytes_per_snapshot(self) -> list[int]:
        return [s.memory_bytes() for _, s in self.snapshots]

    def memory_bytes(self) -> int:
        return int(sum(self.bytes_per_snapshot()))

    def mixed_dataset(self, total: int, seed: int, per_generator: int | None = None) -> np.ndarray:
        """Equal draws from every stored generator, concatenated in storage order."""
        if not self.snapshots:
            raise ValueError("generator memory is empty")
        n = per_generator if per_generator is not None else max(1, total // len(self.snapshots))
        parts = []
        for i, (_, state) in enumerate(self.snapshots):
            G = Generator(self.gan, np.random.default_rng(0))
            G.load_state(state)
            parts.append(sample_fake(G, n, seed + i))
        return np.concatenate(parts)


@dataclass
class ContinualState:
    memory: GeneratorMemory
    eval_sets: dict[str, np.ndarray] = field(default_factory=dict)
    real_data: dict[str, np.ndarray] = field(default_factory=dict)


def continual_step(state: ContinualState, config: ExperimentConfig, kind: str = "gossip") -> tuple[ContinualState, RunReport]:
    """Train a GAN for the new scenario, store it, retrain the DAE on the mixed synthetic set."""
    clock = _Clock()
    with clock.phase("data"):
        area = make_area(config)
    with clock.phase("gan"):
        outcome = train_generator(config, area, kind)
    state.memory.append(area.name, outcome.generator.state())
    state.eval_sets[area.name] = area.test
    state.real_data[area.name] = area.pooled
    with clock.phase("synth"):
        per = config.fake_count if config.per_generator_draws else None
        mixed = state.memory.mixed_dataset(config.fake_count, config.seeds.sample, per)
    with clock.phase("dae"):
        _, nmse, dae_hist = fit_and_evaluate(config, mixed, state.eval_sets)
    report = RunReport(
        _run_id(config, "continual"), "continual", area.name, config.dae.gamma, len(mixed), config.n_ues,
        config.seeds.data, nmse, dict(outcome.histories, dae_loss=dae_hist), outcome.bs_uplink, outcome.d2d,
        state.memory.memory_bytes(), config.gan.epochs, clock.wall, outcome.generator.state(),
        {"snapshots": len(state.memory), "mixed_size": len(mixed)},
    )
    return state, report


def continual_sequence(configs: list[ExperimentConfig], kind: str = "gossip") -> list[RunReport]:
    if not configs:
        raise ValueError("empty scenario sequence")
    state = ContinualState(GeneratorMemory(configs[0].gan))
    reports = []
    for cfg in configs:
        state, rep = continual_step(state, cfg, kind)
        reports.append(rep)
    return reports


def continual_baselines(configs: list[ExperimentConfig]) -> dict[str, list[RunReport]]:
    """No-retraining (newest real data only) and retraining (union of all real data) schemes."""
    if not configs:
        raise ValueError("empty scenario sequence")
    eval_sets: dict[str, np.ndarray] = {}
    real: dict[str, np.ndarray] = {}
    out = {"no_retraining": [], "retraining": []}
    for cfg in configs:
        area = make_area(cfg)
        eval_sets[area.name] = area.test
        real[area.name] = area.pooled
        for scheme in out:
            clock = _Clock()
            data = area.pooled if scheme == "no_retraining" else np.concatenate(list(real.values()))
            with clock.phase("dae"):
                _, nmse, hist = fit_and_evaluate(cfg, data, eval_sets)
            stored = area.pooled if scheme == "no_retraining" else data
            out[scheme].append(RunReport(
                _run_id(cfg, scheme), scheme, area.name, cfg.dae.gamma, len(data), cfg.n_ues, cfg.seeds.data,
                nmse, {"dae_loss": hist}, 0, 0, 4 * int(stored.size), 0, clock.wall,
            ))
    return out


# ---------------------------------------------------------------- statistics


@dataclass
class Summary:
    n: int
    mean: float
    variance: float
    ci_low: float
    ci_high: float
    loss_variance: float

    def to_dict(self) -> dict:
        return asdict(self)


def tail_variance(history, fraction: float = 0.2) -> float:
    """Population variance of the final ``fraction`` of a loss history (at least one entry)."""
    h = np.asarray([v for v in history if np.isfinite(v)], dtype=float)
    if len(h) == 0:
        return math.nan
    k = max(1, int(math.ceil(fraction * len(h))))
    return float(np.var(h[-k:]))


def confidence_interval(values, level: float = 0.95) -> tuple[float, float, float, float]:
    """(mean, sample variance, low, high) with a Student-t interval."""
    x = np.asarray(values, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two values for an interval")
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    half = float(sps.t.ppf(0.5 + level / 2, len(x) - 1) * math.sqrt(var / len(x)))
    return mean, var, mean - half, mean + half


def statistics(reports: list[RunReport], scenario: str | None = None, loss_key: str = "d_loss") -> Summary:
    if len(reports) < 2:
        raise ValueError("statistics need at least two reports")
    values = [r.nmse(scenario) for r in reports]
    mean, var, lo, hi = confidence_interval(values)
    losses = [tail_variance(r.histories.get(loss_key, [])) for r in reports]
    finite = [v for v in losses if np.isfinite(v)]
    return Summary(len(reports), mean, var, lo, hi, float(np.mean(finite)) if finite else math.nan)


def seed_average(config: ExperimentConfig, kind: str, n_seeds: int) -> list[RunReport]:
    return [run_experiment(config.with_seeds(config.seeds.shifted(i)), kind) for i in range(n_seeds)]


def clone(config: ExperimentConfig) -> ExperimentConfig:
    return copy.deepcopy(config)
