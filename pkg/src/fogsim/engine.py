"""Global round orchestration and baselines.

Each global round runs a fixed phase order: (1) mobility events, (2) cluster
sampling, (3) offloading and caching, (4) local updates with the straggler
deadline, (5) per-cluster aggregation, (6) vertical propagation for learning
blocks that are due, with a root broadcast back to the round's participants,
(7) evaluation on the held-out test set, (8) one metrics row.

Everything random draws from per-(seed, round, phase) generators, so changing
one phase's behavior never perturbs another phase's stream. One simulation
instance is single-threaded; independent instances can run in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fogsim.aggregation import aggregate_cluster, aggregate_up, weighted_average
from fogsim.config import SimulationConfig
from fogsim.errors import ConfigError, FogsimError
from fogsim.exchange import Cache, cache_broadcast, cache_upload, execute_offload, plan_offload
from fogsim.models import (
    Dataset,
    evaluate,
    generate_partitions,
    init_model,
    local_update,
)
from fogsim.netmodel import (
    KIND_CACHE_DOWN,
    KIND_CACHE_UP,
    KIND_DATA_LOSS,
    KIND_D2D,
    KIND_DOWNLINK,
    KIND_HANDOVER,
    KIND_OFFLOAD,
    KIND_SAMPLED,
    KIND_STALE,
    KIND_STRAGGLER,
    KIND_UPLINK,
    Ledgers,
    apply_straggler_policy,
    compute_delay,
    round_delay_from_events,
)
from fogsim.topology import (
    D2D_CONSENSUS,
    Cluster,
    FogTree,
    MobilityEvent,
    apply_mobility_event,
    build_tree,
)
from fogsim.netmodel import ComputeProfile

_PHASE_IDS = {
    "profiles": 1,
    "mobility": 2,
    "sample": 3,
    "offload": 4,
    "cache": 5,
    "agg": 6,
}

VERTICAL = "intra_and_vertical"
INTRA = "intra_only"


def phase_rng(seed: int, round_no: int, phase: str, extra: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, round, phase) slot."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), int(round_no), _PHASE_IDS[phase], int(extra)])
    )


@dataclass
class MetricsRow:
    round: int
    global_loss: float
    global_accuracy: float
    uplink_params: int
    downlink_params: int
    d2d_params: int
    total_energy_j: float
    round_delay_s: float
    stragglers_dropped: int
    clusters_sampled: int
    samples_moved: int

    COLUMNS = (
        "round", "global_loss", "global_accuracy", "uplink_params",
        "downlink_params", "d2d_params", "total_energy_j", "round_delay_s",
        "stragglers_dropped", "clusters_sampled", "samples_moved",
    )

    def to_csv_line(self) -> str:
        return ",".join(
            format(getattr(self, c), ".17g") if isinstance(getattr(self, c), float)
            else str(getattr(self, c))
            for c in self.COLUMNS
        )


@dataclass
class LearningBlock:
    block_id: int
    head: int
    vertical_period: int = 1
    intra_rounds: int = 1


@dataclass
class SimulationResult:
    rows: list[MetricsRow]
    final_params: np.ndarray
    events: list
    ledger: Ledgers
    tree: FogTree | None
    diagnostics: dict = field(default_factory=dict)


def sample_clusters(leaf_clusters: list[Cluster], fraction: float, seed: int,
                    round_no: int) -> list[Cluster]:
    """Draw max(1, round(fraction * count)) clusters without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("sampling fraction must be in (0, 1]")
    ordered = sorted(leaf_clusters, key=lambda c: c.cluster_id)
    if not ordered:
        return []
    k = max(1, int(round(fraction * len(ordered))))
    if k >= len(ordered):
        return ordered
    rng = phase_rng(seed, round_no, "sample")
    chosen = rng.choice(len(ordered), size=k, replace=False)
    return [ordered[i] for i in sorted(chosen)]


def schedule_round(blocks: list[LearningBlock], round_no: int) -> dict[int, str]:
    """Blocks send vertically on rounds divisible by their period."""
    if round_no < 1:
        raise ConfigError("rounds are numbered from 1")
    return {
        b.block_id: VERTICAL if round_no % b.vertical_period == 0 else INTRA
        for b in blocks
    }


def build_blocks(tree: FogTree, config: SimulationConfig) -> list[LearningBlock]:
    """One block per layer-1 node, in node-id order."""
    heads = sorted(tree.layers[1])
    periods = config.raw["blocks"]["periods"]
    uniform = config.raw["blocks"]["vertical_period"]
    intra = config.raw["blocks"]["intra_rounds"]
    if periods is not None and len(periods) != len(heads):
        raise ConfigError(
            f"blocks.periods has {len(periods)} entries but the tree has {len(heads)} blocks"
        )
    return [
        LearningBlock(
            block_id=i,
            head=head,
            vertical_period=periods[i] if periods is not None else uniform,
            intra_rounds=intra,
        )
        for i, head in enumerate(heads)
    ]


class _Simulation:
    def __init__(self, config: SimulationConfig):
        self.cfg = config
        raw = config.raw
        self.links = config.links()
        self.settings = config.aggregation_settings()
        data = raw["data"]
        parts = generate_partitions(
            device_count=config.device_count,
            samples_per_device=data["samples_per_device"],
            feature_dim=data["feature_dim"],
            class_count=data["classes"],
            dirichlet_alpha=data["dirichlet_alpha"],
            seed=config.seed,
            test_samples=data["test_samples"],
            class_separation=data["class_separation"],
        )
        self.test_data = parts.test_data
        self.tree = build_tree(config.layer_specs(), config.seed, raw["trust_density"])
        for i, node in enumerate(self.tree.device_ids()):
            ds = parts.device_data[i]
            self.tree.datasets[node] = Dataset(ds.features, ds.labels, owner=node)
        self._assign_profiles()
        self.values_per_sample = data["feature_dim"] + 1
        self.global_params = init_model(data["feature_dim"], data["classes"])
        self.params = {n: self.global_params.copy() for n in self.tree.device_ids()}
        self.cluster_cache: dict[int, tuple[np.ndarray, float]] = {}
        self.ledger = Ledgers()
        self.blocks = build_blocks(self.tree, config)
        self.consensus_errors: list[float] = []
        self._phase = "init"

    def _assign_profiles(self):
        comp = self.cfg.raw["compute"]
        devices = self.tree.device_ids()
        slow_count = int(round(comp["slow_fraction"] * len(devices)))
        slow: set[int] = set()
        if slow_count > 0:
            rng = phase_rng(self.cfg.seed, 0, "profiles")
            slow = set(rng.choice(devices, size=slow_count, replace=False).tolist())
        for n in devices:
            rate = comp["samples_per_second"]
            if n in slow:
                rate /= comp["slow_factor"]
            self.tree.profiles[n] = ComputeProfile(
                samples_per_second=rate,
                energy_per_sample_step=comp["energy_per_sample_step"],
            )

    def _residual_energy(self) -> dict[int, float]:
        nodes = set(self.ledger.energy_tx) | set(self.ledger.energy_compute)
        return {
            n: -(self.ledger.energy_tx.get(n, 0.0) + self.ledger.energy_compute.get(n, 0.0))
            for n in nodes
        }

    # Phases

    def _mobility_phase(self, round_no: int):
        mob = self.cfg.raw["mobility"]
        if mob["rate"] <= 0:
            return
        rng = phase_rng(self.cfg.seed, round_no, "mobility")
        for _ in range(rng.poisson(mob["rate"])):
            devices = self.tree.device_ids()
            if len(devices) <= 1:
                break
            node = devices[int(rng.integers(len(devices)))]
            cluster = self.tree.cluster_for(node)
            if rng.random() < mob["migrate_prob"]:
                others = [c.cluster_id for c in self.tree.leaf_clusters()
                          if c.cluster_id != cluster.cluster_id]
                if not others:
                    continue
                dest = others[int(rng.integers(len(others)))]
                event = MobilityEvent(round_no, "migrate", node, destination_cluster=dest)
                apply_mobility_event(self.tree, event, rng)
                cached = self.cluster_cache.get(dest)
                if cached is not None:
                    self.params[node] = cached[0].copy()
            else:
                peers = [m for m in cluster.members if m != node]
                handover = None
                if peers and rng.random() < mob["handover_prob"]:
                    handover = peers[int(rng.integers(len(peers)))]
                event = MobilityEvent(round_no, "depart", node, handover_peer=handover)
                outcome = apply_mobility_event(self.tree, event, rng)
                if outcome.samples_moved:
                    self.ledger.record_data_transfer(
                        round_no, "mobility", KIND_HANDOVER, node, handover,
                        outcome.samples_moved, self.values_per_sample,
                        self.links[KIND_D2D],
                    )
                if outcome.samples_lost:
                    self.ledger.record_marker(
                        round_no, "mobility", KIND_DATA_LOSS, node, node,
                        params=outcome.samples_lost,
                    )
                self.params.pop(node, None)

    def _offload_phase(self, round_no: int, sampled: list[Cluster]):
        deadline = self.cfg.raw["deadline_s"]
        for cluster in sampled:
            plan = plan_offload(
                cluster, self.tree.datasets, self.tree.profiles, deadline,
                max(self.cfg.local_steps, 1),
            )
            if not plan.transfers:
                continue
            new_datasets = execute_offload(self.tree.datasets, plan)
            for t in plan.transfers:
                self.ledger.record_data_transfer(
                    round_no, "offload", KIND_OFFLOAD, t.source, t.destination,
                    len(t.sample_indices), self.values_per_sample,
                    self.links[KIND_D2D],
                )
            self.tree.datasets.update(new_datasets)

    def _caching_phase(self, round_no: int):
        fraction = self.cfg.raw["caching"]["fraction"]
        for cluster in sorted(self.tree.leaf_clusters(), key=lambda c: c.cluster_id):
            uploads = []
            for member in cluster.members:
                rng = phase_rng(self.cfg.seed, round_no, "cache", extra=member)
                delta = cache_upload(member, self.tree.datasets[member], fraction, rng)
                if len(delta) == 0:
                    continue
                self.ledger.record_data_transfer(
                    round_no, "cache_up", KIND_CACHE_UP, member, cluster.parent,
                    len(delta), self.values_per_sample, self.links[KIND_UPLINK],
                )
                uploads.append(delta)
            if not uploads:
                continue
            cache = Cache(holder=cluster.parent, data=Dataset.concatenate(uploads))
            updated = cache_broadcast(cache, cluster, self.tree.datasets)
            for member in cluster.members:
                self.ledger.record_data_transfer(
                    round_no, "cache_down", KIND_CACHE_DOWN, cluster.parent, member,
                    len(cache), self.values_per_sample, self.links[KIND_DOWNLINK],
                )
            self.tree.datasets.update(updated)

    def _broadcast(self, round_no: int, devices: list[int], tag: str):
        """Send the root model down the tree to the given devices."""
        edges: list[tuple[int, int, int]] = []  # (child_layer, parent, child)
        seen: set[int] = set()
        for dev in sorted(devices):
            node = dev
            chain = []
            while node != self.tree.root:
                chain.append((self.tree.parent[node], node))
                node = self.tree.parent[node]
            for parent, child in reversed(chain):
                if child not in seen:
                    seen.add(child)
                    edges.append((self._layer_of(child), parent, child))
        edges.sort(key=lambda e: (-e[0], e[2]))
        n_params = self.global_params.size
        for layer, parent, child in edges:
            self.ledger.record_transfer(
                round_no, f"downlink_L{layer}{tag}", KIND_DOWNLINK, parent, child,
                n_params, self.links[KIND_DOWNLINK],
            )
        for dev in devices:
            self.params[dev] = self.global_params.copy()

    def _layer_of(self, node: int) -> int:
        for i, layer in enumerate(self.tree.layers):
            if node in layer:
                return i
        raise FogsimError(f"unknown node {node}")

    def _stale_contribution(self, cluster: Cluster) -> tuple[np.ndarray, float]:
        cached = self.cluster_cache.get(cluster.cluster_id)
        if cached is not None:
            return cached[0].copy(), cached[1]
        weight = float(sum(len(self.tree.datasets[m]) for m in cluster.members))
        return self.global_params.copy(), max(weight, 1.0)

    def _aggregate_sampled_cluster(
        self, round_no: int, cluster: Cluster, participants: list[int],
        rng: np.random.Generator, tag: str,
    ) -> tuple[np.ndarray, float]:
        entries = {
            n: (self.params[n], float(len(self.tree.datasets[n])))
            for n in participants
        }
        result = None
        if entries:
            result = aggregate_cluster(
                cluster, entries, self.settings, rng=rng, ledger=self.ledger,
                links=self.links, round_no=round_no,
                residual_energy=self._residual_energy(), phase_tag=tag,
            )
        if result is None:
            self.ledger.record_marker(
                round_no, f"agg{tag}", KIND_STALE, cluster.parent,
                min(cluster.members),
            )
            return self._stale_contribution(cluster)
        if result.member_states:
            for n, vec in result.member_states.items():
                self.params[n] = vec.copy()
        if result.consensus_error is not None:
            self.consensus_errors.append(result.consensus_error)
        self.cluster_cache[cluster.cluster_id] = (result.vector.copy(), result.weight)
        return result.vector, result.weight

    def _run_round(self, round_no: int) -> MetricsRow:
        raw = self.cfg.raw
        counters0 = self.ledger.counters()
        events0 = len(self.ledger.events)

        self._phase = "mobility"
        self._mobility_phase(round_no)

        self._phase = "sampling"
        leaf_clusters = self.tree.leaf_clusters()
        sampled = sample_clusters(
            leaf_clusters, raw["sampling_fraction"], self.cfg.seed, round_no
        )
        for c in sampled:
            self.ledger.record_marker(
                round_no, "sample", KIND_SAMPLED, c.parent, min(c.members)
            )
        sampled_ids = {c.cluster_id for c in sampled}

        self._phase = "exchange"
        if raw["offload"]["enabled"]:
            self._offload_phase(round_no, sampled)
        if raw["caching"]["fraction"] > 0 and round_no == 1:
            self._caching_phase(round_no)

        self._phase = "stragglers"
        deadline = raw["deadline_s"]
        steps = self.cfg.local_steps
        participants_of: dict[int, list[int]] = {}
        for cluster in sampled:
            delays = {
                n: compute_delay(self.tree.profiles[n], len(self.tree.datasets[n]), steps)
                for n in cluster.members
            }
            if deadline is not None:
                participants, dropped = apply_straggler_policy(delays, deadline)
            else:
                participants, dropped = sorted(cluster.members), []
            for n in dropped:
                self.ledger.record_marker(
                    round_no, "straggler", KIND_STRAGGLER, n, cluster.parent
                )
            participants_of[cluster.cluster_id] = participants

        actions = schedule_round(self.blocks, round_no)
        intra_rounds = raw["blocks"]["intra_rounds"]
        intra_aggregate = raw["blocks"]["intra_aggregate"]

        for it in range(intra_rounds):
            tag = "" if it == 0 else f"@{it}"
            rng_agg = phase_rng(self.cfg.seed, round_no, "agg", extra=it)
            final_it = it == intra_rounds - 1

            self._phase = "local_update"
            for cluster in sampled:
                for n in participants_of[cluster.cluster_id]:
                    data_n = self.tree.datasets[n]
                    if len(data_n) == 0 or steps == 0:
                        continue  # passive device
                    self.ledger.record_compute(
                        round_no, f"compute{tag}", n, self.tree.profiles[n],
                        len(data_n), steps,
                    )
                    self.params[n] = local_update(self.params[n], data_n, steps, self.cfg.lr)

            if it == 0 and raw["idle_clusters_train"]:
                for cluster in leaf_clusters:
                    if cluster.cluster_id in sampled_ids:
                        continue
                    for n in cluster.members:
                        data_n = self.tree.datasets[n]
                        if len(data_n) == 0 or steps == 0:
                            continue
                        self.ledger.record_compute(
                            round_no, "background_compute", n, self.tree.profiles[n],
                            len(data_n), steps,
                        )
                        self.params[n] = local_update(
                            self.params[n], data_n, steps, self.cfg.lr
                        )

            self._phase = "aggregation"
            head_entries: dict[int, list[tuple[np.ndarray, float]]] = {}
            vertical_devices: list[int] = []
            for block in self.blocks:
                block_clusters = [c for c in sampled if c.parent == block.head]
                if not block_clusters:
                    continue
                due = actions[block.block_id] == VERTICAL and final_it
                if not due and not intra_aggregate:
                    continue
                for cluster in block_clusters:
                    vector, weight = self._aggregate_sampled_cluster(
                        round_no, cluster, participants_of[cluster.cluster_id],
                        rng_agg, tag,
                    )
                    if due:
                        head_entries.setdefault(block.head, []).append((vector, weight))
                        vertical_devices.extend(cluster.members)
                    elif cluster.aggregation_mode != D2D_CONSENSUS:
                        # in-block sync: the head returns its cluster's aggregate
                        for member in cluster.members:
                            self.ledger.record_transfer(
                                round_no, f"downlink_L0{tag}", KIND_DOWNLINK,
                                cluster.parent, member, vector.size,
                                self.links[KIND_DOWNLINK],
                            )
                            self.params[member] = vector.copy()

            if head_entries:
                self._phase = "vertical"
                contributions = {
                    head: (weighted_average([v for v, _ in vws], [w for _, w in vws]),
                           float(sum(w for _, w in vws)))
                    if len(vws) > 1 else vws[0]
                    for head, vws in head_entries.items()
                }
                root_vec, _, errors = aggregate_up(
                    self.tree, contributions, 1, self.settings, rng=rng_agg,
                    ledger=self.ledger, links=self.links, round_no=round_no,
                    residual_energy=self._residual_energy(), phase_tag=tag,
                )
                self.consensus_errors.extend(errors)
                self.global_params = root_vec
                self._broadcast(round_no, vertical_devices, tag)

        self._phase = "evaluation"
        report = evaluate(self.global_params, self.test_data)
        counters1 = self.ledger.counters()
        delay = round_delay_from_events(self.ledger.events[events0:])
        return MetricsRow(
            round=round_no,
            global_loss=report.loss,
            global_accuracy=report.accuracy,
            uplink_params=int(counters1["uplink_params"] - counters0["uplink_params"]),
            downlink_params=int(counters1["downlink_params"] - counters0["downlink_params"]),
            d2d_params=int(counters1["d2d_params"] - counters0["d2d_params"]),
            total_energy_j=counters1["total_energy_j"] - counters0["total_energy_j"],
            round_delay_s=delay,
            stragglers_dropped=int(
                counters1["stragglers_dropped"] - counters0["stragglers_dropped"]
            ),
            clusters_sampled=len(sampled),
            samples_moved=int(counters1["samples_moved"] - counters0["samples_moved"]),
        )

    def _zero_round_row(self) -> MetricsRow:
        report = evaluate(self.global_params, self.test_data)
        return MetricsRow(
            round=0, global_loss=report.loss, global_accuracy=report.accuracy,
            uplink_params=0, downlink_params=0, d2d_params=0, total_energy_j=0.0,
            round_delay_s=0.0, stragglers_dropped=0, clusters_sampled=0,
            samples_moved=0,
        )

    def run(self) -> SimulationResult:
        rounds = self.cfg.global_rounds
        rows: list[MetricsRow] = []
        if rounds == 0:
            rows.append(self._zero_round_row())
        else:
            for r in range(1, rounds + 1):
                try:
                    rows.append(self._run_round(r))
                except FogsimError as exc:
                    raise FogsimError(
                        f"round {r}, phase {self._phase}: {exc}"
                    ) from exc
        errs = self.consensus_errors
        diagnostics = {
            "consensus_error_mean": float(np.mean(errs)) if errs else math.nan,
            "config_hash": self.cfg.config_hash(),
        }
        return SimulationResult(
            rows=rows,
            final_params=self.global_params.copy(),
            events=self.ledger.events,
            ledger=self.ledger,
            tree=self.tree,
            diagnostics=diagnostics,
        )


def run_simulation(config: SimulationConfig) -> SimulationResult:
    """Run the fog simulation described by the config."""
    return _Simulation(config).run()


def run_star_baseline(config: SimulationConfig) -> SimulationResult:
    """Same data, model, and training on a flat single-cluster topology."""
    return _Simulation(config.star_variant()).run()


def run_centralized_baseline(config: SimulationConfig) -> SimulationResult:
    """Pooled full-batch gradient descent with the same per-round step budget.

    Rows carry model-quality metrics only; the network counters stay zero
    because this oracle never transfers anything.
    """
    raw = config.raw
    data = raw["data"]
    parts = generate_partitions(
        device_count=config.device_count,
        samples_per_device=data["samples_per_device"],
        feature_dim=data["feature_dim"],
        class_count=data["classes"],
        dirichlet_alpha=data["dirichlet_alpha"],
        seed=config.seed,
        test_samples=data["test_samples"],
        class_separation=data["class_separation"],
    )
    pooled = Dataset.concatenate(parts.device_data)
    params = init_model(data["feature_dim"], data["classes"])
    rows: list[MetricsRow] = []

    def quality_row(round_no: int) -> MetricsRow:
        report = evaluate(params, parts.test_data)
        return MetricsRow(
            round=round_no, global_loss=report.loss, global_accuracy=report.accuracy,
            uplink_params=0, downlink_params=0, d2d_params=0, total_energy_j=0.0,
            round_delay_s=0.0, stragglers_dropped=0, clusters_sampled=0,
            samples_moved=0,
        )

    if config.global_rounds == 0:
        rows.append(quality_row(0))
    else:
        for r in range(1, config.global_rounds + 1):
            params = local_update(params, pooled, config.local_steps, config.lr)
            rows.append(quality_row(r))
    return SimulationResult(
        rows=rows, final_params=params, events=[], ledger=Ledgers(), tree=None,
        diagnostics={"config_hash": config.config_hash()},
    )


def run_baselines(config: SimulationConfig) -> dict[str, SimulationResult]:
    """Star FedAvg and centralized gradient descent on the same data and seed."""
    return {
        "star": run_star_baseline(config),
        "centralized": run_centralized_baseline(config),
    }
