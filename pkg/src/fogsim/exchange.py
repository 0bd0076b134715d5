"""Dataset movement: D2D offloading inside trusted leaf clusters, and
inter-layer caching with downstream broadcast.

Offloading moves samples (total count conserved); caching copies them (every
broadcast recipient gains a full copy of the cache). Offload plans are pure
values that can be validated and replayed against the datasets they were
planned for.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fogsim.errors import DataError, TopologyError
from fogsim.models import Dataset
from fogsim.netmodel import ComputeProfile
from fogsim.topology import Cluster


@dataclass
class OffloadTransfer:
    source: int
    destination: int
    sample_indices: list[int]


@dataclass
class OffloadPlan:
    transfers: list[OffloadTransfer] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.transfers)

    def total_samples(self) -> int:
        return sum(len(t.sample_indices) for t in self.transfers)


@dataclass
class Cache:
    """Copies of non-private samples held by a layer-1 node for its cluster."""

    holder: int
    data: Dataset

    def __len__(self) -> int:
        return len(self.data)


def _capacity(profile: ComputeProfile, deadline: float, local_steps: int) -> int:
    """Samples a device can train within the deadline, as a whole count."""
    return int(profile.samples_per_second * deadline / max(local_steps, 1))


def plan_offload(
    cluster: Cluster,
    datasets: dict[int, Dataset],
    profiles: dict[int, ComputeProfile],
    deadline: float,
    local_steps: int,
) -> OffloadPlan:
    """Greedy rebalancing of overloaded devices onto trusted neighbors.

    A device is overloaded when its sample count exceeds what it can process
    within the deadline. Excess samples (highest indices first) go to the
    trusted neighbor with the most slack; ties break toward the lowest id.
    Stops when no overloaded device has a trusted neighbor with slack left.
    """
    if cluster.layer != 0:
        raise TopologyError("offloading only applies to leaf clusters")
    if cluster.trust_adjacency is None:
        return OffloadPlan()
    members = cluster.members
    load = {n: len(datasets[n]) for n in members}
    cap = {n: _capacity(profiles[n], deadline, local_steps) for n in members}
    shipped: dict[int, int] = {n: 0 for n in members}
    chunks: dict[tuple[int, int], int] = {}

    def trusted(n: int) -> list[int]:
        i = cluster.member_index(n)
        return [members[j] for j in np.flatnonzero(cluster.trust_adjacency[i])]

    while True:
        candidates = [
            n for n in sorted(members)
            if load[n] > cap[n] and any(cap[t] - load[t] > 0 for t in trusted(n))
        ]
        if not candidates:
            break
        src = candidates[0]
        dst = max(trusted(src), key=lambda t: (cap[t] - load[t], -t))
        amount = min(load[src] - cap[src], cap[dst] - load[dst])
        chunks[(src, dst)] = chunks.get((src, dst), 0) + amount
        load[src] -= amount
        load[dst] += amount

    transfers = []
    for (src, dst), amount in chunks.items():
        top = len(datasets[src]) - shipped[src]
        indices = list(range(top - amount, top))
        shipped[src] += amount
        transfers.append(OffloadTransfer(src, dst, indices))
    return OffloadPlan(transfers)


def validate_plan(cluster: Cluster, plan: OffloadPlan, datasets: dict[int, Dataset]) -> list[str]:
    """Re-check a plan against the trust graph and current datasets."""
    violations = []
    seen: dict[int, set[int]] = {}
    for t in plan.transfers:
        if t.source == t.destination:
            violations.append(f"transfer {t.source}->{t.destination} is a self-move")
            continue
        if t.source not in cluster.members or t.destination not in cluster.members:
            violations.append(f"transfer {t.source}->{t.destination} leaves the cluster")
            continue
        i = cluster.member_index(t.source)
        j = cluster.member_index(t.destination)
        if cluster.trust_adjacency is None or not cluster.trust_adjacency[i, j]:
            violations.append(f"no trust edge for transfer {t.source}->{t.destination}")
        idx = set(t.sample_indices)
        if any(k < 0 or k >= len(datasets[t.source]) for k in idx):
            violations.append(f"transfer {t.source}->{t.destination} has out-of-range indices")
        if idx & seen.setdefault(t.source, set()):
            violations.append(f"source {t.source} ships overlapping indices")
        seen[t.source] |= idx
    return violations


def execute_offload(datasets: dict[int, Dataset], plan: OffloadPlan) -> dict[int, Dataset]:
    """Move the planned samples; returns a new dataset map.

    Indices refer to the datasets as they were when the plan was made. Each
    destination appends the received samples after its existing ones, in plan
    order. Total sample count is conserved.
    """
    outgoing: dict[int, list[int]] = {}
    for t in plan.transfers:
        for k in t.sample_indices:
            if k < 0 or k >= len(datasets[t.source]):
                raise DataError(
                    f"stale index {k} for source {t.source} "
                    f"(dataset has {len(datasets[t.source])} samples)"
                )
        bucket = outgoing.setdefault(t.source, [])
        if set(t.sample_indices) & set(bucket):
            raise DataError(f"source {t.source} ships overlapping indices")
        bucket.extend(t.sample_indices)

    extracted = {
        (t.source, t.destination, i): datasets[t.source].subset(t.sample_indices)
        for i, t in enumerate(plan.transfers)
    }
    result = dict(datasets)
    for src, indices in outgoing.items():
        result[src] = datasets[src].without(indices)
    for i, t in enumerate(plan.transfers):
        part = extracted[(t.source, t.destination, i)]
        result[t.destination] = result[t.destination].extend(part)
    return result


def cache_upload(device: int, dataset: Dataset, fraction: float, seed) -> Dataset:
    """Copy a seeded uniform sample of floor(fraction * count) samples upward.

    The device keeps everything; the returned dataset is the cache delta.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DataError("cache fraction must be in [0, 1]")
    count = int(np.floor(fraction * len(dataset)))
    if count == 0:
        return Dataset.empty(dataset.feature_dim, owner=device)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(dataset), size=count, replace=False))
    delta = dataset.subset(chosen)
    return Dataset(delta.features, delta.labels, owner=device)


def cache_broadcast(
    cache: Cache, cluster: Cluster, datasets: dict[int, Dataset]
) -> dict[int, Dataset]:
    """Append a copy of the cached samples to every cluster member's dataset."""
    if cache.holder != cluster.parent:
        raise TopologyError(
            f"cache holder {cache.holder} is not cluster {cluster.cluster_id}'s parent"
        )
    if len(cache) == 0:
        return dict(datasets)
    result = dict(datasets)
    for member in cluster.members:
        result[member] = result[member].extend(cache.data)
    return result
