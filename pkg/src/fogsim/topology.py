"""Rooted multi-layer tree of nodes: layers, clusters, D2D graphs, mobility.

Layer 0 holds the end devices, the top layer holds the single root. Every
node below the top belongs to exactly one cluster; a cluster's members share
one parent node in the layer above. Device datasets and compute profiles are
attached at layer 0. Membership is frozen during a round; mobility events
apply only at round boundaries.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from fogsim.errors import ConfigError, TopologyError
from fogsim.models import Dataset
from fogsim.netmodel import ComputeProfile

SERVER_SIDE = "server_side"
D2D_CONSENSUS = "d2d_consensus"
D2D_MODELS = ("none", "complete", "random", "ring")


@dataclass
class LayerSpec:
    node_count: int
    cluster_size: int = 0  # 0 means one cluster spanning the layer
    d2d_model: str = "none"
    d2d_p: float = 0.5
    d2d_enabled: bool = False


@dataclass
class Cluster:
    cluster_id: int
    layer: int
    members: list[int]
    parent: int
    d2d_adjacency: np.ndarray
    aggregation_mode: str = SERVER_SIDE
    trust_adjacency: np.ndarray | None = None

    def member_index(self, node: int) -> int:
        return self.members.index(node)

    @property
    def size(self) -> int:
        return len(self.members)

    def edge_count(self) -> int:
        return int(np.count_nonzero(np.triu(self.d2d_adjacency, 1)))


@dataclass
class MobilityEvent:
    round: int
    kind: str  # "migrate" | "depart"
    node: int
    destination_cluster: int | None = None
    handover_peer: int | None = None


@dataclass
class MobilityOutcome:
    samples_moved: int = 0
    samples_lost: int = 0


@dataclass
class FogTree:
    specs: list[LayerSpec]
    layers: list[list[int]]
    parent: dict[int, int]
    clusters: dict[int, Cluster]
    cluster_of: dict[int, int]
    datasets: dict[int, Dataset] = field(default_factory=dict)
    profiles: dict[int, ComputeProfile] = field(default_factory=dict)
    seed: int = 0
    trust_density: float = 1.0

    @property
    def root(self) -> int:
        return self.layers[-1][0]

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def device_ids(self) -> list[int]:
        return list(self.layers[0])

    def node_layer(self, node: int) -> int:
        for i, layer in enumerate(self.layers):
            if node in layer:
                return i
        raise TopologyError(f"unknown node {node}")

    def cluster(self, cluster_id: int) -> Cluster:
        try:
            return self.clusters[cluster_id]
        except KeyError:
            raise TopologyError(f"unknown cluster {cluster_id}") from None

    def cluster_for(self, node: int) -> Cluster:
        return self.clusters[self.cluster_of[node]]

    def leaf_clusters(self) -> list[Cluster]:
        return [c for c in self.clusters.values() if c.layer == 0]

    def clusters_at(self, layer: int) -> list[Cluster]:
        return [c for c in self.clusters.values() if c.layer == layer]

    def total_samples(self) -> int:
        return sum(len(d) for d in self.datasets.values())


def _connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]
    if n <= 1:
        return True
    seen = np.zeros(n, dtype=bool)
    queue = deque([0])
    seen[0] = True
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i]):
            if not seen[j]:
                seen[j] = True
                queue.append(j)
    return bool(seen.all())


def _draw_graph(model: str, size: int, p: float, rng: np.random.Generator) -> np.ndarray:
    adj = np.zeros((size, size), dtype=bool)
    if size <= 1 or model == "none":
        return adj
    if model == "complete":
        adj[:] = True
        np.fill_diagonal(adj, False)
    elif model == "ring":
        for i in range(size):
            j = (i + 1) % size
            if i != j:
                adj[i, j] = adj[j, i] = True
    elif model == "random":
        upper = rng.random((size, size)) < p
        adj = np.triu(upper, 1)
        adj = adj | adj.T
    else:
        raise ConfigError(f"unknown d2d model {model!r}")
    return adj


def _draw_cluster_graph(spec: LayerSpec, size: int, rng: np.random.Generator,
                        needs_connected: bool) -> np.ndarray:
    if needs_connected and size > 1 and spec.d2d_model in ("none",):
        raise TopologyError(
            f"d2d model {spec.d2d_model!r} cannot form a connected graph for "
            f"a consensus cluster of {size} members"
        )
    adj = _draw_graph(spec.d2d_model, size, spec.d2d_p, rng)
    if needs_connected and not _connected(adj):
        for _ in range(100):
            adj = _draw_graph(spec.d2d_model, size, spec.d2d_p, rng)
            if _connected(adj):
                break
        else:
            raise TopologyError(
                f"could not draw a connected {spec.d2d_model!r} graph for a "
                f"consensus cluster of {size} members after 100 attempts"
            )
    return adj


def _draw_trust(size: int, density: float, rng: np.random.Generator) -> np.ndarray:
    upper = rng.random((size, size)) < density
    adj = np.triu(upper, 1)
    return adj | adj.T


def _cluster_rng(seed: int, layer: int, index: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, layer, index, tag]))


_TAG_D2D = 1
_TAG_TRUST = 2


def build_tree(layer_specs: list[LayerSpec], seed: int, trust_density: float = 1.0) -> FogTree:
    """Build the tree deterministically from per-layer specs.

    Nodes get globally unique ids layer by layer; clusters are contiguous id
    blocks of cluster_size (a remainder forms a final smaller cluster) and
    their parents are assigned in order within the layer above.
    """
    if len(layer_specs) < 2:
        raise ConfigError("need at least two layers (devices and root)")
    if layer_specs[-1].node_count != 1:
        raise ConfigError("top layer must contain exactly one node (the root)")
    for i, spec in enumerate(layer_specs):
        if spec.node_count < 1:
            raise ConfigError(f"layer {i} node_count must be >= 1")
        if spec.d2d_model not in D2D_MODELS:
            raise ConfigError(f"layer {i} has unknown d2d model {spec.d2d_model!r}")

    layers: list[list[int]] = []
    next_id = 0
    for spec in layer_specs:
        layers.append(list(range(next_id, next_id + spec.node_count)))
        next_id += spec.node_count

    parent: dict[int, int] = {}
    clusters: dict[int, Cluster] = {}
    cluster_of: dict[int, int] = {}
    next_cluster = 0
    for layer_idx in range(len(layer_specs) - 1):
        spec = layer_specs[layer_idx]
        nodes = layers[layer_idx]
        size = spec.cluster_size if spec.cluster_size > 0 else len(nodes)
        blocks = [nodes[i:i + size] for i in range(0, len(nodes), size)]
        parents_above = layers[layer_idx + 1]
        mode = D2D_CONSENSUS if spec.d2d_enabled else SERVER_SIDE
        for block_idx, members in enumerate(blocks):
            rng = _cluster_rng(seed, layer_idx, block_idx, _TAG_D2D)
            adj = _draw_cluster_graph(spec, len(members), rng, mode == D2D_CONSENSUS)
            trust = None
            if layer_idx == 0:
                trust_rng = _cluster_rng(seed, layer_idx, block_idx, _TAG_TRUST)
                trust = _draw_trust(len(members), trust_density, trust_rng)
            cid = next_cluster
            next_cluster += 1
            cluster = Cluster(
                cluster_id=cid,
                layer=layer_idx,
                members=list(members),
                parent=parents_above[block_idx % len(parents_above)],
                d2d_adjacency=adj,
                aggregation_mode=mode,
                trust_adjacency=trust,
            )
            clusters[cid] = cluster
            for node in members:
                parent[node] = cluster.parent
                cluster_of[node] = cid

    return FogTree(
        specs=list(layer_specs),
        layers=layers,
        parent=parent,
        clusters=clusters,
        cluster_of=cluster_of,
        seed=seed,
        trust_density=trust_density,
    )


def validate_topology(tree: FogTree) -> list[str]:
    """Check every structural invariant; returns all violations found."""
    violations: list[str] = []
    if len(tree.layers[-1]) != 1:
        violations.append(f"multiple roots: top layer has {len(tree.layers[-1])} nodes")

    node_layer = {n: i for i, layer in enumerate(tree.layers) for n in layer}
    top = len(tree.layers) - 1
    for node, layer_idx in node_layer.items():
        if layer_idx == top:
            continue
        if node not in tree.parent:
            violations.append(f"node {node} has no parent")
        elif node_layer.get(tree.parent[node]) != layer_idx + 1:
            violations.append(f"node {node} has parent outside the layer above")

    for layer_idx in range(top):
        covered: list[int] = []
        for cluster in tree.clusters_at(layer_idx):
            covered.extend(cluster.members)
        if sorted(covered) != sorted(tree.layers[layer_idx]):
            violations.append(f"clusters do not partition layer {layer_idx}")

    for cluster in tree.clusters.values():
        cid = cluster.cluster_id
        if node_layer.get(cluster.parent) != cluster.layer + 1:
            violations.append(f"cluster {cid} parent is not in the layer above")
        adj = cluster.d2d_adjacency
        if adj.shape != (cluster.size, cluster.size):
            violations.append(f"cluster {cid} adjacency shape mismatch")
            continue
        if not np.array_equal(adj, adj.T):
            violations.append(f"cluster {cid} d2d adjacency not symmetric")
        if np.any(np.diag(adj)):
            violations.append(f"cluster {cid} d2d adjacency has self-loops")
        if cluster.aggregation_mode == D2D_CONSENSUS and not _connected(adj):
            violations.append(f"cluster {cid} is in consensus mode but its d2d graph is disconnected")
        if cluster.trust_adjacency is not None:
            trust = cluster.trust_adjacency
            if not np.array_equal(trust, trust.T) or np.any(np.diag(trust)):
                violations.append(f"cluster {cid} trust graph not a simple symmetric graph")

    expected_depth = top
    for leaf in tree.layers[0]:
        depth = 0
        node = leaf
        while node in tree.parent and depth <= top:
            node = tree.parent[node]
            depth += 1
        if depth != expected_depth or node != tree.root:
            violations.append(f"leaf {leaf} path to root has length {depth}, expected {expected_depth}")

    return violations


def _redraw_cluster(tree: FogTree, cluster: Cluster, rng: np.random.Generator):
    spec = tree.specs[cluster.layer]
    cluster.d2d_adjacency = _draw_cluster_graph(
        spec, cluster.size, rng, cluster.aggregation_mode == D2D_CONSENSUS
    )
    if cluster.layer == 0:
        cluster.trust_adjacency = _draw_trust(cluster.size, tree.trust_density, rng)


def apply_mobility_event(
    tree: FogTree, event: MobilityEvent, rng: np.random.Generator | None = None
) -> MobilityOutcome:
    """Apply one migrate or depart event in place.

    Migration keeps the node's dataset and compute profile with it and stays
    within one layer. Departure removes the node; its dataset transfers to
    handover_peer when given and is lost otherwise. Affected clusters get
    their D2D (and leaf trust) graphs redrawn.
    """
    if rng is None:
        rng = np.random.default_rng(
            np.random.SeedSequence([tree.seed, int(event.round), int(event.node), 3])
        )
    if event.node not in tree.cluster_of:
        raise TopologyError(f"unknown or immobile node {event.node}")
    outcome = MobilityOutcome()
    source = tree.cluster_for(event.node)

    if event.kind == "migrate":
        if event.destination_cluster is None:
            raise TopologyError("migrate event needs a destination cluster")
        dest = tree.cluster(event.destination_cluster)
        if dest.layer != source.layer:
            raise TopologyError(
                f"cannot migrate node {event.node} across layers "
                f"({source.layer} -> {dest.layer})"
            )
        if dest.cluster_id == source.cluster_id:
            return outcome
        source.members.remove(event.node)
        dest.members.append(event.node)
        dest.members.sort()
        tree.cluster_of[event.node] = dest.cluster_id
        tree.parent[event.node] = dest.parent
        _drop_if_empty(tree, source)
        if source.cluster_id in tree.clusters:
            _redraw_cluster(tree, source, rng)
        _redraw_cluster(tree, dest, rng)
    elif event.kind == "depart":
        if tree.node_layer(event.node) != 0:
            raise TopologyError("only leaf devices may depart")
        departing = tree.datasets.get(event.node)
        if event.handover_peer is not None:
            peer = event.handover_peer
            if peer == event.node or peer not in tree.datasets:
                raise TopologyError(f"invalid handover peer {peer}")
            if departing is not None and len(departing) > 0:
                tree.datasets[peer] = tree.datasets[peer].extend(departing)
                outcome.samples_moved = len(departing)
        elif departing is not None:
            outcome.samples_lost = len(departing)
        source.members.remove(event.node)
        tree.layers[0].remove(event.node)
        tree.parent.pop(event.node, None)
        tree.cluster_of.pop(event.node, None)
        tree.datasets.pop(event.node, None)
        tree.profiles.pop(event.node, None)
        _drop_if_empty(tree, source)
        if source.cluster_id in tree.clusters:
            _redraw_cluster(tree, source, rng)
    else:
        raise TopologyError(f"unknown mobility event kind {event.kind!r}")
    return outcome


def _drop_if_empty(tree: FogTree, cluster: Cluster):
    if cluster.size == 0:
        tree.clusters.pop(cluster.cluster_id, None)
