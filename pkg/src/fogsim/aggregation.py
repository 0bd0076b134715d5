"""Parameter-combining machinery.

Weighted averaging, lazy Metropolis mixing matrices, D2D average consensus
with optional per-message Gaussian noise, uploader selection, top-k plus
uniform quantization compression, and the bottom-up pass over a fog tree.

Consensus clusters converge to the unweighted mean of their members' states;
the single uploaded vector then carries the cluster's total sample weight
upstream. Server-side clusters compute the sample-weighted average directly,
which makes the hierarchical result identical to a flat weighted average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fogsim.errors import AggregationError
from fogsim.netmodel import KIND_D2D, KIND_UPLINK, Ledgers, LinkModel, default_links
from fogsim.topology import D2D_CONSENSUS, Cluster, FogTree, _connected


def weighted_average(vectors, weights) -> np.ndarray:
    """Convex combination sum(w_i v_i) / sum(w_i)."""
    if len(vectors) == 0:
        raise AggregationError("cannot average an empty list of vectors")
    if len(vectors) != len(weights):
        raise AggregationError(
            f"got {len(vectors)} vectors but {len(weights)} weights"
        )
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise AggregationError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise AggregationError("weight sum must be positive")
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2:
        raise AggregationError("vectors must share one length")
    if len(vectors) == 1:
        return mat[0].copy()
    return (w @ mat) / total


def build_mixing_matrix(adjacency: np.ndarray) -> np.ndarray:
    """Lazy Metropolis weights for a connected undirected graph.

    Edge weight 1/(1 + max(deg_i, deg_j)), diagonal fills each row to one,
    then the lazy transform (M + I) / 2. The result is symmetric, doubly
    stochastic, and has all eigenvalues in [0, 1], so one application never
    increases disagreement.
    """
    adj = np.asarray(adjacency, dtype=bool)
    n = adj.shape[0]
    if adj.shape != (n, n) or not np.array_equal(adj, adj.T) or np.any(np.diag(adj)):
        raise AggregationError("adjacency must be square, symmetric, zero-diagonal")
    if n == 1:
        return np.ones((1, 1))
    if not _connected(adj):
        raise AggregationError("mixing matrix requires a connected graph")
    deg = adj.sum(axis=1).astype(np.float64)
    pair_max = np.maximum.outer(deg, deg)
    m = np.where(adj, 1.0 / (1.0 + pair_max), 0.0)
    np.fill_diagonal(m, 1.0 - m.sum(axis=1))
    return (m + np.eye(n)) / 2.0


def consensus_round(states, matrix: np.ndarray) -> np.ndarray:
    """One synchronous mixing step: row i becomes sum_j M_ij state_j."""
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != matrix.shape[0]:
        raise AggregationError(
            f"{x.shape[0]} states do not match mixing matrix order {matrix.shape[0]}"
        )
    return matrix @ x


def consensus_aggregate(
    cluster: Cluster,
    states,
    rounds: int,
    noise_sigma: float = 0.0,
    seed=0,
) -> tuple[np.ndarray, int]:
    """Run mixing rounds over the cluster's D2D graph.

    With noise_sigma > 0, every received neighbor message is perturbed by
    zero-mean Gaussian noise per coordinate before mixing. Each edge carries
    one vector in each direction per round, so the message count is
    rounds * 2 * edge_count.
    """
    if cluster.aggregation_mode != D2D_CONSENSUS:
        raise AggregationError(
            f"cluster {cluster.cluster_id} is not in d2d consensus mode"
        )
    if rounds < 1:
        raise AggregationError("consensus needs at least one round")
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    adj = cluster.d2d_adjacency
    matrix = build_mixing_matrix(adj)
    x, _ = _mix(x, matrix, adj, rounds, noise_sigma, seed)
    return x, rounds * 2 * cluster.edge_count()


def _mix(x, matrix, adj, rounds, noise_sigma, seed):
    """Inner mixing loop; returns (states, rng_used)."""
    rng = None
    if noise_sigma > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        weights_on_edges = matrix * adj
    for _ in range(rounds):
        if rng is None:
            x = matrix @ x
        else:
            noise = rng.normal(0.0, noise_sigma, size=(x.shape[0],) + x.shape)
            x = matrix @ x + np.einsum("ij,ijg->ig", weights_on_edges, noise)
    return x, rng


def select_uploader(cluster: Cluster, residual_energy: dict[int, float]) -> int:
    """Member with the most residual energy; ties go to the lowest id."""
    if cluster.size == 0:
        raise AggregationError("cannot select an uploader from an empty cluster")
    return max(cluster.members, key=lambda n: (residual_energy.get(n, 0.0), -n))


@dataclass
class CompressionConfig:
    topk: int | None = None
    quantize_bits: int | None = None

    def active(self) -> bool:
        return self.topk is not None or self.quantize_bits is not None


def compress(vector: np.ndarray, cfg: CompressionConfig | None) -> tuple[np.ndarray, int]:
    """Top-k sparsification then uniform quantization of the kept entries.

    Returns the reconstructed vector (same length) and the number of
    parameters actually transmitted (k, or the full length without top-k).
    Magnitude ties keep the lowest index; quantization snaps each kept entry
    to the nearest of 2^bits levels spanning [min, max] of the kept entries.
    """
    v = np.asarray(vector, dtype=np.float64)
    n = v.size
    if cfg is None or not cfg.active():
        return v.copy(), n

    if cfg.topk is not None:
        k = int(cfg.topk)
        if k < 1 or k > n:
            raise AggregationError(f"topk must be in [1, {n}], got {k}")
        order = np.argsort(-np.abs(v), kind="stable")
        kept = np.sort(order[:k])
        out = np.zeros_like(v)
        out[kept] = v[kept]
        transmitted = k
    else:
        kept = np.arange(n)
        out = v.copy()
        transmitted = n

    if cfg.quantize_bits is not None:
        bits = int(cfg.quantize_bits)
        if bits < 1:
            raise AggregationError("quantize_bits must be >= 1")
        vals = out[kept]
        lo, hi = vals.min(), vals.max()
        if hi > lo:
            spacing = (hi - lo) / (2 ** bits - 1)
            out[kept] = lo + np.round((vals - lo) / spacing) * spacing
    return out, transmitted


@dataclass
class AggregationSettings:
    consensus_rounds: int = 10
    noise_sigma: float = 0.0
    vertical_noise: bool = False
    compression: CompressionConfig | None = None


@dataclass
class ClusterResult:
    vector: np.ndarray
    weight: float
    uploader: int | None = None
    consensus_error: float | None = None
    member_states: dict[int, np.ndarray] | None = None


def _components(adj: np.ndarray) -> list[list[int]]:
    n = adj.shape[0]
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        comp = [s]
        seen[s] = True
        stack = [s]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(adj[i]):
                if not seen[j]:
                    seen[j] = True
                    comp.append(int(j))
                    stack.append(int(j))
        comps.append(sorted(comp))
    return comps


def aggregate_cluster(
    cluster: Cluster,
    entries: dict[int, tuple[np.ndarray, float]],
    settings: AggregationSettings,
    *,
    rng: np.random.Generator | None = None,
    ledger: Ledgers | None = None,
    links: dict[str, LinkModel] | None = None,
    round_no: int = 0,
    residual_energy: dict[int, float] | None = None,
    phase_tag: str = "",
) -> ClusterResult | None:
    """Aggregate one cluster's present members and ship the result upstream.

    entries maps a member to its (vector, sample weight); absent members sat
    out this round. Server-side mode uplinks every weighted member's vector to
    the parent; consensus mode mixes over the D2D graph induced by the present
    members (per connected component if stragglers fractured it) and uplinks
    one vector per component. Returns None when nothing can contribute.
    """
    present = [m for m in cluster.members if m in entries]
    if not present:
        return None
    if links is None:
        links = default_links()
    residual = residual_energy or {}
    phase_up = f"uplink_L{cluster.layer}{phase_tag}"

    def ship(src: int, vec: np.ndarray) -> np.ndarray:
        sent, count = compress(vec, settings.compression)
        if settings.vertical_noise and settings.noise_sigma > 0:
            if rng is None:
                raise AggregationError("vertical noise requires an rng")
            sent = sent + rng.normal(0.0, settings.noise_sigma, size=sent.shape)
        if ledger is not None:
            ledger.record_transfer(
                round_no, phase_up, KIND_UPLINK, src, cluster.parent, count,
                links[KIND_UPLINK],
            )
        return sent

    if cluster.aggregation_mode != D2D_CONSENSUS:
        shippable = [m for m in present if entries[m][1] > 0]
        if not shippable:
            return None
        received = [ship(m, entries[m][0]) for m in shippable]
        weights = [entries[m][1] for m in shippable]
        return ClusterResult(
            vector=weighted_average(received, weights), weight=float(sum(weights))
        )

    if settings.consensus_rounds < 1:
        raise AggregationError("consensus needs at least one round")
    if settings.noise_sigma > 0 and rng is None:
        raise AggregationError("consensus noise requires an rng")
    if sum(entries[m][1] for m in present) <= 0:
        return None
    idx = [cluster.member_index(m) for m in present]
    sub_adj = cluster.d2d_adjacency[np.ix_(idx, idx)]
    states = np.asarray([entries[m][0] for m in present], dtype=np.float64)
    uploads: list[np.ndarray] = []
    upload_weights: list[float] = []
    errors: list[float] = []
    member_states: dict[int, np.ndarray] = {}
    uploader_of_cluster = None
    for comp in _components(sub_adj):
        nodes = [present[i] for i in comp]
        weight = float(sum(entries[n][1] for n in nodes))
        if weight <= 0:
            continue
        comp_adj = sub_adj[np.ix_(comp, comp)]
        matrix = build_mixing_matrix(comp_adj)
        x = states[comp]
        target = x.mean(axis=0)
        x, _ = _mix(x, matrix, comp_adj, settings.consensus_rounds,
                    settings.noise_sigma, rng)
        if ledger is not None:
            edge_i, edge_j = np.nonzero(np.triu(comp_adj, 1))
            n_params = states.shape[1]
            for r in range(settings.consensus_rounds):
                phase = f"d2d_L{cluster.layer}_r{r}{phase_tag}"
                for a, b in zip(edge_i, edge_j):
                    src, dst = nodes[a], nodes[b]
                    ledger.record_transfer(round_no, phase, KIND_D2D, src, dst,
                                           n_params, links[KIND_D2D])
                    ledger.record_transfer(round_no, phase, KIND_D2D, dst, src,
                                           n_params, links[KIND_D2D])
        for i, node in enumerate(nodes):
            member_states[node] = x[i]
        uploader = max(nodes, key=lambda n: (residual.get(n, 0.0), -n))
        final = x[nodes.index(uploader)]
        scale = float(np.linalg.norm(target))
        errors.append(float(np.linalg.norm(final - target)) / (scale + 1e-12))
        uploads.append(ship(uploader, final))
        upload_weights.append(weight)
        if uploader_of_cluster is None:
            uploader_of_cluster = uploader
    vector = weighted_average(uploads, upload_weights)
    return ClusterResult(
        vector=vector,
        weight=float(sum(upload_weights)),
        uploader=uploader_of_cluster,
        consensus_error=float(np.mean(errors)),
        member_states=member_states,
    )


def aggregate_up(
    tree: FogTree,
    contributions: dict[int, tuple[np.ndarray, float]],
    start_layer: int,
    settings: AggregationSettings,
    *,
    rng: np.random.Generator | None = None,
    ledger: Ledgers | None = None,
    links: dict[str, LinkModel] | None = None,
    round_no: int = 0,
    residual_energy: dict[int, float] | None = None,
    phase_tag: str = "",
) -> tuple[np.ndarray, float, list[float]]:
    """Propagate contributions from start_layer up to the root.

    contributions maps nodes at start_layer to (vector, weight). Nodes above
    accumulate one entry per contributing child cluster and combine them by
    weight before participating in their own cluster. Returns the root vector,
    the total weight it represents, and any consensus errors seen on the way.
    """
    if not contributions:
        raise AggregationError("nothing to aggregate")
    pending: dict[int, list[tuple[np.ndarray, float]]] = {
        n: [vw] for n, vw in contributions.items()
    }
    errors: list[float] = []
    top = tree.layer_count - 1

    def combine(items: list[tuple[np.ndarray, float]]):
        kept = [(v, w) for v, w in items if w > 0]
        if not kept:
            return None
        if len(kept) == 1:
            return kept[0]
        vec = weighted_average([v for v, _ in kept], [w for _, w in kept])
        return vec, float(sum(w for _, w in kept))

    for layer in range(start_layer, top):
        incoming: dict[int, list[tuple[np.ndarray, float]]] = {}
        for cluster in sorted(tree.clusters_at(layer), key=lambda c: c.cluster_id):
            entries = {}
            for m in cluster.members:
                if m in pending:
                    combined = combine(pending[m])
                    if combined is not None:
                        entries[m] = combined
            if not entries:
                continue
            result = aggregate_cluster(
                cluster, entries, settings, rng=rng, ledger=ledger, links=links,
                round_no=round_no, residual_energy=residual_energy,
                phase_tag=phase_tag,
            )
            if result is None:
                continue
            if result.consensus_error is not None:
                errors.append(result.consensus_error)
            incoming.setdefault(cluster.parent, []).append((result.vector, result.weight))
        pending = incoming
        if not pending:
            raise AggregationError(f"aggregation stalled at layer {layer}")

    final = combine(pending.get(tree.root, []))
    if final is None:
        raise AggregationError("no weighted contribution reached the root")
    vector, weight = final
    if not np.all(np.isfinite(vector)):
        raise AggregationError("aggregated vector has non-finite entries")
    return vector, weight, errors


def hierarchical_aggregate(
    tree: FogTree,
    leaf_params: dict[int, np.ndarray],
    leaf_weights: dict[int, float],
    settings: AggregationSettings | None = None,
    *,
    seed: int = 0,
    links: dict[str, LinkModel] | None = None,
    round_no: int = 0,
) -> tuple[np.ndarray, Ledgers]:
    """Full bottom-up pass from every leaf to the root.

    Returns the root vector and a fresh ledger holding exactly the transfers
    of this pass. Every vector crossing a layer boundary has the same length
    as the leaf parameter vectors.
    """
    settings = settings or AggregationSettings()
    devices = set(tree.device_ids())
    if set(leaf_params) != devices or set(leaf_weights) != devices:
        raise AggregationError("every leaf needs both params and a weight")
    ledger = Ledgers()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA66]))
    contributions = {
        n: (np.asarray(leaf_params[n], dtype=np.float64), float(leaf_weights[n]))
        for n in sorted(devices)
    }
    vector, _, _ = aggregate_up(
        tree, contributions, 0, settings, rng=rng, ledger=ledger, links=links,
        round_no=round_no,
    )
    return vector, ledger
