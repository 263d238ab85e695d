"""Graph container, edge-group statistics, ego-network partitioning and SBM generation."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd

from errors import (
    BinaryViolation,
    EmptyClient,
    EmptyEdgeSet,
    FormatError,
    GraphValidationError,
    InsufficientNodes,
)
from schemas import ClientSummary, PartitionSummary, SbmConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Graph:
    """Simple undirected graph with a binary sensitive attribute and binary label per node.

    `edges` is an (E, 2) int array with u < v per row, sorted and free of duplicates.
    Self-loops are never stored; the GCN normalization adds them itself.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    sensitive: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = self.num_nodes
        edges = self.edges
        if edges.ndim != 2 or edges.shape[1] != 2:
            raise GraphValidationError(f"edges must have shape (E, 2), got {edges.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GraphValidationError(f"features must have shape ({n}, d), got {self.features.shape}")
        if self.sensitive.shape != (n,) or self.labels.shape != (n,):
            raise GraphValidationError("sensitive and labels must be length-N vectors")
        if len(edges):
            if edges.min() < 0 or edges.max() >= n:
                raise GraphValidationError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise GraphValidationError("self-loops are not stored")
            if np.any(edges[:, 0] > edges[:, 1]):
                raise GraphValidationError("edges must be stored with u < v")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise GraphValidationError("duplicate edges")
        if not np.all(np.isfinite(self.features)):
            raise GraphValidationError("features must be finite")
        if not (np.isin(self.sensitive, (0, 1)).all() and np.isin(self.labels, (0, 1)).all()):
            raise GraphValidationError("sensitive attribute and labels must be binary")

    @classmethod
    def from_edge_list(
        cls,
        num_nodes: int,
        edges: Union[Sequence[Tuple[int, int]], np.ndarray],
        features: np.ndarray,
        sensitive: Sequence[int],
        labels: Sequence[int],
    ) -> "Graph":
        """Build a graph from arbitrary undirected pairs; reversed and repeated pairs collapse."""
        pairs = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(pairs):
            pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        return cls(
            num_nodes=int(num_nodes),
            edges=pairs,
            features=np.asarray(features, dtype=np.float64),
            sensitive=np.asarray(sensitive, dtype=np.int64),
            labels=np.asarray(labels, dtype=np.int64),
        )

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def group_sizes(self) -> Tuple[int, int]:
        n1 = int(self.sensitive.sum())
        return self.num_nodes - n1, n1

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    def to_networkx(self) -> nx.Graph:
        G = nx.Graph()
        G.add_nodes_from(range(self.num_nodes))
        G.add_edges_from(map(tuple, self.edges.tolist()))
        return G

    def induced_subgraph(self, node_ids: Sequence[int]) -> "Graph":
        """Subgraph on `node_ids` (sorted ascending), relabelled to 0..len-1 in that order."""
        node_ids = np.asarray(node_ids, dtype=np.int64)
        local = np.full(self.num_nodes, -1, dtype=np.int64)
        local[node_ids] = np.arange(len(node_ids))
        mapped = local[self.edges]
        kept = mapped[(mapped >= 0).all(axis=1)]
        return Graph.from_edge_list(
            len(node_ids),
            kept,
            self.features[node_ids],
            self.sensitive[node_ids],
            self.labels[node_ids],
        )

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel node `i` as `perm[i]`."""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return Graph.from_edge_list(
            self.num_nodes,
            perm[self.edges],
            self.features[inverse],
            self.sensitive[inverse],
            self.labels[inverse],
        )


@dataclass(frozen=True)
class EdgeGroupStats:
    n_inter: int
    n_intra: int
    h_inter: float
    h_intra: float
    gbs: float


def edge_group_stats(g: Graph) -> EdgeGroupStats:
    """Inter/intra-group edge counts and the group balance score B = 1 - |H_intra - H_inter|."""
    if g.num_edges == 0:
        raise EmptyEdgeSet("group balance score is undefined for a graph without edges")
    s = g.sensitive
    inter = s[g.edges[:, 0]] != s[g.edges[:, 1]]
    n_inter = int(inter.sum())
    n_intra = g.num_edges - n_inter
    h_inter = n_inter / g.num_edges
    h_intra = n_intra / g.num_edges
    return EdgeGroupStats(
        n_inter=n_inter,
        n_intra=n_intra,
        h_inter=h_inter,
        h_intra=h_intra,
        gbs=1.0 - abs(h_intra - h_inter),
    )


def remove_isolated_nodes(g: Graph) -> Tuple[Graph, np.ndarray]:
    """Drop degree-0 nodes; returns the cleaned graph and the kept original ids."""
    kept = np.flatnonzero(g.degrees() > 0)
    if len(kept) == g.num_nodes:
        return g, kept
    logger.warning("Removing %d isolated nodes", g.num_nodes - len(kept))
    return g.induced_subgraph(kept), kept


def split_masks(
    num_nodes: int, fractions: Tuple[float, float, float], seed: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random disjoint train/val/test boolean masks covering every node."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_nodes)
    n_train = int(round(fractions[0] * num_nodes))
    n_val = int(round(fractions[1] * num_nodes))
    n_val = min(n_val, num_nodes - n_train)
    masks = []
    for chunk in (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]):
        mask = np.zeros(num_nodes, dtype=bool)
        mask[chunk] = True
        masks.append(mask)
    return masks[0], masks[1], masks[2]


# Client partitioning
@dataclass(frozen=True, eq=False)
class ClientPartition:
    client_id: int
    center: int
    graph: Graph
    node_ids: np.ndarray  # local id -> global id


def _ego_nodes(G: nx.Graph, center: int, hops: int) -> np.ndarray:
    return np.asarray(sorted(nx.ego_graph(G, center, radius=hops).nodes()), dtype=np.int64)


def partition_ego_networks(
    g: Graph,
    k_clients: int,
    hops: int,
    seed: int,
    centers: Optional[Sequence[int]] = None,
    max_retries: int = 20,
) -> List[ClientPartition]:
    """One client per k-hop ego-network around distinct, uniformly sampled centers.

    Clients may share nodes. A draw that yields an edgeless ego-network is
    re-sampled as a whole, up to `max_retries` times.
    """
    if k_clients < 1 or hops < 1:
        raise GraphValidationError(f"k_clients and hops must both be >= 1, got {k_clients} and {hops}")
    if k_clients > g.num_nodes:
        raise InsufficientNodes(f"cannot place {k_clients} clients on {g.num_nodes} nodes")
    G = g.to_networkx()
    rng = np.random.default_rng(seed)

    attempts = 1 if centers is not None else max_retries
    for attempt in range(attempts):
        if centers is not None:
            chosen = np.asarray(centers, dtype=np.int64)
            if len(chosen) != k_clients or len(np.unique(chosen)) != k_clients:
                raise GraphValidationError("explicit centers must be k_clients distinct node ids")
        else:
            chosen = rng.choice(g.num_nodes, size=k_clients, replace=False)

        parts = []
        for client_id, center in enumerate(chosen.tolist()):
            node_ids = _ego_nodes(G, center, hops)
            sub = g.induced_subgraph(node_ids)
            if sub.num_edges == 0:
                logger.debug("Attempt %d: ego-network of node %d has no edges", attempt + 1, center)
                break
            parts.append(ClientPartition(client_id=client_id, center=center, graph=sub, node_ids=node_ids))
        else:
            return parts

    raise EmptyClient(f"could not draw {k_clients} ego-networks with edges after {attempts} attempt(s)")


def partition_summary(parts: Sequence[ClientPartition], num_nodes: int) -> PartitionSummary:
    clients = []
    for part in parts:
        n = part.graph.num_nodes
        clients.append(
            ClientSummary(
                client_id=part.client_id,
                center=part.center,
                num_nodes=n,
                num_edges=part.graph.num_edges,
                sparsity=2.0 * part.graph.num_edges / (n * (n - 1)) if n > 1 else 0.0,
                gbs=edge_group_stats(part.graph).gbs,
            )
        )
    counts = np.bincount(np.concatenate([p.node_ids for p in parts]), minlength=num_nodes)
    covered = int((counts > 0).sum())
    overlap = float((counts >= 2).sum() / covered) if covered else 0.0
    return PartitionSummary(clients=clients, covered_nodes=covered, overlap_fraction=overlap)


# Synthetic graphs
def _triangle_pairs(n: int, k: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Map indices into the row-major strict upper triangle of an n x n matrix to (i, j)."""
    k = k.astype(np.int64)
    i = n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7.0) / 2.0 - 0.5).astype(np.int64)
    i = np.clip(i, 0, max(n - 2, 0))

    def row_start(row):
        return row * n - row * (row + 1) // 2

    # float rounding can leave i off by one
    i = np.where(k < row_start(i), i - 1, i)
    i = np.where((i + 1 <= n - 2) & (k >= row_start(i + 1)), i + 1, i)
    j = k - row_start(i) + i + 1
    return i, j


def _sample_pairs(rng: np.random.Generator, population: int, p: float) -> np.ndarray:
    # each of `population` pairs present independently w.p. p
    count = rng.binomial(population, p) if population else 0
    if count == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(population, size=count, replace=False))


def generate_sbm(cfg: SbmConfig) -> Graph:
    """Two-block SBM: nodes 0..N0-1 have s = 0, the rest s = 1."""
    n0, n1 = cfg.nodes_per_group
    n = n0 + n1
    rng = np.random.default_rng(cfg.seed)

    blocks = []
    for offset, size in ((0, n0), (n0, n1)):
        k = _sample_pairs(rng, size * (size - 1) // 2, cfg.p_intra)
        i, j = _triangle_pairs(size, k)
        blocks.append(np.stack([i + offset, j + offset], axis=1))
    k = _sample_pairs(rng, n0 * n1, cfg.p_inter)
    blocks.append(np.stack([k // n1, n0 + k % n1], axis=1))
    edges = np.concatenate(blocks).astype(np.int64)

    sensitive = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    (mu0, mu1), (sd0, sd1) = cfg.feature_means, cfg.feature_stds
    features = np.concatenate(
        [rng.normal(mu0, sd0, size=(n0, cfg.feature_dim)), rng.normal(mu1, sd1, size=(n1, cfg.feature_dim))]
    )
    if cfg.label_rule == "by_group_with_flip":
        labels = sensitive ^ (rng.random(n) < cfg.flip).astype(np.int64)
    else:
        labels = (features[:, cfg.label_feature] > cfg.label_threshold).astype(np.int64)

    return Graph.from_edge_list(n, edges, features, sensitive, labels)


# CSV ingestion
@dataclass(frozen=True)
class CsvLoadStats:
    duplicate_edges: int
    self_loops_rejected: int


def _numeric_column(df: pd.DataFrame, column: str) -> np.ndarray:
    values = pd.to_numeric(df[column], errors="coerce")
    bad = np.flatnonzero(values.isna().to_numpy())
    if len(bad):
        raise FormatError(f"non-numeric value in column `{column}`", row=int(bad[0]) + 2)
    return values.to_numpy()


def read_graph_csv(nodes_path: Union[str, Path], edges_path: Union[str, Path]) -> Tuple[Graph, CsvLoadStats]:
    """Load `node_id,sensitive,label,f1..fd` and `src,dst` files.

    Row numbers in errors are file line numbers (the header is line 1).
    """
    try:
        nodes = pd.read_csv(nodes_path)
        edge_rows = pd.read_csv(edges_path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise FormatError(f"cannot read dataset files: {exc}") from exc

    if list(nodes.columns[:3]) != ["node_id", "sensitive", "label"] or len(nodes.columns) < 4:
        raise FormatError("node file header must be node_id,sensitive,label,f1,...,fd", row=1)
    if list(edge_rows.columns) != ["src", "dst"]:
        raise FormatError("edge file header must be src,dst", row=1)

    node_id = _numeric_column(nodes, "node_id")
    n = len(nodes)
    if not np.array_equal(np.sort(node_id), np.arange(n)):
        seen = set()
        for row, value in enumerate(node_id):
            if value != int(value) or not 0 <= value < n or value in seen:
                raise FormatError("node ids must be the contiguous integers 0..N-1", row=row + 2)
            seen.add(value)
    order = np.argsort(node_id, kind="stable")

    columns = {}
    for column in ("sensitive", "label"):
        values = _numeric_column(nodes, column)
        bad = np.flatnonzero(~np.isin(values, (0, 1)))
        if len(bad):
            raise BinaryViolation(f"`{column}` must be 0 or 1, got {values[bad[0]]}", row=int(bad[0]) + 2)
        columns[column] = values[order].astype(np.int64)
    features = np.column_stack([_numeric_column(nodes, c) for c in nodes.columns[3:]]).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(features).all(axis=1))
    if len(bad):
        raise FormatError("features must be finite", row=int(bad[0]) + 2)

    src = _numeric_column(edge_rows, "src")
    dst = _numeric_column(edge_rows, "dst")
    pairs = np.stack([src, dst], axis=1)
    bad = np.flatnonzero(((pairs < 0) | (pairs >= n) | (pairs != np.floor(pairs))).any(axis=1))
    if len(bad):
        raise FormatError("edge endpoint is not a known node id", row=int(bad[0]) + 2)
    pairs = pairs.astype(np.int64)
    loops = pairs[:, 0] == pairs[:, 1]
    if loops.any():
        logger.warning("Rejected %d self-loop edge rows", int(loops.sum()))
    pairs = pairs[~loops]
    unique = np.unique(np.sort(pairs, axis=1), axis=0) if len(pairs) else pairs
    stats = CsvLoadStats(duplicate_edges=len(pairs) - len(unique), self_loops_rejected=int(loops.sum()))

    graph = Graph.from_edge_list(n, unique, features[order], columns["sensitive"], columns["label"])
    return graph, stats
