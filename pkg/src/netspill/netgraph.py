"""Undirected network container, generators, and community detection.

Nodes are dense integer indices 0..n-1. Graphs are simple (no self loops,
no parallel edges) and stored as sorted adjacency tuples, so every routine
that consumes a Network is order-deterministic.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import EmptyNetworkError, GenerationError, InputError


@dataclass(frozen=True, eq=False)
class Partition:
    """Grouping of nodes into contiguous labels 0..group_count-1.

    Every group must be nonempty; `from_labels` relabels arbitrary hashable
    labels by order of first appearance.
    """

    labels: np.ndarray
    group_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 1:
            raise InputError("partition labels must be a 1-d array")
        if self.group_count < 0:
            raise InputError("group_count must be nonnegative")
        if labels.size == 0:
            if self.group_count != 0:
                raise InputError("empty partition must have group_count 0")
            return
        if labels.min() < 0 or labels.max() >= self.group_count:
            raise InputError("partition labels out of range")
        if np.unique(labels).size != self.group_count:
            raise InputError("partition has empty groups")

    @classmethod
    def from_labels(cls, raw) -> "Partition":
        raw = list(raw)
        mapping: dict = {}
        labels = np.empty(len(raw), dtype=np.int64)
        for i, lab in enumerate(raw):
            if lab not in mapping:
                mapping[lab] = len(mapping)
            labels[i] = mapping[lab]
        return cls(labels, len(mapping))

    @property
    def n(self) -> int:
        return self.labels.size

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.group_count)

    def groups(self) -> list:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.searchsorted(self.labels[order], np.arange(self.group_count + 1))
        return [order[bounds[g]:bounds[g + 1]] for g in range(self.group_count)]


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable simple undirected graph with precomputed components."""

    n: int
    adjacency: tuple
    component_id: np.ndarray
    component_sizes: tuple

    @property
    def m(self) -> int:
        """Number of connected components."""
        return len(self.component_sizes)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    @cached_property
    def components(self) -> Partition:
        return Partition(self.component_id, self.m)

    @cached_property
    def _flat(self):
        """(owner, neighbor) arrays listing each directed adjacency entry once."""
        owner = np.repeat(np.arange(self.n), self.degrees)
        nbr = np.concatenate([np.asarray(a, dtype=np.int64) for a in self.adjacency]) \
            if self.n and owner.size else np.empty(0, dtype=np.int64)
        return owner, nbr

    @property
    def owner_flat(self) -> np.ndarray:
        return self._flat[0]

    @property
    def nbr_flat(self) -> np.ndarray:
        return self._flat[1]

    @cached_property
    def edge_count(self) -> int:
        return int(self.degrees.sum()) // 2

    def edge_list(self) -> np.ndarray:
        """Edges as an (E, 2) array with u < v, sorted lexicographically."""
        owner, nbr = self._flat
        keep = owner < nbr
        return np.column_stack([owner[keep], nbr[keep]])


def neighbors(net: Network, i: int) -> tuple:
    """Sorted neighbor indices of node i."""
    if not 0 <= i < net.n:
        raise InputError(f"node {i} out of range for network of size {net.n}")
    return net.adjacency[i]


def build_network(n_nodes: int, edges) -> Network:
    """Build a Network from an edge list.

    Duplicate edges (either orientation) collapse to one. Self loops and
    out-of-range endpoints raise InputError.
    """
    if n_nodes < 0:
        raise InputError("n_nodes must be nonnegative")
    seen = set()
    adj = [[] for _ in range(n_nodes)]
    for e in edges:
        u, v = int(e[0]), int(e[1])
        if u == v:
            raise InputError(f"self loop at node {u}")
        if not (0 <= u < n_nodes and 0 <= v < n_nodes):
            raise InputError(f"edge ({u}, {v}) out of range for {n_nodes} nodes")
        key = (u, v) if u < v else (v, u)
        if key in seen:
            continue
        seen.add(key)
        adj[u].append(v)
        adj[v].append(u)
    adjacency = tuple(tuple(sorted(a)) for a in adj)
    component_id, sizes = _bfs_components(n_nodes, adjacency)
    return Network(n_nodes, adjacency, component_id, tuple(sizes))


def _bfs_components(n: int, adjacency) -> tuple:
    comp = np.full(n, -1, dtype=np.int64)
    sizes = []
    for start in range(n):
        if comp[start] >= 0:
            continue
        label = len(sizes)
        comp[start] = label
        size = 1
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adjacency[u]:
                if comp[v] < 0:
                    comp[v] = label
                    size += 1
                    queue.append(v)
        sizes.append(size)
    return comp, sizes


def remove_isolates(net: Network, data=None):
    """Drop degree-zero nodes, relabel, and subset aligned data if given.

    `data` only needs a .subset(indices) method (duck-typed so this module
    does not depend on the study-data container).
    """
    keep = np.flatnonzero(net.degrees > 0)
    if keep.size == 0:
        raise EmptyNetworkError("network has no non-isolated nodes")
    if keep.size == net.n:
        return net, data
    relabel = np.full(net.n, -1, dtype=np.int64)
    relabel[keep] = np.arange(keep.size)
    adjacency = tuple(tuple(int(relabel[v]) for v in net.adjacency[i]) for i in keep)
    component_id, sizes = _bfs_components(keep.size, adjacency)
    sub = Network(keep.size, adjacency, component_id, tuple(sizes))
    if data is not None:
        data = data.subset(keep)
    return sub, data


# ---------------------------------------------------------------------------
# generators

_PAIRING_ATTEMPTS = 10_000


def _regular_edges(nodes, degree, rng) -> list:
    """Pairing-model draw of a simple degree-regular graph on `nodes`.

    Whole-graph rejection: reshuffle all stubs on any self loop or repeat
    edge. Bounded retries keep pathological parameter choices from hanging.
    """
    stubs = np.repeat(nodes, degree)
    for _ in range(_PAIRING_ATTEMPTS):
        perm = rng.permutation(stubs)
        pairs = perm.reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            continue
        lo = np.minimum(pairs[:, 0], pairs[:, 1])
        hi = np.maximum(pairs[:, 0], pairs[:, 1])
        keys = lo * (np.max(nodes) + 1) + hi
        if np.unique(keys).size != keys.size:
            continue
        return list(zip(lo.tolist(), hi.tolist()))
    raise GenerationError(
        f"no simple {degree}-regular graph found on {len(nodes)} nodes "
        f"after {_PAIRING_ATTEMPTS} pairing attempts"
    )


def generate_regular_components(m: int, mean_size: float, degree: int, rng) -> Network:
    """m disjoint degree-regular components with Poisson(mean_size) sizes.

    Sizes are redrawn until size >= degree+1 and size*degree is even, so a
    simple regular graph exists on each component.
    """
    if m < 1:
        raise InputError("m must be at least 1")
    if degree < 1:
        raise InputError("degree must be at least 1")
    if mean_size <= degree:
        raise InputError("mean_size must exceed degree")
    sizes = []
    for _ in range(m):
        while True:
            s = int(rng.poisson(mean_size))
            if s >= degree + 1 and (s * degree) % 2 == 0:
                sizes.append(s)
                break
    edges = []
    offset = 0
    for s in sizes:
        nodes = np.arange(offset, offset + s)
        edges.extend(_regular_edges(nodes, degree, rng))
        offset += s
    return build_network(offset, edges)


_TRIP_SIZES = (2, 2, 2, 2, 2, 4, 5, 7, 10, 239)


def generate_trip_shaped(rng, sizes=_TRIP_SIZES, n_edges: int = 540) -> Network:
    """Sparse multi-component network shaped like a small risk-network study.

    Each component gets a uniform random spanning tree (connectivity is
    guaranteed), then the remaining edge budget is spread across components
    in proportion to their unused pair capacity.
    """
    sizes = tuple(int(s) for s in sizes)
    if any(s < 1 for s in sizes):
        raise InputError("component sizes must be positive")
    tree_edges = sum(s - 1 for s in sizes)
    capacity = [s * (s - 1) // 2 - (s - 1) for s in sizes]
    extra_total = n_edges - tree_edges
    if extra_total < 0 or extra_total > sum(capacity):
        raise InputError(
            f"edge budget {n_edges} infeasible for component sizes "
            f"(tree needs {tree_edges}, max {tree_edges + sum(capacity)})"
        )

    # proportional split of the extra budget, capped by capacity,
    # largest-remainder rounding, leftovers to whoever still has room
    total_cap = sum(capacity)
    raw = [extra_total * c / total_cap if total_cap else 0.0 for c in capacity]
    extra = [min(int(np.floor(r)), c) for r, c in zip(raw, capacity)]
    remainders = sorted(
        range(len(sizes)), key=lambda k: (raw[k] - np.floor(raw[k]), k), reverse=True
    )
    short = extra_total - sum(extra)
    idx = 0
    while short > 0:
        k = remainders[idx % len(sizes)]
        if extra[k] < capacity[k]:
            extra[k] += 1
            short -= 1
        idx += 1

    edges = []
    offset = 0
    for s, xtra in zip(sizes, extra):
        nodes = np.arange(offset, offset + s)
        present = set()
        for j in range(1, s):
            parent = int(rng.integers(0, j))
            e = (int(nodes[parent]), int(nodes[j]))
            present.add(e)
            edges.append(e)
        added = 0
        while added < xtra:
            u, v = rng.integers(0, s, size=2)
            if u == v:
                continue
            e = (int(nodes[min(u, v)]), int(nodes[max(u, v)]))
            if e in present:
                continue
            present.add(e)
            edges.append(e)
            added += 1
        offset += s
    return build_network(offset, edges)


# ---------------------------------------------------------------------------
# community detection

def modularity(net: Network, partition: Partition) -> float:
    """Newman modularity Q of a node partition. Zero-edge graphs give 0."""
    if partition.n != net.n:
        raise InputError("partition length does not match network size")
    m_edges = net.edge_count
    if m_edges == 0:
        return 0.0
    labels = partition.labels
    el = net.edge_list()
    same = labels[el[:, 0]] == labels[el[:, 1]]
    internal = np.bincount(labels[el[:, 0]][same], minlength=partition.group_count).astype(float)
    deg_sum = np.bincount(labels, weights=net.degrees, minlength=partition.group_count)
    return float(np.sum(internal / m_edges - (deg_sum / (2.0 * m_edges)) ** 2))


def fast_greedy_communities(net: Network) -> Partition:
    """Greedy agglomerative modularity maximization (CNM).

    Starts from singletons and repeatedly merges the connected community
    pair with the largest positive modularity gain
        dQ = between/m_edges - deg_c*deg_d/(2*m_edges^2),
    breaking ties on the lowest community-label pair. A community's label is
    its smallest member node, so the whole procedure is deterministic.
    Merges only happen across edges, hence communities refine components.
    """
    if net.n == 0:
        raise EmptyNetworkError("cannot detect communities in an empty network")
    m_edges = net.edge_count
    if m_edges == 0:
        return Partition(np.arange(net.n), net.n)

    deg = {i: float(d) for i, d in enumerate(net.degrees) if d > 0}
    between: dict = {i: {} for i in deg}
    for u, v in net.edge_list():
        u, v = int(u), int(v)
        between[u][v] = between[u].get(v, 0.0) + 1.0
        between[v][u] = between[v].get(u, 0.0) + 1.0
    members = {i: [i] for i in deg}

    two_m2 = 2.0 * m_edges * m_edges
    while True:
        best = None
        best_gain = 0.0
        # ascending scan: on exact ties the first (lowest) pair sticks
        for c in sorted(between):
            for d in sorted(between[c]):
                if d <= c:
                    continue
                gain = between[c][d] / m_edges - deg[c] * deg[d] / two_m2
                if gain > best_gain + 1e-15:
                    best = (c, d)
                    best_gain = gain
        if best is None or best_gain <= 0.0:
            break
        c, d = best
        members[c].extend(members.pop(d))
        deg[c] += deg.pop(d)
        nbrs_d = between.pop(d)
        for e, w in nbrs_d.items():
            if e == c:
                continue
            between[e].pop(d)
            between[c][e] = between[c].get(e, 0.0) + w
            between[e][c] = between[e].get(c, 0.0) + w
        between[c].pop(d, None)

    node_label = np.arange(net.n, dtype=np.int64)
    for root, mem in members.items():
        node_label[mem] = min(mem)
    # isolates keep their own singleton label
    return Partition.from_labels(node_label.tolist())
