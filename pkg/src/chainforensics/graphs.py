"""The four graph views of a dataset, k-hop neighbourhoods, and multi-input address clustering."""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Mapping

import networkx as nx

from .core import Address, ClassLabel, ForensicsError, TxId, five_stats
from .ingest import DanglingEdge, DatasetBundle

ADDR = "address"
TX = "transaction"


class UnknownNode(ForensicsError):
    pass


class NonBipartiteEdge(ForensicsError):
    pass


def build_money_flow(tx_edges: Iterable[tuple[TxId, TxId]], tx_time_steps: Mapping[TxId, int]) -> nx.DiGraph:
    """Transaction -> transaction BTC flow graph; every node carries ``time_step``."""
    g = nx.DiGraph()
    for tx, step in tx_time_steps.items():
        g.add_node(tx, kind=TX, time_step=int(step))
    for a, b in tx_edges:
        for end in (a, b):
            if end not in tx_time_steps:
                raise DanglingEdge("tx_edges", end)
        g.add_edge(a, b)
    return g


def time_step_subgraph(g: nx.DiGraph, step: int) -> nx.DiGraph:
    nodes = [n for n, s in g.nodes(data="time_step") if s == step]
    return g.subgraph(nodes).copy()


def build_actor_graph(addr_addr_edges: Iterable[tuple], addresses: Iterable[Address] | None = None) -> nx.MultiDiGraph:
    """Input address -> output address multigraph.

    Edges given as (src, dst, txid) keep the transaction as edge key; parallel
    edges and self-loops are preserved.
    """
    g = nx.MultiDiGraph()
    known = None
    if addresses is not None:
        known = set(addresses)
        g.add_nodes_from(known, kind=ADDR)
    for edge in addr_addr_edges:
        src, dst = edge[0], edge[1]
        if known is not None:
            for end in (src, dst):
                if end not in known:
                    raise DanglingEdge("addr_addr_edges", end)
        if len(edge) > 2:
            g.add_edge(src, dst, key=edge[2], txid=edge[2])
        else:
            g.add_edge(src, dst)
    for n in g.nodes:
        g.nodes[n].setdefault("kind", ADDR)
    return g


class AddressTxGraph:
    """Bipartite address/transaction graph.

    Nodes are ``(ADDR, address)`` or ``(TX, txid)`` tuples so identical id
    strings of the two kinds never collide.
    """

    def __init__(self) -> None:
        self.graph = nx.DiGraph()

    def add_edge(self, src: tuple[str, Hashable], dst: tuple[str, Hashable]) -> None:
        if src[0] == dst[0] or {src[0], dst[0]} != {ADDR, TX}:
            raise NonBipartiteEdge(f"{src} -> {dst}")
        self.graph.add_node(src, kind=src[0])
        self.graph.add_node(dst, kind=dst[0])
        self.graph.add_edge(src, dst)

    def add_address(self, addr: Address) -> None:
        self.graph.add_node((ADDR, addr), kind=ADDR)

    def add_transaction(self, txid: TxId) -> None:
        self.graph.add_node((TX, txid), kind=TX)

    def addresses(self) -> list[Address]:
        return [n[1] for n in self.graph if n[0] == ADDR]

    def transactions(self) -> list[TxId]:
        return [n[1] for n in self.graph if n[0] == TX]

    def inputs_of(self, txid: TxId) -> list[Address]:
        return [p[1] for p in self.graph.predecessors((TX, txid))]

    def outputs_of(self, txid: TxId) -> list[Address]:
        return [s[1] for s in self.graph.successors((TX, txid))]

    def is_bipartite(self) -> bool:
        return all(u[0] != v[0] for u, v in self.graph.edges)

    def __len__(self) -> int:
        return self.graph.number_of_nodes()


def build_addr_tx_graph(
    addr_tx_edges: Iterable[tuple[Address, TxId]],
    tx_addr_edges: Iterable[tuple[TxId, Address]],
) -> AddressTxGraph:
    g = AddressTxGraph()
    for addr, tx in addr_tx_edges:
        g.add_edge((ADDR, addr), (TX, tx))
    for tx, addr in tx_addr_edges:
        g.add_edge((TX, tx), (ADDR, addr))
    return g


def k_hop(g: nx.DiGraph, seed: Hashable, k: int, direction: str = "both") -> nx.DiGraph:
    """Induced subgraph on every node within ``k`` hops of ``seed``."""
    if seed not in g:
        raise UnknownNode(seed)
    if k < 0:
        raise ValueError("k must be non-negative")
    if direction == "out":
        step = g.successors
    elif direction == "in":
        step = g.predecessors
    elif direction == "both":
        def step(n):
            yield from g.successors(n)
            yield from g.predecessors(n)
    else:
        raise ValueError(f"direction must be in/out/both, not {direction!r}")
    dist = {seed: 0}
    queue = deque([seed])
    while queue:
        n = queue.popleft()
        if dist[n] == k:
            continue
        for m in step(n):
            if m not in dist:
                dist[m] = dist[n] + 1
                queue.append(m)
    return g.subgraph(dist).copy()


# -- user clustering -------------------------------------------------------------------

class UnionFind:
    """Disjoint sets keyed by address, with path compression and union by size."""

    def __init__(self) -> None:
        self._parent: dict[Hashable, Hashable] = {}
        self._size: dict[Hashable, int] = {}

    def add(self, x: Hashable) -> None:
        if x not in self._parent:
            self._parent[x] = x
            self._size[x] = 1

    def find(self, x: Hashable) -> Hashable:
        self.add(x)
        root = x
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[x] != root:
            self._parent[x], x = root, self._parent[x]
        return root

    def union(self, a: Hashable, b: Hashable) -> Hashable:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self._size[ra] < self._size[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        self._size[ra] += self._size[rb]
        return ra

    def groups(self) -> dict[Hashable, list[Hashable]]:
        out: dict[Hashable, list[Hashable]] = defaultdict(list)
        for x in self._parent:
            out[self.find(x)].append(x)
        return out


@dataclass
class UserEntityGraph:
    """Address clusters ("users") and the directed user -> user flow graph.

    Users are numbered 0..n-1 in order of their smallest address (string order),
    so numbering is independent of transaction order.
    """

    clusters: list[frozenset]
    user_of: dict[Address, int]
    tx_groups: dict[int, list[TxId]]
    graph: nx.DiGraph

    @property
    def n_users(self) -> int:
        return len(self.clusters)


def cluster_users(g: AddressTxGraph) -> UserEntityGraph:
    """Group addresses with the multiple-input heuristic and build the user graph.

    Every input address of a transaction belongs to the same user, closed
    transitively over shared inputs. Addresses never seen as inputs become
    singleton users. A user -> user edge is added when a transaction spent by
    one user pays an address of another.
    """
    uf = UnionFind()
    for addr in g.addresses():
        uf.add(addr)
    spending: dict[TxId, list[Address]] = {}
    for tx in g.transactions():
        ins = g.inputs_of(tx)
        if not ins:
            continue
        spending[tx] = ins
        first = ins[0]
        for other in ins[1:]:
            uf.union(first, other)

    clusters = sorted((frozenset(members) for members in uf.groups().values()), key=min)
    user_of = {a: i for i, members in enumerate(clusters) for a in members}
    tx_groups: dict[int, list[TxId]] = defaultdict(list)
    for tx, ins in spending.items():
        tx_groups[user_of[ins[0]]].append(tx)
    ug = nx.DiGraph()
    ug.add_nodes_from((i, {"size": len(c)}) for i, c in enumerate(clusters))
    for user, txs in tx_groups.items():
        for tx in txs:
            for out in g.outputs_of(tx):
                other = user_of[out]
                if other != user:
                    ug.add_edge(user, other)
    return UserEntityGraph(clusters, user_of, {u: sorted(t) for u, t in tx_groups.items()}, ug)


@dataclass(frozen=True)
class UserStats:
    n_users: int
    min: int
    median: float
    mean: float
    max: int
    share_1_10: float
    share_11_1000: float
    share_1001_max: float


def user_stats(users: UserEntityGraph) -> UserStats:
    sizes = [len(c) for c in users.clusters]
    if not sizes:
        return UserStats(0, 0, 0.0, 0.0, 0, 0.0, 0.0, 0.0)
    s = five_stats(sizes)
    n = len(sizes)
    return UserStats(
        n_users=n,
        min=s.min,
        median=s.median,
        mean=s.mean,
        max=s.max,
        share_1_10=sum(1 for x in sizes if x <= 10) / n,
        share_11_1000=sum(1 for x in sizes if 11 <= x <= 1000) / n,
        share_1001_max=sum(1 for x in sizes if x > 1000) / n,
    )


# -- bundle helpers and export -----------------------------------------------------------

@dataclass
class ForensicGraphs:
    money_flow: nx.DiGraph
    actors: nx.MultiDiGraph
    addr_tx: AddressTxGraph
    users: UserEntityGraph


def build_all(bundle: DatasetBundle) -> ForensicGraphs:
    tx_steps = bundle.tx_time_steps()
    tx_classes = bundle.tx_class_map()
    wallet_classes = bundle.wallet_class_map()
    money = build_money_flow(zip(bundle.tx_edges["txId1"], bundle.tx_edges["txId2"]), tx_steps)
    for n in money.nodes:
        money.nodes[n]["class"] = int(tx_classes[n])
    actors = build_actor_graph(
        zip(bundle.addr_addr_edges["input_address"], bundle.addr_addr_edges["output_address"]),
        wallet_classes.keys(),
    )
    for n in actors.nodes:
        actors.nodes[n]["class"] = int(wallet_classes[n])
    addr_tx = build_addr_tx_graph(
        zip(bundle.addr_tx_edges["input_address"], bundle.addr_tx_edges["txId"]),
        zip(bundle.tx_addr_edges["txId"], bundle.tx_addr_edges["output_address"]),
    )
    for kind, ident in addr_tx.graph.nodes:
        attrs = addr_tx.graph.nodes[(kind, ident)]
        if kind == TX:
            attrs["class"] = int(tx_classes[ident])
            attrs["time_step"] = tx_steps[ident]
        else:
            attrs["class"] = int(wallet_classes.get(ident, ClassLabel.UNKNOWN))
    return ForensicGraphs(money, actors, addr_tx, cluster_users(addr_tx))


def _node_label(n: Hashable) -> str:
    return f"{n[0]}:{n[1]}" if isinstance(n, tuple) else str(n)


def write_edge_list(g: nx.Graph, path: str | Path, header: tuple[str, str] = ("source", "target")) -> int:
    """Plain ``source,target`` csv, one line per edge (parallel edges repeated)."""
    n = 0
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for u, v in sorted(((_node_label(u), _node_label(v)) for u, v, *_ in g.edges)):
            fh.write(f"{u},{v}\n")
            n += 1
    return n


def write_graphml(g: nx.Graph, path: str | Path) -> None:
    """Attributed export (kind, class, time_step) readable by Gephi/Cytoscape."""
    out = nx.MultiDiGraph() if g.is_multigraph() else nx.DiGraph()
    for n, attrs in sorted(g.nodes(data=True), key=lambda item: _node_label(item[0])):
        out.add_node(_node_label(n), **{k: v for k, v in attrs.items() if v is not None})
    for u, v in sorted((_node_label(u), _node_label(v)) for u, v in g.edges()):
        out.add_edge(u, v)
    nx.write_graphml(out, str(path))
