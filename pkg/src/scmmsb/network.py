"""Dynamic network snapshots over a fixed node set, plus edge-list I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp


class MalformedInputError(ValueError):
    """Raised when an edge list or network description is invalid."""


class DyadIndex(NamedTuple):
    t: int
    p: int
    q: int


@dataclass(frozen=True, eq=False)
class DynamicNetwork:
    """T undirected, unweighted snapshots over nodes ``0..N-1``.

    Edges are stored normalized as ``(p, q)`` with ``p < q``.
    """

    num_nodes: int
    snapshots: tuple[frozenset[tuple[int, int]], ...]

    def __post_init__(self):
        if self.num_nodes < 2:
            raise MalformedInputError("a network needs at least 2 nodes")
        if len(self.snapshots) < 1:
            raise MalformedInputError("a network needs at least 1 snapshot")
        for t, edges in enumerate(self.snapshots):
            for p, q in edges:
                if not (0 <= p < q < self.num_nodes):
                    raise MalformedInputError(
                        f"snapshot {t}: edge ({p}, {q}) is not a normalized pair in [0, {self.num_nodes})"
                    )

    @classmethod
    def from_edges(cls, num_nodes: int, edge_sets: Iterable[Iterable[tuple[int, int]]]) -> "DynamicNetwork":
        """Build from per-snapshot edge iterables, normalizing each pair to ``p < q``."""
        snaps = []
        for t, edges in enumerate(edge_sets):
            seen = set()
            for u, v in edges:
                u, v = int(u), int(v)
                if u == v:
                    raise MalformedInputError(f"snapshot {t}: self-loop on node {u}")
                pair = (u, v) if u < v else (v, u)
                if pair in seen:
                    raise MalformedInputError(f"snapshot {t}: duplicate edge {pair}")
                seen.add(pair)
            snaps.append(frozenset(seen))
        return cls(num_nodes, tuple(snaps))

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "DynamicNetwork":
        """Build from a ``[T, N, N]`` 0/1 array; only the upper triangle is read."""
        adjacency = np.asarray(adjacency)
        T, N, _ = adjacency.shape
        iu, ju = np.triu_indices(N, 1)
        snaps = []
        for t in range(T):
            hit = adjacency[t][iu, ju] != 0
            snaps.append(frozenset(zip(iu[hit].tolist(), ju[hit].tolist())))
        return cls(N, tuple(snaps))

    @property
    def num_steps(self) -> int:
        return len(self.snapshots)

    @property
    def num_pairs(self) -> int:
        return self.num_nodes * (self.num_nodes - 1) // 2

    def __eq__(self, other):
        if not isinstance(other, DynamicNetwork):
            return NotImplemented
        return self.num_nodes == other.num_nodes and self.snapshots == other.snapshots

    def __hash__(self):
        return hash((self.num_nodes, self.snapshots))

    def __repr__(self):
        n_edges = [len(s) for s in self.snapshots]
        return f"DynamicNetwork(num_nodes={self.num_nodes}, num_steps={self.num_steps}, edges={n_edges})"

    # Cached derived views. Safe on a frozen dataclass: cached_property writes
    # straight into the instance __dict__.

    @cached_property
    def pair_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Row/column arrays enumerating all unordered pairs ``p < q``."""
        iu, ju = np.triu_indices(self.num_nodes, 1)
        iu.setflags(write=False)
        ju.setflags(write=False)
        return iu, ju

    @cached_property
    def labels(self) -> np.ndarray:
        """``[T, num_pairs]`` 0/1 array of observed links in ``pair_index`` order."""
        N = self.num_nodes
        out = np.zeros((self.num_steps, self.num_pairs), dtype=np.int8)
        for t, edges in enumerate(self.snapshots):
            if edges:
                e = np.array(sorted(edges))
                p, q = e[:, 0], e[:, 1]
                # position of (p, q) in row-major upper-triangular order
                idx = p * N - p * (p + 1) // 2 + (q - p - 1)
                out[t, idx] = 1
        out.setflags(write=False)
        return out

    @cached_property
    def _adjacency(self) -> tuple[sp.csr_matrix, ...]:
        N = self.num_nodes
        mats = []
        for edges in self.snapshots:
            if edges:
                e = np.array(sorted(edges))
                rows = np.concatenate([e[:, 0], e[:, 1]])
                cols = np.concatenate([e[:, 1], e[:, 0]])
                m = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(N, N))
            else:
                m = sp.csr_matrix((N, N))
            mats.append(m)
        return tuple(mats)

    def adjacency(self, t: int) -> sp.csr_matrix:
        """Symmetric sparse adjacency matrix of snapshot ``t``."""
        self._check_time(t)
        return self._adjacency[t]

    @cached_property
    def degrees(self) -> np.ndarray:
        """``[T, N]`` node degrees."""
        out = np.zeros((self.num_steps, self.num_nodes), dtype=np.int64)
        for t, edges in enumerate(self.snapshots):
            for p, q in edges:
                out[t, p] += 1
                out[t, q] += 1
        out.setflags(write=False)
        return out

    @cached_property
    def _mean_ops(self) -> tuple[sp.csr_matrix, ...]:
        ops = []
        for t, adj in enumerate(self._adjacency):
            deg = self.degrees[t].astype(float)
            inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
            ops.append(sp.csr_matrix(sp.diags(inv) @ adj))
        return tuple(ops)

    def mean_operator(self, t: int) -> sp.csr_matrix:
        """``D^-1 A`` for snapshot ``t``: row ``p`` averages over the neighbors of
        ``p``. Rows of isolated nodes are zero."""
        self._check_time(t)
        return self._mean_ops[t]

    def neighbors(self, p: int, t: int) -> set[int]:
        """The neighbor set of node ``p`` in snapshot ``t``."""
        self._check_time(t)
        if not 0 <= p < self.num_nodes:
            raise IndexError(f"node {p} out of range [0, {self.num_nodes})")
        row = self._adjacency[t].getrow(p)
        return set(row.indices.tolist())

    def _check_time(self, t: int):
        if not 0 <= t < self.num_steps:
            raise IndexError(f"time {t} out of range [0, {self.num_steps})")


def neighbors(net: DynamicNetwork, p: int, t: int) -> set[int]:
    return net.neighbors(p, t)


def load_snapshots(path: str | os.PathLike, num_nodes: int, num_steps: int) -> DynamicNetwork:
    """Read a ``t u v`` edge list.

    Blank lines and lines starting with ``#`` are skipped. Any invalid line
    raises :class:`MalformedInputError` naming it; a ``t v u`` line after
    ``t u v`` counts as a duplicate.
    """
    if num_steps < 1:
        raise MalformedInputError("num_steps must be >= 1")
    if num_nodes < 2:
        raise MalformedInputError("num_nodes must be >= 2")
    edge_sets: list[set[tuple[int, int]]] = [set() for _ in range(num_steps)]
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 3:
                raise MalformedInputError(f"line {lineno}: expected 3 integers 't u v', got {line!r}")
            try:
                t, u, v = (int(x, 10) for x in fields)
            except ValueError:
                raise MalformedInputError(f"line {lineno}: non-integer field in {line!r}") from None
            if not 0 <= t < num_steps:
                raise MalformedInputError(f"line {lineno}: time {t} out of range [0, {num_steps})")
            for x in (u, v):
                if not 0 <= x < num_nodes:
                    raise MalformedInputError(f"line {lineno}: node {x} out of range [0, {num_nodes})")
            if u == v:
                raise MalformedInputError(f"line {lineno}: self-loop on node {u}")
            pair = (u, v) if u < v else (v, u)
            if pair in edge_sets[t]:
                raise MalformedInputError(f"line {lineno}: duplicate edge {pair} at time {t}")
            edge_sets[t].add(pair)
    return DynamicNetwork(num_nodes, tuple(frozenset(s) for s in edge_sets))


def write_snapshots(net: DynamicNetwork, path: str | os.PathLike, header: str | None = None) -> None:
    """Write ``net`` in the ``t u v`` edge-list format, sorted for byte-stable output."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for t, edges in enumerate(net.snapshots):
            for p, q in sorted(edges):
                fh.write(f"{t} {p} {q}\n")
