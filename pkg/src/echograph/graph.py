"""Contour graphs and their spiral neighborhood orderings.

A ventricle contour is a single cycle of keypoint nodes. The two-frame
variant stacks two rings and links matching nodes across frames, so a
decoder can pass messages between the end-diastole and end-systole
contours. Node indices are local to a frame (0..N-1); edges are stored
with global ids, where frame f node i has global id f*N + i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidGraphError, InvalidSpiralError

NodeRef = int | tuple[int, int]


@dataclass(frozen=True)
class ContourGraph:
    """Ring contour graph, optionally duplicated over two frames."""

    n_nodes: int
    edges: frozenset[tuple[int, int]]
    frame_count: int = 1
    temporal_pairs: tuple[tuple[int, int], ...] = field(default=())

    @property
    def total_nodes(self) -> int:
        return self.n_nodes * self.frame_count

    def global_index(self, frame: int, node: int) -> int:
        if not (0 <= frame < self.frame_count):
            raise InvalidGraphError(f"frame {frame} out of range for {self.frame_count}-frame graph")
        if not (0 <= node < self.n_nodes):
            raise InvalidGraphError(f"node {node} out of range for {self.n_nodes}-node frames")
        return frame * self.n_nodes + node

    def degree(self, global_node: int) -> int:
        return sum(1 for a, b in self.edges if global_node in (a, b))


@dataclass(frozen=True)
class SpiralSequence:
    """Fixed gather order around a center node.

    ``order`` holds plain node indices on single-frame graphs and
    ``(frame, node)`` pairs on two-frame graphs.
    """

    center: NodeRef
    order: tuple[NodeRef, ...]

    def __len__(self) -> int:
        return len(self.order)


def _ring_edges(n: int, offset: int = 0) -> set[tuple[int, int]]:
    edges = set()
    for i in range(n):
        a, b = offset + i, offset + (i + 1) % n
        edges.add((min(a, b), max(a, b)))
    return edges


def build_ring_graph(n_nodes: int) -> ContourGraph:
    """Single closed contour: node i joined to its two cyclic neighbors."""
    if n_nodes < 3:
        raise InvalidGraphError(f"a contour ring needs at least 3 nodes, got {n_nodes}")
    return ContourGraph(n_nodes=n_nodes, edges=frozenset(_ring_edges(n_nodes)))


def build_spatiotemporal_graph(n_nodes: int) -> ContourGraph:
    """Two contour rings with each node tied to its counterpart in the other frame."""
    if n_nodes < 3:
        raise InvalidGraphError(f"a contour ring needs at least 3 nodes, got {n_nodes}")
    edges = _ring_edges(n_nodes) | _ring_edges(n_nodes, offset=n_nodes)
    pairs = tuple((i, i) for i in range(n_nodes))
    return ContourGraph(n_nodes=n_nodes, edges=frozenset(edges), frame_count=2, temporal_pairs=pairs)


def spiral_sequence(graph: ContourGraph, start: int, length: int) -> SpiralSequence:
    """Clockwise run of ``length`` nodes beginning at ``start``.

    Clockwise means increasing node index; annotation loaders keep
    contours in a fixed anatomical orientation so this is consistent
    across cases.
    """
    n = graph.n_nodes
    if length < 1 or length > n:
        raise InvalidSpiralError(f"spiral length {length} not in [1, {n}]")
    if not (0 <= start < n):
        raise InvalidSpiralError(f"start node {start} out of range for {n} nodes")
    order = tuple((start + k) % n for k in range(length))
    return SpiralSequence(center=start, order=order)


def spiral_sequence_st(graph: ContourGraph, center: tuple[int, int], length: int) -> SpiralSequence:
    """Spatial clockwise run in the center's frame plus one temporal tap.

    The counterpart node from the other frame is appended last, so the
    spatial receptive field matches the single-frame spiral and each node
    gets exactly one cross-frame input.
    """
    if graph.frame_count != 2:
        raise InvalidGraphError("spatio-temporal spirals need a two-frame graph")
    frame, node = center
    if frame not in (0, 1):
        raise InvalidGraphError(f"frame {frame} out of range for a two-frame graph")
    spatial = spiral_sequence(graph, node, length)
    order = tuple((frame, i) for i in spatial.order) + ((1 - frame, node),)
    return SpiralSequence(center=(frame, node), order=order)


def ring_spirals(graph: ContourGraph, length: int) -> list[SpiralSequence]:
    """One spiral per node of a single-frame graph."""
    if graph.frame_count != 1:
        raise InvalidGraphError("ring_spirals expects a single-frame graph")
    return [spiral_sequence(graph, i, length) for i in range(graph.n_nodes)]


def st_spirals(graph: ContourGraph, length: int) -> list[SpiralSequence]:
    """One spiral per node of a two-frame graph, frame 0 nodes first."""
    if graph.frame_count != 2:
        raise InvalidGraphError("st_spirals expects a two-frame graph")
    return [
        spiral_sequence_st(graph, (frame, i), length)
        for frame in (0, 1)
        for i in range(graph.n_nodes)
    ]


def spirals_to_matrix(spirals: list[SpiralSequence], n_nodes: int) -> np.ndarray:
    """Flatten spirals into an integer gather matrix (one row per spiral).

    Tuple entries ``(frame, node)`` map to global row ids ``frame*N + node``.
    All spirals must share one length.
    """
    if not spirals:
        raise InvalidSpiralError("need at least one spiral")
    length = len(spirals[0])
    out = np.empty((len(spirals), length), dtype=np.int64)
    for row, sp in enumerate(spirals):
        if len(sp) != length:
            raise InvalidSpiralError("spirals must all have the same length")
        for col, entry in enumerate(sp.order):
            if isinstance(entry, tuple):
                frame, node = entry
                out[row, col] = frame * n_nodes + node
            else:
                out[row, col] = entry
    return out
