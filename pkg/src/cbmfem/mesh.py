"""Nested mesh hierarchies for interval and unit-square domains.

Level 0 is deliberately tiny (3 nodes in 1d, 5 nodes / 4 triangles in 2d) so
that exhaustive root enumeration on the coarsest level stays cheap.  Each
refinement inserts edge midpoints exactly once, so node coordinates shared
between levels are bitwise identical.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class NodeTag(enum.IntEnum):
    INTERIOR = 0
    DIRICHLET = 1
    NEUMANN = 2
    ROBIN = 3

    @classmethod
    def from_name(cls, name: str) -> "NodeTag":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown boundary tag {name!r}") from None


# at corners the more constrained condition wins
_TAG_PRIORITY = {
    NodeTag.DIRICHLET: 3,
    NodeTag.ROBIN: 2,
    NodeTag.NEUMANN: 1,
    NodeTag.INTERIOR: 0,
}


@dataclass(frozen=True)
class MeshLevel:
    """One level of a nested mesh hierarchy.

    Attributes
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    level : int
        Refinement level, 0 for the initial mesh.
    nodes : ndarray
        Node coordinates, shape (n,) in 1d and (n, 2) in 2d.  In 1d the
        coordinates are strictly increasing.
    elements : ndarray of int
        Shape (m, 2) interval elements or (m, 3) triangles.
    boundary_tags : ndarray of int
        Per-node ``NodeTag`` value.
    coarse_nodes : ndarray of int
        Indices (on this level) of nodes carried over from the parent level;
        entry k corresponds to parent node k.
    new_nodes : ndarray of int
        Indices of nodes introduced by the refinement that produced this
        level.  Empty on level 0.
    new_node_endpoints : ndarray of int
        Shape (len(new_nodes), 2); the two nodes (indices on this level)
        whose midpoint each new node is.
    h : float
        Longest element edge on this level.
    """

    dim: int
    level: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary_tags: np.ndarray
    coarse_nodes: np.ndarray
    new_nodes: np.ndarray
    new_node_endpoints: np.ndarray
    h: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.nodes, self.elements, self.boundary_tags,
                    self.coarse_nodes, self.new_nodes, self.new_node_endpoints):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def free_nodes(self) -> np.ndarray:
        """Indices of nodes not subject to a Dirichlet condition."""
        if "free" not in self._cache:
            mask = self.boundary_tags != NodeTag.DIRICHLET
            self._cache["free"] = np.flatnonzero(mask)
        return self._cache["free"]

    @property
    def new_free_nodes(self) -> np.ndarray:
        if "new_free" not in self._cache:
            mask = self.boundary_tags[self.new_nodes] != NodeTag.DIRICHLET
            self._cache["new_free"] = self.new_nodes[mask]
        return self._cache["new_free"]

    def node_to_elements(self) -> list:
        """For each node, the list of (element index, local index) pairs."""
        if "n2e" not in self._cache:
            adj = [[] for _ in range(self.n_nodes)]
            for e, conn in enumerate(self.elements):
                for loc, node in enumerate(conn):
                    adj[node].append((e, loc))
            self._cache["n2e"] = adj
        return self._cache["n2e"]

    def boundary_edges(self) -> np.ndarray:
        """Edges lying on the domain boundary (2d only), shape (k, 2).

        An edge is on the boundary iff it belongs to exactly one triangle.
        """
        if self.dim != 2:
            raise ValueError("boundary_edges is a 2d operation")
        if "bedges" not in self._cache:
            edges = np.sort(
                self.elements[:, [[1, 2], [0, 2], [0, 1]]].reshape(-1, 2), axis=1
            )
            uniq, counts = np.unique(edges, axis=0, return_counts=True)
            self._cache["bedges"] = uniq[counts == 1]
        return self._cache["bedges"]


def _corner_tags(tag_a: NodeTag, tag_b: NodeTag) -> NodeTag:
    return max(tag_a, tag_b, key=_TAG_PRIORITY.__getitem__)


def build_initial_mesh(domain, segment_tags: dict) -> MeshLevel:
    """Build the coarsest mesh level for a domain.

    Parameters
    ----------
    domain : Domain
        Either an interval (a, b) or the unit square.
    segment_tags : dict
        Maps boundary segment names to tag names ('dirichlet', 'neumann',
        'robin').  Segments are 'left'/'right' in 1d and
        'left'/'right'/'bottom'/'top' in 2d.  Where two segments meet, the
        more constrained condition wins (Dirichlet over Robin over Neumann).
    """
    if domain.kind == "interval":
        return _initial_interval(domain.a, domain.b, segment_tags)
    if domain.kind == "unit_square":
        return _initial_square(segment_tags)
    raise ValueError(f"unknown domain kind {domain.kind!r}")


def _segment_tag(segment_tags, name) -> NodeTag:
    try:
        return NodeTag.from_name(segment_tags[name])
    except KeyError:
        raise ValueError(f"missing boundary tag for segment {name!r}") from None


def _initial_interval(a: float, b: float, segment_tags) -> MeshLevel:
    if not b > a:
        raise ValueError(f"interval needs b > a, got [{a}, {b}]")
    nodes = np.array([a, 0.5 * (a + b), b])
    elements = np.array([[0, 1], [1, 2]])
    tags = np.array(
        [_segment_tag(segment_tags, "left"), NodeTag.INTERIOR,
         _segment_tag(segment_tags, "right")],
        dtype=np.int8,
    )
    return MeshLevel(
        dim=1, level=0, nodes=nodes, elements=elements, boundary_tags=tags,
        coarse_nodes=np.arange(3), new_nodes=np.empty(0, dtype=int),
        new_node_endpoints=np.empty((0, 2), dtype=int), h=float(nodes[1] - nodes[0]),
    )


def _square_node_tags(nodes: np.ndarray, segment_tags) -> np.ndarray:
    side_tags = {name: _segment_tag(segment_tags, name)
                 for name in ("left", "right", "bottom", "top")}
    tags = np.full(nodes.shape[0], NodeTag.INTERIOR, dtype=np.int8)
    for i, (x, y) in enumerate(nodes):
        tag = NodeTag.INTERIOR
        if x == 0.0:
            tag = _corner_tags(tag, side_tags["left"])
        if x == 1.0:
            tag = _corner_tags(tag, side_tags["right"])
        if y == 0.0:
            tag = _corner_tags(tag, side_tags["bottom"])
        if y == 1.0:
            tag = _corner_tags(tag, side_tags["top"])
        tags[i] = tag
    return tags


def _initial_square(segment_tags) -> MeshLevel:
    # four corners plus the centre, split into four triangles
    nodes = np.array([
        [0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5],
    ])
    elements = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    tags = _square_node_tags(nodes, segment_tags)
    return MeshLevel(
        dim=2, level=0, nodes=nodes, elements=elements, boundary_tags=tags,
        coarse_nodes=np.arange(5), new_nodes=np.empty(0, dtype=int),
        new_node_endpoints=np.empty((0, 2), dtype=int), h=1.0,
    )


def refine(mesh: MeshLevel, segment_tags: dict) -> MeshLevel:
    """Uniformly refine a mesh level by inserting every edge midpoint."""
    if mesh.dim == 1:
        return _refine_interval(mesh, segment_tags)
    return _refine_square(mesh, segment_tags)


def _refine_interval(mesh: MeshLevel, segment_tags) -> MeshLevel:
    old = mesh.nodes
    n_old = old.shape[0]
    mids = 0.5 * (old[:-1] + old[1:])
    nodes = np.empty(2 * n_old - 1)
    nodes[0::2] = old
    nodes[1::2] = mids
    n = nodes.shape[0]
    elements = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    tags = np.full(n, NodeTag.INTERIOR, dtype=np.int8)
    tags[0] = _segment_tag(segment_tags, "left")
    tags[-1] = _segment_tag(segment_tags, "right")
    new_nodes = np.arange(1, n, 2)
    endpoints = np.column_stack([new_nodes - 1, new_nodes + 1])
    return MeshLevel(
        dim=1, level=mesh.level + 1, nodes=nodes, elements=elements,
        boundary_tags=tags, coarse_nodes=np.arange(0, n, 2),
        new_nodes=new_nodes, new_node_endpoints=endpoints,
        h=float(np.max(np.diff(nodes))),
    )


def _refine_square(mesh: MeshLevel, segment_tags) -> MeshLevel:
    tri = mesh.elements
    n_old = mesh.n_nodes
    # edge k of a triangle is opposite local vertex k
    edges = tri[:, [[1, 2], [0, 2], [0, 1]]].reshape(-1, 2)
    edges_sorted = np.sort(edges, axis=1)
    uniq, inverse = np.unique(edges_sorted, axis=0, return_inverse=True)
    mid_index = n_old + inverse.reshape(-1, 3)  # (n_tri, 3) midpoint node ids

    midpoints = 0.5 * (mesh.nodes[uniq[:, 0]] + mesh.nodes[uniq[:, 1]])
    nodes = np.vstack([mesh.nodes, midpoints])

    e0, e1, e2 = mid_index[:, 0], mid_index[:, 1], mid_index[:, 2]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    children = np.concatenate([
        np.column_stack([v0, e2, e1]),
        np.column_stack([v1, e0, e2]),
        np.column_stack([v2, e1, e0]),
        np.column_stack([e0, e1, e2]),
    ])

    tags = _square_node_tags(nodes, segment_tags)
    new_nodes = np.arange(n_old, nodes.shape[0])
    edge_len = np.linalg.norm(
        nodes[children[:, [0, 1, 2]]] - nodes[children[:, [1, 2, 0]]], axis=2
    )
    return MeshLevel(
        dim=2, level=mesh.level + 1, nodes=nodes, elements=children,
        boundary_tags=tags, coarse_nodes=np.arange(n_old),
        new_nodes=new_nodes, new_node_endpoints=uniq.copy(),
        h=float(edge_len.max()),
    )


def build_hierarchy(domain, segment_tags: dict, max_level: int) -> list:
    """Build mesh levels 0..max_level as a list of MeshLevel objects."""
    if max_level < 0:
        raise ValueError("max_level must be >= 0")
    levels = [build_initial_mesh(domain, segment_tags)]
    for _ in range(max_level):
        levels.append(refine(levels[-1], segment_tags))
    return levels


def mesh_to_dict(mesh: MeshLevel) -> dict:
    """JSON-friendly view of a mesh level (for plotting / inspection)."""
    return {
        "dim": mesh.dim,
        "level": mesh.level,
        "h": mesh.h,
        "nodes": mesh.nodes.tolist(),
        "elements": mesh.elements.tolist(),
        "boundary_tags": [int(t) for t in mesh.boundary_tags],
    }
