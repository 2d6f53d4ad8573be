"""Patch subsampling around central paper nodes.

Per-edge-type fan-outs with three selection regimes:

* take the whole neighbourhood when it fits the bound K,
* sample K without replacement while the neighbourhood is at most 5K,
* sample K with replacement beyond that.

Patches expand to a fixed depth of two. Edges point from the sampled
neighbour to the node that sampled it; nodes are deduplicated by global
id, and an edge to an already-present node is kept when it lands on the
central node or spans adjacent depths (same-depth re-encounters are
dropped, which keeps the patch shape predictable).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InputError
from .hetgraph import EdgeType, HeteroGraph, NodeType
from .pfgm import read_manifest_kv, write_manifest_kv

RELATION_NAMES = {
    kernels.REL_CITED: "cited-paper",
    kernels.REL_CITING: "citing-paper",
    kernels.REL_AUTHOR_OF: "author-of-paper",
    kernels.REL_PAPER_OF: "paper-of-author",
    kernels.REL_INST_OF: "institution-of-author",
}


@dataclass(frozen=True)
class SamplingPlan:
    """Upper bounds K per (target depth, sampler type, relation)."""

    d1_cited: int = 40
    d1_citing: int = 40
    d1_authors: int = 20
    d2_cited: int = 40
    d2_citing: int = 40
    d2_authors: int = 20
    d2_papers: int = 40
    d2_institutions: int = 10

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise InputError(f"sampling bound {name} must be >= 0, got {value}")

    def ks(self) -> np.ndarray:
        return np.array(
            [self.d1_cited, self.d1_citing, self.d1_authors,
             self.d2_cited, self.d2_citing, self.d2_authors,
             self.d2_papers, self.d2_institutions],
            dtype=np.int64,
        )

    def max_nodes(self) -> int:
        """Worst-case distinct node count (9,101 for the default plan)."""
        d1 = self.d1_cited + self.d1_citing + self.d1_authors
        via_papers = (self.d1_cited + self.d1_citing) * (self.d2_cited + self.d2_citing + self.d2_authors)
        via_authors = self.d1_authors * (self.d2_papers + self.d2_institutions)
        return 1 + d1 + via_papers + via_authors

    def save(self, path) -> None:
        write_manifest_kv(path, self.__dict__)

    @classmethod
    def load(cls, path) -> "SamplingPlan":
        fields = set(cls().__dict__)
        kv = read_manifest_kv(path)
        unknown = set(kv) - fields
        if unknown:
            raise InputError(f"unknown sampling plan keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in kv.items()})


@dataclass(frozen=True)
class Patch:
    """A rooted subgraph; the central node is always patch index 0."""

    node_ids: np.ndarray  # int64 global ids
    node_types: np.ndarray  # int8 NodeType codes
    node_depths: np.ndarray  # int8 in {0, 1, 2}
    edge_src: np.ndarray  # int32 patch indices (the sampled neighbour)
    edge_dst: np.ndarray  # int32 patch indices (the sampler)
    edge_rel: np.ndarray  # int8 relation codes
    central: int = 0

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edge_src)


def sample_neighbors(neighborhood, k: int, rng: np.random.Generator) -> np.ndarray:
    """Select from one neighbourhood under the three-regime rule."""
    if k < 0:
        raise InputError(f"sampling bound must be >= 0, got {k}")
    arr = np.asarray(neighborhood)
    n = arr.shape[0]
    if k == 0:
        return arr[:0].copy()
    if n <= k:
        return arr.copy()
    out = np.empty(k, dtype=np.int64)
    u = rng.random(k)
    if n <= 5 * k:
        kernels.fisher_yates_take(arr.astype(np.int32), 0, n, k, u, 0, out)
    else:
        kernels.with_replacement_take(arr.astype(np.int32), 0, n, k, u, 0, out)
    return out if arr.dtype == np.int64 else out.astype(arr.dtype)


def _relation_csrs(graph: HeteroGraph):
    cited = graph.forward[EdgeType.CITES]
    citing = graph.reverse[EdgeType.CITES]
    authors = graph.reverse[EdgeType.WRITES]
    papers = graph.forward[EdgeType.WRITES]
    inst = graph.forward[EdgeType.AFFILIATED_WITH]
    return cited, citing, authors, papers, inst


def sample_patch(graph: HeteroGraph, center: int, plan: SamplingPlan,
                 rng: np.random.Generator) -> Patch:
    """Sample one two-depth patch rooted at a canonical paper node."""
    if not 0 <= center < graph.num_papers:
        raise InputError(f"center {center} outside [0, {graph.num_papers})")
    if graph.fusion_map[center] != center:
        raise InputError(f"center {center} is a fused duplicate of {graph.fusion_map[center]}")

    cited, citing, authors, papers, inst = _relation_csrs(graph)
    cap = plan.max_nodes()
    table_cap = 1 << int(np.ceil(np.log2(max(2 * cap, 16))))

    u = rng.random(max(cap - 1, 1))
    node_gid = np.empty(cap, dtype=np.int64)
    node_type = np.empty(cap, dtype=np.int8)
    node_depth = np.empty(cap, dtype=np.int8)
    edge_src = np.empty(cap, dtype=np.int32)
    edge_dst = np.empty(cap, dtype=np.int32)
    edge_rel = np.empty(cap, dtype=np.int8)
    tkeys = np.full(table_cap, -1, dtype=np.int64)
    tvals = np.zeros(table_cap, dtype=np.int32)
    ks = plan.ks()
    chosen = np.empty(max(int(ks.max()), 1), dtype=np.int64)

    n_nodes, n_edges, _ = kernels.patch_core(
        center,
        cited.offsets, cited.targets,
        citing.offsets, citing.targets,
        authors.offsets, authors.targets,
        papers.offsets, papers.targets,
        inst.offsets, inst.targets,
        ks, u,
        node_gid, node_type, node_depth,
        edge_src, edge_dst, edge_rel,
        tkeys, tvals, chosen,
    )
    return Patch(
        node_ids=node_gid[:n_nodes].copy(),
        node_types=node_type[:n_nodes].copy(),
        node_depths=node_depth[:n_nodes].copy(),
        edge_src=edge_src[:n_edges].copy(),
        edge_dst=edge_dst[:n_edges].copy(),
        edge_rel=edge_rel[:n_edges].copy(),
    )


@dataclass(frozen=True)
class PatchStats:
    num_nodes: int
    num_edges: int
    per_type: dict


def patch_stats(patch: Patch) -> PatchStats:
    counts = {t: 0 for t in NodeType}
    for code in patch.node_types:
        counts[NodeType(int(code))] += 1
    return PatchStats(num_nodes=patch.num_nodes, num_edges=patch.num_edges,
                      per_type={t: c for t, c in counts.items() if c})
