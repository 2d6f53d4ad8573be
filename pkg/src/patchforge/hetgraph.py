"""Immutable heterogeneous graph storage.

Typed nodes (paper / author / institution), one CSR per edge type plus
the eagerly materialised reverse CSR, duplicate-paper fusion, a synthetic
community-structured citation graph, and the on-disk text/PFGM loaders.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pfgm
from .errors import InputError, ParseError
from .rng import substream

log = logging.getLogger(__name__)


class NodeType(enum.IntEnum):
    PAPER = 0
    AUTHOR = 1
    INSTITUTION = 2


class EdgeType(enum.IntEnum):
    CITES = 0  # paper -> paper
    WRITES = 1  # author -> paper
    AFFILIATED_WITH = 2  # author -> institution

    @property
    def signature(self) -> tuple[NodeType, NodeType]:
        return _SIGNATURES[self]


_SIGNATURES = {
    EdgeType.CITES: (NodeType.PAPER, NodeType.PAPER),
    EdgeType.WRITES: (NodeType.AUTHOR, NodeType.PAPER),
    EdgeType.AFFILIATED_WITH: (NodeType.AUTHOR, NodeType.INSTITUTION),
}


@dataclass(frozen=True)
class Csr:
    """Compressed sparse rows; neighbor lists sorted ascending."""

    offsets: np.ndarray  # int64, len num_src + 1
    targets: np.ndarray  # int32, len num_edges
    num_dst: int

    @property
    def num_src(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_edges(self) -> int:
        return len(self.targets)

    def neighbors(self, i: int) -> np.ndarray:
        return self.targets[self.offsets[i] : self.offsets[i + 1]]

    def expand(self) -> np.ndarray:
        """Back to an [E, 2] (src, dst) pair array, sorted by (src, dst)."""
        counts = np.diff(self.offsets)
        src = np.repeat(np.arange(self.num_src, dtype=np.int64), counts)
        return np.stack([src, self.targets.astype(np.int64)], axis=1)


def _as_pairs(edges) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError(f"edges must be (src, dst) pairs, got shape {arr.shape}")
    return arr


def build_csr(edges, num_src: int, num_dst: int) -> Csr:
    """Build a CSR from (src, dst) pairs; parallel edges are preserved."""
    pairs = _as_pairs(edges)
    src, dst = pairs[:, 0], pairs[:, 1]
    bad = (src < 0) | (src >= num_src) | (dst < 0) | (dst >= num_dst)
    if bad.any():
        i = int(np.argmax(bad))
        raise InputError(
            f"edge ({src[i]}, {dst[i]}) out of range for {num_src} sources / {num_dst} targets"
        )
    order = np.lexsort((dst, src))
    offsets = np.zeros(num_src + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_src), out=offsets[1:])
    targets = dst[order].astype(np.int32)
    offsets.setflags(write=False)
    targets.setflags(write=False)
    return Csr(offsets=offsets, targets=targets, num_dst=num_dst)


@dataclass(frozen=True)
class HeteroGraph:
    num_papers: int
    num_authors: int
    num_institutions: int
    num_classes: int
    forward: dict
    reverse: dict
    paper_features: np.ndarray  # f32 [P, d_raw]
    paper_years: np.ndarray  # int32 [P]
    paper_labels: np.ndarray  # int32 [P], -1 = unlabelled
    fusion_map: np.ndarray  # int64 [P], raw id -> canonical id

    def count(self, ntype: NodeType) -> int:
        return (self.num_papers, self.num_authors, self.num_institutions)[int(ntype)]

    @property
    def feature_dim(self) -> int:
        return self.paper_features.shape[1]


def make_heterograph(edges: dict, num_papers: int, num_authors: int, num_institutions: int,
                     features: np.ndarray, years: np.ndarray, labels: np.ndarray,
                     num_classes: int, fusion_map: np.ndarray | None = None) -> HeteroGraph:
    """Assemble the immutable graph; builds forward and reverse CSRs."""
    features = np.array(features, dtype=np.float32, order="C")
    years = np.array(years, dtype=np.int32)
    labels = np.array(labels, dtype=np.int32)
    if features.shape[0] != num_papers:
        raise InputError(f"feature rows ({features.shape[0]}) != paper count ({num_papers})")
    if years.shape != (num_papers,) or labels.shape != (num_papers,):
        raise InputError("years/labels must have one entry per paper")
    lab = labels[labels >= 0]
    if lab.size and lab.max() >= num_classes:
        raise InputError(f"label {lab.max()} outside [0, {num_classes})")
    counts = {NodeType.PAPER: num_papers, NodeType.AUTHOR: num_authors,
              NodeType.INSTITUTION: num_institutions}
    fwd, rev = {}, {}
    for et in EdgeType:
        pairs = _as_pairs(edges.get(et, []))
        s, d = et.signature
        fwd[et] = build_csr(pairs, counts[s], counts[d])
        rev[et] = build_csr(pairs[:, ::-1], counts[d], counts[s])
    if fusion_map is None:
        fusion_map = np.arange(num_papers, dtype=np.int64)
    else:
        fusion_map = np.array(fusion_map, dtype=np.int64)
    for arr in (features, years, labels, fusion_map):
        arr.setflags(write=False)
    return HeteroGraph(num_papers=num_papers, num_authors=num_authors,
                       num_institutions=num_institutions, num_classes=num_classes,
                       forward=fwd, reverse=rev, paper_features=features,
                       paper_years=years, paper_labels=labels, fusion_map=fusion_map)


# ---------------------------------------------------------------------------
# duplicate fusion

def fusion_map_from_features(features: np.ndarray) -> np.ndarray:
    """Map each paper to the lowest id sharing its exact feature bytes."""
    arr = np.ascontiguousarray(features)
    seen: dict[bytes, int] = {}
    out = np.empty(arr.shape[0], dtype=np.int64)
    for i in range(arr.shape[0]):
        key = arr[i].tobytes()
        out[i] = seen.setdefault(key, i)
    return out


def fuse_duplicates(features: np.ndarray, edges: dict, num_authors: int, num_institutions: int,
                    years: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[np.ndarray, HeteroGraph]:
    """Union the adjacency of papers with bitwise-identical feature rows.

    All edges of a duplicate group are redirected onto its canonical
    (lowest-id) member and deduplicated; non-canonical members keep their
    rows but end up isolated. Years and labels stay per-node (consumers
    read them through the canonical id); conflicting group metadata is
    logged.
    """
    num_papers = features.shape[0]
    fmap = fusion_map_from_features(features)

    years = np.asarray(years)
    labels = np.asarray(labels)
    dup = np.flatnonzero(fmap != np.arange(num_papers))
    conflicts = sum(
        1 for i in dup
        if years[i] != years[fmap[i]] or labels[i] != labels[fmap[i]]
    )
    if conflicts:
        log.warning("fuse_duplicates: %d duplicate papers disagree with their canonical year/label", conflicts)

    fused = {}
    for et in EdgeType:
        pairs = _as_pairs(edges.get(et, []))
        if pairs.size:
            pairs = pairs.copy()
            if et == EdgeType.CITES:
                pairs[:, 0] = fmap[pairs[:, 0]]
                pairs[:, 1] = fmap[pairs[:, 1]]
            elif et == EdgeType.WRITES:
                pairs[:, 1] = fmap[pairs[:, 1]]
            pairs = np.unique(pairs, axis=0)
        fused[et] = pairs

    graph = make_heterograph(fused, num_papers, num_authors, num_institutions,
                             features, years, labels, num_classes, fusion_map=fmap)
    return fmap, graph


# ---------------------------------------------------------------------------
# synthetic citation heterograph

def synth_mag(num_papers: int, num_authors: int, num_institutions: int,
              num_classes: int, feature_dim: int, seed: int, *,
              p_in: float = 0.9, cites_per_paper: float = 5.0,
              papers_per_author: int = 3, labelled_fraction: float = 0.5,
              feature_noise: float = 1.0, duplicate_pairs: int = 0) -> HeteroGraph:
    """Community-structured stand-in for a large citation heterograph.

    Papers belong to one of ``num_classes`` communities; citations stay
    inside the community with probability ``p_in``. Features are the
    community centroid plus Gaussian noise, years are uniform on
    [2010, 2020], and a ``labelled_fraction`` of papers carry their
    community as label (the year-based temporal split decides which of
    those are visible during training).
    """
    if min(num_papers, num_authors, num_institutions) < 1 or num_classes < 1:
        raise InputError("all node counts must be >= 1 and num_classes >= 1")
    rng = substream(seed, "synth-mag")
    P, C = num_papers, num_classes

    communities = rng.integers(0, C, P)
    comm_order = np.argsort(communities, kind="stable")
    comm_counts = np.bincount(communities, minlength=C)
    comm_offsets = np.concatenate([[0], np.cumsum(comm_counts)])

    n_edges = int(round(P * cites_per_paper))
    src = rng.integers(0, P, n_edges)
    c = communities[src]
    intra = rng.random(n_edges) < p_in
    other_total = P - comm_counts[c]
    intra = intra | (other_total == 0)
    pos_intra = rng.integers(0, comm_counts[c])
    pos_inter = rng.integers(0, np.maximum(other_total, 1))
    sorted_idx = np.where(
        intra,
        comm_offsets[c] + pos_intra,
        pos_inter + (pos_inter >= comm_offsets[c]) * comm_counts[c],
    )
    dst = comm_order[sorted_idx]
    keep = src != dst
    cites = np.stack([src[keep], dst[keep]], axis=1)

    authors = np.repeat(np.arange(num_authors, dtype=np.int64), papers_per_author)
    written = rng.integers(0, P, authors.size)
    writes = np.unique(np.stack([authors, written], axis=1), axis=0)

    inst = rng.integers(0, num_institutions, num_authors)
    second = np.flatnonzero(rng.random(num_authors) < 0.3)
    inst2 = rng.integers(0, num_institutions, second.size)
    affiliated = np.unique(np.concatenate([
        np.stack([np.arange(num_authors, dtype=np.int64), inst], axis=1),
        np.stack([second, inst2], axis=1),
    ]), axis=0)

    centroids = rng.normal(0.0, 1.0, (C, feature_dim))
    features = (centroids[communities] + feature_noise * rng.normal(size=(P, feature_dim))).astype(np.float32)

    years = rng.integers(2010, 2021, P).astype(np.int32)
    labelled = rng.random(P) < labelled_fraction
    labels = np.where(labelled, communities, -1).astype(np.int32)

    if duplicate_pairs:
        perm = rng.permutation(P)
        for k in range(min(duplicate_pairs, P // 2)):
            a, b = perm[2 * k], perm[2 * k + 1]
            lo, hi = (a, b) if a < b else (b, a)
            features[hi] = features[lo]

    edges = {EdgeType.CITES: cites, EdgeType.WRITES: writes, EdgeType.AFFILIATED_WITH: affiliated}
    return make_heterograph(edges, P, num_authors, num_institutions,
                            features, years, labels, num_classes)


def paper_splits(graph: HeteroGraph) -> dict:
    """Temporal split of labelled papers: train <= 2018, valid 2019, test 2020."""
    labelled = graph.paper_labels >= 0
    canonical = graph.fusion_map == np.arange(graph.num_papers)
    usable = labelled & canonical
    years = graph.paper_years
    return {
        "train": np.flatnonzero(usable & (years <= 2018)),
        "valid": np.flatnonzero(usable & (years == 2019)),
        "test": np.flatnonzero(usable & (years == 2020)),
    }


# ---------------------------------------------------------------------------
# on-disk form

_EDGE_FILES = {
    EdgeType.CITES: "edges_cites.tsv",
    EdgeType.WRITES: "edges_writes.tsv",
    EdgeType.AFFILIATED_WITH: "edges_affiliated.tsv",
}


def save_graph(dirpath: str | Path, graph: HeteroGraph) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_papers": graph.num_papers,
        "num_authors": graph.num_authors,
        "num_institutions": graph.num_institutions,
        "num_classes": graph.num_classes,
    }
    pfgm.atomic_write_text(dirpath / "meta.tsv",
                           "".join(f"{k}\t{v}\n" for k, v in meta.items()))
    rows = []
    for i in range(graph.num_papers):
        label = graph.paper_labels[i]
        rows.append(f"{i}\t{graph.paper_years[i]}\t{label if label >= 0 else 'NA'}\n")
    pfgm.atomic_write_text(dirpath / "nodes_paper.tsv", "".join(rows))
    for et, fname in _EDGE_FILES.items():
        pairs = graph.forward[et].expand()
        pfgm.atomic_write_text(dirpath / fname,
                               "".join(f"{s}\t{d}\n" for s, d in pairs))
    pfgm.write_matrix(dirpath / "features_paper.pfgm", graph.paper_features)


def load_graph(dirpath: str | Path) -> HeteroGraph:
    dirpath = Path(dirpath)
    meta_path = dirpath / "meta.tsv"
    if not meta_path.exists():
        raise InputError(f"missing graph metadata: {meta_path}")
    meta = {}
    for line in meta_path.read_text().splitlines():
        k, _, v = line.partition("\t")
        meta[k] = int(v)

    years, labels = [], []
    for ln, line in enumerate(Path(dirpath / "nodes_paper.tsv").read_text().splitlines()):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"nodes_paper.tsv line {ln + 1}: expected 3 fields, got {len(parts)}")
        years.append(int(parts[1]))
        labels.append(-1 if parts[2] == "NA" else int(parts[2]))

    edges = {}
    for et, fname in _EDGE_FILES.items():
        pairs = []
        text = Path(dirpath / fname).read_text()
        for ln, line in enumerate(text.splitlines()):
            s, _, d = line.partition("\t")
            try:
                pairs.append((int(s), int(d)))
            except ValueError:
                raise ParseError(f"{fname} line {ln + 1}: malformed edge {line!r}")
        edges[et] = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    features = pfgm.read_matrix(dirpath / "features_paper.pfgm")
    return make_heterograph(edges, meta["num_papers"], meta["num_authors"],
                            meta["num_institutions"], features,
                            np.asarray(years), np.asarray(labels), meta["num_classes"])
