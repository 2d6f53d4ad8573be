"""Feature preparation for patches.

PCA compression of raw paper features, averaged features for authors and
institutions, and per-patch input matrices: PCA block, node-type one-hot,
depth one-hot, 11-bit publication year, label-as-feature block with a
presence bit, and the 7-bit edge code.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels, pfgm
from .errors import InputError
from .hetgraph import EdgeType, HeteroGraph
from .sampler import Patch

YEAR_ORIGIN = 1950
YEAR_BITS = 11  # clamp(year - 1950, 0, 2047), least-significant bit first

# sampled-relation bit within the 7-bit edge feature (bits 3..6 = cited
# paper / citing paper / author / institution). Papers sampled by an
# author reuse the first paper slot; the sampler-type bits disambiguate.
_REL_BIT = {
    kernels.REL_CITED: 3,
    kernels.REL_CITING: 4,
    kernels.REL_AUTHOR_OF: 5,
    kernels.REL_PAPER_OF: 3,
    kernels.REL_INST_OF: 6,
}


# ---------------------------------------------------------------------------
# PCA

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # f64 [d_raw]
    components: np.ndarray  # f64 [d_raw, d_out], orthonormal columns
    ratios: np.ndarray  # f64 [d_out], non-increasing, each in [0, 1]

    @property
    def d_raw(self) -> int:
        return self.components.shape[0]

    @property
    def d_out(self) -> int:
        return self.components.shape[1]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.components

    def save(self, dirpath: str | Path) -> None:
        dirpath = Path(dirpath)
        dirpath.mkdir(parents=True, exist_ok=True)
        pfgm.write_matrix(dirpath / "mean.pfgm", self.mean)
        pfgm.write_matrix(dirpath / "components.pfgm", self.components)
        pfgm.write_matrix(dirpath / "ratios.pfgm", self.ratios)
        pfgm.atomic_write_text(dirpath / "manifest.txt",
                               f"pca d_raw={self.d_raw} d_out={self.d_out}\n")

    @classmethod
    def load(cls, dirpath: str | Path) -> "PcaModel":
        dirpath = Path(dirpath)
        mean = pfgm.read_matrix(dirpath / "mean.pfgm")[0].astype(np.float64)
        components = pfgm.read_matrix(dirpath / "components.pfgm").astype(np.float64)
        ratios = pfgm.read_matrix(dirpath / "ratios.pfgm")[0].astype(np.float64)
        return cls(mean=mean, components=components, ratios=ratios)


def default_pca_dim(d_raw: int) -> int:
    return min(129, d_raw)


def fit_pca(x: np.ndarray, d_out: int) -> PcaModel:
    """Exact PCA through a Jacobi eigendecomposition of the covariance.

    Components carry a deterministic sign: the largest-magnitude entry of
    each component is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError(f"PCA needs at least 2 rows, got shape {x.shape}")
    rows, cols = x.shape
    if not 1 <= d_out <= min(rows - 1, cols):
        raise InputError(f"d_out={d_out} outside [1, min(rows-1={rows - 1}, cols={cols})]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (rows - 1)
    eigvals, eigvecs = kernels.sym_eigh_desc(cov)
    eigvals = np.maximum(eigvals, 0.0)
    components = eigvecs[:, :d_out].copy()
    for j in range(d_out):
        k = int(np.argmax(np.abs(components[:, j])))
        if components[k, j] < 0:
            components[:, j] = -components[:, j]
    total = eigvals.sum()
    ratios = eigvals[:d_out] / total if total > 0 else np.zeros(d_out)
    return PcaModel(mean=mean, components=components, ratios=ratios)


# ---------------------------------------------------------------------------
# per-type feature tables

@dataclass(frozen=True)
class FeatureTables:
    paper: np.ndarray  # f32 [P, m]
    author: np.ndarray  # f32 [A, m]
    institution: np.ndarray  # f32 [I, m]

    @property
    def dim(self) -> int:
        return self.paper.shape[1]


def derive_entity_features(graph: HeteroGraph, paper_feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Author rows average their written papers; institutions average
    their affiliated authors. Empty neighbourhoods give zero rows."""
    paper_feats = np.ascontiguousarray(paper_feats, dtype=np.float32)
    if paper_feats.shape[0] != graph.num_papers:
        raise InputError("paper feature rows must cover every paper")

    def seg_mean(csr, table, n):
        counts = np.diff(csr.offsets)
        seg = np.repeat(np.arange(n, dtype=np.int64), counts)
        sums = kernels.segment_sum_rows(np.ascontiguousarray(table[csr.targets]), seg, n)
        return (sums / np.maximum(counts, 1)[:, None]).astype(np.float32)

    author = seg_mean(graph.forward[EdgeType.WRITES], paper_feats, graph.num_authors)
    institution = seg_mean(graph.reverse[EdgeType.AFFILIATED_WITH], author, graph.num_institutions)
    return author, institution


def build_feature_tables(graph: HeteroGraph, pca: PcaModel) -> FeatureTables:
    paper = pca.transform(graph.paper_features).astype(np.float32)
    author, institution = derive_entity_features(graph, paper)
    return FeatureTables(paper=paper, author=author, institution=institution)


# ---------------------------------------------------------------------------
# label visibility

def train_visibility(graph: HeteroGraph) -> np.ndarray:
    """Labels usable as input features during training (the <= 2018 split)."""
    return (graph.paper_labels >= 0) & (graph.paper_years <= 2018)


def eval_visibility(graph: HeteroGraph) -> np.ndarray:
    """Training plus validation labels; the query itself stays masked
    structurally (central row, and fused copies are isolated)."""
    return (graph.paper_labels >= 0) & (graph.paper_years <= 2019)


# ---------------------------------------------------------------------------
# patch assembly

def node_feature_width(pca_dim: int, num_classes: int) -> int:
    return pca_dim + 3 + 3 + YEAR_BITS + num_classes + 1


def year_bits(year: int) -> np.ndarray:
    """Unsigned 11-bit binary of clamp(year - 1950, 0, 2047), LSB first."""
    value = min(max(int(year) - YEAR_ORIGIN, 0), (1 << YEAR_BITS) - 1)
    return (value >> np.arange(YEAR_BITS)) & 1


def _year_bits_rows(years: np.ndarray) -> np.ndarray:
    vals = np.clip(years.astype(np.int64) - YEAR_ORIGIN, 0, (1 << YEAR_BITS) - 1)
    return ((vals[:, None] >> np.arange(YEAR_BITS)) & 1).astype(np.float32)


def featurize_patch(patch: Patch, graph: HeteroGraph, tables: FeatureTables,
                    visible_labels: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Build the node and edge input matrices for one patch.

    ``visible_labels`` is a boolean mask over papers whose stored label
    may appear as an input feature. The central node's label block stays
    zero no matter what, including when the central id re-enters at
    depth 2 (it is merged into patch index 0).
    """
    m = tables.dim
    n = patch.num_nodes
    width = node_feature_width(m, num_classes)
    out = np.zeros((n, width), dtype=np.float32)
    ids = patch.node_ids
    types = patch.node_types

    is_paper = types == kernels.PAPER
    is_author = types == kernels.AUTHOR
    is_inst = types == kernels.INSTITUTION
    out[is_paper, :m] = tables.paper[ids[is_paper]]
    out[is_author, :m] = tables.author[ids[is_author]]
    out[is_inst, :m] = tables.institution[ids[is_inst]]

    rows = np.arange(n)
    out[rows, m + types] = 1.0
    out[rows, m + 3 + patch.node_depths] = 1.0
    out[is_paper, m + 6 : m + 6 + YEAR_BITS] = _year_bits_rows(graph.paper_years[ids[is_paper]])

    visible_labels = np.asarray(visible_labels, dtype=bool)
    vis = is_paper.copy()
    vis[patch.central] = False  # never the query's own label
    vis[vis] = visible_labels[ids[vis]] & (graph.paper_labels[ids[vis]] >= 0)
    lab_base = m + 6 + YEAR_BITS
    out[vis, lab_base + graph.paper_labels[ids[vis]]] = 1.0
    out[vis, lab_base + num_classes] = 1.0

    edge = np.zeros((patch.num_edges, 7), dtype=np.float32)
    if patch.num_edges:
        erows = np.arange(patch.num_edges)
        edge[erows, types[patch.edge_dst]] = 1.0
        rel_bits = np.array([_REL_BIT[kernels.REL_CITED], _REL_BIT[kernels.REL_CITING],
                             _REL_BIT[kernels.REL_AUTHOR_OF], _REL_BIT[kernels.REL_PAPER_OF],
                             _REL_BIT[kernels.REL_INST_OF]], dtype=np.int64)
        edge[erows, rel_bits[patch.edge_rel]] = 1.0
    return out, edge
