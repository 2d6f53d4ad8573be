"""Evaluation-time machinery and ensembling.

Multi-patch prediction averaging (probability space, EMA weights),
[0, 20] clipping for gap predictions, conformer/non-conformer fallback
routing, seeded k-fold splitting of the validation set, and arithmetic
mean ensembling. At evaluation the label-visibility mask covers training
plus validation labels; the query's own label can never leak because the
central row's label block is structurally zeroed and fused copies are
isolated nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EvaluationError, InputError
from .featurize import FeatureTables, featurize_patch
from .hetgraph import HeteroGraph
from .molgraph import Molecule, mol_features
from .processors import MolRegressor, NodeClassifier, pack_graphs
from .sampler import SamplingPlan, sample_patch

GAP_MIN_EV = 0.0
GAP_MAX_EV = 20.0


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def predict_node_averaged(model: NodeClassifier, params: dict, graph: HeteroGraph,
                          tables: FeatureTables, center: int, plan: SamplingPlan,
                          n_patches: int, rng: np.random.Generator,
                          visible_labels: np.ndarray, *,
                          average: str = "probs") -> np.ndarray:
    """Class probabilities averaged over freshly sampled patches.

    Pass the parameter-EMA weights as ``params``. ``average`` selects
    probability-space averaging (default) or logit-space averaging.
    """
    if n_patches < 1:
        raise InputError(f"n_patches must be >= 1, got {n_patches}")
    if average not in ("probs", "logits"):
        raise InputError(f"average must be 'probs' or 'logits', got {average!r}")
    acc = np.zeros(graph.num_classes)
    for _ in range(n_patches):
        patch = sample_patch(graph, center, plan, rng)
        node_x, edge_x = featurize_patch(patch, graph, tables, visible_labels, graph.num_classes)
        batch = pack_graphs([(node_x, edge_x, patch.edge_src, patch.edge_dst, 0)])
        logits = model.logits(batch, params=params).data[0].astype(np.float64)
        acc += _softmax(logits) if average == "probs" else logits
    acc /= n_patches
    return _softmax(acc) if average == "logits" else acc


def clip_gap(value, molecule_id=None):
    """Clip a gap prediction into [0, 20] eV; NaN is an error, not a pass."""
    arr = np.asarray(value, dtype=np.float64)
    if np.isnan(arr).any():
        which = molecule_id if molecule_id is not None else "<unknown>"
        raise EvaluationError(f"NaN gap prediction for molecule {which}")
    clipped = np.clip(arr, GAP_MIN_EV, GAP_MAX_EV)
    return float(clipped) if np.isscalar(value) or arr.ndim == 0 else clipped


@dataclass
class MolPredictor:
    """A regressor plus the (EMA) weights to run it with."""

    model: MolRegressor
    params: dict | None = None

    @property
    def with_positions(self) -> bool:
        return self.model.cfg.with_positions

    def predict(self, mol: Molecule) -> float:
        use = mol if self.with_positions else (mol.replace(coords=None) if mol.coords is not None else mol)
        if self.with_positions and use.coords is None:
            raise InputError("conformer model cannot score a molecule without coordinates")
        f = mol_features(use)
        batch = pack_graphs([(f.node_x, f.edge_x, f.edge_src, f.edge_dst)])
        params = self.params if self.params is not None else self.model.params
        return float(self.model.forward(batch, params=params).gap.data[0, 0])


def predict_with_fallback(conformer: MolPredictor, plain: MolPredictor,
                          mol: Molecule, molecule_id=None) -> float:
    """Conformer model when coordinates exist, otherwise the deep
    non-conformer model; the result is clipped either way."""
    raw = conformer.predict(mol) if mol.coords is not None else plain.predict(mol)
    return clip_gap(raw, molecule_id)


# ---------------------------------------------------------------------------
# k-fold splitting and ensembling

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    ids: np.ndarray
    fold_index: np.ndarray  # fold of ids[i]

    def fold_ids(self, fold: int) -> np.ndarray:
        return self.ids[self.fold_index == fold]


def kfold_split(ids, k: int, seed: int) -> FoldAssignment:
    """Random permutation, then contiguous chunks differing by <= 1."""
    ids = np.asarray(ids)
    if k < 2:
        raise InputError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise InputError(f"k={k} exceeds the {len(ids)} available ids")
    from .rng import substream

    perm = substream(seed, "kfold").permutation(len(ids))
    fold_index = np.empty(len(ids), dtype=np.int64)
    for fold, chunk in enumerate(np.array_split(perm, k)):
        fold_index[chunk] = fold
    return FoldAssignment(k=k, ids=ids, fold_index=fold_index)


def ensemble(member_predictions) -> np.ndarray:
    """Arithmetic mean over members.

    Regression members are [N] vectors; classification members are
    [N, C] probability matrices (mean keeps rows normalised). Clipping,
    when wanted, is applied after the mean.
    """
    arrs = [np.asarray(m, dtype=np.float64) for m in member_predictions]
    if not arrs:
        raise InputError("ensemble needs at least one member")
    shape = arrs[0].shape
    for i, a in enumerate(arrs):
        if a.shape != shape:
            raise InputError(f"member {i} shape {a.shape} does not match {shape}")
    return np.mean(arrs, axis=0)


# ---------------------------------------------------------------------------
# prediction files: id,prediction[,prob_0..prob_C]

def write_predictions(path: str | Path, ids, values, probs=None) -> None:
    from .pfgm import atomic_write_text

    lines = []
    for i, ident in enumerate(ids):
        row = f"{ident},{values[i]:.6f}"
        if probs is not None:
            row += "," + ",".join(f"{p:.6f}" for p in probs[i])
        lines.append(row + "\n")
    atomic_write_text(path, "".join(lines))


def read_predictions(path: str | Path):
    ids, values, probs = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split(",")
        if len(parts) < 2:
            raise InputError(f"{path}: malformed prediction row {line!r}")
        ids.append(int(parts[0]))
        values.append(float(parts[1]))
        if len(parts) > 2:
            probs.append([float(p) for p in parts[2:]])
    probs_arr = np.asarray(probs) if probs else None
    return np.asarray(ids), np.asarray(values), probs_arr
