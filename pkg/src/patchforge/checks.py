"""Finite-difference verification of both model families.

Builds small float64 instances (a 4-layer MPNN over a 10-node patch and a
4-layer GN over a 6-atom molecule) and gradchecks every parameter.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .molgraph import ELEMENTS, NUM_BOND_ORDERS, mol_features, synth_mol_dataset
from .objectives import DenoiseTargets, denoise_losses
from .processors import (MolModelConfig, MolRegressor, NodeClassifier, NodeModelConfig,
                         pack_graphs)
from .rng import substream


def _jitter(params: dict, rng) -> None:
    # zero-init biases put relu pre-activations exactly on the kink, where
    # one-sided numeric derivatives disagree with the subgradient; check
    # at a generic point instead
    for p in params.values():
        p.data = p.data + 0.1 * rng.normal(size=p.data.shape)


def mpnn_gradcheck(seed: int = 0, width: int = 6, steps: int = 4) -> float:
    """Max relative gradient error of the node classifier on a 10-node patch."""
    rng = substream(seed, "gradcheck", "mpnn")
    cfg = NodeModelConfig(node_in=9, num_classes=3, edge_in=7, latent=width, hidden=width,
                          steps=steps, dropout=0.0, drop_edge=0.0)
    model = NodeClassifier(cfg, rng, dtype=np.float64)
    _jitter(model.params, rng)

    n = 10
    node_x = rng.normal(size=(n, cfg.node_in))
    n_edges = 16
    src = rng.integers(0, n, n_edges)
    dst = rng.integers(0, n, n_edges)
    edge_x = rng.normal(size=(n_edges, 7))
    batch = pack_graphs([(node_x, edge_x, src, dst, 0)])
    label = np.array([1])

    def loss():
        logits = model.logits(batch)
        return ad.softmax_cross_entropy(logits, label)

    params = list(model.params.values())
    return ad.gradcheck(loss, params)


def gn_gradcheck(seed: int = 0, width: int = 6, steps: int = 4) -> float:
    """Max relative gradient error of the regressor on a 6-atom molecule."""
    rng = substream(seed, "gradcheck", "gn")
    mol = synth_mol_dataset(1, (6, 6), 1.0, seed)[0]
    feats = mol_features(mol)
    cfg = MolModelConfig(node_in=feats.node_x.shape[1], edge_in=feats.edge_x.shape[1],
                         atom_vocab=len(ELEMENTS), bond_vocab=NUM_BOND_ORDERS,
                         latent=width, hidden=width, mlp_layers=2, steps=steps,
                         dropout=0.0, drop_edge=0.0, with_positions=True)
    model = MolRegressor(cfg, rng, dtype=np.float64)
    _jitter(model.params, rng)

    batch = pack_graphs([(feats.node_x.astype(np.float64), feats.edge_x.astype(np.float64),
                          feats.edge_src, feats.edge_dst)])
    # an O(1) stand-in target keeps the loss small, so finite-difference
    # roundoff stays below the relative-error floor
    gap_target = np.array([[1.0]])
    src = np.concatenate([mol.bond_i, mol.bond_j]).astype(np.int64)
    dst = np.concatenate([mol.bond_j, mol.bond_i]).astype(np.int64)
    disp = mol.coords[dst] - mol.coords[src]
    pos = np.concatenate([disp, np.linalg.norm(disp, axis=1, keepdims=True)], axis=1)
    targets = DenoiseTargets(
        atom_types=mol.elements.astype(np.int64),
        bond_orders=np.concatenate([mol.bond_order, mol.bond_order]).astype(np.int64),
        positions=pos.astype(np.float64),
    )

    def loss():
        out = model.forward(batch)
        mae = ad.mean_absolute_error(out.gap, ad.constant(gap_target))
        dn = denoise_losses(out.atom_logits, out.bond_logits, out.positions, targets)
        total = ad.add(mae, dn["node_ce"])
        total = ad.add(total, dn["edge_ce"])
        return ad.add(total, dn["position_mae"])

    params = list(model.params.values())
    return ad.gradcheck(loss, params)


def model_gradchecks(seed: int = 0) -> dict:
    return {"mpnn": mpnn_gradcheck(seed), "gn": gn_gradcheck(seed)}
