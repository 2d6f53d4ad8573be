"""Self-supervision and denoising objectives.

BGRL: two corrupted views of a patch, an online network with a projector
regressing the central-node embedding produced by an EMA target network,
scored by negative scaled cosine similarity. Noisy Nodes: uniformly
resampled atom/bond types (and jittered coordinates) that the decoder
heads must restore.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError
from .molgraph import ELEMENTS, NUM_BOND_ORDERS, Molecule
from .processors import MlpSpec, NodeClassifier, mlp_apply, mlp_init

# ---------------------------------------------------------------------------
# BGRL

@dataclass(frozen=True)
class ViewConfig:
    feature_dropout: float = 0.4
    drop_edge: float = 0.2

    def __post_init__(self):
        if not (0 <= self.feature_dropout < 1 and 0 <= self.drop_edge <= 1):
            raise InputError("view corruption probabilities must be in [0, 1)")


@dataclass
class PatchView:
    node_x: np.ndarray
    edge_x: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray


def _one_view(node_x, edge_x, edge_src, edge_dst, central: int,
              cfg: ViewConfig, rng: np.random.Generator) -> PatchView:
    p = cfg.feature_dropout
    if p > 0:
        mask = (rng.random(node_x.shape) >= p).astype(node_x.dtype) / (1.0 - p)
        mask[central, :] = 1.0  # the bootstrap anchor keeps its features
        node_x = node_x * mask
    else:
        node_x = node_x.copy()
    if cfg.drop_edge > 0 and len(edge_src):
        keep = rng.random(len(edge_src)) >= cfg.drop_edge
        edge_x, edge_src, edge_dst = edge_x[keep], edge_src[keep], edge_dst[keep]
    return PatchView(node_x=node_x, edge_x=edge_x,
                     edge_src=np.asarray(edge_src), edge_dst=np.asarray(edge_dst))


def make_views(node_x: np.ndarray, edge_x: np.ndarray, edge_src, edge_dst,
               central: int, cfg: ViewConfig, rng: np.random.Generator) -> tuple[PatchView, PatchView]:
    """Two independently corrupted views of one patch."""
    a = _one_view(node_x, edge_x, edge_src, edge_dst, central, cfg, rng)
    b = _one_view(node_x, edge_x, edge_src, edge_dst, central, cfg, rng)
    return a, b


def bgrl_loss(z: Tensor, target: Tensor) -> Tensor:
    """Mean of -2 * cosine(projector output, target embedding).

    Gradients flow through ``z`` only; pass the target embedding as a
    non-differentiable tensor (target networks never receive gradients).
    """
    cos = ad.cosine_similarity(z, target)
    return ad.reduce_mean(ad.multiply(cos, -2.0))


def ema_update(target_params: dict, online_params: dict, decay: float) -> None:
    """target <- decay * target + (1 - decay) * online, elementwise."""
    if not 0 <= decay < 1:
        raise InputError(f"EMA decay must be in [0, 1), got {decay}")
    for name, tgt in target_params.items():
        src = online_params[name]
        if tgt.data.shape != src.data.shape:
            raise InputError(f"EMA shape mismatch for {name}: {tgt.data.shape} vs {src.data.shape}")
        tgt.data *= decay
        tgt.data += (1.0 - decay) * src.data


@dataclass
class BgrlState:
    """Target-network parameters, projector parameters, and the decay."""

    target_params: dict
    projector_params: dict
    projector_spec: MlpSpec
    decay: float = 0.999

    @classmethod
    def from_model(cls, model: NodeClassifier, rng, decay: float = 0.999) -> "BgrlState":
        target = {
            name: Tensor(model.params[name].data.copy(), requires_grad=False)
            for name in model.encoder_param_names()
        }
        spec = MlpSpec(2, model.cfg.hidden, model.cfg.latent)
        projector: dict[str, Tensor] = {}
        mlp_init(projector, "proj", model.cfg.latent, spec, rng, model.dtype)
        return cls(target_params=target, projector_params=projector,
                   projector_spec=spec, decay=decay)

    def project(self, central_latents: Tensor) -> Tensor:
        return mlp_apply(self.projector_params, "proj", central_latents, self.projector_spec)

    def update_target(self, model: NodeClassifier) -> None:
        ema_update(self.target_params, model.params, self.decay)


# ---------------------------------------------------------------------------
# Noisy Nodes

@dataclass(frozen=True)
class NoisyNodesConfig:
    type_replace_p: float = 0.05
    sigma: float = 0.05  # coordinate jitter, conformer length units
    node_weight: float = 1.0
    edge_weight: float = 1.0
    position_weight: float = 1.0

    def __post_init__(self):
        if not 0 <= self.type_replace_p <= 1:
            raise InputError("type replacement probability must be in [0, 1]")
        if self.sigma < 0:
            raise InputError("position noise scale must be >= 0")


@dataclass
class DenoiseTargets:
    """Reconstruction targets; always describe the un-perturbed molecule."""

    atom_types: np.ndarray  # int64 [A]
    bond_orders: np.ndarray  # int64 [2B], per directed edge row
    positions: np.ndarray | None  # f32 [2B, 4]: displacement and distance


def corrupt_molecule(mol: Molecule, cfg: NoisyNodesConfig,
                     rng: np.random.Generator) -> tuple[Molecule, DenoiseTargets]:
    """Resample types uniformly (the draw may repeat the original) and
    jitter coordinates; topology is never altered."""
    a, nb = mol.num_atoms, mol.num_bonds
    p = cfg.type_replace_p

    elements = mol.elements.copy()
    if p > 0:
        hit = rng.random(a) < p
        draws = rng.integers(0, len(ELEMENTS), a)
        elements = np.where(hit, draws, elements).astype(np.int8)

    orders = mol.bond_order.copy()
    if p > 0 and nb:
        hit = rng.random(nb) < p
        draws = rng.integers(0, NUM_BOND_ORDERS, nb)
        orders = np.where(hit, draws, orders).astype(np.int8)

    coords = mol.coords
    if coords is not None and cfg.sigma > 0:
        coords = coords + rng.normal(0.0, cfg.sigma, coords.shape)

    positions = None
    if mol.coords is not None:
        src = np.concatenate([mol.bond_i, mol.bond_j]).astype(np.int64)
        dst = np.concatenate([mol.bond_j, mol.bond_i]).astype(np.int64)
        disp = (mol.coords[dst] - mol.coords[src]).astype(np.float32)
        positions = np.concatenate([disp, np.linalg.norm(disp, axis=1, keepdims=True)], axis=1)

    targets = DenoiseTargets(
        atom_types=mol.elements.astype(np.int64),
        bond_orders=np.concatenate([mol.bond_order, mol.bond_order]).astype(np.int64),
        positions=positions,
    )
    return mol.replace(elements=elements, bond_order=orders, coords=coords), targets


def denoise_losses(atom_logits: Tensor, bond_logits: Tensor, position_pred: Tensor | None,
                   targets: DenoiseTargets) -> dict:
    """Per-head reconstruction losses (means over atoms / bonds / rows)."""
    out = {"node_ce": ad.softmax_cross_entropy(atom_logits, targets.atom_types)}
    if targets.bond_orders.size:
        out["edge_ce"] = ad.softmax_cross_entropy(bond_logits, targets.bond_orders)
    else:
        out["edge_ce"] = ad.constant(np.zeros((), dtype=atom_logits.dtype))
    if targets.positions is not None and position_pred is not None and targets.positions.size:
        out["position_mae"] = ad.mean_absolute_error(position_pred, ad.constant(targets.positions))
    return out
