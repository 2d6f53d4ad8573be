"""Optimisation and the two training loops.

Everything random flows from one seed through named substreams, so a rerun
with the same configuration writes byte-identical metric files.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, InputError
from .featurize import (PcaModel, build_feature_tables, default_pca_dim, eval_visibility,
                        featurize_patch, fit_pca, node_feature_width, train_visibility)
from .hetgraph import HeteroGraph, paper_splits
from .molgraph import (ELEMENTS, NUM_BOND_ORDERS, Molecule, mol_features)
from .objectives import (BgrlState, DenoiseTargets, NoisyNodesConfig, ViewConfig, bgrl_loss,
                         corrupt_molecule, denoise_losses, make_views)
from .pfgm import load_params, save_params
from .processors import (GraphBatch, MolModelConfig, MolRegressor, NodeClassifier,
                         NodeModelConfig, pack_graphs)
from .rng import substream
from .sampler import Patch, SamplingPlan, sample_patch

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# optimisers

@dataclass
class OptimConfig:
    family: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    eps: float = 1e-8

    @classmethod
    def mag_default(cls) -> "OptimConfig":
        return cls(family="adamw", beta1=0.9, beta2=0.999, weight_decay=1e-5)

    @classmethod
    def pcqm_default(cls) -> "OptimConfig":
        return cls(family="adam", beta1=0.9, beta2=0.95, weight_decay=0.0)


class Adam:
    """Adam with bias correction; AdamW applies decoupled decay first."""

    def __init__(self, params: dict, cfg: OptimConfig):
        if cfg.family not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimiser family {cfg.family!r}")
        self.cfg = cfg
        self.params = params
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            elif np.isnan(g).any():
                raise RuntimeError(f"NaN gradient for parameter {name!r}")
            if cfg.family == "adamw" and cfg.weight_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# learning-rate schedule

@dataclass
class ScheduleConfig:
    initial_lr: float = 0.0
    peak_lr: float = 0.01
    warmup_steps: int = 50_000
    total_steps: int = 500_000
    floor: float = 0.0

    @classmethod
    def mag_default(cls) -> "ScheduleConfig":
        return cls(initial_lr=0.0, peak_lr=0.01, warmup_steps=50_000, total_steps=500_000)

    @classmethod
    def pcqm_default(cls) -> "ScheduleConfig":
        return cls(initial_lr=1e-5, peak_lr=1e-4, warmup_steps=50_000, total_steps=500_000)


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear warmup to the peak, cosine decay to the floor, then flat."""
    if step < 0:
        raise InputError(f"step must be >= 0, got {step}")
    if step < sched.warmup_steps:
        frac = step / sched.warmup_steps
        return sched.initial_lr + (sched.peak_lr - sched.initial_lr) * frac
    if step >= sched.total_steps:
        return sched.floor
    span = max(sched.total_steps - sched.warmup_steps, 1)
    tau = (step - sched.warmup_steps) / span
    return sched.floor + (sched.peak_lr - sched.floor) * 0.5 * (1.0 + math.cos(math.pi * tau))


# ---------------------------------------------------------------------------
# dynamic batching

@dataclass
class BatchCaps:
    max_nodes: int = 84_000
    max_edges: int = 185_000
    max_graphs: int = 256

    @classmethod
    def mag_default(cls) -> "BatchCaps":
        return cls(max_nodes=84_000, max_edges=185_000, max_graphs=256)

    @classmethod
    def pcqm_default(cls) -> "BatchCaps":
        return cls(max_nodes=1_024, max_edges=2_560, max_graphs=64)


def dynamic_batch(items, caps: BatchCaps, size_of):
    """Greedy fill in arrival order; yields lists of items.

    Adding an item that would push nodes, edges or the graph count past a
    cap closes the batch; items too large to ever fit are logged and
    skipped.
    """
    batch: list = []
    nodes = edges = 0
    for item in items:
        n, e = size_of(item)
        if n > caps.max_nodes or e > caps.max_edges or caps.max_graphs < 1:
            log.warning("dynamic_batch: item of size (%d nodes, %d edges) exceeds caps, skipped", n, e)
            continue
        if batch and (nodes + n > caps.max_nodes or edges + e > caps.max_edges
                      or len(batch) + 1 > caps.max_graphs):
            yield batch
            batch, nodes, edges = [], 0, 0
        batch.append(item)
        nodes += n
        edges += e
    if batch:
        yield batch


# ---------------------------------------------------------------------------
# parameter EMA and early stopping

class ParamEma:
    """Exponential moving average of a parameter dict, for evaluation."""

    def __init__(self, params: dict, decay: float):
        if not 0 <= decay < 1:
            raise InputError(f"EMA decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.shadow = {k: v.data.astype(np.float64) for k, v in params.items()}

    def update(self, params: dict) -> None:
        d = self.decay
        for k, v in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * v.data

    def tensors(self) -> dict:
        return {k: Tensor(v.astype(np.float32), requires_grad=False) for k, v in self.shadow.items()}

    def snapshot(self) -> dict:
        return {k: v.astype(np.float32) for k, v in self.shadow.items()}


def early_stop(history, patience: int, mode: str = "max") -> tuple[bool, int]:
    """(should_stop, best_index); ties keep the earlier evaluation."""
    if not len(history):
        raise InputError("early_stop needs a non-empty history")
    if mode not in ("min", "max"):
        raise InputError(f"mode must be min or max, got {mode!r}")
    values = [(-v if mode == "min" else v) for v in history]
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return (len(values) - 1 - best) >= patience, best


# ---------------------------------------------------------------------------
# run configs and the key=value config format

@dataclass
class NodeTrainConfig:
    steps: int = 500_000
    latent: int = 256
    hidden: int = 512
    enc_layers: int = 2
    mlp_layers: int = 2
    t_steps: int = 4
    bidirectional: bool = True
    residual: bool = False
    dropout: float = 0.3
    drop_edge: float = 0.25
    pca_dim: int = 0  # 0 -> min(129, d_raw)
    label_feature: bool = True
    bgrl_weight: float = 1.0
    unlabelled_ratio: int = 10
    bgrl_decay: float = 0.999
    symmetrize: bool = False
    view_feature_dropout: float = 0.4
    view_drop_edge: float = 0.2
    eval_ema_decay: float = 0.999
    eval_every: int = 1000
    eval_centers: int = 200
    eval_patches: int = 1
    patience: int = 0  # 0 disables early stopping
    workers: int = 1
    plan: SamplingPlan = field(default_factory=SamplingPlan)
    caps: BatchCaps = field(default_factory=BatchCaps.mag_default)
    optim: OptimConfig = field(default_factory=OptimConfig.mag_default)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig.mag_default)


@dataclass
class MolTrainConfig:
    steps: int = 500_000
    latent: int = 512
    hidden: int = 512
    mlp_layers: int = 3
    t_steps: int = 32
    residual: bool = False
    dropout: float = 0.1
    drop_edge: float = 0.1
    with_positions: bool = True
    noise_p: float = 0.05
    noise_sigma: float = 0.05
    node_loss_weight: float = 1.0
    edge_loss_weight: float = 1.0
    position_loss_weight: float = 1.0
    eval_ema_decay: float = 0.9999
    eval_every: int = 1000
    patience: int = 0
    eval_molecules: int = 256
    workers: int = 1
    caps: BatchCaps = field(default_factory=BatchCaps.pcqm_default)
    optim: OptimConfig = field(default_factory=OptimConfig.pcqm_default)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig.pcqm_default)


def desk_node_config() -> NodeTrainConfig:
    """A configuration sized for single-core synthetic runs."""
    cfg = NodeTrainConfig(
        steps=2000, latent=32, hidden=64, t_steps=4, dropout=0.1, drop_edge=0.1,
        pca_dim=16, bgrl_weight=0.0, unlabelled_ratio=0, eval_ema_decay=0.98,
        eval_every=250, eval_centers=200, eval_patches=1,
        plan=SamplingPlan(d1_cited=8, d1_citing=8, d1_authors=4,
                          d2_cited=4, d2_citing=4, d2_authors=2,
                          d2_papers=4, d2_institutions=2),
        caps=BatchCaps(max_nodes=2_000, max_edges=6_000, max_graphs=16),
        schedule=ScheduleConfig(initial_lr=0.0, peak_lr=2e-3, warmup_steps=100, total_steps=2000),
    )
    return cfg


def desk_mol_config() -> MolTrainConfig:
    return MolTrainConfig(
        steps=3000, latent=48, hidden=96, mlp_layers=2, t_steps=8,
        dropout=0.05, drop_edge=0.05, eval_ema_decay=0.99,
        eval_every=250, eval_molecules=200,
        caps=BatchCaps(max_nodes=512, max_edges=1_280, max_graphs=32),
        schedule=ScheduleConfig(initial_lr=1e-4, peak_lr=1e-3, warmup_steps=150, total_steps=3000),
    )


def parse_config_text(text: str) -> dict:
    out = {}
    for ln, line in enumerate(text.splitlines()):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {ln + 1} is not 'key = value': {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _set_path(obj, parts: list, value):
    """Set a dotted attribute path, rebuilding frozen dataclasses."""
    attr = parts[0]
    new_value = value if len(parts) == 1 else _set_path(getattr(obj, attr), parts[1:], value)
    try:
        setattr(obj, attr, new_value)
        return obj
    except dataclasses.FrozenInstanceError:
        return dataclasses.replace(obj, **{attr: new_value})


def apply_overrides(cfg, overrides: dict):
    """Apply dotted ``key = value`` overrides onto a config dataclass."""
    for key, raw in overrides.items():
        parts = key.split(".")
        current = cfg
        for attr in parts:
            if not hasattr(current, attr):
                raise ConfigError(f"unknown config key: {key}")
            current = getattr(current, attr)
        cfg = _set_path(cfg, parts, _coerce(current, raw))
    return cfg


# ---------------------------------------------------------------------------
# metric files

METRICS_HEADER = "step,split,loss,metric,lr"


class MetricsWriter:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.rows: list[str] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(METRICS_HEADER + "\n")

    def add(self, step: int, split: str, loss: float, metric: float, lr: float) -> None:
        row = f"{step},{split},{loss:.6f},{metric:.6f},{lr:.8f}"
        self.rows.append(row)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(row + "\n")


# ---------------------------------------------------------------------------
# node-classification training

@dataclass
class NodeItem:
    index: int
    center: int
    label: int  # -1 for BGRL-only patches
    patch: Patch
    node_x: np.ndarray
    edge_x: np.ndarray


def _pack_node_items(items: list) -> GraphBatch:
    return pack_graphs([(it.node_x, it.edge_x, it.patch.edge_src, it.patch.edge_dst, 0)
                        for it in items])


def train_node_step(model: NodeClassifier, bgrl: BgrlState | None, optim: Adam,
                    items: list, cfg: NodeTrainConfig, lr: float,
                    view_rng, dropout_rng) -> dict:
    """One optimisation step over a mixed labelled/unlabelled patch batch."""
    labelled = [it for it in items if it.label >= 0]
    unlabelled = [it for it in items if it.label < 0]
    if not labelled and not unlabelled:
        raise InputError("training batch holds neither labelled nor unlabelled patches")
    view_cfg = ViewConfig(cfg.view_feature_dropout, cfg.view_drop_edge)
    metrics = {"n_labelled": len(labelled), "n_unlabelled": len(unlabelled)}
    with Tape() as tape:
        total = None
        if labelled:
            batch = _pack_node_items(labelled)
            logits = model.logits(batch, rng=dropout_rng, train=True)
            labels = np.array([it.label for it in labelled], dtype=np.int64)
            ce = ad.softmax_cross_entropy(logits, labels)
            metrics["ce"] = float(ce.data)
            metrics["batch_acc"] = float((logits.data.argmax(axis=1) == labels).mean())
            total = ce
        if unlabelled and bgrl is not None and cfg.bgrl_weight > 0:
            views_a, views_b = [], []
            for it in unlabelled:
                va, vb = make_views(it.node_x, it.edge_x, it.patch.edge_src,
                                    it.patch.edge_dst, 0, view_cfg, view_rng)
                views_a.append(va)
                views_b.append(vb)
            pack_a = pack_graphs([(v.node_x, v.edge_x, v.edge_src, v.edge_dst, 0) for v in views_a])
            pack_b = pack_graphs([(v.node_x, v.edge_x, v.edge_src, v.edge_dst, 0) for v in views_b])
            h_online = model.central_latents(pack_a, rng=dropout_rng, train=True)
            z = bgrl.project(h_online)
            h_target = model.central_latents(pack_b, params=bgrl.target_params, train=False)
            term = bgrl_loss(z, h_target)
            if cfg.symmetrize:
                h_online_b = model.central_latents(pack_b, rng=dropout_rng, train=True)
                z_b = bgrl.project(h_online_b)
                h_target_a = model.central_latents(pack_a, params=bgrl.target_params, train=False)
                term = ad.multiply(ad.add(term, bgrl_loss(z_b, h_target_a)), 0.5)
            metrics["bgrl"] = float(term.data)
            weighted = ad.multiply(term, cfg.bgrl_weight)
            total = weighted if total is None else ad.add(total, weighted)
        metrics["loss"] = float(total.data)
    grads = tape.backward(total)
    optim.step(grads, lr)
    if bgrl is not None:
        bgrl.update_target(model)
    return metrics


@dataclass
class NodeRunResult:
    model: NodeClassifier
    model_cfg: NodeModelConfig
    cfg: NodeTrainConfig
    pca: PcaModel
    plan: SamplingPlan
    ema_params: dict  # final EMA weights (name -> f32 array)
    best_params: dict  # EMA weights at the best evaluation
    best_step: int
    best_metric: float
    history: list
    metrics: MetricsWriter
    num_classes: int


def _node_item_stream(graph: HeteroGraph, cfg: NodeTrainConfig, seed: int,
                      train_ids: np.ndarray, visible_train: np.ndarray, tables):
    """Infinite deterministic stream of featurised patches.

    Patch randomness is keyed by the item index, so the stream does not
    depend on batching or consumption order.
    """
    canonical = graph.fusion_map == np.arange(graph.num_papers)
    in_train = np.zeros(graph.num_papers, dtype=bool)
    in_train[train_ids] = True
    unlabelled_pool = np.flatnonzero(canonical & ~in_train)
    centers_rng = substream(seed, "centers")
    want_bgrl = cfg.bgrl_weight > 0 and cfg.unlabelled_ratio > 0 and len(unlabelled_pool)
    cycle = cfg.unlabelled_ratio + 1 if want_bgrl else 1
    idx = 0
    while True:
        unlab = want_bgrl and (idx % cycle) < cfg.unlabelled_ratio
        pool = unlabelled_pool if unlab else train_ids
        center = int(pool[centers_rng.integers(0, len(pool))])
        patch = sample_patch(graph, center, cfg.plan, substream(seed, "sampler", idx))
        node_x, edge_x = featurize_patch(patch, graph, tables, visible_train, graph.num_classes)
        label = -1 if unlab else int(graph.paper_labels[center])
        yield NodeItem(index=idx, center=center, label=label, patch=patch,
                       node_x=node_x, edge_x=edge_x)
        idx += 1


def evaluate_node_model(model: NodeClassifier, params: dict, graph: HeteroGraph,
                        tables, plan: SamplingPlan, centers: np.ndarray,
                        visible: np.ndarray, seed: int, n_patches: int = 1,
                        stream_name: str = "eval") -> tuple[float, float, np.ndarray]:
    """(accuracy, mean CE, probability matrix) on the given centers."""
    probs = np.zeros((len(centers), graph.num_classes))
    for i, center in enumerate(centers):
        rng = substream(seed, stream_name, int(center))
        acc = np.zeros(graph.num_classes)
        for _ in range(n_patches):
            patch = sample_patch(graph, int(center), plan, rng)
            node_x, edge_x = featurize_patch(patch, graph, tables, visible, graph.num_classes)
            batch = pack_graphs([(node_x, edge_x, patch.edge_src, patch.edge_dst, 0)])
            logits = model.logits(batch, params=params).data[0].astype(np.float64)
            e = np.exp(logits - logits.max())
            acc += e / e.sum()
        probs[i] = acc / n_patches
    labels = graph.paper_labels[centers]
    accuracy = float((probs.argmax(axis=1) == labels).mean())
    ce = float(-np.log(np.maximum(probs[np.arange(len(centers)), labels], 1e-12)).mean())
    return accuracy, ce, probs


def train_node(graph: HeteroGraph, cfg: NodeTrainConfig, seed: int, *,
               metrics_path=None, train_ids=None, val_ids=None,
               visible_train=None) -> NodeRunResult:
    """Train the patch classifier (optionally with the BGRL auxiliary)."""
    if cfg.workers > 1:
        log.warning("producer pool is single-worker at desk scale; proceeding with workers=1")
    splits = paper_splits(graph)
    train_ids = splits["train"] if train_ids is None else np.asarray(train_ids)
    val_ids = splits["valid"] if val_ids is None else np.asarray(val_ids)
    if not len(train_ids):
        raise InputError("no labelled training papers (labels with year <= 2018)")

    if visible_train is None:
        visible_train = train_visibility(graph)
    if not cfg.label_feature:
        visible_train = np.zeros(graph.num_papers, dtype=bool)

    pca_dim = cfg.pca_dim or default_pca_dim(graph.feature_dim)
    pca = fit_pca(graph.paper_features, pca_dim)
    tables = build_feature_tables(graph, pca)

    model_cfg = NodeModelConfig(
        node_in=node_feature_width(pca_dim, graph.num_classes),
        num_classes=graph.num_classes, latent=cfg.latent, hidden=cfg.hidden,
        enc_layers=cfg.enc_layers, mlp_layers=cfg.mlp_layers, steps=cfg.t_steps,
        bidirectional=cfg.bidirectional, residual=cfg.residual,
        dropout=cfg.dropout, drop_edge=cfg.drop_edge,
    )
    model = NodeClassifier(model_cfg, substream(seed, "init"))
    bgrl = None
    optim_params = dict(model.params)
    if cfg.bgrl_weight > 0:
        bgrl = BgrlState.from_model(model, substream(seed, "init", "bgrl"), cfg.bgrl_decay)
        optim_params.update(bgrl.projector_params)
    optim = Adam(optim_params, cfg.optim)
    ema = ParamEma(model.params, cfg.eval_ema_decay)

    eval_centers = val_ids[: cfg.eval_centers]
    eval_visible = eval_visibility(graph) if cfg.label_feature else np.zeros(graph.num_papers, dtype=bool)

    stream = _node_item_stream(graph, cfg, seed, train_ids, visible_train, tables)
    batches = dynamic_batch(stream, cfg.caps, lambda it: (it.patch.num_nodes, it.patch.num_edges))

    writer = MetricsWriter(metrics_path)
    history: list[float] = []
    best_metric, best_step, best_params = -np.inf, 0, ema.snapshot()
    run_loss, run_metric, run_count = 0.0, 0.0, 0

    for step in range(cfg.steps):
        lr = lr_at(step, cfg.schedule)
        items = next(batches)
        metrics = train_node_step(model, bgrl, optim, items, cfg, lr,
                                  substream(seed, "views", step),
                                  substream(seed, "dropout", step))
        ema.update(model.params)
        run_loss += metrics["loss"]
        run_metric += metrics.get("batch_acc", 0.0)
        run_count += 1

        last = step == cfg.steps - 1
        if (step + 1) % cfg.eval_every == 0 or last:
            writer.add(step + 1, "train", run_loss / run_count, run_metric / run_count, lr)
            run_loss = run_metric = 0.0
            run_count = 0
            if len(eval_centers):
                acc, ce, _ = evaluate_node_model(model, ema.tensors(), graph, tables,
                                                 cfg.plan, eval_centers, eval_visible,
                                                 seed, cfg.eval_patches)
                writer.add(step + 1, "valid", ce, acc, lr)
                history.append(acc)
                if acc > best_metric:
                    best_metric, best_step, best_params = acc, step + 1, ema.snapshot()
                if cfg.patience and early_stop(history, cfg.patience, "max")[0]:
                    log.info("early stop at step %d (best %.4f at %d)", step + 1, best_metric, best_step)
                    break

    if not len(eval_centers):
        best_params = ema.snapshot()
    return NodeRunResult(model=model, model_cfg=model_cfg, cfg=cfg, pca=pca, plan=cfg.plan,
                         ema_params=ema.snapshot(), best_params=best_params,
                         best_step=best_step, best_metric=best_metric,
                         history=history, metrics=writer, num_classes=graph.num_classes)


# ---------------------------------------------------------------------------
# molecular-regression training

@dataclass
class MolItem:
    index: int
    mol: Molecule  # corrupted inputs
    gap: float
    feats: object  # MolFeatures of the corrupted molecule
    targets: object  # DenoiseTargets (clean)


def train_mol_step(model: MolRegressor, optim: Adam, ema: ParamEma, items: list,
                   cfg: MolTrainConfig, lr: float, dropout_rng) -> dict:
    """One optimisation step: gap MAE plus weighted denoising losses."""
    if not items:
        raise InputError("empty molecule batch")
    if cfg.with_positions:
        for it in items:
            if it.mol.coords is None:
                raise InputError(f"conformer-mode model fed molecule {it.index} without coordinates")
    batch = pack_graphs([(it.feats.node_x, it.feats.edge_x, it.feats.edge_src, it.feats.edge_dst)
                         for it in items])
    gap_targets = np.array([[it.gap] for it in items], dtype=np.float32)
    atom_t = np.concatenate([it.targets.atom_types for it in items])
    bond_t = np.concatenate([it.targets.bond_orders for it in items])
    pos_t = None
    if cfg.with_positions:
        pos_t = np.concatenate([it.targets.positions for it in items], axis=0)
    merged = DenoiseTargets(atom_types=atom_t, bond_orders=bond_t, positions=pos_t)

    with Tape() as tape:
        out = model.forward(batch, rng=dropout_rng, train=True)
        mae = ad.mean_absolute_error(out.gap, ad.constant(gap_targets))
        losses = denoise_losses(out.atom_logits, out.bond_logits, out.positions, merged)
        total = mae
        if cfg.node_loss_weight:
            total = ad.add(total, ad.multiply(losses["node_ce"], cfg.node_loss_weight))
        if cfg.edge_loss_weight:
            total = ad.add(total, ad.multiply(losses["edge_ce"], cfg.edge_loss_weight))
        if cfg.position_loss_weight and "position_mae" in losses:
            total = ad.add(total, ad.multiply(losses["position_mae"], cfg.position_loss_weight))
    grads = tape.backward(total)
    optim.step(grads, lr)
    ema.update(model.params)
    node_acc = float((out.atom_logits.data.argmax(axis=1) == atom_t).mean())
    edge_acc = float((out.bond_logits.data.argmax(axis=1) == bond_t).mean()) if bond_t.size else 1.0
    return {"loss": float(total.data), "mae": float(mae.data),
            "node_ce": float(losses["node_ce"].data), "edge_ce": float(losses["edge_ce"].data),
            "position_mae": float(losses["position_mae"].data) if "position_mae" in losses else 0.0,
            "node_acc": node_acc, "edge_acc": edge_acc}


def mol_split(num: int) -> dict:
    """80:10:10 by molecule id, mirroring an id-based dataset split."""
    ids = np.arange(num)
    return {"train": ids[ids % 10 < 8], "valid": ids[ids % 10 == 8], "test": ids[ids % 10 == 9]}


def predict_gaps(model: MolRegressor, params: dict, mols: list, with_positions: bool) -> np.ndarray:
    """Raw (un-clipped) gap predictions for clean molecules."""
    preds = np.empty(len(mols))
    for i, mol in enumerate(mols):
        use = mol if with_positions else (mol.replace(coords=None) if mol.coords is not None else mol)
        if with_positions and use.coords is None:
            raise InputError(f"conformer-mode model fed molecule {i} without coordinates")
        f = mol_features(use)
        batch = pack_graphs([(f.node_x, f.edge_x, f.edge_src, f.edge_dst)])
        preds[i] = float(model.forward(batch, params=params).gap.data[0, 0])
    return preds


@dataclass
class MolRunResult:
    model: MolRegressor
    model_cfg: MolModelConfig
    cfg: MolTrainConfig
    ema_params: dict
    best_params: dict
    best_step: int
    best_metric: float
    history: list
    metrics: MetricsWriter


def train_mol(mols: list, cfg: MolTrainConfig, seed: int, *,
              metrics_path=None, train_ids=None, val_ids=None) -> MolRunResult:
    """Train the GN regressor with Noisy Nodes on a molecule list."""
    if cfg.workers > 1:
        log.warning("producer pool is single-worker at desk scale; proceeding with workers=1")
    splits = mol_split(len(mols))
    train_ids = splits["train"] if train_ids is None else np.asarray(train_ids)
    val_ids = splits["valid"] if val_ids is None else np.asarray(val_ids)

    if cfg.with_positions:
        usable = np.array([mols[i].coords is not None for i in train_ids])
        dropped = int((~usable).sum())
        if dropped:
            log.info("conformer mode: %d training molecules without coordinates skipped", dropped)
        train_ids = train_ids[usable]
        val_usable = np.array([mols[i].coords is not None for i in val_ids])
        val_ids = val_ids[val_usable]
    if not len(train_ids):
        raise InputError("no usable training molecules")
    for i in train_ids:
        if mols[i].target is None:
            raise InputError(f"training molecule {i} has no regression target")

    sample = mols[int(train_ids[0])]
    sample_feats = mol_features(sample if cfg.with_positions else sample.replace(coords=None))
    model_cfg = MolModelConfig(
        node_in=sample_feats.node_x.shape[1], edge_in=sample_feats.edge_x.shape[1],
        atom_vocab=len(ELEMENTS), bond_vocab=NUM_BOND_ORDERS,
        latent=cfg.latent, hidden=cfg.hidden, mlp_layers=cfg.mlp_layers, steps=cfg.t_steps,
        residual=cfg.residual, dropout=cfg.dropout, drop_edge=cfg.drop_edge,
        with_positions=cfg.with_positions,
    )
    model = MolRegressor(model_cfg, substream(seed, "init"))
    optim = Adam(model.params, cfg.optim)
    ema = ParamEma(model.params, cfg.eval_ema_decay)
    noisy = NoisyNodesConfig(type_replace_p=cfg.noise_p, sigma=cfg.noise_sigma,
                             node_weight=cfg.node_loss_weight, edge_weight=cfg.edge_loss_weight,
                             position_weight=cfg.position_loss_weight)

    def stream():
        centers_rng = substream(seed, "mol-centers")
        idx = 0
        while True:
            mi = int(train_ids[centers_rng.integers(0, len(train_ids))])
            mol = mols[mi]
            if not cfg.with_positions and mol.coords is not None:
                mol = mol.replace(coords=None)
            corrupted, targets = corrupt_molecule(mol, noisy, substream(seed, "noisy", idx))
            yield MolItem(index=mi, mol=corrupted, gap=float(mol.target),
                          feats=mol_features(corrupted), targets=targets)
            idx += 1

    batches = dynamic_batch(stream(), cfg.caps,
                            lambda it: (it.mol.num_atoms, it.mol.num_bonds))

    val_mols = [mols[int(i)] for i in val_ids[: cfg.eval_molecules]]
    val_targets = np.array([m.target for m in val_mols]) if val_mols else np.empty(0)

    writer = MetricsWriter(metrics_path)
    history: list[float] = []
    best_metric, best_step, best_params = np.inf, 0, ema.snapshot()
    run_loss, run_mae, run_count = 0.0, 0.0, 0

    for step in range(cfg.steps):
        lr = lr_at(step, cfg.schedule)
        items = next(batches)
        metrics = train_mol_step(model, optim, ema, items, cfg, lr,
                                 substream(seed, "dropout", step))
        run_loss += metrics["loss"]
        run_mae += metrics["mae"]
        run_count += 1
        last = step == cfg.steps - 1
        if (step + 1) % cfg.eval_every == 0 or last:
            writer.add(step + 1, "train", run_loss / run_count, run_mae / run_count, lr)
            run_loss = run_mae = 0.0
            run_count = 0
            if val_mols:
                preds = np.clip(predict_gaps(model, ema.tensors(), val_mols, cfg.with_positions), 0.0, 20.0)
                val_mae = float(np.abs(preds - val_targets).mean())
                writer.add(step + 1, "valid", val_mae, val_mae, lr)
                history.append(val_mae)
                if val_mae < best_metric:
                    best_metric, best_step, best_params = val_mae, step + 1, ema.snapshot()
                if cfg.patience and early_stop(history, cfg.patience, "min")[0]:
                    log.info("early stop at step %d (best %.4f at %d)", step + 1, best_metric, best_step)
                    break

    if not val_mols:
        best_params = ema.snapshot()
    return MolRunResult(model=model, model_cfg=model_cfg, cfg=cfg,
                        ema_params=ema.snapshot(), best_params=best_params,
                        best_step=best_step, best_metric=best_metric,
                        history=history, metrics=writer)


# ---------------------------------------------------------------------------
# k-fold train-on-validation

def kfold_members(num_val: int, k: int, seeds: int) -> list:
    return [(fold, s) for fold in range(k) for s in range(seeds)]


def kfold_train_node(graph: HeteroGraph, cfg: NodeTrainConfig, k: int, seeds: int,
                     seed: int, out_dir: Path | None = None) -> list:
    """Train k*seeds members, each holding out one validation fold."""
    from .evalens import kfold_split  # local import; evalens depends on train for checkpoints
    from .rng import derive_seed

    splits = paper_splits(graph)
    val_ids = splits["valid"]
    assignment = kfold_split(val_ids, k, seed)
    results = []
    for fold, s in kfold_members(len(val_ids), k, seeds):
        held = val_ids[assignment.fold_index == fold]
        absorbed = val_ids[assignment.fold_index != fold]
        member_train = np.concatenate([splits["train"], absorbed])
        visible = train_visibility(graph).copy()
        visible[absorbed] = graph.paper_labels[absorbed] >= 0
        member_seed = derive_seed(seed, "fold", fold, "member", s)
        result = train_node(graph, cfg, member_seed, train_ids=member_train,
                            val_ids=held, visible_train=visible)
        results.append(((fold, s), held, result))
        if out_dir is not None:
            save_node_checkpoint(Path(out_dir) / f"fold{fold}_seed{s}", result)
    return results


# ---------------------------------------------------------------------------
# checkpoints

def save_node_checkpoint(dirpath: str | Path, result: NodeRunResult, use_best: bool = True) -> None:
    dirpath = Path(dirpath)
    params = result.best_params if use_best else result.ema_params
    meta = {"mode": "node", "steps": result.model_cfg.steps,
            "latent": result.model_cfg.latent, "hidden": result.model_cfg.hidden,
            "enc_layers": result.model_cfg.enc_layers, "mlp_layers": result.model_cfg.mlp_layers,
            "node_in": result.model_cfg.node_in, "num_classes": result.model_cfg.num_classes,
            "bidirectional": int(result.model_cfg.bidirectional),
            "residual": int(result.model_cfg.residual)}
    save_params(dirpath, params, meta)
    result.pca.save(dirpath / "pca")
    result.plan.save(dirpath / "plan.txt")


def load_node_checkpoint(dirpath: str | Path):
    dirpath = Path(dirpath)
    params, meta = load_params(dirpath)
    if meta.get("mode") != "node":
        raise InputError(f"{dirpath} is not a node checkpoint")
    cfg = NodeModelConfig(
        node_in=int(meta["node_in"]), num_classes=int(meta["num_classes"]),
        latent=int(meta["latent"]), hidden=int(meta["hidden"]),
        enc_layers=int(meta["enc_layers"]), mlp_layers=int(meta["mlp_layers"]),
        steps=int(meta["steps"]), bidirectional=bool(int(meta["bidirectional"])),
        residual=bool(int(meta["residual"])),
    )
    model = NodeClassifier(cfg, substream(0, "init"))
    model.params = {k: Tensor(v, requires_grad=False) for k, v in params.items()}
    pca = PcaModel.load(dirpath / "pca")
    plan = SamplingPlan.load(dirpath / "plan.txt")
    return model, pca, plan


def save_mol_checkpoint(dirpath: str | Path, result: MolRunResult, use_best: bool = True) -> None:
    dirpath = Path(dirpath)
    params = result.best_params if use_best else result.ema_params
    mc = result.model_cfg
    meta = {"mode": "mol", "steps": mc.steps, "latent": mc.latent, "hidden": mc.hidden,
            "mlp_layers": mc.mlp_layers, "node_in": mc.node_in, "edge_in": mc.edge_in,
            "atom_vocab": mc.atom_vocab, "bond_vocab": mc.bond_vocab,
            "with_positions": int(mc.with_positions), "residual": int(mc.residual)}
    save_params(dirpath, params, meta)


def load_mol_checkpoint(dirpath: str | Path) -> MolRegressor:
    params, meta = load_params(Path(dirpath))
    if meta.get("mode") != "mol":
        raise InputError(f"{dirpath} is not a molecule checkpoint")
    cfg = MolModelConfig(
        node_in=int(meta["node_in"]), edge_in=int(meta["edge_in"]),
        atom_vocab=int(meta["atom_vocab"]), bond_vocab=int(meta["bond_vocab"]),
        latent=int(meta["latent"]), hidden=int(meta["hidden"]),
        mlp_layers=int(meta["mlp_layers"]), steps=int(meta["steps"]),
        with_positions=bool(int(meta["with_positions"])), residual=bool(int(meta["residual"])),
    )
    model = MolRegressor(cfg, substream(0, "init"))
    model.params = {k: Tensor(v, requires_grad=False) for k, v in params.items()}
    return model
