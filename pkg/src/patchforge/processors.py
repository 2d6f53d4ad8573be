"""Encode-process-decode models: bidirectional MPNN and Graph Network.

Both families share the same skeleton: MLP encoders map raw node/edge
(/graph) features into a latent space, T unshared processor layers pass
messages, and MLP decoders read predictions off the final latents. All
parameters live in flat ``{name: Tensor}`` dicts so EMA copies, target
networks and checkpoints stay trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# ---------------------------------------------------------------------------
# MLPs

@dataclass(frozen=True)
class MlpSpec:
    layers: int
    hidden: int
    out: int


def mlp_init(params: dict, prefix: str, in_dim: int, spec: MlpSpec, rng, dtype=np.float32) -> None:
    """Create the parameters of one MLP under ``prefix``.

    Hidden layers are linear -> relu -> layer_norm; the final layer is
    linear. Weights are Glorot-uniform, biases zero.
    """
    dims = [in_dim] + [spec.hidden] * (spec.layers - 1) + [spec.out]
    for i in range(spec.layers):
        din, dout = dims[i], dims[i + 1]
        limit = np.sqrt(6.0 / (din + dout))
        params[f"{prefix}.w{i}"] = ad.param(rng.uniform(-limit, limit, (din, dout)), dtype=dtype)
        params[f"{prefix}.b{i}"] = ad.param(np.zeros(dout), dtype=dtype)
        if i < spec.layers - 1:
            params[f"{prefix}.g{i}"] = ad.param(np.ones(dout), dtype=dtype)
            params[f"{prefix}.beta{i}"] = ad.param(np.zeros(dout), dtype=dtype)


def mlp_apply(params: dict, prefix: str, x: Tensor, spec: MlpSpec) -> Tensor:
    h = x
    for i in range(spec.layers):
        h = ad.add(ad.matmul(h, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < spec.layers - 1:
            h = ad.relu(h)
            h = ad.layer_norm(h, params[f"{prefix}.g{i}"], params[f"{prefix}.beta{i}"])
    return h


# ---------------------------------------------------------------------------
# batched disjoint-union graphs

@dataclass
class GraphBatch:
    """Several graphs packed into one disjoint union."""

    node_x: np.ndarray
    edge_x: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray
    num_graphs: int
    centrals: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return self.node_x.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_src.shape[0]


def pack_graphs(items: list) -> GraphBatch:
    """Pack (node_x, edge_x, edge_src, edge_dst[, central]) tuples."""
    if not items:
        raise ValueError("cannot pack an empty list of graphs")
    node_blocks, edge_blocks, srcs, dsts = [], [], [], []
    node_graph, edge_graph, centrals = [], [], []
    offset = 0
    has_central = len(items[0]) > 4 and items[0][4] is not None
    for gi, item in enumerate(items):
        node_x, edge_x, esrc, edst = item[0], item[1], item[2], item[3]
        node_blocks.append(node_x)
        edge_blocks.append(edge_x)
        srcs.append(np.asarray(esrc, dtype=np.int64) + offset)
        dsts.append(np.asarray(edst, dtype=np.int64) + offset)
        node_graph.append(np.full(node_x.shape[0], gi, dtype=np.int64))
        edge_graph.append(np.full(edge_x.shape[0], gi, dtype=np.int64))
        if has_central:
            centrals.append(item[4] + offset)
        offset += node_x.shape[0]
    return GraphBatch(
        node_x=np.concatenate(node_blocks, axis=0),
        edge_x=np.concatenate(edge_blocks, axis=0),
        edge_src=np.concatenate(srcs),
        edge_dst=np.concatenate(dsts),
        node_graph=np.concatenate(node_graph),
        edge_graph=np.concatenate(edge_graph),
        num_graphs=len(items),
        centrals=np.asarray(centrals, dtype=np.int64) if has_central else None,
    )


# ---------------------------------------------------------------------------
# latent state and the two processor families

@dataclass
class LatentState:
    nodes: Tensor
    edges: Tensor
    graph: Tensor | None = None


def encode(params: dict, spec: MlpSpec, node_x, edge_x, graph_x=None) -> LatentState:
    """Map raw inputs into the latent space (one MLP per block)."""
    nodes = mlp_apply(params, "enc_node", ad.constant(node_x) if not isinstance(node_x, Tensor) else node_x, spec)
    edges = mlp_apply(params, "enc_edge", ad.constant(edge_x) if not isinstance(edge_x, Tensor) else edge_x, spec)
    graph = None
    if graph_x is not None:
        graph = mlp_apply(params, "enc_graph", ad.constant(graph_x) if not isinstance(graph_x, Tensor) else graph_x, spec)
    return LatentState(nodes=nodes, edges=edges, graph=graph)


def _masked(t: Tensor, keep: np.ndarray | None) -> Tensor:
    if keep is None:
        return t
    return ad.multiply(t, ad.constant(keep[:, None].astype(t.dtype)))


def mpnn_step(params: dict, prefix: str, spec: MlpSpec, nodes: Tensor, edge_h0: Tensor,
              edge_src: np.ndarray, edge_dst: np.ndarray, *,
              bidirectional: bool = True, edge_keep: np.ndarray | None = None) -> Tensor:
    """One message-passing layer; edge latents stay at their encoded value.

    Messages run along each directed edge (src = sampled neighbour,
    dst = the node that sampled it); every node update sees its own
    latent, the sum of incoming messages and, in bidirectional mode, the
    sum of the messages it sent.
    """
    n = nodes.shape[0]
    hu = ad.gather(nodes, edge_src)
    hv = ad.gather(nodes, edge_dst)
    msg = mlp_apply(params, f"{prefix}.psi", ad.concat([hu, hv, edge_h0], axis=1), spec)
    msg = _masked(msg, edge_keep)
    incoming = ad.segment_sum(msg, edge_dst, n)
    if bidirectional:
        outgoing = ad.segment_sum(msg, edge_src, n)
    else:
        outgoing = ad.constant(np.zeros((n, spec.out), dtype=nodes.dtype))
    return mlp_apply(params, f"{prefix}.phi", ad.concat([nodes, incoming, outgoing], axis=1), spec)


def gn_step(params: dict, prefix: str, spec: MlpSpec, state: LatentState,
            edge_src: np.ndarray, edge_dst: np.ndarray,
            node_graph: np.ndarray, edge_graph: np.ndarray, num_graphs: int, *,
            edge_keep: np.ndarray | None = None) -> LatentState:
    """One Graph Network block: edge, then node, then graph update."""
    h_g_edge = ad.gather(state.graph, edge_graph)
    e_new = mlp_apply(
        params, f"{prefix}.psi",
        ad.concat([ad.gather(state.nodes, edge_src), ad.gather(state.nodes, edge_dst), state.edges, h_g_edge], axis=1),
        spec,
    )
    e_agg = _masked(e_new, edge_keep)
    n = state.nodes.shape[0]
    incoming = ad.segment_sum(e_agg, edge_dst, n)
    h_g_node = ad.gather(state.graph, node_graph)
    n_new = mlp_apply(params, f"{prefix}.phi", ad.concat([state.nodes, incoming, h_g_node], axis=1), spec)
    node_sum = ad.segment_sum(n_new, node_graph, num_graphs)
    edge_sum = ad.segment_sum(e_agg, edge_graph, num_graphs)
    g_new = mlp_apply(params, f"{prefix}.rho", ad.concat([node_sum, edge_sum, state.graph], axis=1), spec)
    return LatentState(nodes=n_new, edges=e_new, graph=g_new)


# ---------------------------------------------------------------------------
# node classifier (patch model)

@dataclass
class NodeModelConfig:
    node_in: int
    num_classes: int
    edge_in: int = 7
    latent: int = 256
    hidden: int = 512
    enc_layers: int = 2
    mlp_layers: int = 2
    steps: int = 4
    bidirectional: bool = True
    residual: bool = False
    dropout: float = 0.3
    drop_edge: float = 0.25

    @property
    def enc_spec(self) -> MlpSpec:
        return MlpSpec(self.enc_layers, self.hidden, self.latent)

    @property
    def mp_spec(self) -> MlpSpec:
        return MlpSpec(self.mlp_layers, self.hidden, self.latent)

    @property
    def dec_spec(self) -> MlpSpec:
        return MlpSpec(self.enc_layers, self.hidden, self.num_classes)


class NodeClassifier:
    """Patch-level classifier: encoders, T MPNN layers, central decoder."""

    def __init__(self, cfg: NodeModelConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        params: dict[str, Tensor] = {}
        mlp_init(params, "enc_node", cfg.node_in, cfg.enc_spec, rng, dtype)
        mlp_init(params, "enc_edge", cfg.edge_in, cfg.enc_spec, rng, dtype)
        for t in range(cfg.steps):
            mlp_init(params, f"step{t}.psi", 3 * cfg.latent, cfg.mp_spec, rng, dtype)
            mlp_init(params, f"step{t}.phi", 3 * cfg.latent, cfg.mp_spec, rng, dtype)
        mlp_init(params, "dec", cfg.latent, cfg.dec_spec, rng, dtype)
        self.params = params

    def encoder_param_names(self) -> list[str]:
        """Names covered by the BGRL target network (everything but the decoder)."""
        return [k for k in self.params if not k.startswith("dec.")]

    def central_latents(self, batch: GraphBatch, params: dict | None = None,
                        rng=None, train: bool = False) -> Tensor:
        cfg = self.cfg
        p = self.params if params is None else params
        state = encode(p, cfg.enc_spec,
                       batch.node_x.astype(self.dtype, copy=False),
                       batch.edge_x.astype(self.dtype, copy=False))
        h = state.nodes
        for t in range(cfg.steps):
            keep = None
            if train and rng is not None:
                if cfg.dropout > 0:
                    h = ad.dropout(h, cfg.dropout, rng)
                if cfg.drop_edge > 0:
                    keep = rng.random(batch.num_edges) >= cfg.drop_edge
            h_new = mpnn_step(p, f"step{t}", cfg.mp_spec, h, state.edges,
                              batch.edge_src, batch.edge_dst,
                              bidirectional=cfg.bidirectional, edge_keep=keep)
            h = ad.add(h, h_new) if cfg.residual else h_new
        return ad.gather(h, batch.centrals)

    def decode(self, central: Tensor, params: dict | None = None) -> Tensor:
        p = self.params if params is None else params
        return mlp_apply(p, "dec", central, self.cfg.dec_spec)

    def logits(self, batch: GraphBatch, params: dict | None = None,
               rng=None, train: bool = False) -> Tensor:
        return self.decode(self.central_latents(batch, params, rng, train), params)


# ---------------------------------------------------------------------------
# molecular regressor (graph network)

@dataclass
class MolModelConfig:
    node_in: int
    edge_in: int
    atom_vocab: int
    bond_vocab: int
    latent: int = 512
    hidden: int = 512
    mlp_layers: int = 3
    steps: int = 32
    residual: bool = False
    dropout: float = 0.1
    drop_edge: float = 0.1
    with_positions: bool = False
    graph_in: int = 1  # the zero-initialised graph input

    @property
    def enc_spec(self) -> MlpSpec:
        return MlpSpec(self.mlp_layers, self.hidden, self.latent)

    @property
    def mp_spec(self) -> MlpSpec:
        return MlpSpec(self.mlp_layers, self.hidden, self.latent)


@dataclass
class MolOutputs:
    gap: Tensor  # [G, 1]
    atom_logits: Tensor
    bond_logits: Tensor
    positions: Tensor | None
    state: LatentState


class MolRegressor:
    """Deep GN regressor with denoising decoder heads."""

    def __init__(self, cfg: MolModelConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        params: dict[str, Tensor] = {}
        mlp_init(params, "enc_node", cfg.node_in, cfg.enc_spec, rng, dtype)
        mlp_init(params, "enc_edge", cfg.edge_in, cfg.enc_spec, rng, dtype)
        mlp_init(params, "enc_graph", cfg.graph_in, cfg.enc_spec, rng, dtype)
        for t in range(cfg.steps):
            mlp_init(params, f"step{t}.psi", 4 * cfg.latent, cfg.mp_spec, rng, dtype)
            mlp_init(params, f"step{t}.phi", 3 * cfg.latent, cfg.mp_spec, rng, dtype)
            mlp_init(params, f"step{t}.rho", 3 * cfg.latent, cfg.mp_spec, rng, dtype)
        mlp_init(params, "dec_graph", cfg.latent, MlpSpec(cfg.mlp_layers, cfg.hidden, 1), rng, dtype)
        mlp_init(params, "dec_node", cfg.latent, MlpSpec(cfg.mlp_layers, cfg.hidden, cfg.atom_vocab), rng, dtype)
        mlp_init(params, "dec_edge", cfg.latent, MlpSpec(cfg.mlp_layers, cfg.hidden, cfg.bond_vocab), rng, dtype)
        if cfg.with_positions:
            mlp_init(params, "dec_pos", cfg.latent, MlpSpec(cfg.mlp_layers, cfg.hidden, 4), rng, dtype)
        self.params = params

    def forward(self, batch: GraphBatch, params: dict | None = None,
                rng=None, train: bool = False) -> MolOutputs:
        cfg = self.cfg
        p = self.params if params is None else params
        graph_x = np.zeros((batch.num_graphs, cfg.graph_in), dtype=self.dtype)
        state = encode(p, cfg.enc_spec,
                       batch.node_x.astype(self.dtype, copy=False),
                       batch.edge_x.astype(self.dtype, copy=False),
                       graph_x)
        for t in range(cfg.steps):
            keep = None
            nodes_in = state.nodes
            if train and rng is not None:
                if cfg.dropout > 0:
                    nodes_in = ad.dropout(nodes_in, cfg.dropout, rng)
                if cfg.drop_edge > 0:
                    keep = rng.random(batch.num_edges) >= cfg.drop_edge
            stepped = gn_step(p, f"step{t}", cfg.mp_spec,
                              LatentState(nodes_in, state.edges, state.graph),
                              batch.edge_src, batch.edge_dst,
                              batch.node_graph, batch.edge_graph, batch.num_graphs,
                              edge_keep=keep)
            if cfg.residual:
                stepped = LatentState(
                    nodes=ad.add(state.nodes, stepped.nodes),
                    edges=ad.add(state.edges, stepped.edges),
                    graph=ad.add(state.graph, stepped.graph),
                )
            state = stepped
        gap = mlp_apply(p, "dec_graph", state.graph, MlpSpec(cfg.mlp_layers, cfg.hidden, 1))
        atom_logits = mlp_apply(p, "dec_node", state.nodes, MlpSpec(cfg.mlp_layers, cfg.hidden, cfg.atom_vocab))
        bond_logits = mlp_apply(p, "dec_edge", state.edges, MlpSpec(cfg.mlp_layers, cfg.hidden, cfg.bond_vocab))
        positions = None
        if cfg.with_positions:
            positions = mlp_apply(p, "dec_pos", state.edges, MlpSpec(cfg.mlp_layers, cfg.hidden, 4))
        return MolOutputs(gap=gap, atom_logits=atom_logits, bond_logits=bond_logits,
                          positions=positions, state=state)


def clone_params(params: dict, requires_grad: bool = False) -> dict:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}
