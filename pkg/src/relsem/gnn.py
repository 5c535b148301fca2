"""Graph encoders and the inner-product decoder of a graph autoencoder.

Six encoders share one interface: ``encoder.forward(X, graph, training, rng)``
returns node embeddings ``Z`` as an autodiff :class:`~relsem.autodiff.Tensor`.
Message passing always runs on an undirected :class:`MessageGraph`.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

ENCODER_KINDS = ("gcn", "sage", "gin", "gat", "agnn", "graphunet")


class MessageGraph:
    """Undirected simple graph on nodes ``0..n-1`` with cached operators."""

    def __init__(self, n: int, edges):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValueError("edge endpoint out of range")
        edges = edges[edges[:, 0] != edges[:, 1]]
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        und = np.unique(np.stack([lo, hi], axis=1), axis=0) if len(edges) else np.empty((0, 2), np.int64)
        self.n = int(n)
        self.edges = und
        self.src = np.concatenate([und[:, 0], und[:, 1]])
        self.dst = np.concatenate([und[:, 1], und[:, 0]])

    @property
    def m(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.src))
        return sp.csr_matrix((data, (self.dst, self.src)), shape=(self.n, self.n))

    @cached_property
    def degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n)

    @cached_property
    def norm_adj(self) -> sp.csr_matrix:
        return normalize_adjacency(self)

    @cached_property
    def mean_adj(self) -> sp.csr_matrix:
        deg = self.degree.astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return (sp.diags(inv) @ self.adjacency).tocsr()

    @cached_property
    def self_loop_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) over N(v) plus v itself, for attention layers."""
        loops = np.arange(self.n)
        return np.concatenate([self.src, loops]), np.concatenate([self.dst, loops])

    def subgraph(self, nodes: np.ndarray) -> "MessageGraph":
        """Induced subgraph; node ``i`` of the result is ``nodes[i]``."""
        pos = np.full(self.n, -1, dtype=np.int64)
        pos[nodes] = np.arange(len(nodes))
        keep = (pos[self.edges[:, 0]] >= 0) & (pos[self.edges[:, 1]] >= 0)
        return MessageGraph(len(nodes), pos[self.edges[keep]])

    def permuted(self, perm: np.ndarray) -> "MessageGraph":
        """Relabel so that new node ``i`` is old node ``perm[i]``."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return MessageGraph(self.n, inv[self.edges])


def as_message_graph(graph) -> MessageGraph:
    if isinstance(graph, MessageGraph):
        return graph
    return MessageGraph(graph.n, graph.undirected_edges)


def normalize_adjacency(graph) -> sp.csr_matrix:
    """Symmetric normalization ``D^-1/2 (A + I) D^-1/2`` with D the degree of A + I."""
    g = as_message_graph(graph)
    a = g.adjacency + sp.identity(g.n, format="csr")
    d = np.asarray(a.sum(axis=1)).ravel()
    s = sp.diags(1.0 / np.sqrt(d))
    return (s @ a @ s).tocsr()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def _zeros(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _linear(H, W, b=None):
    out = ad.matmul(H, W)
    return out if b is None else ad.add(out, b)


# ---------------------------------------------------------------------------
# layers


def gcn_layer(H, norm_adj, W, b=None, act: Callable | None = None) -> Tensor:
    out = ad.spmm(norm_adj, _linear(H, W))
    if b is not None:
        out = ad.add(out, b)
    return act(out) if act else out


def sage_layer(H, graph, W, b=None, act: Callable | None = None, normalize: bool = True) -> Tensor:
    """GraphSAGE with mean aggregation: ``act(concat(h_v, mean_u h_u) W)``.

    A node without neighbours aggregates the zero vector.
    """
    g = as_message_graph(graph)
    H = ad.as_tensor(H)
    neigh = ad.spmm(g.mean_adj, H)
    out = _linear(ad.concat([H, neigh], axis=1), W, b)
    if act:
        out = act(out)
    return ad.row_l2_normalize(out) if normalize else out


def gin_layer(H, graph, mlp: Callable, eps: float = 0.0) -> Tensor:
    g = as_message_graph(graph)
    H = ad.as_tensor(H)
    agg = ad.add(ad.mul(H, 1.0 + eps), ad.spmm(g.adjacency, H))
    return mlp(agg)


def attention_scores(WH, a_src, a_dst, graph) -> Tensor:
    """Raw scores ``leaky_relu(a . [W h_u || W h_v])`` for every edge u -> v."""
    src, dst = as_message_graph(graph).self_loop_index
    s_src = ad.gather_rows(ad.matmul(WH, a_src), src)
    s_dst = ad.gather_rows(ad.matmul(WH, a_dst), dst)
    return ad.leaky_relu(ad.add(s_src, s_dst), 0.2)


def gat_layer(H, graph, Ws: Sequence, a_srcs: Sequence, a_dsts: Sequence, *,
              concat: bool = True, dropout: float = 0.0, rng=None, training: bool = False,
              act: Callable | None = None, return_attention: bool = False):
    """Multi-head graph attention over N(v) plus v.

    Heads are concatenated, or averaged when ``concat`` is False.
    """
    g = as_message_graph(graph)
    src, dst = g.self_loop_index
    H = ad.dropout(H, dropout, rng, training)
    heads, alphas = [], []
    for W, a1, a2 in zip(Ws, a_srcs, a_dsts):
        WH = ad.matmul(H, W)
        alpha = ad.segment_softmax(attention_scores(WH, a1, a2, g), dst, g.n)
        alphas.append(alpha.value[:, 0])
        alpha = ad.dropout(alpha, dropout, rng, training)
        msg = ad.mul(ad.gather_rows(WH, src), alpha)
        heads.append(ad.segment_sum(msg, dst, g.n))
    if concat:
        out = ad.concat(heads, axis=1)
    else:
        out = heads[0]
        for h in heads[1:]:
            out = ad.add(out, h)
        if len(heads) > 1:
            out = ad.mul(out, 1.0 / len(heads))
    if act:
        out = act(out)
    return (out, alphas) if return_attention else out


def agnn_layer(H, graph, beta, return_attention: bool = False):
    """Cosine-attention propagation ``H'_v = sum_u P_uv H_u`` over N(v) plus v."""
    g = as_message_graph(graph)
    src, dst = g.self_loop_index
    H = ad.as_tensor(H)
    Hn = ad.row_l2_normalize(H)
    prod = ad.mul(ad.gather_rows(Hn, src), ad.gather_rows(Hn, dst))
    cos = ad.matmul(prod, np.ones((H.shape[1], 1)))
    P = ad.segment_softmax(ad.mul(cos, beta), dst, g.n)
    out = ad.segment_sum(ad.mul(ad.gather_rows(H, src), P), dst, g.n)
    return (out, P.value[:, 0]) if return_attention else out


def gpool(H, graph, p, ratio: float):
    """Top-k graph pooling with a tanh gate.

    ``p`` is a 1 x d projection row; scores are ``H p / ||p||``.
    Returns ``(pooled features, induced subgraph, kept node indices)``.
    """
    g = as_message_graph(graph)
    H = ad.as_tensor(H)
    p = ad.row_l2_normalize(ad.as_tensor(p).value.reshape(1, -1) if not isinstance(p, Tensor) else p)
    scores = ad.matmul(ad.mul(H, p), np.ones((H.shape[1], 1)))
    k = max(1, int(math.ceil(ratio * g.n)))
    keep = ad.top_k(scores, k)
    gate = ad.tanh(ad.gather_rows(scores, keep))
    return ad.mul(ad.gather_rows(H, keep), gate), g.subgraph(keep), keep


def gunpool(H, keep, n: int) -> Tensor:
    return ad.scatter_rows(H, keep, n)


# ---------------------------------------------------------------------------
# decoder and loss


def edge_logits(Z, pairs) -> Tensor:
    Z = ad.as_tensor(Z)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= Z.shape[0]):
        raise IndexError("node index out of range")
    prod = ad.mul(ad.gather_rows(Z, pairs[:, 0]), ad.gather_rows(Z, pairs[:, 1]))
    return ad.reduce_sum(prod, axis=1)


def inner_product_decode(Z, pairs):
    """Link probabilities ``sigmoid(z_u . z_v)`` for each pair."""
    if isinstance(Z, Tensor):
        return ad.sigmoid(edge_logits(Z, pairs))
    return ad.sigmoid(edge_logits(np.asarray(Z, dtype=np.float64), pairs)).value


def reconstruction_loss(Z, pos_pairs, neg_pairs) -> Tensor:
    """Mean BCE over positive pairs plus mean BCE over negative pairs."""
    pos = np.asarray(pos_pairs).reshape(-1, 2)
    neg = np.asarray(neg_pairs).reshape(-1, 2)
    if len(pos) == 0:
        raise ValueError("reconstruction loss needs at least one positive pair")
    pl = edge_logits(Z, pos)
    loss = ad.reduce_mean(ad.bce_with_logits(pl, np.ones(pl.shape)))
    if len(neg):
        nl = edge_logits(Z, neg)
        loss = ad.add(loss, ad.reduce_mean(ad.bce_with_logits(nl, np.zeros(nl.shape))))
    return loss


# ---------------------------------------------------------------------------
# encoders


@dataclass
class EncoderConfig:
    kind: str = "gcn"
    hidden: int = 32
    out: int = 32
    layers: int = 2
    heads: int = 8
    dropout: float = 0.0
    depth: int = 4
    pool_ratio: float = 0.5
    normalize: bool = True
    gin_eps: float = 0.0

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")

    @classmethod
    def default(cls, kind: str) -> "EncoderConfig":
        """Per-kind defaults."""
        if kind in ("gcn", "sage"):
            return cls(kind=kind, hidden=32, out=32, layers=2)
        if kind == "gin":
            return cls(kind=kind, hidden=32, out=32, layers=5)
        if kind == "gat":
            return cls(kind=kind, hidden=8, out=16, layers=2, heads=8, dropout=0.6)
        if kind == "agnn":
            return cls(kind=kind, hidden=16, out=16, layers=2)
        if kind == "graphunet":
            return cls(kind=kind, hidden=32, out=16, depth=4, dropout=0.3, pool_ratio=0.5)
        raise ValueError(f"unknown encoder kind {kind!r}")

    def without_dropout(self) -> "EncoderConfig":
        return EncoderConfig(**{**asdict(self), "dropout": 0.0})


class Encoder:
    """Base class holding named parameters and batch-norm states."""

    def __init__(self, cfg: EncoderConfig, in_dim: int):
        self.cfg = cfg
        self.in_dim = in_dim
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def _param(self, name: str, t: Tensor) -> Tensor:
        t.name = name
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, X, graph, training: bool = False, rng=None) -> Tensor:
        raise NotImplementedError

    def __call__(self, X, graph, training: bool = False, rng=None) -> Tensor:
        return self.forward(X, as_message_graph(graph), training, rng)


class GCNEncoder(Encoder):
    def __init__(self, cfg, in_dim, rng):
        super().__init__(cfg, in_dim)
        dims = [in_dim] + [cfg.hidden] * (cfg.layers - 1) + [cfg.out]
        for i in range(cfg.layers):
            self._param(f"W{i}", glorot(rng, dims[i], dims[i + 1]))
            self._param(f"b{i}", _zeros((1, dims[i + 1])))

    def forward(self, X, graph, training=False, rng=None):
        H = ad.as_tensor(X)
        for i in range(self.cfg.layers):
            H = ad.dropout(H, self.cfg.dropout, rng, training)
            last = i == self.cfg.layers - 1
            H = gcn_layer(H, graph.norm_adj, self.params[f"W{i}"], self.params[f"b{i}"],
                          None if last else ad.relu)
        return H


class SAGEEncoder(Encoder):
    def __init__(self, cfg, in_dim, rng):
        super().__init__(cfg, in_dim)
        dims = [in_dim] + [cfg.hidden] * (cfg.layers - 1) + [cfg.out]
        for i in range(cfg.layers):
            self._param(f"W{i}", glorot(rng, 2 * dims[i], dims[i + 1]))
            self._param(f"b{i}", _zeros((1, dims[i + 1])))

    def forward(self, X, graph, training=False, rng=None):
        H = ad.as_tensor(X)
        for i in range(self.cfg.layers):
            H = ad.dropout(H, self.cfg.dropout, rng, training)
            last = i == self.cfg.layers - 1
            H = sage_layer(H, graph, self.params[f"W{i}"], self.params[f"b{i}"],
                           None if last else ad.relu, normalize=self.cfg.normalize)
        return H


class GINEncoder(Encoder):
    """Stack of GIN convolutions, each with a linear -> batch-norm -> ELU update."""

    def __init__(self, cfg, in_dim, rng):
        super().__init__(cfg, in_dim)
        dims = [in_dim] + [cfg.hidden] * (cfg.layers - 1) + [cfg.out]
        for i in range(cfg.layers):
            # no bias: batch-norm removes it
            self._param(f"W{i}", glorot(rng, dims[i], dims[i + 1]))
            self._param(f"gamma{i}", Tensor(np.ones((1, dims[i + 1])), requires_grad=True))
            self._param(f"beta{i}", _zeros((1, dims[i + 1])))
            self.bn[f"bn{i}"] = BatchNormState.create(dims[i + 1])

    def forward(self, X, graph, training=False, rng=None):
        H = ad.as_tensor(X)
        for i in range(self.cfg.layers):
            p = self.params

            def mlp(x, i=i):
                x = ad.matmul(x, p[f"W{i}"])
                x = ad.batch_norm(x, p[f"gamma{i}"], p[f"beta{i}"], self.bn[f"bn{i}"], training)
                return ad.elu(x)

            H = ad.dropout(H, self.cfg.dropout, rng, training)
            H = gin_layer(H, graph, mlp, self.cfg.gin_eps)
        return ad.row_l2_normalize(H) if self.cfg.normalize else H


class GATEncoder(Encoder):
    def __init__(self, cfg, in_dim, rng):
        super().__init__(cfg, in_dim)
        dims = [in_dim] + [cfg.hidden * cfg.heads] * (cfg.layers - 1)
        for i in range(cfg.layers):
            last = i == cfg.layers - 1
            width = cfg.out if last else cfg.hidden
            heads = 1 if last else cfg.heads
            for h in range(heads):
                self._param(f"W{i}_{h}", glorot(rng, dims[i], width))
                self._param(f"as{i}_{h}", glorot(rng, width, 1))
                self._param(f"ad{i}_{h}", glorot(rng, width, 1))

    def forward(self, X, graph, training=False, rng=None):
        H = ad.as_tensor(X)
        p = self.params
        for i in range(self.cfg.layers):
            last = i == self.cfg.layers - 1
            heads = 1 if last else self.cfg.heads
            H = gat_layer(
                H, graph,
                [p[f"W{i}_{h}"] for h in range(heads)],
                [p[f"as{i}_{h}"] for h in range(heads)],
                [p[f"ad{i}_{h}"] for h in range(heads)],
                concat=not last, dropout=self.cfg.dropout, rng=rng, training=training,
                act=None if last else ad.elu,
            )
        return H


class AGNNEncoder(Encoder):
    """Linear projection and ReLU followed by cosine-attention propagation layers."""

    def __init__(self, cfg, in_dim, rng):
        super().__init__(cfg, in_dim)
        self._param("W", glorot(rng, in_dim, cfg.out))
        self._param("b", _zeros((1, cfg.out)))
        for i in range(cfg.layers):
            self._param(f"beta{i}", Tensor(np.ones((1, 1)), requires_grad=True))

    def forward(self, X, graph, training=False, rng=None):
        H = ad.dropout(ad.as_tensor(X), self.cfg.dropout, rng, training)
        H = ad.relu(_linear(H, self.params["W"], self.params["b"]))
        for i in range(self.cfg.layers):
            H = agnn_layer(H, graph, self.params[f"beta{i}"])
        return H


class GraphUNetEncoder(Encoder):
    """gPool/gUnpool U-shaped encoder with GCN convolutions and additive skips."""

    def __init__(self, cfg, in_dim, rng):
        super().__init__(cfg, in_dim)
        h = cfg.hidden
        self._param("W_in", glorot(rng, in_dim, h))
        self._param("b_in", _zeros((1, h)))
        for i in range(cfg.depth):
            self._param(f"p{i}", glorot(rng, 1, h))
            self._param(f"Wd{i}", glorot(rng, h, h))
            self._param(f"bd{i}", _zeros((1, h)))
        for i in range(cfg.depth):
            width = cfg.out if i == cfg.depth - 1 else h
            self._param(f"Wu{i}", glorot(rng, h, width))
            self._param(f"bu{i}", _zeros((1, width)))

    def forward(self, X, graph, training=False, rng=None):
        p = self.params
        H = ad.dropout(ad.as_tensor(X), self.cfg.dropout, rng, training)
        H = gcn_layer(H, graph.norm_adj, p["W_in"], p["b_in"], ad.relu)
        skips, graphs, keeps = [H], [graph], []
        g = graph
        for i in range(self.cfg.depth):
            H, g, keep = gpool(H, g, p[f"p{i}"], self.cfg.pool_ratio)
            H = gcn_layer(H, g.norm_adj, p[f"Wd{i}"], p[f"bd{i}"], ad.relu)
            keeps.append(keep)
            if i < self.cfg.depth - 1:
                skips.append(H)
                graphs.append(g)
        for i in range(self.cfg.depth):
            j = self.cfg.depth - 1 - i
            H = ad.add(skips[j], gunpool(H, keeps[j], graphs[j].n))
            last = i == self.cfg.depth - 1
            H = gcn_layer(H, graphs[j].norm_adj, p[f"Wu{i}"], p[f"bu{i}"], None if last else ad.relu)
        return H


_ENCODERS = {
    "gcn": GCNEncoder,
    "sage": SAGEEncoder,
    "gin": GINEncoder,
    "gat": GATEncoder,
    "agnn": AGNNEncoder,
    "graphunet": GraphUNetEncoder,
}


def make_encoder(cfg: EncoderConfig | str, in_dim: int, rng: np.random.Generator | int = 0) -> Encoder:
    """Build an encoder with Glorot-uniform weights drawn from ``rng``."""
    if isinstance(cfg, str):
        cfg = EncoderConfig.default(cfg)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return _ENCODERS[cfg.kind](cfg, in_dim, rng)


# ---------------------------------------------------------------------------
# checkpoint container

_CKPT_MAGIC = b"GNN1"
_CKPT_VERSION = 1


def _named_arrays(enc: Encoder) -> dict[str, np.ndarray]:
    arrays = {name: t.value for name, t in enc.params.items()}
    for name, st in enc.bn.items():
        arrays[f"{name}.running_mean"] = st.running_mean.reshape(1, -1)
        arrays[f"{name}.running_var"] = st.running_var.reshape(1, -1)
    return arrays


def save_checkpoint(enc: Encoder, path) -> None:
    """Write config echo and named float64 tensors to a ``GNN1`` container."""
    header = json.dumps({"config": asdict(enc.cfg), "in_dim": enc.in_dim}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", _CKPT_VERSION, len(header)))
    buf.write(header)
    arrays = _named_arrays(enc)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode()
        arr = np.atleast_2d(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Encoder:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a GNN1 checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off:off + hlen])
    off += hlen
    enc = make_encoder(EncoderConfig(**header["config"]), header["in_dim"], 0)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).copy()
        off += 8 * rows * cols
        if name in enc.params:
            enc.params[name].value = arr
        else:
            bn_name, stat = name.split(".")
            setattr(enc.bn[bn_name], stat, arr.ravel())
    return enc
