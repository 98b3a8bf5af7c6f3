"""GNN layers: the Bregman layer, baseline message-passing layers, models.

A Bregman layer maps hidden features ``Z`` (n x d) to

    rho( rho^{-1}(P(Z) M) + P(Z) W + 1 b^T )

where ``P`` is the propagation operator of the wrapped base model (normalized
adjacency for GCN, attention for GAT, self+mean for SAGE, personalized
PageRank for APPNP). With ``W = 0`` and ``b = 0`` the layer returns
``P(Z) M`` unchanged, which is what lets it carry features across depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bregman
from .sparsegraph import (
    SparseMatrix,
    normalize_rw,
    normalize_sym,
    segment_softmax,
    spmm,
    weighted_spmm,
)
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_row_broadcast,
    concat_cols,
    dropout,
    elementwise,
    gather_rows,
    leaky_relu,
    matmul,
    scale,
    slice_cols,
)

AGGREGATORS = ("gcn", "gat", "sage", "appnp")
GAT_HEADS = 8
GAT_NEGATIVE_SLOPE = 0.2


class ConfigError(ValueError):
    """Invalid model configuration."""


def glorot(rng, fan_in, fan_out, gain=1.0):
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


@dataclass(frozen=True, eq=False)
class GraphOperators:
    """Sparse operators derived once from a dataset's adjacency."""

    adj: SparseMatrix
    adj_norm: SparseMatrix
    adj_loops: SparseMatrix
    adj_mean: SparseMatrix

    @classmethod
    def from_adjacency(cls, adj):
        loops = normalize_sym(adj, add_self_loops=True)
        return cls(
            adj=adj,
            adj_norm=loops,
            adj_loops=loops.with_values(np.ones(loops.nnz)),
            adj_mean=normalize_rw(adj),
        )

    @classmethod
    def from_dataset(cls, ds):
        return cls.from_adjacency(ds.adjacency())


# ----------------------------------------------------------------------
# propagation primitives


def gcn_forward(weight, adj_norm, z):
    """Pre-activation GCN layer ``A_hat Z W``."""
    if z.cols != weight.rows:
        raise ShapeError(f"gcn_forward: features {z.shape} do not match weight {weight.shape}")
    if weight.cols <= weight.rows:
        return spmm(adj_norm, matmul(z, weight))
    return matmul(spmm(adj_norm, z), weight)


def gat_attention(h, a_src, a_dst, adj):
    """Attention coefficients (nnz x 1) over the stored entries of ``adj``.

    Entry (i, j) scores ``LeakyReLU(a_dst . h_i + a_src . h_j)``, normalized
    by a softmax over the neighbours j of i.
    """
    s_src = matmul(h, a_src.T)
    s_dst = matmul(h, a_dst.T)
    scores = add(gather_rows(s_dst, adj.row_ids()), gather_rows(s_src, adj.col_idx))
    return segment_softmax(adj, leaky_relu(scores, GAT_NEGATIVE_SLOPE))


def gat_forward(weight, a_src, a_dst, heads, adj, z, concat=True):
    """Multi-head graph attention (pre-activation).

    ``a_src`` / ``a_dst`` are lists with one (1 x d_head) tensor per head.
    With ``concat`` the head outputs are stacked column-wise (each head has
    width ``d_out / heads``); otherwise every head has width ``d_out`` and the
    results are averaged.
    """
    if len(a_src) != heads or len(a_dst) != heads:
        raise ShapeError(f"gat_forward: expected {heads} attention vectors per side")
    h = matmul(z, weight)
    width = h.cols // heads if concat else h.cols
    if concat and h.cols % heads:
        raise ShapeError(f"gat_forward: width {h.cols} not divisible by {heads} heads")
    outs = []
    for k in range(heads):
        hk = slice_cols(h, k * width, (k + 1) * width) if concat and heads > 1 else h
        alpha = gat_attention(hk, a_src[k], a_dst[k], adj)
        outs.append(weighted_spmm(adj, alpha, hk))
    if len(outs) == 1:
        return outs[0]
    if concat:
        return concat_cols(outs)
    total = outs[0]
    for o in outs[1:]:
        total = add(total, o)
    return scale(total, 1.0 / heads)


def sage_forward(weight_self, weight_neigh, adj, z):
    """GraphSAGE with the mean aggregator: ``Z Ws + mean_N(Z) Wn``.

    ``adj`` may be the raw adjacency or an already row-normalized one.
    """
    mean_adj = adj if adj._cache.get("row_normalized") else _mean_operator(adj)
    return add(matmul(z, weight_self), matmul(spmm(mean_adj, z), weight_neigh))


def _mean_operator(adj):
    cached = adj._cache.get("mean")
    if cached is None:
        cached = normalize_rw(adj)
        cached._cache["row_normalized"] = True
        adj._cache["mean"] = cached
    return cached


def appnp_propagate(adj_norm, h, alpha=0.1, k=10):
    """K steps of Z <- (1 - alpha) A_hat Z + alpha H, starting from Z = H."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    z = h
    for _ in range(int(k)):
        z = add(scale(spmm(adj_norm, z), 1.0 - alpha), scale(h, alpha))
    return z


# ----------------------------------------------------------------------
# aggregators and the Bregman layer


class Aggregator:
    """Propagation operator P(.) used inside a Bregman layer.

    P is linear in the features for a fixed attention state; for ``gat`` the
    attention is recomputed from the incoming features on each call.
    """

    def __init__(self, kind, ops, width=None, rng=None, alpha=0.1, k=10):
        if kind not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {kind!r}; expected one of {AGGREGATORS}")
        self.kind = kind
        self.ops = ops
        self.alpha = alpha
        self.k = k
        self.a_src = self.a_dst = None
        if kind == "gat":
            if width is None or rng is None:
                raise ConfigError("gat aggregator needs a width and an rng")
            self.a_src = glorot(rng, 1, width)
            self.a_dst = glorot(rng, 1, width)

    def parameters(self):
        return [self.a_src, self.a_dst] if self.kind == "gat" else []

    def __call__(self, z):
        if self.kind == "gcn":
            return spmm(self.ops.adj_norm, z)
        if self.kind == "gat":
            alpha = gat_attention(z, self.a_src, self.a_dst, self.ops.adj_loops)
            return weighted_spmm(self.ops.adj_loops, alpha, z)
        if self.kind == "sage":
            return scale(add(z, spmm(self.ops.adj_mean, z)), 0.5)
        return appnp_propagate(self.ops.adj_norm, z, self.alpha, self.k)


@dataclass
class BregmanLayerParams:
    M: Tensor
    W: Tensor
    b: Tensor

    def __post_init__(self):
        d = self.M.rows
        if self.M.shape != (d, d) or self.W.shape != (d, d) or self.b.shape != (1, d):
            raise ShapeError(
                f"Bregman layer needs square M, W and a 1 x d bias; got {self.M.shape}, "
                f"{self.W.shape}, {self.b.shape}")

    @property
    def width(self):
        return self.M.rows

    @property
    def E(self):
        """The energy coupling matrix, tied to the layer weight as E = -W."""
        return scale(self.W, -1.0)

    @classmethod
    def init(cls, rng, d, w_scale=0.1):
        w = glorot(rng, d, d)
        w.values *= w_scale
        return cls(M=glorot(rng, d, d), W=w, b=Tensor(np.zeros((1, d)), requires_grad=True))

    def parameters(self):
        return [self.M, self.W, self.b]


def bregman_layer(params, pair, propagated, clamp_margin=bregman.DEFAULT_CLAMP_MARGIN,
                  diagnostics=None):
    """The closed-form layer given already-propagated features ``P(Z)``."""
    if propagated.cols != params.width:
        raise ShapeError(f"Bregman layer of width {params.width} got features {propagated.shape}")
    skip = bregman.apply_inverse(pair, matmul(propagated, params.M), clamp_margin, diagnostics)
    pre = add_row_broadcast(add(skip, matmul(propagated, params.W)), params.b)
    return bregman.apply_activation(pair, pre)


def bregman_forward(params, pair, agg, z, clamp_margin=bregman.DEFAULT_CLAMP_MARGIN,
                    diagnostics=None):
    """``rho(rho^{-1}(P(Z) M) + P(Z) W + 1 b^T)`` for the aggregator ``agg``."""
    if z.cols != params.width:
        raise ShapeError(f"Bregman layer of width {params.width} got features {z.shape}")
    return bregman_layer(params, pair, agg(z), clamp_margin, diagnostics)


# ----------------------------------------------------------------------
# models


PLAIN_ACTIVATIONS = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(np.float64)),
    "elu": (lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0.0))),
            lambda x: np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))),
}


def activate(name, x):
    if name in PLAIN_ACTIVATIONS:
        f, fp = PLAIN_ACTIVATIONS[name]
        return elementwise(x, f, fp, name)
    return bregman.apply_activation(bregman.get_activation(name), x)


@dataclass
class ModelConfig:
    base: str = "gcn"
    bregman_enhanced: bool = False
    depth: int = 3
    hidden: int = 64
    activation: str = "tanh"
    base_activation: str = "relu"
    dropout: float = 0.5
    appnp_alpha: float = 0.1
    appnp_k: int = 10
    clamp_margin: float = bregman.DEFAULT_CLAMP_MARGIN

    def validate(self):
        if self.base not in AGGREGATORS:
            raise ConfigError(f"model.base must be one of {AGGREGATORS}, got {self.base!r}")
        if self.depth < 2:
            raise ConfigError(f"model.depth must be at least 2, got {self.depth}")
        if self.bregman_enhanced and self.depth < 3:
            raise ConfigError(f"Bregman models need depth >= 3, got {self.depth}")
        if self.hidden < 1:
            raise ConfigError("model.hidden must be positive")
        if self.base == "gat" and self.hidden % GAT_HEADS:
            raise ConfigError(f"model.hidden must be divisible by {GAT_HEADS} for gat")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        try:
            bregman.get_activation(self.activation)
        except KeyError as exc:
            raise ConfigError(f"model.activation: {exc.args[0]}") from None
        if self.base_activation not in PLAIN_ACTIVATIONS:
            try:
                bregman.get_activation(self.base_activation)
            except KeyError:
                raise ConfigError(f"model.base_activation {self.base_activation!r} is unknown") from None
        if not 0.0 < self.appnp_alpha <= 1.0:
            raise ConfigError("model.appnp_alpha must lie in (0, 1]")
        return self


class BaseLayer:
    """One standard message-passing layer followed by an activation."""

    def __init__(self, kind, d_in, d_out, activation, rng):
        self.kind = kind
        self.activation = activation
        if kind == "sage":
            self.weights = [glorot(rng, d_in, d_out), glorot(rng, d_in, d_out)]
        else:
            self.weights = [glorot(rng, d_in, d_out)]
        self.a_src, self.a_dst = [], []
        if kind == "gat":
            head_width = d_out // GAT_HEADS
            self.a_src = [glorot(rng, 1, head_width) for _ in range(GAT_HEADS)]
            self.a_dst = [glorot(rng, 1, head_width) for _ in range(GAT_HEADS)]

    def parameters(self):
        return self.weights + self.a_src + self.a_dst

    def __call__(self, z, ops):
        if self.kind == "gcn":
            pre = gcn_forward(self.weights[0], ops.adj_norm, z)
        elif self.kind == "gat":
            pre = gat_forward(self.weights[0], self.a_src, self.a_dst, GAT_HEADS, ops.adj_loops, z)
        elif self.kind == "sage":
            pre = add(matmul(z, self.weights[0]), matmul(spmm(ops.adj_mean, z), self.weights[1]))
        else:
            # APPNP transforms first and propagates once at the end of the model
            pre = matmul(z, self.weights[0])
        return activate(self.activation, pre)


class BregmanLayer:
    def __init__(self, kind, width, pair, ops, rng, cfg):
        self.params = BregmanLayerParams.init(rng, width)
        self.agg = Aggregator(kind, ops, width=width, rng=rng, alpha=cfg.appnp_alpha, k=cfg.appnp_k)
        self.pair = pair
        self.clamp_margin = cfg.clamp_margin

    def parameters(self):
        return self.params.parameters() + self.agg.parameters()

    def __call__(self, z, diagnostics=None):
        return bregman_forward(self.params, self.pair, self.agg, z, self.clamp_margin, diagnostics)


class Model:
    """Stack of hidden layers plus a linear output head.

    Standard: ``depth - 1`` base layers. Bregman: one base layer lifting the
    input to the hidden width, then ``depth - 2`` Bregman layers. APPNP models
    additionally propagate the output logits.
    """

    def __init__(self, cfg, ops, num_features, num_classes, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.ops = ops
        rng = np.random.default_rng(seed)
        d = cfg.hidden
        self.bregman_layers = []
        if cfg.bregman_enhanced:
            pair = bregman.get_activation(cfg.activation)
            self.base_layers = [BaseLayer(cfg.base, num_features, d, cfg.activation, rng)]
            self.bregman_layers = [BregmanLayer(cfg.base, d, pair, ops, rng, cfg)
                                   for _ in range(cfg.depth - 2)]
        else:
            dims = [num_features] + [d] * (cfg.depth - 1)
            self.base_layers = [BaseLayer(cfg.base, a, b, cfg.base_activation, rng)
                                for a, b in zip(dims[:-1], dims[1:])]
        self.head = glorot(rng, d, num_classes)
        self.last_hidden = None
        self.clamp_counts = [0] * len(self.bregman_layers)

    def parameters(self):
        params = []
        for layer in self.base_layers + self.bregman_layers:
            params.extend(layer.parameters())
        params.append(self.head)
        return params

    def num_parameters(self):
        return int(sum(p.values.size for p in self.parameters()))

    def __call__(self, x, training=False, rng=None):
        p = self.cfg.dropout if training else 0.0
        z = x
        for layer in self.base_layers:
            z = layer(dropout(z, p, rng, training), self.ops)
        counts = []
        for layer in self.bregman_layers:
            diag = {}
            z = layer(dropout(z, p, rng, training), diag)
            counts.append(diag.get("clamped", 0))
        self.clamp_counts = counts
        self.last_hidden = z.values
        logits = matmul(dropout(z, p, rng, training), self.head)
        if self.cfg.base == "appnp":
            logits = appnp_propagate(self.ops.adj_norm, logits, self.cfg.appnp_alpha, self.cfg.appnp_k)
        return logits

    def state(self):
        return [p.values.copy() for p in self.parameters()]

    def load_state(self, state):
        for p, v in zip(self.parameters(), state):
            p.values = v.copy()


def build_model(cfg, ds, seed=0, ops=None):
    """Assemble the model described by ``cfg`` for dataset ``ds``."""
    cfg.validate()
    ops = GraphOperators.from_dataset(ds) if ops is None else ops
    return Model(cfg, ops, ds.num_features, ds.num_classes, seed=seed)
