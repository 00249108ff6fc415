"""Geometric hypergraph attention network.

Embeddings
    stock ``s``:  ``G[s] + PE(s) + z_s @ W_in``
    news  ``n``:  ``g_news + PE(rank_n) + text_n @ P_text``

The positional and content terms (``PE + z @ W_in`` or ``PE + text @ P_text``)
are also re-injected into every message inside each layer. A hyperedge starts
from the embedding of its event node.

Layer ``l`` (``W``, ``a``, ``b`` are that layer's parameters; row vectors, so
"W x" is ``x @ W``; ``lrelu`` is LeakyReLU)::

    beta_ji   = softmax over j in N(i) of lrelu(b . [W e_j || W x_i])
    e_j'      = lrelu( sum_{i in e_j} beta_ji W (x_i + inj_i) )
    alpha_ij  = softmax over i in e_j of lrelu(a . [W x_i || W e_j'])
    x_i'      = lrelu( sum_{j in N(i)} alpha_ij W (e_j' + inj_j) )     if N(i) non-empty
    x_i'      = lrelu( W x_i )                                          otherwise

followed by dropout on ``x'`` and ``e'`` in training mode. The head maps final
stock rows to down/neutral/up logits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .container import read_container, write_container
from .hypergraph import HypergraphSnapshot
from .numerics import Tensor
from .rng import stream

DOWN, NEUTRAL, UP = 0, 1, 2
CLASS_NAMES = ("down", "neutral", "up")
CHECKPOINT_KIND = "ghan-checkpoint"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_stocks: int
    hidden_dim: int = 100
    text_dim: int = 768
    feature_dim: int = 8
    layers: int = 2
    leaky_slope: float = 0.2
    dropout_p: float = 0.5
    n_classes: int = 3
    dead_zone: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.n_stocks < 1:
            raise ModelError("n_stocks must be >= 1")
        if self.hidden_dim <= 0 or self.hidden_dim % 2:
            raise ModelError("hidden_dim must be a positive even number (sinusoidal encoding)")
        if self.layers < 1:
            raise ModelError("layers must be >= 1")
        if self.dead_zone < 0:
            raise ModelError("dead_zone must be >= 0")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ModelError("leaky_slope must lie in (0, 1)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ModelError("dropout_p must lie in [0, 1)")
        if self.text_dim < 0 or self.feature_dim < 1:
            raise ModelError("text_dim must be >= 0 and feature_dim >= 1")
        if self.n_classes != 3:
            raise ModelError("the prediction head is fixed to 3 classes")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d = config.hidden_dim
    shapes = {
        "G_stock": (config.n_stocks, d),
        "g_news": (d,),
        "W_in": (config.feature_dim, d),
    }
    if config.text_dim:
        shapes["P_text"] = (config.text_dim, d)
    for layer in range(config.layers):
        shapes[f"W.{layer}"] = (d, d)
        shapes[f"a.{layer}"] = (2 * d,)
        shapes[f"b.{layer}"] = (2 * d,)
    shapes["head_W"] = (d, config.n_classes)
    shapes["head_b"] = (config.n_classes,)
    return shapes


class ModelParams(Mapping):
    """Named float64 arrays holding every learnable tensor."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays = {}
        for k, v in arrays.items():
            a = np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ModelError(f"parameter {k} has non-finite values")
            a.setflags(write=False)
            self._arrays[k] = a

    def __getitem__(self, key):
        return self._arrays[key]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self._arrays.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self._arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._arrays[k]).tobytes())
        return h.hexdigest()

    def check(self, config: ModelConfig) -> None:
        want = param_shapes(config)
        if set(want) != set(self._arrays):
            raise ModelError(f"parameter names {sorted(self._arrays)} do not match config {sorted(want)}")
        for k, shape in want.items():
            if self._arrays[k].shape != shape:
                raise ModelError(f"parameter {k} has shape {self._arrays[k].shape}, expected {shape}")


def init_params(config: ModelConfig) -> ModelParams:
    """Geometric tables ~ U(-0.1, 0.1); weight matrices and attention vectors Glorot-uniform."""
    rng = stream(config.seed, "init")
    out = {}
    for name, shape in param_shapes(config).items():
        if name in ("G_stock", "g_news"):
            out[name] = rng.uniform(-0.1, 0.1, size=shape)
        elif name == "head_b":
            out[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else shape[0] // 2
            fan_out = shape[1] if len(shape) == 2 else 1
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            out[name] = rng.uniform(-lim, lim, size=shape)
    return ModelParams(out)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def positional_encoding(pos: int, d: int) -> np.ndarray:
    """Sinusoidal encoding: ``[2i] = sin(pos / 10000^(2i/d))``, ``[2i+1] = cos(...)``."""
    return positional_table(np.array([pos]), d)[0]


def positional_table(positions, d: int) -> np.ndarray:
    if d % 2:
        raise ModelError(f"positional encoding needs an even dimension, got {d}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    if np.any(pos < 0):
        raise ModelError("positions must be non-negative")
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    out = np.empty((pos.shape[0], d))
    out[:, 0::2] = np.sin(pos / freq)
    out[:, 1::2] = np.cos(pos / freq)
    return out


def _embed(snap: HypergraphSnapshot, T: Mapping[str, Tensor], config: ModelConfig):
    """Initial node table and the per-node injection (positional + content) term."""
    n, m, d = snap.n_stocks, snap.n_news, config.hidden_dim
    if n != config.n_stocks:
        raise ModelError(f"snapshot has {n} stocks, model was built for {config.n_stocks}")
    z = snap.stock_features
    if z.shape[1] != config.feature_dim:
        raise ModelError(f"stock features have width {z.shape[1]}, model expects {config.feature_dim}")

    inj_s = nx.matmul(z, T["W_in"])
    if snap.use_positional:
        inj_s = nx.add(inj_s, positional_table(np.arange(n), d))
    x_s = nx.add(T["G_stock"], inj_s) if snap.use_geometric else inj_s
    if m == 0:
        return x_s, inj_s

    if config.text_dim:
        if snap.news_text.shape != (m, config.text_dim):
            raise ModelError(
                f"news text vectors have shape {snap.news_text.shape}, expected ({m}, {config.text_dim}); "
                "unresolved embedding ids?"
            )
        inj_n = nx.matmul(snap.news_text, T["P_text"])
    else:
        inj_n = Tensor(np.zeros((m, d)))
    if snap.use_positional:
        inj_n = nx.add(inj_n, positional_table(snap.news_rank, d))
    x_n = nx.add(inj_n, nx.reshape(T["g_news"], (1, d))) if snap.use_geometric else inj_n
    return nx.concat([x_s, x_n]), nx.concat([inj_s, inj_n])


def node_embedding(node, snapshot: HypergraphSnapshot, params, config: ModelConfig) -> np.ndarray:
    """Layer-0 representation of one node (NodeRef or index)."""
    idx = node.index if hasattr(node, "index") else int(node)
    snapshot.node(idx)
    T = {k: nx.as_tensor(v) for k, v in params.items()}
    x0, _ = _embed(snapshot, T, config)
    return x0.data[idx].copy()


# ---------------------------------------------------------------------------
# attention and layers
# ---------------------------------------------------------------------------


def _halves(v: Tensor, d: int):
    return nx.gather_rows(v, np.arange(d)), nx.gather_rows(v, np.arange(d, 2 * d))


def _attention_logits(first: Tensor, second: Tensor, vec: Tensor, d: int, slope: float) -> Tensor:
    """lrelu(vec . [first_p || second_p]) for every incidence pair p."""
    v1, v2 = _halves(vec, d)
    return nx.leaky_relu(nx.add(nx.matmul(first, v1), nx.matmul(second, v2)), slope)


def edge_level_attention(snap, WX: Tensor, WE: Tensor, b: Tensor, d: int, slope: float) -> Tensor:
    """beta per incidence pair, normalised over the hyperedges of each node."""
    pn, pe = snap.pair_node, snap.pair_edge
    logits = _attention_logits(nx.gather_rows(WE, pe), nx.gather_rows(WX, pn), b, d, slope)
    return nx.segment_softmax(logits, pn, snap.n_nodes)


def node_level_attention(snap, WX: Tensor, WE: Tensor, a: Tensor, d: int, slope: float) -> Tensor:
    """alpha per incidence pair, normalised over the members of each hyperedge."""
    pn, pe = snap.pair_node, snap.pair_edge
    logits = _attention_logits(nx.gather_rows(WX, pn), nx.gather_rows(WE, pe), a, d, slope)
    return nx.segment_softmax(logits, pe, snap.n_edges)


@dataclass
class LayerTrace:
    alpha: np.ndarray
    beta: np.ndarray


def layer_forward(layer, snap, X, E, inj, T, config, training=False, dropout_key=()):
    """One attention layer; returns ``(X', E', trace)``. ``E`` is None when there are no hyperedges."""
    d, slope = config.hidden_dim, config.leaky_slope
    W = T[f"W.{layer}"]
    WX = nx.matmul(X, W)
    N, k = snap.n_nodes, snap.n_edges
    if k == 0:
        X_new, E_new = nx.leaky_relu(WX, slope), None
        trace = LayerTrace(np.zeros(0), np.zeros(0))
    else:
        pn, pe = snap.pair_node, snap.pair_edge
        P = pn.shape[0]
        beta = edge_level_attention(snap, WX, nx.matmul(E, W), T[f"b.{layer}"], d, slope)
        node_msg = nx.matmul(nx.add(X, inj), W)
        weighted = nx.mul(nx.reshape(beta, (P, 1)), nx.gather_rows(node_msg, pn))
        E_new = nx.leaky_relu(nx.segment_sum(weighted, pe, k), slope)

        alpha = node_level_attention(snap, WX, nx.matmul(E_new, W), T[f"a.{layer}"], d, slope)
        event_nodes = np.array([e.event for e in snap.hyperedges], dtype=np.int64)
        edge_msg = nx.matmul(nx.add(E_new, nx.gather_rows(inj, event_nodes)), W)
        weighted = nx.mul(nx.reshape(alpha, (P, 1)), nx.gather_rows(edge_msg, pe))
        agg = nx.segment_sum(weighted, pn, N)
        isolated = np.ones((N, 1))
        isolated[pn] = 0.0
        if isolated.any():
            agg = nx.add(agg, nx.mul(isolated, WX))
        X_new = nx.leaky_relu(agg, slope)
        trace = LayerTrace(alpha.data.copy(), beta.data.copy())

    if training and config.dropout_p > 0:
        key = (config.seed, "dropout") + tuple(dropout_key) + (layer,)
        X_new = nx.dropout(X_new, config.dropout_p, key + ("x",), training=True)
        if E_new is not None:
            E_new = nx.dropout(E_new, config.dropout_p, key + ("e",), training=True)
    return X_new, E_new, trace


# ---------------------------------------------------------------------------
# forward pass and loss
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    probs: np.ndarray
    score: np.ndarray
    logits: Tensor = field(repr=False)
    node_reps: list = field(default_factory=list, repr=False)
    edge_reps: list = field(default_factory=list, repr=False)
    attention: list = field(default_factory=list, repr=False)


def forward(snapshot: HypergraphSnapshot, params, config: ModelConfig, training: bool = False, dropout_key=()):
    """Run the network on one day. ``params`` maps names to arrays or Tensors.

    Passing Tensors lets a surrounding :class:`~ghan.numerics.Tape` differentiate
    with respect to them. ``dropout_key`` names the dropout stream (e.g. epoch
    and day) and only matters when ``training`` is true.
    """
    T = {k: nx.as_tensor(v) for k, v in params.items()}
    X, inj = _embed(snapshot, T, config)
    E = None
    if snapshot.n_edges:
        E = nx.gather_rows(X, np.array([e.event for e in snapshot.hyperedges], dtype=np.int64))
    node_reps, edge_reps, attention = [X.data], [None if E is None else E.data], []
    for layer in range(config.layers):
        X, E, trace = layer_forward(layer, snapshot, X, E, inj, T, config, training, dropout_key)
        node_reps.append(X.data)
        edge_reps.append(None if E is None else E.data)
        attention.append(trace)
    stocks = nx.gather_rows(X, np.arange(snapshot.n_stocks))
    logits = nx.add(nx.matmul(stocks, T["head_W"]), T["head_b"])
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    score = probs[:, UP] - probs[:, DOWN]
    return ForwardOutput(probs, score, logits, node_reps, edge_reps, attention)


def loss(output: ForwardOutput, labels) -> Tensor:
    """Mean cross-entropy over stocks whose label is defined (label >= 0)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (output.logits.shape[0],):
        raise ModelError(f"{labels.shape[0]} labels for {output.logits.shape[0]} stocks")
    mask = labels >= 0
    if not mask.any():
        raise ModelError("no labelled stock in this snapshot")
    idx = np.flatnonzero(mask)
    return nx.cross_entropy(nx.gather_rows(output.logits, idx), labels[idx])


def loss_and_grad(snapshot, labels, params: ModelParams, config: ModelConfig, training=True, dropout_key=()):
    """``(loss value, {name: gradient})`` for one snapshot."""
    T = params.tensors()
    with nx.Tape() as tape:
        out = forward(snapshot, T, config, training=training, dropout_key=dropout_key)
        L = loss(out, labels)
    names = list(T)
    grads = tape.gradient(L, [T[k] for k in names])
    return L.item(), dict(zip(names, grads))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, config: ModelConfig, meta: dict | None = None) -> None:
    params.check(config)
    header = {
        "kind": CHECKPOINT_KIND,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "extra": meta or {},
    }
    write_container(path, dict(params.items()), header)


def load_checkpoint(path):
    """``(params, config, extra metadata)`` from a checkpoint file."""
    arrays, header = read_container(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise ModelError(f"{path}: not a model checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {header.get('version')}")
    config = ModelConfig(**header["config"])
    params = ModelParams(arrays)
    params.check(config)
    return params, config, header.get("extra", {})


def config_digest(config: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()
