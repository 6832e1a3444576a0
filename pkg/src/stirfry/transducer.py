"""Graph-structured encoder/decoder that maps a leader pose sequence to a follower one.

Pipeline per sequence of length ``L`` (``D = h_em``, ``c = D / 6``):

* leader poses -> per-feature affine embeddings -> positional encoding ->
  ``n_layers`` causal self-attention layers -> ``F_en`` (L, D)
* shifted follower poses (zero start token first) -> same embedding scheme ->
  ``n_layers`` masked self-attention layers -> ``F_de`` (L, D)
* at each step the rows of ``F_en`` and ``F_de`` are cut into 6 + 6 node
  features of width ``c``, passed through one graph convolution over a fixed
  leader->follower bipartite adjacency, mean-pooled and mapped by a
  feed-forward net to ``F_G`` (L, D)
* causal attention with queries, keys and values all projected from ``F_G``,
  added to ``F_de`` through a residual connection, feed-forward, and a linear
  head to the 6 pose outputs.

Output row ``t`` predicts the follower pose at step ``t`` from leader steps
``<= t`` and follower steps ``< t``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .exceptions import CheckpointError, ContractError, DivergenceError
from .tensor import Tensor
from .trajectory import PoseSeq, apply_norm, invert_norm
from .validation import check_sequence_list

N_NODES = 12
LN_EPS = 1e-5
CKPT_MAGIC = b"STIRFRY-CKPT 1\n"


@dataclass(frozen=True)
class ModelConfig:
    h_em: int = 210
    n_layers: int = 3
    heads: int = 3
    m: int = 6
    d_ff: int = 420
    gcn_hidden: int = 70
    dropout: float = 0.1
    max_len: int = 1024
    causal_encoder: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.m != 6:
            raise ContractError("only 6-dimensional pose features are supported")
        if self.h_em % self.m:
            raise ContractError(f"h_em={self.h_em} is not divisible by m={self.m}")
        if self.h_em % self.heads:
            raise ContractError(f"h_em={self.h_em} is not divisible by heads={self.heads}")
        if self.n_layers < 1:
            raise ContractError("n_layers must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")

    @property
    def chunk(self):
        return self.h_em // self.m

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self):
        return asdict(self)


# -- graph -------------------------------------------------------------------


def coordination_adjacency(m=6):
    """Row-normalized adjacency: each follower node hears every leader node and itself."""
    n = 2 * m
    A = np.eye(n)
    A[m:, :m] = 1.0
    return A / A.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class CoordGraph:
    """Node features (12, c) and the (12, 12) adjacency for one time step."""

    nodes: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        if self.nodes.shape[0] != N_NODES or self.adjacency.shape != (N_NODES, N_NODES):
            raise ContractError("a coordination graph has exactly 12 nodes")

    @property
    def n_edges(self):
        return int(np.count_nonzero(self.adjacency))


def build_graph(en_row, de_row, m=6):
    """Cut an encoder row and a decoder row into 6 + 6 node features."""
    en_row = np.asarray(en_row, dtype=float)
    de_row = np.asarray(de_row, dtype=float)
    if en_row.shape != de_row.shape or en_row.ndim != 1 or en_row.size % m:
        raise ContractError("encoder and decoder rows must be equal-width vectors divisible by m")
    c = en_row.size // m
    nodes = np.concatenate([en_row.reshape(m, c), de_row.reshape(m, c)], axis=0)
    return CoordGraph(nodes, coordination_adjacency(m))


# -- parameters ----------------------------------------------------------------


def _attn_shapes(D):
    return {"w_qkv": (D, 3 * D), "b_qkv": (3 * D,), "w_o": (D, D), "b_o": (D,)}


def _block_shapes(D, d_ff):
    shapes = {f"attn.{k}": v for k, v in _attn_shapes(D).items()}
    shapes.update({
        "ln1.g": (D,), "ln1.b": (D,),
        "ff.w1": (D, d_ff), "ff.b1": (d_ff,), "ff.w2": (d_ff, D), "ff.b2": (D,),
        "ln2.g": (D,), "ln2.b": (D,),
    })
    return shapes


def param_shapes(cfg):
    D, c = cfg.h_em, cfg.chunk
    shapes = {
        "enc_embed.w": (cfg.m, c), "enc_embed.b": (cfg.m, c),
        "dec_embed.w": (cfg.m, c), "dec_embed.b": (cfg.m, c),
    }
    for i in range(cfg.n_layers):
        for k, v in _block_shapes(D, cfg.d_ff).items():
            shapes[f"enc.{i}.{k}"] = v
            shapes[f"dec.{i}.{k}"] = v
    shapes.update({
        "graph.w": (c, cfg.gcn_hidden), "graph.b": (cfg.gcn_hidden,),
        "graph.ff.w1": (cfg.gcn_hidden, cfg.d_ff), "graph.ff.b1": (cfg.d_ff,),
        "graph.ff.w2": (cfg.d_ff, D), "graph.ff.b2": (D,),
    })
    shapes.update({f"gattn.{k}": v for k, v in _block_shapes(D, cfg.d_ff).items()})
    shapes.update({"head.w": (D, cfg.m), "head.b": (cfg.m,)})
    return shapes


def init_params(cfg, seed=None):
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; norm gains 1."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            fan_in = 1 if name.endswith("embed.w") else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def sinusoidal_table(max_len, D):
    pos = np.arange(max_len)[:, None]
    div = np.exp(np.arange(0, D, 2) * (-math.log(10000.0) / D))
    pe = np.zeros((max_len, D))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: D // 2])
    return pe


# -- tape building blocks ----------------------------------------------------


def _linear(x, w, b):
    lead = x.shape[:-1]
    y = x.reshape(-1, x.shape[-1]) @ w + b
    return y.reshape(*lead, w.shape[-1])


def _mha(x, p, pre, heads, mask):
    B, L, D = x.shape
    dh = D // heads
    qkv = _linear(x, p[pre + "w_qkv"], p[pre + "b_qkv"])
    qkv = qkv.reshape(B, L, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    att = T.softmax(scores, axis=-1, mask=mask)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
    return _linear(out, p[pre + "w_o"], p[pre + "b_o"])


def _ffn(x, p, pre):
    return _linear(T.relu(_linear(x, p[pre + "w1"], p[pre + "b1"])), p[pre + "w2"], p[pre + "b2"])


def _block(x, p, pre, heads, mask, drop):
    x = T.layer_norm(x + drop(_mha(x, p, pre + "attn.", heads, mask)), p[pre + "ln1.g"], p[pre + "ln1.b"], LN_EPS)
    return T.layer_norm(x + drop(_ffn(x, p, pre + "ff.")), p[pre + "ln2.g"], p[pre + "ln2.b"], LN_EPS)


def _embed(x, p, pre):
    B, L, m = x.shape
    e = x.reshape(B, L, m, 1) * p[pre + ".w"] + p[pre + ".b"]
    return e.reshape(B, L, -1)


def graph_embed_tensor(nodes, adjacency, p):
    """Graph convolution + mean pool + feed-forward on node tensors (..., 12, c)."""
    h = T.relu(_linear(T.matmul(adjacency, nodes), p["graph.w"], p["graph.b"]))
    pooled = h.mean(axis=-2)
    return _ffn(pooled, p, "graph.ff.")


def graph_embed(graph, params):
    """Embedding vector of one :class:`CoordGraph`."""
    with T.no_grad():
        out = graph_embed_tensor(Tensor(graph.nodes), Tensor(graph.adjacency), params)
    return out.data


# -- numpy mirror for step-by-step decoding ----------------------------------


def _np_ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS) * g + b


class _StepAttention:
    """Causal attention evaluated one query row at a time with a key/value cache."""

    def __init__(self, p, pre, heads, D, capacity):
        self.w_qkv, self.b_qkv = p[pre + "w_qkv"], p[pre + "b_qkv"]
        self.w_o, self.b_o = p[pre + "w_o"], p[pre + "b_o"]
        self.heads, self.dh = heads, D // heads
        self.K = np.zeros((heads, capacity, self.dh))
        self.V = np.zeros((heads, capacity, self.dh))
        self.n = 0

    def __call__(self, x):
        qkv = (x @ self.w_qkv + self.b_qkv).reshape(3, self.heads, self.dh)
        self.K[:, self.n] = qkv[1]
        self.V[:, self.n] = qkv[2]
        self.n += 1
        K, V = self.K[:, : self.n], self.V[:, : self.n]
        s = np.einsum("hd,htd->ht", qkv[0], K) * (1.0 / math.sqrt(self.dh))
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        s /= s.sum(axis=-1, keepdims=True)
        out = np.einsum("ht,htd->hd", s, V).reshape(-1)
        return out @ self.w_o + self.b_o


class _StepBlock:
    def __init__(self, p, pre, heads, D, capacity):
        self.attn = _StepAttention(p, pre + "attn.", heads, D, capacity)
        self.p, self.pre = p, pre

    def __call__(self, x):
        p, pre = self.p, self.pre
        x = _np_ln(x + self.attn(x), p[pre + "ln1.g"], p[pre + "ln1.b"])
        h = np.maximum(x @ p[pre + "ff.w1"] + p[pre + "ff.b1"], 0.0) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
        return _np_ln(x + h, p[pre + "ln2.g"], p[pre + "ln2.b"])


# -- model ---------------------------------------------------------------------


class TransducerModel:
    """Configuration, learnable parameters and the forward computations."""

    def __init__(self, config=None, params=None):
        self.config = config or ModelConfig()
        self.params = init_params(self.config) if params is None else params
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ContractError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ContractError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        self.pe = sinusoidal_table(self.config.max_len, self.config.h_em)
        self.adjacency = coordination_adjacency(self.config.m)

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def n_parameters(self):
        return sum(p.size for p in self.params.values())

    # ---- pieces ----------------------------------------------------------
    def _check_len(self, L):
        if L > self.config.max_len:
            raise ContractError(f"sequence length {L} exceeds max_len {self.config.max_len}")

    def _dropper(self, training, rng):
        rate = self.config.dropout
        if not training or rate == 0.0:
            return lambda x: x
        return lambda x: T.dropout(x, rate, rng, True)

    @staticmethod
    def _batch(x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return x.reshape(1, *x.shape) if x.ndim == 2 else x

    def embed_input(self, poses, which="enc"):
        """Per-feature embeddings concatenated in feature order; (..., 6) -> (..., h_em)."""
        x = self._batch(poses)
        return _embed(x, self.params, f"{which}_embed")

    def _causal(self, L):
        return np.tril(np.ones((L, L), dtype=bool))

    def encode(self, left, training=False, rng=None):
        x = self._batch(left)
        L = x.shape[1]
        self._check_len(L)
        drop = self._dropper(training, rng)
        h = drop(_embed(x, self.params, "enc_embed") + self.pe[:L])
        mask = self._causal(L) if self.config.causal_encoder else None
        for i in range(self.config.n_layers):
            h = _block(h, self.params, f"enc.{i}.", self.config.heads, mask, drop)
        return h

    def decode_masked(self, dec_in, training=False, rng=None):
        x = self._batch(dec_in)
        L = x.shape[1]
        self._check_len(L)
        drop = self._dropper(training, rng)
        h = drop(_embed(x, self.params, "dec_embed") + self.pe[:L])
        mask = self._causal(L)
        for i in range(self.config.n_layers):
            h = _block(h, self.params, f"dec.{i}.", self.config.heads, mask, drop)
        return h

    def graph_features(self, f_en, f_de):
        B, L, D = f_en.shape
        m, c = self.config.m, self.config.chunk
        nodes = T.concat([f_en.reshape(B, L, m, c), f_de.reshape(B, L, m, c)], axis=2)
        return graph_embed_tensor(nodes, Tensor(self.adjacency), self.params)

    def enc_dec_attend_and_predict(self, f_g, f_de, training=False, rng=None):
        if f_g.shape != f_de.shape:
            raise ContractError(f"graph embedding {f_g.shape} and decoder features {f_de.shape} differ")
        drop = self._dropper(training, rng)
        p = self.params
        L = f_g.shape[1]
        z = _mha(f_g, p, "gattn.attn.", self.config.heads, self._causal(L))
        z = T.layer_norm(f_de + drop(z), p["gattn.ln1.g"], p["gattn.ln1.b"], LN_EPS)
        z = T.layer_norm(z + drop(_ffn(z, p, "gattn.ff.")), p["gattn.ln2.g"], p["gattn.ln2.b"], LN_EPS)
        return _linear(z, p["head.w"], p["head.b"])

    def forward(self, left, dec_in, training=False, rng=None):
        """Teacher-forced predictions (B, L, 6) for normalized inputs."""
        f_en = self.encode(left, training, rng)
        f_de = self.decode_masked(dec_in, training, rng)
        f_g = self.graph_features(f_en, f_de)
        return self.enc_dec_attend_and_predict(f_g, f_de, training, rng)

    __call__ = forward

    # ---- inference ---------------------------------------------------------
    def generate(self, left_norm):
        """Autoregressive follower (L, 6) in normalized units, one step at a time."""
        left_norm = np.asarray(left_norm, dtype=float)
        L = len(left_norm)
        self._check_len(L)
        cfg = self.config
        with T.no_grad():
            f_en = self.encode(left_norm).data[0]
        p = {k: v.data for k, v in self.params.items()}
        D, m, c = cfg.h_em, cfg.m, cfg.chunk
        dec_blocks = [_StepBlock(p, f"dec.{i}.", cfg.heads, D, L) for i in range(cfg.n_layers)]
        gblock_attn = _StepAttention(p, "gattn.attn.", cfg.heads, D, L)
        out = np.empty((L, m))
        prev = np.zeros(m)
        for t in range(L):
            h = (prev[:, None] * p["dec_embed.w"] + p["dec_embed.b"]).reshape(-1) + self.pe[t]
            for blk in dec_blocks:
                h = blk(h)
            nodes = np.concatenate([f_en[t].reshape(m, c), h.reshape(m, c)], axis=0)
            g = np.maximum(self.adjacency @ nodes @ p["graph.w"] + p["graph.b"], 0.0).mean(axis=0)
            f_g = np.maximum(g @ p["graph.ff.w1"] + p["graph.ff.b1"], 0.0) @ p["graph.ff.w2"] + p["graph.ff.b2"]
            z = _np_ln(h + gblock_attn(f_g), p["gattn.ln1.g"], p["gattn.ln1.b"])
            ff = np.maximum(z @ p["gattn.ff.w1"] + p["gattn.ff.b1"], 0.0) @ p["gattn.ff.w2"] + p["gattn.ff.b2"]
            z = _np_ln(z + ff, p["gattn.ln2.g"], p["gattn.ln2.b"])
            prev = z @ p["head.w"] + p["head.b"]
            if not np.all(np.isfinite(prev)):
                raise DivergenceError(f"diverged rollout at step {t}", step=t)
            out[t] = prev
        return out


def shift_right(right_norm):
    """Decoder input: zero start token followed by all but the last follower pose."""
    right_norm = np.asarray(right_norm, dtype=float)
    out = np.zeros_like(right_norm)
    out[..., 1:, :] = right_norm[..., :-1, :]
    return out


def rollout_autoregressive(left, model, stats_left, stats_right):
    """Generate the follower trajectory for a leader ``PoseSeq`` in physical units."""
    left_norm = apply_norm(left.poses, stats_left)
    pred = model.generate(left_norm)
    return PoseSeq(left.t, invert_norm(pred, stats_right))


# -- checkpoint I/O ------------------------------------------------------------


def save_checkpoint(path, model, extra=None, arrays=None):
    """Write ``magic | u64 header length | JSON header | float64 blobs``.

    The header lists every array as ``{name, shape, offset, count}`` with
    offsets in float64 elements from the start of the data section.
    """
    blobs = {k: model.params[k].data for k in sorted(model.params)}
    for k in sorted(arrays or {}):
        blobs[k] = np.asarray(arrays[k], dtype=float)
    index, offset = [], 0
    for name, arr in blobs.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    header = {"format": "stirfry-checkpoint", "version": 1, "config": model.config.to_dict(),
              "extra": extra or {}, "arrays": index}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for arr in blobs.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(model, extra, other_arrays)``; raise :class:`CheckpointError` on damage."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from None
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes {raw[:len(CKPT_MAGIC)]!r}")
    pos = len(CKPT_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if pos + hlen > len(raw):
        raise CheckpointError(f"{path}: header length {hlen} runs past end of file ({len(raw)} bytes)")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON ({exc})") from None
    pos += hlen
    data = raw[pos:]
    if len(data) % 8:
        raise CheckpointError(f"{path}: data section of {len(data)} bytes is not a whole number of float64")
    values = np.frombuffer(data, dtype="<f8")
    try:
        config = ModelConfig.from_dict(header["config"])
        arrays = {}
        for entry in header["arrays"]:
            lo, n = int(entry["offset"]), int(entry["count"])
            shape = tuple(entry["shape"])
            if lo + n > values.size or int(np.prod(shape)) != n:
                raise CheckpointError(f"{path}: array {entry['name']} out of bounds or mis-shaped")
            arrays[entry["name"]] = values[lo:lo + n].reshape(shape).astype(float)
        expected = sum(int(e["count"]) for e in header["arrays"])
    except (KeyError, TypeError, ValueError, ContractError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from None
    if expected != values.size:
        raise CheckpointError(f"{path}: header describes {expected} values, file holds {values.size}")
    names = set(param_shapes(config))
    params = {k: Tensor(arrays.pop(k), requires_grad=True, name=k) for k in sorted(names & set(arrays))}
    try:
        model = TransducerModel(config, params)
    except ContractError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model, header.get("extra", {}), arrays


# -- estimator -----------------------------------------------------------------


class StructuredTransformer(RegressorMixin, BaseEstimator):
    """Leader->follower sequence regressor.

    ``X`` and ``y`` are lists of (n_i, 6) pose arrays (or :class:`PoseSeq`)
    with matching lengths. ``predict`` decodes autoregressively and returns
    follower arrays in physical units.
    """

    def __init__(self, h_em=210, n_layers=3, heads=3, d_ff=420, gcn_hidden=70, dropout=0.1,
                 max_len=1024, causal_encoder=True, epochs=100, batch_size=4, lr=1e-3,
                 warmup_epochs=5, gamma=0.1, seed=0, verbose=False):
        self.h_em = h_em
        self.n_layers = n_layers
        self.heads = heads
        self.d_ff = d_ff
        self.gcn_hidden = gcn_hidden
        self.dropout = dropout
        self.max_len = max_len
        self.causal_encoder = causal_encoder
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.gamma = gamma
        self.seed = seed
        self.verbose = verbose

    def _model_config(self):
        return ModelConfig(h_em=self.h_em, n_layers=self.n_layers, heads=self.heads, d_ff=self.d_ff,
                           gcn_hidden=self.gcn_hidden, dropout=self.dropout, max_len=self.max_len,
                           causal_encoder=self.causal_encoder, seed=self.seed)

    def fit(self, X, y, X_val=None, y_val=None):
        from .training import TrainConfig, train

        X = check_sequence_list(X, "X")
        y = check_sequence_list(y, "y")
        if len(X) != len(y) or any(len(a) != len(b) for a, b in zip(X, y)):
            raise ContractError("X and y must hold sequences of matching lengths")
        val = None
        if X_val is not None:
            val = list(zip(check_sequence_list(X_val, "X_val"), check_sequence_list(y_val, "y_val")))
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                          warmup_epochs=self.warmup_epochs, gamma=self.gamma, seed=self.seed)
        model = TransducerModel(self._model_config())
        result = train(model, list(zip(X, y)), cfg, val_pairs=val, verbose=self.verbose)
        self.model_ = result.model
        self.stats_left_ = result.stats_left
        self.stats_right_ = result.stats_right
        self.report_ = result.report
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        out = []
        for left in check_sequence_list(X, "X"):
            pred = self.model_.generate(apply_norm(left, self.stats_left_))
            out.append(invert_norm(pred, self.stats_right_))
        return out

    def score(self, X, y, sample_weight=None):
        """Negative mean normalized DTW of the autoregressive predictions."""
        from .training import normalized_dtw

        preds = self.predict(X)
        ys = check_sequence_list(y, "y")
        return -float(np.mean([normalized_dtw(p, t, self.stats_right_) for p, t in zip(preds, ys)]))
