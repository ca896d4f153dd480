"""Hierarchical multi-interest co-network: towers, aggregation and loss.

All forward functions work on a leading batch axis: sequences come in as
``(B, l)`` index arrays, interest centers are ``(B, n, D)`` tensors and item
vectors ``(B, 1, D)``.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import PAD, N_ACTIVITY_BUCKETS, BehaviorSample, SampleSet
from .tensor import Parameter, ParamSet, Tensor

BRANCHES = ("long", "short")


@dataclass
class HcnConfig:
    n: int = 8
    h: int = 4
    r: int = 4
    D: int = 48
    l_long: int = 120
    l_short: int = 30
    n_items: int = 2
    n_categories: int = 2
    user_feature_sizes: Optional[list] = None  # None: [activity buckets, n_categories]
    use_cin: bool = True
    use_hin: bool = True
    single_vector: bool = False
    tower: str = "hcn"  # or "mean_pool"
    tie_branches: bool = False
    dtype: str = "float64"
    embed_std: Optional[float] = None  # None: Glorot like every other matrix

    def __post_init__(self):
        if self.user_feature_sizes is not None:
            self.user_feature_sizes = list(self.user_feature_sizes)
        if min(self.n, self.h, self.r, self.D) < 1:
            raise ValueError("n, h, r and D must all be >= 1")
        if self.D % self.h:
            raise ValueError(f"D={self.D} is not divisible by h={self.h}")
        if self.tower not in ("hcn", "mean_pool"):
            raise ValueError(f"unknown tower {self.tower!r}")
        if not self.l_long >= self.l_short >= 1:
            raise ValueError("need l_long >= l_short >= 1")

    @property
    def feature_sizes(self) -> list:
        if self.user_feature_sizes is not None:
            return self.user_feature_sizes
        return [N_ACTIVITY_BUCKETS, self.n_categories]

    @property
    def n_eff(self) -> int:
        return 1 if (self.single_vector or self.tower == "mean_pool") else self.n

    @property
    def r_eff(self) -> int:
        return self.r if self.use_hin else 1

    @property
    def head_dim(self) -> int:
        return self.D // self.h

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "HcnConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "HcnConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_(self, **changes) -> "HcnConfig":
        return replace(self, **changes)


# --------------------------------------------------------------------------
# parameters

def init_params(config: HcnConfig, seed: int = 0) -> ParamSet:
    """Glorot-uniform weights, zero biases, Normal(0, 1/sqrt(D)) seed matrices.

    Embedding tables are Glorot too unless ``config.embed_std`` asks for a
    normal init.  Padding rows start (and stay) at zero.
    """
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    D, n = config.D, config.n_eff
    ps = ParamSet()

    def W(name, fan_in, fan_out):
        ps.add(Parameter(name, T.glorot(rng, fan_in, fan_out, dt)))

    def b(name, width):
        ps.add(Parameter(name, np.zeros((1, width), dtype=dt)))

    def E(name, rows):
        if config.embed_std is None:
            W(name, rows, D)
        else:
            ps.add(Parameter(name, rng.normal(0.0, config.embed_std, (rows, D)).astype(dt)))

    E("emb.item", config.n_items)
    E("emb.category", config.n_categories)
    for name in ("emb.item", "emb.category"):
        ps[name].data[PAD] = 0.0

    if config.tower == "mean_pool":
        W("pool.W", D, D)
        b("pool.b", D)
    else:
        for k, size in enumerate(config.feature_sizes):
            E(f"emb.user_feat{k}", size)
        branches = ("long",) if config.tie_branches else BRANCHES
        for br in branches:
            ps.add(Parameter(f"hin.{br}.seed", rng.normal(0.0, 1.0 / math.sqrt(D), (n, D)).astype(dt)))
            for layer in range(1, config.r_eff + 1):
                pre = f"hin.{br}.layer{layer}"
                for hd in range(config.h):
                    for m in ("Wq", "Wk", "Wv"):
                        W(f"{pre}.head{hd}.{m}", D, config.head_dim)
                W(f"{pre}.Wo", D, D)
            W(f"hin.{br}.Wc", config.r_eff * D, D)
            b(f"hin.{br}.bc", D)
        if config.use_cin:
            W("cin.Wh", 4 * D, D)
            b("cin.bh", D)
        else:
            W("fuse.W", 2 * D, D)
            b("fuse.b", D)
        W("user.feat.W", D, D)
        b("user.feat.b", D)
        W("user.WU", 2 * D, D)
        b("user.bU", D)

    W("item.W1", 2 * D, 2 * D)
    b("item.b1", 2 * D)
    W("item.W2", 2 * D, D)
    b("item.b2", D)
    return ps


# --------------------------------------------------------------------------
# attention instrumentation

_COUNTERS: list[list] = []


@contextlib.contextmanager
def count_attention():
    """Collect one record per attention-score matrix built inside the block.

    Each record is ``(tag, rows, cols)`` for a single sample and head, so
    ``rows * cols`` is the number of score elements.
    """
    rec: list = []
    _COUNTERS.append(rec)
    try:
        yield rec
    finally:
        _COUNTERS.remove(rec)


def _note(tag: str, rows: int, cols: int, batch: int) -> None:
    for rec in _COUNTERS:
        rec.extend([(tag, rows, cols)] * batch)


# --------------------------------------------------------------------------
# building blocks

def embed_sequence(seq: np.ndarray, ps: ParamSet, item_category: np.ndarray):
    """Item + category embedding per position; padding rows are zero.

    Returns the ``(B, l, D)`` embedding and the ``(B, l)`` validity mask.
    """
    seq = np.asarray(seq, dtype=np.int64)
    if seq.ndim == 1:
        seq = seq[None, :]
    if seq.size and (seq.min() < 0 or seq.max() >= len(item_category)):
        raise IndexError(f"item index out of range [0, {len(item_category)})")
    items = T.gather_rows(ps["emb.item"], seq, padding_idx=PAD)
    cats = T.gather_rows(ps["emb.category"], item_category[seq], padding_idx=PAD)
    return T.add(items, cats), seq != PAD


def broadcast_batch(x: Tensor, batch: int) -> Tensor:
    """``(n, D)`` -> ``(batch, n, D)``, summing gradients back over the batch."""
    return T._record(np.broadcast_to(x.data, (batch,) + x.shape).copy(), (x,),
                     lambda g: (g.sum(axis=0),))


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, mask: Optional[np.ndarray],
                         ps: ParamSet, prefix: str, h: int, tag: str = "") -> Tensor:
    """Queries ``(B, n, D)`` attend over keys/values ``(B, l, D)``.

    Per head: ``softmax(Q Wq (K Wk)^T / sqrt(D/h)) V Wv``; heads are
    concatenated and mixed by ``Wo``.  The score matrix is ``n x l``.
    """
    if q_in.ndim != 3 or k_in.ndim != 3 or v_in.ndim != 3:
        raise T.ShapeError("multi_head_attention expects batched 3D inputs")
    B, n, D = q_in.shape
    if k_in.shape != v_in.shape or k_in.shape[0] != B or k_in.shape[2] != D:
        raise T.ShapeError(f"attention shapes q={q_in.shape} k={k_in.shape} v={v_in.shape}")
    dh = D // h
    m = None if mask is None else mask[:, None, :]
    heads = []
    for i in range(h):
        q = T.matmul(q_in, ps[f"{prefix}.head{i}.Wq"])
        k = T.matmul(k_in, ps[f"{prefix}.head{i}.Wk"])
        v = T.matmul(v_in, ps[f"{prefix}.head{i}.Wv"])
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
        _note(tag, n, k_in.shape[1], B)
        heads.append(T.matmul(T.softmax_rows(scores, m), v))
    return T.matmul(T.concat_features(heads), ps[f"{prefix}.Wo"])


def hin_forward(seq_emb: Tensor, mask: np.ndarray, ps: ParamSet, branch: str,
                config: HcnConfig) -> Tensor:
    """Stacked seed-query attention; returns ``(B, n, D)`` interest centers.

    Layer 1 queries with the seed matrix, each later layer with the previous
    layer's output.  The centers are an affine map of all layer outputs
    concatenated.
    """
    B = seq_emb.shape[0]
    br = "long" if config.tie_branches else branch
    c = broadcast_batch(ps[f"hin.{br}.seed"], B)
    outs = []
    for layer in range(1, config.r_eff + 1):
        c = multi_head_attention(c, seq_emb, seq_emb, mask, ps, f"hin.{br}.layer{layer}",
                                 config.h, tag=f"{branch}.layer{layer}")
        outs.append(c)
    return T.affine(T.concat_features(outs), ps[f"hin.{br}.Wc"], ps[f"hin.{br}.bc"])


def cin_forward(long_c: Tensor, short_c: Tensor, ps: ParamSet) -> Tensor:
    """Co-interest fusion of long- and short-term centers, ``(B, n, D)``."""
    if long_c.shape != short_c.shape:
        raise T.ShapeError(f"cin_forward: {long_c.shape} vs {short_c.shape}")
    e = T.matmul(long_c, T.transpose(short_c))  # (B, n, n)
    long_rec = T.matmul(T.softmax_rows(e), short_c)
    short_rec = T.matmul(T.softmax_rows(T.transpose(e)), long_c)
    fused = T.concat_features([long_c, long_rec, short_c, short_rec])
    return T.affine(fused, ps["cin.Wh"], ps["cin.bh"])


def user_feature_vector(features: np.ndarray, ps: ParamSet, config: HcnConfig) -> Tensor:
    """``(B, 1, D)`` embedding of the user's statistical features."""
    features = np.asarray(features, dtype=np.int64).reshape(len(features), -1)
    total = None
    for k, size in enumerate(config.feature_sizes):
        col = features[:, k:k + 1] if k < features.shape[1] else np.zeros((len(features), 1), np.int64)
        idx = np.clip(col, 0, size - 1)
        e = T.gather_rows(ps[f"emb.user_feat{k}"], idx)
        total = e if total is None else T.add(total, e)
    return T.affine(total, ps["user.feat.W"], ps["user.feat.b"])


def user_tower(long_seq, short_seq, features, ps: ParamSet, config: HcnConfig,
               item_category: np.ndarray) -> Tensor:
    """User-side output ``(B, n_eff, D)``."""
    if config.tower == "mean_pool":
        return mean_pooling_tower(long_seq, short_seq, ps, item_category)
    centers = {}
    for branch, seq in (("long", long_seq), ("short", short_seq)):
        emb, mask = embed_sequence(seq, ps, item_category)
        centers[branch] = hin_forward(emb, mask, ps, branch, config)
    if config.use_cin:
        behavior = cin_forward(centers["long"], centers["short"], ps)
    else:
        behavior = T.affine(T.concat_features([centers["long"], centers["short"]]),
                            ps["fuse.W"], ps["fuse.b"])
    stats = T.repeat_rows(user_feature_vector(features, ps, config), config.n_eff)
    return T.affine(T.concat_features([behavior, stats]), ps["user.WU"], ps["user.bU"])


def mean_pooling_tower(long_seq, short_seq, ps: ParamSet, item_category: np.ndarray) -> Tensor:
    """Masked mean of all behavior embeddings, then an affine map: ``(B, 1, D)``."""
    emb_l, mask_l = embed_sequence(long_seq, ps, item_category)
    emb_s, mask_s = embed_sequence(short_seq, ps, item_category)
    count = np.maximum(mask_l.sum(1) + mask_s.sum(1), 1).astype(emb_l.data.dtype)[:, None]
    wl = T.constant((mask_l / count)[:, None, :].astype(emb_l.data.dtype))
    ws = T.constant((mask_s / count)[:, None, :].astype(emb_l.data.dtype))
    pooled = T.add(T.matmul(wl, emb_l), T.matmul(ws, emb_s))
    return T.affine(pooled, ps["pool.W"], ps["pool.b"])


def item_tower(items, ps: ParamSet, item_category: np.ndarray,
               categories: Optional[np.ndarray] = None) -> Tensor:
    """Item-side output ``(B, 1, D)``; reads nothing but item inputs."""
    items = np.asarray(items, dtype=np.int64).reshape(-1, 1)
    if items.size and (items.min() < 0 or items.max() >= ps["emb.item"].shape[0]):
        raise IndexError("item index out of range")
    cats = item_category[items] if categories is None else np.asarray(categories).reshape(-1, 1)
    x = T.concat_features([T.gather_rows(ps["emb.item"], items, padding_idx=PAD),
                           T.gather_rows(ps["emb.category"], cats, padding_idx=PAD)])
    hidden = T.relu(T.affine(x, ps["item.W1"], ps["item.b1"]))
    return T.affine(hidden, ps["item.W2"], ps["item.b2"])


def aggregate_score(user_vecs: Tensor, item_vec: Tensor) -> Tensor:
    """Item-conditioned softmax pooling of user vectors, scored by inner product.

    ``user_vecs`` is ``(B, n, D)``, ``item_vec`` ``(B, 1, D)``; returns ``(B, 1)``.
    """
    item_t = T.transpose(item_vec)  # (B, D, 1)
    alpha = T.softmax_rows(T.transpose(T.matmul(user_vecs, item_t)))  # (B, 1, n)
    pooled = T.matmul(alpha, user_vecs)
    y = T.matmul(pooled, item_t)
    return T.reshape(y, (y.shape[0], 1))


# --------------------------------------------------------------------------
# the model

class HCN:
    """Parameters, configuration and the item -> category map, bundled."""

    def __init__(self, config: HcnConfig, item_category: Optional[np.ndarray] = None,
                 seed: int = 0, params: Optional[ParamSet] = None):
        self.config = config
        if item_category is None:
            item_category = np.ones(config.n_items, dtype=np.int64)
            item_category[PAD] = PAD
        self.item_category = np.asarray(item_category, dtype=np.int64)
        if len(self.item_category) != config.n_items:
            raise ValueError("item_category length must equal n_items")
        self.params = params if params is not None else init_params(config, seed)

    def user_tower(self, long_seq, short_seq, features) -> Tensor:
        return user_tower(long_seq, short_seq, features, self.params, self.config,
                          self.item_category)

    def item_tower(self, items) -> Tensor:
        return item_tower(items, self.params, self.item_category)

    def user_vectors(self, samples) -> np.ndarray:
        """``(B, n, D)`` user outputs for a SampleSet or a list of samples."""
        s = _as_sampleset(samples)
        return self.user_tower(s.long_seq, s.short_seq, s.features).data

    def scores(self, samples) -> Tensor:
        """Logits ``(B, 1)``; the user tower runs once per sample group."""
        s = _as_sampleset(samples)
        groups, first, inverse = np.unique(s.group, return_index=True, return_inverse=True)
        xu = self.user_tower(s.long_seq[first], s.short_seq[first], s.features[first])
        if len(groups) != len(s):
            xu = T.gather_rows(xu, inverse.reshape(-1))
        return aggregate_score(xu, self.item_tower(s.candidate))

    def forward_loss(self, samples) -> tuple[Tensor, np.ndarray]:
        """Mean logistic loss over the batch and the per-sample logits."""
        s = _as_sampleset(samples)
        if len(s) == 0:
            raise ValueError("forward_loss needs a nonempty batch")
        y = self.scores(s)
        return T.sigmoid_bce(y, s.label.reshape(-1, 1)), y.data[:, 0].copy()

    def item_matrix(self, items=None) -> np.ndarray:
        """``(m, D)`` item-tower outputs (all vocabulary rows by default)."""
        if items is None:
            items = np.arange(self.config.n_items)
        return self.item_tower(items).data[:, 0, :]


def _as_sampleset(samples) -> SampleSet:
    if isinstance(samples, SampleSet):
        return samples
    if isinstance(samples, BehaviorSample):
        samples = [samples]
    return SampleSet.from_samples(list(samples))


def aggregate_scores_np(user_vecs: np.ndarray, item_mat: np.ndarray) -> np.ndarray:
    """Serving-side aggregation of one or many users against many items.

    ``user_vecs`` is ``(n, D)`` or ``(G, n, D)``, ``item_mat`` ``(m, D)``;
    returns ``(m,)`` or ``(G, m)`` logits.  Per item this is O(n*D).
    """
    squeeze = user_vecs.ndim == 2
    u = user_vecs[None] if squeeze else user_vecs
    logits = np.einsum("gnd,md->gmn", u, item_mat)
    mx = logits.max(axis=-1, keepdims=True)
    w = np.exp(logits - mx)
    w /= w.sum(axis=-1, keepdims=True)
    y = (w * logits).sum(axis=-1)
    return y[0] if squeeze else y
