"""Heterophily-aware relational encoder.

Feature fusion runs a one-layer, one-head transformer over the per-type
feature tokens of each node.  Each aggregation layer weighs every neighbour
channel by a coefficient in (-1, 1), so a neighbour can be pulled towards
(positive) or pushed away from (negative) the centre node, then averages the
per-relation messages.  A softmax-attention variant and a plain
mean-aggregation baseline share the same plumbing.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .graph import MultiRelationGraph
from .numcore import SegmentIndex, Tensor

Params = dict[str, Tensor]


@dataclass
class EncoderConfig:
    feature_dims: list[int]
    n_relations: int
    hidden: int = 32
    layers: int = 2
    lambdas: list[float] = field(default_factory=lambda: [1.0, 1.0])
    proj_dim: int = 32
    att_dropout: float = 0.3
    mlp_dropout: float = 0.5
    attention: str = "tanh"  # tanh | softmax | mean
    direction: str = "in"  # in | out | both
    slope: float = 0.01
    n_classes_head: int = 0  # >0 adds a linear classification head on z

    def __post_init__(self):
        self.feature_dims = [int(d) for d in self.feature_dims]
        self.lambdas = [float(v) for v in self.lambdas]
        if len(self.lambdas) != self.layers:
            raise ValueError(f"need one lambda per layer ({self.layers}), got {self.lambdas}")
        if self.attention not in ("tanh", "softmax", "mean"):
            raise ValueError(f"unknown attention {self.attention!r}")
        if self.direction not in ("in", "out", "both"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if not self.feature_dims:
            raise ValueError("at least one feature type required")


@dataclass
class EncoderOutput:
    h0: Tensor
    hL: Tensor
    hidden: list[Tensor] = field(default_factory=list)


class GraphView:
    """Features plus edges as seen by the encoder, with neighbour indices
    cached per aggregation direction."""

    def __init__(self, features: Sequence[np.ndarray], relations: Sequence[np.ndarray]):
        self.features = [np.asarray(x, dtype=np.float64) for x in features]
        self.relations = [np.asarray(e, dtype=np.int64).reshape(-1, 2) for e in relations]
        self.n = self.features[0].shape[0]
        self._cache: dict[str, list[tuple[SegmentIndex, SegmentIndex]]] = {}

    @classmethod
    def of(cls, g: MultiRelationGraph) -> "GraphView":
        return cls(g.features, g.relations)

    def neighbours(self, direction: str) -> list[tuple[SegmentIndex, SegmentIndex]]:
        """Per relation: (target index, neighbour index) with one entry per
        message; a message from ``nbr`` lands on ``tgt``."""
        if direction not in self._cache:
            out = []
            for e in self.relations:
                if direction == "in":
                    tgt, nbr = e[:, 1], e[:, 0]
                elif direction == "out":
                    tgt, nbr = e[:, 0], e[:, 1]
                else:
                    pairs = np.concatenate([e[:, ::-1], e])
                    pairs = np.unique(pairs, axis=0) if pairs.size else pairs
                    tgt, nbr = pairs[:, 0], pairs[:, 1]
                out.append((SegmentIndex(tgt, self.n), SegmentIndex(nbr, self.n)))
            self._cache[direction] = out
        return self._cache[direction]


# ---------------------------------------------------------------- params


def _xavier(rng, fan_in: int, fan_out: int) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_params(cfg: EncoderConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    d = cfg.hidden
    p: Params = {}
    for t, dt in enumerate(cfg.feature_dims):
        p[f"fusion.align{t}.W"] = _xavier(rng, dt, d)
        p[f"fusion.align{t}.b"] = _zeros(1, d)
    for name in ("Wq", "Wk", "Wv", "Wo"):
        p[f"fusion.attn.{name}"] = _xavier(rng, d, d)
    p["fusion.ln1.gain"], p["fusion.ln1.bias"] = _ones(1, d), _zeros(1, d)
    p["fusion.ffn.W1"], p["fusion.ffn.b1"] = _xavier(rng, d, 2 * d), _zeros(1, 2 * d)
    p["fusion.ffn.W2"], p["fusion.ffn.b2"] = _xavier(rng, 2 * d, d), _zeros(1, d)
    p["fusion.ln2.gain"], p["fusion.ln2.bias"] = _ones(1, d), _zeros(1, d)
    T = len(cfg.feature_dims)
    p["fusion.W_I"], p["fusion.b_I"] = _xavier(rng, T * d, d), _zeros(1, d)
    for l in range(1, cfg.layers + 1):
        p[f"layer{l}.W_A"] = _xavier(rng, d, d)
        p[f"layer{l}.Q"] = _ones(1, d)
        p[f"layer{l}.K"] = _ones(1, d)
        for r in range(cfg.n_relations):
            p[f"layer{l}.W_r{r}"] = _xavier(rng, d, d)
    p["proj.W1"], p["proj.b1"] = _xavier(rng, d, cfg.proj_dim), _zeros(1, cfg.proj_dim)
    p["proj.W2"], p["proj.b2"] = _xavier(rng, cfg.proj_dim, cfg.proj_dim), _zeros(1, cfg.proj_dim)
    if cfg.n_classes_head:
        p["head.W"] = _xavier(rng, cfg.proj_dim, cfg.n_classes_head)
        p["head.b"] = _zeros(1, cfg.n_classes_head)
    return p


def _mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    return rng.random(shape, dtype=np.float32) >= np.float32(p)


# ---------------------------------------------------------------- fusion


def fuse_features(features: Sequence, params: Params, cfg: EncoderConfig) -> Tensor:
    """Per-node transformer over feature-type tokens, then sigma(W_I x + b_I).

    The T aligned tokens of node i occupy rows ``i*T .. i*T+T-1`` of one
    stacked matrix, so attention never mixes nodes."""
    if len(features) != len(cfg.feature_dims):
        raise ValueError(f"expected {len(cfg.feature_dims)} feature blocks, got {len(features)}")
    d = cfg.hidden
    slope = cfg.slope
    aligned = []
    for t, x in enumerate(features):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1] != cfg.feature_dims[t]:
            raise ValueError(f"feature block {t}: dim {x.shape[1]} != {cfg.feature_dims[t]}")
        aligned.append(x @ params[f"fusion.align{t}.W"] + params[f"fusion.align{t}.b"])
    T = len(aligned)
    n = aligned[0].shape[0]
    tok = nc.reshape(nc.concat(aligned), (n * T, d)) if T > 1 else aligned[0]
    att = nc.group_attention(
        tok @ params["fusion.attn.Wq"],
        tok @ params["fusion.attn.Wk"],
        tok @ params["fusion.attn.Wv"],
        T,
    )
    x = nc.layer_norm_rows(tok + att @ params["fusion.attn.Wo"])
    x = x * params["fusion.ln1.gain"] + params["fusion.ln1.bias"]
    ff = nc.leaky_relu(x @ params["fusion.ffn.W1"] + params["fusion.ffn.b1"], slope)
    ff = ff @ params["fusion.ffn.W2"] + params["fusion.ffn.b2"]
    x = nc.layer_norm_rows(x + ff)
    x = x * params["fusion.ln2.gain"] + params["fusion.ln2.bias"]
    x0 = nc.reshape(x, (n, T * d)) if T > 1 else x
    return nc.leaky_relu(x0 @ params["fusion.W_I"] + params["fusion.b_I"], slope)


# ---------------------------------------------------------------- aggregation


def edge_attention(h: Tensor, i_idx, j_idx, params: Params, layer: int) -> Tensor:
    """Channel-wise coefficient for each pair (i, j): tanh of the symmetrised
    query-key product, one row per pair."""
    n = h.shape[0]
    i_idx, j_idx = nc.as_index(i_idx, n), nc.as_index(j_idx, n)
    u = h @ params[f"layer{layer}.W_A"]
    q = u * params[f"layer{layer}.Q"]
    k = u * params[f"layer{layer}.K"]
    return _alpha(q, k, i_idx, j_idx)


def _alpha(q: Tensor, k: Tensor, i_idx, j_idx) -> Tensor:
    qi, kj = nc.gather_rows(q, i_idx), nc.gather_rows(k, j_idx)
    qj, ki = nc.gather_rows(q, j_idx), nc.gather_rows(k, i_idx)
    return nc.tanh(nc.scale(qi * kj + qj * ki, 0.5))


def _softmax_weights(q: Tensor, k: Tensor, tgt: SegmentIndex, nbr: SegmentIndex) -> Tensor:
    qi, kj = nc.gather_rows(q, tgt), nc.gather_rows(k, nbr)
    qj, ki = nc.gather_rows(q, nbr), nc.gather_rows(k, tgt)
    d = q.shape[1]
    score = nc.scale(nc.sum(qi * kj + qj * ki, axis=1), 0.5 / math.sqrt(d))
    return nc.segment_softmax(score, tgt)


def relational_aggregate(
    h: Tensor,
    view: GraphView,
    params: Params,
    layer: int,
    cfg: EncoderConfig,
    rng: np.random.Generator | None = None,
    alpha_override: float | None = None,
    fused: bool = True,
) -> Tensor:
    """One aggregation layer: per relation W_r(lambda h_i + mean_j alpha_ij * h_j),
    averaged over relations.  ``rng`` switches on attention dropout;
    ``alpha_override`` pins every coefficient to a constant (for probing the
    low-/high-pass limits).  ``fused=False`` spells the tanh path out in
    primitive ops; both paths agree to rounding."""
    n, d = h.shape
    lam = cfg.lambdas[layer - 1]
    struct = view.neighbours(cfg.direction)
    if cfg.attention != "mean":
        u = h @ params[f"layer{layer}.W_A"]
        q = u * params[f"layer{layer}.Q"]
        k = u * params[f"layer{layer}.K"]
    total = None
    for r, (tgt, nbr) in enumerate(struct):
        hj = None if (cfg.attention == "tanh" and fused and alpha_override is None) else nc.gather_rows(h, nbr)
        if cfg.attention == "mean":
            agg = nc.segment_mean(hj, tgt)
            base = h
        elif cfg.attention == "tanh" and fused and alpha_override is None:
            mask = None
            if rng is not None and cfg.att_dropout > 0:
                mask = _mask(rng, (tgt.ids.size, d), cfg.att_dropout)
            agg = nc.channel_attention_mean(q, k, h, tgt, nbr, mask, cfg.att_dropout)
            base = nc.scale(h, lam)
        elif cfg.attention == "tanh":
            if alpha_override is not None:
                a = Tensor(np.full((tgt.ids.size, d), float(alpha_override)))
            else:
                a = _alpha(q, k, tgt, nbr)
                if rng is not None and cfg.att_dropout > 0:
                    a = nc.dropout(a, _mask(rng, a.shape, cfg.att_dropout), cfg.att_dropout)
            agg = nc.segment_mean(a * hj, tgt)
            base = nc.scale(h, lam)
        else:
            w = _softmax_weights(q, k, tgt, nbr)
            if rng is not None and cfg.att_dropout > 0:
                w = nc.dropout(w, _mask(rng, w.shape, cfg.att_dropout), cfg.att_dropout)
            agg = nc.segment_sum((w @ Tensor(np.ones((1, d)))) * hj, tgt)
            base = nc.scale(h, lam)
        hr = (base + agg) @ params[f"layer{layer}.W_r{r}"]
        total = hr if total is None else total + hr
    return nc.scale(total, 1.0 / len(struct))


def encode(
    view: GraphView,
    params: Params,
    cfg: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    h0: Tensor | None = None,
) -> EncoderOutput:
    """``h0`` may be supplied when the fused input is already known (fusion
    is per node, so a row-permuted view can reuse a gathered copy)."""
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout masks")
    drop_rng = rng if train else None
    if h0 is None:
        h0 = fuse_features(view.features, params, cfg)
    h = h0
    hidden = []
    for l in range(1, cfg.layers + 1):
        if drop_rng is not None and cfg.mlp_dropout > 0:
            h = nc.dropout(h, _mask(drop_rng, h.shape, cfg.mlp_dropout), cfg.mlp_dropout)
        h = relational_aggregate(h, view, params, l, cfg, rng=drop_rng)
        if l < cfg.layers:
            h = nc.leaky_relu(h, cfg.slope)
        hidden.append(h)
    return EncoderOutput(h0=h0, hL=h, hidden=hidden)


def project(hL: Tensor, params: Params, slope: float = 0.01) -> Tensor:
    hid = nc.leaky_relu(hL @ params["proj.W1"] + params["proj.b1"], slope)
    return hid @ params["proj.W2"] + params["proj.b2"]


def classify_head(z: Tensor, params: Params) -> Tensor:
    return z @ params["head.W"] + params["head.b"]


# ---------------------------------------------------------------- baseline


@dataclass
class BaselineConfig:
    feature_dims: list[int]
    n_relations: int
    hidden: int = 32
    layers: int = 2
    dropout: float = 0.5
    direction: str = "in"
    slope: float = 0.01


def init_baseline(cfg: BaselineConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    d = cfg.hidden
    p: Params = {
        "input.W": _xavier(rng, int(np.sum(cfg.feature_dims)), d),
        "input.b": _zeros(1, d),
    }
    for l in range(1, cfg.layers + 1):
        for r in range(cfg.n_relations):
            p[f"layer{l}.W_r{r}"] = _xavier(rng, d, d)
    p["head.W"], p["head.b"] = _xavier(rng, d, 2), _zeros(1, 2)
    return p


def mean_aggregate(h: Tensor, view: GraphView, params: Params, layer: int, direction: str = "in") -> Tensor:
    """(1/R) sum_r W_r (h_i + mean of neighbour rows)."""
    struct = view.neighbours(direction)
    total = None
    for r, (tgt, nbr) in enumerate(struct):
        hr = (h + nc.segment_mean(nc.gather_rows(h, nbr), tgt)) @ params[f"layer{layer}.W_r{r}"]
        total = hr if total is None else total + hr
    return nc.scale(total, 1.0 / len(struct))


def baseline_forward(
    view: GraphView,
    params: Params,
    cfg: BaselineConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Returns (final representations, class logits)."""
    x = Tensor(np.concatenate(view.features, axis=1))
    h = nc.leaky_relu(x @ params["input.W"] + params["input.b"], cfg.slope)
    for l in range(1, cfg.layers + 1):
        if train and cfg.dropout > 0:
            h = nc.dropout(h, _mask(rng, h.shape, cfg.dropout), cfg.dropout)
        h = mean_aggregate(h, view, params, l, cfg.direction)
        if l < cfg.layers:
            h = nc.leaky_relu(h, cfg.slope)
    return h, h @ params["head.W"] + params["head.b"]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: Params, path, meta: dict | None = None) -> None:
    """``path``.json manifest plus ``path``.bin little-endian float64 blob."""
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "botscl-checkpoint/1", "dtype": "<f8", "params": entries, "meta": meta or {}}
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_checkpoint(path) -> tuple[Params, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    blob = path.with_suffix(".bin").read_bytes()
    params: Params = {}
    for e in manifest["params"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=e["offset"])
        params[e["name"]] = Tensor(arr.reshape(e["shape"]).astype(np.float64), requires_grad=True)
    return params, manifest["meta"]


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
