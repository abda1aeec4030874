"""Graph augmentations used to build the two contrastive views.

All augmentors are pure functions of (input, seed).  Feature augmentors take
and return a list of per-type blocks; edge augmentors take and return a list
of per-relation (E, 2) arrays.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .graph import BOT, HUMAN, LabeledSplit, MultiRelationGraph

AUGMENTORS = ("cns", "er", "fm", "ea", "identity")
# "cnd" is the name one ablation table uses for the node-shuffling augmentor
ALIASES = {"cnd": "cns"}


def class_aware_node_shuffle(
    features: Sequence[np.ndarray], split: LabeledSplit, seed: int
) -> list[np.ndarray]:
    """Permute feature rows among train nodes of the same class.

    One permutation per class is applied to every block, so a node keeps a
    coherent set of feature types.  Non-train rows are left untouched."""
    rng = np.random.default_rng(seed)
    out = [np.array(x, dtype=np.float64, copy=True) for x in features]
    train = np.asarray(split.train, dtype=np.int64)
    for c in (HUMAN, BOT):
        members = train[split.labels[train] == c]
        if members.size < 2:
            warnings.warn(f"class {c} has {members.size} train node(s); shuffle is the identity")
            continue
        perm = rng.permutation(members)
        for x, src in zip(out, features):
            x[members] = np.asarray(src)[perm]
    return out


def edge_removal(relations: Sequence[np.ndarray], pe: float, seed: int) -> list[np.ndarray]:
    """Keep each edge independently with probability ``1 - pe``."""
    if not 0.0 <= pe < 1.0:
        raise ValueError(f"pe must lie in [0, 1), got {pe}")
    rng = np.random.default_rng(seed)
    out = []
    for e in relations:
        e = np.asarray(e, dtype=np.int64).reshape(-1, 2)
        keep = rng.random(e.shape[0]) >= pe
        out.append(e[keep].copy())
    return out


def feature_mask(features: Sequence[np.ndarray], pf: float, seed: int) -> list[np.ndarray]:
    """Zero each feature column with probability ``pf``; one column mask per
    block, shared by all nodes."""
    if not 0.0 <= pf < 1.0:
        raise ValueError(f"pf must lie in [0, 1), got {pf}")
    rng = np.random.default_rng(seed)
    out = []
    for x in features:
        x = np.array(x, dtype=np.float64, copy=True)
        x[:, rng.random(x.shape[1]) < pf] = 0.0
        out.append(x)
    return out


def edge_add(relations: Sequence[np.ndarray], pa: float, n: int, seed: int) -> list[np.ndarray]:
    """Add ``floor(pa * |E_r|)`` new random (src, dst) pairs to each relation,
    never creating a self-loop or a duplicate."""
    if not 0.0 <= pa < 1.0:
        raise ValueError(f"pa must lie in [0, 1), got {pa}")
    rng = np.random.default_rng(seed)
    out = []
    for e in relations:
        e = np.asarray(e, dtype=np.int64).reshape(-1, 2)
        want = int(np.floor(pa * e.shape[0]))
        room = n * (n - 1) - e.shape[0]
        if want > room:
            raise ValueError(f"cannot add {want} edges; only {room} free pairs")
        seen = set(map(tuple, e.tolist()))
        added: list[tuple[int, int]] = []
        while len(added) < want:
            s, d = (int(v) for v in rng.integers(n, size=2))
            if s != d and (s, d) not in seen:
                seen.add((s, d))
                added.append((s, d))
        extra = np.array(added, dtype=np.int64).reshape(-1, 2)
        out.append(np.concatenate([e, extra]))
    return out


@dataclass
class AugmentConfig:
    alpha: str = "cns"
    beta: str = "er"
    pe: float = 0.3
    pf: float = 0.3
    pa: float = 0.1

    def __post_init__(self):
        self.alpha = ALIASES.get(self.alpha, self.alpha)
        self.beta = ALIASES.get(self.beta, self.beta)
        for side in (self.alpha, self.beta):
            if side not in AUGMENTORS:
                raise ValueError(f"unknown augmentor {side!r}; choose from {AUGMENTORS}")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "AugmentConfig":
        return cls(**json.loads(text))

    @classmethod
    def single(cls, name: str, **probs) -> "AugmentConfig":
        """The same augmentor on both views (independent seeds per view)."""
        return cls(alpha=name, beta=name, **probs)


@dataclass
class View:
    features: list[np.ndarray]
    relations: list[np.ndarray]
    # when set, features[t] == original[t][source_rows] for every block
    source_rows: np.ndarray | None = None


@dataclass
class ViewPair:
    view_alpha: View
    view_beta: View
    seeds: dict = field(default_factory=dict)


def apply_augmentor(
    name: str, g: MultiRelationGraph, split: LabeledSplit, cfg: AugmentConfig, seed: int
) -> View:
    name = ALIASES.get(name, name)
    feats = [np.asarray(x, dtype=np.float64) for x in g.features]
    rels = [np.asarray(e, dtype=np.int64) for e in g.relations]
    rows: np.ndarray | None = np.arange(g.n)
    if name == "cns":
        # shuffling the row ids themselves records where each row came from
        rows = class_aware_node_shuffle([rows[:, None].astype(np.float64)], split, seed)[0]
        rows = rows[:, 0].astype(np.int64)
        feats = [x[rows] for x in feats]
    elif name == "er":
        rels = edge_removal(rels, cfg.pe, seed)
    elif name == "fm":
        feats = feature_mask(feats, cfg.pf, seed)
        rows = None
    elif name == "ea":
        rels = edge_add(rels, cfg.pa, g.n, seed)
    elif name != "identity":
        raise ValueError(f"unknown augmentor {name!r}; choose from {AUGMENTORS}")
    return View([x.copy() for x in feats], [e.copy() for e in rels], rows)


def make_view_pair(
    g: MultiRelationGraph, split: LabeledSplit, cfg: AugmentConfig, seed: int
) -> ViewPair:
    seeds = np.random.SeedSequence(seed).generate_state(2)
    sa, sb = int(seeds[0]), int(seeds[1])
    return ViewPair(
        apply_augmentor(cfg.alpha, g, split, cfg, sa),
        apply_augmentor(cfg.beta, g, split, cfg, sb),
        {"seed": seed, "alpha": sa, "beta": sb},
    )
