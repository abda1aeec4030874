"""Synthetic labeled multi-relational graphs with per-(relation, class)
homophily targets, class imbalance and class-separated features."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graph import BOT, HUMAN, UNLABELED, LabeledSplit, MultiRelationGraph

CLASS_KEYS = {"human": HUMAN, "bot": BOT}


@dataclass
class RelationSpec:
    name: str
    mean_out_degree_per_class: dict[str, float]
    homophily_target: dict[str, float]


@dataclass
class FeatureTypeSpec:
    name: str
    dim: int
    class_mean_separation: float = 1.0
    noise_std: float = 1.0


@dataclass
class SynthProfile:
    n: int
    bot_fraction: float
    relations: list[RelationSpec]
    feature_types: list[FeatureTypeSpec]
    label_coverage: float = 1.0
    split_fractions: dict[str, float] = field(
        default_factory=lambda: {"train": 0.6, "val": 0.2, "test": 0.2}
    )

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("profile needs at least one node")
        if not 0.0 < self.bot_fraction < 1.0:
            raise ValueError("bot_fraction must lie in (0, 1)")
        if not 0.0 < self.label_coverage <= 1.0:
            raise ValueError("label_coverage must lie in (0, 1]")
        fr = self.split_fractions
        if set(fr) != {"train", "val", "test"} or any(v < 0 for v in fr.values()):
            raise ValueError("split_fractions needs non-negative train/val/test")
        if abs(sum(fr.values()) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if not self.relations:
            raise ValueError("profile needs at least one relation")
        for rel in self.relations:
            for key in CLASS_KEYS:
                h = rel.homophily_target[key]
                if not 0.0 <= h <= 1.0:
                    raise ValueError(f"{rel.name}: homophily target {h} outside [0, 1]")
                if rel.mean_out_degree_per_class[key] < 0:
                    raise ValueError(f"{rel.name}: negative degree")
        if not self.feature_types:
            raise ValueError("profile needs at least one feature type")
        for ft in self.feature_types:
            if ft.dim < 1:
                raise ValueError(f"feature type {ft.name}: dim must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthProfile":
        obj = dict(obj)
        obj["relations"] = [RelationSpec(**r) for r in obj["relations"]]
        obj["feature_types"] = [FeatureTypeSpec(**f) for f in obj["feature_types"]]
        prof = cls(**obj)
        prof.validate()
        return prof

    @classmethod
    def from_json(cls, text: str) -> "SynthProfile":
        return cls.from_dict(json.loads(text))

    def with_n(self, n: int) -> "SynthProfile":
        return SynthProfile.from_dict({**asdict(self), "n": int(n)})


def _twibot_features() -> list[FeatureTypeSpec]:
    # four account-feature families, as in common bot-detection pipelines
    return [
        FeatureTypeSpec("description", 16),
        FeatureTypeSpec("tweets", 16),
        FeatureTypeSpec("numerical", 5),
        FeatureTypeSpec("categorical", 3),
    ]


def builtin_profiles() -> dict[str, SynthProfile]:
    tw20 = SynthProfile(
        n=2000,
        bot_fraction=6589 / (6589 + 5237),
        relations=[
            RelationSpec("follower", {"human": 8.0, "bot": 8.0}, {"human": 0.8144, "bot": 0.2899}),
            RelationSpec("following", {"human": 8.0, "bot": 8.0}, {"human": 0.3356, "bot": 0.7527}),
        ],
        feature_types=_twibot_features(),
        label_coverage=0.3,
    )
    tw22 = SynthProfile(
        n=2000,
        bot_fraction=139943 / 1_000_000,
        relations=[
            RelationSpec("follower", {"human": 4.0, "bot": 4.0}, {"human": 0.8805, "bot": 0.1655}),
            RelationSpec("following", {"human": 4.0, "bot": 4.0}, {"human": 0.9620, "bot": 0.0625}),
        ],
        feature_types=_twibot_features(),
        label_coverage=1.0,
    )

    def uniform(h: float) -> SynthProfile:
        return SynthProfile(
            n=2000,
            bot_fraction=0.5,
            relations=[
                RelationSpec(name, {"human": 4.0, "bot": 4.0}, {"human": h, "bot": h})
                for name in ("follower", "following")
            ],
            feature_types=_twibot_features(),
            label_coverage=1.0,
        )

    return {
        "twibot20-like": tw20,
        "twibot22-like": tw22,
        "uniform-homophilic": uniform(0.95),
        "uniform-heterophilic": uniform(0.15),
    }


def load_profile(ref: str) -> SynthProfile:
    """A builtin profile name or a path to a profile JSON file."""
    profiles = builtin_profiles()
    if ref in profiles:
        return profiles[ref]
    path = Path(ref)
    if not path.is_file():
        raise ValueError(f"unknown profile {ref!r}; builtins: {sorted(profiles)}")
    return SynthProfile.from_json(path.read_text(encoding="utf-8"))


def _distinct(rng: np.random.Generator, pool: np.ndarray, k: int, exclude: int) -> np.ndarray:
    """``k`` distinct members of ``pool`` other than ``exclude``."""
    avail = pool.size - int(exclude in pool)
    k = min(k, avail)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if 3 * k > avail:
        cand = pool[pool != exclude]
        return rng.choice(cand, size=k, replace=False)
    chosen: list[int] = []
    seen = {exclude}
    while len(chosen) < k:
        j = int(pool[rng.integers(pool.size)])
        if j not in seen:
            seen.add(j)
            chosen.append(j)
    return np.array(chosen, dtype=np.int64)


def _stratified_split(rng, idx: np.ndarray, fractions: dict[str, float]) -> dict[str, np.ndarray]:
    idx = rng.permutation(idx)
    n_train = int(round(fractions["train"] * idx.size))
    n_val = int(round(fractions["val"] * idx.size))
    n_val = min(n_val, idx.size - n_train)
    return {
        "train": idx[:n_train],
        "val": idx[n_train : n_train + n_val],
        "test": idx[n_train + n_val :],
    }


def generate(profile: SynthProfile, seed: int) -> tuple[MultiRelationGraph, LabeledSplit]:
    profile.validate()
    rng = np.random.default_rng(seed)
    n = profile.n
    y = (rng.random(n) < profile.bot_fraction).astype(np.int64)
    members = {c: np.flatnonzero(y == c) for c in (HUMAN, BOT)}
    for c, idx in members.items():
        if idx.size == 0:
            raise ValueError(f"generated graph has no {'bot' if c else 'human'} nodes; raise n")

    relations = []
    for rel in profile.relations:
        edges: list[np.ndarray] = []
        for cname, c in CLASS_KEYS.items():
            deg = rel.mean_out_degree_per_class[cname]
            h = rel.homophily_target[cname]
            same, other = members[c], members[1 - c]
            for i in members[c]:
                k = int(rng.poisson(deg))
                if k == 0:
                    continue
                k_same = int(rng.binomial(k, h))
                dst = np.concatenate(
                    [_distinct(rng, same, k_same, int(i)), _distinct(rng, other, k - k_same, int(i))]
                )
                edges.append(np.column_stack([np.full(dst.size, i), dst]))
        e = np.concatenate(edges) if edges else np.empty((0, 2), dtype=np.int64)
        relations.append(e[np.lexsort((e[:, 1], e[:, 0]))])

    features = []
    for ft in profile.feature_types:
        u = rng.normal(size=ft.dim)
        u /= np.linalg.norm(u)
        centre = rng.normal(size=ft.dim)
        mu = np.stack([centre - 0.5 * ft.class_mean_separation * u, centre + 0.5 * ft.class_mean_separation * u])
        features.append(mu[y] + rng.normal(scale=ft.noise_std, size=(n, ft.dim)))

    labels = np.full(n, UNLABELED, dtype=np.int64)
    parts = {"train": [], "val": [], "test": []}
    for c, idx in members.items():
        k = int(round(profile.label_coverage * idx.size))
        chosen = np.sort(rng.choice(idx, size=k, replace=False))
        labels[chosen] = c
        for key, ids in _stratified_split(rng, chosen, profile.split_fractions).items():
            parts[key].append(ids)

    width = len(str(n - 1))
    g = MultiRelationGraph(
        n=n,
        relations=relations,
        features=features,
        relation_names=[r.name for r in profile.relations],
        feature_names=[f.name for f in profile.feature_types],
        node_ids=[f"u{i:0{width}d}" for i in range(n)],
    )
    s = LabeledSplit(labels, *(np.sort(np.concatenate(parts[k])) for k in ("train", "val", "test")))
    return g, s
