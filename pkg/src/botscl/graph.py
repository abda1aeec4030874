"""Directed multi-relational attributed graphs, homophily measurement,
heterophilic-edge masking and on-disk dataset ingestion."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

HUMAN, BOT = 0, 1
UNLABELED = -1
LABEL_NAMES = {HUMAN: "human", BOT: "bot"}
LABEL_CODES = {"human": HUMAN, "bot": BOT}


class DatasetError(ValueError):
    """Base class for dataset validation failures."""


class MissingFileError(DatasetError):
    pass


class DanglingNodeError(DatasetError):
    pass


class RowCountMismatchError(DatasetError):
    pass


class OverlappingSplitsError(DatasetError):
    pass


class UnlabeledSplitMemberError(DatasetError):
    pass


class SelfLoopError(DatasetError):
    pass


class NoLabeledEdgesError(ValueError):
    pass


def _clean_edges(edges, n: int, name: str) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise DanglingNodeError(f"relation {name!r}: edge endpoint outside [0, {n})")
    loops = e[:, 0] == e[:, 1]
    if loops.any():
        i = int(e[loops][0, 0])
        raise SelfLoopError(f"relation {name!r}: self-loop on node {i}")
    if e.shape[0] == 0:
        return e
    # collapse duplicates, keep first-appearance order
    key = e[:, 0] * n + e[:, 1]
    _, first = np.unique(key, return_index=True)
    return e[np.sort(first)]


@dataclass(eq=False)
class MultiRelationGraph:
    """``relations[r]`` is an (E_r, 2) array of ``(src, dst)`` pairs; edge
    ``(i, j)`` runs from ``i`` to ``j``.  ``features[t]`` is an ``n x d_t``
    block for feature type ``t``."""

    n: int
    relations: list[np.ndarray]
    features: list[np.ndarray]
    relation_names: list[str] = field(default_factory=list)
    feature_names: list[str] = field(default_factory=list)
    node_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.n = int(self.n)
        if self.n <= 0:
            raise DatasetError("graph has no nodes")
        if not self.relation_names:
            self.relation_names = [f"rel{r}" for r in range(len(self.relations))]
        if not self.feature_names:
            self.feature_names = [f"type{t}" for t in range(len(self.features))]
        if not self.node_ids:
            self.node_ids = [str(i) for i in range(self.n)]
        if len(self.relation_names) != len(self.relations):
            raise DatasetError("one name per relation required")
        if len(self.feature_names) != len(self.features):
            raise DatasetError("one name per feature type required")
        if len(self.node_ids) != self.n:
            raise RowCountMismatchError(f"{len(self.node_ids)} node ids for n={self.n}")
        self.relations = [
            _clean_edges(e, self.n, name) for e, name in zip(self.relations, self.relation_names)
        ]
        feats = []
        for x, name in zip(self.features, self.feature_names):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[0] != self.n:
                raise RowCountMismatchError(
                    f"feature block {name!r} has shape {x.shape}, expected ({self.n}, d)"
                )
            if not np.isfinite(x).all():
                raise DatasetError(f"feature block {name!r} has non-finite values")
            feats.append(x)
        self.features = feats

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def feature_dims(self) -> list[int]:
        return [x.shape[1] for x in self.features]

    def num_edges(self) -> int:
        return int(np.sum([e.shape[0] for e in self.relations]))

    def replace(self, relations=None, features=None) -> "MultiRelationGraph":
        return MultiRelationGraph(
            self.n,
            self.relations if relations is None else relations,
            self.features if features is None else features,
            list(self.relation_names),
            list(self.feature_names),
            list(self.node_ids),
        )


@dataclass(eq=False)
class LabeledSplit:
    """``labels[i]`` is 0 (human), 1 (bot) or -1 (unlabeled)."""

    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        bad = ~np.isin(self.labels, (UNLABELED, HUMAN, BOT))
        if bad.any():
            raise DatasetError(f"label values must be 0/1 (or -1), got {set(self.labels[bad])}")
        self.train = np.asarray(self.train, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        names = ("train", "val", "test")
        parts = (self.train, self.val, self.test)
        for name, ids in zip(names, parts):
            if len(np.unique(ids)) != len(ids):
                raise OverlappingSplitsError(f"{name} split lists a node twice")
            if ids.size and (ids.min() < 0 or ids.max() >= len(self.labels)):
                raise DanglingNodeError(f"{name} split refers to an unknown node")
            if (self.labels[ids] == UNLABELED).any():
                i = int(ids[self.labels[ids] == UNLABELED][0])
                raise UnlabeledSplitMemberError(f"{name} split member {i} has no label")
        for a in range(3):
            for b in range(a + 1, 3):
                common = np.intersect1d(parts[a], parts[b])
                if common.size:
                    raise OverlappingSplitsError(
                        f"{names[a]} and {names[b]} share {common.size} node(s), e.g. {int(common[0])}"
                    )

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != UNLABELED


# ---------------------------------------------------------------- homophily


def homophily_counts(g: MultiRelationGraph, s: LabeledSplit, r: int, c: int) -> tuple[int, int]:
    """(same-class edges, labeled-destination edges) out of class-``c`` sources."""
    e = g.relations[r]
    ys, yd = s.labels[e[:, 0]], s.labels[e[:, 1]]
    base = (ys == c) & (yd != UNLABELED)
    return int(np.count_nonzero(base & (yd == c))), int(np.count_nonzero(base))


def homophily_ratio(g: MultiRelationGraph, s: LabeledSplit, r: int, c: int) -> float:
    num, den = homophily_counts(g, s, r, c)
    if den == 0:
        raise NoLabeledEdgesError(
            f"no labeled edges from class {c} sources in relation {g.relation_names[r]!r}"
        )
    return num / den


def homophily_fraction(g: MultiRelationGraph, s: LabeledSplit, r: int, c: int) -> Fraction:
    num, den = homophily_counts(g, s, r, c)
    if den == 0:
        raise NoLabeledEdgesError("no labeled edges")
    return Fraction(num, den)


def heterophily_ratio(g: MultiRelationGraph, s: LabeledSplit, r: int, c: int) -> float:
    return 1.0 - homophily_ratio(g, s, r, c)


def heterophilic_mask(g: MultiRelationGraph, s: LabeledSplit, r: int) -> np.ndarray:
    e = g.relations[r]
    ys, yd = s.labels[e[:, 0]], s.labels[e[:, 1]]
    return (ys != UNLABELED) & (yd != UNLABELED) & (ys != yd)


def mask_heterophilic_edges(
    g: MultiRelationGraph, s: LabeledSplit, fraction: float, seed: int
) -> MultiRelationGraph:
    """Drop floor(fraction * H_r) labeled heterophilic edges per relation."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for r, e in enumerate(g.relations):
        het = np.flatnonzero(heterophilic_mask(g, s, r))
        k = int(np.floor(fraction * het.size + 1e-9))
        keep = np.ones(e.shape[0], dtype=bool)
        if k:
            keep[rng.choice(het, size=k, replace=False)] = False
        out.append(e[keep])
    return g.replace(relations=out)


def graph_stats(g: MultiRelationGraph, s: LabeledSplit) -> dict:
    """Node/edge counts per class and homophily per (relation, class)."""
    report = {
        "nodes": g.n,
        "edges": g.num_edges(),
        "labeled": int(np.count_nonzero(s.labeled)),
        "classes": {},
    }
    for c, cname in LABEL_NAMES.items():
        rels = {}
        for r, rname in enumerate(g.relation_names):
            num, den = homophily_counts(g, s, r, c)
            het = int(np.count_nonzero(heterophilic_mask(g, s, r) & (s.labels[g.relations[r][:, 0]] == c)))
            rels[rname] = {
                "homophilic_edges": num,
                "labeled_edges": den,
                "heterophilic_edges": het,
                "homo": (num / den) if den else None,
            }
        report["classes"][cname] = {"count": int(np.count_nonzero(s.labels == c)), "relations": rels}
    return report


def format_stats(report: dict) -> str:
    lines = [
        f"nodes {report['nodes']}  edges {report['edges']}  labeled {report['labeled']}",
        f"{'class':<8}{'#class':>8}  {'relation':<12}{'homo(%)':>9}{'#edges':>9}",
    ]
    for cname, info in report["classes"].items():
        for rname, rel in info["relations"].items():
            homo = "n/a" if rel["homo"] is None else f"{100 * rel['homo']:.2f}"
            lines.append(
                f"{cname:<8}{info['count']:>8}  {rname:<12}{homo:>9}{rel['labeled_edges']:>9}"
            )
    return "\n".join(lines)


# ---------------------------------------------------------------- disk I/O


def save_dataset(g: MultiRelationGraph, s: LabeledSplit, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "nodes.jsonl", "w", encoding="utf-8") as f:
        for i, nid in enumerate(g.node_ids):
            feats = {name: g.features[t][i].tolist() for t, name in enumerate(g.feature_names)}
            f.write(json.dumps({"id": nid, "features": feats}) + "\n")
    with open(d / "edges.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["src", "dst", "relation"])
        for r, name in enumerate(g.relation_names):
            for a, b in g.relations[r]:
                w.writerow([g.node_ids[a], g.node_ids[b], name])
    with open(d / "labels.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "label"])
        for i in np.flatnonzero(s.labeled):
            w.writerow([g.node_ids[i], LABEL_NAMES[int(s.labels[i])]])
    splits = {k: [g.node_ids[i] for i in getattr(s, k)] for k in ("train", "val", "test")}
    (d / "splits.json").write_text(json.dumps(splits), encoding="utf-8")


def _need(path: Path) -> Path:
    if not path.is_file():
        raise MissingFileError(f"missing file {path}")
    return path


def load_dataset(directory) -> tuple[MultiRelationGraph, LabeledSplit]:
    d = Path(directory)
    if not d.is_dir():
        raise MissingFileError(f"dataset directory {d} does not exist")
    node_ids: list[str] = []
    rows: dict[str, list[list[float]]] = {}
    type_names: list[str] | None = None
    with open(_need(d / "nodes.jsonl"), encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            names = list(obj["features"].keys())
            if type_names is None:
                type_names = names
                rows = {t: [] for t in names}
            elif names != type_names:
                raise RowCountMismatchError(
                    f"nodes.jsonl line {lineno}: feature types {names} differ from {type_names}"
                )
            node_ids.append(str(obj["id"]))
            for t in names:
                vec = obj["features"][t]
                if rows[t] and len(vec) != len(rows[t][0]):
                    raise RowCountMismatchError(
                        f"nodes.jsonl line {lineno}: type {t!r} has dim {len(vec)}, expected {len(rows[t][0])}"
                    )
                rows[t].append(vec)
    if not node_ids:
        raise DatasetError("nodes.jsonl lists no nodes")
    if len(set(node_ids)) != len(node_ids):
        raise DatasetError("duplicate node id in nodes.jsonl")
    pos = {nid: i for i, nid in enumerate(node_ids)}

    rel_names: list[str] = []
    rel_edges: dict[str, list[tuple[int, int]]] = {}
    with open(_need(d / "edges.csv"), encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or set(reader.fieldnames) < {"src", "dst", "relation"}:
            raise DatasetError("edges.csv header must be src,dst,relation")
        for lineno, row in enumerate(reader, 2):
            for key in ("src", "dst"):
                if row[key] not in pos:
                    raise DanglingNodeError(f"edges.csv line {lineno}: unknown node id {row[key]!r}")
            name = row["relation"]
            if name not in rel_edges:
                rel_names.append(name)
                rel_edges[name] = []
            rel_edges[name].append((pos[row["src"]], pos[row["dst"]]))

    labels = np.full(len(node_ids), UNLABELED, dtype=np.int64)
    with open(_need(d / "labels.csv"), encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        for lineno, row in enumerate(reader, 2):
            if row["id"] not in pos:
                raise DanglingNodeError(f"labels.csv line {lineno}: unknown node id {row['id']!r}")
            if row["label"] not in LABEL_CODES:
                raise DatasetError(f"labels.csv line {lineno}: label must be human or bot")
            labels[pos[row["id"]]] = LABEL_CODES[row["label"]]

    raw = json.loads(_need(d / "splits.json").read_text(encoding="utf-8"))
    idx = {}
    for k in ("train", "val", "test"):
        ids = raw.get(k, [])
        for nid in ids:
            if nid not in pos:
                raise DanglingNodeError(f"splits.json {k}: unknown node id {nid!r}")
        idx[k] = [pos[nid] for nid in ids]

    g = MultiRelationGraph(
        n=len(node_ids),
        relations=[np.array(rel_edges[r], dtype=np.int64).reshape(-1, 2) for r in rel_names],
        features=[np.array(rows[t], dtype=np.float64).reshape(len(node_ids), -1) for t in type_names],
        relation_names=rel_names,
        feature_names=list(type_names),
        node_ids=node_ids,
    )
    s = LabeledSplit(labels, idx["train"], idx["val"], idx["test"])
    log.info("loaded %s: %d nodes, %d edges", d, g.n, g.num_edges())
    return g, s
