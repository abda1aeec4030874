"""Two-stage training, evaluation, and the experiment runners.

Stage 1 learns the encoder with a contrastive (or cross-entropy) objective on
two augmented views; stage 2 fits a weighted logistic regression on the frozen
representations ``[h0 || hL]``.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import numcore as nc
from .augment import AugmentConfig, View, make_view_pair
from .graph import (
    BOT,
    HUMAN,
    LABEL_NAMES,
    LabeledSplit,
    MultiRelationGraph,
    heterophilic_mask,
    load_dataset,
    mask_heterophilic_edges,
)
from .model import (
    BaselineConfig,
    EncoderConfig,
    GraphView,
    Params,
    baseline_forward,
    classify_head,
    encode,
    fuse_features,
    init_baseline,
    init_params,
    project,
)
from .numcore import NonFiniteError, Tensor
from .objective import AdamW, selfsup_cross_view, supcon_cross_view, weighted_cross_entropy
from .synth import generate, load_profile

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    source: str = "twibot20-like"  # builtin profile, profile JSON, or dataset directory
    n: int | None = None  # node count override for profile sources
    model: str = "botscl"  # botscl | baseline
    hidden: int = 32
    layers: int = 2
    lambdas: list[float] = field(default_factory=lambda: [1.0, 1.0])
    proj_dim: int = 32
    att_dropout: float = 0.3
    mlp_dropout: float = 0.5
    attention: str = "tanh"  # tanh | softmax
    direction: str = "in"
    loss: str = "supcon"  # supcon | selfsup | ce
    tau: float = 0.07
    lr: float = 0.001
    weight_decay: float = 0.01
    epochs: int = 200
    batch_size: int = 128
    class_weights: list[float] = field(default_factory=lambda: [1.0, 1.0])
    augment: dict = field(default_factory=lambda: asdict(AugmentConfig()))
    select_every: int = 20
    stage2_lr: float = 0.01
    stage2_iters: int = 1000
    stage2_l2: float = 1e-4
    baseline_lr: float = 0.01
    baseline_epochs: int = 200
    baseline_dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.lambdas = [float(v) for v in self.lambdas]
        self.class_weights = [float(v) for v in self.class_weights]
        if self.model not in ("botscl", "baseline"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.loss not in ("supcon", "selfsup", "ce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.attention not in ("tanh", "softmax"):
            raise ValueError(f"unknown attention {self.attention!r}")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ValueError("class_weights needs two positive entries (human, bot)")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs >= 1 and batch_size >= 2 required")
        AugmentConfig(**self.augment)

    @property
    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**self.augment)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise UnknownKeyError(sorted(unknown), valid_keys())
        return cls(**copy.deepcopy(obj))


class UnknownKeyError(KeyError):
    def __init__(self, keys: list[str], valid: list[str]):
        super().__init__(keys)
        self.keys = keys
        self.valid = valid

    def __str__(self) -> str:
        return f"unknown config key(s) {', '.join(self.keys)}; valid keys: {', '.join(self.valid)}"


PRESETS: dict[str, dict[str, Any]] = {
    "twibot20-like": {"lr": 0.001, "epochs": 200, "batch_size": 128, "class_weights": [1.0, 1.0]},
    "twibot22-like": {"lr": 0.0001, "epochs": 50, "batch_size": 512, "class_weights": [2.0, 5.0]},
}


def preset(name: str, **overrides) -> TrainConfig:
    """Table-of-hyperparameters defaults for a named synthetic regime."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(source=name, **{**PRESETS[name], **overrides})


def valid_keys() -> list[str]:
    keys = []
    for f in fields(TrainConfig):
        if f.name == "augment":
            keys += [f"augment.{k}" for k in asdict(AugmentConfig())]
        else:
            keys.append(f.name)
    return keys


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: TrainConfig, pairs: Sequence[str]) -> TrainConfig:
    """Apply ``key=value`` strings (dotted keys reach into ``augment``)."""
    obj = cfg.to_dict()
    bad = []
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        if key not in valid_keys():
            bad.append(key)
            continue
        value = _parse_value(raw)
        if key.startswith("augment."):
            obj["augment"][key.split(".", 1)[1]] = value
        else:
            obj[key] = value
    if bad:
        raise UnknownKeyError(bad, valid_keys())
    return TrainConfig.from_dict(obj)


def resolve_data(cfg: TrainConfig, seed: int | None = None) -> tuple[MultiRelationGraph, LabeledSplit]:
    """Load a dataset directory or generate from a profile (seeded by ``seed``)."""
    seed = cfg.seed if seed is None else seed
    path = Path(cfg.source)
    if path.is_dir():
        return load_dataset(path)
    profile = load_profile(cfg.source)
    if cfg.n is not None:
        profile = profile.with_n(cfg.n)
    return generate(profile, seed)


def encoder_config(cfg: TrainConfig, g: MultiRelationGraph) -> EncoderConfig:
    return EncoderConfig(
        feature_dims=g.feature_dims,
        n_relations=g.num_relations,
        hidden=cfg.hidden,
        layers=cfg.layers,
        lambdas=cfg.lambdas,
        proj_dim=cfg.proj_dim,
        att_dropout=cfg.att_dropout,
        mlp_dropout=cfg.mlp_dropout,
        attention=cfg.attention,
        direction=cfg.direction,
        n_classes_head=2 if cfg.loss == "ce" else 0,
    )


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "MetricsReport":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        return cls(
            tp=int(np.sum((y_pred == BOT) & (y_true == BOT))),
            fp=int(np.sum((y_pred == BOT) & (y_true == HUMAN))),
            tn=int(np.sum((y_pred == HUMAN) & (y_true == HUMAN))),
            fn=int(np.sum((y_pred == HUMAN) & (y_true == BOT))),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "recall": self.recall,
            "precision": self.precision,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
        }


METRICS = ("accuracy", "f1", "recall", "precision")


def summarize(reports: Sequence[MetricsReport]) -> dict:
    """Per-metric mean, population std and per-seed values."""
    out = {}
    for m in METRICS:
        vals = [getattr(r, m) for r in reports]
        out[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "per_seed": vals}
    out["confusion"] = [asdict(r) for r in reports]
    return out


# ---------------------------------------------------------------- stage 2


@dataclass
class LogisticClassifier:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray

    def decision(self, H: np.ndarray) -> np.ndarray:
        return ((H - self.mean) / self.std) @ self.weights + self.bias

    def predict(self, H: np.ndarray) -> np.ndarray:
        return (self.decision(H) > 0).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LogisticClassifier":
        return cls(
            np.asarray(obj["weights"], dtype=np.float64),
            float(obj["bias"]),
            np.asarray(obj["mean"], dtype=np.float64),
            np.asarray(obj["std"], dtype=np.float64),
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def train_stage2(
    H: np.ndarray,
    split: LabeledSplit,
    class_weights=(1.0, 1.0),
    lr: float = 0.01,
    iters: int = 1000,
    l2: float = 1e-4,
) -> LogisticClassifier:
    """Full-batch gradient descent on class-weighted log-loss plus
    ``l2/2 * |w|^2``, over train rows standardised by train statistics."""
    X = np.asarray(H, dtype=np.float64)[split.train]
    y = split.labels[split.train].astype(np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    X = (X - mean) / std
    cw = np.asarray(class_weights, dtype=np.float64)[split.labels[split.train]]
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(iters):
        p = _sigmoid(X @ w + b)
        r = cw * (p - y) / n
        w -= lr * (X.T @ r + l2 * w)
        b -= lr * float(r.sum())
    return LogisticClassifier(w, b, mean, std)


def evaluate(H: np.ndarray, clf: LogisticClassifier, split: LabeledSplit, part: str = "test") -> MetricsReport:
    idx = getattr(split, part)
    return MetricsReport.from_predictions(split.labels[idx], clf.predict(np.asarray(H)[idx]))


# ---------------------------------------------------------------- stage 1


@dataclass
class Stage1Result:
    params: Params
    H: np.ndarray
    d0: int
    losses: list[float]
    selected_epoch: int
    val_history: list[tuple[int, float]]
    encoder: EncoderConfig


def _snapshot(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: Params, snap: dict[str, np.ndarray]) -> Params:
    return {k: Tensor(snap[k], requires_grad=True) for k in params}


def representations(view: GraphView, params: Params, enc: EncoderConfig) -> np.ndarray:
    """Eval-mode ``[h0 || hL]``."""
    with nc.no_grad():
        out = encode(view, params, enc, train=False)
    return np.concatenate([out.h0.data, out.hL.data], axis=1)


def _batches(rng: np.random.Generator, train: np.ndarray, size: int) -> list[np.ndarray]:
    order = rng.permutation(train)
    return [order[i : i + size] for i in range(0, order.size, size)]


def _view_inputs(vp_view: View) -> GraphView:
    return GraphView(vp_view.features, vp_view.relations)


def train_stage1(g: MultiRelationGraph, split: LabeledSplit, cfg: TrainConfig) -> Stage1Result:
    for c in (HUMAN, BOT):
        if not np.any(split.labels[split.train] == c):
            raise ValueError(f"train split has no {LABEL_NAMES[c]} nodes; supervised contrast is undefined")
    enc = encoder_config(cfg, g)
    seq = np.random.SeedSequence(cfg.seed)
    s_init, s_view, s_batch, s_drop = (int(s.generate_state(1)[0]) for s in seq.spawn(4))
    params = init_params(enc, s_init)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    batch_rng = np.random.default_rng(s_batch)
    drop_rng = np.random.default_rng(s_drop)

    vp = make_view_pair(g, split, cfg.augment_config, s_view)
    views = [vp.view_alpha, vp.view_beta]
    gviews = [_view_inputs(v) for v in views]
    shared_fusion = all(v.source_rows is not None for v in views)
    original = GraphView.of(g)
    train = np.asarray(split.train, dtype=np.int64)
    labels = split.labels

    losses: list[float] = []
    history: list[tuple[int, float]] = []
    best = (-1.0, 0, _snapshot(params))
    for epoch in range(1, cfg.epochs + 1):
        epoch_loss = []
        for batch in _batches(batch_rng, train, cfg.batch_size):
            y = labels[batch]
            if cfg.loss == "supcon" and np.unique(y).size < 2:
                # a tail batch holding a single class has no negatives
                continue
            if batch.size < 2:
                continue
            opt.zero_grad()
            if shared_fusion:
                base = fuse_features(g.features, params, enc)
                h0s = [nc.gather_rows(base, v.source_rows) for v in views]
            else:
                h0s = [None, None]
            zs = []
            for gv, h0 in zip(gviews, h0s):
                out = encode(gv, params, enc, train=True, rng=drop_rng, h0=h0)
                zs.append(project(nc.gather_rows(out.hL, batch), params))
            if cfg.loss == "supcon":
                loss = supcon_cross_view(zs[0], zs[1], y, cfg.tau)
            elif cfg.loss == "selfsup":
                loss = selfsup_cross_view(zs[0], zs[1], y, cfg.tau)
            else:
                la = weighted_cross_entropy(classify_head(zs[0], params), y, cfg.class_weights)
                lb = weighted_cross_entropy(classify_head(zs[1], params), y, cfg.class_weights)
                loss = nc.scale(la + lb, 0.5)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            try:
                opt.step()
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            epoch_loss.append(value)
        losses.append(float(np.mean(epoch_loss)) if epoch_loss else float("nan"))
        if epoch % cfg.select_every == 0 or epoch == cfg.epochs:
            H = representations(original, params, enc)
            clf = train_stage2(H, split, cfg.class_weights, cfg.stage2_lr, cfg.stage2_iters, cfg.stage2_l2)
            acc = evaluate(H, clf, split, "val").accuracy if split.val.size else 0.0
            history.append((epoch, acc))
            if acc > best[0]:
                best = (acc, epoch, _snapshot(params))
            log.debug("epoch %d loss %.5f val %.4f", epoch, losses[-1], acc)
    params = _restore(params, best[2])
    H = representations(original, params, enc)
    return Stage1Result(params, H, cfg.hidden, losses, best[1], history, enc)


# ---------------------------------------------------------------- baseline


@dataclass
class BaselineResult:
    params: Params
    H: np.ndarray
    logits: np.ndarray
    selected_epoch: int


def train_baseline(g: MultiRelationGraph, split: LabeledSplit, cfg: TrainConfig) -> BaselineResult:
    """Mean-aggregator network trained end to end with weighted cross-entropy."""
    bcfg = BaselineConfig(
        feature_dims=g.feature_dims,
        n_relations=g.num_relations,
        hidden=cfg.hidden,
        layers=cfg.layers,
        dropout=cfg.baseline_dropout,
        direction=cfg.direction,
    )
    seq = np.random.SeedSequence(cfg.seed)
    s_init, s_drop = (int(s.generate_state(1)[0]) for s in seq.spawn(2))
    params = init_baseline(bcfg, s_init)
    opt = AdamW(params, lr=cfg.baseline_lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(s_drop)
    view = GraphView.of(g)
    train = np.asarray(split.train)
    y = split.labels[train]
    best = (-1.0, 0, _snapshot(params))
    for epoch in range(1, cfg.baseline_epochs + 1):
        opt.zero_grad()
        _, logits = baseline_forward(view, params, bcfg, train=True, rng=rng)
        loss = weighted_cross_entropy(nc.gather_rows(logits, train), y, cfg.class_weights)
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"baseline: non-finite loss at epoch {epoch}")
        loss.backward()
        opt.step()
        if epoch % cfg.select_every == 0 or epoch == cfg.baseline_epochs:
            with nc.no_grad():
                _, ev = baseline_forward(view, params, bcfg)
            pred = np.argmax(ev.data[split.val], axis=1)
            acc = MetricsReport.from_predictions(split.labels[split.val], pred).accuracy
            if acc > best[0]:
                best = (acc, epoch, _snapshot(params))
    params = _restore(params, best[2])
    with nc.no_grad():
        h, logits = baseline_forward(view, params, bcfg)
    return BaselineResult(params, h.data, logits.data, best[1])


# ---------------------------------------------------------------- one run


@dataclass
class RunResult:
    config: TrainConfig
    metrics: MetricsReport
    H: np.ndarray | None = None
    classifier: LogisticClassifier | None = None
    stage1: Stage1Result | None = None
    baseline: BaselineResult | None = None


def run(cfg: TrainConfig, g: MultiRelationGraph | None = None, split: LabeledSplit | None = None) -> RunResult:
    """Train and evaluate one configuration on the test split."""
    if g is None:
        g, split = resolve_data(cfg)
    if cfg.model == "baseline":
        res = train_baseline(g, split, cfg)
        pred = np.argmax(res.logits[split.test], axis=1)
        return RunResult(cfg, MetricsReport.from_predictions(split.labels[split.test], pred), baseline=res)
    s1 = train_stage1(g, split, cfg)
    clf = train_stage2(s1.H, split, cfg.class_weights, cfg.stage2_lr, cfg.stage2_iters, cfg.stage2_l2)
    return RunResult(cfg, evaluate(s1.H, clf, split), s1.H, clf, stage1=s1)


# ---------------------------------------------------------------- work pool


def run_tasks(fn: Callable[[Any], Any], tasks: Sequence[Any], jobs: int = 1) -> list[Any]:
    """Apply ``fn`` to every task; results come back in task order whatever
    the parallelism, and each task carries its own seed."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _row(metrics: MetricsReport, **keys) -> dict:
    return {**keys, **{m: getattr(metrics, m) for m in METRICS}}


# ---------------------------------------------------------------- experiments


FRACTIONS = tuple(round(0.1 * i, 1) for i in range(11))


def _mask_task(task) -> dict:
    cfg, fraction = task
    g, split = resolve_data(cfg)
    masked = mask_heterophilic_edges(g, split, fraction, cfg.seed)
    remaining = int(sum(heterophilic_mask(masked, split, r).sum() for r in range(masked.num_relations)))
    res = run(cfg, masked, split)
    return _row(res.metrics, fraction=fraction, seed=cfg.seed, heterophilic_left=remaining)


def experiment_mask_sweep(
    cfg: TrainConfig, seeds: Sequence[int], fractions: Sequence[float] = FRACTIONS, jobs: int = 1
) -> list[dict]:
    """Remove a growing share of labeled heterophilic edges and retrain from
    scratch at each step.  One row per (fraction, seed)."""
    tasks = [(_with(cfg, seed=s), float(f)) for f in fractions for s in seeds]
    return run_tasks(_mask_task, tasks, jobs)


def _lambda_task(cfg: TrainConfig) -> dict:
    res = run(cfg)
    return _row(res.metrics, lambda1=cfg.lambdas[0], lambda2=cfg.lambdas[1], seed=cfg.seed)


LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))


def experiment_lambda_sweep(
    cfg: TrainConfig, seeds: Sequence[int], grid: Sequence[float] = LAMBDA_GRID, jobs: int = 1
) -> list[dict]:
    tasks = [
        _with(cfg, lambdas=[float(a), float(b)], seed=s) for a in grid for b in grid for s in seeds
    ]
    return run_tasks(_lambda_task, tasks, jobs)


VARIANTS = {
    "botscl": {},
    "wo-sup": {"loss": "selfsup"},
    "wo-neg": {"attention": "softmax"},
    "ce": {"loss": "ce"},
}
AUG_ROWS = {"cns+er": ("cns", "er"), "cnd": ("cns", "cns"), "ea": ("ea", "ea"), "er": ("er", "er"), "fm": ("fm", "fm")}


def variant_config(cfg: TrainConfig, variant: str, augmentor: str = "cns+er") -> TrainConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    if augmentor not in AUG_ROWS:
        raise ValueError(f"unknown augmentor row {augmentor!r}; choose from {sorted(AUG_ROWS)}")
    alpha, beta = AUG_ROWS[augmentor]
    return _with(cfg, augment={**cfg.augment, "alpha": alpha, "beta": beta}, **VARIANTS[variant])


def _ablation_task(task) -> dict:
    cfg, variant, augmentor = task
    res = run(cfg)
    return _row(res.metrics, variant=variant, augmentor=augmentor, seed=cfg.seed)


def experiment_ablation(
    cfg: TrainConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = tuple(VARIANTS),
    augmentors: Sequence[str] = ("cnd", "ea", "er", "fm"),
    jobs: int = 1,
) -> list[dict]:
    """Module variants with the default augmentation pair, then the full model
    under each single augmentor.  One row per (variant, augmentor, seed)."""
    cells = [(v, "cns+er") for v in variants] + [("botscl", a) for a in augmentors]
    tasks = [(_with(variant_config(cfg, v, a), seed=s), v, a) for v, a in cells for s in seeds]
    return run_tasks(_ablation_task, tasks, jobs)


def ablation_table(rows: Sequence[dict]) -> str:
    """Mean +- std accuracy and F1 per ablation row, variants first."""
    order: list[tuple[str, str]] = []
    for r in rows:
        key = (r["variant"], r["augmentor"])
        if key not in order:
            order.append(key)
    lines = ["row,accuracy_mean,accuracy_std,f1_mean,f1_std,seeds"]
    for v, a in order:
        sel = [r for r in rows if r["variant"] == v and r["augmentor"] == a]
        name = v if a == "cns+er" else a
        acc = np.array([r["accuracy"] for r in sel])
        f1 = np.array([r["f1"] for r in sel])
        lines.append(
            f"{name},{acc.mean():.6f},{acc.std():.6f},{f1.mean():.6f},{f1.std():.6f},{len(sel)}"
        )
    return "\n".join(lines) + "\n"


def _with(cfg: TrainConfig, **changes) -> TrainConfig:
    obj = cfg.to_dict()
    obj.update(changes)
    return TrainConfig.from_dict(obj)


def mean_by(rows: Sequence[dict], key: str | tuple[str, ...], metric: str = "accuracy") -> dict:
    keys = (key,) if isinstance(key, str) else key
    groups: dict[Any, list[float]] = {}
    for r in rows:
        k = tuple(r[x] for x in keys)
        groups.setdefault(k[0] if len(k) == 1 else k, []).append(r[metric])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------- artifacts


def export_embeddings(H: np.ndarray, split: LabeledSplit, path, node_ids: Sequence[str] | None = None) -> None:
    """CSV with id, label (human/bot/unlabeled) and every column of H at 17
    significant digits, enough to round-trip doubles exactly."""
    H = np.asarray(H)
    ids = node_ids if node_ids is not None else [str(i) for i in range(H.shape[0])]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"h{k}" for k in range(H.shape[1])])
        for i in range(H.shape[0]):
            lab = int(split.labels[i])
            name = LABEL_NAMES[lab] if lab >= 0 else "unlabeled"
            w.writerow([ids[i], name] + [f"{v:.17g}" for v in H[i]])


def load_embeddings(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    H = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), -1)
    return [r[0] for r in body], [r[1] for r in body], H


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_run(out_dir, result: RunResult, g: MultiRelationGraph, split: LabeledSplit) -> None:
    """Persist everything needed to recompute the metrics of a trained run."""
    from .model import config_to_dict, save_checkpoint

    out = Path(out_dir)
    write_json(out / "config.json", result.config.to_dict())
    write_json(out / "metrics.json", result.metrics.to_dict())
    if result.stage1 is not None:
        s1 = result.stage1
        save_checkpoint(s1.params, out / "checkpoint", {"encoder": config_to_dict(s1.encoder)})
        write_json(out / "classifier.json", result.classifier.to_dict())
        write_json(
            out / "train_log.json",
            {"losses": s1.losses, "selected_epoch": s1.selected_epoch, "val_history": s1.val_history},
        )
        export_embeddings(s1.H, split, out / "embeddings.csv", g.node_ids)
    else:
        b = result.baseline
        save_checkpoint(b.params, out / "checkpoint", {"model": "baseline"})
        export_embeddings(b.H, split, out / "embeddings.csv", g.node_ids)
        np.savetxt(out / "logits.csv", b.logits, delimiter=",", fmt="%.17g")


def recompute_metrics(run_dir, split: LabeledSplit) -> MetricsReport:
    """Metrics from the persisted embeddings and stage-2 weights alone."""
    run_dir = Path(run_dir)
    if (run_dir / "classifier.json").is_file():
        _, _, H = load_embeddings(run_dir / "embeddings.csv")
        clf = LogisticClassifier.from_dict(json.loads((run_dir / "classifier.json").read_text()))
        return evaluate(H, clf, split)
    logits = np.loadtxt(run_dir / "logits.csv", delimiter=",", ndmin=2)
    pred = np.argmax(logits[split.test], axis=1)
    return MetricsReport.from_predictions(split.labels[split.test], pred)
