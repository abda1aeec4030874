import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from botscl import pipeline as pl
from botscl.graph import LabeledSplit, graph_stats, mask_heterophilic_edges
from oracles import confusion_by_counting, logistic_gd
from op_catalogue import tiny_graph


def small(name="twibot22-like", **kw):
    base = dict(n=200, epochs=4, select_every=2, hidden=8, proj_dim=8, stage2_iters=200, baseline_epochs=10, seed=1)
    return pl.preset(name, **{**base, **kw})


# ---------------------------------------------------------------- config


def test_presets_carry_reference_hyperparameters():
    a, b = pl.preset("twibot20-like"), pl.preset("twibot22-like")
    assert (a.lr, a.epochs, a.batch_size, a.class_weights) == (0.001, 200, 128, [1.0, 1.0])
    assert (b.lr, b.epochs, b.batch_size, b.class_weights) == (0.0001, 50, 512, [2.0, 5.0])
    for c in (a, b):
        assert (c.hidden, c.layers, c.lambdas, c.tau, c.att_dropout, c.mlp_dropout) == (32, 2, [1.0, 1.0], 0.07, 0.3, 0.5)


def test_overrides_and_unknown_keys():
    cfg = pl.apply_overrides(pl.preset("twibot20-like"), ["lr=0.5", "lambdas=[0.2, 0.3]", "augment.pe=0.1"])
    assert cfg.lr == 0.5 and cfg.lambdas == [0.2, 0.3] and cfg.augment["pe"] == 0.1
    with pytest.raises(pl.UnknownKeyError) as info:
        pl.apply_overrides(cfg, ["learning_rate=1"])
    assert "learning_rate" in str(info.value) and "batch_size" in str(info.value)


def test_config_dict_roundtrip():
    cfg = small()
    assert pl.TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- metrics


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_metrics_identities_against_counting_oracle(pairs):
    y, p = np.array(pairs).T
    m = pl.MetricsReport.from_predictions(y, p)
    tp, fp, tn, fn = confusion_by_counting(y, p)
    assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
    assert m.total == len(pairs)
    assert m.accuracy == (tp + tn) / len(pairs)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    assert m.precision == prec and m.recall == rec
    assert m.f1 == (2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    assert all(0.0 <= getattr(m, k) <= 1.0 for k in pl.METRICS)


def test_metric_examples():
    perfect = pl.MetricsReport.from_predictions([0, 1, 1], [0, 1, 1])
    assert perfect.accuracy == perfect.f1 == 1.0
    blind = pl.MetricsReport.from_predictions([1, 1, 1], [0, 0, 0])
    assert blind.recall == 0.0 and blind.f1 == 0.0


def test_summarize_shape():
    reps = [pl.MetricsReport(1, 0, 1, 0), pl.MetricsReport(0, 1, 1, 0)]
    out = pl.summarize(reps)
    assert out["accuracy"] == {"mean": 0.75, "std": 0.25, "per_seed": [1.0, 0.5]}


# ---------------------------------------------------------------- stage 2


def _toy_split(labels):
    n = len(labels)
    idx = np.arange(n)
    return LabeledSplit(np.asarray(labels), idx, np.array([], int), np.array([], int))


def test_stage2_separable_toy_fits_train_set():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-2, 0.5, size=(20, 2)), rng.normal(2, 0.5, size=(20, 2))])
    s = _toy_split([0] * 20 + [1] * 20)
    clf = pl.train_stage2(X, s)
    assert pl.evaluate(X, clf, s, "train").accuracy == 1.0


def test_stage2_matches_loop_oracle():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 3))
    labels = (X[:, 0] + 0.5 * rng.normal(size=30) > 0).astype(int)
    s = _toy_split(labels)
    clf = pl.train_stage2(X, s, (2.0, 5.0), lr=0.05, iters=150, l2=1e-3)
    std = X.std(axis=0)
    Xs = ((X - X.mean(axis=0)) / std).tolist()
    cw = [(2.0, 5.0)[c] for c in labels]
    w, b = logistic_gd(Xs, labels.tolist(), cw, 0.05, 150, 1e-3)
    np.testing.assert_allclose(clf.weights, w, atol=1e-6, rtol=0)
    assert abs(clf.bias - b) <= 1e-6


def test_stage2_unit_weights_equal_default():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(20, 2))
    s = _toy_split(rng.integers(0, 2, size=20))
    a, b = pl.train_stage2(X, s, (1.0, 1.0)), pl.train_stage2(X, s)
    assert a.weights.tobytes() == b.weights.tobytes()


# ---------------------------------------------------------------- stage 1


def test_stage1_output_dimensions_and_frozen_encoder():
    cfg = small()
    g, s = pl.resolve_data(cfg)
    res = pl.run(cfg, g, s)
    assert res.H.shape == (g.n, 2 * cfg.hidden)
    snap = {k: v.data.copy() for k, v in res.stage1.params.items()}
    pl.train_stage2(res.H, s)
    assert all(np.array_equal(snap[k], v.data) for k, v in res.stage1.params.items())
    assert len(res.stage1.losses) == cfg.epochs


def test_same_config_and_seed_gives_identical_checkpoint():
    cfg = small("twibot20-like")
    a, b = pl.run(cfg), pl.run(cfg)
    for k in a.stage1.params:
        assert a.stage1.params[k].data.tobytes() == b.stage1.params[k].data.tobytes()
    assert a.H.tobytes() == b.H.tobytes()


def test_contrastive_loss_decreases():
    cfg = small(epochs=10, lr=0.003)
    res = pl.run(cfg)
    assert res.stage1.losses[-1] < res.stage1.losses[0]


def test_single_class_train_split_rejected():
    g, s = tiny_graph(0, n=20)
    labels = s.labels.copy()
    labels[s.train] = 1
    bad = LabeledSplit(labels, s.train, s.val, s.test)
    with pytest.raises(ValueError, match="no human"):
        pl.train_stage1(g, bad, small())


@pytest.mark.parametrize("variant", sorted(pl.VARIANTS))
def test_every_variant_runs(variant):
    res = pl.run(pl.variant_config(small(), variant))
    assert 0.0 <= res.metrics.accuracy <= 1.0


def test_baseline_runs_and_is_deterministic():
    cfg = small(model="baseline")
    a, b = pl.run(cfg), pl.run(cfg)
    assert a.baseline.logits.tobytes() == b.baseline.logits.tobytes()


# ---------------------------------------------------------------- experiments


def test_mask_sweep_last_fraction_has_no_heterophily():
    cfg = small("twibot20-like", model="baseline")
    rows = pl.experiment_mask_sweep(cfg, [0], fractions=[0.0, 1.0])
    assert [r["fraction"] for r in rows] == [0.0, 1.0]
    assert rows[0]["heterophilic_left"] > 0 and rows[1]["heterophilic_left"] == 0
    g, s = pl.resolve_data(cfg)
    report = graph_stats(mask_heterophilic_edges(g, s, 1.0, 0), s)
    assert all(r["heterophilic_edges"] == 0 for c in report["classes"].values() for r in c["relations"].values())


def test_lambda_grid_has_hundred_cells():
    assert len(pl.LAMBDA_GRID) ** 2 == 100
    rows = pl.experiment_lambda_sweep(small(epochs=2), [0], grid=[0.1, 1.0])
    assert [(r["lambda1"], r["lambda2"]) for r in rows] == [(0.1, 0.1), (0.1, 1.0), (1.0, 0.1), (1.0, 1.0)]


def test_ablation_table_rows():
    rows = pl.experiment_ablation(small(epochs=2), [0])
    table = pl.ablation_table(rows).splitlines()
    assert [line.split(",")[0] for line in table[1:]] == ["botscl", "wo-sup", "wo-neg", "ce", "cnd", "ea", "er", "fm"]


def test_parallel_pool_preserves_order():
    tasks = list(range(6))
    assert pl.run_tasks(abs, tasks, jobs=2) == pl.run_tasks(abs, tasks, jobs=1)


# ---------------------------------------------------------------- artifacts


def test_export_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    H = rng.normal(size=(5, 3)) * 10.0 ** rng.integers(-8, 8, size=(5, 3))
    s = LabeledSplit(np.array([0, 1, -1, 1, 0]), np.array([0, 1]), np.array([3]), np.array([4]))
    pl.export_embeddings(H, s, tmp_path / "e.csv")
    with open(tmp_path / "e.csv") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 6
    assert {r[1] for r in rows[1:]} <= {"human", "bot", "unlabeled"}
    _, labels, back = pl.load_embeddings(tmp_path / "e.csv")
    assert labels[2] == "unlabeled"
    assert back.tobytes() == H.tobytes()


def test_run_directory_recomputes_metrics(tmp_path):
    cfg = small()
    g, s = pl.resolve_data(cfg)
    res = pl.run(cfg, g, s)
    pl.write_run(tmp_path, res, g, s)
    assert pl.recompute_metrics(tmp_path, s) == res.metrics
