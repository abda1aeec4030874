import math

import numpy as np
import pytest

from botscl import numcore as nc
from botscl.model import (
    BaselineConfig,
    EncoderConfig,
    GraphView,
    _alpha,
    _softmax_weights,
    baseline_forward,
    edge_attention,
    encode,
    fuse_features,
    init_baseline,
    init_params,
    load_checkpoint,
    mean_aggregate,
    project,
    relational_aggregate,
    save_checkpoint,
)
from botscl.numcore import Tensor
from op_catalogue import tiny_graph


def _setup(seed=0, n=12, hidden=6, **kw):
    g, s = tiny_graph(seed, n=n)
    cfg = EncoderConfig(feature_dims=g.feature_dims, n_relations=g.num_relations, hidden=hidden, proj_dim=hidden, **kw)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for t in params.values():
        t.data += 0.3 * rng.normal(size=t.shape)
    return g, s, cfg, params


def _h(rng, n, d):
    return Tensor(rng.normal(size=(n, d)))


# ---------------------------------------------------------------- attention


@pytest.mark.parametrize("seed", range(5))
def test_alpha_symmetric_and_strictly_inside_unit_interval(seed):
    g, _, cfg, params = _setup(seed)
    h = _h(np.random.default_rng(seed), g.n, cfg.hidden)
    i, j = g.relations[0][:, 0], g.relations[0][:, 1]
    for layer in (1, 2):
        a = edge_attention(h, i, j, params, layer).data
        b = edge_attention(h, j, i, params, layer).data
        assert np.array_equal(a, b)
        assert np.all(np.abs(a) < 1.0)


def test_alpha_scalar_closed_form():
    q = Tensor([[1.5], [0.5]])
    k = Tensor([[1.0], [1.0]])
    a = _alpha(q, k, np.array([0]), np.array([1])).data[0, 0]
    assert a == pytest.approx(math.tanh(1.0), abs=1e-15)
    assert a == pytest.approx(0.76159, abs=1e-5)


def test_zero_query_key_gives_zero_alpha():
    g, _, cfg, params = _setup(1)
    params["layer1.Q"].data[:] = 0.0
    params["layer1.K"].data[:] = 0.0
    h = _h(np.random.default_rng(0), g.n, cfg.hidden)
    a = edge_attention(h, g.relations[0][:, 0], g.relations[0][:, 1], params, 1)
    assert np.all(a.data == 0.0)


# ---------------------------------------------------------------- aggregation


def _reference_layer(h, view, params, layer, lam, alpha_value):
    """Loop form of W_r(lam h_i + mean_j alpha h_j), averaged over relations."""
    n, d = h.shape
    out = np.zeros((n, params[f"layer{layer}.W_r0"].shape[1]))
    for r, e in enumerate(view.relations):
        W = params[f"layer{layer}.W_r{r}"].data
        for i in range(n):
            nbrs = e[e[:, 1] == i, 0]
            agg = alpha_value * h[nbrs].mean(axis=0) if nbrs.size else np.zeros(d)
            out[i] += (lam * h[i] + agg) @ W
    return out / len(view.relations)


@pytest.mark.parametrize("alpha_value", [1.0, -1.0])
def test_pinned_alpha_gives_low_and_high_pass_forms(alpha_value):
    g, _, cfg, params = _setup(2)
    view = GraphView.of(g)
    h = np.random.default_rng(3).normal(size=(g.n, cfg.hidden))
    got = relational_aggregate(Tensor(h), view, params, 1, cfg, alpha_override=alpha_value).data
    want = _reference_layer(h, view, params, 1, cfg.lambdas[0], alpha_value)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_fused_and_composed_layers_agree_with_dropout():
    g, _, cfg, params = _setup(4)
    view = GraphView.of(g)
    h = _h(np.random.default_rng(4), g.n, cfg.hidden)
    a = relational_aggregate(h, view, params, 1, cfg, rng=np.random.default_rng(8), fused=True)
    b = relational_aggregate(h, view, params, 1, cfg, rng=np.random.default_rng(8), fused=False)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-13)


def test_edgeless_graph_uses_only_self_term():
    g, _, cfg, params = _setup(5)
    view = GraphView(g.features, [np.zeros((0, 2), int)] * 2)
    h = np.random.default_rng(5).normal(size=(g.n, cfg.hidden))
    got = relational_aggregate(Tensor(h), view, params, 1, cfg).data
    want = sum(cfg.lambdas[0] * h @ params[f"layer1.W_r{r}"].data for r in range(2)) / 2
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


def test_isolated_node_gets_finite_self_representation():
    g, _, cfg, params = _setup(6)
    lone = 3
    rels = [e[(e[:, 0] != lone) & (e[:, 1] != lone)] for e in g.relations]
    view = GraphView(g.features, rels)
    h = np.random.default_rng(6).normal(size=(g.n, cfg.hidden))
    got = relational_aggregate(Tensor(h), view, params, 1, cfg).data[lone]
    want = sum(cfg.lambdas[0] * h[lone] @ params[f"layer1.W_r{r}"].data for r in range(2)) / 2
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)
    assert np.isfinite(encode(view, params, cfg).hL.data).all()


@pytest.mark.parametrize("seed", range(3))
def test_relation_permutation_equivariance(seed):
    g, _, cfg, params = _setup(seed)
    base = encode(GraphView.of(g), params, cfg).hL.data
    swapped = dict(params)
    for layer in (1, 2):
        swapped[f"layer{layer}.W_r0"] = params[f"layer{layer}.W_r1"]
        swapped[f"layer{layer}.W_r1"] = params[f"layer{layer}.W_r0"]
    other = encode(GraphView(g.features, g.relations[::-1]), swapped, cfg).hL.data
    np.testing.assert_allclose(other, base, rtol=1e-12, atol=1e-13)


# ---------------------------------------------------------------- fusion and encode


def test_single_type_fusion_shape():
    g, _, _, _ = _setup(0)
    cfg = EncoderConfig(feature_dims=[3], n_relations=2, hidden=5)
    h0 = fuse_features([g.features[0]], init_params(cfg, 0), cfg)
    assert h0.shape == (g.n, 5)


def test_fusion_commutes_with_node_permutation():
    g, _, cfg, params = _setup(7)
    perm = np.random.default_rng(7).permutation(g.n)
    a = fuse_features(g.features, params, cfg).data
    b = fuse_features([x[perm] for x in g.features], params, cfg).data
    np.testing.assert_allclose(b, a[perm], rtol=1e-13, atol=1e-14)


def test_fusion_gradient_check():
    g, _, cfg, params = _setup(8, hidden=4)
    names = [k for k in params if k.startswith("fusion.")]
    w = Tensor(np.random.default_rng(1).normal(size=(g.n, cfg.hidden)))

    def fn(*xs):
        p = {**params, **dict(zip(names, xs))}
        return nc.sum(fuse_features(g.features, p, cfg) * w)

    a, b = nc.gradient_pair(fn, [params[k] for k in names])
    assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(a)


def test_encode_shapes_and_eval_determinism():
    g, _, cfg, params = _setup(9)
    view = GraphView.of(g)
    a, b = encode(view, params, cfg), encode(view, params, cfg)
    assert a.h0.shape == (g.n, cfg.hidden) and a.hL.shape == (g.n, cfg.hidden)
    assert a.hL.data.tobytes() == b.hL.data.tobytes()
    c = encode(view, params, cfg, train=True, rng=np.random.default_rng(0))
    assert not np.array_equal(c.hL.data, a.hL.data)
    assert c.h0.data.tobytes() == a.h0.data.tobytes()


def test_train_mode_needs_rng():
    g, _, cfg, params = _setup(0)
    with pytest.raises(ValueError):
        encode(GraphView.of(g), params, cfg, train=True)


def test_lambdas_count_checked():
    with pytest.raises(ValueError):
        EncoderConfig(feature_dims=[2], n_relations=1, layers=2, lambdas=[1.0])


def test_projection_of_zero_parameters_is_zero():
    g, _, cfg, params = _setup(0)
    for k in ("proj.W1", "proj.b1", "proj.W2", "proj.b2"):
        params[k].data[:] = 0.0
    z = project(Tensor(np.random.default_rng(0).normal(size=(g.n, cfg.hidden))), params)
    assert z.shape == (g.n, cfg.proj_dim) and np.all(z.data == 0.0)


def test_init_scheme():
    cfg = EncoderConfig(feature_dims=[3, 2], n_relations=2, hidden=8)
    p = init_params(cfg, 0)
    assert np.all(p["layer1.Q"].data == 1.0) and np.all(p["layer2.K"].data == 1.0)
    assert np.all(p["fusion.b_I"].data == 0.0)
    bound = math.sqrt(6 / 16)
    assert np.all(np.abs(p["layer1.W_A"].data) <= bound)


# ---------------------------------------------------------------- softmax variant


def test_softmax_single_neighbour_weight_is_one():
    q = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    tgt, nbr = nc.as_index([0, 1, 1], 3), nc.as_index([1, 0, 2], 3)
    w = _softmax_weights(q, q, tgt, nbr).data[:, 0]
    assert w[0] == 1.0
    assert w[1] >= 0 and w[2] >= 0
    assert w[1] + w[2] == pytest.approx(1.0, abs=1e-15)


def test_softmax_variant_differs_on_heterophilic_triangle():
    feats = [np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]])]
    tri = np.array([[0, 1], [1, 2], [2, 0], [1, 0], [2, 1], [0, 2]])
    view = GraphView(feats, [tri])
    outs = {}
    for kind in ("tanh", "softmax"):
        cfg = EncoderConfig(feature_dims=[2], n_relations=1, hidden=4, attention=kind)
        outs[kind] = encode(view, init_params(cfg, 0), cfg).hL.data
    assert not np.allclose(outs["tanh"], outs["softmax"])


# ---------------------------------------------------------------- baseline


def test_mean_aggregation_mixes_heterophilic_pair():
    h = Tensor([[1.0, 0.0], [0.0, 1.0]])
    view = GraphView([h.data], [np.array([[0, 1]])])
    params = {"layer1.W_r0": Tensor(np.eye(2))}
    cos = []
    for _ in range(5):
        h = mean_aggregate(h, view, params, 1)
        a, b = h.data
        cos.append(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert all(x < y for x, y in zip(cos, cos[1:]))


def test_baseline_shapes():
    g, _, _, _ = _setup(0)
    bcfg = BaselineConfig(feature_dims=g.feature_dims, n_relations=2, hidden=5)
    h, logits = baseline_forward(GraphView.of(g), init_baseline(bcfg, 0), bcfg)
    assert h.shape == (g.n, 5) and logits.shape == (g.n, 2)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    _, _, cfg, params = _setup(3)
    params["layer1.Q"].data[0, 0] = np.nextafter(1.0, 2.0)
    save_checkpoint(params, tmp_path / "ck", {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"note": "x"} and list(loaded) == list(params)
    for k in params:
        assert loaded[k].data.tobytes() == params[k].data.tobytes()
        assert loaded[k].shape == params[k].shape
