import dataclasses

import numpy as np
import pytest

from domaingcn import autodiff as ad
from domaingcn.audit import audit_setup, gradient_audit, make_audit_graph
from domaingcn.autodiff import Tensor
from domaingcn.config import HyperParams
from domaingcn.errors import DimensionError, FormatError
from domaingcn.graph import WsiGraph, knn_edges, positional_encoding
from domaingcn.model import (
    attention_pool,
    forward,
    init_params,
    load_checkpoint,
    message_passing_layer,
    node_embeddings,
    param_shapes,
    project_and_concat,
    save_checkpoint,
)

SMALL = HyperParams(hidden=8, pe_dim=4, layers=2, feature_dim=6)


def random_graph(seed, n=12, k=3, hyper=SMALL, label=1):
    rng = np.random.default_rng(seed)
    cells = rng.choice(64, size=n, replace=False)
    coords = np.stack([cells % 8, cells // 8], axis=1).astype(np.int64)
    return WsiGraph(
        f"g{seed}", coords, rng.standard_normal((n, hyper.feature_dim)),
        positional_encoding(coords, hyper.pe_dim), knn_edges(coords, k),
        rng.integers(1, 5, size=n).astype(np.int64), label, [f"p{i}" for i in range(n)],
    )


def randomize(params, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for t in params.tensors.values():
        t.data[...] = rng.standard_normal(t.shape) * scale
    return params


# --- straight-loop oracle -------------------------------------------------------------


def loop_layer(x, edges, P, l, eps, msg_w=None):
    n, d = x.shape
    out = np.zeros_like(x)
    for i in range(n):
        nbrs = [int(j) for s, j in edges if s == i]
        agg = np.zeros(d)
        for c in range(d):
            if not nbrs:
                continue
            m = [(max(x[j, c], 0.0) + eps) * (1 if msg_w is None else msg_w[j]) for j in nbrs]
            top = max(m)
            e = [np.exp(v - top) for v in m]
            agg[c] = sum(a * v for a, v in zip(e, m)) / sum(e)
        h = x[i] + agg
        z = np.maximum(h @ P[f"layer{l}.mlp1_W"] + P[f"layer{l}.mlp1_b"][0], 0.0)
        out[i] = x[i] + z @ P[f"layer{l}.mlp2_W"] + P[f"layer{l}.mlp2_b"][0]
    return out


def loop_forward(graph, params, hyper):
    P = {k: t.data for k, t in params.items()}
    proj = graph.node_features @ P["proj_W"] + P["proj_b"][0]
    x = np.concatenate([proj, graph.positional], axis=1)
    msg_w = None
    if hyper.domain_weights_enabled:
        if hyper.weight_mode == "scale_input":
            x = x * graph.node_weights[:, None]
        else:
            msg_w = graph.node_weights
    for l in range(hyper.layers):
        x = loop_layer(x, graph.edges, P, l, hyper.epsilon, msg_w)
    s = np.array([np.tanh(row @ P["attn_V"]) @ P["attn_w"][:, 0] for row in x])
    a = np.exp(s - s.max())
    a /= a.sum()
    emb = sum(a[i] * x[i] for i in range(len(a)))
    return emb @ P["head_W"] + P["head_b"][0], a


@pytest.mark.parametrize("mode", ["scale_input", "scale_message"])
@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_loop_oracle(seed, mode):
    hyper = dataclasses.replace(SMALL, weight_mode=mode)
    g = random_graph(seed, n=5, k=2, hyper=hyper)
    params = randomize(init_params(hyper), seed + 10)
    logits, scores = forward(g, params, hyper)
    ref_logits, ref_scores = loop_forward(g, params, hyper)
    assert np.max(np.abs(logits.data[0] - ref_logits)) <= 1e-12
    assert np.max(np.abs(scores - ref_scores)) <= 1e-12


def test_forward_matches_loop_oracle_default_width():
    hyper = HyperParams(feature_dim=16)
    g = random_graph(7, n=9, k=8, hyper=hyper)
    params = randomize(init_params(hyper), 3, scale=0.1)
    logits, _ = forward(g, params, hyper)
    ref, _ = loop_forward(g, params, hyper)
    assert np.max(np.abs(logits.data[0] - ref)) <= 1e-12


# --- layer-level examples ---------------------------------------------------------------


def test_param_shapes_default():
    shapes = param_shapes(HyperParams())
    assert shapes["proj_W"] == (1024, 64) and shapes["layer3.mlp2_W"] == (96, 96)
    assert shapes["attn_V"] == (96, 64) and shapes["attn_w"] == (64, 1) and shapes["head_W"] == (96, 2)
    assert "layer4.mlp1_W" not in shapes


def test_init_is_glorot_with_zero_biases():
    p = init_params(HyperParams(), seed=1)
    for name, t in p.items():
        if name.endswith("_b"):
            assert not t.data.any()
        else:
            a = np.sqrt(6.0 / sum(t.shape))
            assert np.abs(t.data).max() <= a
    assert init_params(HyperParams(), seed=1).equal(p)


def test_project_zero_input_gives_positional_tail():
    params = init_params(SMALL)
    pe = np.random.default_rng(0).standard_normal((3, 4))
    out = project_and_concat(Tensor(np.zeros((3, 6))), Tensor(pe), params).data
    assert not out[:, :8].any() and np.array_equal(out[:, 8:], pe)


def test_project_identity_hand_case():
    hyper = HyperParams(hidden=2, pe_dim=4, layers=1, feature_dim=2)
    params = init_params(hyper)
    params["proj_W"].data[...] = np.eye(2)
    params["proj_b"].data[...] = [[0.5, -0.5]]
    out = project_and_concat(Tensor([[1.0, 2.0]]), Tensor([[9.0, 8.0, 7.0, 6.0]]), params).data
    assert out.tolist() == [[1.5, 1.5, 9.0, 8.0, 7.0, 6.0]]


def test_project_gradient_and_shape_check():
    params = init_params(SMALL)
    pe = Tensor(np.ones((3, 4)))
    f = lambda x: ad.sum_all(ad.tanh(project_and_concat(x, pe, params)))
    assert ad.grad_check(f, np.random.default_rng(1).standard_normal((3, 6))) < 1e-6
    with pytest.raises(DimensionError):
        project_and_concat(Tensor(np.ones((3, 5))), pe, params)


def test_zero_mlp_is_residual_identity():
    hyper = SMALL
    params = init_params(hyper)
    for name, t in params.items():
        if ".mlp" in name:
            t.data[...] = 0.0
    g = random_graph(2, hyper=hyper)
    x = project_and_concat(Tensor(g.node_features), Tensor(g.positional), params)
    x = ad.scale_rows(x, g.node_weights)
    assert np.array_equal(node_embeddings(g, params, hyper).data, x.data)


def test_single_neighbour_aggregates_its_message():
    # node 0 listens to node 1 only; mlp1 = identity, mlp2 = identity exposes x + agg
    hyper = HyperParams(hidden=2, pe_dim=4, layers=1, feature_dim=2)
    params = init_params(hyper)
    for name in ("layer0.mlp1_W", "layer0.mlp2_W"):
        params[name].data[...] = np.eye(6)
    for name in ("layer0.mlp1_b", "layer0.mlp2_b"):
        params[name].data[...] = 0.0
    x = np.array([[1.0, 2, 3, 4, 5, 6], [0.5, -1, 2, -3, 4, -5]])
    out = message_passing_layer(Tensor(x), np.array([[0, 1]]), params, 0, 1e-7).data
    agg = np.maximum(x[1], 0) + 1e-7
    assert np.allclose(out[0], x[0] + np.maximum(x[0] + agg, 0), rtol=0, atol=1e-15)
    # node 1 has no neighbours and aggregates zero
    assert np.array_equal(out[1], x[1] + np.maximum(x[1], 0))


def test_layer_rejects_bad_edges():
    params = init_params(SMALL)
    with pytest.raises(DimensionError):
        message_passing_layer(Tensor(np.ones((2, 12))), np.array([[0, 5]]), params, 0, 1e-7)


def test_attention_singleton_and_uniform():
    params = randomize(init_params(SMALL), 0)
    h = np.random.default_rng(0).standard_normal((1, 12))
    emb, scores = attention_pool(Tensor(h), params)
    assert scores.tolist() == [1.0] and np.array_equal(emb.data, h)
    emb, scores = attention_pool(Tensor(np.tile(h, (7, 1))), params)
    assert np.allclose(scores, 1 / 7, rtol=0, atol=1e-15)


def test_attention_gradient():
    params = randomize(init_params(SMALL), 1)
    f = lambda h: ad.sum_all(ad.tanh(attention_pool(h, params)[0]))
    assert ad.grad_check(f, np.random.default_rng(2).standard_normal((6, 12))) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_attention_scores_are_probabilities(seed):
    g = random_graph(seed)
    _, scores = forward(g, randomize(init_params(SMALL), seed), SMALL)
    assert (scores >= 0).all() and abs(scores.sum() - 1) <= 1e-12


# --- whole-model properties ------------------------------------------------------------------


def permuted(g, perm):
    inv = np.argsort(perm)
    return WsiGraph(
        g.wsi_id, g.coords[perm], g.node_features[perm], g.positional[perm],
        inv[g.edges], g.node_weights[perm], g.label, [g.patch_ids[i] for i in perm],
    )


@pytest.mark.parametrize("seed", range(5))
def test_permutation_invariance(seed):
    hyper = HyperParams(feature_dim=32)
    g = random_graph(seed, n=30, k=8, hyper=hyper)
    params = init_params(hyper, seed=seed)
    perm = np.random.default_rng(seed).permutation(g.n_nodes)
    a, sa = forward(g, params, hyper)
    b, sb = forward(permuted(g, perm), params, hyper)
    assert np.max(np.abs(a.data - b.data)) <= 1e-9
    assert np.max(np.abs(sa[perm] - sb)) <= 1e-12


def test_ablation_matches_all_ones_weights_bitwise():
    g = random_graph(4).with_weights(np.ones(12))
    params = init_params(SMALL)
    off = dataclasses.replace(SMALL, domain_weights_enabled=False)
    assert np.array_equal(forward(g, params, SMALL)[0].data, forward(g, params, off)[0].data)
    # and the ablation ignores whatever weights are attached
    g4 = g.with_weights(np.full(12, 4))
    assert np.array_equal(forward(g4, params, off)[0].data, forward(g, params, off)[0].data)


def test_locality_on_path_graph():
    hyper = dataclasses.replace(SMALL, layers=2)
    n = 8
    coords = np.stack([np.arange(n), np.zeros(n, int)], axis=1)
    # directed path: node i listens to i + 1
    edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    rng = np.random.default_rng(5)
    feats = rng.standard_normal((n, 6))
    g = WsiGraph("path", coords, feats, positional_encoding(coords, 4), edges, np.ones(n, np.int64), 0)
    params = randomize(init_params(hyper), 6)
    base = node_embeddings(g, params, hyper).data
    feats2 = feats.copy()
    feats2[5] += 10.0
    g2 = WsiGraph("path", coords, feats2, g.positional, edges, g.node_weights, 0)
    moved = node_embeddings(g2, params, hyper).data
    changed = np.flatnonzero(np.abs(moved - base).max(axis=1) > 0)
    # with L = 2, node 5 reaches nodes 3, 4 and itself only
    assert changed.tolist() == [3, 4, 5]


def test_forward_is_deterministic():
    g = random_graph(8)
    params = init_params(SMALL)
    a = forward(g, params, SMALL)
    b = forward(g, params, SMALL)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1], b[1])


def test_checkpoint_round_trip(tmp_path):
    hyper = dataclasses.replace(SMALL, weight_mode="scale_message", epsilon=1e-6)
    params = randomize(init_params(hyper), 9)
    path = tmp_path / "sub" / "ck.npz"
    save_checkpoint(path, params, hyper)
    loaded, h2 = load_checkpoint(path)
    assert h2 == hyper and loaded.equal(params)
    g = random_graph(1, hyper=hyper)
    assert np.array_equal(forward(g, loaded, h2)[0].data, forward(g, params, hyper)[0].data)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.npz"
    np.savez(p, x=np.zeros(3))
    with pytest.raises(FormatError):
        load_checkpoint(p)


# --- gradient audit --------------------------------------------------------------------------


def test_audit_graph_shape():
    g = make_audit_graph(0)
    assert g.n_nodes == 10 and g.edges.shape == (8, 2)
    assert not (g.edges[:, 0] == g.edges[:, 1]).any()


def test_small_model_full_gradient_check():
    g = random_graph(3, n=10, k=2)
    params = randomize(init_params(SMALL), 4)
    res = gradient_audit(g, params, SMALL, exhaustive=True)
    assert res.n_checked == params.n_values()
    assert res.max_error < 1e-4


def test_audit_setup_is_reproducible():
    hyper = HyperParams(layers=1)
    g1, p1 = audit_setup(1, hyper)
    g2, p2 = audit_setup(1, hyper)
    assert g1 == g2 and p1.equal(p2)
