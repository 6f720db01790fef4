import numpy as np
import pytest

from manifold_ssl import diffcore as dc
from manifold_ssl.encoder import EncoderConfig, encode, init_encoder
from manifold_ssl.errors import DegenerateError, DimensionError
from manifold_ssl.graph import (GraphConfig, classify, forward_batch, forward_instance, init_graph,
                                learn_edges, refine)
from manifold_ssl.protogen import PrototypeConfig, generate_all, init_prototypes


def leaves(params, grad=False):
    return {k: dc.Tensor(v, requires_grad=grad, name=k) for k, v in params.items()}


def identity_phi(d, **kw):
    """Graph whose edge embedding is the identity on non-negative inputs."""
    cfg = GraphConfig(d, 2, **kw)
    p = init_graph(cfg)
    for h in range(cfg.heads):
        p[f"graph.l0.phi{h}.w"] = np.eye(d)
    return cfg, p


def test_two_nodes_link_to_each_other():
    cfg, p = identity_phi(3)
    w = learn_edges(leaves(p), np.array([[1.0, 2.0, 0.5], [0.1, 0.0, 3.0]]), cfg).weights[0].data
    np.testing.assert_array_equal(w, [[0.0, 1.0], [1.0, 0.0]])


def test_identical_embeddings_give_uniform_edges():
    cfg, p = identity_phi(2)
    w = learn_edges(leaves(p), np.tile([[0.4, 0.9]], (3, 1)), cfg).weights[0].data
    np.testing.assert_allclose(w, [[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]], rtol=0, atol=1e-15)


def test_hand_computed_edge_row():
    cfg, p = identity_phi(2)
    w = learn_edges(leaves(p), np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), cfg).weights[0].data
    e = np.exp(1.0)
    assert w[0, 0] == 0.0
    assert w[0, 1] == pytest.approx(1 / (1 + e), abs=1e-12)
    np.testing.assert_allclose(w[0, 1:], [0.26894, 0.73106], atol=1e-5)


def test_logit_scaling_flag():
    cfg, p = identity_phi(2, logit_scaling=True)
    w = learn_edges(leaves(p), np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), cfg).weights[0].data
    s = np.exp(1 / np.sqrt(2))
    assert w[0, 2] == pytest.approx(s / (1 + s), abs=1e-12)


def test_single_node_graph_is_degenerate():
    cfg, p = identity_phi(2)
    with pytest.raises(DegenerateError):
        learn_edges(leaves(p), np.ones((1, 2)), cfg)


def test_zero_message_leaves_residual_path():
    cfg = GraphConfig(4, 2)
    p = init_graph(cfg)
    p["graph.l0.psi.w"][:] = 0.0
    f = np.random.default_rng(0).normal(size=(5, 4))
    lv = leaves(p)
    out = refine(lv, f, learn_edges(lv, f, cfg), cfg).data
    np.testing.assert_array_equal(out, np.where(f > 0, f, 0.1 * f))


def test_uniform_edges_over_identical_rows_aggregate_to_that_row():
    cfg, p = identity_phi(3)
    f = np.tile([[0.2, 0.7, 1.1]], (4, 1))
    lv = leaves(p)
    edges = learn_edges(lv, f, cfg)
    agg = dc.matmul(edges.weights[0], dc.Tensor(f)).data
    np.testing.assert_allclose(agg, f, rtol=1e-15)


@pytest.mark.parametrize("heads,layers", [(1, 1), (2, 1), (1, 2)])
def test_refine_gradients(heads, layers):
    cfg = GraphConfig(4, 2, heads=heads, edge_embed_dim=3, layers=layers, init_seed=1)
    p = leaves(init_graph(cfg), grad=True)
    f = dc.Tensor(np.random.default_rng(2).uniform(-2, 2, size=(5, 4)), requires_grad=True, name="f")

    def loss():
        out = f
        for layer in range(layers):
            out = refine(p, out, learn_edges(p, out, cfg, layer), cfg, layer)
        return dc.sum_(out)

    used = {k: v for k, v in p.items() if not k.startswith("cls")}
    rep = dc.grad_check(loss, {**used, "f": f})
    assert rep.passed, rep.max_rel_error


def _model(k=3, c=2, d=6, heads=1, layers=1, seed=0):
    pc = PrototypeConfig(c, k, d, 4, 4, (8,), init_seed=seed)
    gc = GraphConfig(d, c, heads=heads, layers=layers, init_seed=seed + 1)
    p = {**init_prototypes(pc), **init_graph(gc)}
    lv = leaves(p)
    return gc, lv, generate_all(lv, pc)


def test_graph_size_with_twenty_prototypes_per_class():
    gc, lv, protos = _model(k=20, c=10, d=8)
    inst, rp, edges = forward_instance(lv, np.ones((1, 8)), protos, gc)
    assert edges.weights[0].shape == (201, 201)
    assert inst.shape == (1, 8) and rp.shape == (200, 8)


def test_forward_instance_dimension_errors():
    gc, lv, protos = _model()
    with pytest.raises(DimensionError):
        forward_instance(lv, np.ones((1, 5)), protos, gc)
    with pytest.raises(DimensionError):
        forward_instance(lv, np.ones((2, 6)), protos, gc)
    with pytest.raises(DimensionError):
        forward_batch(lv, np.ones((3, 5)), protos, gc)


@pytest.mark.parametrize("heads,layers", [(1, 1), (3, 1), (2, 2)])
def test_edges_are_row_stochastic(heads, layers):
    gc, lv, protos = _model(heads=heads, layers=layers)
    rng = np.random.default_rng(4)
    for _ in range(20):
        _, _, edges = forward_instance(lv, rng.normal(size=(1, 6)), protos, gc)
        assert edges.heads == heads
        for w in edges.weights:
            assert np.all(np.abs(w.data.sum(axis=1) - 1.0) < 1e-9)
            assert np.all(np.diag(w.data) == 0.0)
            assert np.all(w.data >= 0.0)


def test_instance_equal_to_a_prototype_shares_its_edges():
    gc, lv, protos = _model(k=4, c=3)
    k = 5
    inst = protos.vectors.data[k:k + 1]
    w = forward_instance(lv, inst, protos, gc)[2].weights[0].data
    others = [j for j in range(w.shape[1]) if j not in (0, k + 1)]
    np.testing.assert_allclose(w[0, others], w[k + 1, others], rtol=1e-12)
    assert w[0, k + 1] == pytest.approx(w[k + 1, 0], rel=1e-12)


@pytest.mark.parametrize("layers", [1, 2])
def test_batch_rows_are_independent_graphs(layers):
    gc, lv, protos = _model(layers=layers)
    feats = np.random.default_rng(7).normal(size=(9, 6))
    full = forward_batch(lv, feats, protos, gc).data
    perm = np.random.default_rng(8).permutation(9)
    permuted = forward_batch(lv, feats[perm], protos, gc).data
    assert np.array_equal(permuted, full[perm])
    for b in range(9):
        alone = forward_instance(lv, feats[b:b + 1], protos, gc)[0].data
        assert np.array_equal(alone, full[b:b + 1])


def test_instance_row_agrees_with_full_graph_refinement():
    gc, lv, protos = _model()
    x = np.random.default_rng(3).normal(size=(1, 6))
    inst, rp, edges = forward_instance(lv, x, protos, gc)
    nodes = dc.concat([dc.Tensor(x), protos.vectors])
    full = refine(lv, nodes, edges, gc).data
    np.testing.assert_allclose(inst.data, full[:1], rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(rp.data, full[1:])


def test_prototype_permutation_equivariance():
    gc, lv, protos = _model(k=4, c=3)
    x = np.random.default_rng(1).normal(size=(1, 6))
    inst, rp, _ = forward_instance(lv, x, protos, gc)
    perm = np.random.default_rng(2).permutation(len(protos))
    inst_p, rp_p, _ = forward_instance(lv, x, protos.vectors.data[perm], gc)
    np.testing.assert_allclose(inst_p.data, inst.data, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(rp_p.data, rp.data[perm], rtol=1e-12, atol=1e-14)


def test_classify_zero_weights_is_uniform():
    p = {"cls.w": dc.Tensor(np.zeros((4, 3))), "cls.b": dc.Tensor(np.zeros((1, 3)))}
    logits = classify(p, np.random.default_rng(0).normal(size=(5, 4)))
    assert logits.shape == (5, 3)
    np.testing.assert_array_equal(dc.softmax_rows(logits).data, np.full((5, 3), 1 / 3))


def test_logits_differentiate_through_graph_and_encoder():
    ec = EncoderConfig(2, (5,), 6, init_seed=3)
    gc, lv, _ = _model()
    pc = PrototypeConfig(2, 3, 6, 4, 4, (8,))
    p = {**init_encoder(ec), **init_prototypes(pc), **{k: v.data for k, v in lv.items()}}
    lv = leaves(p, grad=True)
    x = np.random.default_rng(0).uniform(-2, 2, size=(3, 2))
    probe = np.random.default_rng(1).normal(size=(3, 2))

    def f():
        feats = encode(lv, x, ec)
        return dc.sum_(classify(lv, forward_batch(lv, feats, generate_all(lv, pc), gc)) * probe)

    rep = dc.grad_check(f, lv)
    assert rep.passed, rep.max_rel_error


def test_adjacency_csv_layout():
    cfg, p = identity_phi(2)
    text = learn_edges(leaves(p), np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), cfg).to_csv()
    lines = text.splitlines()
    assert lines[0] == "head,node,w0,w1,w2"
    assert len(lines) == 4
    for line in lines[1:]:
        assert abs(sum(float(v) for v in line.split(",")[2:]) - 1.0) < 1e-12
