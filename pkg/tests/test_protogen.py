import numpy as np
import pytest

from manifold_ssl import diffcore as dc
from manifold_ssl.errors import ConfigError
from manifold_ssl.protogen import (PrototypeConfig, PrototypeSet, class_centers, generate_all,
                                   init_prototypes, parameter_count)


def leaves(params):
    return {k: dc.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def small(**kw):
    return PrototypeConfig(**{"n_classes": 3, "n_per_class": 4, "output_dim": 6, "embed_dim_k": 5,
                              "embed_dim_c": 3, "mlp_hidden": (7,), **kw})


def test_shape_and_labels():
    cfg = small()
    ps = generate_all(leaves(init_prototypes(cfg)), cfg)
    assert ps.vectors.shape == (12, 6)
    assert list(ps.labels) == [0] * 4 + [1] * 4 + [2] * 4
    assert len(ps) == 12 and ps.n_classes == 3


def test_rows_are_mlp_of_concatenated_embeddings():
    cfg = small()
    p = init_prototypes(cfg)
    ps = generate_all(leaves(p), cfg)
    i, j = 2, 1
    h = np.concatenate([p["proto.ek"][i], p["proto.ec"][j]])[None]
    h = h @ p["proto.w0"] + p["proto.b0"]
    h = np.where(h > 0, h, 0.1 * h) @ p["proto.w1"] + p["proto.b1"]
    np.testing.assert_allclose(ps.vectors.data[j * cfg.n_per_class + i], h[0], rtol=1e-12, atol=1e-14)


def test_shared_instance_embedding_gives_equal_prototypes():
    cfg = small()
    p = init_prototypes(cfg)
    p["proto.ek"][1] = p["proto.ek"][0]
    v = generate_all(leaves(p), cfg).vectors.data
    for j in range(cfg.n_classes):
        assert np.array_equal(v[j * 4], v[j * 4 + 1])
    assert not np.array_equal(v[0], v[2])


def test_parameter_count_scaling():
    base = small()
    assert parameter_count(base) == sum(a.size for a in init_prototypes(base).values())
    doubled = small(n_classes=6)
    assert parameter_count(doubled) - parameter_count(base) == 3 * base.embed_dim_c
    # growth is additive in K and C; a free table would grow by K*C*d_f
    k2c2 = small(n_classes=6, n_per_class=8)
    assert parameter_count(k2c2) - parameter_count(base) == 4 * base.embed_dim_k + 3 * base.embed_dim_c


def test_generation_is_deterministic():
    cfg = small()
    p = leaves(init_prototypes(cfg))
    assert np.array_equal(generate_all(p, cfg).vectors.data, generate_all(p, cfg).vectors.data)


def _set(rows, k):
    rows = np.asarray(rows, dtype=float)
    labels = np.repeat(np.arange(len(rows) // k), k)
    return PrototypeSet(dc.Tensor(rows), labels, k)


def test_center_examples():
    rows = np.array([[1.0, 2.0], [-3.0, 0.5]])
    np.testing.assert_array_equal(class_centers(_set(rows, 1)).data, rows)
    v = np.array([0.3, -1.7])
    np.testing.assert_array_equal(class_centers(_set([v, -v, v, v], 2)).data[0], [0.0, 0.0])
    np.testing.assert_allclose(class_centers(_set([[1, 0], [0, 1], [2, 2], [4, 4]], 2)).data,
                               [[0.5, 0.5], [3.0, 3.0]])


def test_gradients_through_generation_and_centers():
    cfg = small(n_classes=2, n_per_class=3)
    p = leaves(init_prototypes(cfg))
    probe = np.random.default_rng(0).normal(size=(2, 6))

    def f():
        ps = generate_all(p, cfg)
        return dc.sum_(class_centers(ps) * probe) + dc.sum_(dc.square(ps.vectors))

    rep = dc.grad_check(f, p)
    assert rep.passed, rep.max_rel_error


def test_invalid_config():
    with pytest.raises(ConfigError):
        PrototypeConfig(1)
    with pytest.raises(ConfigError):
        PrototypeConfig(2, n_per_class=0)


def test_csv_export():
    text = _set([[1.0, 2.0], [3.0, 4.0]], 1).to_csv()
    assert text.splitlines() == ["class,v0,v1", "0,1.0,2.0", "1,3.0,4.0"]
