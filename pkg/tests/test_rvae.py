import numpy as np
import pytest

from vesselgen import rvae
from vesselgen.core import GeometricDescriptor, KeyGraph, KeyNode, VesselError, ZERO_DESC, validate_key_graph
from vesselgen.gradcheck_models import stage1_results

TINY = dict(hidden_dim=8, latent_dim=4, max_depth=8, batch_size=4)


def test_config_validation_and_schedule():
    with pytest.raises(VesselError):
        rvae.RvaeConfig(hidden_dim=0)
    cfg = rvae.RvaeConfig(lr=1e-3, lr_decay=0.8, lr_every=100)
    assert cfg.lr_at(0) == 1e-3 and cfg.lr_at(200) == pytest.approx(6.4e-4)
    assert rvae.RvaeConfig.from_dict(cfg.to_dict()) == cfg


def test_node_classes():
    assert [rvae.node_class(None, None), rvae.node_class(1, None), rvae.node_class(None, 2),
            rvae.node_class(1, 2)] == [0, 1, 2, 3]


def test_flatten_levels(samples):
    kg = samples[0].key_graph
    flat = rvae.flatten(kg)
    assert flat.attrs.shape == (len(kg.nodes), 10)
    with pytest.raises(VesselError):
        rvae.flatten(kg, max_depth=0)


def test_loss_is_finite_and_deterministic(samples):
    cfg = rvae.RvaeConfig(**TINY)
    store = rvae.init_params(cfg, np.random.default_rng(0))
    trees = [s.key_graph for s in samples]
    a = [t.item() for t in rvae.rvae_loss(trees, store, cfg, np.random.default_rng(1))]
    b = [t.item() for t in rvae.rvae_loss(trees, store, cfg, np.random.default_rng(1))]
    assert a == b and all(np.isfinite(a))
    assert a[0] == pytest.approx(a[1] * cfg.w_attr + a[2] * cfg.w_cls + a[3] * cfg.w_kl)


def test_full_loss_gradient():
    worst = max(r.max_rel_error for r in stage1_results(0))
    assert worst < 1e-4


def test_decode_is_valid_binary_tree():
    cfg = rvae.RvaeConfig(**TINY)
    store = rvae.init_params(cfg, np.random.default_rng(3))
    for k in range(10):
        kg = rvae.sample_key_graph(store, cfg, np.random.default_rng(k), max_depth=4)
        assert kg.is_binary()
        assert kg.max_depth() <= 4
        problems = validate_key_graph(kg, max_depth=4, check_consistency=False)
        assert problems == [], problems


def test_project_key_graph_clamps():
    bad = GeometricDescriptor(-1.0, 2.0, -0.5, -2)
    nodes = {0: KeyNode([0, 0, 0], [0.3, 0, 0], ZERO_DESC),
             1: KeyNode([0, 0, 2], [0, 0, 0], bad),
             2: KeyNode([0, 1, 0], [0, 3, 4], GeometricDescriptor(1.0, 2.0, 0.1, 1))}
    kg = rvae.project_key_graph(KeyGraph(nodes, 0, {0: (1, 2), 1: (None, None), 2: (None, None)}))
    assert np.array_equal(kg.nodes[0].dir, np.zeros(3))
    assert np.allclose(kg.nodes[1].dir, [0, 0, 1])
    assert np.allclose(kg.nodes[2].dir, [0, 0.6, 0.8])
    d = kg.nodes[1].desc
    assert (d.ell, d.delta, d.kappa, d.rho) == (0.0, 0.0, 0.0, 0)
    assert kg.nodes[2].desc.delta == 1.0 and kg.nodes[2].desc.kappa == 0.0


def test_same_topology(samples):
    kg = samples[0].key_graph
    assert rvae.same_topology(kg, kg.relabeled())
    other = [s.key_graph for s in samples if len(s.key_graph.nodes) != len(kg.nodes)]
    if other:
        assert not rvae.same_topology(kg, other[0])


def test_training_reduces_loss_and_resumes_exactly(samples, tmp_path):
    trees = [s.key_graph for s in samples[:3]]
    cfg = rvae.RvaeConfig(epochs=30, lr=3e-3, w_kl=1e-3, **TINY)
    full, log = rvae.train_stage1(trees, cfg, seed=5)
    assert log[-1]["total"] < log[0]["total"]

    cfg_half = rvae.RvaeConfig.from_dict({**cfg.to_dict(), "epochs": 15})
    part, log_a = rvae.train_stage1(trees, cfg_half, seed=5, log_path=tmp_path / "log.csv")
    part.save(tmp_path / "p.vfp")
    from vesselgen.autodiff import ParameterStore

    loaded, _ = ParameterStore.load(tmp_path / "p.vfp")
    resumed, log_b = rvae.train_stage1(trees, cfg, seed=5, store=loaded, start_epoch=15,
                                       log_path=tmp_path / "log.csv")
    for k in full.names():
        assert np.array_equal(full[k].data, resumed[k].data)
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert len(rows) == 1 + 30
    assert [r["total"] for r in log_a + log_b] == [r["total"] for r in log]
