import numpy as np
import pytest

from vesselgen import segvae
from vesselgen.autodiff import Tensor
from vesselgen.core import EX, GeometricDescriptor, VesselError
from vesselgen.gradcheck_models import stage2_results
from vesselgen.preprocess import resample_segment

TINY = dict(model_dim=16, n_layers=2, n_heads=2, latent_dim=4, max_len=40, batch_size=8)


@pytest.fixture(scope="module")
def pairs(samples):
    out = []
    for seg, c in segvae.segment_pairs(samples):
        if len(seg) > 40:
            seg = resample_segment(seg, 40, 40)
        out.append((seg, c))
    return out


def test_config_validation():
    with pytest.raises(VesselError):
        segvae.SegVaeConfig(model_dim=10, n_heads=4)
    with pytest.raises(VesselError):
        segvae.SegVaeConfig(max_len=1)
    cfg = segvae.SegVaeConfig(lr=1e-3, lr_every=10, lr_decay=0.5)
    assert cfg.lr_at(25) == pytest.approx(2.5e-4)
    assert segvae.SegVaeConfig().lr_at(10 ** 6) == segvae.SegVaeConfig().lr


def test_force_endpoints_exact():
    rng = np.random.default_rng(0)
    pts = Tensor(rng.normal(size=(3, 10, 4)))
    lengths = np.array([10, 4, 2])
    out = segvae.force_endpoints(pts, lengths).data
    for b, n in enumerate(lengths):
        assert np.array_equal(out[b, 0, :3], [0, 0, 0])
        assert np.abs(out[b, n - 1, :3] - EX).max() < 1e-15
    assert np.array_equal(out[..., 3], pts.data[..., 3])


def test_encoder_ignores_padding(pairs):
    cfg = segvae.SegVaeConfig(**TINY)
    store = segvae.init_params(cfg, np.random.default_rng(0))
    short = min(pairs, key=lambda p: len(p[0]))
    long = max(pairs, key=lambda p: len(p[0]))
    mu1, _ = segvae.encode_segment(short[0], short[1], store, cfg)
    mu2, _ = segvae.encode_segments([short[0], long[0]], [short[1], long[1]], store, cfg)
    assert np.abs(mu1 - mu2[0]).max() < 1e-12


def test_full_loss_gradient():
    worst = max(r.max_rel_error for r in stage2_results(0))
    assert worst < 1e-4


def test_loss_rejects_long_segment(pairs):
    cfg = segvae.SegVaeConfig(**{**TINY, "max_len": 3})
    store = segvae.init_params(cfg, np.random.default_rng(0))
    with pytest.raises(VesselError):
        segvae.segvae_loss([pairs[0][0]], [pairs[0][1]], store, cfg)


def test_samples_are_canonical():
    cfg = segvae.SegVaeConfig(**TINY)
    store = segvae.init_params(cfg, np.random.default_rng(1))
    c = GeometricDescriptor(1.3, 1.0, 0.4, 2)
    segs = segvae.sample_segments([c] * 5, store, cfg, np.random.default_rng(2))
    for s in segs:
        assert 2 <= len(s) <= cfg.max_len
        assert np.array_equal(s.pos[0], [0, 0, 0]) and np.array_equal(s.pos[-1], EX)
        assert np.all(s.radius > 0)
    again = segvae.sample_segments([c] * 5, store, cfg, np.random.default_rng(2))
    assert all(np.array_equal(a.pos, b.pos) for a, b in zip(segs, again))


def test_decode_segment_shapes():
    cfg = segvae.SegVaeConfig(**TINY)
    store = segvae.init_params(cfg, np.random.default_rng(1))
    pts, logits = segvae.decode_segment(np.zeros(cfg.latent_dim), [1.0, 1.0, 0.0, 1], store, cfg)
    assert pts.shape == (cfg.max_len, 4) and logits.shape == (cfg.max_len - 1,)


def test_training_reduces_loss_and_resumes_exactly(pairs):
    cfg = segvae.SegVaeConfig(epochs=12, lr=1e-3, w_kl=1e-3, **TINY)
    full, log = segvae.train_stage2(pairs[:6], cfg, seed=3)
    assert log[-1]["total"] < log[0]["total"]
    half = segvae.SegVaeConfig.from_dict({**cfg.to_dict(), "epochs": 6})
    part, log_a = segvae.train_stage2(pairs[:6], half, seed=3)
    rest, log_b = segvae.train_stage2(pairs[:6], cfg, seed=3, store=part, start_epoch=6)
    assert [r["total"] for r in log_a + log_b] == [r["total"] for r in log]
    for k in full.names():
        assert np.array_equal(full[k].data, rest[k].data)
    rep = segvae.reconstruction_report([p[0] for p in pairs[:6]], [p[1] for p in pairs[:6]], full, cfg)
    assert 0.0 <= rep["length_accuracy"] <= 1.0 and np.isfinite(rep["recon_mse"])
