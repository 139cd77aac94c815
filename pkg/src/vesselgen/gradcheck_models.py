"""Finite-difference checks of the full Stage-1 and Stage-2 losses at tiny sizes."""
from __future__ import annotations

import numpy as np

from vesselgen import rvae, segvae
from vesselgen.autodiff.gradcheck import GradCheckResult, check_params
from vesselgen.preprocess import preprocess_skeleton, resample_segment
from vesselgen.synth import SynthConfig, generate_tree

# gradients that are exactly zero (e.g. attention key biases) compare against
# finite-difference round-off; a slightly larger step and this floor keep that
# noise from dominating the report
FLOOR = 1e-6
STEP = 1e-5


def _samples(seed: int, n: int = 2):
    sc = SynthConfig(depth_range=(1, 2), points_range=(6, 10))
    return [preprocess_skeleton(generate_tree(sc, np.random.default_rng([seed, i]))) for i in range(n)]


def stage1_results(seed: int = 0) -> list[GradCheckResult]:
    cfg = rvae.RvaeConfig(hidden_dim=6, latent_dim=4, max_depth=6)
    store = rvae.init_params(cfg, np.random.default_rng(seed))
    trees = [s.key_graph for s in _samples(seed)]
    return check_params(lambda: rvae.rvae_loss(trees, store, cfg, np.random.default_rng(seed + 1))[0],
                        store, h=STEP, floor=FLOOR)


def stage2_results(seed: int = 0) -> list[GradCheckResult]:
    cfg = segvae.SegVaeConfig(model_dim=8, n_layers=2, n_heads=2, ff_dim=8, latent_dim=4, max_len=10)
    store = segvae.init_params(cfg, np.random.default_rng(seed))
    pairs = segvae.segment_pairs(_samples(seed))[:2]
    segs = [resample_segment(p[0], n, cfg.max_len) for p, n in zip(pairs, (8, 6))]
    cs = [p[1] for p in pairs]
    return check_params(lambda: segvae.segvae_loss(segs, cs, store, cfg, np.random.default_rng(seed + 1))[0],
                        store, h=STEP, floor=FLOOR)


def check_stage(stage: int, seed: int = 0) -> tuple[float, str]:
    """Worst relative error over all parameters and the parameter it occurs in."""
    res = stage1_results(seed) if stage == 1 else stage2_results(seed)
    worst = max(res, key=lambda r: r.max_rel_error)
    return worst.max_rel_error, worst.name
