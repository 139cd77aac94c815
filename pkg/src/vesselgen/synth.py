"""Seeded synthetic vessel trees for desk-scale training and evaluation."""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from vesselgen.core import SkeletonGraph, VesselError, dump_skeleton
from vesselgen.preprocess import MAX_SEQ_LEN, preprocess_skeleton, save_sample


@dataclass
class SynthConfig:
    depth_range: tuple[int, int] = (1, 3)
    bifurcation_prob: float = 0.8
    points_range: tuple[int, int] = (8, 24)
    curvature_range: tuple[float, float] = (0.0, 0.5)
    branch_angle_range: tuple[float, float] = (25.0, 60.0)
    length_range: tuple[float, float] = (3.0, 6.0)
    length_decay: float = 0.8
    root_radius: float = 0.5
    gamma: float = 3.0
    radius_decay: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("depth_range", "points_range", "curvature_range", "branch_angle_range", "length_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise VesselError(f"{name}: empty range ({lo}, {hi})")
            setattr(self, name, (lo, hi))
        if self.depth_range[0] < 0:
            raise VesselError("depth_range must be non-negative")
        if not (2 <= self.points_range[0] and self.points_range[1] <= MAX_SEQ_LEN):
            raise VesselError(f"points_range must lie in [2, {MAX_SEQ_LEN}]")
        if not 0.0 <= self.bifurcation_prob <= 1.0:
            raise VesselError("bifurcation_prob must be in [0, 1]")
        if not self.gamma > 0:
            raise VesselError("gamma must be positive")
        if not (self.root_radius > 0 and self.length_range[0] > 0 and self.length_decay > 0):
            raise VesselError("lengths and radii must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k, v in known.items():
            if isinstance(v, list):
                known[k] = tuple(v)
        return cls(**known)


def _unit(v):
    return v / np.linalg.norm(v)


def _random_perp(d, rng) -> np.ndarray:
    while True:
        w = rng.normal(size=3)
        w -= (w @ d) * d
        n = np.linalg.norm(w)
        if n > 1e-6:
            return w / n


def _bezier_tangent(ctrl, t):
    p0, p1, p2, p3 = ctrl
    t = t[:, None]
    return 3 * (1 - t) ** 2 * (p1 - p0) + 6 * (1 - t) * t * (p2 - p1) + 3 * t ** 2 * (p3 - p2)


@dataclass
class _Builder:
    pos: list = field(default_factory=list)
    rad: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    def add(self, p, r) -> int:
        self.pos.append(np.asarray(p, dtype=np.float64))
        self.rad.append(float(r))
        return len(self.pos) - 1


def _branch(cfg, rng, b, start_id, direction, r_start, level):
    """Grow one branch from node ``start_id``; returns (end id, end tangent, end radius).

    Points advance by a constant step along the unit tangent of a cubic
    Bezier whose end tangents are jittered by the curvature amplitude, so
    consecutive spacing is exactly uniform.
    """
    n = int(rng.integers(cfg.points_range[0], cfg.points_range[1] + 1))
    length = float(rng.uniform(*cfg.length_range)) * cfg.length_decay ** level
    amp = float(rng.uniform(*cfg.curvature_range))
    t0 = _unit(direction + amp * _random_perp(direction, rng))
    t1 = _unit(direction + amp * _random_perp(direction, rng))
    p0 = np.zeros(3)
    p3 = length * _unit(t0 + t1)
    ctrl = (p0, p0 + t0 * length / 3, p3 - t1 * length / 3, p3)
    params = (np.arange(n - 1) + 0.5) / (n - 1)
    tangents = _bezier_tangent(ctrl, params)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    step = length / (n - 1)
    decay = 2.0 ** (-1.0 / cfg.gamma) if cfg.radius_decay else 1.0
    r_end = r_start * decay
    prev = start_id
    p = b.pos[start_id]
    for k in range(1, n):
        p = p + step * tangents[k - 1]
        r = r_start + (r_end - r_start) * k / (n - 1)
        cur = b.add(p, r)
        b.edges.append((prev, cur))
        prev = cur
    return prev, tangents[-1], r_end


def generate_tree(cfg: SynthConfig, rng: np.random.Generator) -> SkeletonGraph:
    """A loop-free binary vessel tree with Murray-style radius decay."""
    b = _Builder()
    root = b.add(np.zeros(3), cfg.root_radius)
    target_depth = int(rng.integers(cfg.depth_range[0], cfg.depth_range[1] + 1))
    stack = [(root, np.array([0.0, 0.0, 1.0]), cfg.root_radius, 0)]
    while stack:
        start, direction, r0, level = stack.pop()
        end, tangent, r1 = _branch(cfg, rng, b, start, direction, r0, level)
        if level >= target_depth:
            continue
        if level >= cfg.depth_range[0] and rng.random() >= cfg.bifurcation_prob:
            continue
        w = _random_perp(tangent, rng)
        kids = []
        for sign in (1.0, -1.0):
            theta = math.radians(float(rng.uniform(*cfg.branch_angle_range)))
            kids.append(_unit(math.cos(theta) * tangent + sign * math.sin(theta) * w))
        for d in reversed(kids):
            stack.append((end, d, r1, level + 1))
    return SkeletonGraph(
        ids=np.arange(len(b.pos)),
        pos=np.array(b.pos),
        radius=np.array(b.rad),
        edges=np.array(b.edges, dtype=np.int64),
    )


def split_counts(n: int) -> tuple[int, int]:
    n_test = n // 10
    return n - n_test, n_test


def generate_dataset(n: int, cfg: SynthConfig, seed: int, out_dir, max_len: int = MAX_SEQ_LEN,
                     write_skeletons: bool = True) -> str:
    """Write ``n`` preprocessed trees to ``out_dir/{train,test}/sample_%05d.json``.

    Tree ``i`` uses seed ``seed + i``; the first 90% go to train. Raw
    skeletons are written alongside under ``skeletons/`` for evaluation.
    """
    if n < 1:
        raise VesselError("n must be at least 1")
    n_train, _ = split_counts(n)
    for split in ("train", "test"):
        os.makedirs(os.path.join(out_dir, split, "skeletons"), exist_ok=True)
    for i in range(n):
        tree = generate_tree(cfg, np.random.default_rng(seed + i))
        sample = preprocess_skeleton(tree, max_len=max_len)
        split = "train" if i < n_train else "test"
        save_sample(sample, os.path.join(out_dir, split, f"sample_{i:05d}.json"))
        if write_skeletons:
            dump_skeleton(tree, os.path.join(out_dir, split, "skeletons", f"skeleton_{i:05d}.json"))
    return str(out_dir)


def generate_trees(n: int, cfg: SynthConfig, seed: Optional[int] = None) -> list[SkeletonGraph]:
    base = cfg.seed if seed is None else seed
    return [generate_tree(cfg, np.random.default_rng(base + i)) for i in range(n)]
