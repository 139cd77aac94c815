"""Command-line entry point: ``vesselgen <subcommand> [options]``.

Exit codes: 0 success, 1 failed check, 2 usage or config error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from typing import Optional

import numpy as np

from vesselgen import rvae, segvae
from vesselgen.assembly import MeshError, export_mesh, generate_vessel, mesh_vessel, read_obj, skeleton_to_mesh
from vesselgen.checkpoint import load_checkpoint, save_checkpoint
from vesselgen.core import VesselError, dump_skeleton, key_graph_to_dict, load_skeleton
from vesselgen.metrics import EvalConfig, VesselSample, evaluate_sets
from vesselgen.preprocess import load_dataset, preprocess_volume, read_voxels, save_sample
from vesselgen.synth import SynthConfig, generate_dataset

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

# per-component offsets from the global seed
SEED_OFFSETS = {"synth": 0, "stage1": 1, "stage2": 2, "generate": 3, "evaluate": 4}

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "configs")


class ConfigError(VesselError):
    pass


def load_config(path: Optional[str]) -> dict:
    base_path = os.path.join(CONFIG_DIR, "default.json")
    with open(base_path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if path:
        if not os.path.exists(path) and os.path.exists(os.path.join(CONFIG_DIR, path)):
            path = os.path.join(CONFIG_DIR, path)
        with open(path, encoding="utf-8") as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k] = {**cfg[k], **v}
            else:
                cfg[k] = v
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return cfg


def component_seed(cfg: dict, args, name: str) -> int:
    base = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed", 0)
    return (int(base) + SEED_OFFSETS[name]) % 2 ** 64


def _section(cfg: dict, name: str, cls, overrides: dict):
    d = dict(cfg.get(name, {}))
    d.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {name} settings: {sorted(unknown)}")
    try:
        return cls.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


# --------------------------------------------------------------------------- #
# Subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    sc = _section(cfg, "synth", SynthConfig, {})
    generate_dataset(args.n, sc, component_seed(cfg, args, "synth"), args.out)
    n_test = args.n // 10
    print(f"wrote {args.n - n_test} train and {n_test} test samples to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    failures = []
    ok = 0
    for path in args.volumes:
        stem = os.path.splitext(os.path.basename(path))[0]
        try:
            sample = preprocess_volume(read_voxels(path), max_len=args.max_len)
            save_sample(sample, os.path.join(args.out, f"{stem}.json"))
            ok += 1
        except (VesselError, OSError, ValueError) as exc:
            failures.append((path, str(exc)))
    print(f"processed {ok} of {len(args.volumes)} volumes")
    for path, msg in failures:
        print(f"  failed: {path}: {msg}")
    return EXIT_IO if failures and ok == 0 else EXIT_OK


def _train_data(data_dir: str):
    samples = load_dataset(data_dir, "train")
    if not samples:
        raise ConfigError(f"no training samples under {data_dir}")
    return samples


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    stage = args.stage
    name = f"stage{stage}"
    cls = rvae.RvaeConfig if stage == 1 else segvae.SegVaeConfig
    mc = _section(cfg, name, cls, {"epochs": args.epochs})
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"{name}.vfp")
    log_path = os.path.join(args.out, f"{name}_log.csv")
    store, start = None, 0
    if args.resume and os.path.exists(ckpt):
        store, saved_cfg, start = load_checkpoint(ckpt, cls)
        saved_cfg.epochs = mc.epochs
        mc = saved_cfg
    samples = _train_data(args.data)
    seed = component_seed(cfg, args, name)
    train = rvae.train_stage1 if stage == 1 else segvae.train_stage2
    store, log = train(samples, mc, seed, store=store, start_epoch=start, log_path=log_path)
    save_checkpoint(store, mc, ckpt, max(start, mc.epochs), name)
    last = log[-1] if log else None
    print(f"saved {ckpt}" + (f" (epoch {last['epoch']}, loss {last['total']:.6g})" if last else ""))
    return EXIT_OK


def _load_stage(path: str, cls):
    store, c, _ = load_checkpoint(path, cls)
    return store, c


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    gen = cfg.get("generate", {})
    s1 = _load_stage(args.stage1, rvae.RvaeConfig)
    s2 = _load_stage(args.stage2, segvae.SegVaeConfig)
    n = args.n if args.n is not None else int(gen.get("n", 16))
    voxel = args.voxel if args.voxel is not None else float(gen.get("voxel", 0.0))
    rng = np.random.default_rng(component_seed(cfg, args, "generate"))
    os.makedirs(args.out, exist_ok=True)
    bad = 0
    for i in range(n):
        g, kg = generate_vessel(s1, s2, rng, with_key_graph=True)
        stem = os.path.join(args.out, f"vessel_{i:03d}")
        dump_skeleton(g, stem + ".json")
        with open(stem + ".keygraph.json", "w", encoding="utf-8") as fh:
            json.dump(key_graph_to_dict(kg), fh)
        try:
            if voxel:
                mesh = skeleton_to_mesh(g, voxel)
            else:
                mesh, _, thin = mesh_vessel(g)
                if thin:
                    print(f"  vessel {i}: {thin} nodes thinner than the mesh resolution were thickened")
        except MeshError as exc:
            print(f"  vessel {i}: no mesh ({exc})")
            bad += 1
            continue
        export_mesh(mesh, stem + ".obj")
        if not (mesh.is_watertight() and mesh.is_consistently_oriented()):
            bad += 1
    print(f"generated {n} vessels in {args.out}")
    return EXIT_CHECK if bad else EXIT_OK


def _load_vessels(d: str) -> list[VesselSample]:
    if os.path.isdir(os.path.join(d, "skeletons")):
        d = os.path.join(d, "skeletons")
    paths = sorted(p for p in glob.glob(os.path.join(d, "*.json")) if not p.endswith(".keygraph.json"))
    out = []
    for p in paths:
        g = load_skeleton(p)
        obj = os.path.splitext(p)[0] + ".obj"
        out.append(VesselSample(g, read_obj(obj) if os.path.exists(obj) else None))
    if not out:
        raise ConfigError(f"no skeleton files in {d}")
    return out


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    ec = _section(cfg, "evaluate", EvalConfig, {"paired": True if args.paired else None})
    ec.seed = component_seed(cfg, args, "evaluate")
    report = evaluate_sets(_load_vessels(args.generated), _load_vessels(args.reference), ec)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    print(report.table(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from vesselgen.gradcheck_models import check_stage

    worst, name = check_stage(args.stage, seed=args.seed or 0)
    ok = worst < args.tol
    print(f"stage {args.stage}: max relative error {worst:.3e} at {name} -> {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vesselgen", description="Part-based 3D vessel generation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config (merged over the defaults)")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="volumes to training samples")
    sp.add_argument("volumes", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-len", type=int, default=200)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train one stage")
    common(sp)
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="sample vessels")
    common(sp)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--voxel", type=float, help="mesh voxel size (default: automatic)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="compare two vessel sets")
    common(sp)
    sp.add_argument("generated")
    sp.add_argument("reference")
    sp.add_argument("--paired", action="store_true")
    sp.add_argument("--out", help="write the report as JSON")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of a stage loss")
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except VesselError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
