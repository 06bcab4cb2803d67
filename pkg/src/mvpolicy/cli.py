"""Command-line entry points: synth-gen, train, eval, gradcheck, inspect.

Exit codes: 0 success, 1 usage error, 2 invariant violation (hash mismatch,
corrupt artifact, failed gradient check), 3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import synthworld
from .camgeom import VIEW_NAMES, load_rig, rig_digest
from .checkpoint import CheckpointError, HashMismatchError, load_checkpoint
from .config import RunConfig
from .dataio import DataFormatError, load_dataset, load_episode, read_manifest, write_dataset
from .evalloop import evaluate
from .gradchecks import DEFAULT_TOL, GRADCHECK_OPS, run_gradchecks
from .inspect_tools import consistency_report, expected_depth_images, readout_entropy
from .kinematics import dual_arm_chain, load_chain
from .model import build_model
from .numcore import Rng
from .trainer import NumericalAbort, Trainer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVARIANT = 2
EXIT_NUMERICAL = 3

DEFAULT_FAMILIES = "reach-left,reach-right,reach-both"

_PRESETS = {
    "default": RunConfig,
    "fast": RunConfig.fast,
    "micro": RunConfig.micro,
    "tiny": RunConfig.tiny,
}


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit code 2; this CLI reserves 2 for
    invariant violations, so route them to 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# Shared flag groups


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="JSON config file (see RunConfig.save)")
    p.add_argument("--preset", choices=sorted(_PRESETS),
                   help="built-in config preset (mutually exclusive with --config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true",
                   help="overwrite non-empty output directories")


def _add_ablations(p: _Parser) -> None:
    p.add_argument("--ablate-depth-loss", action="store_true",
                   help="train without the depth-distillation term")
    p.add_argument("--ablate-language", action="store_true",
                   help="drop the language readout (geometry tokens only)")
    p.add_argument("--ablate-pair-fusion", action="store_true",
                   help="skip RGB-D pair fusion (depth tokens from raw stream)")
    p.add_argument("--ablate-aggregation", action="store_true",
                   help="skip cross-view token aggregation")
    p.add_argument("--views", help="comma-separated camera subset, e.g. head,left_wrist")


def _load_config(args, default_preset: str = "default") -> RunConfig:
    if args.config and args.preset:
        raise UsageError("--config and --preset are mutually exclusive")
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfg = RunConfig.load(args.config)
    else:
        cfg = _PRESETS[args.preset or default_preset]()
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
    changes = {}
    if getattr(args, "ablate_depth_loss", False):
        changes["disable_depth_loss"] = True
    if getattr(args, "ablate_language", False):
        changes["disable_language"] = True
    if getattr(args, "ablate_pair_fusion", False):
        changes["disable_pair_fusion"] = True
    if getattr(args, "ablate_aggregation", False):
        changes["disable_aggregation"] = True
    if getattr(args, "views", None):
        views = tuple(v.strip() for v in args.views.split(",") if v.strip())
        unknown = [v for v in views if v not in VIEW_NAMES]
        if not views or unknown:
            raise UsageError(f"--views must name cameras from "
                             f"{', '.join(VIEW_NAMES)} (got {args.views!r})")
        changes["views"] = tuple(v for v in VIEW_NAMES if v in set(views))
    if changes:
        cfg.ablation = dataclasses.replace(cfg.ablation, **changes)
    return cfg


def _rig_chain(cfg: RunConfig):
    rig = (load_rig(cfg.rig_path) if cfg.rig_path
           else synthworld.default_rig(cfg.camera, cfg.world.narrow_fov))
    chain = load_chain(cfg.chain_path) if cfg.chain_path else dual_arm_chain()
    return rig, chain


def _run_hash(cfg: RunConfig, rig, chain) -> str:
    """The single propagated identity: config semantics + rig + chain."""
    sub = rig.subset(tuple(cfg.ablation.views))
    return cfg.run_hash(rig_digest(sub), chain.digest())


def _families(arg: str):
    fams = tuple(f.strip() for f in arg.split(",") if f.strip())
    if not fams:
        raise UsageError("no task families given")
    for f in fams:
        if f not in synthworld.FAMILIES:
            raise UsageError(
                f"unknown task family {f!r}; known: {', '.join(synthworld.FAMILIES)}")
    return fams


def _require_out(args) -> str:
    if not args.out:
        raise UsageError("--out is required for this command")
    return args.out


# ---------------------------------------------------------------------------
# synth-gen


def cmd_synth_gen(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args)
    rig, chain = _rig_chain(cfg)
    sub = rig.subset(tuple(cfg.ablation.views))
    run_hash = _run_hash(cfg, rig, chain)
    families = _families(args.families)
    count = int(args.count)
    if count <= 0:
        raise UsageError("--count must be positive")

    def records():
        for family in families:
            fam_id = synthworld.FAMILIES.index(family)
            for i in range(count):
                yield synthworld.generate_episode(
                    chain, sub, cfg.world, family, (cfg.seed, fam_id, i))

    extra = {
        "config_hash": cfg.config_hash,
        "run_hash": run_hash,
        "rig_digest": rig_digest(sub),
        "chain_digest": chain.digest(),
        "dataset_seed": cfg.seed,
        "views": list(sub.names),
        "resolution": [cfg.camera.width, cfg.camera.height],
    }
    try:
        manifest = write_dataset(out, records(), cfg.fusion.num_bins, extra,
                                 with_teacher=not args.no_teacher,
                                 force=args.force)
    except FileExistsError as exc:
        raise UsageError(f"{exc} (--force to overwrite)") from exc
    per_family = ", ".join(f"{k}={v}" for k, v in sorted(manifest["families"].items()))
    print(f"wrote {manifest['count']} episodes to {out} ({per_family})")
    print(f"run_hash {run_hash}  config_hash {cfg.config_hash}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _check_manifest_hash(manifest: dict, run_hash: str, data_dir: str) -> None:
    stored = manifest.get("run_hash")
    if stored != run_hash:
        raise InvariantError(
            f"dataset {data_dir} was generated under run hash {stored}, but "
            f"this config/rig/chain hashes to {run_hash}; regenerate the "
            f"dataset or fix the config")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args)
    rig, chain = _rig_chain(cfg)
    run_hash = _run_hash(cfg, rig, chain)
    manifest = read_manifest(args.data)
    _check_manifest_hash(manifest, run_hash, args.data)
    episodes = load_dataset(args.data)
    model = build_model(cfg, chain, rig)
    trainer = Trainer(cfg, model, episodes, out, run_hash,
                      perception_only=args.perception_only,
                      resume_from=args.resume)
    result = trainer.run(max_step=args.max_step)
    last = result["last"]
    if last:
        print(f"step {result['final_step']}: L_diff={last['diff']:.4f} "
              f"L_fk={last['fk']:.4f} L_depth={last['depth']:.4f}")
    print(f"checkpoint {result['checkpoint']}")
    print(f"metrics {result['metrics']}")
    print(f"run_hash {run_hash}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    rig, chain = _rig_chain(cfg)
    run_hash = _run_hash(cfg, rig, chain)
    model = build_model(cfg, chain, rig)
    step = load_checkpoint(args.checkpoint, model, expected_run_hash=run_hash)
    model.eval()
    families = _families(args.families)
    report = evaluate(model, rig, cfg, families, trials=int(args.trials),
                      seed=cfg.seed)
    report["run_hash"] = run_hash
    report["checkpoint"] = os.path.abspath(args.checkpoint)
    report["checkpoint_step"] = step
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    report_path = os.path.join(out, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2)
    for family in families:
        fam = report["families"][family]
        print(f"{family:24s} success {fam['success_rate']:6.1%}  "
              f"mean final distance {fam['mean_final_distance']:.4f} m")
    print(f"overall success {report['overall_success_rate']:.1%} "
          f"({report['trials']} trials/family, seed {report['seed']})")
    print(f"report {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args, default_preset="tiny")
    ops = None
    if args.ops:
        ops = tuple(o.strip() for o in args.ops.split(",") if o.strip())
        for op in ops:
            if op not in GRADCHECK_OPS:
                raise UsageError(
                    f"unknown op {op!r}; known: {', '.join(GRADCHECK_OPS)}")
    rows = run_gradchecks(cfg, ops=ops, seed=cfg.seed, tol=args.tol)
    failed = [r for r in rows if not r["ok"]]
    width = max(len(r["op"]) for r in rows)
    for r in rows:
        status = "ok" if r["ok"] else "FAIL"
        print(f"{r['op']:<{width}s}  max_rel_err {r['max_rel_err']:.3e}  "
              f"({r['checked_coords']} coords, {r['dead_coords']} dead)  {status}")
    if failed:
        print(f"{len(failed)}/{len(rows)} ops failed at tol {args.tol:g}",
              file=sys.stderr)
        return EXIT_INVARIANT
    print(f"all {len(rows)} ops within tol {args.tol:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args)
    rig, chain = _rig_chain(cfg)
    run_hash = _run_hash(cfg, rig, chain)
    manifest = read_manifest(args.data)
    _check_manifest_hash(manifest, run_hash, args.data)
    entries = manifest["episodes"]
    if not 0 <= args.episode < len(entries):
        raise UsageError(f"--episode {args.episode} out of range "
                         f"(dataset has {len(entries)} episodes)")
    entry = entries[args.episode]
    ep = load_episode(os.path.join(args.data, entry["file"]))

    model = build_model(cfg, chain, rig)
    if args.checkpoint:
        load_checkpoint(args.checkpoint, model, expected_run_hash=run_hash)
    model.eval()

    os.makedirs(out, exist_ok=True)
    rgb_u8, raw = ep.rgb[0], ep.raw_depth[0]
    image_paths = expected_depth_images(model, rgb_u8, raw,
                                        tuple(cfg.ablation.views), out)

    scene, _, instruction = synthworld.rebuild_scene(
        entry["family"], entry["seed"], cfg.world)
    rng = Rng(np.random.SeedSequence([cfg.seed, 0x1A5B, args.episode]))
    csv_path = os.path.join(out, "consistency.csv")
    stats = consistency_report(model, scene, rig, rng, csv_path)

    summary = {
        "config_hash": cfg.config_hash,
        "run_hash": run_hash,
        "checkpoint": os.path.abspath(args.checkpoint) if args.checkpoint else None,
        "episode": args.episode,
        "family": entry["family"],
        "instruction": instruction,
        "expected_depth_images": [os.path.basename(p) for p in image_paths],
        "consistency": stats,
    }
    if model.use_language:
        summary["readout_entropy"] = readout_entropy(model, rgb_u8, instruction)
    with open(os.path.join(out, "inspect.json"), "w") as fh:
        json.dump(summary, fh, indent=2)

    print(f"episode {args.episode} ({entry['family']}): {instruction!r}")
    print(f"expected-depth images: {', '.join(os.path.basename(p) for p in image_paths)}")
    corr, rand = stats["corresponding"], stats["random"]
    print(f"anchor distance (m): corresponding {corr['mean_anchor_dist_m']:.4f} "
          f"vs random {rand['mean_anchor_dist_m']:.4f} ({corr['pairs']} pairs)")
    print(f"feature cosine post-fusion: corresponding {corr['mean_cos_post']:.4f} "
          f"vs random {rand['mean_cos_post']:.4f}")
    if "readout_entropy" in summary:
        ent = summary["readout_entropy"]
        print(f"readout attention entropy: text {ent['text_entropy']:.3f} "
              f"view {ent['view_entropy']:.3f} (max {ent['max_entropy']:.3f})")
    print(f"summary {os.path.join(out, 'inspect.json')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="mvpolicy",
                     description="multi-view RGB-D diffusion policy toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset",
                       parents=[], add_help=True)
    _add_common(p)
    _add_ablations(p)
    p.add_argument("--count", type=int, default=10,
                   help="episodes per task family (default 10)")
    p.add_argument("--families", default=DEFAULT_FAMILIES,
                   help=f"comma-separated task families (default {DEFAULT_FAMILIES})")
    p.add_argument("--no-teacher", action="store_true",
                   help="omit teacher depth maps (disables depth distillation)")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train a policy on a generated dataset")
    _add_common(p)
    _add_ablations(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-step", type=int, default=None,
                   help="stop at this optimizer step (default: config)")
    p.add_argument("--perception-only", action="store_true",
                   help="train only the fusion front-end on the depth loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll out a checkpoint in the synthetic world")
    _add_common(p)
    _add_ablations(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", type=int, default=10,
                   help="rollouts per task family (default 10)")
    p.add_argument("--families", default=DEFAULT_FAMILIES)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of custom backward paths")
    _add_common(p)
    p.add_argument("--ops", help="comma-separated subset of ops (default: all)")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL,
                   help=f"max relative error per op (default {DEFAULT_TOL:g})")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect",
                       help="dump perception diagnostics for one episode")
    _add_common(p)
    _add_ablations(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--episode", type=int, default=0,
                   help="episode index within the dataset (default 0)")
    p.add_argument("--checkpoint", help="optional checkpoint (default: fresh init)")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mvpolicy {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, HashMismatchError, CheckpointError,
            DataFormatError) as exc:
        print(f"mvpolicy {args.command}: invariant violation: {exc}",
              file=sys.stderr)
        return EXIT_INVARIANT
    except NumericalAbort as exc:
        print(f"mvpolicy {args.command}: numerical abort at step {exc.step}: "
              f"{exc.detail} (episodes {exc.episode_ids})", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"mvpolicy {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
