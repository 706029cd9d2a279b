"""Command line interface.

Subcommands: fixtures, tune, transfer, refine, eval, ablate. Runs are
single-threaded by default so identical seeds reproduce identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import torch

from .. import pngio
from ..adapters import load_checkpoint, save_checkpoint
from ..backbone.unet import ModelContext
from ..control import PoseSpec
from ..errors import ConfigurationError, FormatError, PoseTuneError
from ..oneshot import tune as run_tune
from ..pipeline import composite, opaque_rgba, refine as run_refine, transfer as run_transfer
from ..vcm import parse_strategy
from .config import load_config
from .fixtures import make_fixture_pair
from .providers import (
    apply_mask,
    load_description,
    load_face_embedding,
    load_mask,
    save_face_embedding,
    toy_face_embed,
)
from .reporting import EvalReport, default_header, run_ablation
from ..control import render_pose
from .metrics import pair_metrics


def _load_source(source_path, mask_path):
    """RGBA foreground from an RGBA PNG, or RGB PNG + separate mask."""
    if mask_path:
        rgb = pngio.read_rgb(source_path)
        return apply_mask(rgb, load_mask(mask_path))
    return pngio.read_rgba(source_path)


def _load_pose(path, size: int):
    path = str(path)
    if path.endswith(".json"):
        return PoseSpec.load(path)
    return pngio.read_rgb(path)


def _report_paths(report_arg: str):
    p = Path(report_arg)
    if p.suffix == ".json":
        return p, p.with_suffix(".csv")
    if p.suffix == ".csv":
        return p.with_suffix(".json"), p
    return p.with_suffix(".json"), p.with_suffix(".csv")


def cmd_fixtures(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        pair = make_fixture_pair(i, seed=args.seed, size=args.size)
        pdir = outdir / pair.pair_id
        pdir.mkdir(exist_ok=True)
        pngio.write_rgba(pdir / "source.png", pair.source)
        pngio.write_mask(pdir / "mask.png", pair.source[3])
        pngio.write_rgba(pdir / "target.png", pair.target)
        pair.source_pose.save(pdir / "pose_source.json")
        pair.target_pose.save(pdir / "pose_target.json")
        pngio.write_rgb(pdir / "pose_target.png", render_pose(pair.target_pose, args.size))
        (pdir / "desc.txt").write_text(pair.description + "\n", encoding="utf-8")
        save_face_embedding(toy_face_embed(pair.source), pdir / "face.bin")
    print(f"wrote {args.count} fixture pairs to {outdir}")
    return 0


def cmd_tune(args) -> int:
    app = load_config(args.config)
    ctx = ModelContext.build(app.model)
    source = _load_source(args.source, args.mask)
    description = load_description(args.desc)
    ckpt = run_tune(ctx, source, description, app.tune, app.pipeline.injection)
    save_checkpoint(ckpt, args.out)
    loss_csv = args.loss_csv or (str(args.out) + ".loss.csv")
    with open(loss_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(ckpt.meta["loss_curve"]):
            writer.writerow([step, repr(loss)])
    print(f"tuned {app.tune.iterations} steps -> {args.out}")
    return 0


def cmd_transfer(args) -> int:
    app = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    size = int(ckpt.meta["model"]["image_size"])
    source = _load_source(args.source, args.mask)
    description = load_description(args.desc)
    pose = _load_pose(args.pose, size)
    face = load_face_embedding(args.face) if args.face else None
    result = run_transfer(ckpt, source, description, pose, face, app.pipeline)
    pngio.write_rgba(args.out, result.image)
    manifest_path = args.manifest or (str(Path(args.out).with_suffix("")) + ".manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(result.manifest, fh, indent=2)
    if args.audit_log and result.audit is not None:
        result.audit.write_jsonl(args.audit_log)
    print(f"transfer -> {args.out}")
    return 0


def cmd_refine(args) -> int:
    app = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    fg = pngio.read_rgba(args.infile)
    bg = pngio.read_rgb(args.bg)
    comped = opaque_rgba(composite(fg, bg))
    if args.strength is not None:
        app.pipeline.refine_strength = args.strength
    description = load_description(args.desc) if args.desc else "a sprite person"
    result = run_refine(comped, description, ckpt, app.pipeline)
    pngio.write_rgba(args.out, result.image)
    print(f"refine (strength {app.pipeline.refine_strength}) -> {args.out}")
    return 0


def _read_pairs_manifest(path):
    path = Path(path)
    if path.suffix == ".json":
        with open(path, "r", encoding="utf-8") as fh:
            entries = json.load(fh)
    elif path.suffix == ".csv":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            entries = list(csv.DictReader(fh))
    else:
        raise FormatError(f"pairs manifest must be .json or .csv, got {path}")
    pairs = []
    for e in entries:
        try:
            pairs.append((e["id"], e["a"], e["b"]))
        except KeyError as exc:
            raise FormatError(f"pairs manifest entries need id/a/b fields: {e}") from exc
    if not pairs:
        raise ConfigurationError(f"pairs manifest {path} is empty")
    return pairs


def cmd_eval(args) -> int:
    report = EvalReport(header=default_header(args.extractor))
    for pair_id, a_path, b_path in _read_pairs_manifest(args.pairs):
        a = pngio.read_rgba(a_path)
        b = pngio.read_rgba(b_path)
        report.add_row(pair_id, pair_metrics(a, b, args.extractor))
    json_path, csv_path = _report_paths(args.report)
    report.write_json(json_path)
    report.write_csv(csv_path)
    print(f"eval: {len(report.rows)} pairs -> {json_path}, {csv_path}")
    return 0


def _load_fixture_dirs(fixtures_dir):
    from ..control import PoseSpec as _PoseSpec
    from .fixtures import FixturePair

    root = Path(fixtures_dir)
    pair_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    pairs = []
    for d in pair_dirs:
        pairs.append(FixturePair(
            pair_id=d.name,
            identity_seed=-1,
            source=pngio.read_rgba(d / "source.png"),
            source_pose=_PoseSpec.load(d / "pose_source.json"),
            target=pngio.read_rgba(d / "target.png"),
            target_pose=_PoseSpec.load(d / "pose_target.json"),
            description=load_description(d / "desc.txt"),
        ))
    if not pairs:
        raise ConfigurationError(f"no fixture pairs found under {fixtures_dir}")
    return pairs


def cmd_ablate(args) -> int:
    app = load_config(args.config)
    fixtures = _load_fixture_dirs(args.fixtures)
    strategies = [parse_strategy(s) for s in args.strategies.split(",")]
    report = run_ablation(fixtures, strategies, app.tune, app.pipeline, app.model,
                          extractor=app.eval.extractor,
                          identity_neutral=args.identity_neutral)
    json_path, csv_path = _report_paths(args.report)
    report.write_json(json_path)
    report.write_csv(csv_path)
    print(f"ablation: {len(fixtures)} fixtures x {len(strategies)} strategies -> {json_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posetune",
                                     description="one-shot pose transfer on a toy diffusion backbone")
    parser.add_argument("--threads", type=int, default=1,
                        help="torch CPU threads (1 keeps runs byte-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", help="generate procedural sprite fixture pairs")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("tune", help="one-shot tune on a source foreground")
    p.add_argument("--source", required=True)
    p.add_argument("--mask")
    p.add_argument("--desc", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("transfer", help="pose transfer with a tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--mask")
    p.add_argument("--pose", required=True, help="pose JSON or pre-rendered pose PNG")
    p.add_argument("--face", help="face embedding file (.bin fp32 LE or .json)")
    p.add_argument("--desc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--audit-log")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("refine", help="control-free refinement over a background")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--bg", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--strength", type=float)
    p.add_argument("--desc")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="score (generated, target) pairs")
    p.add_argument("--pairs", required=True, help="JSON/CSV manifest with id/a/b fields")
    p.add_argument("--extractor", default="toy-randproj")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare identity strategies on fixtures")
    p.add_argument("--fixtures", required=True)
    p.add_argument("--strategies", default="value_only,full_replacement,added_cross_attention")
    p.add_argument("--report", required=True)
    p.add_argument("--config")
    p.add_argument("--identity-neutral", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (PoseTuneError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
