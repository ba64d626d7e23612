"""Command-line entry point: ``ctx3d {synth,preprocess,train,infer,eval}``.

Every command stages its outputs in a temporary directory and only moves
them into place once the command has succeeded, then writes a
``manifest.json`` describing the run.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field, fields

from . import __version__
from .ct.annotations import Annotation, read_annotations, write_annotations
from .ct.pipeline import preprocess
from .ct.volume import VolumeFormatError, read_volume, write_volume
from .detection.boxes import Detection
from .detection.io import read_detections, write_detections
from .evaluation import (
    GroundTruthSet,
    format_sensitivity_table,
    format_stratified,
    froc_curve,
    sensitivity_table,
    stratified_report,
    write_froc_csv,
    write_sensitivity_csv,
    write_stratified_csv,
)
from .model.checkpoint import load_checkpoint, save_checkpoint
from .model.config import (
    ModelConfig,
    format_config,
    model_config_from,
    model_config_items,
    parse_config_text,
    parse_override,
)
from .nn.serialize import CheckpointError
from .synth import SynthConfig, generate_dataset, read_manifest, write_dataset

logger = logging.getLogger("ctx3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "config.toml"
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config resolution: defaults < file < --set
# ---------------------------------------------------------------------------

def synth_config_from(values: dict, base: SynthConfig | None = None) -> SynthConfig:
    base = base or SynthConfig()
    names = {f.name for f in fields(SynthConfig)}
    changes = {}
    for key, v in values.items():
        if not key.startswith("synth."):
            continue
        name = key[len("synth."):]
        if name not in names:
            raise KeyError(f"unknown config key {key!r}")
        changes[name] = tuple(v) if isinstance(v, list) else v
    return dataclasses.replace(base, **changes)


def resolve_values(config_path: str | None, overrides: list[str]) -> dict:
    values = {}
    if config_path:
        with open(config_path) as fh:
            values.update(parse_config_text(fh.read()))
    for token in overrides or []:
        try:
            key, v = parse_override(token)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        values[key] = v
    for key in values:
        if not key.startswith(("model.", "synth.")):
            raise UsageError(f"unknown config key {key!r} (expected model.* or synth.*)")
    return values


def _model_config(values: dict) -> ModelConfig:
    try:
        return model_config_from(values)
    except (KeyError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# staging + manifest
# ---------------------------------------------------------------------------

def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    inputs: dict
    outputs: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    version: str = __version__

    def write(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        os.replace(tmp, path)


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return str(v)


@contextlib.contextmanager
def staged(out_dir: str):
    """Yield a scratch dir; on success move its files into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".staging-", dir=out_dir)
    try:
        yield tmp
        for root, _, files in os.walk(tmp):
            rel = os.path.relpath(root, tmp)
            dest = os.path.normpath(os.path.join(out_dir, rel))
            os.makedirs(dest, exist_ok=True)
            for name in files:
                os.replace(os.path.join(root, name), os.path.join(dest, name))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _hash_outputs(out_dir: str, rel_paths) -> dict:
    return {rel: sha256_file(os.path.join(out_dir, rel)) for rel in sorted(rel_paths)}


def _hash_inputs(paths: dict) -> dict:
    return {k: {"path": os.path.abspath(p), "sha256": sha256_file(p)} for k, p in paths.items() if p}


def _rel_files(root: str) -> list[str]:
    out = []
    for r, _, files in os.walk(root):
        out += [os.path.relpath(os.path.join(r, f), root) for f in files]
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, values) -> dict:
    try:
        cfg = synth_config_from(values)
    except (KeyError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    cfg.validate()
    ds = generate_dataset(cfg, args.n_volumes, args.seed)
    with staged(args.out) as tmp:
        write_dataset(ds, tmp)
        produced = _rel_files(tmp)
    return {"config": {f"synth.{k}": v for k, v in dataclasses.asdict(cfg).items()},
            "inputs": {}, "outputs": _hash_outputs(args.out, produced)}


def cmd_preprocess(args, values) -> dict:
    vol = read_volume(args.volume)
    out_vol, tf = preprocess(vol)
    name = os.path.splitext(os.path.basename(args.volume))[0]
    with staged(args.out) as tmp:
        write_volume(os.path.join(tmp, f"{name}.ctvol"), out_vol)
        if args.annotations:
            moved = []
            for a in read_annotations(args.annotations):
                if a.volume_id != vol.id:
                    continue
                box = None if a.box is None else tuple(float(v) for v in tf.boxes(a.box)[0])
                moved.append(Annotation(a.volume_id, tf.slice_index(a.key_slice), box, a.type,
                                        a.diameter_mm, a.slice_interval_mm))
            write_annotations(os.path.join(tmp, "annotations.csv"), moved)
        produced = _rel_files(tmp)
    transform = dataclasses.asdict(tf)
    return {"config": {"transform": transform},
            "inputs": _hash_inputs({"volume": args.volume, "annotations": args.annotations}),
            "outputs": _hash_outputs(args.out, produced)}


def cmd_train(args, values) -> dict:
    from .data import load_split
    from .model import build_model, train, write_trace

    cfg = _model_config(values)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    manifest = os.path.join(args.data, f"{args.split}.csv")
    ann_path = os.path.join(args.data, "annotations.csv")
    samples = load_split(manifest, read_annotations(ann_path), cfg.M, cfg.stride)
    model = build_model(cfg, args.seed)
    logger.info("training M=%d on %d key images for %d epochs", cfg.M, len(samples), cfg.epochs)
    with staged(args.out) as tmp:
        trace = train(model, [(s.images, s.gt_boxes) for s in samples], args.seed,
                      checkpoint_dir=tmp,
                      on_iteration=lambda r: logger.debug("iter %d total %.4f", r.iter, r.total))
        write_trace(os.path.join(tmp, "loss_trace.csv"), trace)
        save_checkpoint(model, os.path.join(tmp, "model.ckpt"), cfg.epochs)
        with open(os.path.join(tmp, CONFIG_NAME), "w") as fh:
            fh.write(format_config(model_config_items(cfg)))
        produced = _rel_files(tmp)
    return {"config": model_config_items(cfg),
            "inputs": _hash_inputs({"manifest": manifest, "annotations": ann_path, "config": args.config}),
            "outputs": _hash_outputs(args.out, produced)}


def _parse_slices(text: str, nz: int) -> list[int]:
    if text == "all":
        return list(range(nz))
    try:
        keys = [int(k) for k in text.split(",") if k.strip()]
    except ValueError as exc:
        raise UsageError(f"--slices expects 'all' or comma-separated integers, got {text!r}") from exc
    bad = [k for k in keys if not 0 <= k < nz]
    if bad:
        raise ValueError(f"slices {bad} outside volume with {nz} slices")
    return keys


def cmd_infer(args, values) -> dict:
    from .data import infer_volume

    config_path = args.config or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), CONFIG_NAME)
    if not args.config and not os.path.exists(config_path):
        raise UsageError(f"no --config given and no {CONFIG_NAME} next to the checkpoint")
    if config_path != args.config:
        file_values = parse_config_text(open(config_path).read())
        values = {**file_values, **values}
    cfg = _model_config(values)
    model, _ = load_checkpoint(args.checkpoint, cfg)

    jobs = []
    if args.volume:
        vol = read_volume(args.volume)
        jobs.append((vol, _parse_slices(args.slices, vol.shape[0])))
    else:
        for vid, path, keys in read_manifest(os.path.join(args.data, f"{args.split}.csv")):
            jobs.append((read_volume(path, vid), keys))

    dets = []
    for vol, keys in jobs:
        results, _ = infer_volume(model, vol, keys, use_cache=not args.no_cache)
        for k in keys:
            boxes, scores = results[k]
            dets += [Detection((vol.id, k), tuple(float(v) for v in b), float(s)) for b, s in zip(boxes, scores)]
    with staged(args.out) as tmp:
        write_detections(os.path.join(tmp, "detections.csv"), dets)
        produced = _rel_files(tmp)
    inputs = {"checkpoint": args.checkpoint, "config": config_path}
    if args.volume:
        inputs["volume"] = args.volume
    return {"config": model_config_items(cfg), "inputs": _hash_inputs(inputs),
            "outputs": _hash_outputs(args.out, produced)}


def cmd_eval(args, values) -> dict:
    dets = read_detections(args.dets)
    gts = GroundTruthSet.from_annotations(read_annotations(args.gt))
    curve = froc_curve(dets, gts, args.criterion, args.threshold)
    label = f"{args.criterion.upper()} > {args.threshold:g}"
    table = {label: sensitivity_table(curve)}
    strat = {label: stratified_report(dets, gts, args.criterion, args.threshold, args.fp_rate)}
    with staged(args.out) as tmp:
        write_froc_csv(os.path.join(tmp, "froc.csv"), curve)
        write_sensitivity_csv(os.path.join(tmp, "sensitivity.csv"), table)
        write_stratified_csv(os.path.join(tmp, "stratified.csv"), strat)
        with open(os.path.join(tmp, "report.txt"), "w") as fh:
            fh.write(format_sensitivity_table(table) + "\n\n")
            fh.write(f"Sensitivity (%) at {args.fp_rate:g} FPs per image\n")
            fh.write(format_stratified(strat) + "\n")
        produced = _rel_files(tmp)
    print(format_sensitivity_table(table))
    return {"config": {"criterion": args.criterion, "threshold": args.threshold, "fp_rate": args.fp_rate},
            "inputs": _hash_inputs({"dets": args.dets, "gt": args.gt}),
            "outputs": _hash_outputs(args.out, produced)}


# ---------------------------------------------------------------------------
# parser + dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctx3d", description="3D-context lesion detection toolkit")
    p.add_argument("--version", action="version", version=f"ctx3d {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="flat 'key = value' config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, e.g. model.M=3 (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--n-volumes", type=int, default=60)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="resample and crop one volume")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--annotations", help="annotation CSV in source coordinates")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_preprocess, config=None, set=[], seed=None)

    sp = sub.add_parser("train", help="train a detector")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset dir with <split>.csv and annotations.csv")
    sp.add_argument("--split", default="train")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="run a trained detector")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--volume", help="single preprocessed .ctvol")
    src.add_argument("--data", help="dataset dir; uses key slices from <split>.csv")
    sp.add_argument("--slices", default="all", help="'all' or comma-separated indices (with --volume)")
    sp.add_argument("--split", default="test")
    sp.add_argument("--no-cache", action="store_true", help="disable the per-slice feature cache")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer, seed=None)

    sp = sub.add_parser("eval", help="FROC evaluation")
    sp.add_argument("--dets", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--criterion", choices=("iou", "iobb"), default="iou")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--fp-rate", type=float, default=4.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval, config=None, set=[], seed=None)
    return p


def _check_flags(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Report an unknown flag by name before argparse complains about missing ones."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    cmd_pos = next((i for i, tok in enumerate(argv) if not tok.startswith("-")), None)
    if cmd_pos is None or argv[cmd_pos] not in sub.choices:
        return
    known = sub.choices[argv[cmd_pos]]._option_string_actions
    for tok in argv[cmd_pos + 1:]:
        if tok.startswith("--") and tok.split("=", 1)[0] not in known:
            raise UsageError(f"unrecognized argument {tok!r}")


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        _check_flags(parser, argv)
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("ctx3d: missing subcommand (synth, preprocess, train, infer, eval)")
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        values = resolve_values(args.config, args.set)
        start = time.perf_counter()
        info = args.func(args, values)
        manifest = RunManifest(args.command, argv, info["config"], args.seed, info["inputs"], info["outputs"],
                               round(time.perf_counter() - start, 3))
        manifest.write(os.path.join(args.out, MANIFEST_NAME))
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, VolumeFormatError, CheckpointError, RuntimeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
