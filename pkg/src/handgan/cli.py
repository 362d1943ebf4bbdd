"""Command-line entry point: ``handgan <command> [options]``.

Commands: train, translate, evaluate, refine-masks, classify, grid. Each
accepts ``--config FILE`` (YAML, strict keys); command-line flags override
file values. Every run writes ``manifest.json`` into its output directory
before doing any work.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime
import json
import os
import sys

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from . import __version__
from .classifier_app import (
    ClassifierExperiment,
    ModelConfig,
    Source,
    prepare_classification_set,
    run_experiment,
    split_index,
    validate_report,
)
from .dataio import (
    DatasetIndex,
    DomainTag,
    ImageSample,
    IndexEntry,
    center_crop,
    list_images,
    load_sample,
    read_mask,
    samples_to_tensor,
    scan_domain_dir,
    write_mask,
    write_rgb,
)
from .errors import HandGANError, InvalidConfig
from .maskproc import RefineParams, apply_mask, refine_mask
from .metrics import build_embedding, evaluate_sets
from .training import TrainConfig, fit, load_checkpoint
from .visual import save_grid

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


COMMAND_KEYS = {
    "train": {"data", "val_data", "embedding_weights"} | set(TrainConfig.__dataclass_fields__),
    "translate": {"checkpoint", "input", "apply_masks", "mask_fill", "backbone_weights"},
    "evaluate": {"generated", "reference", "embedding_weights", "subset_size", "n_subsets", "seed"},
    "refine-masks": {"input", "median_kernel", "close_kernel", "erode_kernel"},
    "classify": {"synthetic", "real", "generated", "backgrounds", "train_sources", "test_source",
                 "per_class_count", "test_count", "test_fraction", "with_replacement",
                 "checkpoint_id", "seed", "model"},
    "grid": {"inputs", "ncols", "limit"},
}


def load_config(path, command) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    unknown = set(data) - COMMAND_KEYS[command]
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {sorted(unknown)}")
    return data


def _merge(cfg: dict, **flags) -> dict:
    out = dict(cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@contextlib.contextmanager
def run_directory(out_dir, command, resolved, seed, inputs=()):
    """Create ``out_dir``, hold its lock file and keep its manifest current."""
    out_abs = os.path.abspath(out_dir)
    for src in inputs:
        if src and os.path.abspath(src) == out_abs:
            raise ConfigError(f"output directory {out_dir} must differ from input {src}")
    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise HandGANError(f"{out_dir} is locked by another run ({lock})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest = {"command": command, "config": resolved, "seed": seed, "code_version": __version__,
                "outputs": [], "start": _now(), "end": None, "status": "running"}

    def write():
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)

    write()
    try:
        yield manifest
        manifest["status"] = "ok"
    except BaseException:
        manifest["status"] = "failed"
        raise
    finally:
        manifest["end"] = _now()
        write()
        os.remove(lock)


def _image_dir(path):
    sub = os.path.join(path, "images")
    return sub if os.path.isdir(sub) else path


def _flat_index(path, domain) -> DatasetIndex:
    if os.path.isdir(os.path.join(path, "images")):
        return scan_domain_dir(path, domain)
    if not os.path.isdir(path):
        raise HandGANError(f"{path} is not a directory")
    return DatasetIndex(domain, [IndexEntry(os.path.join(path, f)) for f in list_images(path)])


def _load_batch(path) -> torch.Tensor:
    samples = [load_sample(e, DomainTag.REAL) for e in _flat_index(path, DomainTag.REAL).entries]
    side = min(min(s.height, s.width) for s in samples)
    return samples_to_tensor([center_crop(s, side) for s in samples])


# --------------------------------------------------------------------------
# Commands

def cmd_train(args, cfg):
    cfg = _merge(cfg, seed=args.seed, preset=args.preset, backbone_weights=args.backbone_weights,
                 embedding_weights=args.embedding_weights, data=args.data, val_data=args.val_data,
                 max_steps=args.max_steps)
    data = cfg.pop("data", None)
    if not data:
        raise ConfigError("train needs --data (a directory with synthetic/ and real/)")
    val_data = cfg.pop("val_data", None)
    embedding_weights = cfg.pop("embedding_weights", None)
    try:
        config = TrainConfig.from_dict(cfg)
    except (InvalidConfig, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    out = args.out or "runs/train"
    resolved = {**config.to_dict(), "data": data, "val_data": val_data,
                "embedding_weights": embedding_weights}
    with run_directory(out, "train", resolved, config.seed, inputs=[data]) as manifest:
        syn = scan_domain_dir(os.path.join(data, "synthetic"), DomainTag.SYNTHETIC)
        real = scan_domain_dir(os.path.join(data, "real"), DomainTag.REAL)
        val = {}
        if val_data:
            val = dict(syn_val_index=scan_domain_dir(os.path.join(val_data, "synthetic"), DomainTag.SYNTHETIC),
                       real_val_index=scan_domain_dir(os.path.join(val_data, "real"), DomainTag.REAL),
                       embedding=build_embedding(embedding_weights, config.seed))
        final = fit(config, syn, real, out, **val)
        manifest["outputs"] = sorted(f for f in os.listdir(out) if not f.startswith("."))
        print(f"final checkpoint: {final}")


def _pad_to_multiple(x, k=4):
    h, w = x.shape[-2:]
    ph, pw = (-h) % k, (-w) % k
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, h, w


def cmd_translate(args, cfg):
    cfg = _merge(cfg, checkpoint=args.checkpoint, input=args.input, backbone_weights=args.backbone_weights,
                 apply_masks=True if args.apply_masks else None, mask_fill=args.mask_fill)
    if not cfg.get("checkpoint") or not cfg.get("input"):
        raise ConfigError("translate needs --checkpoint and --input")
    out = args.out or "runs/translate"
    seed = args.seed if args.seed is not None else 0
    with run_directory(out, "translate", cfg, seed, inputs=[cfg["input"], _image_dir(cfg["input"])]) as manifest:
        state = load_checkpoint(cfg["checkpoint"], backbone_weights=cfg.get("backbone_weights"))
        fill = float(cfg.get("mask_fill", state.config.mask_fill))
        index = _flat_index(cfg["input"], DomainTag.SYNTHETIC)
        os.makedirs(os.path.join(out, "images"), exist_ok=True)
        written = 0
        for entry in index.entries:
            sample = load_sample(entry, DomainTag.SYNTHETIC)
            x, h, w = _pad_to_multiple(samples_to_tensor([sample]))
            with torch.no_grad():
                y = state.g_real(x)[..., :h, :w]
            translated = y[0].permute(1, 2, 0).numpy().astype(np.float32)
            stem = os.path.splitext(os.path.basename(entry.image_path))[0]
            if entry.mask_path is not None:
                mask = read_mask(entry.mask_path)
                if cfg.get("apply_masks"):
                    translated = apply_mask(ImageSample(translated.clip(-1, 1), DomainTag.REAL), mask, fill).pixels
                os.makedirs(os.path.join(out, "masks"), exist_ok=True)
                write_mask(os.path.join(out, "masks", stem + ".png"), mask)
            write_rgb(os.path.join(out, "images", stem + ".png"), translated)
            written += 1
        manifest["outputs"] = ["images"] + (["masks"] if os.path.isdir(os.path.join(out, "masks")) else [])
        manifest["checkpoint_step"] = state.step
        print(f"translated {written} images into {out}/images")


def cmd_evaluate(args, cfg):
    cfg = _merge(cfg, generated=args.generated, reference=args.reference,
                 embedding_weights=args.embedding_weights, seed=args.seed)
    if not cfg.get("generated") or not cfg.get("reference"):
        raise ConfigError("evaluate needs --generated and --reference")
    seed = int(cfg.get("seed", 0))
    out = args.out or "runs/evaluate"
    with run_directory(out, "evaluate", cfg, seed, inputs=[cfg["generated"], cfg["reference"]]) as manifest:
        embedding = build_embedding(cfg.get("embedding_weights"), seed)
        report = evaluate_sets(_load_batch(cfg["generated"]), _load_batch(cfg["reference"]), embedding,
                               int(cfg.get("subset_size", 100)), int(cfg.get("n_subsets", 10)), seed)
        with open(os.path.join(out, "report.json"), "w") as fh:
            fh.write(report.to_json())
        with open(os.path.join(out, "summary.txt"), "w") as fh:
            fh.write(report.summary() + "\n")
        manifest["outputs"] = ["report.json", "summary.txt"]
        print(report.summary())


def cmd_refine_masks(args, cfg):
    cfg = _merge(cfg, input=args.input)
    if not cfg.get("input"):
        raise ConfigError("refine-masks needs --input")
    try:
        params = RefineParams(int(cfg.get("median_kernel", 5)), int(cfg.get("close_kernel", 2)),
                              int(cfg.get("erode_kernel", 1)))
    except HandGANError as exc:
        raise ConfigError(str(exc)) from exc
    src = cfg["input"]
    out = args.out or "runs/masks"
    seed = args.seed if args.seed is not None else 0
    with run_directory(out, "refine-masks", cfg, seed, inputs=[src]) as manifest:
        names = list_images(src)
        if not names:
            raise HandGANError(f"no masks in {src}")
        for name in names:
            refined = refine_mask(read_mask(os.path.join(src, name)), params)
            write_mask(os.path.join(out, os.path.splitext(name)[0] + ".png"), refined)
        manifest["outputs"] = [os.path.splitext(n)[0] + ".png" for n in names]
        print(f"refined {len(names)} masks into {out}")


def cmd_classify(args, cfg):
    cfg = _merge(cfg, seed=args.seed)
    out = args.out or "runs/classify"
    seed = int(cfg.get("seed", 0))
    try:
        experiment = ClassifierExperiment(
            frozenset(Source(s) for s in cfg.get("train_sources", ["synthetic", "real"])),
            Source(cfg.get("test_source", "real")), int(cfg.get("per_class_count", 20)), seed,
            cfg.get("checkpoint_id"))
        model_cfg = ModelConfig(**cfg.get("model", {}))
    except (ValueError, TypeError, InvalidConfig) as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg.get("backgrounds"):
        raise ConfigError("classify needs a backgrounds directory")
    sources = [cfg.get(k) for k in ("synthetic", "real", "generated", "backgrounds")]
    with run_directory(out, "classify", cfg, seed, inputs=sources) as manifest:
        rng = np.random.default_rng(seed)
        backgrounds = _flat_index(cfg["backgrounds"], DomainTag.REAL)
        test_count = int(cfg.get("test_count", max(2, experiment.per_class_count // 4)))
        fraction = float(cfg.get("test_fraction", 0.25))
        replace = bool(cfg.get("with_replacement", False))
        needed = set(experiment.train_sources) | {experiment.test_source, Source.SYNTHETIC}
        train_sets, test_sets = {}, {}
        for source in sorted(needed, key=lambda s: s.value):
            path = cfg.get(source.value)
            if not path:
                raise ConfigError(f"classify needs a '{source.value}' directory")
            domain = DomainTag.SYNTHETIC if source is Source.SYNTHETIC else DomainTag.REAL
            index = scan_domain_dir(path, domain)
            in_train = source in experiment.train_sources
            in_test = source is experiment.test_source or source is Source.SYNTHETIC
            train_part, test_part = split_index(index, fraction, rng) if in_train and in_test else (
                (index, None) if in_train else (None, index))
            if in_train:
                train_sets[source] = prepare_classification_set(
                    train_part, backgrounds, experiment.per_class_count, rng, source, replace)
            if in_test:
                if test_part is None:
                    raise HandGANError(f"no held-out images left for {source.value}")
                test_sets[source] = prepare_classification_set(test_part, backgrounds, test_count, rng,
                                                               source, replace)
        report = run_experiment(experiment, model_cfg, train_sets, test_sets)
        data = json.loads(report.to_json())
        validate_report(data)
        with open(os.path.join(out, "classifier_report.json"), "w") as fh:
            fh.write(report.to_json())
        manifest["outputs"] = ["classifier_report.json"]
        print(f"per-class accuracy {report.per_class_accuracy:.4f}")


def cmd_grid(args, cfg):
    cfg = _merge(cfg, inputs=args.inputs or None, ncols=args.ncols, limit=args.limit)
    inputs = cfg.get("inputs")
    if not inputs:
        raise ConfigError("grid needs one or more --inputs directories")
    limit = int(cfg.get("limit", 4))
    out = args.out or "runs/grid"
    seed = args.seed if args.seed is not None else 0
    with run_directory(out, "grid", cfg, seed, inputs=inputs) as manifest:
        rows = []
        for path in inputs:
            entries = _flat_index(path, DomainTag.REAL).entries[:limit]
            rows.append([load_sample(e, DomainTag.REAL).pixels for e in entries])
        # One row per input directory, so matching filenames line up in columns.
        ncols = int(cfg.get("ncols") or max(len(r) for r in rows))
        tiles = [t for r in rows for t in r]
        save_grid(os.path.join(out, "grid.png"), tiles, ncols)
        manifest["outputs"] = ["grid.png"]
        print(f"wrote {out}/grid.png")


COMMANDS = {
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "refine-masks": cmd_refine_masks,
    "classify": cmd_classify,
    "grid": cmd_grid,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="handgan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (created; must not be an input)")
        return p

    p = common(sub.add_parser("train", help="train a translation model"))
    p.add_argument("--preset")
    p.add_argument("--data", help="directory holding synthetic/ and real/")
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--backbone-weights", dest="backbone_weights")
    p.add_argument("--embedding-weights", dest="embedding_weights")
    p.add_argument("--max-steps", dest="max_steps", type=int)

    p = common(sub.add_parser("translate", help="translate synthetic images to the real domain"))
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="directory of images (or with images/ and masks/)")
    p.add_argument("--apply-masks", dest="apply_masks", action="store_true")
    p.add_argument("--mask-fill", dest="mask_fill", type=float)
    p.add_argument("--backbone-weights", dest="backbone_weights")

    p = common(sub.add_parser("evaluate", help="FID/KID between two image directories"))
    p.add_argument("--generated")
    p.add_argument("--reference")
    p.add_argument("--embedding-weights", dest="embedding_weights")

    p = common(sub.add_parser("refine-masks", help="clean up a directory of binary masks"))
    p.add_argument("--input")

    common(sub.add_parser("classify", help="real-vs-synthetic classifier experiment"))

    p = common(sub.add_parser("grid", help="tile images from directories into one PNG"))
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--ncols", type=int)
    p.add_argument("--limit", type=int)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help/--version.
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.command)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"handgan: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HandGANError as exc:
        print(f"handgan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"handgan: I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
