"""Command-line entry point: ``slicescan <subcommand> [options]``.

A run configuration is JSON with optional sections ``model``, ``train``,
``evolution`` and ``synth``, plus an optional ``"preset"`` naming the model
preset the ``model`` section overrides. Any field can be changed with
``--set section.field=value`` where ``value`` is parsed as JSON when possible.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, data, nas, network, scan_geometry, training
from .errors import ConfigError, DataError, GradientCheckError, SliceScanError

log = logging.getLogger("slicescan")

SECTIONS = ("model", "train", "evolution", "synth")


# ---------------------------------------------------------------- configuration


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path=None, sets=()):
    cfg = {"preset": "desk", **{s: {} for s in SECTIONS}}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = set(raw) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for k, v in raw.items():
            cfg[k] = v if k == "preset" else dict(v)
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        if key == "preset":
            cfg["preset"] = value
            continue
        section, dot, field = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(f"--set key must be one of {SECTIONS} followed by .field, got {key!r}")
        cfg[section][field] = _parse_value(value)
    return cfg


def model_config_from(cfg) -> network.ModelConfig:
    preset = cfg.get("preset", "desk")
    if preset not in network.PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(network.PRESETS)}")
    base = network.PRESETS[preset]().to_dict()
    unknown = set(cfg["model"]) - set(base)
    if unknown:
        raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
    if {"encoder_depths", "decoder_depths"} & set(cfg["model"]) and "genotype" not in cfg["model"]:
        base["genotype"] = []  # the preset's genotype no longer fits; fall back to the default per block
    base.update(cfg["model"])
    return network.ModelConfig.from_dict(base)


def train_config_from(cfg, args) -> training.TrainConfig:
    tc = replace(training.desk_train_config(), **_known(training.TrainConfig, cfg["train"], "train"))
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.deterministic:
        tc = replace(tc, deterministic=True)
    return tc


def evolution_config_from(cfg, args) -> nas.EvolutionConfig:
    ec = nas.EvolutionConfig(**_known(nas.EvolutionConfig, cfg["evolution"], "evolution"))
    if args.seed is not None:
        ec = replace(ec, seed=args.seed)
    return ec


def _known(cls, d, section):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {section} config fields: {sorted(unknown)}")
    return d


# ---------------------------------------------------------------- helpers


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _genotype(text, k):
    if text is None:
        return None
    g = nas.SliceGenotype.parse(text)
    if len(g) != k:
        raise ConfigError(f"genotype has {len(g)} genes, model has {k} blocks")
    return g.choices


def _loss_kind(model_config):
    return "bce_dice" if model_config.num_classes <= 2 else "ce_dice"


def _progress(row):
    log.info("epoch %d lr %.4g loss %.4f dsc %.4f", row["epoch"], row["lr"], row["loss"], row["dsc"])


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg):
    synth = dict(cfg["synth"])
    for key, attr in (("count", "count"), ("num_classes", "num_classes"), ("anisotropy", "anisotropy"),
                      ("noise_level", "noise"), ("test_ratio", "test_ratio")):
        if getattr(args, attr) is not None:
            synth[key] = getattr(args, attr)
    if args.height is not None or args.width is not None:
        H, W = synth.get("resolution", (64, 64))
        synth["resolution"] = (args.height or H, args.width or W)
    if args.seed is not None:
        synth["seed"] = args.seed
    spec = data.SynthSpec(**_known(data.SynthSpec, synth, "synth"))
    spec = replace(spec, resolution=tuple(spec.resolution))
    manifest = data.synth_generate(spec, _out_dir(args))
    print(f"wrote {len(manifest.files)} pairs to {manifest.root / 'manifest.json'} {manifest.counts()}")


def cmd_ingest(args, cfg):
    out = _out_dir(args)
    manifest = data.ingest_folder(
        args.images, args.masks, out / "manifest.json", ratio=args.ratio, num_classes=args.num_classes,
        seed=args.seed if args.seed is not None else 0, resolution=(args.height, args.width),
    )
    print(f"wrote {out / 'manifest.json'} {manifest.counts()}")


def _write_training_outputs(out, name, model_config, model, history, meta):
    digest = checkpoint.save_checkpoint(out / f"{name}.slmb", model_config, model, meta)
    (out / "history.csv").write_text(training.history_csv(history), encoding="utf-8")
    print(f"checkpoint {out / f'{name}.slmb'} sha256 {digest}")
    if history:
        print(f"final epoch {history[-1]['epoch']} loss {history[-1]['loss']:.6f} dsc {history[-1]['dsc']:.6f}")


def cmd_train(args, cfg):
    mc = model_config_from(cfg)
    tc = train_config_from(cfg, args)
    manifest = data.read_manifest(args.manifest)
    ds = data.load_dataset(manifest, "train")
    model, history = training.fit(mc, tc, ds, on_epoch=_progress)
    meta = {"train": tc.to_dict(), "manifest_seed": manifest.seed}
    _write_training_outputs(_out_dir(args), "checkpoint", mc, model, history, meta)


def cmd_supernet_train(args, cfg):
    mc = model_config_from(cfg)
    tc = train_config_from(cfg, args)
    out = _out_dir(args)
    split = data.split_search(data.read_manifest(args.manifest), args.search_fraction, seed=tc.seed)
    split = data.rebase_manifest(split, out)
    split.save(out / "search_manifest.json")
    ds = data.load_dataset(split, "train")
    result = nas.train_supernet(mc, tc, ds, on_epoch=_progress)
    meta = {"train": tc.to_dict(), "supernet": True}
    _write_training_outputs(out, "supernet", mc, result.model, result.history, meta)
    print(f"search manifest {out / 'search_manifest.json'} {split.counts()}")


def _search_inputs(args):
    model, _ = checkpoint.load_checkpoint(args.checkpoint)
    split = data.load_dataset(data.read_manifest(args.manifest), "search")
    return model, split


def cmd_evolve(args, cfg):
    ec = evolution_config_from(cfg, args)
    model, split = _search_inputs(args)
    best, slog = nas.evolve(model, split, ec, loss_kind=_loss_kind(model.config))
    out = _out_dir(args)
    (out / "search_log.csv").write_text(slog.to_csv(), encoding="utf-8")
    (out / "best_genotype.txt").write_text(str(best) + "\n", encoding="utf-8")
    best_dsc = slog.best_per_iteration[-1][2]
    print(f"best {best} dsc {best_dsc:.6f} evaluations {slog.n_evaluations} cache_hits {slog.cache_hits}")


def cmd_exhaustive(args, cfg):
    model, split = _search_inputs(args)
    ranking = nas.exhaustive_search(model, split, loss_kind=_loss_kind(model.config))
    out = _out_dir(args)
    (out / "ranking.csv").write_text(nas.ranking_csv(ranking), encoding="utf-8")
    print(f"best {ranking[0][0]} dsc {ranking[0][1]:.6f} of {len(ranking)} genotypes")


def cmd_eval(args, cfg):
    model, _ = checkpoint.load_checkpoint(args.checkpoint)
    ds = data.load_dataset(data.read_manifest(args.manifest), args.split)
    report = training.evaluate(model, ds, _loss_kind(model.config), _genotype(args.genotype, model.config.num_blocks))
    print(report.csv_header())
    print(report.csv_row())


def cmd_predict(args, cfg):
    model, _ = checkpoint.load_checkpoint(args.checkpoint)
    genotype = _genotype(args.genotype, model.config.num_blocks)
    out = _out_dir(args)
    for path in args.inputs:
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing input {path}")
        image = data.read_image(path, model.config.input_resolution)
        label = training.predict(model, image[None], _loss_kind(model.config), genotype)[0]
        target = out / (path.stem + ".pgm")
        data.write_mask(target, label.astype(np.uint8))
        print(target)


def cmd_grad_check(args, cfg):
    mc = model_config_from(cfg)
    err = training.grad_check(mc, eps=args.eps, n_samples=args.samples, seed=args.seed or 0)
    print(f"max_relative_error {err:.3e} over {args.samples} coordinates ({network.parameter_count(mc)} parameters)")
    if err > args.tolerance:
        raise GradientCheckError(f"max relative error {err:.3e} exceeds {args.tolerance:g}")


def cmd_scan_demo(args, cfg):
    plan = scan_geometry.build_slice_plan(args.height, args.width, scan_geometry.SliceConfig(args.m, args.n))
    print(scan_geometry.format_plan(plan))
    if args.emit_ppm:
        scan_geometry.write_plan_ppm(plan, args.emit_ppm)
        print(f"wrote {args.emit_ppm}")


# ---------------------------------------------------------------- parser


def _global_flags(suppress):
    p = argparse.ArgumentParser(add_help=False)
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", metavar="PATH", help="JSON run configuration", **d)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field", **d)
    p.add_argument("--seed", type=int, help="seed for every random stream of the run", **d)
    p.add_argument("--deterministic", action="store_true", help="deterministic single-threaded kernels", **d)
    p.add_argument("--out", metavar="DIR", help="output directory", **d)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr", **d)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicescan", parents=[_global_flags(False)],
                                     description="Slice-scan state space segmentation toolkit")
    parser.set_defaults(set=None)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    common = [_global_flags(True)]

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=common, help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--anisotropy", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--test-ratio", type=float)

    p = add("ingest", cmd_ingest, "build a manifest from image and mask folders")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)

    p = add("train", cmd_train, "train a model with a fixed genotype")
    p.add_argument("--manifest", required=True)

    p = add("supernet-train", cmd_supernet_train, "train the weight-sharing supernet")
    p.add_argument("--manifest", required=True)
    p.add_argument("--search-fraction", type=float, default=0.8, help="share of train files kept for training")

    for name, fn, help_ in (("evolve", cmd_evolve, "evolutionary genotype search"),
                            ("exhaustive", cmd_exhaustive, "evaluate every genotype")):
        p = add(name, fn, help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True, help="manifest with a search split")

    p = add("eval", cmd_eval, "print the metrics CSV row of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--genotype")

    p = add("predict", cmd_predict, "write predicted masks for image files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--genotype")
    p.add_argument("inputs", nargs="+")

    p = add("grad-check", cmd_grad_check, "finite-difference gradient check")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-3)

    p = add("scan-demo", cmd_scan_demo, "print slice scan orders")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--emit-ppm", metavar="PATH")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(args.config, args.set or ())
        args.func(args, cfg)
    except SliceScanError as exc:
        print(f"ERROR:{exc.category}:{_one_line(exc)}", file=sys.stderr)
        return 1
    except (OSError, ValueError, TypeError) as exc:
        category = "io" if isinstance(exc, OSError) else "config"
        print(f"ERROR:{category}:{_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc):
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
