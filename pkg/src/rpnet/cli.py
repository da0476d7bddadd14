"""Command-line entry point: ``rpnet <command> [options]``.

Every command accepts ``--config FILE`` (key = value lines) and repeatable
``-p key=value`` overrides, writes into ``--out`` and echoes the effective
configuration there as ``config.txt``.  Failures print a single line

    error kind=<kind> message="<text>"

on stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .backbone import load_checkpoint
from .config import ConfigError, TrainConfig
from .data import ShapeCorpusConfig, generate_corpus, load_manifest
from .pnm import PNMError

log = logging.getLogger("rpnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("-p", "--param", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--seed", type=int, help="shortcut for -p seed=N")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rpnet", description="Region-prototype CAM training and evaluation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="render a synthetic shape corpus")
    _common(p)
    p.add_argument("--num-images", type=int)
    p.add_argument("--image-size", type=int)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--baseline", action="store_true", help="plain CAM classifier")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--no-eval", action="store_true", help="skip maps, masks and mIoU")

    for name, text in (("infer-maps", "write base and enhanced activation maps"),
                       ("pseudo-masks", "write base and enhanced pseudo-masks"),
                       ("eval-miou", "score pseudo-masks against ground truth")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)

    p = sub.add_parser("ablate", help="sweep one or more config keys")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sweep", action="append", required=True, metavar="KEY=V1,V2,...")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--write-maps", action="store_true")

    p = sub.add_parser("fractions", help="baseline vs RPNet across training-data fractions")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--set", dest="fractions", default="1,1/2,1/4,1/8,1/16",
                   help="comma-separated fractions")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--write-maps", action="store_true")
    return parser


# ---------------------------------------------------------------- helpers

def _train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    cfg = cfgmod.load(args.config) if args.config else (base or TrainConfig())
    pairs = list(args.param)
    if args.seed is not None:
        pairs.append(f"seed={args.seed}")
    cfg = cfgmod.apply_overrides(cfg, pairs)
    cfg.validate()
    return cfg


def _seeds(args, cfg: TrainConfig) -> list[int]:
    if not args.seeds:
        return [cfg.seed]
    try:
        return [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise UsageError(f"--seeds expects integers, got {args.seeds!r}") from None


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(args):
    params, backbone, meta = load_checkpoint(args.checkpoint)
    base = cfgmod.loads(meta["config"]) if "config" in meta else None
    return params, backbone, _train_config(args, base)


def _emit(text: str):
    sys.stdout.write(text)
    sys.stdout.flush()


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    corpus = cfgmod.load(args.config, ShapeCorpusConfig) if args.config else ShapeCorpusConfig()
    pairs = list(args.param)
    for flag, key in ((args.seed, "seed"), (args.num_images, "num_images"),
                      (args.image_size, "image_size")):
        if flag is not None:
            pairs.append(f"{key}={flag}")
    corpus = cfgmod.apply_overrides(corpus, pairs)
    out = _out(args)
    cfgmod.save(corpus, out / "config.txt")
    m = generate_corpus(corpus, out)
    _emit(f"images,{len(m)}\nmanifest,{out / 'manifest.csv'}\n")


def cmd_train(args):
    from .experiments import run_once
    from .plotting import plot_comparison, plot_losses
    from .training import train

    cfg = _train_config(args)
    manifest = load_manifest(args.manifest)
    out = _out(args)
    if args.no_eval or args.max_steps is not None:
        result = train(manifest, cfg, baseline=args.baseline, max_steps=args.max_steps)
        result.save(out)
        cfgmod.save(cfg, out / "config.txt")
        summary = None
    else:
        result, summary = run_once(manifest, cfg, out, baseline=args.baseline, eval_manifest=manifest)
    if result.metrics:
        plot_losses(result.metrics, out / "loss.png")
    lines = [f"steps,{len(result.metrics)}", f"final_loss,{result.metrics[-1].L!r}"] if result.metrics else []
    if summary is not None:
        plot_comparison(summary.report, out / "comparison.png")
        lines += [f"{k},{v!r}" for k, v in summary.report.summary_row().items()]
    _emit("\n".join(lines) + "\n")


def cmd_infer_maps(args):
    from .pseudo import export_outputs

    params, backbone, cfg = _load_model(args)
    out = _out(args)
    cfgmod.save(cfg, out / "config.txt")
    n = export_outputs(params, backbone, load_manifest(args.manifest), cfg, out, maps=True, masks=False)
    _emit(f"images,{n}\nmaps,{out / 'maps'}\n")


def cmd_pseudo_masks(args):
    from .pseudo import export_outputs

    params, backbone, cfg = _load_model(args)
    out = _out(args)
    cfgmod.save(cfg, out / "config.txt")
    n = export_outputs(params, backbone, load_manifest(args.manifest), cfg, out, maps=False, masks=True)
    _emit(f"images,{n}\nmasks,{out / 'masks'}\n")


def cmd_eval_miou(args):
    from .plotting import plot_comparison
    from .pseudo import compare_base_vs_enhanced

    params, backbone, cfg = _load_model(args)
    manifest = load_manifest(args.manifest)
    out = _out(args)
    cfgmod.save(cfg, out / "config.txt")
    rep = compare_base_vs_enhanced(params, backbone, manifest, cfg)
    (out / "miou_base.csv").write_text(rep.base.to_csv(manifest.class_names), encoding="utf-8")
    (out / "miou_enhanced.csv").write_text(rep.enhanced.to_csv(manifest.class_names), encoding="utf-8")
    summary = "base_miou,enhanced_miou,delta\n" + f"{rep.base_miou!r},{rep.enhanced_miou!r},{rep.delta!r}\n"
    (out / "summary.csv").write_text(summary, encoding="utf-8")
    plot_comparison(rep, out / "comparison.png")
    _emit(summary)


def cmd_ablate(args):
    from .experiments import SWEEP_FIELDS, parse_sweep, sweep, to_csv
    from .plotting import plot_sweep

    cfg = _train_config(args)
    seeds = _seeds(args, cfg)
    try:
        sweeps = [parse_sweep(s) for s in args.sweep]
    except ValueError as e:
        raise UsageError(str(e)) from None
    for key, values in sweeps:
        for v in values:  # fail before any training on a bad value
            cfgmod.apply_overrides(cfg, [(key, v)]).validate()
    manifest = load_manifest(args.manifest)
    out = _out(args)
    cfgmod.save(cfg, out / "config.txt")
    rows = []
    for key, values in sweeps:
        part = sweep(manifest, cfg, key, values, seeds, out, write_maps=args.write_maps,
                     progress=lambda r: log.info("%s", r))
        plot_sweep(part, out / f"ablation_{key}.png")
        rows += part
    text = to_csv(rows, SWEEP_FIELDS)
    (out / "ablation.csv").write_text(text, encoding="utf-8")
    _emit(text)


def cmd_fractions(args):
    from fractions import Fraction

    from .experiments import FRACTION_FIELDS, SUMMARY_FIELDS, fraction_study, fraction_summary, to_csv
    from .plotting import plot_fractions

    cfg = _train_config(args)
    seeds = _seeds(args, cfg)
    try:
        fracs = [float(Fraction(s.strip())) for s in args.fractions.split(",")]
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"--set expects fractions like 1,1/2,1/4, got {args.fractions!r}") from None
    for f in fracs:
        cfg.updated(fraction=f).validate()
    manifest = load_manifest(args.manifest)
    out = _out(args)
    cfgmod.save(cfg, out / "config.txt")
    rows = fraction_study(manifest, cfg, fracs, seeds, out, write_maps=args.write_maps,
                          progress=lambda r: log.info("%s", r))
    (out / "fractions.csv").write_text(to_csv(rows, FRACTION_FIELDS), encoding="utf-8")
    summary = to_csv(fraction_summary(rows), SUMMARY_FIELDS)
    (out / "summary.csv").write_text(summary, encoding="utf-8")
    plot_fractions(rows, out / "fractions.png")
    _emit(summary)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer-maps": cmd_infer_maps,
            "pseudo-masks": cmd_pseudo_masks, "eval-miou": cmd_eval_miou,
            "ablate": cmd_ablate, "fractions": cmd_fractions}


def _fail(kind: str, exc) -> int:
    msg = str(exc).replace("\n", " ").strip() or type(exc).__name__
    sys.stderr.write(f"error kind={kind} message={json.dumps(msg)}\n")
    return 2 if kind == "usage" else 1


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("usage", e)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        return _fail("usage", e)
    except ConfigError as e:
        return _fail("config", e)
    except PNMError as e:
        return _fail("format", e)
    except FileNotFoundError as e:
        return _fail("missing-file", e)
    except FloatingPointError as e:
        return _fail("numeric", e)
    except (ValueError, OSError) as e:
        return _fail("invalid", e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
