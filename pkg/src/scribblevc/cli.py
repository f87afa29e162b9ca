"""Command line entry point: ``scribblevc {synth,train,eval,ablate,sweep}``."""

import argparse
import json
import logging
import os
import sys

import torch

from . import evaluation
from .config import ConfigError, RunConfig, load_config, save_config
from .dataset import (GeneratorError, ManifestError, load_manifest, make_arrays,
                      synthesize_split)
from .train import CheckpointError, fit, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("scribblevc")


class ValidationError(Exception):
    pass


def build_parser():
    parser = argparse.ArgumentParser(prog="scribblevc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--quiet", action="store_true")
        return p

    common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--manifest", help="training manifest (overrides the config)")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", choices=evaluation.POLICIES, default="mean")
    common(sub.add_parser("ablate", help="branch/CLS ablation grid"))
    common(sub.add_parser("sweep", help="training-set size sensitivity grid"))
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
        n = len(cfg.experiment.seeds)
        cfg.experiment.seeds = list(range(args.seed, args.seed + n))
    return cfg


def _manifest(path):
    if not path:
        raise ValidationError("no manifest given")
    return load_manifest(path)


def _write_echo(cfg, out):
    os.makedirs(out, exist_ok=True)
    save_config(cfg, os.path.join(out, "resolved_config.json"))


def cmd_synth(args, cfg):
    gen = cfg.data.generator()
    _write_echo(cfg, args.out)
    synthesize_split(args.out, cfg.data.n_train, gen, cfg.data.seed, "train", cfg.data.budget)
    synthesize_split(args.out, cfg.data.n_val, gen, cfg.data.seed + 1_000_003, "val",
                     cfg.data.budget)


def cmd_train(args, cfg):
    if args.manifest:
        cfg.train_manifest = args.manifest
    train_m = _manifest(cfg.train_manifest)
    val_m = load_manifest(cfg.val_manifest) if cfg.val_manifest else None
    for m in (train_m, val_m):
        if m is not None and m.num_classes != cfg.model.num_classes:
            raise ValidationError(f"manifest has num_classes={m.num_classes}, "
                                  f"model expects {cfg.model.num_classes}")
    cfg.train_manifest = os.path.abspath(cfg.train_manifest)
    if cfg.val_manifest:
        cfg.val_manifest = os.path.abspath(cfg.val_manifest)
    state = None
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, model_config=cfg.model, train_config=cfg.train)
    _write_echo(cfg, args.out)
    images, _, scribbles = train_m.load_arrays()
    val = None
    if val_m is not None and len(val_m):
        v_images, v_masks, _ = val_m.load_arrays()
        val = (v_images, v_masks)
    state = fit(cfg.model, cfg.train, (images, scribbles), val, state=state, out_dir=args.out)
    if state.history:
        evaluation.write_curves(state.history, args.out)


def cmd_eval(args, cfg):
    manifest = _manifest(args.manifest)
    state = load_checkpoint(args.checkpoint)
    if manifest.num_classes != state.model_config.num_classes:
        raise ValidationError(f"manifest has num_classes={manifest.num_classes}, "
                              f"checkpoint expects {state.model_config.num_classes}")
    images, masks, _ = manifest.load_arrays()
    report, preds = evaluation.evaluate(state.model, state.bank, images, masks,
                                        manifest.num_classes, args.policy, return_preds=True)
    report.config = {"model": state.model_config.to_dict(), "checkpoint": os.path.abspath(args.checkpoint),
                     "manifest": os.path.abspath(args.manifest)}
    report.seeds = [state.train_config.seed]
    _write_echo(cfg, args.out)
    evaluation.export_report(report, args.out, images, preds, state.history,
                             ids=[r.id for r in manifest.records])
    log.info("mean Dice %.6f", report.dice_mean)


def _experiment_data(cfg):
    if cfg.train_manifest and cfg.val_manifest:
        ti, _, ts = _manifest(cfg.train_manifest).load_arrays()
        vi, vm, _ = _manifest(cfg.val_manifest).load_arrays()
        return (ti, ts), (vi, vm)
    gen = cfg.data.generator()
    ti, _, ts = make_arrays(cfg.data.n_train, gen, cfg.data.seed, cfg.data.budget)
    vi, vm, _ = make_arrays(cfg.data.n_val, gen, cfg.data.seed + 1_000_003, cfg.data.budget)
    return (ti, ts), (vi, vm)


def cmd_ablate(args, cfg):
    _write_echo(cfg, args.out)
    train_data, val_data = _experiment_data(cfg)
    result = evaluation.run_ablation(cfg.model, cfg.train, train_data, val_data,
                                     seeds=cfg.experiment.seeds,
                                     variants=cfg.experiment.variants)
    evaluation.write_grid(result, args.out, "ablation")
    if not result["checks"].get("ordering_ok"):
        log.warning("ablation ordering check failed: %s", result["checks"])


def cmd_sweep(args, cfg):
    sizes = cfg.experiment.sizes
    if len(set(sizes)) != len(sizes):
        raise ValidationError(f"duplicate sizes in {sizes}")
    if cfg.data.n_train < max(sizes):
        cfg.data.n_train = max(sizes)
    _write_echo(cfg, args.out)
    train_data, val_data = _experiment_data(cfg)
    result = evaluation.run_sensitivity(cfg.model, cfg.train, train_data, val_data,
                                        sizes=sizes, seeds=cfg.experiment.seeds)
    evaluation.write_grid(result, args.out, "sweep")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "sweep": cmd_sweep}


def fail(code, kind, message):
    print(f"scribblevc: error code={code} kind={kind} message={json.dumps(str(message))}",
          file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        return fail(EXIT_VALIDATION, "validation", exc)
    try:
        COMMANDS[args.command](args, cfg)
    except (ConfigError, ManifestError, CheckpointError, GeneratorError, ValidationError) as exc:
        return fail(EXIT_VALIDATION, "validation", exc)
    except Exception as exc:  # surfaced as a runtime failure
        log.debug("runtime failure", exc_info=True)
        return fail(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
