"""Command-line entry point: ``pseg <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data/parse error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import _kernels as K
from .config import TrainConfig, apply_overrides, parse_kv, read_kv
from .errors import (
    ConfigError, DataError, FreezeViolation, NumericError, ProvenanceError,
    ShapeError, UsageError,
)
from .metrics import overlay, write_report
from .pipeline import (
    ModelBundle, ModelConfig, Split, embed, evaluate, finetune_decoder, make_prompts, partition,
    predict_logits, pretrain_base, run_default_pipeline, run_generator_table, run_prompt_sweep,
    run_zeroshot_table, train_detector_stage, train_segmenter_stage,
)
from .pnm import read_pnm, write_pgm, write_ppm
from .prompt_encoder import BoxPrompt, PromptSet
from .prompt_generator import DetectorConfig, GeneratorKind, SegmenterConfig
from .synthdata import DEFAULT_SIZES, Manifest, domain_spec, generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_MODEL_PREFIXES = {
    "pretrain": ("encoder.", "prompt.", "decoder."),
    "detector": ("detector.",),
    "segmenter": ("segmenter.",),
    "finetune": (),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _stage_values(stage, args):
    """Config-file values overlaid with ``--set`` pairs, split into train and model keys."""
    values = read_kv(args.config) if args.config else {}
    for item in args.set or []:
        values.update(parse_kv(item, "--set"))
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    prefixes = _MODEL_PREFIXES[stage]
    unknown = [k for k in values
               if k not in train_keys and not (prefixes and k.startswith(prefixes))]
    if unknown:
        raise ConfigError(f"unknown config key(s) for {stage}: {', '.join(sorted(unknown))}")
    if values.get("stage", stage) != stage:
        raise ConfigError(f"config is for stage {values['stage']!r}, not {stage!r}")
    cfg = apply_overrides(TrainConfig.for_stage(stage), values)
    cfg = dataclasses.replace(cfg, seed=args.seed).validate()
    return cfg, values


def _train_split(args, cfg):
    tr, val, _ = partition(Manifest.read(args.data), cfg)
    return Split.from_manifest(tr), Split.from_manifest(val)


def _load_bundle(path):
    return ModelBundle.load(path)


def _eval_set(path):
    return Split.from_manifest(Manifest.read(path))


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args):
    spec = domain_spec(args.domain, args.image_size)
    n = args.n if args.n is not None else DEFAULT_SIZES[spec.id]
    man = generate(spec, n, args.seed, args.out)
    print(f"wrote {len(man)} samples of domain {spec.id} to {args.out}")


def cmd_pretrain(args):
    cfg, values = _stage_values("pretrain", args)
    train, val = _train_split(args, cfg)
    bundle, hist = pretrain_base(train, val, cfg, ModelConfig.from_values(values))
    bundle.save(args.out)
    print(f"pretrained bundle -> {args.out} (best val mIoU {max(h.score for h in hist):.2f})")


def cmd_finetune(args):
    cfg, _ = _stage_values("finetune", args)
    bundle = _load_bundle(args.bundle)
    train, val = _train_split(args, cfg)
    finetune_decoder(bundle, train, val, cfg)
    bundle.save(args.out)
    print(f"fine-tuned bundle -> {args.out} ({bundle.provenance[-1]['val_miou']} val mIoU)")


def _cmd_aux(stage, config_cls, runner):
    def run(args):
        cfg, values = _stage_values(stage, args)
        bundle = _load_bundle(args.bundle) if args.bundle else ModelBundle(ModelConfig())
        train, val = _train_split(args, cfg)
        runner(bundle, train, val, cfg, apply_overrides(config_cls(), values, f"{stage}."))
        bundle.save(args.out)
        print(f"{stage} trained -> {args.out}")
    return run


def cmd_train_detector(args):
    _cmd_aux("detector", DetectorConfig, train_detector_stage)(args)


def cmd_train_segmenter(args):
    _cmd_aux("segmenter", SegmenterConfig, train_segmenter_stage)(args)


def _parse_box(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 4:
        raise UsageError(f"--box needs four comma-separated numbers, got {text!r}")
    return vals


def cmd_segment(args):
    bundle = _load_bundle(args.bundle)
    arr, maxval = read_pnm(args.image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    H, W = arr.shape[:2]
    size = bundle.model_config.encoder.input_size
    image = arr.astype(np.float64) / maxval
    if (H, W) != (size, size):
        image = K.bilinear_resize(image, size, size)
    gt = None
    if args.mask:
        gray, gmax = read_pnm(args.mask)
        gt = (gray.reshape(gray.shape[:2] + (-1,)).mean(axis=2) * 2 >= gmax).astype(np.uint8)[None]
    if args.box:
        prompts = [PromptSet(box=BoxPrompt(*_parse_box(args.box)))]
    else:
        prompts = make_prompts(bundle, args.generator, image[None], gt, args.k,
                               np.random.default_rng(args.seed))
    logits = predict_logits(bundle, embed(bundle, image[None]), prompts)[0]
    mask = (K.bilinear_resize(logits, H, W) > 0).astype(np.uint8)
    rgb = np.clip(np.round(arr.astype(np.float64) * 255.0 / maxval), 0, 255).astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    write_pgm(out / f"{stem}_mask.pgm", mask * 255)
    write_ppm(out / f"{stem}_overlay.ppm", overlay(rgb, mask))
    print(f"{stem}: {int(mask.sum())} foreground pixels -> {out}")


def _write_csv(records, path):
    text = write_report(records, path)
    if not path:
        sys.stdout.write(text)


def cmd_sweep(args):
    bundle = _load_bundle(args.bundle)
    sets = {"B": _eval_set(args.data_b), "C": _eval_set(args.data_c)}
    seeds = tuple(range(args.seed, args.seed + args.num_seeds))
    k_set = tuple(int(k) for k in args.k_set.split(","))
    _write_csv(run_prompt_sweep(bundle, sets, k_set, seeds), args.out_csv)


def _a_test(bundle, path):
    pre = [e for e in bundle.provenance if e.get("stage") == "pretrain"]
    if not pre:
        raise ConfigError("bundle has no pretrain provenance to recover the domain-A split")
    cfg = TrainConfig(split_seed=int(pre[0]["split_seed"]),
                      train_fraction=float(pre[0]["train_fraction"]),
                      validation_fraction=float(pre[0]["validation_fraction"]))
    return Split.from_manifest(partition(Manifest.read(path), cfg)[2])


def cmd_gen_table(args):
    bundle = _load_bundle(args.bundle)
    sets = {"A-test": _a_test(bundle, args.data_a), "B": _eval_set(args.data_b),
            "C": _eval_set(args.data_c)}
    _write_csv(run_generator_table(bundle, sets, args.seed), args.out_csv)


def cmd_zeroshot_table(args):
    bundle = _load_bundle(args.bundle)
    sets = {"B": _eval_set(args.data_b), "C": _eval_set(args.data_c)}
    _write_csv(run_zeroshot_table(bundle, sets, args.seed), args.out_csv)


def cmd_eval(args):
    bundle = _load_bundle(args.bundle)
    data = _eval_set(args.data)
    kind = GeneratorKind(args.generator)
    method = f"points_k{args.k:02d}" if kind is GeneratorKind.GT_POINTS else None
    _write_csv([evaluate(bundle, data, kind, k=args.k, seed=args.seed, method=method)],
               args.out_csv)


def cmd_run_default(args):
    tables = run_default_pipeline(args.out, seed=args.seed, segmenter=not args.no_segmenter,
                                  sweep=not args.no_sweep)
    for name in tables:
        print(f"{name}: {Path(args.out) / (name + '.csv')}")


# -- parser ------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="pseg", description="Promptable segmentation pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    gens = [g.value for g in GeneratorKind]

    def training(name, help_, bundle=None):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--data", required=True, help="dataset root with manifest.tsv")
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", required=True, help="output bundle directory")
        sp.add_argument("--seed", type=int, required=True)
        if bundle is not None:
            sp.add_argument("--bundle", required=bundle, help="input bundle directory")
        return sp

    sp = sub.add_parser("gen-data", help="render a synthetic domain")
    sp.add_argument("--domain", required=True, choices=sorted(DEFAULT_SIZES))
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--image-size", type=int)
    sp.set_defaults(func=cmd_gen_data)

    training("pretrain", "joint supervised pretraining").set_defaults(func=cmd_pretrain)
    training("finetune", "decoder-only fine-tuning", bundle=True).set_defaults(func=cmd_finetune)
    training("train-detector", "train the box detector", bundle=False).set_defaults(func=cmd_train_detector)
    training("train-segmenter", "train the baseline segmenter", bundle=False).set_defaults(
        func=cmd_train_segmenter)

    sp = sub.add_parser("segment", help="segment one image")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--generator", choices=gens, default=GeneratorKind.DETECTOR_BOX.value)
    sp.add_argument("--mask", help="ground-truth mask for gt_* generators")
    sp.add_argument("--box", metavar="X0,Y0,X1,Y1",
                    help="manual box prompt in [0, 1] coordinates; overrides --generator")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("sweep", help="prompt-type sweep on zero-shot domains")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--data-b", required=True)
    sp.add_argument("--data-c", required=True)
    sp.add_argument("--k-set", default="1,2,3,5,10")
    sp.add_argument("--num-seeds", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-csv")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gen-table", help="detector vs segmenter boxes")
    sp.add_argument("--bundle", required=True)
    for d in "abc":
        sp.add_argument(f"--data-{d}", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-csv")
    sp.set_defaults(func=cmd_gen_table)

    sp = sub.add_parser("zeroshot-table", help="none / gt_box / detector_box on unseen domains")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--data-b", required=True)
    sp.add_argument("--data-c", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-csv")
    sp.set_defaults(func=cmd_zeroshot_table)

    sp = sub.add_parser("eval", help="evaluate one generator on a dataset")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--generator", choices=gens, required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("run-default", help="the whole default experiment in one directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--no-segmenter", action="store_true")
    sp.add_argument("--no-sweep", action="store_true")
    sp.set_defaults(func=cmd_run_default)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
        args.func(args)
        return EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ProvenanceError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FreezeViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
