"""Training stages, model bundles and the experiment harnesses.

A bundle directory holds ``bundle.cfg`` (configs plus an append-only
provenance list) and one checkpoint per trained component: ``base.pseg``
for encoder + prompt encoder + decoder, and optionally ``detector.pseg`` and
``segmenter.pseg``.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import augment_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, apply_overrides, format_value, read_kv, to_lines
from .errors import ConfigError, FreezeViolation, ParseError, ProvenanceError
from .image_encoder import EncoderConfig, ImageEmbedding, ImageEncoder
from .mask_decoder import DecoderConfig, MaskDecoder, binarize, decode
from .metrics import aggregate, confusion, write_report
from .numerics import Tensor, no_tape, ops
from .prompt_encoder import PromptEncoder, PromptEncoderConfig, PromptSet
from .prompt_generator import (
    Detector, DetectorConfig, GeneratorKind, Segmenter, SegmenterConfig, box_from_mask,
    box_or_full_image, detect, sample_points, segmenter_masks, train_detector, train_segmenter,
)
from .synthdata import DEFAULT_SIZES, Manifest, domain_spec, generate, split, stack
from .training import train_loop

log = logging.getLogger(__name__)

BUNDLE_CFG = "bundle.cfg"
BUNDLE_FORMAT = "pseg-bundle-1"
SWEEP_K = (1, 2, 3, 5, 10)
EVAL_BATCH = 64


# -- configs -----------------------------------------------------------------


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompt: PromptEncoderConfig = field(default_factory=PromptEncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self):
        self.encoder.validate()
        self.decoder.validate()
        C = self.encoder.neck_channels
        if self.prompt.embed_dim != C or self.decoder.token_dim != C:
            raise ConfigError(f"channel width mismatch: neck {C}, prompt {self.prompt.embed_dim}, "
                              f"decoder {self.decoder.token_dim}")
        if self.prompt.input_size != self.encoder.input_size:
            raise ConfigError("prompt encoder and image encoder disagree on input_size")
        if self.encoder.grid * self.decoder.upscale_factor != self.prompt.mask_side:
            raise ConfigError("mask resolution 4G must equal input_size / 4")
        return self

    @classmethod
    def from_values(cls, values):
        return cls(apply_overrides(EncoderConfig(), values, "encoder."),
                   apply_overrides(PromptEncoderConfig(), values, "prompt."),
                   apply_overrides(DecoderConfig(), values, "decoder.")).validate()


def _prov_line(entry):
    return " ".join(f"{k}={format_value(v)}" for k, v in entry.items())


def _parse_prov(text):
    out = {}
    for item in text.split():
        key, _, value = item.partition("=")
        out[key] = value
    return out


# -- bundle --------------------------------------------------------------------


@dataclass
class ModelBundle:
    model_config: ModelConfig
    encoder: Optional[ImageEncoder] = None
    prompt_encoder: Optional[PromptEncoder] = None
    decoder: Optional[MaskDecoder] = None
    detector: Optional[Detector] = None
    segmenter: Optional[Segmenter] = None
    provenance: list = field(default_factory=list)

    @classmethod
    def initialise(cls, model_config: ModelConfig, seed):
        model_config.validate()
        rng = np.random.default_rng([seed, 0])
        return cls(model_config, ImageEncoder(model_config.encoder, rng),
                   PromptEncoder(model_config.prompt, rng), MaskDecoder(model_config.decoder, rng))

    @property
    def has_base(self):
        return self.encoder is not None

    def require_base(self):
        if not self.has_base:
            raise ConfigError("bundle has no encoder/prompt-encoder/decoder weights")

    def base_parameters(self):
        self.require_base()
        for prefix, mod in (("encoder.", self.encoder), ("prompt_encoder.", self.prompt_encoder),
                            ("decoder.", self.decoder)):
            yield from mod.named_parameters(prefix)

    def record(self, **entry):
        """Append a provenance entry; existing entries are never rewritten."""
        self.provenance.append(dict(entry))

    def trained_domains(self):
        out = set()
        for entry in self.provenance:
            doms = str(entry.get("train_domains", ""))
            out.update(d for d in doms.split(",") if d)
        return out

    @property
    def train_domain_label(self):
        return "+".join(sorted(self.trained_domains())) or "-"

    def pe_grid(self):
        return self.prompt_encoder.pe_grid(self.model_config.encoder.grid)

    # -- persistence --

    def config_lines(self):
        mc = self.model_config
        lines = [f"format = {BUNDLE_FORMAT}"]
        lines += to_lines(mc.encoder, "encoder.") + to_lines(mc.prompt, "prompt.")
        lines += to_lines(mc.decoder, "decoder.")
        if self.detector is not None:
            lines += to_lines(self.detector.config, "detector.")
        if self.segmenter is not None:
            lines += to_lines(self.segmenter.config, "segmenter.")
        lines += [f"provenance.{i} = {_prov_line(e)}" for i, e in enumerate(self.provenance)]
        return lines

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / BUNDLE_CFG).write_text("\n".join(self.config_lines()) + "\n", encoding="utf-8")
        for fname in ("base.pseg", "detector.pseg", "segmenter.pseg"):
            (d / fname).unlink(missing_ok=True)
        if self.has_base:
            save_checkpoint(d / "base.pseg", [(n, p.data) for n, p in self.base_parameters()])
        if self.detector is not None:
            save_checkpoint(d / "detector.pseg", [(n, p.data) for n, p in self.detector.named_parameters()])
        if self.segmenter is not None:
            save_checkpoint(d / "segmenter.pseg", [(n, p.data) for n, p in self.segmenter.named_parameters()])
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        values = read_kv(d / BUNDLE_CFG)
        if values.get("format") != BUNDLE_FORMAT:
            raise ParseError(d / BUNDLE_CFG, f"unsupported bundle format {values.get('format')!r}")
        mc = ModelConfig.from_values(values)
        rng = np.random.default_rng(0)
        bundle = cls(mc)
        if (d / "base.pseg").exists():
            fresh = cls.initialise(mc, 0)
            params = dict(fresh.base_parameters())
            state = load_checkpoint(d / "base.pseg", {n: p.shape for n, p in params.items()})
            for name, arr in state.items():
                params[name].data = arr
            bundle.encoder, bundle.prompt_encoder, bundle.decoder = (
                fresh.encoder, fresh.prompt_encoder, fresh.decoder)
        if (d / "detector.pseg").exists():
            det = Detector(apply_overrides(DetectorConfig(), values, "detector."), rng)
            det.load_state_dict(load_checkpoint(d / "detector.pseg", _inventory(det)))
            bundle.detector = det
        if (d / "segmenter.pseg").exists():
            seg = Segmenter(apply_overrides(SegmenterConfig(), values, "segmenter."), rng)
            seg.load_state_dict(load_checkpoint(d / "segmenter.pseg", _inventory(seg)))
            bundle.segmenter = seg
        keys = sorted((k for k in values if k.startswith("provenance.")),
                      key=lambda k: int(k.split(".", 1)[1]))
        bundle.provenance = [_parse_prov(values[k]) for k in keys]
        return bundle


def _inventory(module):
    return {n: p.shape for n, p in module.named_parameters()}


# -- datasets -----------------------------------------------------------------


@dataclass
class Split:
    """Decoded samples held as arrays: images in [0, 1], binary masks."""
    images: np.ndarray
    masks: np.ndarray
    domains: tuple

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_manifest(cls, manifest: Manifest):
        if len(manifest) == 0:
            raise ValueError(f"{manifest.root}: empty manifest")
        images, masks = stack(manifest.load_all())
        return cls(images, masks, tuple(manifest.domains))

    def boxes(self):
        return [box_from_mask(m) for m in self.masks]


def partition(manifest: Manifest, cfg: TrainConfig):
    """(train, validation, test) manifests; all derived from ``split_seed``."""
    train, test = split(manifest, cfg.train_fraction, cfg.split_seed)
    if cfg.validation_fraction > 0:
        train, val = split(train, 1.0 - cfg.validation_fraction, cfg.split_seed + 1)
    else:
        val = train
    return train, val, test


def lowres_targets(masks, side):
    """Area-average binary masks down to ``side`` and re-binarise at 0.5."""
    N, H, W = masks.shape
    f = H // side
    if f * side != H or W != H:
        raise ConfigError(f"mask size {H}x{W} is not a multiple of the logit side {side}")
    return (masks.reshape(N, side, f, side, f).mean(axis=(2, 4)) >= 0.5).astype(np.float64)


def mask_loss(logits, target):
    return ops.bce_with_logits(logits, target) + ops.dice_loss(logits, target)


# -- inference -------------------------------------------------------------------


def embed(bundle: ModelBundle, images, batch_size=EVAL_BATCH):
    """Frozen image embeddings as a plain (N, G, G, C) array."""
    bundle.require_base()
    out = []
    with no_tape():
        for s in range(0, len(images), batch_size):
            out.append(bundle.encoder(images[s:s + batch_size]).data)
    return np.concatenate(out)


def _groups(prompts):
    groups = {}
    for i, p in enumerate(prompts):
        groups.setdefault(p.structure(), []).append(i)
    return groups.values()


def predict_logits(bundle: ModelBundle, grids, prompts, batch_size=EVAL_BATCH):
    """Decoder logits for precomputed embeddings, batching same-shaped prompt sets."""
    pe = bundle.pe_grid()
    side = bundle.model_config.prompt.mask_side
    out = np.empty((len(grids), side, side))
    with no_tape():
        for idx in _groups(prompts):
            for s in range(0, len(idx), batch_size):
                sel = idx[s:s + batch_size]
                emb = ImageEmbedding(Tensor(grids[sel]), pe)
                out[sel] = decode(emb, [prompts[i] for i in sel], bundle.prompt_encoder,
                                  bundle.decoder).data
    return out


def predict_masks(bundle, grids, prompts):
    logits = predict_logits(bundle, grids, prompts)
    return binarize(logits, bundle.model_config.encoder.input_size)


def make_prompts(bundle: ModelBundle, kind, images, masks=None, k=None, rng=None):
    """One PromptSet per image from the chosen generator."""
    kind = GeneratorKind(kind)
    n = len(images)
    if kind in (GeneratorKind.GT_BOX, GeneratorKind.GT_POINTS) and masks is None:
        raise ConfigError(f"generator {kind.value} needs ground-truth masks")
    if kind is GeneratorKind.NONE:
        return [PromptSet() for _ in range(n)]
    if kind is GeneratorKind.GT_BOX:
        return [PromptSet(box=box_from_mask(m)) for m in masks]
    if kind is GeneratorKind.GT_POINTS:
        if not k or rng is None:
            raise ConfigError("gt_points needs k >= 1 and a sampling rng")
        return [PromptSet(points=sample_points(m, k, rng)) for m in masks]
    if kind is GeneratorKind.DETECTOR_BOX:
        if bundle.detector is None:
            raise ConfigError("bundle has no detector weights")
        return [PromptSet(box=d.box) for d in detect(images, bundle.detector)]
    if bundle.segmenter is None:
        raise ConfigError("bundle has no segmenter weights")
    return [PromptSet(box=box_or_full_image(m)) for m in segmenter_masks(images, bundle.segmenter)]


def segment_end_to_end(image, bundle: ModelBundle, generator, gt_mask=None, k=5, seed=0):
    """Binary mask at image resolution for a single (H, W, 3) image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)[None]
    masks = None if gt_mask is None else np.asarray(gt_mask)[None]
    prompts = make_prompts(bundle, generator, image, masks, k, np.random.default_rng(seed))
    return predict_masks(bundle, embed(bundle, image), prompts)[0]


def evaluate(bundle, data: Split, kind, *, k=None, seed=0, grids=None, method=None,
             eval_domain=None):
    """Micro metrics of one prompt arm on one evaluation set."""
    grids = embed(bundle, data.images) if grids is None else grids
    prompts = make_prompts(bundle, kind, data.images, data.masks, k, np.random.default_rng(seed))
    pred = predict_masks(bundle, grids, prompts)
    kind = GeneratorKind(kind)
    return aggregate((confusion(p, g) for p, g in zip(pred, data.masks)),
                     method=method or kind.value, generator=kind.value,
                     train_domain=bundle.train_domain_label,
                     eval_domain=eval_domain or "+".join(data.domains), seed=seed)


def _val_miou(bundle, grids, data, prompts):
    pred = predict_masks(bundle, grids, prompts)
    return aggregate(confusion(p, g) for p, g in zip(pred, data.masks)).miou


# -- training stages -----------------------------------------------------------------


def _stage_entry(cfg: TrainConfig, train: Split, **extra):
    entry = dict(stage=cfg.stage, seed=cfg.seed, train_domains=",".join(train.domains),
                 split_seed=cfg.split_seed, train_fraction=cfg.train_fraction,
                 validation_fraction=cfg.validation_fraction, epochs=cfg.epochs,
                 batch_size=cfg.batch_size, lr=cfg.lr, augment=cfg.augment,
                 n_train=len(train))
    entry.update(extra)
    return entry


def _augmenter(train: Split, cfg: TrainConfig):
    if cfg.augment == 0:
        return None
    return lambda idx, rng: augment_batch(train.images[idx], train.masks[idx], rng, cfg.augment)


def _need_seed(cfg):
    if cfg.seed is None:
        raise ConfigError(f"{cfg.stage}: a seed is required")


def pretrain_base(train: Split, val: Split, cfg: TrainConfig, model_config=None):
    """Joint supervised training of encoder, prompt encoder and decoder."""
    _need_seed(cfg)
    if cfg.stage != "pretrain":
        raise ConfigError(f"pretrain_base needs a pretrain config, got {cfg.stage}")
    if len(train) == 0:
        raise ValueError("pretrain_base: empty training split")
    model_config = model_config or ModelConfig()
    bundle = ModelBundle.initialise(model_config, cfg.seed)
    side = model_config.prompt.mask_side
    val_prompts = [PromptSet(box=b) for b in val.boxes()]
    pe = bundle.pe_grid()
    params = [p for _, p in bundle.base_parameters()]

    def batch_loss(idx, rng):
        u = rng.random()
        images, masks = augment_batch(train.images[idx], train.masks[idx], rng, cfg.augment,
                                      decoy=u < cfg.p_box + cfg.p_points)
        if u < cfg.p_box:
            prompts = [PromptSet(box=box_from_mask(m)) for m in masks]
        elif u < cfg.p_box + cfg.p_points:
            k = int(rng.integers(1, cfg.max_points + 1))
            prompts = [PromptSet(points=sample_points(m, k, rng)) for m in masks]
        else:
            prompts = [PromptSet() for _ in idx]
        emb = ImageEmbedding(bundle.encoder(images), pe)
        logits = decode(emb, prompts, bundle.prompt_encoder, bundle.decoder, train=True, rng=rng)
        return mask_loss(logits, lowres_targets(masks, side))

    def validate():
        return _val_miou(bundle, embed(bundle, val.images), val, val_prompts)

    history = train_loop(params, batch_loss, len(train), epochs=cfg.epochs,
                         batch_size=cfg.batch_size, lr=cfg.lr, seed=[cfg.seed, 10],
                         validate=validate, label="pretrain")
    best = max(h.score for h in history)
    bundle.record(**_stage_entry(cfg, train, val_miou=f"{best:.4f}"))
    return bundle, history


def finetune_decoder(bundle: ModelBundle, train: Split, val: Split, cfg: TrainConfig):
    """Train only the decoder on frozen embeddings; prompts from the detector if present."""
    _need_seed(cfg)
    if cfg.stage != "finetune" or not (cfg.freeze_encoder and cfg.freeze_prompt_encoder):
        raise ConfigError("finetune_decoder needs a finetune config with both freeze flags")
    bundle.require_base()
    frozen = (bundle.encoder, bundle.prompt_encoder)
    for mod in frozen:
        mod.freeze()
    digests = [m.digest() for m in frozen]

    def check_frozen(epoch):
        if [m.digest() for m in frozen] != digests:
            raise FreezeViolation(f"frozen parameters changed during epoch {epoch}")

    source = GeneratorKind.DETECTOR_BOX if bundle.detector is not None else GeneratorKind.GT_BOX
    grids = embed(bundle, train.images) if cfg.augment == 0 else None
    val_grids = embed(bundle, val.images)
    prompts = make_prompts(bundle, source, train.images, train.masks) if grids is not None else None
    val_prompts = make_prompts(bundle, source, val.images, val.masks)
    side = bundle.model_config.prompt.mask_side
    targets = lowres_targets(train.masks, side)
    pe = bundle.pe_grid()

    def batch_loss(idx, rng):
        if cfg.augment > 0:  # fresh views need fresh embeddings and prompts
            images, masks = augment_batch(train.images[idx], train.masks[idx], rng, cfg.augment)
            emb = ImageEmbedding(Tensor(embed(bundle, images)), pe)
            batch_prompts = make_prompts(bundle, source, images, masks)
            target = lowres_targets(masks, side)
        else:
            emb = ImageEmbedding(Tensor(grids[idx]), pe)
            batch_prompts = [prompts[i] for i in idx]
            target = targets[idx]
        logits = decode(emb, batch_prompts, bundle.prompt_encoder, bundle.decoder,
                        train=True, rng=rng)
        return mask_loss(logits, target)

    def validate():
        return _val_miou(bundle, val_grids, val, val_prompts)

    initial = validate()
    try:
        history = train_loop(bundle.decoder.parameters(), batch_loss, len(train),
                             epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                             seed=[cfg.seed, 11], validate=validate, label="finetune",
                             initial_score=initial, on_epoch=check_frozen)
    finally:
        for mod in frozen:
            mod.unfreeze()
    check_frozen(cfg.epochs)
    best = max([initial] + [h.score for h in history])
    bundle.record(**_stage_entry(cfg, train, prompt_source=source.value,
                                 val_miou_before=f"{initial:.4f}", val_miou=f"{best:.4f}"))
    return bundle, history


def train_detector_stage(bundle: ModelBundle, train: Split, val: Split, cfg: TrainConfig,
                         config=None):
    _need_seed(cfg)
    det, history = train_detector(train.images, train.boxes(), config or DetectorConfig(),
                                  epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                                  seed=cfg.seed, val_images=val.images, val_boxes=val.boxes(),
                                   augment=_augmenter(train, cfg))
    bundle.detector = det
    bundle.record(**_stage_entry(cfg, train, val_loss=f"{min(h.score for h in history):.4f}"))
    return bundle, history


def train_segmenter_stage(bundle: ModelBundle, train: Split, val: Split, cfg: TrainConfig,
                          config=None):
    _need_seed(cfg)
    seg, history = train_segmenter(train.images, train.masks, config or SegmenterConfig(),
                                   epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                                   seed=cfg.seed, val_images=val.images, val_masks=val.masks,
                                    augment=_augmenter(train, cfg))
    bundle.segmenter = seg
    bundle.record(**_stage_entry(cfg, train, val_loss=f"{min(h.score for h in history):.4f}"))
    return bundle, history


# -- experiments --------------------------------------------------------------------


def check_zero_shot(bundle: ModelBundle, eval_sets):
    """Abort when any evaluation domain was seen by any training stage."""
    seen = bundle.trained_domains()
    for name, data in eval_sets.items():
        overlap = seen.intersection(data.domains)
        if overlap:
            raise ProvenanceError(f"evaluation set {name} shares domain(s) {sorted(overlap)} "
                                  f"with training data")


def run_prompt_sweep(bundle, eval_sets, k_set=SWEEP_K, seeds=(0, 1, 2)):
    """Point arms (averaged over sampling seeds), gt_box and none per domain."""
    if len(seeds) < 3:
        raise ConfigError("point arms need at least three sampling seeds")
    check_zero_shot(bundle, eval_sets)
    records = []
    for name, data in eval_sets.items():
        grids = embed(bundle, data.images)
        for kind in (GeneratorKind.GT_BOX, GeneratorKind.NONE):
            records.append(evaluate(bundle, data, kind, seed=seeds[0], grids=grids,
                                    eval_domain=name))
        for k in k_set:
            runs = [evaluate(bundle, data, GeneratorKind.GT_POINTS, k=k, seed=s, grids=grids,
                             eval_domain=name) for s in seeds]
            records.append(dataclasses.replace(
                runs[0], method=f"points_k{k:02d}",
                miou=float(np.mean([r.miou for r in runs])),
                mpa=float(np.mean([r.mpa for r in runs])),
                acc=float(np.mean([r.acc for r in runs]))))
    return records


def run_generator_table(bundle, eval_sets, seed=0):
    if bundle.detector is None or bundle.segmenter is None:
        raise ConfigError("generator table needs both detector and segmenter weights")
    records = []
    for name, data in eval_sets.items():
        grids = embed(bundle, data.images)
        for kind in (GeneratorKind.DETECTOR_BOX, GeneratorKind.SEGMENTER_BOX):
            records.append(evaluate(bundle, data, kind, seed=seed, grids=grids, eval_domain=name))
    return records


def run_zeroshot_table(bundle, eval_sets, seed=0):
    check_zero_shot(bundle, eval_sets)
    if bundle.detector is None:
        raise ConfigError("bundle has no detector weights")
    records = []
    for name, data in eval_sets.items():
        grids = embed(bundle, data.images)
        for kind in (GeneratorKind.NONE, GeneratorKind.GT_BOX, GeneratorKind.DETECTOR_BOX):
            records.append(evaluate(bundle, data, kind, seed=seed, grids=grids, eval_domain=name))
    return records


# -- default experiment ----------------------------------------------------------------


def run_default_pipeline(workdir, seed=0, sizes=None, overrides=None, segmenter=True,
                         sweep=True):
    """gen-data A/B/C -> pretrain -> detector -> finetune -> tables, under ``workdir``.

    ``overrides`` maps a stage name to TrainConfig field overrides. Returns
    ``{table name: csv text}``; the CSVs are also written into ``workdir``.
    """
    work = Path(workdir)
    sizes = dict(DEFAULT_SIZES, **(sizes or {}))
    overrides = overrides or {}
    sets = {}
    for dom in ("A", "B", "C"):
        sets[dom] = generate(domain_spec(dom), sizes[dom], seed, work / f"data_{dom}")

    def cfg(stage):
        return TrainConfig.for_stage(stage, seed=seed, **overrides.get(stage, {}))

    pre_cfg = cfg("pretrain")
    tr_m, val_m, test_m = partition(sets["A"], pre_cfg)
    train, val, test = (Split.from_manifest(m) for m in (tr_m, val_m, test_m))
    bundle, _ = pretrain_base(train, val, pre_cfg)
    bundle.save(work / "bundle_pretrained")
    train_detector_stage(bundle, train, val, cfg("detector"))
    if segmenter:
        train_segmenter_stage(bundle, train, val, cfg("segmenter"))
    finetune_decoder(bundle, train, val, cfg("finetune"))
    bundle.save(work / "bundle")

    B, C = Split.from_manifest(sets["B"]), Split.from_manifest(sets["C"])
    tables = {"zeroshot": write_report(run_zeroshot_table(bundle, {"B": B, "C": C}),
                                       work / "zeroshot.csv")}
    tables["in_domain"] = write_report([evaluate(bundle, test, GeneratorKind.GT_BOX,
                                                 eval_domain="A-test")], work / "in_domain.csv")
    if sweep:
        tables["sweep"] = write_report(run_prompt_sweep(bundle, {"B": B, "C": C}),
                                       work / "sweep.csv")
    if segmenter:
        tables["generators"] = write_report(
            run_generator_table(bundle, {"A-test": test, "B": B, "C": C}), work / "generators.csv")
    return tables


__all__ = [
    "ModelConfig", "ModelBundle", "Split", "partition", "lowres_targets", "mask_loss", "embed",
    "predict_logits", "predict_masks", "make_prompts", "segment_end_to_end", "evaluate",
    "pretrain_base", "finetune_decoder", "train_detector_stage", "train_segmenter_stage",
    "check_zero_shot", "run_prompt_sweep", "run_generator_table", "run_zeroshot_table",
    "run_default_pipeline",
]
