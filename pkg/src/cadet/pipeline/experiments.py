"""Experiment drivers: train a configured variant, then score it.

Experiment I trains on the seen classes of a split and reports recall on
seen and unseen classes (plus, optionally, a second dataset restricted to
classes absent from training).  Experiment II trains on a whole dataset and
reports recall on evaluation classes unrelated to any training class in a
semantic hierarchy.
"""

from __future__ import annotations

import json
import logging
from contextlib import ExitStack
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import torch

from .. import resources
from ..adversarial import AdversarialConfig
from ..core import SIZE_BUCKETS, DatasetIndex
from ..data.coco import load_coco_json, load_images
from ..data.loader import BatchLoader, build_training_set
from ..data.shapes import ShapesConfig, generate_shapes
from ..detector.checkpoint import read_checkpoint, save_checkpoint
from ..detector.model import DetectorConfig, DetectorModel, init_from_class_aware
from ..metrics import ARCurve, EvalReport, ar_at_k, harmonic_mean
from ..protocol import ClassSplit, SemanticTree, excluded_classes, load_descriptions, load_hierarchy, normalize_name
from ..training import TrainConfig, Trainer
from .config import ConfigError, DataSource, ExperimentConfig, Variant
from .evaluation import predict_dataset

log = logging.getLogger(__name__)


def load_aliases(path: Optional[str]) -> Optional[Dict[str, str]]:
    if path is None:
        return None
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read alias map {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: alias map must be a JSON object")
    return doc


def load_source(source: DataSource, aliases: Optional[Mapping[str, str]] = None):
    """``(DatasetIndex, {image_id: pixels})`` for a configured data source."""
    if source.shapes is not None:
        s = asdict(source.shapes)
        vocabulary = s.pop("vocabulary")
        return generate_shapes(ShapesConfig(**s), vocabulary)
    index = load_coco_json(source.annotations, aliases)
    return index, load_images(index, source.images)


def load_split(spec) -> ClassSplit:
    """A ClassSplit from an inline mapping or a JSON file path."""
    try:
        return ClassSplit.from_dict(spec) if isinstance(spec, Mapping) else ClassSplit.load(spec)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid class split {spec}: {exc}") from None


def detector_config(cfg: ExperimentConfig, variant: Variant, class_names: Sequence[str], head_type=None) -> DetectorConfig:
    m = cfg.model
    return DetectorConfig(
        mode=variant.mode,
        head_type=head_type or variant.head_type,
        class_names=tuple(class_names),
        image_size=m.image_size,
        widths=tuple(m.widths),
        embed_dim=m.embed_dim,
        roi_embed_dim=m.roi_embed_dim,
        pos_iou=m.pos_iou,
        neg_iou=m.neg_iou,
        neg_pos_ratio=m.neg_pos_ratio,
        nms_iou=m.nms_iou,
        score_threshold=m.score_threshold,
        proposal_cap=m.proposal_cap,
    )


def _train_config(cfg: ExperimentConfig, steps: int) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        steps=steps,
        batch_size=t.batch_size,
        lr=t.lr,
        disc_lr=t.disc_lr,
        momentum=t.momentum,
        weight_decay=t.weight_decay,
        grad_clip=t.grad_clip,
        seed=cfg.seed,
    )


def train_variant(
    cfg: ExperimentConfig,
    index: DatasetIndex,
    pixels,
    class_names: Sequence[str],
    log_path=None,
) -> Tuple[DetectorModel, dict]:
    """Train the configured variant on ``class_names`` annotations of ``index``.

    Returns the model (discriminators detached) and the trainer state.
    """
    variant = cfg.parsed_variant
    data = build_training_set(index, pixels, class_names, cfg.model.image_size)
    torch.manual_seed(cfg.seed)
    model = DetectorModel(detector_config(cfg, variant, class_names))
    if variant.finetune:
        model = init_from_class_aware(model, _class_aware_weights(cfg, variant, data, class_names))
    adversarial = None
    if variant.adversarial:
        a = cfg.adversarial
        adversarial = AdversarialConfig(a.alpha, a.disc_steps_per_model_step, a.foreground_only, a.hidden)
    with ExitStack() as stack:
        log_file = None
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            log_file = stack.enter_context(open(log_path, "w"))
        trainer = Trainer(
            model,
            BatchLoader(data, cfg.training.batch_size, cfg.seed),
            _train_config(cfg, cfg.training.steps),
            adversarial,
            log_file,
        )
        trainer.run()
    model.detach_discriminators()
    model.eval()
    return model, trainer.state()


def _class_aware_weights(cfg, variant: Variant, data, class_names) -> dict:
    ft = cfg.finetune
    if ft.init_checkpoint is not None:
        archive = read_checkpoint(ft.init_checkpoint)
        if archive["head_type"] != "class_aware" or archive["mode"] != variant.mode:
            raise ConfigError(f"{ft.init_checkpoint}: finetuning needs a class-aware {variant.mode} checkpoint")
        return archive["state_dict"]
    log.info("pretraining a class-aware %s model for %d steps", variant.mode, ft.pretrain_steps)
    torch.manual_seed(cfg.seed)
    aware = DetectorModel(detector_config(cfg, variant, class_names, head_type="class_aware"))
    Trainer(aware, BatchLoader(data, cfg.training.batch_size, cfg.seed), _train_config(cfg, ft.pretrain_steps)).run()
    return aware.state_dict()


def predictions_for(cfg: ExperimentConfig, model: DetectorModel, index: DatasetIndex, pixels):
    ev = cfg.evaluation
    return predict_dataset(
        model,
        index,
        pixels,
        max_detections=ev.max_detections,
        batch_size=ev.batch_size,
        proposals_only=cfg.parsed_variant.proposals,
    )


def size_curves(predictions, index: DatasetIndex, class_ids: Set[int], k_values, iou_threshold) -> Dict[str, ARCurve]:
    """Recall per size bucket at the largest k, plus the full curve as ``all``."""
    top = (max(k_values),)
    out = {"all": ar_at_k(predictions, index, k_values, iou_threshold, class_filter=class_ids)}
    for bucket in SIZE_BUCKETS:
        out[bucket] = ar_at_k(predictions, index, top, iou_threshold, class_filter=class_ids, size_filter=bucket)
    return out


def evaluate_split(
    cfg: ExperimentConfig,
    model: DetectorModel,
    split: ClassSplit,
    eval_data,
    cross_data=None,
) -> EvalReport:
    """Experiment I scoring of a trained model."""
    ev = cfg.evaluation
    index, pixels = eval_data
    _check_split(split, index.vocabulary, "eval")
    preds = predictions_for(cfg, model, index, pixels)
    vocab = index.vocabulary
    seen = ar_at_k(preds, index, ev.k_values, ev.iou_threshold, class_filter=vocab.ids(split.seen))
    unseen_ids = vocab.ids(split.unseen)
    unseen = ar_at_k(preds, index, ev.k_values, ev.iou_threshold, class_filter=unseen_ids)
    per_class = {
        name: ar_at_k(preds, index, ev.k_values, ev.iou_threshold, class_filter={vocab.index(name)})
        for name in split.unseen
    }
    if cross_data is not None:
        c_index, c_pixels = cross_data
        c_preds = predictions_for(cfg, model, c_index, c_pixels)
        absent = {i for i, n in enumerate(c_index.vocabulary.names) if n not in split.seen}
        if not absent:
            raise ConfigError("cross dataset has no classes absent from training")
        per_size = size_curves(c_preds, c_index, absent, ev.k_values, ev.iou_threshold)
    else:
        per_size = size_curves(preds, index, unseen_ids, ev.k_values, ev.iou_threshold)
    return EvalReport(seen, unseen, harmonic_mean(seen, unseen), per_class, per_size)


def _check_split(split: ClassSplit, vocabulary, where: str) -> None:
    try:
        split.check_vocabulary(vocabulary)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _training_classes(split: ClassSplit, vocabulary) -> List[str]:
    # keep dataset order so class ids stay stable
    return [n for n in vocabulary.names if n in split.seen]


def _outputs(cfg: ExperimentConfig):
    if cfg.output_dir is None:
        return None
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def train_from_config(cfg: ExperimentConfig, train_data=None) -> Tuple[DetectorModel, dict]:
    """Train the configured variant; writes ``model.pt`` and ``train_log.jsonl`` under ``output_dir``.

    Experiment I trains on the split's seen classes, experiment II on the
    whole training vocabulary.  Split/vocabulary mismatches fail before any
    training starts.
    """
    aliases = load_aliases(cfg.aliases)
    train_index, train_pixels = train_data if train_data is not None else load_source(cfg.train, aliases)
    if cfg.experiment == "I":
        split = load_split(cfg.split)
        _check_split(split, train_index.vocabulary, "train")
        class_names = _training_classes(split, train_index.vocabulary)
    else:
        class_names = list(train_index.vocabulary.names)
    out = _outputs(cfg)
    model, state = train_variant(
        cfg,
        train_index,
        train_pixels,
        class_names,
        log_path=None if out is None else out / "train_log.jsonl",
    )
    if out is not None:
        save_checkpoint(model, out / "model.pt", state["steps"], extra={"variant": cfg.variant})
    return model, state


def evaluate_from_config(cfg: ExperimentConfig, model: DetectorModel, eval_data=None) -> EvalReport:
    """Score a trained model as the configured experiment prescribes."""
    aliases = load_aliases(cfg.aliases)
    eval_data = eval_data if eval_data is not None else load_source(cfg.eval, aliases)
    if cfg.experiment == "I":
        split = load_split(cfg.split)
        cross_data = load_source(cfg.cross, aliases) if cfg.cross is not None else None
        report = evaluate_split(cfg, model, split, eval_data, cross_data)
    else:
        kept = kept_classes(hierarchy_for(cfg, aliases), _reference(cfg, model, aliases), eval_data[0].vocabulary)
        report = evaluate_exclusion(cfg, model, kept, eval_data)
    out = _outputs(cfg)
    if out is not None:
        (out / "report.json").write_text(report.to_json())
    return report


def _reference(cfg: ExperimentConfig, model: DetectorModel, aliases) -> List[str]:
    h = cfg.hierarchy
    if h is not None and h.reference is not None:
        return [normalize_name(n, aliases) for n in h.reference]
    # the classes the model was trained on
    return [normalize_name(n, aliases) for n in model.config.class_names]


def hierarchy_for(cfg: ExperimentConfig, aliases) -> SemanticTree:
    h = cfg.hierarchy
    if h is None or h.path is None:
        path = resources.resource_path(resources.SHAPES_HIERARCHY)
        desc = resources.resource_path(resources.SHAPES_DESCRIPTIONS)
    else:
        path, desc = h.path, h.descriptions
    descriptions = load_descriptions(desc) if desc is not None else None
    try:
        return load_hierarchy(path, descriptions, aliases, include_root=bool(h and h.include_root))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read hierarchy {path}: {exc}") from None


def kept_classes(tree: SemanticTree, reference, vocabulary, warnings: Optional[list] = None) -> List[str]:
    """Evaluation classes that are neither a reference class nor related to one."""
    excluded = excluded_classes(tree, reference, warnings)
    missing = [n for n in vocabulary.names if n not in tree.nodes]
    if missing:
        log.warning("evaluation classes absent from the hierarchy are kept: %s", missing)
    kept = [n for n in vocabulary.names if n not in excluded]
    if not kept:
        raise ConfigError("every evaluation class is excluded; nothing left to evaluate")
    return kept


def evaluate_exclusion(cfg: ExperimentConfig, model: DetectorModel, kept: Sequence[str], eval_data) -> EvalReport:
    """Experiment II scoring: recall on kept classes, excluded classes reported as the seen curve."""
    ev = cfg.evaluation
    index, pixels = eval_data
    vocab = index.vocabulary
    preds = predictions_for(cfg, model, index, pixels)
    kept_ids = vocab.ids(kept)
    excluded_ids = set(range(len(vocab))) - kept_ids
    unseen = ar_at_k(preds, index, ev.k_values, ev.iou_threshold, class_filter=kept_ids)
    seen = ar_at_k(preds, index, ev.k_values, ev.iou_threshold, class_filter=excluded_ids)
    per_class = {n: ar_at_k(preds, index, ev.k_values, ev.iou_threshold, class_filter={vocab.index(n)}) for n in kept}
    per_size = size_curves(preds, index, kept_ids, ev.k_values, ev.iou_threshold)
    return EvalReport(seen, unseen, harmonic_mean(seen, unseen), per_class, per_size)


def run_experiment_I(cfg: ExperimentConfig) -> EvalReport:
    if cfg.experiment != "I":
        raise ConfigError("configuration is not an experiment I document")
    aliases = load_aliases(cfg.aliases)
    split = load_split(cfg.split)
    train_data = load_source(cfg.train, aliases)
    eval_data = load_source(cfg.eval, aliases)
    _check_split(split, train_data[0].vocabulary, "train")
    _check_split(split, eval_data[0].vocabulary, "eval")
    model, _ = train_from_config(cfg, train_data)
    return evaluate_from_config(cfg, model, eval_data)


def run_experiment_II(cfg: ExperimentConfig) -> EvalReport:
    if cfg.experiment != "II":
        raise ConfigError("configuration is not an experiment II document")
    aliases = load_aliases(cfg.aliases)
    train_data = load_source(cfg.train, aliases)
    eval_data = load_source(cfg.eval, aliases)
    h = cfg.hierarchy
    reference = (
        [normalize_name(n, aliases) for n in h.reference]
        if h is not None and h.reference is not None
        else list(train_data[0].vocabulary.names)
    )
    # fail on an empty kept set before spending time on training
    kept_classes(hierarchy_for(cfg, aliases), reference, eval_data[0].vocabulary)
    model, _ = train_from_config(cfg, train_data)
    return evaluate_from_config(cfg, model, eval_data)


def run_experiment(cfg: ExperimentConfig) -> EvalReport:
    return run_experiment_I(cfg) if cfg.experiment == "I" else run_experiment_II(cfg)
