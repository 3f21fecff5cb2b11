"""Experiment configuration documents and detector variant names.

A configuration is one JSON or YAML document.  Every key is declared on the
dataclasses below together with its documentation (see
:func:`config_reference`); unknown keys are rejected with the full key path.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Mapping, Optional, Tuple

import yaml

from ..metrics import DEFAULT_K


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _doc(text: str, **kw):
    return field(metadata={"doc": text}, **kw)


# variants

FAMILIES = {"SSD": "one_stage", "FRCNN": "two_stage"}
_SUFFIXES = ("aw", "ag", "ft-ag", "ag-ad", "ft-ag-ad")


@dataclass(frozen=True)
class Variant:
    """A detector row of the results table, e.g. ``SSD-ft-ag-ad``."""

    name: str
    mode: str
    head_type: str
    finetune: bool = False
    adversarial: bool = False
    proposals: bool = False

    @classmethod
    def parse(cls, name: str) -> "Variant":
        m = re.fullmatch(r"(SSD|FRCNN)-(.+)", name)
        if not m:
            raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(all_variants())}")
        family, rest = m.groups()
        mode = FAMILIES[family]
        if rest == "aw-prop":
            if family != "FRCNN":
                raise ConfigError("proposal-only evaluation needs a two-stage (FRCNN) variant")
            return cls(name, mode, "class_aware", proposals=True)
        if rest not in _SUFFIXES:
            raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(all_variants())}")
        return cls(
            name,
            mode,
            "class_aware" if rest == "aw" else "class_agnostic",
            finetune=rest.startswith("ft-"),
            adversarial=rest.endswith("-ad"),
        )


def all_variants() -> List[str]:
    names = []
    for family in FAMILIES:
        names.extend(f"{family}-{s}" for s in _SUFFIXES)
        if family == "FRCNN":
            names.append("FRCNN-aw-prop")
    return names


# document sections


@dataclass
class ShapesSource:
    num_images: int = _doc("number of images to generate", default=100)
    seed: int = _doc("generator seed", default=0)
    classes: List[str] = _doc(
        "shape classes drawn in the images", default_factory=lambda: ["circle", "square", "triangle", "cross", "ring"]
    )
    vocabulary: Optional[List[str]] = _doc(
        "class-id order of the generated dataset (defaults to `classes`)", default=None
    )
    image_size: int = _doc("image side length in pixels", default=128)
    min_objects: int = _doc("fewest objects per image", default=1)
    max_objects: int = _doc("most objects per image", default=4)
    min_size: int = _doc("smallest object size in pixels", default=14)
    max_size: int = _doc("largest object size in pixels", default=56)
    clutter: int = _doc("thin non-object strokes drawn per image", default=0)
    single_class_prob: float = _doc("probability that all objects of an image share one class", default=0.5)
    first_image_id: int = _doc("id of the first generated image", default=1)


@dataclass
class DataSource:
    annotations: Optional[str] = _doc("COCO-format annotation JSON", default=None)
    images: Optional[str] = _doc("directory holding the image files named in the annotations", default=None)
    shapes: Optional[ShapesSource] = _doc("generate a synthetic shapes dataset instead of reading files", default=None)

    def validate(self, where: str):
        if (self.shapes is None) == (self.annotations is None):
            raise ConfigError(f"{where}: give exactly one of `annotations` or `shapes`")
        if self.annotations is not None and self.images is None:
            raise ConfigError(f"{where}: `images` is required with `annotations`")


@dataclass
class HierarchySource:
    path: Optional[str] = _doc("Open Images style hierarchy JSON (bundled shapes hierarchy when omitted)", default=None)
    descriptions: Optional[str] = _doc("CSV mapping hierarchy label ids to display names", default=None)
    reference: Optional[List[str]] = _doc(
        "training-dataset classes to exclude (defaults to the training vocabulary)", default=None
    )
    include_root: bool = _doc("keep the hierarchy root as a class node", default=False)


@dataclass
class ModelSection:
    image_size: int = _doc("network input size; images are resized to it", default=128)
    widths: List[int] = _doc("backbone channel widths: two stem entries plus one per level", default_factory=lambda: [16, 32, 48, 64, 64])
    embed_dim: int = _doc("width of the per-cell embeddings feeding the heads", default=64)
    roi_embed_dim: int = _doc("width of the two-stage region embedding", default=128)
    pos_iou: float = _doc("anchor IoU at or above which an anchor is foreground", default=0.5)
    neg_iou: float = _doc("anchor IoU below which an anchor is background", default=0.4)
    neg_pos_ratio: Optional[float] = _doc("hard negatives kept per positive (null keeps all)", default=3.0)
    nms_iou: float = _doc("class-agnostic NMS threshold at inference", default=0.5)
    score_threshold: float = _doc("minimum detection score at inference", default=0.0)
    proposal_cap: int = _doc("proposals kept per image in two-stage mode", default=1000)


@dataclass
class TrainingSection:
    steps: int = _doc("global training steps (each consumes one batch)", default=1000)
    batch_size: int = _doc("images per batch", default=16)
    lr: float = _doc("detector learning rate (SGD with momentum)", default=0.02)
    disc_lr: float = _doc("discriminator learning rate", default=0.02)
    momentum: float = _doc("SGD momentum for both optimizers", default=0.9)
    weight_decay: float = _doc("detector weight decay", default=1e-4)
    grad_clip: float = _doc("gradient-norm clip for detector updates (0 disables)", default=10.0)


@dataclass
class AdversarialSection:
    alpha: float = _doc("weight of the negative-entropy penalty", default=1.0)
    disc_steps_per_model_step: int = _doc("discriminator updates before each model update", default=5)
    foreground_only: bool = _doc("apply the entropy penalty to foreground embeddings only", default=True)
    hidden: int = _doc("discriminator hidden width", default=128)


@dataclass
class FinetuneSection:
    init_checkpoint: Optional[str] = _doc(
        "class-aware checkpoint for -ft- variants; a class-aware model is pretrained when omitted", default=None
    )
    pretrain_steps: int = _doc("steps of class-aware pretraining when no checkpoint is given", default=1000)


@dataclass
class EvaluationSection:
    k_values: List[int] = _doc("AR@k grid", default_factory=lambda: list(DEFAULT_K))
    iou_threshold: float = _doc("IoU needed for a detection to recall a ground truth", default=0.5)
    max_detections: int = _doc("detections kept per image (should cover the largest k)", default=1000)
    batch_size: int = _doc("images per inference batch", default=32)


@dataclass
class ExperimentConfig:
    experiment: str = _doc("`I` (seen/unseen split) or `II` (hierarchy exclusion)", default="I")
    variant: str = _doc("detector variant, e.g. SSD-ag-ad or FRCNN-aw-prop", default="SSD-ag")
    seed: int = _doc("seed for initialization, batch order and sampling", default=0)
    train: DataSource = _doc("training dataset", default_factory=DataSource)
    eval: DataSource = _doc("evaluation dataset", default_factory=DataSource)
    cross: Optional[DataSource] = _doc(
        "experiment I only: second dataset scored on classes absent from training", default=None
    )
    split: Optional[Any] = _doc("experiment I: ClassSplit JSON path or inline mapping", default=None)
    hierarchy: Optional[HierarchySource] = _doc("experiment II: hierarchy used for class exclusion", default=None)
    aliases: Optional[str] = _doc("JSON alias map applied to class names on ingestion and in the hierarchy", default=None)
    model: ModelSection = _doc("detector architecture settings", default_factory=ModelSection)
    training: TrainingSection = _doc("optimizer and schedule", default_factory=TrainingSection)
    adversarial: AdversarialSection = _doc("adversarial settings (used by -ad variants)", default_factory=AdversarialSection)
    finetune: FinetuneSection = _doc("initialization of -ft- variants", default_factory=FinetuneSection)
    evaluation: EvaluationSection = _doc("metric settings", default_factory=EvaluationSection)
    output_dir: Optional[str] = _doc("where checkpoints, logs and reports are written", default=None)

    @property
    def parsed_variant(self) -> Variant:
        return Variant.parse(self.variant)

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in ("I", "II"):
            raise ConfigError(f"experiment must be 'I' or 'II', got {self.experiment!r}")
        self.parsed_variant
        self.train.validate("train")
        self.eval.validate("eval")
        if self.cross is not None:
            if self.experiment != "I":
                raise ConfigError("cross: only experiment I evaluates a second dataset")
            self.cross.validate("cross")
        if self.experiment == "I" and self.split is None:
            raise ConfigError("experiment I needs a `split`")
        if self.training.steps < 0 or self.training.batch_size < 1:
            raise ConfigError("training.steps must be >= 0 and training.batch_size >= 1")
        k = self.evaluation.k_values
        if not k or list(k) != sorted(set(k)) or k[0] < 1:
            raise ConfigError("evaluation.k_values must be strictly ascending positive integers")
        if self.adversarial.alpha < 0 or self.adversarial.disc_steps_per_model_step < 0:
            raise ConfigError("adversarial.alpha and disc_steps_per_model_step must be non-negative")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {
    "train": DataSource,
    "eval": DataSource,
    "cross": DataSource,
    "shapes": ShapesSource,
    "hierarchy": HierarchySource,
    "model": ModelSection,
    "training": TrainingSection,
    "adversarial": AdversarialSection,
    "finetune": FinetuneSection,
    "evaluation": EvaluationSection,
}


def _build(cls, doc: Any, where: str):
    if doc is None:
        return None
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        path = ", ".join(f"{where}.{k}" if where else k for k in unknown)
        raise ConfigError(f"unknown configuration key(s): {path}")
    kwargs = {}
    for key, value in doc.items():
        path = f"{where}.{key}" if where else key
        kwargs[key] = _build(_NESTED[key], value, path) if key in _NESTED else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(doc: Mapping) -> ExperimentConfig:
    return _build(ExperimentConfig, doc, "").validate()


def load_config(path) -> ExperimentConfig:
    """Read a JSON (``.json``) or YAML document; relative paths stay relative to the caller."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc or {})


def config_reference() -> str:
    """Markdown list of every configuration key with its default and documentation."""
    lines: List[str] = []

    def walk(cls, prefix: str, seen: Tuple[type, ...]):
        for f in dataclasses.fields(cls):
            key = f"{prefix}{f.name}"
            if f.default is not dataclasses.MISSING:
                default = f.default
            elif f.default_factory is not dataclasses.MISSING:
                default = f.default_factory()
            else:
                default = None
            nested = _NESTED.get(f.name)
            if nested is not None and dataclasses.is_dataclass(default):
                default = "{...}"
            lines.append(f"- `{key}` (default `{json.dumps(default) if default != '{...}' else default}`): {f.metadata['doc']}")
            if nested is not None and nested not in seen:
                walk(nested, key + ".", seen + (nested,))

    walk(ExperimentConfig, "", ())
    return "\n".join(lines)
