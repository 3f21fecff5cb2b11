"""Self-describing checkpoint archives.

A checkpoint is a single ``torch.save`` file holding everything needed to
rebuild the detector without outside configuration: the full
:class:`DetectorConfig` (so head type, mode and anchor layout travel with
the weights), the weights themselves and the training step count.
Discriminator weights are left out unless explicitly requested, so the
stored inference graph is the plain detector.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple

import torch

from .model import DetectorConfig, DetectorModel

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of this format."""


def save_checkpoint(
    model: DetectorModel,
    path,
    step: int = 0,
    include_discriminators: bool = False,
    extra: Optional[dict] = None,
) -> None:
    state = {k: v.detach().clone() for k, v in model.state_dict().items() if not k.startswith("discriminators.")}
    cfg = model.config
    archive = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "head_type": cfg.head_type,
        "mode": cfg.mode,
        "anchors": {"levels": [l.to_dict() for l in cfg.levels], "image_size": cfg.image_size},
        "step": int(step),
        "state_dict": state,
        "discriminators": None,
        "extra": dict(extra or {}),
    }
    if include_discriminators and model.discriminators is not None:
        archive["discriminators"] = {k: v.detach().clone() for k, v in model.discriminators.state_dict().items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(archive, path)


def read_checkpoint(path) -> dict:
    try:
        archive = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist") from None
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(archive, dict) or archive.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: not a version-{FORMAT_VERSION} detector checkpoint")
    return archive


def load_checkpoint(path) -> Tuple[DetectorModel, dict]:
    """Rebuild the model; returns ``(model, archive)`` with the model in eval mode."""
    archive = read_checkpoint(path)
    config = DetectorConfig.from_dict(archive["config"])
    model = DetectorModel(config)
    state = archive["state_dict"]
    if state["anchors"].dtype != model.anchors.dtype:
        model = model.to(state["anchors"].dtype)
    model.load_state_dict(state)
    model.eval()
    return model, archive
