"""Single-driver training loop for plain and adversarial detectors."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import IO, Dict, Iterator, List, Optional

import torch

from .adversarial import (
    UPDATE_DISCRIMINATOR,
    UPDATE_MODEL,
    AdversarialConfig,
    Discriminators,
    model_loss,
    multi_point_discriminator_loss,
    train_step_schedule,
)
from .data.loader import Batch
from .detector.losses import attachment_points, detection_loss, training_forward
from .detector.model import DetectorModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 0.02
    disc_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    seed: int = 0


class Trainer:
    """Owns the model (and discriminators, when adversarial) while training.

    Each global step consumes one batch and performs exactly one action:
    a discriminator update or a model update, following
    :func:`train_step_schedule`.  Without an :class:`AdversarialConfig`
    every step is a plain model update.
    """

    def __init__(
        self,
        model: DetectorModel,
        batches: Iterator[Batch],
        config: TrainConfig,
        adversarial: Optional[AdversarialConfig] = None,
        log_file: Optional[IO[str]] = None,
    ):
        self.model = model
        self.batches = batches
        self.config = config
        self.adversarial = adversarial
        self.log_file = log_file
        self.step_count = 0
        self.model_updates = 0
        self.disc_updates = 0
        self.disc_skipped = 0
        self.generator = torch.Generator().manual_seed(config.seed)
        self.opt = torch.optim.SGD(
            list(model.detector_parameters()),
            lr=config.lr,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        self.discriminators = None
        self.disc_opt = None
        if adversarial is not None:
            # separate RNG stream so discriminator init leaves the global stream untouched
            with torch.random.fork_rng():
                torch.manual_seed(config.seed + 7919)
                disc = Discriminators.for_model(model, adversarial.hidden)
            disc.to(dtype=model.anchors.dtype)
            model.attach_discriminators(disc)
            self.discriminators = disc
            self.disc_opt = torch.optim.SGD(disc.parameters(), lr=config.disc_lr, momentum=config.momentum)

    def next_action(self) -> str:
        if self.adversarial is None:
            return UPDATE_MODEL
        return train_step_schedule(self.step_count + 1, self.adversarial.disc_steps_per_model_step)

    def step(self) -> Dict:
        batch = next(self.batches)
        action = self.next_action()
        self.model.train()
        if action == UPDATE_DISCRIMINATOR:
            record = self._discriminator_step(batch)
        else:
            record = self._model_step(batch)
        self.step_count += 1
        record = {"step": self.step_count, "action": action, **record}
        if self.log_file is not None:
            self.log_file.write(json.dumps(record) + "\n")
        return record

    def run(self, steps: Optional[int] = None) -> List[Dict]:
        steps = self.config.steps if steps is None else steps
        return [self.step() for _ in range(steps)]

    def _model_step(self, batch: Batch) -> Dict:
        out, targets = training_forward(self.model, batch.images.to(self.model.anchors.dtype), batch.truths, self.generator)
        losses = detection_loss(self.model, out, targets)
        if self.discriminators is not None:
            for p in self.discriminators.parameters():
                p.requires_grad_(False)
            try:
                points = attachment_points(out, targets, self.adversarial.foreground_only)
                if self.adversarial.alpha == 0:
                    # a zero-weight penalty is only logged; keeping it out of the graph makes the
                    # update exactly the plain one (an all-zero gradient branch still perturbs the
                    # rounding of the convolution backward through its memory layout)
                    points = [(emb.detach(), labels) for emb, labels in points]
                losses = model_loss(losses, self.discriminators.logits(points), self.adversarial.alpha)
            finally:
                for p in self.discriminators.parameters():
                    p.requires_grad_(True)
        self.opt.zero_grad(set_to_none=True)
        losses["total"].backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(list(self.model.detector_parameters()), self.config.grad_clip)
        self.opt.step()
        self.model_updates += 1
        return {"losses": {k: float(v.detach()) for k, v in losses.items()}}

    def _discriminator_step(self, batch: Batch) -> Dict:
        with torch.no_grad():
            out, targets = training_forward(
                self.model, batch.images.to(self.model.anchors.dtype), batch.truths, self.generator
            )
            points = attachment_points(out, targets, foreground_only=True)
        loss, used = multi_point_discriminator_loss(self.discriminators.logits(points))
        if used == 0:
            self.disc_skipped += 1
            return {"losses": {"discriminator": 0.0}, "skipped": True}
        self.disc_opt.zero_grad(set_to_none=True)
        loss.backward()
        self.disc_opt.step()
        self.disc_updates += 1
        return {"losses": {"discriminator": float(loss.detach())}}

    def state(self) -> Dict:
        return {
            "steps": self.step_count,
            "model_updates": self.model_updates,
            "disc_updates": self.disc_updates,
            "disc_skipped": self.disc_skipped,
            "config": asdict(self.config),
            "adversarial": None if self.adversarial is None else asdict(self.adversarial),
        }
