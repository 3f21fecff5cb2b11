"""Adversarial object-type discriminators for class-agnostic detectors.

A discriminator per attachment point tries to predict the annotated object
type from the embeddings the detector heads consume.  Training alternates:
the discriminators minimise cross-entropy on object types while the
detector minimises its own loss plus ``alpha`` times the negative entropy
of the (frozen) discriminator predictions, pushing type information out of
its embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

UPDATE_DISCRIMINATOR = "update_discriminator"
UPDATE_MODEL = "update_model"


@dataclass
class AdversarialConfig:
    alpha: float = 1.0
    # 0 disables discriminator updates entirely
    disc_steps_per_model_step: int = 5
    foreground_only: bool = True
    hidden: int = 128

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.disc_steps_per_model_step < 0:
            raise ValueError("disc_steps_per_model_step must be >= 0")


class ObjectTypeDiscriminator(nn.Sequential):
    def __init__(self, in_features: int, num_classes: int, hidden: int = 128):
        super().__init__(
            nn.Linear(in_features, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, num_classes),
        )
        self.num_classes = num_classes


class Discriminators(nn.ModuleList):
    """One discriminator per attachment point of a detector."""

    @classmethod
    def for_model(cls, model, hidden: int = 128) -> "Discriminators":
        cfg = model.config
        points = 1 if cfg.mode == "two_stage" else len(cfg.levels)
        return cls(ObjectTypeDiscriminator(model.embedding_dim, cfg.num_classes, hidden) for _ in range(points))

    def logits(self, points: Sequence[Tuple[torch.Tensor, torch.Tensor]]) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        return [(disc(emb), labels) for disc, (emb, labels) in zip(self, points)]


def discriminator_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy of object-type predictions.

    Returns a zero tensor when there are no labelled rows.
    """
    mask = labels >= 0
    if not bool(mask.any()):
        return logits.sum() * 0.0
    return F.cross_entropy(logits[mask], labels[mask])


def entropy_penalty(logits: torch.Tensor) -> torch.Tensor:
    """Negative Shannon entropy of the softmax, averaged over rows; in [-ln C, 0]."""
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    logp = F.log_softmax(logits, dim=-1)
    return (logp.exp() * logp).sum(dim=-1).mean()


def multi_point_discriminator_loss(outputs: Sequence[Tuple[torch.Tensor, torch.Tensor]]) -> Tuple[torch.Tensor, int]:
    """Equal-weight mean over attachment points that have labelled rows."""
    terms = [discriminator_loss(lg, lb) for lg, lb in outputs if bool((lb >= 0).any())]
    if not terms:
        zero = sum(lg.sum() for lg, _ in outputs) * 0.0
        return zero, 0
    return sum(terms) / len(terms), len(terms)


def multi_point_entropy(outputs: Sequence[Tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    terms = [entropy_penalty(lg) for lg, _ in outputs if lg.shape[0] > 0]
    if not terms:
        return sum(lg.sum() for lg, _ in outputs) * 0.0
    return sum(terms) / len(terms)


def model_loss(
    detection_losses: Dict[str, torch.Tensor],
    disc_outputs: Sequence[Tuple[torch.Tensor, torch.Tensor]],
    alpha: float,
) -> Dict[str, torch.Tensor]:
    """Detection terms plus ``alpha`` times the entropy penalty.

    The breakdown keeps every detection term, adds ``entropy`` and replaces
    ``total``.
    """
    out = {k: v for k, v in detection_losses.items() if k != "total"}
    out["entropy"] = multi_point_entropy(disc_outputs)
    out["total"] = detection_losses["total"] + alpha * out["entropy"]
    return out


def train_step_schedule(step: int, disc_steps_per_model_step: int = 5) -> str:
    """Action for 1-based global ``step``: ``r`` discriminator updates, then one model update."""
    if step < 1:
        raise ValueError("steps are 1-based")
    r = disc_steps_per_model_step
    if r == 0:
        return UPDATE_MODEL
    return UPDATE_DISCRIMINATOR if (step - 1) % (r + 1) < r else UPDATE_MODEL


def probe_accuracy(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    test_fraction: float = 0.3,
) -> float:
    """Held-out accuracy of a logistic-regression type probe on frozen embeddings."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    x_tr, x_te, y_tr, y_te = train_test_split(
        features, labels, test_size=test_fraction, random_state=seed, stratify=labels
    )
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    probe.fit(x_tr, y_tr)
    return float(probe.score(x_te, y_te))


def max_entropy(num_classes: int) -> float:
    return math.log(num_classes)
