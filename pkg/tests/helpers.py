"""Small constructors shared by the test modules."""

from cadet.core import Annotation, BoundingBox, ClassVocabulary, DatasetIndex, Detection, ImageRecord


def make_index(boxes_per_image, classes=("a", "b", "c")):
    """DatasetIndex from ``{image_id: [(class_id, (x0, y0, x1, y1)), ...]}``."""
    vocab = ClassVocabulary(classes)
    images = [ImageRecord(i, 100, 100) for i in sorted(boxes_per_image)]
    anns = [Annotation(BoundingBox(*box), c, i) for i, objs in boxes_per_image.items() for c, box in objs]
    return DatasetIndex(images, anns, vocab)


def det(box, score, image_id=1, class_id=None):
    return Detection(BoundingBox(*box), score, image_id, class_id)


def random_box(rng, extent=100, integer=True):
    if integer:
        x0, y0 = rng.integers(0, extent - 2, size=2)
        w, h = rng.integers(1, extent // 2, size=2)
    else:
        x0, y0 = rng.uniform(0, extent - 2, size=2)
        w, h = rng.uniform(0.5, extent / 2, size=2)
    return (float(x0), float(y0), float(min(x0 + w, extent)), float(min(y0 + h, extent)))


def central_differences(loss_fn, params, rng, num_coords=24, step=1e-3, min_grad=1e-6):
    """Autograd and central finite-difference gradients on sampled coordinates.

    ``loss_fn()`` must rebuild the scalar loss from the current parameter
    values.  Coordinates are sampled among those whose analytic gradient
    exceeds ``min_grad`` in magnitude.  Returns two float arrays
    ``(analytic, numeric)``.
    """
    import numpy as np
    import torch

    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    candidates = []
    for pi, p in enumerate(params):
        flat = p.grad.reshape(-1)
        for j in torch.nonzero(flat.abs() > min_grad).flatten().tolist():
            candidates.append((pi, j))
    if not candidates:
        raise AssertionError("no coordinate carries gradient")
    picks = rng.choice(len(candidates), size=min(num_coords, len(candidates)), replace=False)
    analytic, numeric = [], []
    with torch.no_grad():
        for c in picks:
            pi, j = candidates[c]
            flat = params[pi].data.reshape(-1)
            original = flat[j].item()
            flat[j] = original + step
            up = loss_fn().item()
            flat[j] = original - step
            down = loss_fn().item()
            flat[j] = original
            analytic.append(params[pi].grad.reshape(-1)[j].item())
            numeric.append((up - down) / (2 * step))
    return np.array(analytic), np.array(numeric)


def relative_error(analytic, numeric):
    """Norm-wise relative error of a sampled gradient vector."""
    import numpy as np

    return float(np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))


def max_pointwise_error(analytic, numeric):
    import numpy as np

    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic), np.abs(numeric))))


MINI_CLASSES = ["circle", "square", "triangle", "cross", "ring"]


def mini_experiment(variant="SSD-ag", out_dir=None, **overrides):
    """Experiment I document on 64px shapes that trains in seconds."""
    shapes = dict(classes=MINI_CLASSES, image_size=64, min_size=10, max_size=30, max_objects=3)
    doc = {
        "experiment": "I",
        "variant": variant,
        "seed": 0,
        "train": {"shapes": dict(shapes, num_images=24, seed=5)},
        "eval": {"shapes": dict(shapes, num_images=12, seed=6, first_image_id=1000)},
        "split": {"seen": MINI_CLASSES[:3], "unseen_easy": "cross", "unseen_medium": "ring"},
        "model": {"image_size": 64, "widths": [8, 8, 8, 8, 8], "embed_dim": 8, "roi_embed_dim": 16, "proposal_cap": 100},
        "training": {"steps": 20, "batch_size": 4},
        "finetune": {"pretrain_steps": 20},
        "evaluation": {"k_values": [1, 10, 100], "max_detections": 100},
        "output_dir": None if out_dir is None else str(out_dir),
    }
    doc.update(overrides)
    return doc
