"""Seen/unseen class splits and cross-dataset class exclusion."""

from __future__ import annotations

import csv
import json
import logging
import re
import string
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set

import numpy as np

from .core import ClassVocabulary, DatasetIndex, Detection
from .metrics import _boxes_array, _iou_matrix

log = logging.getLogger(__name__)

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")
_SPACES = re.compile(r"\s+")


@dataclass
class ConfusionMatrix:
    """Counts indexed ``[true class, predicted class]``.

    ``background_miss[c]`` counts ground truths of class ``c`` no detection
    matched; ``background_fp[c]`` counts detections of class ``c`` that matched
    nothing.
    """

    classes: ClassVocabulary
    counts: np.ndarray
    background_miss: np.ndarray = None
    background_fp: np.ndarray = None

    def __post_init__(self):
        n = len(self.classes)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (n, n):
            raise ValueError(f"counts shape {self.counts.shape} does not match {n} classes")
        if self.background_miss is None:
            self.background_miss = np.zeros(n, dtype=np.int64)
        if self.background_fp is None:
            self.background_fp = np.zeros(n, dtype=np.int64)
        self.background_miss = np.asarray(self.background_miss, dtype=np.int64)
        self.background_fp = np.asarray(self.background_fp, dtype=np.int64)
        if self.background_miss.shape != (n,) or self.background_fp.shape != (n,):
            raise ValueError("background vectors must have one entry per class")
        if (self.counts < 0).any() or (self.background_miss < 0).any() or (self.background_fp < 0).any():
            raise ValueError("confusion counts must be non-negative")

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes.names),
            "counts": self.counts.tolist(),
            "background_miss": self.background_miss.tolist(),
            "background_fp": self.background_fp.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConfusionMatrix":
        try:
            return cls(
                ClassVocabulary(tuple(d["classes"])),
                np.array(d["counts"]),
                d.get("background_miss"),
                d.get("background_fp"),
            )
        except KeyError as exc:
            raise ValueError(f"confusion matrix document missing key {exc}") from None

    @classmethod
    def load(cls, path) -> "ConfusionMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ClassSplit:
    """Seen classes plus unseen classes tagged easy / medium / hard."""

    seen: frozenset
    unseen_easy: Optional[str] = None
    unseen_medium: Optional[str] = None
    unseen_hard: Optional[str] = None
    # unseen classes without a difficulty tag
    unseen_other: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "seen", frozenset(self.seen))
        object.__setattr__(self, "unseen_other", frozenset(self.unseen_other))
        tagged = [c for c in (self.unseen_easy, self.unseen_medium, self.unseen_hard) if c is not None]
        parts = list(self.seen) + tagged + list(self.unseen_other)
        if len(parts) != len(set(parts)):
            raise ValueError("class split parts overlap")

    @property
    def unseen(self) -> List[str]:
        tagged = [c for c in (self.unseen_easy, self.unseen_medium, self.unseen_hard) if c is not None]
        return tagged + sorted(self.unseen_other)

    @property
    def difficulty(self) -> Dict[str, str]:
        out = {}
        for tag, name in (("easy", self.unseen_easy), ("medium", self.unseen_medium), ("hard", self.unseen_hard)):
            if name is not None:
                out[name] = tag
        return out

    @property
    def classes(self) -> Set[str]:
        return set(self.seen) | set(self.unseen)

    def check_vocabulary(self, vocabulary: ClassVocabulary) -> None:
        missing = self.classes - set(vocabulary.names)
        if missing:
            raise ValueError(f"split classes absent from vocabulary: {sorted(missing)}")

    def to_dict(self) -> dict:
        return {
            "seen": sorted(self.seen),
            "unseen_easy": self.unseen_easy,
            "unseen_medium": self.unseen_medium,
            "unseen_hard": self.unseen_hard,
            "unseen_other": sorted(self.unseen_other),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassSplit":
        return cls(
            seen=frozenset(d["seen"]),
            unseen_easy=d.get("unseen_easy"),
            unseen_medium=d.get("unseen_medium"),
            unseen_hard=d.get("unseen_hard"),
            unseen_other=frozenset(d.get("unseen_other", ())),
        )

    @classmethod
    def load(cls, path) -> "ClassSplit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def f1_scores(cm: ConfusionMatrix, use_background: bool = True) -> Dict[str, float]:
    """Per-class F1 from a confusion matrix.

    With ``use_background`` the background miss / false-positive vectors
    enter the recall / precision denominators.
    """
    diag = np.diag(cm.counts).astype(np.float64)
    pred_totals = cm.counts.sum(axis=0).astype(np.float64)
    true_totals = cm.counts.sum(axis=1).astype(np.float64)
    if use_background:
        pred_totals = pred_totals + cm.background_fp
        true_totals = true_totals + cm.background_miss
    out = {}
    for i, name in enumerate(cm.classes.names):
        p = diag[i] / pred_totals[i] if pred_totals[i] > 0 else 0.0
        r = diag[i] / true_totals[i] if true_totals[i] > 0 else 0.0
        out[name] = 0.0 if p + r == 0 else float(2 * p * r / (p + r))
    return out


def select_unseen(f1: Mapping[str, float]) -> ClassSplit:
    """Pick easy (lowest F1), medium (lower median) and hard (highest F1) classes.

    Ties in F1 are broken alphabetically.
    """
    if len(f1) < 3:
        raise ValueError("need at least three classes to select unseen classes")
    if not all(np.isfinite(v) for v in f1.values()):
        raise ValueError("F1 scores must be finite")
    ranked = sorted(f1, key=lambda c: (f1[c], c))
    easy, hard = ranked[0], ranked[-1]
    medium = ranked[(len(ranked) - 1) // 2]
    seen = frozenset(ranked) - {easy, medium, hard}
    return ClassSplit(seen=seen, unseen_easy=easy, unseen_medium=medium, unseen_hard=hard)


def build_confusion_matrix(
    predictions: Mapping[int, Sequence[Detection]],
    truths: DatasetIndex,
    iou_threshold: float = 0.5,
    score_threshold: float = 0.3,
) -> ConfusionMatrix:
    """Confusion matrix of a class-aware detector over a dataset.

    Pairs with IoU >= threshold are matched one-to-one, highest IoU first.
    Matched pairs land in ``counts``; leftovers land in the background vectors.
    """
    n = len(truths.vocabulary)
    counts = np.zeros((n, n), dtype=np.int64)
    miss = np.zeros(n, dtype=np.int64)
    fp = np.zeros(n, dtype=np.int64)
    for image_id, anns in sorted(truths.annotations_by_image().items()):
        anns = [a for a in anns if not a.is_crowd]
        dets = [d for d in predictions.get(image_id, ()) if d.score > score_threshold]
        if any(d.class_id is None for d in dets):
            raise ValueError("confusion matrix needs class-aware detections")
        ious = _iou_matrix(_boxes_array(a.box for a in anns), _boxes_array(d.box for d in dets))
        gt_idx, det_idx = np.nonzero(ious >= iou_threshold)
        order = np.argsort(-ious[gt_idx, det_idx], kind="stable")
        used_gt, used_det = set(), set()
        pairs = {}
        for o in order:
            g, d = int(gt_idx[o]), int(det_idx[o])
            if g in used_gt or d in used_det:
                continue
            used_gt.add(g)
            used_det.add(d)
            pairs[g] = d
        for g, ann in enumerate(anns):
            if g in pairs:
                counts[ann.class_id, dets[pairs[g]].class_id] += 1
            else:
                miss[ann.class_id] += 1
        for d, det in enumerate(dets):
            if d not in used_det:
                fp[det.class_id] += 1
    return ConfusionMatrix(truths.vocabulary, counts, miss, fp)


def normalize_name(raw: str, aliases: Optional[Mapping[str, str]] = None) -> str:
    name = _PUNCT.sub("", raw.lower())
    name = _SPACES.sub(" ", name).strip()
    if aliases:
        lookup = {_SPACES.sub(" ", _PUNCT.sub("", k.lower())).strip(): v for k, v in aliases.items()}
        name = lookup.get(name, name)
    return name


@dataclass
class SemanticTree:
    """Class hierarchy as a DAG: ``parents[child]`` is the set of its parents."""

    nodes: Set[str] = field(default_factory=set)
    parents: Dict[str, Set[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = set(self.nodes)
        self.parents = {c: set(p) for c, p in self.parents.items()}
        for child, ps in self.parents.items():
            self.nodes.add(child)
            self.nodes.update(ps)
        if self._has_cycle():
            raise ValueError("semantic hierarchy contains a cycle")

    def add_edge(self, parent: str, child: str) -> None:
        self.nodes.update((parent, child))
        self.parents.setdefault(child, set()).add(parent)

    def children(self) -> Dict[str, Set[str]]:
        out = defaultdict(set)
        for child, ps in self.parents.items():
            for p in ps:
                out[p].add(child)
        return out

    def ancestors(self, node: str) -> Set[str]:
        return _reach(node, self.parents)

    def descendants(self, node: str) -> Set[str]:
        return _reach(node, self.children())

    def _has_cycle(self) -> bool:
        state = {}
        for start in self.nodes:
            if start in state:
                continue
            stack = [(start, iter(self.parents.get(start, ())))]
            state[start] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node] = 2
                    stack.pop()
                elif state.get(nxt) == 1:
                    return True
                elif nxt not in state:
                    state[nxt] = 1
                    stack.append((nxt, iter(self.parents.get(nxt, ()))))
        return False


def _reach(start: str, edges: Mapping[str, Iterable[str]]) -> Set[str]:
    seen: Set[str] = set()
    stack = list(edges.get(start, ()))
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        stack.extend(edges.get(node, ()))
    return seen


def excluded_classes(
    tree: SemanticTree,
    reference: Iterable[str],
    warnings: Optional[List[str]] = None,
) -> Set[str]:
    """Tree nodes that match, descend from, or are ancestors of a reference class.

    Reference classes missing from the tree are reported through ``warnings``
    (and the log) instead of raising.
    """
    excluded: Set[str] = set()
    children = tree.children()
    for ref in reference:
        if ref not in tree.nodes:
            msg = f"reference class {ref!r} not found in hierarchy"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        excluded.add(ref)
        excluded |= _reach(ref, tree.parents)
        excluded |= _reach(ref, children)
    return excluded


def load_hierarchy(
    path,
    descriptions: Optional[Mapping[str, str]] = None,
    aliases: Optional[Mapping[str, str]] = None,
    include_root: bool = False,
) -> SemanticTree:
    """Parse an Open Images style hierarchy (nested ``Subcategory`` lists).

    ``descriptions`` maps label ids (e.g. ``/m/0bl9f``) to display names; ids
    without a description are used verbatim.  Names are normalized.
    """
    doc = json.loads(Path(path).read_text())
    descriptions = descriptions or {}

    def name_of(label: str) -> str:
        return normalize_name(descriptions.get(label, label), aliases)

    tree = SemanticTree()
    root = doc.get("LabelName")
    if root is None:
        raise ValueError("hierarchy root lacks LabelName")
    stack = [doc]
    while stack:
        entry = stack.pop()
        parent = name_of(entry["LabelName"])
        is_root = entry is doc
        if not is_root or include_root:
            tree.nodes.add(parent)
        for sub in entry.get("Subcategory", ()):
            child = name_of(sub["LabelName"])
            if is_root and not include_root:
                tree.nodes.add(child)
            else:
                tree.add_edge(parent, child)
            stack.append(sub)
    if tree._has_cycle():
        raise ValueError("semantic hierarchy contains a cycle")
    return tree


def load_descriptions(path) -> Dict[str, str]:
    """Read an Open Images class-descriptions CSV (``label_id,display name``)."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if len(row) >= 2:
                out[row[0]] = row[1]
    return out
