"""Downstream utility of detections: crop by predicted boxes, classify the crops.

The classifier is pluggable.  :class:`IoUOracleClassifier` is a synthetic
stand-in that is right exactly when the crop overlaps the annotated object
well enough; :class:`SocketClassifier` forwards crops to an external
process speaking newline-delimited JSON, so heavyweight image classifiers
stay outside this package.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import socket
import socketserver
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Protocol, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import BoundingBox, DatasetIndex, Detection, clip_box, iou
from .metrics import DEFAULT_M, DownstreamReport, accuracy_at_m, best_overlap_select, sort_detections

log = logging.getLogger(__name__)

MIN_CROP_SIDE = 8


@dataclass(frozen=True)
class CropSpec:
    image_id: int
    rank: int
    box: BoundingBox
    padding: float = 0.0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("crop ranks start at 1")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")


@dataclass(frozen=True)
class Crop:
    spec: CropSpec
    pixels: np.ndarray  # uint8 [h, w, 3]


def pad_box(box: BoundingBox, padding: float, width: float, height: float) -> BoundingBox:
    """Grow ``box`` by ``padding`` times its size on every side, then clip to the image."""
    dx, dy = padding * box.width, padding * box.height
    grown = BoundingBox(box.x_min - dx, box.y_min - dy, box.x_max + dx, box.y_max + dy)
    return clip_box(grown, width, height)


def crop_pixels(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Pixels covered by ``box`` (outward-rounded), upscaled when smaller than 8x8."""
    h, w = image.shape[:2]
    x0 = min(max(int(math.floor(box.x_min)), 0), w - 1)
    y0 = min(max(int(math.floor(box.y_min)), 0), h - 1)
    x1 = max(min(int(math.ceil(box.x_max)), w), x0 + 1)
    y1 = max(min(int(math.ceil(box.y_max)), h), y0 + 1)
    out = np.ascontiguousarray(image[y0:y1, x0:x1])
    ch, cw = out.shape[:2]
    if ch < MIN_CROP_SIDE or cw < MIN_CROP_SIDE:
        size = (max(cw, MIN_CROP_SIDE), max(ch, MIN_CROP_SIDE))
        out = np.asarray(Image.fromarray(out).resize(size, Image.BILINEAR))
    return out


def make_crops(detections: Sequence[Detection], image: np.ndarray, m: int, padding: float = 0.0) -> List[Crop]:
    """Crops for the top-``m`` detections, ranked from 1 by descending score."""
    if m < 1:
        raise ValueError("m must be at least 1")
    h, w = image.shape[:2]
    crops = []
    for rank, det in enumerate(sort_detections(detections)[:m], start=1):
        box = pad_box(clip_box(det.box, w, h), padding, w, h)
        crops.append(Crop(CropSpec(det.image_id, rank, box, padding), crop_pixels(image, box)))
    return crops


# classifiers


class ClassifierClient(Protocol):
    def classify(self, crop: Crop) -> Tuple[str, float]:
        """Return ``(label, confidence)`` for one crop."""


class ClassifierUnavailable(RuntimeError):
    """The classifier could not be reached after all retries."""


class IoUOracleClassifier:
    """Names the best-overlapping annotated object when its IoU with the crop box reaches the threshold.

    ``truths`` maps image id to a list of ``(label, truth box)`` (see
    :func:`image_truths`).  Misses return ``miss_label``, which never equals
    a real class name.
    """

    miss_label = "<miss>"

    def __init__(self, truths: Mapping[int, Sequence[Tuple[str, BoundingBox]]], iou_threshold: float = 0.5):
        self.truths = {k: list(v) for k, v in truths.items()}
        self.iou_threshold = iou_threshold

    def classify(self, crop: Crop) -> Tuple[str, float]:
        best_label, best = self.miss_label, 0.0
        for label, box in self.truths.get(crop.spec.image_id, ()):
            overlap = iou(crop.spec.box, box)
            if overlap > best:
                best_label, best = label, overlap
        if best >= self.iou_threshold:
            return best_label, best
        return self.miss_label, 1.0 - best


def encode_png(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("RGB"))


def parse_address(address: str) -> Tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"classifier address must be HOST:PORT, got {address!r}")
    return host or "127.0.0.1", int(port)


class SocketClassifier:
    """Client for the newline-delimited JSON classifier protocol.

    Request: ``{"id": ..., "image": <base64 PNG>}``; response:
    ``{"id": ..., "label": ..., "confidence": ...}``.  Each thread keeps its
    own connection; a failed exchange reconnects and retries up to
    ``retries`` extra times before raising :class:`ClassifierUnavailable`.
    """

    def __init__(self, address: str, timeout: float = 10.0, retries: int = 2):
        self.host, self.port = parse_address(address)
        self.timeout = timeout
        self.retries = retries
        self._local = threading.local()
        self._counter = 0
        self._lock = threading.Lock()

    def _connection(self):
        conn = getattr(self._local, "conn", None)
        if conn is None:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            conn = (sock, sock.makefile("rb"))
            self._local.conn = conn
        return conn

    def _drop(self):
        conn = getattr(self._local, "conn", None)
        self._local.conn = None
        if conn is not None:
            for part in reversed(conn):
                try:
                    part.close()
                except OSError:
                    pass

    def _next_id(self) -> str:
        with self._lock:
            self._counter += 1
            return f"{self._counter}"

    def classify(self, crop: Crop) -> Tuple[str, float]:
        request_id = f"{crop.spec.image_id}-{crop.spec.rank}-{self._next_id()}"
        line = json.dumps({"id": request_id, "image": encode_png(crop.pixels)}).encode() + b"\n"
        last_error = None
        for _attempt in range(self.retries + 1):
            try:
                sock, reader = self._connection()
                sock.sendall(line)
                raw = reader.readline()
                if not raw:
                    raise ConnectionError("classifier closed the connection")
                reply = json.loads(raw)
                if reply.get("id") != request_id:
                    raise ConnectionError(f"response id {reply.get('id')!r} does not match request {request_id!r}")
                return str(reply["label"]), float(reply["confidence"])
            except (OSError, ValueError, KeyError) as exc:
                last_error = exc
                self._drop()
        raise ClassifierUnavailable(f"classifier at {self.host}:{self.port} failed: {last_error}")

    def close(self):
        self._drop()


class ClassifierServer(socketserver.ThreadingTCPServer):
    """Serve a ``predict(pixels) -> (label, confidence)`` callable over the NDJSON protocol."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, predict: Callable[[np.ndarray], Tuple[str, float]], host: str = "127.0.0.1", port: int = 0):
        self.predict = predict
        super().__init__((host, port), _ClassifierHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


class _ClassifierHandler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            request = json.loads(raw)
            label, confidence = self.server.predict(decode_png(request["image"]))
            reply = {"id": request["id"], "label": label, "confidence": float(confidence)}
            self.wfile.write(json.dumps(reply).encode() + b"\n")
            self.wfile.flush()


# evaluation


def image_truths(index: DatasetIndex) -> Dict[int, List[Tuple[str, BoundingBox]]]:
    """Non-crowd ``(label, box)`` objects per image, images without objects omitted."""
    names = index.vocabulary.names
    out = {}
    for image_id, anns in sorted(index.annotations_by_image().items()):
        objs = [(names[a.class_id], a.box) for a in anns if not a.is_crowd]
        if objs:
            out[image_id] = objs
    return out


def evaluate_downstream(
    index: DatasetIndex,
    pixels: Mapping[int, np.ndarray],
    detections: Mapping[int, Sequence[Detection]],
    classifier: ClassifierClient,
    m_grid: Sequence[int] = DEFAULT_M,
    padding: float = 0.0,
    max_in_flight: int = 1,
) -> DownstreamReport:
    """Accuracy@M, BO-accuracy and the uncropped / ground-truth-crop reference rows.

    For Accuracy@M and the uncropped row an image is correct when a
    prediction names any of its annotated objects.  BO-accuracy and ground-truth-crop
    accuracy are per object, averaged over objects.  An image whose
    classifier calls fail after retries counts as incorrect everywhere and
    is tallied in ``failures``.
    """
    m_grid = sorted(int(m) for m in m_grid)
    if not m_grid or m_grid[0] < 1:
        raise ValueError("m_grid needs positive entries")
    objects = image_truths(index)
    max_m = m_grid[-1]

    def one_image(image_id):
        image = pixels[image_id]
        h, w = image.shape[:2]
        objs = objects[image_id]
        dets = sort_detections(detections.get(image_id, ()))
        crop_preds = [(classifier.classify(c)[0], c.spec.rank) for c in make_crops(dets, image, max_m, padding)]
        whole = BoundingBox(0.0, 0.0, float(w), float(h))
        uncropped = classifier.classify(Crop(CropSpec(image_id, 1, whole), image))[0]
        bo, gt = [], []
        for label, box in objs:
            gt_crop = Crop(CropSpec(image_id, 1, box, padding), crop_pixels(image, pad_box(box, padding, w, h)))
            gt.append(classifier.classify(gt_crop)[0] == label)
            if dets:
                best = best_overlap_select(dets, box)
                bo_box = pad_box(clip_box(best.box, w, h), padding, w, h)
                bo_crop = Crop(CropSpec(image_id, 1, bo_box, padding), crop_pixels(image, bo_box))
                bo.append(classifier.classify(bo_crop)[0] == label)
            else:
                bo.append(False)
        return crop_preds, uncropped, bo, gt

    image_ids = sorted(objects)
    if max_in_flight > 1:
        with ThreadPoolExecutor(max_in_flight) as pool:
            futures = [pool.submit(one_image, i) for i in image_ids]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append(f.result())
                except ClassifierUnavailable as exc:
                    outcomes.append(exc)
    else:
        outcomes = []
        for i in image_ids:
            try:
                outcomes.append(one_image(i))
            except ClassifierUnavailable as exc:
                outcomes.append(exc)

    crops_predictions, labels = {}, {}
    uncropped_correct = 0
    bo_hits, gt_hits, num_objects = 0, 0, 0
    failures = 0
    for image_id, outcome in zip(image_ids, outcomes):
        objs = objects[image_id]
        num_objects += len(objs)
        labels[image_id] = frozenset(label for label, _ in objs)
        if isinstance(outcome, ClassifierUnavailable):
            log.warning("image %s: %s", image_id, outcome)
            failures += 1
            continue
        crop_preds, uncropped, bo, gt = outcome
        crops_predictions[image_id] = crop_preds
        uncropped_correct += uncropped in labels[image_id]
        bo_hits += sum(bo)
        gt_hits += sum(gt)

    n = len(image_ids)
    return DownstreamReport(
        accuracy_at_m={m: accuracy_at_m(crops_predictions, labels, m) for m in m_grid},
        bo_accuracy=bo_hits / num_objects if num_objects else 0.0,
        uncropped_accuracy=uncropped_correct / n if n else 0.0,
        gt_crop_accuracy=gt_hits / num_objects if num_objects else 0.0,
        num_images=n,
        failures=failures,
    )
