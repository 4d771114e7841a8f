"""IntentVC-style annotations: loading, validation, splits and frame sampling.

One JSON file per video::

    {"video_id": "cat-3", "category": "cat", "fps": 1,
     "frame_size": [w, h],
     "frames": [{"index": 0, "bbox": [x, y, w, h]}, ...],
     "captions": ["...", ...]}

Boxes are COCO ``[x, y, w, h]`` in pixels.  An all-zero box marks a frame in
which the object is out of scene; the five-zero form ``[0, 0, 0, 0, 0]`` is
accepted and normalized to four zeros.
"""

from __future__ import annotations

import json
import re
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AnnotationParseError, ConfigurationError, ValidationError

__all__ = [
    "CATEGORIES",
    "FPS",
    "VIDEOS_PER_CATEGORY",
    "SPLIT_SIZES",
    "TRAIN_FRAMES",
    "INFER_FRAMES",
    "LENGTH_THRESHOLD",
    "FrameBox",
    "VideoAnnotation",
    "DatasetSplit",
    "Violation",
    "ValidationReport",
    "coco_to_corners",
    "corners_to_coco",
    "parse_annotation",
    "load_annotations",
    "validate_corpus",
    "make_split",
    "sample_frames_train",
    "sample_frames_infer",
    "route_by_length",
]

# LaSoT object categories, which IntentVC reuses as user intents.
CATEGORIES = (
    "airplane", "basketball", "bear", "bicycle", "bird", "boat", "book",
    "bottle", "bus", "car", "cat", "cattle", "chameleon", "coin", "crab",
    "crocodile", "cup", "deer", "dog", "drone", "electricfan", "elephant",
    "flag", "fox", "frog", "gametarget", "gecko", "giraffe", "goldfish",
    "gorilla", "guitar", "hand", "hat", "helmet", "hippo", "horse",
    "kangaroo", "kite", "leopard", "licenseplate", "lion", "lizard",
    "microphone", "monkey", "motorcycle", "mouse", "person", "pig", "pool",
    "rabbit", "racing", "robot", "rubicCube", "sepia", "shark", "sheep",
    "skateboard", "spider", "squirrel", "surfboard", "swing", "tank",
    "tiger", "train", "truck", "turtle", "umbrella", "volleyball", "yoyo",
    "zebra",
)
FPS = 1
VIDEOS_PER_CATEGORY = 20
SPLIT_SIZES = (14, 3, 3)
CAPTIONS_PER_TRAIN_VIDEO = 5
TRAIN_FRAMES = (32, 48)
INFER_FRAMES = 48
LENGTH_THRESHOLD = 74

_VIDEO_ID = re.compile(r"^(?P<category>.+)-(?P<n>\d+)$")
SENTINEL = (0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Violation:
    video_id: str | None
    rule: str
    detail: str
    path: str | None = None

    def __str__(self):
        where = self.video_id or self.path or "<corpus>"
        return f"{where}: [{self.rule}] {self.detail}"


@dataclass(frozen=True)
class FrameBox:
    frame_index: int
    bbox: tuple

    @property
    def is_sentinel(self):
        return all(v == 0 for v in self.bbox)

    @property
    def corners(self):
        return coco_to_corners(self.bbox)


@dataclass
class VideoAnnotation:
    video_id: str
    category: str
    fps: int
    frame_size: tuple
    frames: list
    captions: list = field(default_factory=list)

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def number(self):
        return int(_VIDEO_ID.match(self.video_id).group("n"))

    def to_dict(self):
        return {
            "video_id": self.video_id,
            "category": self.category,
            "fps": self.fps,
            "frame_size": list(self.frame_size),
            "frames": [{"index": f.frame_index, "bbox": list(f.bbox)} for f in self.frames],
            "captions": list(self.captions),
        }


@dataclass
class DatasetSplit:
    train: list
    public_test: list
    private_test: list

    def to_dict(self):
        return {"train": list(self.train), "public_test": list(self.public_test),
                "private_test": list(self.private_test)}


@dataclass
class ValidationReport:
    annotations: list
    violations: list

    @property
    def ok(self):
        return not self.violations

    def counts(self):
        return dict(sorted(Counter(v.rule for v in self.violations).items()))


def coco_to_corners(bbox):
    """``[x, y, w, h]`` -> ``[x1, y1, x2, y2]``; the sentinel maps to itself."""
    x, y, w, h = bbox
    if w < 0 or h < 0:
        raise ValidationError([Violation(None, "bbox_negative", f"negative size in {list(bbox)}")])
    return [x, y, x + w, y + h]


def corners_to_coco(corners):
    x1, y1, x2, y2 = corners
    if x2 < x1 or y2 < y1:
        raise ValidationError([Violation(None, "bbox_negative", f"inverted corners {list(corners)}")])
    return [x1, y1, x2 - x1, y2 - y1]


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def parse_annotation(doc, path=None):
    """Validate one decoded annotation document.

    Returns ``(annotation_or_None, violations)``; ``None`` only when the
    document is too malformed to build an annotation at all.
    """
    vid = doc.get("video_id") if isinstance(doc, dict) else None
    bad = []

    def flag(rule, detail):
        bad.append(Violation(vid if isinstance(vid, str) else None, rule, detail, str(path) if path else None))

    if not isinstance(doc, dict):
        flag("schema", "top level must be an object")
        return None, bad
    missing = [k for k in ("video_id", "category", "fps", "frame_size", "frames") if k not in doc]
    if missing:
        flag("schema", f"missing fields {missing}")
        return None, bad
    if not isinstance(vid, str):
        flag("schema", "video_id must be a string")
        return None, bad

    category = doc["category"]
    m = _VIDEO_ID.match(vid)
    if not m:
        flag("video_id_format", f"{vid!r} is not '<category>-<n>'")
    elif m.group("category") != category:
        flag("category_mismatch", f"id prefix {m.group('category')!r} != category {category!r}")
    if category not in CATEGORIES:
        flag("category_vocabulary", f"unknown category {category!r}")
    if doc["fps"] != FPS:
        flag("fps", f"fps must be {FPS}, got {doc['fps']!r}")

    size = doc["frame_size"]
    if (not isinstance(size, list) or len(size) != 2 or not all(isinstance(s, int) and s >= 1 for s in size)):
        flag("frame_size", f"frame_size must be two positive ints, got {size!r}")
        size = [1, 1]

    frames = []
    raw_frames = doc["frames"] if isinstance(doc["frames"], list) else []
    if not isinstance(doc["frames"], list):
        flag("schema", "frames must be a list")
    prev = None
    for pos, fr in enumerate(raw_frames):
        if not isinstance(fr, dict) or "index" not in fr or "bbox" not in fr:
            flag("schema", f"frame #{pos} needs 'index' and 'bbox'")
            continue
        idx, bbox = fr["index"], fr["bbox"]
        if not isinstance(idx, int) or isinstance(idx, bool) or idx < 0:
            flag("frame_order", f"frame #{pos} has invalid index {idx!r}")
            continue
        expected_first = prev is None and idx != 0
        if expected_first:
            flag("frame_order", f"first frame index is {idx}, expected 0")
        elif prev is not None and idx <= prev:
            flag("frame_order", f"frame index {idx} follows {prev}")
        prev = idx
        if not isinstance(bbox, list) or not all(_number(v) for v in bbox):
            flag("bbox_arity", f"frame {idx}: bbox must be a list of numbers")
            continue
        if len(bbox) == 5 and all(v == 0 for v in bbox):
            bbox = [0, 0, 0, 0]
        if len(bbox) != 4:
            flag("bbox_arity", f"frame {idx}: bbox {bbox} must have 4 values")
            continue
        if bbox[2] < 0 or bbox[3] < 0:
            flag("bbox_negative", f"frame {idx}: negative size in {bbox}")
            continue
        frames.append(FrameBox(idx, tuple(float(v) for v in bbox)))

    captions = doc.get("captions", [])
    if not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
        flag("schema", "captions must be a list of strings")
        captions = []
    if len(captions) > CAPTIONS_PER_TRAIN_VIDEO:
        flag("caption_count", f"{len(captions)} captions, at most {CAPTIONS_PER_TRAIN_VIDEO} allowed")

    ann = VideoAnnotation(vid, category, doc["fps"], tuple(size), frames, list(captions))
    return ann, bad


def _read(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise AnnotationParseError(path, f"cannot read: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(path, exc.msg, line=exc.lineno) from None


def _scan(root):
    root = Path(root)
    if not root.is_dir():
        raise AnnotationParseError(root, "dataset root is not a readable directory")
    annotations, violations = [], []
    for path in sorted(root.glob("*.json")):
        ann, bad = parse_annotation(_read(path), path)
        violations.extend(bad)
        if ann is not None:
            annotations.append(ann)
    counts = Counter(a.video_id for a in annotations)
    for vid, n in sorted(counts.items()):
        if n > 1:
            violations.append(Violation(vid, "duplicate_video_id", f"{n} files declare this id"))
    return annotations, violations


def load_annotations(root):
    """Parse every ``*.json`` in ``root`` (sorted by name).

    All per-file violations are gathered before raising ``ValidationError``;
    malformed JSON raises ``AnnotationParseError`` with file and line.
    """
    annotations, violations = _scan(root)
    if violations:
        raise ValidationError(violations)
    return annotations


def validate_corpus(root):
    """Per-file checks plus corpus rules (20 videos per category, five
    captions for each training video under the fixed-order split)."""
    annotations, violations = _scan(root)
    by_cat = defaultdict(list)
    for a in annotations:
        by_cat[a.category].append(a)
    complete = True
    for cat, items in sorted(by_cat.items()):
        if len(items) != VIDEOS_PER_CATEGORY:
            complete = False
            violations.append(Violation(None, "category_size",
                                        f"category {cat!r} has {len(items)} videos, expected {VIDEOS_PER_CATEGORY}"))
    if complete and annotations and not any(v.rule in ("video_id_format", "duplicate_video_id") for v in violations):
        split = make_split(annotations, seed=0)
        train = set(split.train)
        for a in annotations:
            if a.video_id in train and len(a.captions) != CAPTIONS_PER_TRAIN_VIDEO:
                violations.append(Violation(a.video_id, "train_captions",
                                            f"training video has {len(a.captions)} captions, expected 5"))
    return ValidationReport(annotations, violations)


def make_split(annotations, seed=0):
    """Per-category 14/3/3 partition into train / public test / private test.

    Videos are ordered by the numeric suffix of their id.  Seed 0 keeps that
    order; any other seed shuffles each category with a generator keyed on
    ``(seed, crc32(category))``.
    """
    by_cat = defaultdict(list)
    for a in annotations:
        by_cat[a.category].append(a)
    bad = [Violation(None, "category_size", f"category {c!r} has {len(v)} videos, expected {VIDEOS_PER_CATEGORY}")
           for c, v in sorted(by_cat.items()) if len(v) != VIDEOS_PER_CATEGORY]
    if bad:
        raise ValidationError(bad)
    n_train, n_pub, _ = SPLIT_SIZES
    split = DatasetSplit([], [], [])
    for cat in sorted(by_cat):
        ids = [a.video_id for a in sorted(by_cat[cat], key=lambda a: a.number)]
        if seed != 0:
            rng = np.random.default_rng([seed, zlib.crc32(cat.encode())])
            ids = [ids[i] for i in rng.permutation(len(ids))]
        split.train.extend(ids[:n_train])
        split.public_test.extend(ids[n_train:n_train + n_pub])
        split.private_test.extend(ids[n_train + n_pub:])
    return split


def sample_frames_train(n_frames, rng=None):
    """Random training clip: a length drawn uniformly from [32, 48] (capped
    at ``n_frames``), then that many distinct sorted indices."""
    if n_frames < 1:
        raise ConfigurationError("n_frames must be >= 1")
    rng = np.random.default_rng(rng)
    lo, hi = TRAIN_FRAMES
    target = min(int(rng.integers(lo, hi + 1)), n_frames)
    return sorted(int(i) for i in rng.choice(n_frames, size=target, replace=False))


def sample_frames_infer(n_frames, count=INFER_FRAMES):
    """Uniform-stride indices ``floor(i * n / count)``; all frames when the
    video is not longer than ``count``."""
    if n_frames < 1:
        raise ConfigurationError("n_frames must be >= 1")
    if n_frames <= count:
        return list(range(n_frames))
    return [i * n_frames // count for i in range(count)]


def route_by_length(n_frames, threshold=LENGTH_THRESHOLD):
    """'short' when strictly fewer than ``threshold`` frames, else 'long'."""
    if threshold < 1:
        raise ConfigurationError("threshold must be >= 1")
    return "short" if n_frames < threshold else "long"
