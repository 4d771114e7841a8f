"""Synthetic IntentVC-shaped corpora for tests, demos and the CLI.

Real IntentVC videos are not redistributable; these generators write the
same file layout with random tracks, template captions and (optionally)
noise frames so every pipeline stage can run end to end.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataset import CATEGORIES, FPS, VIDEOS_PER_CATEGORY
from .prompts import Frame, write_ppm

__all__ = ["synthetic_annotation", "synthetic_frame", "make_fixture_corpus", "frame_path"]

_COLORS = ("red", "black", "white", "brown", "small", "large", "young", "grey")
_ACTIONS = ("moves across", "stands still in", "turns around in", "walks slowly through",
            "jumps over", "rests in", "runs along", "appears in")
_PLACES = ("the grass", "the water", "the road", "a room", "the field", "the sky",
           "a table", "the snow")
_ENDINGS = ("then stops", "while the camera follows it", "and looks around",
            "before leaving the scene", "near another object")


def _caption(rng, category):
    return " ".join((
        "the", str(rng.choice(_COLORS)), category, str(rng.choice(_ACTIONS)),
        str(rng.choice(_PLACES)), str(rng.choice(_ENDINGS)),
    ))


def synthetic_annotation(category, number, rng, frame_size=(64, 48), frame_range=(20, 120),
                         sentinel_rate=0.05, n_captions=5):
    """One random-walk box track with template captions, as a JSON-ready dict."""
    w, h = frame_size
    n = int(rng.integers(frame_range[0], frame_range[1] + 1))
    bw, bh = rng.uniform(0.15, 0.5) * w, rng.uniform(0.15, 0.5) * h
    x, y = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
    frames = []
    for i in range(n):
        x = float(np.clip(x + rng.normal(0, 0.02 * w), 0, w - bw))
        y = float(np.clip(y + rng.normal(0, 0.02 * h), 0, h - bh))
        if rng.random() < sentinel_rate:
            bbox = [0, 0, 0, 0]
        else:
            bbox = [round(x, 1), round(y, 1), round(bw, 1), round(bh, 1)]
        frames.append({"index": i, "bbox": bbox})
    return {
        "video_id": f"{category}-{number}",
        "category": category,
        "fps": FPS,
        "frame_size": [w, h],
        "frames": frames,
        "captions": [_caption(rng, category) for _ in range(n_captions)],
    }


def synthetic_frame(width, height, rng):
    """Smooth colour gradient plus noise; never pure red."""
    yy, xx = np.mgrid[0:height, 0:width]
    base = np.stack([40 + 100 * xx / max(width, 1), 60 + 120 * yy / max(height, 1),
                     np.full(xx.shape, 128.0)], axis=-1)
    noisy = base + rng.normal(0, 12, size=base.shape)
    return Frame(width, height, np.clip(noisy, 0, 200).astype(np.uint8))


def frame_path(root, video_id, index):
    return Path(root) / "frames" / video_id / f"frame_{index}.ppm"


def make_fixture_corpus(root, categories=CATEGORIES, videos_per_category=VIDEOS_PER_CATEGORY,
                        seed=0, frame_size=(64, 48), frame_range=(20, 120), sentinel_rate=0.05,
                        write_frames=False):
    """Write one annotation JSON per video under ``root``; returns the ids.

    With ``write_frames`` a PPM per annotated frame goes to
    ``root/frames/<video_id>/frame_<i>.ppm``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    for cat in categories:
        for number in range(1, videos_per_category + 1):
            doc = synthetic_annotation(cat, number, rng, frame_size, frame_range, sentinel_rate)
            (root / f"{doc['video_id']}.json").write_text(json.dumps(doc), encoding="utf-8")
            ids.append(doc["video_id"])
            if write_frames:
                for fr in doc["frames"]:
                    write_ppm(frame_path(root, doc["video_id"], fr["index"]),
                              synthetic_frame(frame_size[0], frame_size[1], rng))
    return ids
