"""Generate a synthetic corpus, validate and split it, sample frames, and
build both prompt styles for one video."""

import tempfile
from pathlib import Path

import numpy as np

from intentvc.dataset import load_annotations, make_split, route_by_length, sample_frames_infer, \
    sample_frames_train, validate_corpus
from intentvc.fixtures import frame_path, make_fixture_corpus
from intentvc.prompts import build_bundle, read_ppm

root = Path(tempfile.mkdtemp())
make_fixture_corpus(root, categories=("bird", "car", "dog"), seed=3, frame_range=(30, 100), write_frames=True)
report = validate_corpus(root)
print(f"{len(report.annotations)} videos, violations: {len(report.violations)}")

anns = load_annotations(root)
split = make_split(anns, seed=0)
print("train/public/private sizes:", len(split.train), len(split.public_test), len(split.private_test))

ann = anns[0]
print(f"{ann.video_id}: {ann.n_frames} frames, routed to the {route_by_length(ann.n_frames)} model")
print("training clip length:", len(sample_frames_train(ann.n_frames, np.random.default_rng(0))))
idx = sample_frames_infer(ann.n_frames)
print("inference indices:", idx[:6], "...")

positions = idx[:3]
frames = [read_ppm(frame_path(root, ann.video_id, ann.frames[i].frame_index)) for i in positions]
bundle = build_bundle(ann, positions, mode="both", frames=frames)
print(bundle.instruction)
print("rendered frames:", len(bundle.rendered_frames), "of size",
      bundle.rendered_frames[0].width, "x", bundle.rendered_frames[0].height)
