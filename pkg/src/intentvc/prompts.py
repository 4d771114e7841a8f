"""Prompt combination: box coordinates in the instruction text, red boxes
drawn on the frames, or both.

Coordinates are rendered per sampled frame as integers on a 0-1000 scale,
``Frame i: [x1, y1, x2, y2]``, or ``Frame i: object not visible`` for
out-of-scene frames.  Visual prompts are hollow pure-red rectangles drawn
just outside a slightly enlarged box so the object itself stays uncovered.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import coco_to_corners
from .errors import InputError

__all__ = [
    "RED",
    "CANONICAL_SIZE",
    "Frame",
    "read_ppm",
    "write_ppm",
    "BoxClampWarning",
    "normalize_box",
    "denormalize_box",
    "InstructionTemplate",
    "DEFAULT_TEMPLATE",
    "build_instruction",
    "PromptStyle",
    "stroke_band",
    "render_visual_prompt",
    "PromptBundle",
    "MODES",
    "build_bundle",
]

RED = (255, 0, 0)
CANONICAL_SIZE = 448
MODES = ("text", "visual", "both")


@dataclass
class Frame:
    """RGB8 image; ``pixels`` has shape ``(height, width, 3)``."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InputError(f"frame must be at least 1x1, got {self.width}x{self.height}")
        px = np.asarray(self.pixels)
        if px.size != 3 * self.width * self.height:
            raise InputError(f"pixel buffer of {px.size} values does not match {self.width}x{self.height}x3")
        self.pixels = px.astype(np.uint8, copy=False).reshape(self.height, self.width, 3)

    @classmethod
    def blank(cls, width, height, color=(0, 0, 0)):
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = color
        return cls(width, height, px)

    def copy(self):
        return Frame(self.width, self.height, self.pixels.copy())

    def __eq__(self, other):
        return (isinstance(other, Frame) and self.width == other.width
                and self.height == other.height and np.array_equal(self.pixels, other.pixels))


def _ppm_tokens(buf):
    """Header tokens of a netpbm file (comments skipped) and the raster offset."""
    pos, tokens = 0, []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_ppm(path):
    buf = Path(path).read_bytes()
    tokens, offset = _ppm_tokens(buf)
    if tokens[0] != b"P6":
        raise InputError(f"{path}: only binary P6 PPM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InputError(f"{path}: only 8-bit PPM (maxval 255) is supported")
    raster = np.frombuffer(buf, dtype=np.uint8, count=3 * width * height, offset=offset)
    return Frame(width, height, raster.copy())


def write_ppm(path, frame):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P6\n{frame.width} {frame.height}\n255\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(frame.pixels).tobytes())


class BoxClampWarning(UserWarning):
    """A box extended beyond its frame and was clamped."""


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def normalize_box(corners, frame_size):
    """Pixel corners -> integer corners on a 0-1000 scale.

    Corners outside the frame are clamped (with a ``BoxClampWarning``).
    """
    width, height = frame_size
    if width <= 0 or height <= 0:
        raise InputError(f"frame size must be positive, got {frame_size}")
    x1, y1, x2, y2 = (float(c) for c in corners)
    clamped = (min(max(x1, 0.0), width), min(max(y1, 0.0), height),
               min(max(x2, 0.0), width), min(max(y2, 0.0), height))
    if clamped != (x1, y1, x2, y2):
        warnings.warn(f"box {list(corners)} clamped to frame {width}x{height}", BoxClampWarning, stacklevel=2)
    cx1, cy1, cx2, cy2 = clamped
    return [_round_half_up(1000.0 * cx1 / width), _round_half_up(1000.0 * cy1 / height),
            _round_half_up(1000.0 * cx2 / width), _round_half_up(1000.0 * cy2 / height)]


def denormalize_box(norm, frame_size):
    width, height = frame_size
    x1, y1, x2, y2 = norm
    return [x1 * width / 1000.0, y1 * height / 1000.0, x2 * width / 1000.0, y2 * height / 1000.0]


@dataclass(frozen=True)
class InstructionTemplate:
    task: str = "Describe what the {category} does in this video."
    coordinate_intro: str = ("The {category} is given in each frame as [x1, y1, x2, y2], "
                             "its top-left and bottom-right corners on a 0-1000 scale:")
    visual_hint: str = "The {category} is marked with a red box in every frame."
    line: str = "Frame {index}: {box}"
    missing: str = "object not visible"

    def coordinate_text(self, norm):
        return "[" + ", ".join(str(int(v)) for v in norm) + "]"


DEFAULT_TEMPLATE = InstructionTemplate()


def _check_indices(ann, indices):
    for i in indices:
        if not isinstance(i, (int, np.integer)) or not 0 <= i < ann.n_frames:
            raise InputError(f"{ann.video_id}: sampled position {i!r} outside 0..{ann.n_frames - 1}")


def coordinate_lines(ann, indices, template=DEFAULT_TEMPLATE):
    lines = []
    for pos in indices:
        fb = ann.frames[pos]
        if fb.is_sentinel:
            box = template.missing
        else:
            box = template.coordinate_text(normalize_box(coco_to_corners(fb.bbox), ann.frame_size))
        lines.append(template.line.format(index=fb.frame_index, box=box))
    return lines


def build_instruction(ann, indices, template=DEFAULT_TEMPLATE, coordinates=True, visual_hint=False):
    """Instruction text for the frames at positions ``indices`` of ``ann``.

    With ``coordinates`` each sampled frame contributes exactly one line;
    without it only the preamble is produced.
    """
    indices = list(indices)
    _check_indices(ann, indices)
    parts = [template.task.format(category=ann.category)]
    if visual_hint:
        parts.append(template.visual_hint.format(category=ann.category))
    if coordinates and indices:
        parts.append(template.coordinate_intro.format(category=ann.category))
        parts.extend(coordinate_lines(ann, indices, template))
    return "\n".join(parts)


@dataclass(frozen=True)
class PromptStyle:
    margin_fraction: float = 0.05
    # None: 3 px at 448x448, scaled with the shorter frame side
    stroke: int | None = None

    def stroke_for(self, frame):
        if self.stroke is not None:
            return max(1, int(self.stroke))
        return max(1, _round_half_up(3 * min(frame.width, frame.height) / CANONICAL_SIZE))


def stroke_band(width, height, corners, style=PromptStyle(), stroke=None):
    """Boolean ``(height, width)`` mask of the pixels a visual prompt paints.

    The box (corners in continuous pixel coordinates, right/bottom exclusive)
    is enlarged by ``margin_fraction`` of each side, snapped outward to whole
    pixels, and surrounded by a ring ``stroke`` pixels thick; the ring is
    clipped to the frame and, where clipped, moves inward so it stays visible.
    """
    x1, y1, x2, y2 = (float(c) for c in corners)
    mask = np.zeros((height, width), dtype=bool)
    if x1 == y1 == x2 == y2 == 0.0:
        return mask
    s = stroke if stroke is not None else style.stroke_for(Frame.blank(width, height))
    mx = style.margin_fraction * (x2 - x1)
    my = style.margin_fraction * (y2 - y1)
    px1, px2 = math.floor(x1 - mx), math.ceil(x2 + mx)
    py1, py2 = math.floor(y1 - my), math.ceil(y2 + my)
    ox1, ox2 = max(px1 - s, 0), min(px2 + s, width)
    oy1, oy2 = max(py1 - s, 0), min(py2 + s, height)
    if ox1 >= ox2 or oy1 >= oy2:
        return mask
    mask[oy1:oy2, ox1:ox2] = True
    ix1, ix2, iy1, iy2 = ox1 + s, ox2 - s, oy1 + s, oy2 - s
    if ix1 < ix2 and iy1 < iy2:
        mask[iy1:iy2, ix1:ix2] = False
    return mask


def render_visual_prompt(frame, corners, style=PromptStyle()):
    """Return a copy of ``frame`` with a red hollow rectangle around ``corners``.

    The out-of-scene sentinel returns an unchanged copy.
    """
    out = frame.copy()
    band = stroke_band(frame.width, frame.height, corners, style, stroke=style.stroke_for(frame))
    out.pixels[band] = RED
    return out


@dataclass
class PromptBundle:
    video_id: str
    mode: str
    instruction: str
    frame_indices: list = field(default_factory=list)
    rendered_frames: list | None = None

    def record(self):
        return {"video_id": self.video_id, "mode": self.mode, "instruction": self.instruction}


def build_bundle(ann, indices, mode, frames=None, template=DEFAULT_TEMPLATE, style=PromptStyle()):
    """Assemble the prompt artifacts for one video.

    ``frames`` are the decoded images for the sampled positions, in the same
    order; they are required unless ``mode == "text"``.  Boxes are rescaled
    from the annotation's frame size to each image's size before drawing.
    """
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}, got {mode!r}")
    indices = list(indices)
    _check_indices(ann, indices)
    text = mode in ("text", "both")
    visual = mode in ("visual", "both")
    instruction = build_instruction(ann, indices, template, coordinates=text, visual_hint=visual)
    rendered = None
    if visual:
        if frames is None or len(frames) != len(indices):
            have = 0 if frames is None else len(frames)
            raise InputError(f"{ann.video_id}: mode {mode!r} needs {len(indices)} frames, got {have}")
        aw, ah = ann.frame_size
        rendered = []
        for pos, img in zip(indices, frames):
            fb = ann.frames[pos]
            if fb.is_sentinel:
                rendered.append(img.copy())
                continue
            x1, y1, x2, y2 = coco_to_corners(fb.bbox)
            sx, sy = img.width / aw, img.height / ah
            rendered.append(render_visual_prompt(img, [x1 * sx, y1 * sy, x2 * sx, y2 * sy], style))
    return PromptBundle(ann.video_id, mode, instruction, indices, rendered)
