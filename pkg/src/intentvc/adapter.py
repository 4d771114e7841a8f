"""Box adapter: RoI-aligned region features fused into frame features.

For a stack of frame feature maps ``V_f`` of shape ``[N_v, d, h, w]`` and one
normalized box per frame, a box adapter computes

    R     = roi_align(LN(V_f), box)                       # [N_v, d, h', w']
    V~    = V_f + Z(MHA(Conv_Q(V_f), Conv_K(R), Conv_V(R)))
    V_fr  = V~ + FFN(LN(V~))

where ``Z`` is a 1x1 convolution whose weight and bias start at zero.  The
frame map supplies the queries (``h*w`` tokens) and the region supplies keys
and values (``h'*w'`` tokens).  ``AdapterStack`` runs a frozen synthetic ViT
of ``L`` layers and applies an independent adapter after each of the last
``k`` layers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError
from .tensor import (
    Tensor,
    as_tensor,
    conv1x1,
    gelu,
    layer_norm,
    matmul,
    multi_head_attention,
    stack,
)

logger = logging.getLogger(__name__)

__all__ = [
    "NormalizedBox",
    "BoxAdapterConfig",
    "AdapterStackConfig",
    "default_heads",
    "roi_align",
    "roi_sampling_matrix",
    "extract_region",
    "global_local_fuse",
    "BoxAdapter",
    "ViTLayer",
    "AdapterStack",
    "vit_stack_forward",
    "count_trainable_params",
]


@dataclass(frozen=True)
class NormalizedBox:
    """Box corners as fractions of the frame extent; all zeros means the
    object is out of scene."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"non-finite box {vals}")
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise InputError(f"box {vals} is outside [0, 1]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InputError(f"box {vals} has x1 > x2 or y1 > y2")

    @property
    def is_sentinel(self):
        return self.x1 == self.y1 == self.x2 == self.y2 == 0.0

    @classmethod
    def sentinel(cls):
        return cls(0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_corners(cls, corners, frame_size):
        """Pixel corners ``[x1, y1, x2, y2]`` on a ``(width, height)`` frame."""
        width, height = frame_size
        x1, y1, x2, y2 = (float(c) for c in corners)
        if x1 == y1 == x2 == y2 == 0.0:
            return cls.sentinel()
        clip = lambda v: min(max(v, 0.0), 1.0)
        return cls(clip(x1 / width), clip(y1 / height), clip(x2 / width), clip(y2 / height))


def default_heads(d):
    """8 heads for d >= 64, otherwise the largest divisor of d not above 4."""
    if d >= 64 and d % 8 == 0:
        return 8
    return max(h for h in (1, 2, 3, 4) if d % h == 0)


@dataclass
class BoxAdapterConfig:
    d: int
    heads: int | None = None
    roi_h: int = 7
    roi_w: int = 7
    ffn_ratio: int = 4
    eps: float = 1e-5
    sampling_ratio: int = 2
    # False restores a standard init of the FFN output projection, leaving
    # only Z zero-initialized.
    zero_init_ffn: bool = True

    def __post_init__(self):
        if self.heads is None:
            self.heads = default_heads(self.d)
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigurationError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.roi_h < 1 or self.roi_w < 1 or self.sampling_ratio < 1:
            raise ConfigurationError("RoI output size and sampling ratio must be >= 1")
        if self.ffn_ratio < 1:
            raise ConfigurationError("ffn_ratio must be >= 1")
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")

    @property
    def hidden(self):
        return self.d * self.ffn_ratio


@dataclass
class AdapterStackConfig:
    total_layers: int
    adapter_layers: int
    adapter: BoxAdapterConfig
    vit_heads: int | None = None
    vit_ffn_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.adapter, dict):
            self.adapter = BoxAdapterConfig(**self.adapter)
        if self.total_layers < 0 or not 0 <= self.adapter_layers <= self.total_layers:
            raise ConfigurationError(
                f"need 0 <= k <= L, got k={self.adapter_layers}, L={self.total_layers}")
        if self.vit_heads is None:
            self.vit_heads = default_heads(self.adapter.d)
        if self.adapter.d % self.vit_heads:
            raise ConfigurationError("ViT heads must divide d")

    @property
    def adapter_layer_indices(self):
        """1-based indices of the ViT layers followed by an adapter."""
        return list(range(self.total_layers - self.adapter_layers + 1, self.total_layers + 1))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        doc["adapter"] = BoxAdapterConfig(**doc["adapter"])
        return cls(**doc)


# -- RoI align ---------------------------------------------------------------

def _bilinear_taps(coord, size):
    """Clamp a continuous index coordinate to the border; return the two
    neighbouring indices and their weights."""
    c = min(max(coord, 0.0), size - 1.0)
    lo = int(math.floor(c))
    hi = min(lo + 1, size - 1)
    frac = c - lo
    return lo, hi, 1.0 - frac, frac


def roi_sampling_matrix(h, w, box, out_h, out_w, sampling_ratio=2):
    """Linear operator ``M`` of shape ``(h*w, out_h*out_w)`` such that the RoI
    output is ``feat.reshape(d, h*w) @ M``.

    Coordinates use the half-pixel convention (feature cell ``i`` is centred at
    ``i + 0.5``).  Each bin averages ``sampling_ratio**2`` bilinear samples
    placed at the centres of a regular sub-grid; samples beyond the map clamp
    to its border.  A zero-area (non-sentinel) box is widened to one feature
    cell.
    """
    bx1, by1 = box.x1 * w, box.y1 * h
    bw = max((box.x2 - box.x1) * w, 1.0)
    bh = max((box.y2 - box.y1) * h, 1.0)
    bin_w, bin_h = bw / out_w, bh / out_h
    s = sampling_ratio
    weight = 1.0 / (s * s)
    m = np.zeros((h * w, out_h * out_w))
    for ph in range(out_h):
        for pw in range(out_w):
            col = ph * out_w + pw
            for iy in range(s):
                y = by1 + (ph + (iy + 0.5) / s) * bin_h - 0.5
                y0, y1, wy0, wy1 = _bilinear_taps(y, h)
                for ix in range(s):
                    x = bx1 + (pw + (ix + 0.5) / s) * bin_w - 0.5
                    x0, x1, wx0, wx1 = _bilinear_taps(x, w)
                    m[y0 * w + x0, col] += weight * wy0 * wx0
                    m[y0 * w + x1, col] += weight * wy0 * wx1
                    m[y1 * w + x0, col] += weight * wy1 * wx0
                    m[y1 * w + x1, col] += weight * wy1 * wx1
    return m


def roi_align(feat, box, out_h, out_w, sampling_ratio=2):
    """Pool ``feat`` ``[d, h, w]`` over ``box`` into ``[d, out_h, out_w]``.

    The out-of-scene sentinel yields an all-zero tensor that is detached from
    ``feat``.
    """
    feat = as_tensor(feat)
    if feat.ndim != 3 or feat.size == 0:
        raise DimensionError(f"roi_align expects a non-empty [d, h, w] map, got {feat.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigurationError("RoI output size must be >= 1")
    d, h, w = feat.shape
    if box.is_sentinel:
        logger.debug("sentinel box: returning a zero region")
        return Tensor(np.zeros((d, out_h, out_w)))
    m = roi_sampling_matrix(h, w, box, out_h, out_w, sampling_ratio)
    return matmul(feat.reshape(d, h * w), Tensor(m)).reshape(d, out_h, out_w)


# -- adapter -----------------------------------------------------------------

def _param(value, name):
    return Tensor(value, requires_grad=True, name=name)


class BoxAdapter:
    """Trainable parameters of one box adapter plus its forward pass."""

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        rng = np.random.default_rng(rng)
        d, hid = cfg.d, cfg.hidden

        def dense(out_dim, in_dim):
            return rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim))

        self.ln1_gamma = _param(np.ones(d), "ln1_gamma")
        self.ln1_beta = _param(np.zeros(d), "ln1_beta")
        self.q_weight = _param(dense(d, d), "q_weight")
        self.q_bias = _param(np.zeros(d), "q_bias")
        # no key bias: it shifts every score of a query equally, so softmax
        # cancels it and its gradient is identically zero
        self.k_weight = _param(dense(d, d), "k_weight")
        self._k_bias = Tensor(np.zeros(d))
        self.v_weight = _param(dense(d, d), "v_weight")
        self.v_bias = _param(np.zeros(d), "v_bias")
        self.z_weight = _param(np.zeros((d, d)), "z_weight")
        self.z_bias = _param(np.zeros(d), "z_bias")
        self.ln2_gamma = _param(np.ones(d), "ln2_gamma")
        self.ln2_beta = _param(np.zeros(d), "ln2_beta")
        self.ffn_in_weight = _param(dense(hid, d), "ffn_in_weight")
        self.ffn_in_bias = _param(np.zeros(hid), "ffn_in_bias")
        out_w = np.zeros((d, hid)) if cfg.zero_init_ffn else dense(d, hid)
        self.ffn_out_weight = _param(out_w, "ffn_out_weight")
        self.ffn_out_bias = _param(np.zeros(d), "ffn_out_bias")

    _NAMES = (
        "ln1_gamma", "ln1_beta", "q_weight", "q_bias", "k_weight",
        "v_weight", "v_bias", "z_weight", "z_bias", "ln2_gamma", "ln2_beta",
        "ffn_in_weight", "ffn_in_bias", "ffn_out_weight", "ffn_out_bias",
    )

    def named_parameters(self):
        return {name: getattr(self, name) for name in self._NAMES}

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def perturb(self, rng=None, scale=0.5):
        """Add uniform noise to every parameter, e.g. to emulate a trained
        adapter whose zero conv has opened."""
        rng = np.random.default_rng(rng)
        for p in self.parameters():
            p.data += rng.uniform(-scale, scale, size=p.shape)

    def __call__(self, feat, boxes):
        return self.forward(feat, boxes)

    def forward(self, feat, boxes):
        region = extract_region(feat, boxes, self)
        return global_local_fuse(feat, region, self)


def extract_region(feat, boxes, adapter):
    """Per-frame channel LN followed by RoI align: ``[N_v, d, h', w']``."""
    feat = as_tensor(feat)
    cfg = adapter.cfg
    if feat.ndim != 4:
        raise DimensionError(f"expected [N_v, d, h, w], got {feat.shape}")
    if feat.shape[1] != cfg.d:
        raise ConfigurationError(f"feature width {feat.shape[1]} != adapter d {cfg.d}")
    boxes = list(boxes)
    if len(boxes) != feat.shape[0]:
        raise InputError(f"{len(boxes)} boxes for {feat.shape[0]} frames")
    regions = []
    for n, box in enumerate(boxes):
        normed = layer_norm(feat[n], adapter.ln1_gamma, adapter.ln1_beta, cfg.eps, axis=0)
        regions.append(roi_align(normed, box, cfg.roi_h, cfg.roi_w, cfg.sampling_ratio))
    return stack(regions, axis=0)


def _tokens(fmap):
    n, d, h, w = fmap.shape
    return fmap.reshape(n, d, h * w).transpose(0, 2, 1)


def global_local_fuse(feat, region, adapter):
    """Cross-attend frame tokens (queries) to region tokens (keys/values),
    gate through the zero conv, then add the FFN residual."""
    feat, region = as_tensor(feat), as_tensor(region)
    cfg = adapter.cfg
    n, d, h, w = feat.shape
    if d != cfg.d or region.ndim != 4 or region.shape[:2] != (n, d):
        raise ConfigurationError(
            f"feature {feat.shape} / region {region.shape} do not match d={cfg.d}")

    q = _tokens(conv1x1(feat, adapter.q_weight, adapter.q_bias))
    k = _tokens(conv1x1(region, adapter.k_weight, adapter._k_bias))
    v = _tokens(conv1x1(region, adapter.v_weight, adapter.v_bias))
    attended = multi_head_attention(q, k, v, cfg.heads)
    attended = attended.transpose(0, 2, 1).reshape(n, d, h, w)
    fused = feat + conv1x1(attended, adapter.z_weight, adapter.z_bias)

    normed = layer_norm(fused, adapter.ln2_gamma, adapter.ln2_beta, cfg.eps, axis=1)
    hidden = gelu(conv1x1(normed, adapter.ffn_in_weight, adapter.ffn_in_bias))
    return fused + conv1x1(hidden, adapter.ffn_out_weight, adapter.ffn_out_bias)


# -- synthetic ViT -----------------------------------------------------------

class ViTLayer:
    """Frozen pre-LN transformer block over the ``h*w`` tokens of each frame."""

    def __init__(self, d, heads, ffn_ratio=4, rng=None, eps=1e-5):
        rng = np.random.default_rng(rng)
        self.heads = heads
        self.eps = eps
        hid = d * ffn_ratio
        dense = lambda i, o: Tensor(rng.normal(0.0, 1.0 / math.sqrt(i), size=(i, o)))
        self.ln1 = (Tensor(np.ones(d)), Tensor(np.zeros(d)))
        self.wq, self.wk, self.wv, self.wo = (dense(d, d) for _ in range(4))
        self.ln2 = (Tensor(np.ones(d)), Tensor(np.zeros(d)))
        self.w1, self.b1 = dense(d, hid), Tensor(np.zeros(hid))
        self.w2, self.b2 = dense(hid, d), Tensor(np.zeros(d))

    def __call__(self, fmap):
        n, d, h, w = fmap.shape
        x = _tokens(fmap)
        y = layer_norm(x, *self.ln1, self.eps)
        att = multi_head_attention(matmul(y, self.wq), matmul(y, self.wk), matmul(y, self.wv), self.heads)
        x = x + matmul(att, self.wo)
        y = layer_norm(x, *self.ln2, self.eps)
        x = x + matmul(gelu(matmul(y, self.w1) + self.b1), self.w2) + self.b2
        return x.transpose(0, 2, 1).reshape(n, d, h, w)


class AdapterStack:
    """``L`` frozen ViT layers; the last ``k`` are each followed by their own
    box adapter.

    ViT weights depend only on ``(seed, L, d)``, so stacks that differ only in
    ``k`` share the same frozen backbone.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        vit_seq, adapter_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        d = cfg.adapter.d
        self.layers = [
            ViTLayer(d, cfg.vit_heads, cfg.vit_ffn_ratio, rng=np.random.default_rng(s), eps=cfg.adapter.eps)
            for s in vit_seq.spawn(cfg.total_layers)
        ]
        seeds = adapter_seq.spawn(cfg.total_layers)
        self.adapters = {
            l: BoxAdapter(cfg.adapter, rng=np.random.default_rng(seeds[l - 1]))
            for l in cfg.adapter_layer_indices
        }

    def parameters(self):
        return [p for l in sorted(self.adapters) for p in self.adapters[l].parameters()]

    def __call__(self, feat, boxes):
        return vit_stack_forward(feat, boxes, self)


def vit_stack_forward(feat, boxes, stack_, use_adapters=True):
    """Run the stack; ``use_adapters=False`` gives the adapter-free baseline."""
    out = as_tensor(feat)
    if out.ndim != 4 or out.shape[1] != stack_.cfg.adapter.d:
        raise ConfigurationError(f"input {out.shape} does not match d={stack_.cfg.adapter.d}")
    boxes = list(boxes)
    for l, layer in enumerate(stack_.layers, start=1):
        out = layer(out)
        if use_adapters and l in stack_.adapters:
            out = stack_.adapters[l](out, boxes)
    return out


def count_trainable_params(stack_, *lora_layers):
    """Trainable scalars in the adapters (and any LoRA layers); frozen ViT
    weights are excluded."""
    total = sum(p.size for p in stack_.parameters()) if stack_ is not None else 0
    return total + sum(p.size for layer in lora_layers for p in layer.parameters())
