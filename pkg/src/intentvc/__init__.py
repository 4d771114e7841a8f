"""Box-conditioned video captioning toolkit: a numpy autodiff core, the box
adapter, dataset tooling, prompt building, caption metrics and ensembling."""

__version__ = "0.1.0"

from .adapter import (
    AdapterStack,
    AdapterStackConfig,
    BoxAdapter,
    BoxAdapterConfig,
    NormalizedBox,
    count_trainable_params,
    extract_region,
    global_local_fuse,
    roi_align,
    vit_stack_forward,
)
from .dataset import (
    load_annotations,
    make_split,
    route_by_length,
    sample_frames_infer,
    sample_frames_train,
    validate_corpus,
)
from .ensemble import SimilarityConfig, fuse_by_length, similarity, vote, vote_corpus
from .metrics import bleu4, cider, meteor_lite, rouge_l, score_all
from .prompts import build_bundle, build_instruction, normalize_box, render_visual_prompt
from .tensor import LinearLoRA, Tensor, grad_check
