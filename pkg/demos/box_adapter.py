"""The box adapter inside a small ViT-like stack: identity at init, a
trainable parameter count per adapter, and gradients through the RoI path."""

import numpy as np

from intentvc.adapter import (
    AdapterStack,
    AdapterStackConfig,
    BoxAdapterConfig,
    NormalizedBox,
    count_trainable_params,
    roi_align,
    vit_stack_forward,
)
from intentvc.tensor import Tensor, grad_check

rng = np.random.default_rng(0)

# RoI align turns a box on a feature map into a fixed-size grid.
fmap = Tensor(np.arange(16.0).reshape(1, 4, 4))
print("2x2 RoI over the left half:\n", roi_align(fmap, NormalizedBox(0.0, 0.0, 0.5, 1.0), 2, 2).data[0])

# Six layers, adapters after the last five of them.
cfg = AdapterStackConfig(6, 5, BoxAdapterConfig(d=8, heads=2, roi_h=2, roi_w=2), seed=0)
stack = AdapterStack(cfg)
print("adapters sit after layers", cfg.adapter_layer_indices)

feat = Tensor(rng.normal(size=(2, 8, 4, 4)))
boxes = [NormalizedBox(0.1, 0.2, 0.6, 0.9), NormalizedBox.sentinel()]
diff = np.abs(stack(feat, boxes).data - vit_stack_forward(feat, boxes, stack, use_adapters=False).data).max()
print("max |with adapters - without| at init:", diff)
print("trainable parameters:", count_trainable_params(stack))

# Emulate training by perturbing the adapters, then check gradients.
small = AdapterStack(AdapterStackConfig(2, 1, BoxAdapterConfig(d=8, heads=2, roi_h=2, roi_w=2), seed=1))
for ad in small.adapters.values():
    ad.perturb(rng)
probe = rng.uniform(-1, 1, (2, 8, 4, 4))
rep = grad_check(lambda: (small(feat, boxes) * probe).sum(), small.parameters(), step=1e-3, order=4)
print(f"perturbed adapter, four-point stencil: max relative error {rep.max_rel_err:.2e} over {rep.n_entries} entries")
