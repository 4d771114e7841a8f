"""Reverse-mode autodiff on a tiny expression, checked against central
differences, and a LoRA layer that starts out equal to its frozen base."""

import numpy as np

from intentvc.tensor import LinearLoRA, Tensor, grad_check, lora_forward

rng = np.random.default_rng(0)

# A scalar loss built from a matmul and a sum; backward() fills .grad.
w = Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)
x = Tensor(rng.uniform(-1, 1, (4, 3)))
loss = ((x @ w) * (x @ w)).sum()
loss.backward()
print("loss:", round(loss.item(), 6))
print("dloss/dw:\n", np.round(w.grad, 6))

# grad_check perturbs every entry and compares against autodiff.
report = grad_check(lambda: ((x @ w) * (x @ w)).sum(), [w])
print(f"grad_check max relative error: {report.max_rel_err:.2e}")

# LoRA: B starts at zero, so the wrapped layer reproduces the base layer.
layer = LinearLoRA(6, 4, rank=2, rng=1)
inp = Tensor(rng.normal(size=(5, 6)))
same = np.array_equal(lora_forward(layer, inp).data, layer.base(inp).data)
print("LoRA output equals frozen base at init:", same)

# Only the low-rank factors collect gradients.
lora_forward(layer, inp).sum().backward()
print("base weight grad:", layer.base_weight.grad, "| lora_A grad shape:", layer.lora_A.grad.shape)
