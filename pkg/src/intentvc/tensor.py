"""Float64 tensors with a reverse-mode autodiff tape.

Only the operations the box adapter and the synthetic ViT need are
provided: elementwise add/mul, (batched) matmul, reshape/transpose,
reductions, softmax, layer norm, tanh-GELU, 1x1 convolution, multi-head
attention and a LoRA-wrapped linear layer.  Every op records a closure that
maps the output gradient to input gradients; ``Tensor.backward`` replays the
tape in reverse topological order.

Example::

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> (x * x).sum().backward()
    >>> x.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, EvaluationError

__all__ = [
    "Tensor",
    "as_tensor",
    "stack",
    "matmul",
    "layer_norm",
    "softmax",
    "conv1x1",
    "gelu",
    "multi_head_attention",
    "LinearLoRA",
    "lora_forward",
    "GradCheckReport",
    "grad_check",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def to_dict(self):
        """JSON-friendly dump ``{"shape": [...], "data": [...]}`` (row-major)."""
        return {"shape": list(self.shape), "data": self.data.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, doc, requires_grad=False):
        shape = tuple(int(n) for n in doc["shape"])
        data = np.asarray(doc["data"], dtype=np.float64)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise DimensionError(f"{data.size} values do not fill shape {shape}")
        return cls(data.reshape(shape), requires_grad=requires_grad)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor on the tape."""
        if not self.requires_grad:
            raise EvaluationError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64).reshape(self.shape)

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        src = self.shape

        def back(g):
            full = np.zeros(src)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(np.array(self.data[index], dtype=np.float64), (self,), back)

    # -- shape ops ---------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None
        return Tensor._from_op(data, (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),)
        )

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        src = self.shape
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._from_op(np.asarray(data, dtype=np.float64), (self,), back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def stack(tensors, axis=0):
    """Join same-shape tensors along a new ``axis``."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("stack() needs at least one tensor")
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(data, tuple(tensors), back)


def matmul(a, b):
    """Matrix product over the last two axes; leading batch axes must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._from_op(out, (a, b), back)


def _channel_view(param, ndim, axis):
    shape = [1] * ndim
    shape[axis] = -1
    return param.reshape(shape)


def layer_norm(x, gamma, beta, eps=1e-5, axis=-1):
    """Normalize ``x`` to zero mean / unit variance along ``axis``, then apply
    the per-channel affine ``gamma * xhat + beta``.

    ``axis=-1`` suits token sequences ``[..., L, d]``; ``axis=1`` suits
    feature maps ``[N, d, h, w]``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    axis = axis % x.ndim
    c = x.shape[axis]
    if c == 0:
        raise DimensionError("layer_norm over a zero-length channel dimension")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")

    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_view = _channel_view(gamma.data, x.ndim, axis)
    b_view = _channel_view(beta.data, x.ndim, axis)
    out = xhat * g_view + b_view
    other = tuple(i for i in range(x.ndim) if i != axis)

    def back(g):
        dxhat = g * g_view
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = (g * xhat).sum(axis=other)
        dbeta = g.sum(axis=other)
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), back)


def softmax(x, axis=-1):
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), back)


def gelu(x):
    """Tanh-approximation GELU."""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + _GELU_K * xd**3))
    y = 0.5 * xd * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return Tensor._from_op(y, (x,), back)


def conv1x1(x, weight, bias):
    """Per-pixel linear map ``[N, d_in, h, w] -> [N, d_out, h, w]``.

    Computed as pixels-to-rows, one matmul with ``weight.T``, plus bias.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4:
        raise DimensionError(f"conv1x1 expects [N, C, h, w], got {x.shape}")
    n, c_in, h, w = x.shape
    if weight.ndim != 2 or weight.shape[1] != c_in:
        raise DimensionError(f"weight {weight.shape} does not accept {c_in} input channels")
    c_out = weight.shape[0]
    if bias.shape != (c_out,):
        raise DimensionError(f"bias must have shape ({c_out},), got {bias.shape}")

    rows = x.data.transpose(0, 2, 3, 1).reshape(-1, c_in)
    wd = weight.data
    out = (rows @ wd.T + bias.data).reshape(n, h, w, c_out).transpose(0, 3, 1, 2)

    def back(g):
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dx = (g_rows @ wd).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
        return dx, g_rows.T @ rows, g_rows.sum(axis=0)

    return Tensor._from_op(out, (x, weight, bias), back)


def multi_head_attention(q, k, v, heads):
    """Scaled dot-product attention split over ``heads``; heads are concatenated
    back to width ``d`` with no output projection.

    Accepts ``[L, d]`` operands or a leading batch axis ``[B, L, d]``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if heads < 1:
        raise ConfigurationError("heads must be >= 1")
    unbatched = q.ndim == 2
    if unbatched:
        q, k, v = (t.reshape((1,) + t.shape) for t in (q, k, v))
    if not (q.ndim == k.ndim == v.ndim == 3):
        raise DimensionError("attention operands must be [L, d] or [B, L, d]")
    b, lq, d = q.shape
    if k.shape[0] != b or v.shape[0] != b or k.shape[2] != d or v.shape[2] != d:
        raise DimensionError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    if k.shape[1] != v.shape[1]:
        raise DimensionError("keys and values must have the same length")
    if d % heads:
        raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    lk = k.shape[1]

    qh = q.reshape(b, lq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b, lk, heads, dh).transpose(0, 2, 3, 1)
    vh = v.reshape(b, lk, heads, dh).transpose(0, 2, 1, 3)
    scores = matmul(qh, kh) * (1.0 / math.sqrt(dh))
    out = matmul(softmax(scores, axis=-1), vh)
    out = out.transpose(0, 2, 1, 3).reshape(b, lq, d)
    return out.reshape(lq, d) if unbatched else out


class LinearLoRA:
    """Frozen linear layer plus a trainable low-rank update.

    ``y = x W^T + b + scale * (x A^T) B^T`` with ``A`` of shape ``r x d_in`` and
    ``B`` of shape ``d_out x r``.  ``B`` starts at zero so a fresh layer is
    exactly the base layer.
    """

    def __init__(self, d_in, d_out, rank=128, scale=1.0, rng=None,
                 base_weight=None, base_bias=None):
        if rank < 1:
            raise ConfigurationError("LoRA rank must be positive")
        rng = np.random.default_rng(rng)
        if base_weight is None:
            base_weight = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in))
        if base_bias is None:
            base_bias = np.zeros(d_out)
        self.base_weight = Tensor(base_weight)
        self.base_bias = Tensor(base_bias)
        if self.base_weight.shape != (d_out, d_in) or self.base_bias.shape != (d_out,):
            raise DimensionError("base weight/bias do not match (d_out, d_in)")
        self.lora_A = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(rank, d_in)),
                             requires_grad=True, name="lora_A")
        self.lora_B = Tensor(np.zeros((d_out, rank)), requires_grad=True, name="lora_B")
        self.rank = rank
        self.scale = float(scale)

    @property
    def d_in(self):
        return self.base_weight.shape[1]

    @property
    def d_out(self):
        return self.base_weight.shape[0]

    def base(self, x):
        return matmul(as_tensor(x), self.base_weight.T) + self.base_bias

    def parameters(self):
        return [self.lora_A, self.lora_B]

    def __call__(self, x):
        return lora_forward(self, x)


def lora_forward(layer, x):
    x = as_tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    if x.shape[-1] != layer.d_in:
        raise DimensionError(f"input width {x.shape[-1]} != layer d_in {layer.d_in}")
    update = matmul(matmul(x, layer.lora_A.T), layer.lora_B.T)
    out = layer.base(x) + update * layer.scale
    return out.reshape(-1) if squeeze else out


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: list = field(default_factory=list)
    worst: tuple = None
    n_entries: int = 0

    def passed(self, tol):
        return bool(self.max_rel_err <= tol)


def _scalar(out):
    val = out.data.reshape(-1)
    if val.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    v = float(val[0])
    if not math.isfinite(v):
        raise EvaluationError(f"function evaluated to {v}")
    return v


# Central-difference stencils: (offsets in units of step, weights, divisor).
_STENCILS = {
    2: ((1, -1), (1.0, -1.0), 2.0),
    4: ((2, 1, -1, -2), (-1.0, 8.0, -8.0, 1.0), 12.0),
}


def grad_check(f, params, step=1e-4, order=2):
    """Compare autodiff gradients of ``f()`` against central differences.

    ``f`` takes no arguments and reads ``params`` (tensors) by closure.  The
    relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.  Parameter
    data is perturbed in place and restored before returning.

    ``order=2`` is the two-point difference ``(f(x+h) - f(x-h)) / 2h`` with
    O(h^2) truncation error; ``order=4`` uses the four-point stencil with
    O(h^4) error, which tolerates a larger step and so less roundoff.
    """
    if step <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    if order not in _STENCILS:
        raise ConfigurationError(f"order must be one of {sorted(_STENCILS)}, got {order}")
    offsets, weights, divisor = _STENCILS[order]
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    _scalar(out)
    if out.requires_grad:
        out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    report = GradCheckReport(max_rel_err=0.0)
    for pi, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.flat
        worst_here = 0.0
        for i in range(p.data.size):
            orig = flat[i]
            acc = 0.0
            for off, w in zip(offsets, weights):
                flat[i] = orig + off * step
                acc += w * _scalar(f())
            flat[i] = orig
            num = acc / (divisor * step)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if err > worst_here:
                worst_here = err
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (pi, i, float(a), float(num))
        report.per_param.append(worst_here)
        report.n_entries += p.data.size
    return report
