"""
Deterministic float64 tensor engine with tape-based reverse-mode differentiation.

Every primitive the architecture needs lives here: broadcasting arithmetic,
batched matmul, temporal (1D) and spatial (2D) convolutions, layer norm,
softmax / log-softmax, exact GELU, L2 normalisation and embedding lookup.

Gradients are only recorded while a ``ComputationTape`` is active:

    with ComputationTape() as tape:
        loss = model_loss(...)
    backward(loss, tape)

Outside a tape the same functions run forward-only, which is what evaluation
uses.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .exceptions import ConfigurationError, ContractError, DimensionError

logger = logging.getLogger(__name__)

Index = Union[int, slice, np.ndarray, Tuple]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """n-dimensional float64 array with an optional gradient.

    ``data`` is a C-ordered numpy array, i.e. a flat row-major buffer plus a
    shape. ``grad`` is populated by :func:`backward` on leaf tensors with
    ``requires_grad``.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        # internal constructor: adopts the array without copying
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar, all routed through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        return swapaxes(self, axis1, axis2)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named model tensor. Frozen parameters never carry gradients."""

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def tensor(self) -> Tensor:
        return self

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)
        if not value:
            self.grad = None

    def __repr__(self) -> str:
        return (
            f"Parameter(name={self.name!r}, shape={self.shape}, "
            f"trainable={self.trainable})"
        )


class TapeNode:
    __slots__ = ("op", "output", "inputs", "backward_fn")

    def __init__(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class ComputationTape:
    """Ordered record of the primitive ops executed while the tape is active"""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        self.nodes.append(TapeNode(op, output, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "ComputationTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.remove(self)


_ACTIVE_TAPES: List[ComputationTape] = []


def active_tape() -> Optional[ComputationTape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _record(op: str, out: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(op, result, inputs, backward_fn)
    return result


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, tape: ComputationTape) -> None:
    """Replay ``tape`` in reverse and accumulate dloss/dleaf into ``leaf.grad``.

    Accumulation is additive; callers zero gradients between steps.

    Raises:
        ContractError: If ``loss`` is not a scalar
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("Loss does not depend on any trainable tensor; nothing to do")
        return

    produced = {id(node.output) for node in tape.nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}

    for node in reversed(tape.nodes):
        grad_out = grads.pop(id(node.output), None)
        if grad_out is None:
            continue
        input_grads = node.backward_fn(grad_out)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
            if key not in produced:
                leaves[key] = tensor

    for key, tensor in leaves.items():
        grad = grads.get(key)
        if grad is None:
            continue
        grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record("div", out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def maximum(a, floor: float) -> Tensor:
    """Clamp from below; the gradient is passed only where the input wins"""
    a = as_tensor(a)
    keep = a.data >= floor
    return _record("maximum", np.maximum(a.data, floor), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), grad_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, axis1, axis2)
    return _record("swapaxes", out, (a,), lambda g: (np.swapaxes(g, axis1, axis2),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index: Index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _record("getitem", np.array(out, dtype=np.float64), (a,), grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}"
        )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record("concat", out, tensors, grad_fn)


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]``; repeated ids accumulate gradient"""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(
            f"embedding ids must lie in [0, {weight.shape[0]}), got range "
            f"[{ids.min()}, {ids.max()}]"
        )

    def grad_fn(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _record("embedding", weight.data[ids], (weight,), grad_fn)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n] -> [..., m, n]``

    Raises:
        DimensionError: If inner dimensions disagree or batch dims do not broadcast
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast"
        )

    def grad_fn(g):
        grad_a = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        grad_b = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return _record("matmul", a.data @ b.data, (a, b), grad_fn)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# Convolutions (zero padding, unit stride)
# ---------------------------------------------------------------------------


def _check_odd(k: int, op: str) -> None:
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"{op}: kernel size must be odd and positive, got {k}")


def _flat_outer(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def conv1d_temporal(x, kernel, bias) -> Tensor:
    """Convolve ``x[..., T, L, c]`` along T, independently per token position.

    ``kernel`` is ``[k, c_in, c_out]``; output frame t sums
    ``x[t + j - (k-1)/2] @ kernel[j]`` over taps j, with zero padding.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    k = kernel.shape[0]
    _check_odd(k, "conv1d_temporal")
    if x.ndim < 3 or kernel.ndim != 3 or kernel.shape[1] != x.shape[-1]:
        raise DimensionError(
            f"conv1d_temporal: input {x.shape} does not match kernel {kernel.shape}"
        )
    if bias.shape != (kernel.shape[2],):
        raise DimensionError(f"conv1d_temporal: bias {bias.shape} vs kernel {kernel.shape}")

    pad = (k - 1) // 2
    frames = x.shape[-3]
    widths = [(0, 0)] * x.ndim
    widths[-3] = (pad, pad)
    padded = np.pad(x.data, widths)

    out = np.zeros(x.shape[:-1] + (kernel.shape[2],)) + bias.data
    for j in range(k):
        out += padded[..., j:j + frames, :, :] @ kernel.data[j]

    def grad_fn(g):
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.zeros_like(kernel.data)
        for j in range(k):
            grad_padded[..., j:j + frames, :, :] += g @ kernel.data[j].T
            grad_kernel[j] = _flat_outer(padded[..., j:j + frames, :, :], g)
        grad_x = grad_padded[..., pad:pad + frames, :, :]
        grad_bias = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return grad_x, grad_kernel, grad_bias

    return _record("conv1d_temporal", out, (x, kernel, bias), grad_fn)


def conv2d_spatial(x, kernel, bias) -> Tensor:
    """Per-frame 2D convolution of ``x[..., h, w, c]`` with ``kernel[k, k, c_in, c_out]``"""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    k = kernel.shape[0]
    _check_odd(k, "conv2d_spatial")
    if (
        x.ndim < 3
        or kernel.ndim != 4
        or kernel.shape[1] != k
        or kernel.shape[2] != x.shape[-1]
    ):
        raise DimensionError(
            f"conv2d_spatial: input {x.shape} does not match kernel {kernel.shape}"
        )
    if bias.shape != (kernel.shape[3],):
        raise DimensionError(f"conv2d_spatial: bias {bias.shape} vs kernel {kernel.shape}")

    pad = (k - 1) // 2
    h, w = x.shape[-3], x.shape[-2]
    widths = [(0, 0)] * x.ndim
    widths[-3] = (pad, pad)
    widths[-2] = (pad, pad)
    padded = np.pad(x.data, widths)

    out = np.zeros(x.shape[:-1] + (kernel.shape[3],)) + bias.data
    for a in range(k):
        for b in range(k):
            out += padded[..., a:a + h, b:b + w, :] @ kernel.data[a, b]

    def grad_fn(g):
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.zeros_like(kernel.data)
        for a in range(k):
            for b in range(k):
                grad_padded[..., a:a + h, b:b + w, :] += g @ kernel.data[a, b].T
                grad_kernel[a, b] = _flat_outer(padded[..., a:a + h, b:b + w, :], g)
        grad_x = grad_padded[..., pad:pad + h, pad:pad + w, :]
        grad_bias = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return grad_x, grad_kernel, grad_bias

    return _record("conv2d_spatial", out, (x, kernel, bias), grad_fn)


# ---------------------------------------------------------------------------
# Normalisation and activations
# ---------------------------------------------------------------------------


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}"
        )

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        grad_gamma = (g * xhat).reshape(-1, d).sum(axis=0)
        grad_beta = g.reshape(-1, d).sum(axis=0)
        gxhat = g * gamma.data
        grad_x = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta

    return _record("layer_norm", out, (x, gamma, beta), grad_fn)


def softmax(x, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-subtracted softmax; entries where ``mask`` is False get probability 0"""
    x = as_tensor(x)
    logits = x.data if mask is None else np.where(mask, x.data, -np.inf)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), grad_fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), grad_fn)


def gelu(x) -> Tensor:
    """Exact GELU ``x * Phi(x)`` with the erf-based Gaussian CDF"""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    out = x.data * cdf

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record("gelu", out, (x,), grad_fn)


def l2_normalize(x, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``"""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    clamped = norm <= eps
    denom = np.where(clamped, eps, norm)
    out = x.data / denom

    def grad_fn(g):
        projected = g - out * (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clamped, g, projected) / denom,)

    return _record("l2_normalize", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# Composite helpers
# ---------------------------------------------------------------------------


def cosine_similarity(u, v, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis (broadcasting over leading dims)"""
    return tsum(l2_normalize(u, eps=eps) * l2_normalize(v, eps=eps), axis=-1)


def cosine_similarity_matrix(a, b, eps: float = 1e-8) -> Tensor:
    """Pairwise cosine similarities ``[n, d] x [m, d] -> [n, m]``"""
    return matmul(l2_normalize(a, eps=eps), swapaxes(l2_normalize(b, eps=eps), -1, -2))


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits[B, C]``

    Raises:
        ContractError: If a target index is out of range
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    classes = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise ContractError(
            f"target indices must lie in [0, {classes}), got {targets.tolist()}"
        )
    log_probs = log_softmax(logits, axis=-1)
    picked = getitem(log_probs, (np.arange(targets.shape[0]), targets))
    return neg(mean(picked))
