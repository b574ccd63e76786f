"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the grading backbone actually uses are implemented:
conv2d (dense/grouped/depthwise), linear, layer_norm, softmax, log_softmax,
gelu, batched matmul, and the handful of structural ops (reshape, transpose,
mean, sum, elementwise add/mul) needed to wire them together.

Gradients are recorded on an explicit :class:`GradTape`. When no tape is
active, ops run forward-only and keep no references to intermediates, which
is what inference uses. Every op validates that its output is finite;
NaN/Inf never propagates silently.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients.

    ``data`` is always a C-contiguous float32 or float64 ndarray. ``grad``
    is populated (same shape and dtype as ``data``) by :func:`backward` for
    tensors with ``requires_grad=True`` that participated in the loss.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__


class GradTape:
    """Ordered record of executed ops, replayed in reverse by :func:`backward`.

    Use as a context manager::

        with GradTape() as tape:
            loss = ...
        backward(loss, tape)
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._records.append((output, inputs, backward_fn))
        self._output_ids.add(id(output))

    def __len__(self) -> int:
        return len(self._records)


_ACTIVE_TAPES: list[GradTape] = []


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _result(
    data: np.ndarray,
    inputs: tuple[Tensor, ...],
    op: str,
    backward_fn: Callable,
) -> Tensor:
    out = Tensor(_finite(data, op), requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad and _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].record(out, inputs, backward_fn)
    return out


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate ``grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    ``loss`` must be a scalar produced while ``tape`` was active. Gradients of
    tensors that did not participate are left untouched.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._output_ids:
        raise ValueError("loss tensor was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for output, inputs, backward_fn in reversed(tape._records):
        g = grads.get(id(output))
        if g is None:
            continue
        for inp, gi in zip(inputs, backward_fn(g)):
            if gi is None:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi

    for output, inputs, _ in tape._records:
        for t in inputs + (output,):
            if t.requires_grad and id(t) in grads:
                t.grad = np.ascontiguousarray(grads[id(t)])


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), "mul_scalar", lambda g: (g * s,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    in_shape = a.shape
    return _result(
        a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(in_shape),)
    )


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        "transpose",
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(
        np.asarray(a.data.sum()).reshape(()),
        (a,),
        "sum",
        lambda g: (np.broadcast_to(g, shape).astype(a.data.dtype),),
    )


def mean(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim
    n = a.shape[axis]

    def bw(g: np.ndarray):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _result(a.data.mean(axis=axis), (a,), "mean", bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product. Leading (batch) dims must match exactly."""
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors with ndim >= 2")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ {a.shape} vs {b.shape}")

    def bw(g: np.ndarray):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return _result(np.matmul(a.data, b.data), (a, b), "matmul", bw)


# ---------------------------------------------------------------------------
# neural-network ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the trailing axis: ``y = x @ weight.T + bias``."""
    tensors = (x, weight) if bias is None else (x, weight, bias)
    _check_same_dtype("linear", *tensors)
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"linear: input trailing dim {x.shape[-1]} != weight D_in {d_in}")
    if bias is not None and bias.shape != (d_out,):
        raise ValueError(f"linear: bias shape {bias.shape} != ({d_out},)")

    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g: np.ndarray):
        g2 = g.reshape(-1, d_out)
        x2 = x.data.reshape(-1, d_in)
        gx = (g @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    return _result(out, tensors, "linear", bw)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
    groups: int = 1,
) -> Tensor:
    """2-D convolution on NCHW input with OIHW weights.

    Supports grouped convolution; ``groups == in_channels`` is the depthwise
    case used by the attention projections.
    """
    tensors = (x, weight) if bias is None else (x, weight, bias)
    _check_same_dtype("conv2d", *tensors)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, c, h, w = x.shape
    o, c_per_g, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if c % groups != 0 or o % groups != 0:
        raise ValueError(f"conv2d: channels ({c} in, {o} out) not divisible by groups={groups}")
    if c_per_g != c // groups:
        raise ValueError(
            f"conv2d: weight expects {c_per_g} channels/group, input provides {c // groups}"
        )
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
    h_out = (h + 2 * ph - kh) // sh + 1
    w_out = (w + 2 * pw - kw) // sw + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(
            f"conv2d: output extent {h_out}x{w_out} < 1 for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, h_out, w_out, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )
    og = o // groups
    vg = view.reshape(n, groups, c_per_g, h_out, w_out, kh, kw)
    wg = weight.data.reshape(groups, og, c_per_g, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", vg, wg, optimize=True).reshape(n, o, h_out, w_out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g: np.ndarray):
        gg = g.reshape(n, groups, og, h_out, w_out)
        gw = np.einsum("ngohw,ngchwij->gocij", gg, vg, optimize=True).reshape(weight.shape)
        t = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True).reshape(
            n, c, h_out, w_out, kh, kw
        )
        gx_pad = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gx_pad[:, :, i : i + h_out * sh : sh, j : j + w_out * sw : sw] += t[
                    :, :, :, :, i, j
                ]
        gx = gx_pad[:, :, ph : ph + h, pw : pw + w]
        if bias is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return _result(out, tensors, "conv2d", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis, then apply the gamma/beta affine."""
    _check_same_dtype("layer_norm", x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bw(g: np.ndarray):
        gxhat = g * gamma.data
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (gx, ggamma, gbeta)

    return _result(out, (x, gamma, beta), "layer_norm", bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilized by max-subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), "softmax", bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g: np.ndarray):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), "log_softmax", bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + special.erf(x.data / _SQRT_2))
    out = x.data * cdf

    def bw(g: np.ndarray):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(out, (x,), "gelu", bw)
