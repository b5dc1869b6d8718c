"""
A small reverse-mode differentiation engine over numpy arrays.

Every differentiable operation is a `Function` subclass with a `forward` over raw
arrays and a `backward` returning one adjoint per input. Calling `Function.apply`
while a `Tape` is active records the call; `Tape.backward` then replays the record
in exact reverse execution order. Operations preserve the dtype of their inputs so
the same graph can be evaluated in float64 by `gradcheck` while training stays in
float32.
"""

import functools
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from library.exceptions import DegenerateStatisticsError, DimensionError, ParameterError
from library.types import NormMode

DTYPE = np.float32

ArrayLike = Union[np.ndarray, float, int]


class Tensor:

    """
    A dense float array with an optional gradient buffer. Model activations are
    4D `(n, c, h, w)`; pooled vectors are 2D `(n, c)` and losses are 0D.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(
        self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None
    ) -> None:
        array = np.asarray(data)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(DTYPE)

        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError("gradient", self.data.shape, grad.shape)

        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad


class Tape:

    """
    An ordered record of executed operations. A tape is single-owner: enter it as a
    context manager on the thread that runs the forward pass.
    """

    _local = threading.local()

    def __init__(self) -> None:
        self.records: list["Function"] = []
        self.visited: list[int] = []

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        return self

    def __exit__(self, *args) -> None:
        Tape._stack().pop()

    @classmethod
    def _stack(cls) -> list["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []

        return cls._local.stack

    @classmethod
    def current(cls) -> Optional["Tape"]:
        stack = cls._stack()
        return stack[-1] if stack else None

    def record(self, function: "Function") -> None:
        self.records.append(function)

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """
        Propagate adjoints from `output` back to every tensor that requires a
        gradient. Gradients accumulate into `Tensor.grad`.

        Parameters
        ----------
        - `output` : Tensor
            Usually a scalar loss. Non-scalar outputs need an explicit `grad`.
        - `grad` : Optional[np.ndarray]
            The upstream adjoint. Defaults to ones for scalar outputs.
        """

        if grad is None:
            if output.data.size != 1:
                raise ParameterError("A non-scalar output needs an explicit upstream gradient.")

            grad = np.ones_like(output.data)

        output.accumulate(np.asarray(grad, dtype=output.data.dtype))
        self.visited = []

        for index in range(len(self.records) - 1, -1, -1):
            function = self.records[index]
            upstream = function.output.grad if function.output is not None else None
            if upstream is None:
                continue

            self.visited.append(index)
            adjoints = function.backward(upstream)
            for tensor, adjoint in zip(function.inputs, adjoints):
                if adjoint is None or not tensor.requires_grad:
                    continue

                tensor.accumulate(adjoint)

    def clear(self) -> None:
        for function in self.records:
            function.saved = {}
            function.output = None

        self.records = []


class Function:

    """
    Base class for differentiable operations.

    Subclasses implement `forward` over the raw arrays of their inputs and
    `backward`, which receives the adjoint of the output and returns a tuple with
    one adjoint (or None) per input.
    """

    def __init__(self) -> None:
        self.inputs: tuple[Tensor, ...] = ()
        self.output: Optional[Tensor] = None
        self.saved: dict = {}

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        function = cls()
        function.inputs = tensors

        data = function.forward(*(tensor.data for tensor in tensors), **kwargs)
        requires_grad = any(tensor.requires_grad for tensor in tensors)
        output = Tensor(data, requires_grad=requires_grad)

        tape = Tape.current()
        if requires_grad and tape is not None:
            function.output = output
            tape.record(function)

        return output


def _check_4d(array: np.ndarray, what: str) -> None:
    if array.ndim != 4:
        raise DimensionError(f"{what}.ndim", 4, array.ndim)


# ----------------------------------------------------------------------------------------
# Elementwise and structural operations


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape:
            raise DimensionError("shape", a.shape, b.shape)

        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape:
            raise DimensionError("shape", a.shape, b.shape)

        return a - b

    def backward(self, grad):
        return grad, -grad


class Scale(Function):
    def forward(self, a: np.ndarray, factor: float) -> np.ndarray:
        self.saved["factor"] = factor
        return a * a.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.saved["factor"]),)


class Square(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["a"] = a
        return a * a

    def backward(self, grad):
        return (2 * self.saved["a"] * grad,)


class ReLU(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        mask = a > 0
        self.saved["mask"] = mask
        return np.where(mask, a, a.dtype.type(0))

    def backward(self, grad):
        return (np.where(self.saved["mask"], grad, grad.dtype.type(0)),)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: tuple) -> np.ndarray:
        self.saved["shape"] = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved["shape"]),)


class Concat(Function):
    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        self.saved["sizes"] = [array.shape[0] for array in arrays]
        return np.concatenate(arrays, axis=0)

    def backward(self, grad):
        bounds = np.cumsum([0] + self.saved["sizes"])
        return tuple(grad[bounds[i] : bounds[i + 1]] for i in range(len(bounds) - 1))


class SliceBatch(Function):
    def forward(self, a: np.ndarray, start: int, stop: int) -> np.ndarray:
        self.saved["range"] = (start, stop)
        self.saved["shape"] = a.shape
        return a[start:stop]

    def backward(self, grad):
        start, stop = self.saved["range"]
        full = np.zeros(self.saved["shape"], dtype=grad.dtype)
        full[start:stop] = grad
        return (full,)


class SumChannels(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["shape"] = a.shape
        return a.sum(axis=1, keepdims=True)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.saved["shape"]).copy(),)


class Mean(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["shape"] = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad):
        shape = self.saved["shape"]
        size = int(np.prod(shape))
        return (np.full(shape, grad / size, dtype=grad.dtype),)


class MaskedMean(Function):
    def forward(self, a: np.ndarray, mask: np.ndarray) -> np.ndarray:
        if mask.shape != a.shape:
            raise DimensionError("mask", a.shape, mask.shape)

        count = int(mask.sum())
        if count == 0:
            raise ParameterError("Masked mean over an empty mask.")

        self.saved["mask"] = mask
        self.saved["count"] = count
        return np.asarray(np.where(mask, a, a.dtype.type(0)).sum() / count, dtype=a.dtype)

    def backward(self, grad):
        mask = self.saved["mask"]
        value = grad / self.saved["count"]
        return (np.where(mask, value, grad.dtype.type(0)).astype(grad.dtype),)


# ----------------------------------------------------------------------------------------
# Convolution and dense layers


def _im2col(
    x: np.ndarray, k: int, stride: int, pad: int, dilation: int
) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    span = dilation * (k - 1) + 1
    oh = (h + 2 * pad - span) // stride + 1
    ow = (w + 2 * pad - span) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError("spatial", f">= {span - 2 * pad}", (h, w))

    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(padded, (span, span), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :oh, :ow]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)

    return cols, oh, ow


class Conv2d(Function):
    def forward(
        self,
        x: np.ndarray,
        weight: np.ndarray,
        bias: np.ndarray,
        stride: int = 1,
        pad: int = 0,
        dilation: int = 1,
    ) -> np.ndarray:
        _check_4d(x, "input")
        _check_4d(weight, "weight")
        if weight.shape[1] != x.shape[1]:
            raise DimensionError("channels", weight.shape[1], x.shape[1])
        if weight.shape[2] != weight.shape[3]:
            raise DimensionError("kernel", "square kernel", weight.shape[2:])
        if bias.shape != (weight.shape[0],):
            raise DimensionError("bias", (weight.shape[0],), bias.shape)
        if stride < 1 or pad < 0 or dilation < 1:
            raise ParameterError(f"Invalid convolution geometry {stride=} {pad=} {dilation=}.")

        n, c, h, w = x.shape
        out_channels, k = weight.shape[0], weight.shape[2]
        wmat = weight.reshape(out_channels, -1)

        self.saved.update(
            x_shape=x.shape, w_shape=weight.shape, stride=stride, pad=pad, dilation=dilation
        )

        if k == 1 and stride == 1 and pad == 0:
            flat = x.reshape(n, c, h * w)
            self.saved.update(flat=flat, wmat=wmat, pointwise=True)
            out = np.matmul(wmat, flat) + bias[None, :, None]
            return out.reshape(n, out_channels, h, w)

        cols, oh, ow = _im2col(x, k, stride, pad, dilation)
        self.saved.update(cols=cols, wmat=wmat, pointwise=False, out_hw=(oh, ow))

        out = cols @ wmat.T + bias
        return np.ascontiguousarray(out.reshape(n, oh, ow, out_channels).transpose(0, 3, 1, 2))

    def backward(self, grad):
        saved = self.saved
        n, c, h, w = saved["x_shape"]
        out_channels, _, k, _ = saved["w_shape"]
        wmat = saved["wmat"]

        if saved["pointwise"]:
            g = grad.reshape(n, out_channels, h * w)
            dweight = np.tensordot(g, saved["flat"], axes=([0, 2], [0, 2]))
            dbias = g.sum(axis=(0, 2))
            dx = np.matmul(wmat.T, g).reshape(n, c, h, w)
            return dx, dweight.reshape(saved["w_shape"]), dbias

        stride, pad, dilation = saved["stride"], saved["pad"], saved["dilation"]
        oh, ow = saved["out_hw"]

        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        dweight = (g2.T @ saved["cols"]).reshape(saved["w_shape"])
        dbias = g2.sum(axis=0)

        dcols = (g2 @ wmat).reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        dpadded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                y0, x0 = i * dilation, j * dilation
                dpadded[
                    :, :, y0 : y0 + stride * oh : stride, x0 : x0 + stride * ow : stride
                ] += dcols[:, :, i, j]

        dx = dpadded[:, :, pad : pad + h, pad : pad + w]
        return np.ascontiguousarray(dx), dweight, dbias


class Linear(Function):
    def forward(self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
        if x.ndim != 2:
            raise DimensionError("input.ndim", 2, x.ndim)
        if weight.shape[1] != x.shape[1]:
            raise DimensionError("channels", weight.shape[1], x.shape[1])

        self.saved.update(x=x, weight=weight)
        return x @ weight.T + bias

    def backward(self, grad):
        x, weight = self.saved["x"], self.saved["weight"]
        return grad @ weight, grad.T @ x, grad.sum(axis=0)


# ----------------------------------------------------------------------------------------
# Resampling


@dataclass
class BilinearPlan:

    """
    Precomputed corner indices and weights for bilinear reads. `index` and
    `weight` have shape `(n, 4, p)` over the flattened output pixels, `valid` has
    shape `(n, p)`.
    """

    index: np.ndarray
    weight: np.ndarray
    valid: np.ndarray
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]


def bilinear_plan(grid: np.ndarray, in_h: int, in_w: int) -> BilinearPlan:
    """
    Build a bilinear read plan for `grid` of shape `(n, h', w', 2)` holding `(x, y)`
    source coordinates in input pixel units. A read is valid when its coordinate lies
    inside `[0, w - 1] x [0, h - 1]`; invalid reads get zero weight.
    """

    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise DimensionError("grid", "(n, h, w, 2)", grid.shape)

    n, out_h, out_w, _ = grid.shape
    gx = grid[..., 0].reshape(n, -1)
    gy = grid[..., 1].reshape(n, -1)

    valid = (gx >= 0) & (gx <= in_w - 1) & (gy >= 0) & (gy <= in_h - 1)

    x0 = np.clip(np.floor(gx), 0, max(in_w - 2, 0))
    y0 = np.clip(np.floor(gy), 0, max(in_h - 2, 0))
    wx = np.where(valid, gx - x0, 0)
    wy = np.where(valid, gy - y0, 0)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.minimum(x0 + 1, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)

    index = np.stack(
        [y0 * in_w + x0, y0 * in_w + x1, y1 * in_w + x0, y1 * in_w + x1], axis=1
    )
    weight = np.stack(
        [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], axis=1
    )
    weight = np.where(valid[:, None, :], weight, 0).astype(grid.dtype)
    index = np.where(valid[:, None, :], index, 0)

    return BilinearPlan(index, weight, valid, (in_h, in_w), (out_h, out_w))


class GridSample(Function):
    def forward(self, x: np.ndarray, plan: BilinearPlan) -> np.ndarray:
        _check_4d(x, "input")
        n, c, h, w = x.shape
        if plan.in_hw != (h, w):
            raise DimensionError("spatial", plan.in_hw, (h, w))
        if plan.index.shape[0] != n:
            raise DimensionError("batch", n, plan.index.shape[0])

        self.saved.update(plan=plan, x_shape=x.shape)

        flat = x.reshape(n, c, h * w)
        weight = plan.weight.astype(x.dtype, copy=False)
        out = np.zeros((n, c, plan.index.shape[2]), dtype=x.dtype)
        for corner in range(4):
            values = np.take_along_axis(flat, plan.index[:, None, corner, :], axis=2)
            out += values * weight[:, None, corner, :]

        return out.reshape(n, c, *plan.out_hw)

    def backward(self, grad):
        plan: BilinearPlan = self.saved["plan"]
        n, c, h, w = self.saved["x_shape"]
        g = grad.reshape(n, c, -1)

        base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
        dx = np.zeros(n * c * h * w, dtype=np.float64)
        for corner in range(4):
            index = base + plan.index[:, None, corner, :]
            values = g * plan.weight[:, None, corner, :]
            dx += np.bincount(index.ravel(), weights=values.ravel(), minlength=dx.size)

        return (dx.astype(grad.dtype).reshape(n, c, h, w),)


@functools.lru_cache(maxsize=128)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """
    Interpolation matrix of shape `(n_out, n_in)` for the align-corners-false
    convention: source coordinate `(i + 0.5) * n_in / n_out - 0.5`, clamped at 0.
    """

    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0

    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, i0), 1 - lam)
    np.add.at(matrix, (rows, i1), lam)
    matrix.setflags(write=False)

    return matrix


class Resize(Function):
    def forward(self, x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
        _check_4d(x, "input")
        if out_h < 1 or out_w < 1:
            raise ParameterError(f"Resize target must be positive, got {out_h}x{out_w}.")

        ry = _resize_matrix(x.shape[2], out_h).astype(x.dtype)
        rx = _resize_matrix(x.shape[3], out_w).astype(x.dtype)
        self.saved.update(ry=ry, rx=rx)

        return np.matmul(np.matmul(ry, x), rx.T)

    def backward(self, grad):
        ry, rx = self.saved["ry"], self.saved["rx"]
        return (np.matmul(np.matmul(ry.T.astype(grad.dtype), grad), rx.astype(grad.dtype)),)


class AvgPoolAll(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_4d(x, "input")
        if x.shape[2] < 1 or x.shape[3] < 1:
            raise DimensionError("spatial", ">= 1", x.shape[2:])

        self.saved["shape"] = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.saved["shape"]
        share = grad / grad.dtype.type(h * w)
        return (np.broadcast_to(share[:, :, None, None], (n, c, h, w)).copy(),)


# ----------------------------------------------------------------------------------------
# Normalization


class L2Normalize(Function):
    def forward(self, x: np.ndarray, eps: float) -> np.ndarray:
        norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
        denom = np.maximum(norm, x.dtype.type(eps))
        y = x / denom

        self.saved.update(y=y, denom=denom, active=norm > eps)
        return y

    def backward(self, grad):
        y, denom, active = self.saved["y"], self.saved["denom"], self.saved["active"]
        projected = grad - y * (grad * y).sum(axis=1, keepdims=True)
        return (np.where(active, projected, grad) / denom,)


class BatchNorm(Function):
    def forward(
        self,
        x: np.ndarray,
        gamma: np.ndarray,
        beta: np.ndarray,
        running_mean: Optional[np.ndarray],
        running_var: Optional[np.ndarray],
        mode: NormMode,
        momentum: float,
        eps: float,
        mask: Optional[np.ndarray],
    ) -> np.ndarray:
        if x.ndim not in (2, 4):
            raise DimensionError("input.ndim", "2 or 4", x.ndim)
        if gamma.shape != (x.shape[1],):
            raise DimensionError("channels", gamma.shape[0], x.shape[1])

        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        view = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
        count = x.size // x.shape[1]

        if mask is not None:
            expected = (x.shape[0], 1, *x.shape[2:])
            if x.ndim != 4 or mask.shape != expected:
                raise DimensionError("mask", expected, mask.shape)
            count = int(mask.sum())

        if mode == "train":
            if count <= 1:
                raise DegenerateStatisticsError(
                    "Batch normalization in train mode needs more than one value per channel."
                )

            if mask is None:
                mean = x.mean(axis=axes)
                var = x.var(axis=axes)
            else:
                zero = x.dtype.type(0)
                mean = np.where(mask, x, zero).sum(axis=axes) / x.dtype.type(count)
                var = np.where(mask, np.square(x - mean.reshape(view)), zero).sum(axis=axes) / x.dtype.type(count)
            if running_mean is not None and running_var is not None:
                running_mean *= momentum
                running_mean += (1 - momentum) * mean
                running_var *= momentum
                running_var += (1 - momentum) * var * (count / (count - 1))
        else:
            if running_mean is None or running_var is None:
                raise ParameterError("Eval-mode batch normalization needs running statistics.")

            mean = running_mean.astype(x.dtype)
            var = running_var.astype(x.dtype)

        inv = 1 / np.sqrt(var + x.dtype.type(eps))
        xhat = (x - mean.reshape(view)) * inv.reshape(view)

        self.saved.update(
            xhat=xhat, inv=inv, gamma=gamma, axes=axes, view=view, count=count, mode=mode, mask=mask
        )
        return gamma.reshape(view) * xhat + beta.reshape(view)

    def backward(self, grad):
        saved = self.saved
        xhat, inv, gamma = saved["xhat"], saved["inv"], saved["gamma"]
        axes, view, count = saved["axes"], saved["view"], saved["count"]

        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * gamma.reshape(view)

        if saved["mode"] == "train":
            # Every position is normalized, only masked-in positions move the statistics.
            share = 1.0 if saved["mask"] is None else saved["mask"].astype(grad.dtype)
            dx = (inv.reshape(view) / count) * (
                count * dxhat
                - share * dxhat.sum(axis=axes).reshape(view)
                - share * xhat * (dxhat * xhat).sum(axis=axes).reshape(view)
            )
        else:
            dx = dxhat * inv.reshape(view)

        return dx, dgamma, dbeta


class CrossEntropy(Function):
    def forward(self, logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
        _check_4d(logits, "logits")
        if labels.shape != (logits.shape[0], *logits.shape[2:]):
            raise DimensionError("labels", (logits.shape[0], *logits.shape[2:]), labels.shape)

        count = int(mask.sum())
        if count == 0:
            raise ParameterError("Cross entropy over an empty label mask.")

        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)

        safe = np.where(mask, labels, 0)
        picked = np.take_along_axis(probs, safe[:, None], axis=1)[:, 0]
        nll = -np.log(np.maximum(picked, np.finfo(logits.dtype).tiny))

        self.saved.update(probs=probs, labels=safe, mask=mask, count=count)
        return np.asarray(np.where(mask, nll, 0).sum() / count, dtype=logits.dtype)

    def backward(self, grad):
        saved = self.saved
        dlogits = saved["probs"].copy()
        onehot = np.zeros_like(dlogits)
        np.put_along_axis(onehot, saved["labels"][:, None], 1, axis=1)
        dlogits -= onehot
        dlogits *= saved["mask"][:, None] * (grad / saved["count"])

        return (dlogits.astype(grad.dtype),)


# ----------------------------------------------------------------------------------------
# Functional interface


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def square(a: Tensor) -> Tensor:
    return Square.apply(a)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return Reshape.apply(a, shape=shape)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    return Concat.apply(*tensors)


def slice_batch(a: Tensor, start: int, stop: int) -> Tensor:
    return SliceBatch.apply(a, start=start, stop=stop)


def sum_channels(a: Tensor) -> Tensor:
    return SumChannels.apply(a)


def mean(a: Tensor) -> Tensor:
    return Mean.apply(a)


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    return MaskedMean.apply(a, mask=mask)


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
) -> Tensor:
    """
    2D cross-correlation. Output spatial size is
    `floor((h + 2 * pad - dilation * (k - 1) - 1) / stride) + 1`.
    """

    return Conv2d.apply(input, weight, bias, stride=stride, pad=pad, dilation=dilation)


def linear(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(input, weight, bias)


def grid_sample(input: Tensor, grid: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """
    Bilinear read of `input` at `grid`, a `(n, h', w', 2)` array of `(x, y)` pixel
    coordinates. Reads outside the input return 0.

    Returns
    -------
    `tuple[Tensor, np.ndarray]` :
        The sampled tensor and a float validity mask of shape `(n, 1, h', w')`.
        The grid is treated as a constant.
    """

    _check_4d(input.data, "input")
    plan = bilinear_plan(grid, input.shape[2], input.shape[3])
    output = GridSample.apply(input, plan=plan)
    valid = plan.valid.reshape(grid.shape[0], 1, *plan.out_hw).astype(input.data.dtype)

    return output, valid


def bilinear_resize(input: Tensor, out_h: int, out_w: int) -> Tensor:
    return Resize.apply(input, out_h=out_h, out_w=out_w)


def avg_pool_all(input: Tensor) -> Tensor:
    return AvgPoolAll.apply(input)


def l2_normalize(input: Tensor, eps: float = 1e-6) -> Tensor:
    """
    Scale every channel vector (axis 1) to unit L2 norm. Vectors with norm below
    `eps` are divided by `eps` instead.
    """

    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}.")

    return L2Normalize.apply(input, eps=eps)


def batch_norm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    mode: NormMode = "train",
    momentum: float = 0.9,
    eps: float = 1e-5,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Per-channel batch normalization over `(n, h, w)` for maps or `n` for vectors.
    Train mode updates the running statistics in place as
    `running = momentum * running + (1 - momentum) * batch`.

    An `(n, 1, h, w)` boolean `mask` restricts the train-mode statistics of a map
    to the positions where it holds. All positions are normalized.
    """

    return BatchNorm.apply(
        input,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        mode=mode,
        momentum=momentum,
        eps=eps,
        mask=mask,
    )


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)

    return CrossEntropy.apply(logits, labels=labels.astype(np.int64), mask=mask)


def gradcheck(
    function: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    dtype=np.float64,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare tape adjoints of a scalar-valued `function` against central differences.

    Parameters
    ----------
    - `function` : Callable[..., Tensor]
        Receives one tensor per entry of `inputs` and returns a scalar tensor.
    - `inputs` : Sequence[Tensor]
        Points at which the gradient is checked. They are copied, never modified.
    - `eps` : float
        Finite-difference step. Defaults to 1e-3.
    - `dtype` :
        Precision for both evaluations. Defaults to float64 so the finite
        differences are not dominated by rounding.
    - `max_entries` : Optional[int]
        Check at most this many randomly chosen entries per input. Every entry
        is checked when omitted.
    - `seed` : int
        Seed of the entry selection.

    Returns
    -------
    `float` :
        `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over the
        checked entries.
    """

    work = [Tensor(np.array(tensor.data, dtype=dtype), requires_grad=True) for tensor in inputs]

    with Tape() as tape:
        output = function(*work)
    tape.backward(output)
    analytic = [
        tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data) for tensor in work
    ]

    def evaluate() -> float:
        return float(function(*[Tensor(tensor.data) for tensor in work]).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(work, analytic):
        flat = tensor.data.reshape(-1)
        flat_grad = grad.reshape(-1)

        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

        for i in entries:
            original = flat[i]
            flat[i] = original + eps
            plus = evaluate()
            flat[i] = original - eps
            minus = evaluate()
            flat[i] = original

            numeric = (plus - minus) / (2 * eps)
            denominator = max(abs(flat_grad[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(flat_grad[i] - numeric) / denominator)

    return float(worst)
