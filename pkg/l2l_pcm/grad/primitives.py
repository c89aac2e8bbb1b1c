"""
Primitive vocabulary of the l2l-pcm tape.
"""

from typing import Any, Dict, Sequence, Tuple

import numpy as np
from scipy import signal

from l2l_pcm.crossbar.quantize import stochastic_round
from l2l_pcm.deploy.im2col import col2im, im2col
from l2l_pcm.errors import ShapeError
from l2l_pcm.grad.base import Primitive, SparseGrad, unbroadcast
from l2l_pcm.robot.kinematics import forward_kinematics, kinematics_jacobian

_TINY = 1e-30


def _broadcast(shapes: Sequence[Tuple[int, ...]], op: str) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        listed = " and ".join(str(s) for s in shapes)
        raise ShapeError(f"{op}: cannot broadcast {listed}")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


class MatMul(Primitive):
    """np.matmul semantics, including batch broadcasting and 1-D operands."""

    name = "matmul"
    arity = (2, 2)

    def check(self, shapes, attrs):
        super().check(shapes, attrs)
        a, b = shapes
        if len(a) == 0 or len(b) == 0:
            raise ShapeError("matmul: operands must have at least one dimension")
        inner_b = b[-2] if len(b) > 1 else b[0]
        if a[-1] != inner_b:
            raise ShapeError(f"matmul: inner dimensions differ, {a} @ {b}")
        _broadcast([a[:-2], b[:-2]], self.name)

    def forward(self, inputs, attrs):
        a, b = inputs
        return np.matmul(a, b), None

    def backward(self, grad, inputs, output, cache, attrs):
        a, b = inputs
        a2 = a if a.ndim > 1 else a[None, :]
        b2 = b if b.ndim > 1 else b[:, None]
        batch = np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2])
        g2 = grad.reshape(batch + (a2.shape[-2], b2.shape[-1]))
        ga = unbroadcast(np.matmul(g2, _swap(b2)), a2.shape).reshape(a.shape)
        gb = unbroadcast(np.matmul(_swap(a2), g2), b2.shape).reshape(b.shape)
        return [ga, gb]


class Conv2d(Primitive):
    """Square-kernel convolution (B, H, W, C) * (k, k, C, F) [+ bias F] via im2col."""

    name = "conv2d"
    arity = (2, 3)

    def check(self, shapes, attrs):
        super().check(shapes, attrs)
        x, w = shapes[0], shapes[1]
        if len(x) != 4 or len(w) != 4 or w[0] != w[1]:
            raise ShapeError(
                f"conv2d: expected (B,H,W,C) and (k,k,C,F), got {x} and {w}"
            )
        if x[3] != w[2]:
            raise ShapeError(f"conv2d: {x[3]} input channels vs kernel for {w[2]}")
        if len(shapes) == 3 and tuple(shapes[2]) != (w[3],):
            raise ShapeError(
                f"conv2d: bias shape {shapes[2]} does not match {w[3]} filters"
            )

    def forward(self, inputs, attrs):
        x, w = inputs[0], inputs[1]
        buf = im2col(x, kernel=w.shape[0], stride=attrs.get("stride", 2),
                     padding=attrs.get("padding", "same"))
        flat = w.reshape(-1, w.shape[3])
        out = buf.patches @ flat
        if len(inputs) == 3:
            out = out + inputs[2]
        return out.reshape(buf.batch, buf.out_height, buf.out_width, w.shape[3]), buf

    def backward(self, grad, inputs, output, cache, attrs):
        x, w = inputs[0], inputs[1]
        g2 = grad.reshape(-1, w.shape[3])
        flat = w.reshape(-1, w.shape[3])
        gw = (cache.patches.T @ g2).reshape(w.shape)
        gx = col2im(g2 @ flat.T, cache).reshape(x.shape)
        grads = [gx, gw]
        if len(inputs) == 3:
            grads.append(g2.sum(axis=0))
        return grads


class Relu(Primitive):
    name = "relu"

    def forward(self, inputs, attrs):
        return np.maximum(inputs[0], 0), None

    def backward(self, grad, inputs, output, cache, attrs):
        return [grad * (inputs[0] > 0)]


class BatchNorm(Primitive):
    """Per-channel normalization with the statistics of the current batch."""

    name = "batchnorm"
    arity = (3, 3)

    def check(self, shapes, attrs):
        super().check(shapes, attrs)
        x, gamma, beta = shapes
        if tuple(gamma) != (x[-1],) or tuple(beta) != (x[-1],):
            raise ShapeError(
                f"batchnorm: scale/shift {gamma}/{beta} vs {x[-1]} channels"
            )

    def forward(self, inputs, attrs):
        x, gamma, beta = inputs
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        inv = 1.0 / np.sqrt(x.var(axis=axes) + attrs.get("eps", 1e-5))
        xhat = (x - mean) * inv
        return gamma * xhat + beta, (xhat, inv.astype(x.dtype))

    def backward(self, grad, inputs, output, cache, attrs):
        x, gamma, _ = inputs
        xhat, inv = cache
        axes = tuple(range(x.ndim - 1))
        count = x.size // x.shape[-1]
        gxhat = grad * gamma
        gx = (inv / count) * (
            count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes)
        )
        return [gx, (grad * xhat).sum(axis=axes), grad.sum(axis=axes)]


class GlobalMaxPool(Primitive):
    """(B, H, W, C) -> (B, C); ties route the gradient to the first maximum."""

    name = "global_maxpool"

    def check(self, shapes, attrs):
        super().check(shapes, attrs)
        if len(shapes[0]) != 4:
            raise ShapeError(f"global_maxpool: expected (B,H,W,C), got {shapes[0]}")

    def forward(self, inputs, attrs):
        x = inputs[0]
        flat = x.reshape(x.shape[0], -1, x.shape[3])
        index = flat.argmax(axis=1)
        return np.take_along_axis(flat, index[:, None, :], axis=1)[:, 0, :], index

    def backward(self, grad, inputs, output, cache, attrs):
        x = inputs[0]
        flat = np.zeros(
            (x.shape[0], x.shape[1] * x.shape[2], x.shape[3]), dtype=grad.dtype
        )
        np.put_along_axis(flat, cache[:, None, :], grad[:, None, :], axis=1)
        return [flat.reshape(x.shape)]


class Softmax(Primitive):
    name = "softmax"

    def forward(self, inputs, attrs):
        x = inputs[0]
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True), None

    def backward(self, grad, inputs, output, cache, attrs):
        return [output * (grad - (grad * output).sum(axis=-1, keepdims=True))]


class CrossEntropy(Primitive):
    """Mean over the leading axis of -sum(y * log p); labels get no gradient."""

    name = "cross_entropy"
    arity = (2, 2)

    def check(self, shapes, attrs):
        super().check(shapes, attrs)
        if tuple(shapes[0]) != tuple(shapes[1]) or len(shapes[0]) == 0:
            raise ShapeError(
                f"cross_entropy: probabilities {shapes[0]} vs labels {shapes[1]}"
            )

    def forward(self, inputs, attrs):
        p, y = inputs
        count = p.shape[0] if p.ndim > 1 else 1
        loss = -np.sum(y * np.log(np.maximum(p, _TINY))) / count
        return np.asarray(loss, dtype=p.dtype), count

    def backward(self, grad, inputs, output, cache, attrs):
        p, y = inputs
        return [-grad * y / (np.maximum(p, _TINY) * cache), None]


class _Elementwise(Primitive):
    arity = (2, 2)

    def check(self, shapes, attrs):
        super().check(shapes, attrs)
        _broadcast(shapes, self.name)


class Add(_Elementwise):
    name = "add"

    def forward(self, inputs, attrs):
        return inputs[0] + inputs[1], None

    def backward(self, grad, inputs, output, cache, attrs):
        return [unbroadcast(grad, inputs[0].shape), unbroadcast(grad, inputs[1].shape)]


class Sub(_Elementwise):
    name = "sub"

    def forward(self, inputs, attrs):
        return inputs[0] - inputs[1], None

    def backward(self, grad, inputs, output, cache, attrs):
        return [unbroadcast(grad, inputs[0].shape), unbroadcast(-grad, inputs[1].shape)]


class Mul(_Elementwise):
    name = "mul"

    def forward(self, inputs, attrs):
        return inputs[0] * inputs[1], None

    def backward(self, grad, inputs, output, cache, attrs):
        a, b = inputs
        return [unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)]


class Scale(Primitive):
    name = "scale"

    def forward(self, inputs, attrs):
        return inputs[0] * inputs[0].dtype.type(attrs["factor"]), None

    def backward(self, grad, inputs, output, cache, attrs):
        return [grad * grad.dtype.type(attrs["factor"])]


def _surrogate(u: np.ndarray, v_th: float, dampening: float) -> np.ndarray:
    return dampening * np.maximum(0.0, 1.0 - np.abs(u / v_th))


class Heaviside(Primitive):
    """
    Spike nonlinearity on the distance to threshold u = v - A.

    Forward emits 1 where u >= 0. Backward uses the triangular surrogate
    dampening * max(0, 1 - |u / v_th|) / v_th. With ``smooth`` set the forward
    pass is the antiderivative of that surrogate instead, so finite
    differences see the same slope as the backward pass.
    """

    name = "heaviside"

    def forward(self, inputs, attrs):
        u = inputs[0]
        if not attrs.get("smooth", False):
            return (u >= 0).astype(u.dtype), None
        x = np.clip(u / attrs["v_th"], -1.0, 1.0)
        ramp = np.where(x <= 0, 0.5 * (x + 1.0) ** 2, 0.5 + x - 0.5 * x * x)
        return (attrs["dampening"] * ramp).astype(u.dtype), None

    def backward(self, grad, inputs, output, cache, attrs):
        slope = _surrogate(inputs[0], attrs["v_th"], attrs["dampening"]) / attrs["v_th"]
        return [grad * slope.astype(grad.dtype)]


class PseudoDerivative(Primitive):
    """The surrogate factor h itself, differentiable in u (eligibility traces)."""

    name = "pseudo_derivative"

    def forward(self, inputs, attrs):
        u = inputs[0]
        return _surrogate(u, attrs["v_th"], attrs["dampening"]).astype(u.dtype), None

    def backward(self, grad, inputs, output, cache, attrs):
        x = inputs[0] / attrs["v_th"]
        inside = -attrs["dampening"] * np.sign(x) / attrs["v_th"]
        slope = np.where(np.abs(x) < 1.0, inside, 0.0)
        return [grad * slope.astype(grad.dtype)]


class ExpFilter(Primitive):
    """y[t] = decay * y[t-1] + x[t] along ``axis`` (default 1, time), y[-1] = 0."""

    name = "exp_filter"

    def forward(self, inputs, attrs):
        x = inputs[0]
        decay = attrs["decay"]
        y = signal.lfilter([1.0], [1.0, -decay], x, axis=attrs.get("axis", 1))
        return y.astype(x.dtype), None

    def backward(self, grad, inputs, output, cache, attrs):
        axis = attrs.get("axis", 1)
        flipped = np.flip(grad, axis=axis)
        back = signal.lfilter([1.0], [1.0, -attrs["decay"]], flipped, axis=axis)
        return [np.flip(back, axis=axis).astype(grad.dtype)]


class WeightUpdate(Primitive):
    """
    w' = w - lr * g, broadcasting w over any leading batch axes of g.

    With ``first_order`` set the update term is treated as a constant.
    """

    name = "weight_update"
    arity = (2, 2)

    def check(self, shapes, attrs):
        super().check(shapes, attrs)
        _broadcast(shapes, self.name)

    def forward(self, inputs, attrs):
        w, g = inputs
        return w - w.dtype.type(attrs["lr"]) * g, None

    def backward(self, grad, inputs, output, cache, attrs):
        w, g = inputs
        gw = unbroadcast(grad, w.shape)
        if attrs.get("first_order", False):
            return [gw, None]
        return [gw, unbroadcast(-grad.dtype.type(attrs["lr"]) * grad, g.shape)]


class Transpose(Primitive):
    name = "transpose"

    def _axes(self, ndim, attrs):
        axes = attrs.get("axes")
        if axes is None:
            axes = tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
        return tuple(axes)

    def forward(self, inputs, attrs):
        x = inputs[0]
        return np.transpose(x, self._axes(x.ndim, attrs)), None

    def backward(self, grad, inputs, output, cache, attrs):
        axes = self._axes(inputs[0].ndim, attrs)
        return [np.transpose(grad, np.argsort(axes))]


class Reshape(Primitive):
    name = "reshape"

    def check(self, shapes, attrs):
        super().check(shapes, attrs)
        target = tuple(attrs["shape"])
        known = int(np.prod([n for n in target if n != -1]))
        size = int(np.prod(shapes[0]))
        if -1 in target:
            bad = known == 0 or size % known
        else:
            bad = known != size
        if bad:
            raise ShapeError(f"reshape: cannot view {shapes[0]} as {target}")

    def forward(self, inputs, attrs):
        return inputs[0].reshape(attrs["shape"]), None

    def backward(self, grad, inputs, output, cache, attrs):
        return [grad.reshape(inputs[0].shape)]


class Index(Primitive):
    """Basic (slice/int) indexing; the gradient is scattered into the source slice."""

    name = "index"

    def forward(self, inputs, attrs):
        return inputs[0][attrs["key"]], None

    def backward(self, grad, inputs, output, cache, attrs):
        return [SparseGrad(attrs["key"], grad)]


class Stack(Primitive):
    name = "stack"
    arity = (1, None)

    def check(self, shapes, attrs):
        if len({tuple(s) for s in shapes}) > 1:
            raise ShapeError(f"stack: operands differ in shape ({shapes[0]} vs others)")

    def forward(self, inputs, attrs):
        return np.stack(inputs, axis=attrs.get("axis", 0)), None

    def backward(self, grad, inputs, output, cache, attrs):
        axis = attrs.get("axis", 0)
        return [np.take(grad, i, axis=axis) for i in range(len(inputs))]


def _expand_reduced(
    grad: np.ndarray, shape: Tuple[int, ...], attrs: Dict[str, Any]
) -> np.ndarray:
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims", False):
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(sorted(a % len(shape) for a in axes))
        for a in axes:
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape)


class Sum(Primitive):
    name = "sum"

    def forward(self, inputs, attrs):
        x = inputs[0]
        out = np.sum(x, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
        return np.asarray(out, dtype=x.dtype), None

    def backward(self, grad, inputs, output, cache, attrs):
        return [_expand_reduced(grad, inputs[0].shape, attrs)]


class Mean(Primitive):
    name = "mean"

    def forward(self, inputs, attrs):
        x = inputs[0]
        out = np.mean(x, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
        return np.asarray(out, dtype=x.dtype), x.size // max(np.asarray(out).size, 1)

    def backward(self, grad, inputs, output, cache, attrs):
        return [_expand_reduced(grad / grad.dtype.type(cache), inputs[0].shape, attrs)]


class StopGradient(Primitive):
    name = "stop_gradient"

    def forward(self, inputs, attrs):
        return inputs[0], None

    def backward(self, grad, inputs, output, cache, attrs):
        return [None]


class QuantizeSte(Primitive):
    """
    Stochastic rounding to ``levels`` per sign of max-abs-scaled values.

    The uniform draws are fixed at record time so replays are exact; the
    gradient passes straight through.
    """

    name = "quantize_ste"

    def forward(self, inputs, attrs):
        x = inputs[0]
        peak = float(np.max(np.abs(x))) if x.size else 0.0
        if peak == 0.0:
            return x.copy(), None
        q = stochastic_round(x / x.dtype.type(peak), attrs["levels"], attrs["uniforms"])
        return (q * x.dtype.type(peak)).astype(x.dtype), None

    def backward(self, grad, inputs, output, cache, attrs):
        return [grad]


class Kinematics(Primitive):
    """Commanded (..., 2) joint angles to (..., 3) end-effector positions."""

    name = "kinematics"

    def check(self, shapes, attrs):
        super().check(shapes, attrs)
        if not shapes[0] or shapes[0][-1] != 2:
            raise ShapeError(f"kinematics: expected (..., 2) angles, got {shapes[0]}")

    def forward(self, inputs, attrs):
        x = inputs[0]
        return forward_kinematics(attrs["dh"], x).astype(x.dtype), None

    def backward(self, grad, inputs, output, cache, attrs):
        jac = kinematics_jacobian(attrs["dh"], inputs[0])
        return [np.einsum("...i,...ij->...j", grad, jac).astype(grad.dtype)]


PRIMITIVES: Dict[str, Primitive] = {
    p.name: p
    for p in (
        MatMul(),
        Conv2d(),
        Relu(),
        BatchNorm(),
        GlobalMaxPool(),
        Softmax(),
        CrossEntropy(),
        Add(),
        Sub(),
        Mul(),
        Scale(),
        Heaviside(),
        PseudoDerivative(),
        ExpFilter(),
        WeightUpdate(),
        Transpose(),
        Reshape(),
        Index(),
        Stack(),
        Sum(),
        Mean(),
        StopGradient(),
        QuantizeSte(),
        Kinematics(),
    )
}
