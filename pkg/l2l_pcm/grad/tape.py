"""
Tape-based reverse-mode differentiation for l2l-pcm.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from l2l_pcm.errors import NonFiniteError, ShapeError, UsageError
from l2l_pcm.grad.base import SparseGrad
from l2l_pcm.grad.primitives import PRIMITIVES

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

Operand = Union["Tensor", np.ndarray, float, int]


class Tensor:
    """Handle to one value on a tape (a leaf or the output of a node)."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def data(self) -> np.ndarray:
        return self.tape.value(self)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tape.value(self).shape

    @property
    def name(self) -> Optional[str]:
        return self.tape._entries[self.index].name

    def __add__(self, other: Operand) -> "Tensor":
        return self.tape.add(self, other)

    def __sub__(self, other: Operand) -> "Tensor":
        return self.tape.sub(self, other)

    def __mul__(self, other: Operand) -> "Tensor":
        if isinstance(other, (int, float)):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, other)

    def __matmul__(self, other: Operand) -> "Tensor":
        return self.tape.matmul(self, other)

    def __repr__(self) -> str:
        entry = self.tape._entries[self.index]
        return f"Tensor(#{self.index}, {entry.op or entry.kind}, name={entry.name!r})"


@dataclass
class _Entry:
    kind: str
    op: Optional[str] = None
    inputs: Tuple[int, ...] = ()
    attrs: Dict[str, Any] = field(default_factory=dict)
    name: Optional[str] = None


class Tape:
    """
    Ordered record of primitive operations over numpy arrays.

    Leaves are declared with ``input``, ``parameter`` or ``constant``; every
    other tensor is produced by one primitive node. In eager mode (default)
    each node is evaluated as it is recorded, so building the tape is also
    the first forward pass. The tape can be replayed with new leaf values
    and differentiated with respect to its parameter marks.

    Values live in ``dtype`` (32-bit for training, 64-bit for verification).
    ``smooth_spikes`` swaps the heaviside forward for the integral of its
    surrogate so that finite differences through spiking graphs are defined.
    """

    def __init__(
        self,
        dtype: Any = np.float32,
        eager: bool = True,
        smooth_spikes: bool = False,
        check_finite: bool = True,
    ):
        """
        Initialize an empty tape.

        Args:
            dtype: Floating type of every value and gradient
            eager: Evaluate nodes while recording
            smooth_spikes: Verification mode for heaviside nodes
            check_finite: Raise on NaN/inf after every node
        """
        self.dtype = np.dtype(dtype)
        self.eager = eager
        self.smooth_spikes = smooth_spikes
        self.check_finite = check_finite
        self._entries: List[_Entry] = []
        self._values: List[Optional[np.ndarray]] = []
        self._caches: List[Any] = []
        self._frozen: Dict[int, np.ndarray] = {}
        self._outputs: List[int] = []
        self._names: Dict[str, int] = {}
        self._forward_done = eager

    # leaves

    def _leaf(self, kind: str, value: Any, name: Optional[str]) -> Tensor:
        if name is not None:
            if name in self._names:
                raise UsageError(f"tensor name {name!r} is already on the tape")
            self._names[name] = len(self._entries)
        self._entries.append(_Entry(kind=kind, name=name))
        self._values.append(np.array(value, dtype=self.dtype))
        self._caches.append(None)
        return Tensor(self, len(self._entries) - 1)

    def input(self, value: Any, name: Optional[str] = None) -> Tensor:
        """Declare a replaceable input."""
        return self._leaf("input", value, name)

    def parameter(self, value: Any, name: str) -> Tensor:
        """Declare a named differentiation target."""
        return self._leaf("param", value, name)

    def constant(self, value: Any, name: Optional[str] = None) -> Tensor:
        """Declare a fixed value (masks, labels); replays keep it."""
        return self._leaf("const", value, name)

    # nodes

    def _operand(self, x: Operand) -> int:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise UsageError("operand belongs to a different tape")
            return x.index
        return self.constant(x).index

    def record(self, op: str, *operands: Operand, **attrs: Any) -> Tensor:
        """
        Append one primitive node.

        Args:
            op: Primitive name
            *operands: Tensors or plain arrays (wrapped as constants)
            **attrs: Primitive attributes

        Returns:
            tensor: Handle to the node output
        """
        if op not in PRIMITIVES:
            raise UsageError(f"unknown primitive {op!r}")
        inputs = tuple(self._operand(x) for x in operands)
        self._entries.append(_Entry(kind="op", op=op, inputs=inputs, attrs=attrs))
        self._values.append(None)
        self._caches.append(None)
        index = len(self._entries) - 1
        if self.eager:
            self._evaluate(index)
        return Tensor(self, index)

    def _evaluate(self, index: int) -> None:
        entry = self._entries[index]
        prim = PRIMITIVES[entry.op]
        values = [self._values[j] for j in entry.inputs]
        if any(v is None for v in values):
            raise UsageError(f"node {index} ({entry.op}) evaluated before its inputs")
        try:
            prim.check([v.shape for v in values], entry.attrs)
            out, cache = prim.forward(values, entry.attrs)
        except ShapeError as exc:
            raise ShapeError(exc.detail, node_index=index, op=entry.op) from None
        except ValueError as exc:
            raise ShapeError(str(exc), node_index=index, op=entry.op) from None
        out = np.asarray(out, dtype=self.dtype)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(
                "non-finite intermediate", node_index=index, op=entry.op
            )
        self._values[index] = out
        self._caches[index] = cache
        if entry.op == "stop_gradient" and index not in self._frozen:
            self._frozen[index] = out

    def matmul(self, a: Operand, b: Operand) -> Tensor:
        return self.record("matmul", a, b)

    def conv2d(self, x: Operand, w: Operand, b: Optional[Operand] = None,
               stride: int = 2, padding: Any = "same") -> Tensor:
        operands = (x, w) if b is None else (x, w, b)
        return self.record("conv2d", *operands, stride=stride, padding=padding)

    def relu(self, x: Operand) -> Tensor:
        return self.record("relu", x)

    def batchnorm(
        self, x: Operand, gamma: Operand, beta: Operand, eps: float = 1e-5
    ) -> Tensor:
        return self.record("batchnorm", x, gamma, beta, eps=eps)

    def global_maxpool(self, x: Operand) -> Tensor:
        return self.record("global_maxpool", x)

    def softmax(self, x: Operand) -> Tensor:
        return self.record("softmax", x)

    def cross_entropy(self, p: Operand, y: Operand) -> Tensor:
        return self.record("cross_entropy", p, y)

    def add(self, a: Operand, b: Operand) -> Tensor:
        return self.record("add", a, b)

    def sub(self, a: Operand, b: Operand) -> Tensor:
        return self.record("sub", a, b)

    def mul(self, a: Operand, b: Operand) -> Tensor:
        return self.record("mul", a, b)

    def scale(self, x: Operand, factor: float) -> Tensor:
        return self.record("scale", x, factor=float(factor))

    def heaviside(self, u: Operand, v_th: float, dampening: float) -> Tensor:
        return self.record("heaviside", u, v_th=float(v_th), dampening=float(dampening),
                           smooth=self.smooth_spikes)

    def pseudo_derivative(self, u: Operand, v_th: float, dampening: float) -> Tensor:
        return self.record(
            "pseudo_derivative", u, v_th=float(v_th), dampening=float(dampening)
        )

    def exp_filter(self, x: Operand, decay: float, axis: int = 1) -> Tensor:
        return self.record("exp_filter", x, decay=float(decay), axis=axis)

    def weight_update(
        self, w: Operand, g: Operand, lr: float, first_order: bool = False
    ) -> Tensor:
        return self.record("weight_update", w, g, lr=float(lr), first_order=first_order)

    def transpose(self, x: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
        return self.record("transpose", x, axes=None if axes is None else tuple(axes))

    def reshape(self, x: Operand, shape: Sequence[int]) -> Tensor:
        return self.record("reshape", x, shape=tuple(shape))

    def index(self, x: Operand, key: Any) -> Tensor:
        return self.record("index", x, key=key if isinstance(key, tuple) else (key,))

    def stack(self, xs: Sequence[Operand], axis: int = 0) -> Tensor:
        return self.record("stack", *xs, axis=axis)

    def sum(self, x: Operand, axis: Any = None, keepdims: bool = False) -> Tensor:
        return self.record("sum", x, axis=axis, keepdims=keepdims)

    def mean(self, x: Operand, axis: Any = None, keepdims: bool = False) -> Tensor:
        return self.record("mean", x, axis=axis, keepdims=keepdims)

    def stop_gradient(self, x: Operand) -> Tensor:
        return self.record("stop_gradient", x)

    def quantize(self, x: Tensor, levels: int, rng: np.random.Generator) -> Tensor:
        """Straight-through stochastic rounding; the draws are fixed now."""
        uniforms = rng.random(self.value(x).shape)
        return self.record("quantize_ste", x, levels=int(levels), uniforms=uniforms)

    def kinematics(self, angles: Operand, dh: Any) -> Tensor:
        return self.record("kinematics", angles, dh=dh)

    # bookkeeping

    def mark_output(self, *tensors: Tensor) -> None:
        """Declare the tensors returned by ``forward`` (the first one is the loss)."""
        self._outputs.extend(self._operand(t) for t in tensors)

    @property
    def parameters(self) -> Dict[str, Tensor]:
        return {
            e.name: Tensor(self, i)
            for i, e in enumerate(self._entries)
            if e.kind == "param"
        }

    @property
    def outputs(self) -> List[Tensor]:
        """Marked outputs, or the last node when none were marked."""
        targets = self._outputs or [len(self._entries) - 1]
        return [Tensor(self, i) for i in targets]

    @property
    def inputs(self) -> List[Tensor]:
        return [
            Tensor(self, i) for i, e in enumerate(self._entries) if e.kind == "input"
        ]

    def __len__(self) -> int:
        return len(self._entries)

    def value(self, tensor: Union[Tensor, str]) -> np.ndarray:
        index = self._names[tensor] if isinstance(tensor, str) else tensor.index
        value = self._values[index]
        if value is None:
            raise UsageError(
                f"tensor #{index} has not been evaluated; run forward first"
            )
        return value

    def nbytes(self) -> int:
        """Bytes held by recorded values."""
        return int(sum(v.nbytes for v in self._values if v is not None))

    def _set_leaf(self, index: int, value: Any) -> None:
        value = np.array(value, dtype=self.dtype)
        if value.shape != self._values[index].shape:
            raise ShapeError(
                f"leaf {self._entries[index].name or index} expects "
                f"{self._values[index].shape}, got {value.shape}"
            )
        self._values[index] = value

    def forward(
        self,
        inputs: Optional[Union[Sequence[Any], Mapping[str, Any]]] = None,
        params: Optional[Mapping[str, Any]] = None,
        freeze_detached: bool = False,
    ) -> List[np.ndarray]:
        """
        Replay every node from the current (or given) leaf values.

        Args:
            inputs: New input values, positionally or by name
            params: New parameter values by name
            freeze_detached: Keep stop-gradient nodes at their first recorded
                value, so replays only see paths the gradient flows through

        Returns:
            outputs: Values of the marked outputs (or of the last node)
        """
        leaves = self.inputs
        if isinstance(inputs, Mapping):
            for name, value in inputs.items():
                self._set_leaf(self._names[name], value)
        elif inputs is not None:
            if len(inputs) != len(leaves):
                raise UsageError(f"tape takes {len(leaves)} inputs, got {len(inputs)}")
            for leaf, value in zip(leaves, inputs):
                self._set_leaf(leaf.index, value)
        for name, value in (params or {}).items():
            known = name in self._names
            if not known or self._entries[self._names[name]].kind != "param":
                raise UsageError(f"{name!r} is not a parameter of this tape")
            self._set_leaf(self._names[name], value)

        for index, entry in enumerate(self._entries):
            if entry.kind != "op":
                continue
            if freeze_detached and index in self._frozen:
                self._values[index] = self._frozen[index]
                continue
            self._evaluate(index)
        self._forward_done = True

        targets = self._outputs or [len(self._entries) - 1]
        return [self._values[i] for i in targets]

    def backward(
        self,
        loss_gradient: Optional[Any] = None,
        loss: Optional[Tensor] = None,
    ) -> Dict[str, np.ndarray]:
        """
        Reverse sweep from a loss tensor.

        Args:
            loss_gradient: Seed gradient; defaults to 1 for a scalar loss
            loss: Tensor to differentiate (defaults to the first output,
                else the last node)

        Returns:
            grads: d loss / d p for every parameter mark, keyed by name
        """
        if not self._forward_done:
            raise UsageError("backward called before forward")
        if loss is not None:
            target = self._operand(loss)
        else:
            target = self._outputs[0] if self._outputs else len(self._entries) - 1
        value = self._values[target]
        if loss_gradient is None:
            if value.size != 1:
                raise UsageError(f"loss has shape {value.shape}; pass loss_gradient")
            seed = np.ones_like(value)
        else:
            seed = np.asarray(loss_gradient, dtype=self.dtype)
            if seed.shape != value.shape:
                raise ShapeError(f"loss gradient {seed.shape} vs loss {value.shape}")

        grads: List[Optional[np.ndarray]] = [None] * len(self._entries)
        owned = set()
        grads[target] = seed
        for index in range(target, -1, -1):
            grad = grads[index]
            entry = self._entries[index]
            if grad is None or entry.kind != "op":
                continue
            prim = PRIMITIVES[entry.op]
            values = [self._values[j] for j in entry.inputs]
            partials = prim.backward(
                grad, values, self._values[index], self._caches[index], entry.attrs
            )
            for j, partial in zip(entry.inputs, partials):
                if partial is not None and self._entries[j].kind != "const":
                    self._accumulate(grads, owned, j, partial)
            grads[index] = None

        result = {}
        for index, entry in enumerate(self._entries):
            if entry.kind == "param":
                g = grads[index]
                if g is None:
                    result[entry.name] = np.zeros_like(self._values[index])
                else:
                    result[entry.name] = np.array(g)
        return result

    def _accumulate(self, grads: List, owned: set, index: int, partial: Any) -> None:
        if isinstance(partial, SparseGrad):
            current = grads[index]
            if current is None:
                current = np.zeros_like(self._values[index])
            elif index not in owned:
                current = np.array(current, dtype=self.dtype)
            owned.add(index)
            current[partial.key] += partial.value
            grads[index] = current
            return
        partial = np.asarray(partial, dtype=self.dtype)
        if grads[index] is None:
            grads[index] = partial
        elif index in owned:
            grads[index] += partial
        else:
            grads[index] = grads[index] + partial
            owned.add(index)


def forward(
    tape: Tape,
    inputs: Optional[Union[Sequence[Any], Mapping[str, Any]]] = None,
    **kwargs: Any,
) -> List[np.ndarray]:
    """Replay ``tape`` on ``inputs``; see ``Tape.forward``."""
    return tape.forward(inputs, **kwargs)


def backward(
    tape: Tape, loss_gradient: Optional[Any] = None, **kwargs: Any
) -> Dict[str, np.ndarray]:
    """Gradients of the tape's loss per parameter mark; see ``Tape.backward``."""
    return tape.backward(loss_gradient, **kwargs)
