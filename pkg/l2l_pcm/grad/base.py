"""
Base classes for tape primitives.
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from l2l_pcm.errors import ShapeError


class SparseGrad:
    """Gradient that only touches one basic-indexed slice of its target."""

    __slots__ = ("key", "value")

    def __init__(self, key: Tuple, value: np.ndarray):
        self.key = key
        self.value = value


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sum a broadcast gradient back down to an operand's shape.

    Args:
        grad: Gradient with the broadcast result shape
        shape: Shape of the operand that was broadcast

    Returns:
        grad: Gradient with exactly ``shape``
    """
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Primitive(ABC):
    """
    One operation in the fixed tape vocabulary.

    A primitive is stateless: everything a call needs is passed in as input
    arrays plus an attribute dict, and whatever the backward pass needs beyond
    inputs and output is returned from ``forward`` as an opaque cache.
    """

    name: str = ""
    arity: Optional[Tuple[int, int]] = (1, 1)

    def check(self, shapes: Sequence[Tuple[int, ...]], attrs: Dict[str, Any]) -> None:
        """
        Validate operand shapes before evaluation.

        Args:
            shapes: Shapes of the operands
            attrs: Node attributes

        Raises:
            ShapeError: if the operands cannot be combined
        """
        if self.arity is not None:
            low, high = self.arity
            if len(shapes) < low or (high is not None and len(shapes) > high):
                raise ShapeError(
                    f"{self.name} takes {low}..{high} operands, got {len(shapes)}"
                )

    @abstractmethod
    def forward(
        self, inputs: Sequence[np.ndarray], attrs: Dict[str, Any]
    ) -> Tuple[np.ndarray, Any]:
        """
        Evaluate the primitive.

        Args:
            inputs: Operand values
            attrs: Node attributes

        Returns:
            output: Result array
            cache: Anything backward needs besides inputs and output
        """
        pass

    @abstractmethod
    def backward(
        self,
        grad: np.ndarray,
        inputs: Sequence[np.ndarray],
        output: np.ndarray,
        cache: Any,
        attrs: Dict[str, Any],
    ) -> List[Optional[Any]]:
        """
        Propagate an output gradient to the operands.

        Args:
            grad: Gradient of the loss with respect to the output
            inputs: Operand values recorded by forward
            output: Output value recorded by forward
            cache: Cache returned by forward
            attrs: Node attributes

        Returns:
            grads: One entry per operand; None where no gradient flows
        """
        pass
