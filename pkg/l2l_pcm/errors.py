"""
Exception hierarchy for l2l-pcm.
"""

from typing import List, Optional


class L2LError(Exception):
    """Base class for all l2l-pcm failures."""

    prefix = "l2l-pcm"

    def __init__(self, msg: str):
        super().__init__(f"{self.prefix}: {msg}")
        self.detail = msg


class UsageError(L2LError):
    """An API was called out of order or with inconsistent arguments."""

    prefix = "usage error"


class ShapeError(L2LError):
    """A tape node received operands of incompatible shapes."""

    prefix = "shape error"

    def __init__(
        self, msg: str, node_index: Optional[int] = None, op: Optional[str] = None
    ):
        where = f" (node {node_index}, {op})" if node_index is not None else ""
        super().__init__(f"{msg}{where}")
        self.node_index = node_index
        self.op = op


class NonFiniteError(L2LError):
    """A NaN or infinity showed up in a tensor."""

    prefix = "non-finite value"

    def __init__(
        self,
        msg: str,
        node_index: Optional[int] = None,
        op: Optional[str] = None,
        tensor: Optional[str] = None,
    ):
        where = ""
        if node_index is not None:
            where = f" (node {node_index}, {op})"
        elif tensor is not None:
            where = f" (tensor {tensor})"
        super().__init__(f"{msg}{where}")
        self.node_index = node_index
        self.op = op
        self.tensor = tensor


class PlacementError(L2LError):
    """A crossbar region does not fit the array."""

    prefix = "placement error"


class CapacityError(PlacementError):
    """The layers do not fit on the available cores."""

    prefix = "capacity error"

    def __init__(self, msg: str, overflow: Optional[List[str]] = None):
        self.overflow = list(overflow or [])
        if self.overflow:
            msg = f"{msg}; overflow: {', '.join(self.overflow)}"
        super().__init__(msg)


class ScalingError(L2LError):
    """Weights or inputs were not scaled into [-1, 1]."""

    prefix = "scaling error"


class DatasetError(L2LError):
    """The dataset cannot provide what was asked of it."""

    prefix = "dataset error"


class ConfigError(L2LError):
    """The experiment configuration could not be parsed or validated."""

    prefix = "config error"

    def __init__(self, msg: str, key: Optional[str] = None, line: Optional[int] = None):
        where = ""
        if key is not None:
            where = f" [key '{key}'" + (f", line {line}]" if line is not None else "]")
        elif line is not None:
            where = f" [line {line}]"
        super().__init__(f"{msg}{where}")
        self.key = key
        self.line = line


class SafetyLimitError(L2LError):
    """A commanded trajectory leaves the robot's safe operating range."""

    prefix = "safety limit"

    def __init__(self, msg: str, step: int, joint: int, value: float):
        super().__init__(f"{msg} at step {step}, joint {joint + 1}: {value:.4f}")
        self.step = step
        self.joint = joint
        self.value = value


class GenerationError(L2LError):
    """Target generation ran out of resampling attempts."""

    prefix = "generation error"
