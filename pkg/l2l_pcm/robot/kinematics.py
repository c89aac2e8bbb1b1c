"""
Forward kinematics of the four-joint Scorbot-style arm for l2l-pcm.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from l2l_pcm.config import SafetyLimits
from l2l_pcm.errors import SafetyLimitError, UsageError

Quad = Tuple[float, float, float, float]


class DhParams(BaseModel):
    """
    Denavit-Hartenberg description of the arm, one entry per joint.

    Lengths are in cm and angles in rad. Only joints 1 (base) and 2
    (shoulder) are commanded; joints 3 and 4 stay at their offsets.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    theta_offset: Quad = Field(
        (-23.6 * math.pi / 180, 22.0 * math.pi / 180, 22.4 * math.pi / 180, 0.0),
        description="Home angle of each joint",
    )
    d: Quad = Field((35.85, -9.8, 6.5, 0.0), description="Link offsets")
    a: Quad = Field((5.0, 30.0, 35.0, 22.0), description="Link lengths")
    alpha: Quad = Field((math.pi / 2, math.pi, 0.0, 0.0), description="Link twists")

    @field_validator("theta_offset", "d", "a", "alpha")
    @classmethod
    def _finite(cls, value: Quad) -> Quad:
        if not all(math.isfinite(v) for v in value):
            raise ValueError("D-H parameters must be finite")
        return value

    @property
    def lipschitz(self) -> float:
        """Upper bound on |d position| / |d angle|."""
        return float(sum(a + abs(d) for a, d in zip(self.a, self.d)))


@dataclass(frozen=True)
class JointState:
    """Commanded angles relative to the home pose (rad)."""

    base: float = 0.0
    shoulder: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.base, self.shoulder], dtype=np.float64)


@dataclass
class Trajectory:
    """A commanded or target motion sampled once per step."""

    velocities: np.ndarray
    angles: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return int(self.velocities.shape[0])


def dh_transform(theta: float, d: float, a: float, alpha: float) -> np.ndarray:
    """Homogeneous transform of one standard D-H link."""
    ct, st = math.cos(theta), math.sin(theta)
    ca, sa = math.cos(alpha), math.sin(alpha)
    return np.array(
        [
            [ct, -st * ca, st * sa, a * ct],
            [st, ct * ca, -ct * sa, a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def dh_chain_position(dh: DhParams, angles: np.ndarray) -> np.ndarray:
    """
    End-effector position by chaining the four link transforms.

    Args:
        dh: Arm description
        angles: Relative angles for all four joints

    Returns:
        position: (x, y, z) in cm
    """
    transform = np.eye(4)
    for i in range(4):
        theta = dh.theta_offset[i] + float(angles[i])
        transform = transform @ dh_transform(theta, dh.d[i], dh.a[i], dh.alpha[i])
    return transform[:3, 3].copy()


def _terms(dh: DhParams, angles: np.ndarray):
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape[-1] != 2:
        raise UsageError(f"expected (..., 2) controlled angles, got {angles.shape}")
    t1 = dh.theta_offset[0] + angles[..., 0]
    t2 = dh.theta_offset[1] + angles[..., 1]
    t3, t4 = dh.theta_offset[2], dh.theta_offset[3]
    a1, a2, a3, a4 = dh.a
    # closed form below assumes the twists of the default arm
    if not np.allclose(dh.alpha, (math.pi / 2, math.pi, 0.0, 0.0)):
        raise UsageError("closed-form kinematics needs twists (pi/2, pi, 0, 0)")
    reach = a1 + a2 * np.cos(t2) + a3 * np.cos(t2 - t3) + a4 * np.cos(t2 - t3 - t4)
    lift = a2 * np.sin(t2) + a3 * np.sin(t2 - t3) + a4 * np.sin(t2 - t3 - t4)
    side = dh.d[1] - dh.d[2] - dh.d[3]
    return t1, reach, lift, side


def forward_kinematics(dh: DhParams, angles) -> np.ndarray:
    """
    Closed-form end-effector position for commanded base/shoulder angles.

    Args:
        dh: Arm description
        angles: JointState or array (..., 2) of relative angles

    Returns:
        positions: Array (..., 3) of (x, y, z) in cm
    """
    if isinstance(angles, JointState):
        angles = angles.as_array()
    t1, reach, lift, side = _terms(dh, angles)
    c1, s1 = np.cos(t1), np.sin(t1)
    x = c1 * reach + s1 * side
    y = s1 * reach - c1 * side
    z = dh.d[0] + lift
    return np.stack([x, y, z], axis=-1)


def kinematics_jacobian(dh: DhParams, angles: np.ndarray) -> np.ndarray:
    """
    Derivative of the position with respect to (base, shoulder).

    Returns:
        jacobian: Array (..., 3, 2)
    """
    t1, reach, lift, side = _terms(dh, angles)
    c1, s1 = np.cos(t1), np.sin(t1)
    x = c1 * reach + s1 * side
    y = s1 * reach - c1 * side
    zeros = np.zeros_like(reach)
    d_base = np.stack([-y, x, zeros], axis=-1)
    d_shoulder = np.stack([-c1 * lift, -s1 * lift, reach - dh.a[0]], axis=-1)
    return np.stack([d_base, d_shoulder], axis=-1)


def integrate_velocities(
    velocities: np.ndarray,
    dt: float = 0.001,
    initial: Optional[JointState] = None,
    limits: Optional[SafetyLimits] = None,
    dh: Optional[DhParams] = None,
) -> Trajectory:
    """
    Turn angular-velocity commands into angles and end-effector positions.

    Each command is applied instantaneously: angle[t] = angle[t-1] + phi[t] * dt.

    Args:
        velocities: (T, 2) commands in rad/s
        dt: Step length in seconds
        initial: Starting pose (home pose when omitted)
        limits: Safeguards to enforce; None skips the check
        dh: Arm description (defaults to the stock arm)

    Returns:
        trajectory: Velocities, integrated angles and positions

    Raises:
        SafetyLimitError: naming the first offending step and joint
    """
    velocities = np.asarray(velocities, dtype=np.float64)
    if velocities.ndim != 2 or velocities.shape[1] != 2:
        raise UsageError(f"expected (T, 2) velocities, got {velocities.shape}")
    dh = dh or DhParams()
    start = (initial or JointState()).as_array()
    angles = start + np.cumsum(velocities * dt, axis=0)

    if limits is not None:
        for series, bound, what in (
            (velocities, limits.velocity_limit, "velocity"),
            (angles, limits.angle_limit, "angle"),
        ):
            bad = np.argwhere(np.abs(series) > bound)
            if bad.size:
                step, joint = (int(v) for v in bad[0])
                raise SafetyLimitError(
                    f"{what} limit exceeded", step, joint, float(series[step, joint])
                )

    return Trajectory(
        velocities=velocities, angles=angles, positions=forward_kinematics(dh, angles)
    )
