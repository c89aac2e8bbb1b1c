"""
Robot arm kinematics and motor-task signals for l2l-pcm.
"""

from l2l_pcm.robot.kinematics import (
    DhParams,
    JointState,
    Trajectory,
    dh_chain_position,
    forward_kinematics,
    integrate_velocities,
    kinematics_jacobian,
)
from l2l_pcm.robot.trajectory import (
    PositionEncoder,
    RmseReport,
    WorkspaceBox,
    clock_signal,
    estimate_workspace,
    gen_target_trajectory,
    hann_window,
    trajectory_rmse,
)

__all__ = [
    "DhParams",
    "JointState",
    "Trajectory",
    "dh_chain_position",
    "forward_kinematics",
    "integrate_velocities",
    "kinematics_jacobian",
    "PositionEncoder",
    "RmseReport",
    "WorkspaceBox",
    "clock_signal",
    "estimate_workspace",
    "gen_target_trajectory",
    "hann_window",
    "trajectory_rmse",
]
