"""
Trainee and learning-signal-generator networks for l2l-pcm.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from l2l_pcm.config import EpropConfig, TrajectoryConfig
from l2l_pcm.snn.neurons import CellParams

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

TRAINEE_PARAMS = ("trainee.w_in", "trainee.w_rec", "trainee.w_out")
LSG_PARAMS = ("lsg.w_in", "lsg.w_rec", "lsg.psi_out")


@dataclass
class EpropParams:
    """
    Outer-loop parameters of both networks.

    trainee: w_in (inputs, N), w_rec (N, N), w_out (N, 2)
    lsg: w_in (lsg inputs, M), w_rec (M, M), psi_out (M, N)
    """

    tensors: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def trainee_neurons(self) -> int:
        return int(self.tensors["trainee.w_rec"].shape[0])

    @property
    def lsg_neurons(self) -> int:
        return int(self.tensors["lsg.w_rec"].shape[0])

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.tensors)

    @classmethod
    def from_dict(cls, table: Dict[str, np.ndarray]) -> "EpropParams":
        names = TRAINEE_PARAMS + LSG_PARAMS
        return cls({n: np.asarray(table[n], dtype=np.float32) for n in names})

    def copy(self) -> "EpropParams":
        return EpropParams({n: v.copy() for n, v in self.tensors.items()})

    def zero_diagonals(self) -> None:
        for name in ("trainee.w_rec", "lsg.w_rec"):
            np.fill_diagonal(self.tensors[name], 0.0)

    def fingerprint(self, names=TRAINEE_PARAMS[2:] + LSG_PARAMS) -> str:
        """SHA-256 over the given tensors.

        The default covers everything the inner loop must not touch.
        """
        digest = hashlib.sha256()
        for name in names:
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        return digest.hexdigest()


def lsg_input_count(config: EpropConfig, trajectory: TrajectoryConfig) -> int:
    """Shared clock, optional private clock copy, and 3 * regions position neurons."""
    private = config.clock_neurons if config.lsg_private_clock else 0
    return config.clock_neurons + private + 3 * trajectory.regions_per_dim


def _gaussian(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(np.float32)


def init_eprop(
    rng: np.random.Generator,
    config: EpropConfig,
    trajectory: TrajectoryConfig,
) -> EpropParams:
    """
    Gaussian weights with std 1/sqrt(fan-in); recurrent diagonals are zero.

    Args:
        rng: Seeded generator
        config: Network sizes
        trajectory: Encoder settings (LSG input width)

    Returns:
        params: Fresh parameters
    """
    n, m = config.trainee_neurons, config.lsg_neurons
    params = EpropParams(
        {
            "trainee.w_in": _gaussian(rng, config.clock_neurons, n),
            "trainee.w_rec": _gaussian(rng, n, n),
            "trainee.w_out": _gaussian(rng, n, 2),
            "lsg.w_in": _gaussian(rng, lsg_input_count(config, trajectory), m),
            "lsg.w_rec": _gaussian(rng, m, m),
            "lsg.psi_out": _gaussian(rng, m, n),
        }
    )
    params.zero_diagonals()
    logger.info(
        "Initialized trainee with %d neurons and learning-signal generator with %d",
        n,
        m,
    )
    return params


def trainee_cell(config: EpropConfig) -> CellParams:
    return CellParams(
        decay=config.membrane_decay,
        v_th=config.v_th_trainee,
        dampening=config.dampening,
        refractory=config.refractory_steps,
    )


def lsg_cell(config: EpropConfig) -> CellParams:
    """The first ``alif_fraction`` of the LSG population adapts its threshold."""
    m = config.lsg_neurons
    beta = np.zeros(m)
    beta[: int(round(config.alif_fraction * m))] = config.beta_alif
    return CellParams(
        decay=config.membrane_decay,
        v_th=config.v_th_lsg,
        dampening=config.dampening,
        refractory=config.refractory_steps,
        rho=config.adaptation_decay,
        beta=beta,
    )
