"""
Experiment configuration for l2l-pcm.
"""

import logging
import math
import re
import sys
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from l2l_pcm.errors import ConfigError

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

TRIAL_STEPS = 250


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class AnalogConfig(_Section):
    """Crossbar core knobs: I/O precision, programming noise, drift and calibration."""

    input_bits: int = Field(8, description="Signed input DAC width")
    output_bits: int = Field(8, description="Signed output ADC width")
    weight_levels: int = Field(15, description="Non-zero conductance levels per sign")
    prog_noise_sigma: float = Field(
        0.02, ge=0.0, description="Write noise, fraction of g_max"
    )
    verify_tolerance: float = Field(
        1.0 / 30.0, gt=0.0, description="Read-verify acceptance band"
    )
    max_verify_iters: int = Field(20, ge=1, description="Write attempts per device")
    drift_nu: float = Field(
        0.0, ge=0.0, description="Power-law drift exponent (0 disables)"
    )
    reset_ceiling: float = Field(
        0.0, ge=0.0, description="Highest conductance counted as RESET"
    )
    bypass_quantizers: bool = Field(
        False, description="Diagnostic mode: no I/O or weight quantization"
    )
    calibration_probes: int = Field(
        128, ge=0, description="Random +-1 probes per affine fit"
    )
    cores: int = Field(
        2, ge=1, description="Number of 256x256 cores available for placement"
    )
    drift_time_factor: float = Field(
        1.0, gt=0.0, description="Drift applied before evaluation"
    )
    recalibrate_after_drift: bool = Field(
        True, description="Refit column affine after drift"
    )

    @field_validator("input_bits", "output_bits")
    @classmethod
    def _eight_bit(cls, value: int) -> int:
        if value != 8:
            raise ValueError("crossbar I/O is fixed at 8 bits")
        return value


class MamlConfig(_Section):
    """Few-shot meta-training hyperparameters."""

    inner_lr: float = Field(0.1, ge=0.0, description="Delta-rule step size alpha")
    outer_lr: float = Field(0.001, gt=0.0, description="Adam learning rate beta")
    inner_steps: int = Field(4, ge=1, description="Delta-rule updates per task n")
    meta_batch: int = Field(40, ge=1, description="Episodes per outer step")
    iterations: int = Field(30000, ge=0, description="Outer iterations")
    weight_mode: Literal["32bit", "4bit-stochastic"] = Field(
        "32bit", description="Training precision"
    )
    quant_levels: int = Field(15, ge=1, description="Levels per sign in 4-bit mode")
    first_order: bool = Field(
        False, description="Drop second-order terms of the inner update"
    )
    n_way: int = Field(5, ge=1, description="Classes per episode N")
    k_shot: int = Field(5, ge=1, description="Support (and query) examples per class K")
    filters: int = Field(56, ge=1, description="Filters per conv block")
    image_size: int = Field(28, ge=1, description="Input resolution")
    eval_tasks: int = Field(100, ge=0, description="Held-out tasks in evaluation")
    validation_every: int = Field(
        100, ge=1, description="Iterations between validation losses"
    )
    validation_tasks: int = Field(20, ge=1, description="Fixed validation episodes")
    checkpoint_every: int = Field(
        1000, ge=1, description="Iterations between checkpoints"
    )
    augment_rotations: bool = Field(
        True, description="Add 90/180/270 degree rotated classes"
    )
    omniglot_root: Optional[str] = Field(
        None, description="alphabet/character/*.png tree"
    )
    manifest: Optional[str] = Field(
        None, description="Subset manifest listing class ids"
    )
    synthetic_classes: int = Field(
        120, ge=2, description="Classes in the synthetic glyph fallback"
    )


class EpropConfig(_Section):
    """One-shot motor learning hyperparameters."""

    inner_lr: float = Field(1e-4, ge=0.0, description="One-shot update step alpha")
    outer_lr: float = Field(0.0015, gt=0.0, description="Adam learning rate")
    lr_decay: float = Field(0.99, gt=0.0, le=1.0, description="Multiplicative lr decay")
    lr_decay_every: int = Field(500, ge=1, description="Iterations per lr decay")
    batch_size: int = Field(90, ge=1, description="Trajectories per outer step")
    iterations: int = Field(100000, ge=0, description="Outer iterations")
    dt_ms: float = Field(1.0, gt=0.0, description="Simulation step")
    trial_steps: int = Field(TRIAL_STEPS, description="Steps per phase")
    trainee_neurons: int = Field(250, ge=1, description="Trainee LIF neurons")
    lsg_neurons: int = Field(800, ge=1, description="Learning-signal generator neurons")
    alif_fraction: float = Field(
        0.3, ge=0.0, le=1.0, description="Adaptive share of the LSG"
    )
    tau_m_ms: float = Field(20.0, gt=0.0, description="Membrane time constant")
    tau_a_ms: float = Field(
        600.0, gt=0.0, description="Threshold adaptation time constant"
    )
    tau_out_ms: float = Field(20.0, gt=0.0, description="Readout filter time constant")
    learning_signal_decay: Optional[float] = Field(
        None, ge=0.0, lt=1.0, description="alpha_e; defaults to the membrane decay"
    )
    refractory_ms: float = Field(5.0, ge=0.0, description="Refractory period")
    dampening: float = Field(0.3, gt=0.0, description="Surrogate slope factor lambda")
    beta_alif: float = Field(
        1.6, ge=0.0, description="Threshold increase per adaptation unit"
    )
    v_th_trainee: float = Field(0.6, gt=0.0, description="Trainee threshold")
    v_th_lsg: float = Field(1.3, gt=0.0, description="LSG threshold")
    f_target_trainee: float = Field(
        10.0, ge=0.0, description="Trainee target rate (Hz)"
    )
    f_target_lsg: float = Field(20.0, ge=0.0, description="LSG target rate (Hz)")
    reg_coeff: float = Field(0.25, ge=0.0, description="Rate regularization epsilon")
    trajectory_weight: float = Field(
        0.5, ge=0.0, description="Weight of the position MSE term"
    )
    velocity_weight: float = Field(
        0.5, ge=0.0, description="Weight of the velocity MSE term"
    )
    clock_neurons: int = Field(5, ge=1, description="Clock input neurons")
    lsg_private_clock: bool = Field(
        True, description="LSG trajectory group carries its own clock copy (58 inputs)"
    )
    eval_trajectories: int = Field(
        4, ge=0, description="Held-out trajectories in evaluation"
    )
    checkpoint_every: int = Field(
        1000, ge=1, description="Iterations between checkpoints"
    )

    @field_validator("trial_steps")
    @classmethod
    def _fixed_length(cls, value: int) -> int:
        if value != TRIAL_STEPS:
            raise ValueError(f"trial length is fixed at {TRIAL_STEPS} steps")
        return value

    @property
    def membrane_decay(self) -> float:
        return math.exp(-self.dt_ms / self.tau_m_ms)

    @property
    def adaptation_decay(self) -> float:
        return math.exp(-self.dt_ms / self.tau_a_ms)

    @property
    def readout_decay(self) -> float:
        return math.exp(-self.dt_ms / self.tau_out_ms)

    @property
    def signal_decay(self) -> float:
        if self.learning_signal_decay is None:
            return self.membrane_decay
        return self.learning_signal_decay

    @property
    def refractory_steps(self) -> int:
        return int(round(self.refractory_ms / self.dt_ms))


class SafetyLimits(_Section):
    """Robot safeguards on commanded trajectories."""

    angle_limit: float = Field(
        0.9, gt=0.0, description="Relative joint-angle limit (rad)"
    )
    velocity_limit: float = Field(
        1.5, gt=0.0, description="Angular velocity clamp (rad/s)"
    )
    max_resamples: int = Field(
        1000, ge=1, description="Generator attempts per trajectory"
    )


class TrajectoryConfig(_Section):
    """Target generator and spike encoder settings."""

    wiener_variance: float = Field(
        0.09, gt=0.0, description="Variance u of Wiener increments"
    )
    hann_length: int = Field(120, ge=2, description="Smoothing window length M")
    workspace_samples: int = Field(
        10000, ge=1, description="Trajectories sampled for the box"
    )
    workspace_margin: float = Field(
        0.05, ge=0.0, description="Relative margin around the box"
    )
    regions_per_dim: int = Field(
        16, ge=1, description="Position encoder regions per axis"
    )
    encoder_rate_hz: float = Field(
        100.0, gt=0.0, description="Regular firing rate of encoders"
    )


class ExperimentConfig(_Section):
    """Everything a run needs: kind, backend, seed, output location and all sections."""

    kind: Literal["maml", "eprop"] = Field("maml", description="Learning pipeline")
    backend: Literal["software-32bit", "software-4bit", "crossbar"] = Field(
        "software-32bit", description="Evaluation substrate"
    )
    seed: int = Field(0, ge=0, description="Master seed")
    output_dir: str = Field("runs/default", description="Artifact directory")
    stages: List[Literal["train", "evaluate"]] = Field(
        default_factory=lambda: ["train", "evaluate"], description="Stages to run"
    )
    checkpoint: Optional[str] = Field(None, description="Checkpoint to start from")
    full_budget: bool = Field(False, description="Full-size networks and budgets")
    maml: MamlConfig = Field(default_factory=MamlConfig)
    eprop: EpropConfig = Field(default_factory=EpropConfig)
    analog: AnalogConfig = Field(default_factory=AnalogConfig)
    safety: SafetyLimits = Field(default_factory=SafetyLimits)
    trajectory: TrajectoryConfig = Field(default_factory=TrajectoryConfig)


_HEADER = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")
_DECODE_LINE = re.compile(r"line (\d+)")


def _locate(text: str, loc: Tuple[Union[str, int], ...]) -> Optional[int]:
    """
    Find the 1-based line of a validation error location in TOML text.

    Args:
        text: Raw config text
        loc: Pydantic error location, e.g. ('maml', 'inner_lr')

    Returns:
        line: Line number, or None when the key is not spelled out in the file
    """
    keys = [str(part) for part in loc if isinstance(part, str)]
    if not keys:
        return None
    table, key = ".".join(keys[:-1]), keys[-1]
    current = ""
    header_line = None
    for number, line in enumerate(text.splitlines(), start=1):
        header = _HEADER.match(line)
        if header:
            current = header.group(1)
            if current == ".".join(keys):
                header_line = number
            continue
        match = _KEY.match(line)
        if match and match.group(1) == key and current == table:
            return number
    return header_line


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    """
    Parse TOML text into an ExperimentConfig.

    Args:
        text: TOML document; empty text yields all defaults
        source: Name used in error messages

    Returns:
        config: Validated configuration
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        match = _DECODE_LINE.search(str(exc))
        line = int(match.group(1)) if match else None
        raise ConfigError(f"{source}: {exc}", line=line)

    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = tuple(first["loc"])
        key = ".".join(str(part) for part in loc)
        raise ConfigError(f"{source}: {first['msg']}", key=key, line=_locate(text, loc))


def parse_config(
    path: Union[str, Path], echo_dir: Optional[Union[str, Path]] = None
) -> ExperimentConfig:
    """
    Read an experiment config file.

    Args:
        path: TOML file with optional [maml], [eprop], [analog], [safety] and
            [trajectory] sections
        echo_dir: When given, the fully resolved config is written there

    Returns:
        config: Validated configuration with defaults filled in
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    config = parse_config_text(path.read_text(encoding="utf-8"), source=str(path))
    if echo_dir is not None:
        echo_config(config, echo_dir)
    logger.info(
        "Loaded %s config from %s (backend %s)", config.kind, path, config.backend
    )
    return config


def dump_config(config: ExperimentConfig) -> str:
    """Serialize a config to TOML; unset optionals are left out."""
    return tomli_w.dumps(config.model_dump(mode="json", exclude_none=True))


def echo_config(config: ExperimentConfig, directory: Union[str, Path]) -> Path:
    """Write the resolved config as ``resolved_config.toml`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / "resolved_config.toml"
    target.write_text(dump_config(config), encoding="utf-8")
    return target
