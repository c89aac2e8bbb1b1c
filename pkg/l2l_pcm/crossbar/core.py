"""
PCM crossbar core simulation for l2l-pcm.
"""

import logging
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from l2l_pcm.config import AnalogConfig
from l2l_pcm.crossbar.quantize import quantize_symmetric, round_to_levels
from l2l_pcm.errors import PlacementError, ScalingError, UsageError
from l2l_pcm.utils.persistence import atomic_write_bytes

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CORE_SIZE = 256
DEVICES_PER_CELL = 4
BLOB_MAGIC = b"PCMC"
BLOB_VERSION = 1

# device order inside a cell: positive pair, then negative pair
POS = slice(0, 2)
NEG = slice(2, 4)

PHASES = ("pp", "pn", "np", "nn")
_PHASE_SIGN = {"pp": 1.0, "pn": -1.0, "np": -1.0, "nn": 1.0}

# slack on the [-1, 1] range check for values that were scaled in float32
_RANGE_SLACK = 1e-6


@dataclass(frozen=True)
class Region:
    """Rectangle of unit cells: top-left offset plus extent."""

    row: int
    col: int
    rows: int
    cols: int

    @property
    def slices(self) -> Tuple[slice, slice]:
        rows = slice(self.row, self.row + self.rows)
        return rows, slice(self.col, self.col + self.cols)

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    def overlaps(self, other: "Region") -> bool:
        return not (
            self.row + self.rows <= other.row
            or other.row + other.rows <= self.row
            or self.col + self.cols <= other.col
            or other.col + other.cols <= self.col
        )


RegionLike = Union[Region, Tuple[int, int]]


@dataclass
class ProgrammingReport:
    """Outcome of one read-write-verify programming pass."""

    region: Region
    residuals: np.ndarray
    iterations: int
    devices_touched: int
    unconverged: int

    @property
    def residual_std(self) -> float:
        return float(np.std(self.residuals))

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0


class CrossbarCore:
    """
    One 256x256 array of differential four-device unit cells.

    Conductances are normalized to [0, 1]. A cell's effective weight is the
    mean of its positive pair minus the mean of its negative pair; after
    programming only the pair matching the weight's sign is active and the
    other pair sits in RESET. Each column has an ideal-side affine correction
    (``gain``, ``offset``) fitted by ``calibrate_affine`` and an analog-side
    distortion used to model column errors.

    Conductances, targets and the column affine are stored as float32, the
    precision of the saved core snapshot. With noise off and quantizers
    bypassed an MVM is therefore exact (up to float64 summation order) with
    respect to the float32-rounded weights, not the float64 request; the
    two agree only for weights already on the float32 grid.

    ``program``, ``calibrate_affine`` and ``drift_apply`` take the core lock;
    ``mvm`` and ``read_weights`` only read.
    """

    def __init__(
        self,
        config: Optional[AnalogConfig] = None,
        rng: Optional[np.random.Generator] = None,
        core_id: int = 0,
    ):
        """
        Initialize the CrossbarCore.

        Args:
            config: Analog knobs (noise, verify loop, quantizers, drift)
            rng: Seeded generator for programming noise and probes
            core_id: Index of the core on the platform
        """
        self.config = config or AnalogConfig()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.core_id = core_id
        shape = (CORE_SIZE, CORE_SIZE)
        self.conductance = np.zeros(shape + (DEVICES_PER_CELL,), dtype=np.float32)
        self.targets = np.zeros(shape, dtype=np.float32)
        self.programmed = np.zeros(shape, dtype=bool)
        self.gain = np.ones(CORE_SIZE, dtype=np.float32)
        self.offset = np.zeros(CORE_SIZE, dtype=np.float32)
        self.distortion_gain = np.ones(CORE_SIZE, dtype=np.float32)
        self.distortion_offset = np.zeros(CORE_SIZE, dtype=np.float32)
        self.write_pulses = 0
        self._lock = threading.RLock()

        logger.info(
            "CrossbarCore initialized with id: %d, noise sigma: %.3f, "
            "tolerance: %.4f, bypass: %s",
            core_id,
            self.config.prog_noise_sigma,
            self.config.verify_tolerance,
            self.config.bypass_quantizers,
        )

    # geometry

    def _region(
        self, region: RegionLike, shape: Optional[Tuple[int, int]] = None
    ) -> Region:
        if not isinstance(region, Region):
            if shape is None:
                raise UsageError("an offset-only region needs a weight shape")
            region = Region(
                int(region[0]), int(region[1]), int(shape[0]), int(shape[1])
            )
        if (
            region.row < 0
            or region.col < 0
            or region.rows < 1
            or region.cols < 1
            or region.row + region.rows > CORE_SIZE
            or region.col + region.cols > CORE_SIZE
        ):
            raise PlacementError(
                f"region {region.rows}x{region.cols} at ({region.row}, {region.col}) "
                f"does not fit core {self.core_id}"
            )
        return region

    # programming

    def program(
        self, weights: np.ndarray, region: RegionLike = (0, 0)
    ) -> ProgrammingReport:
        """
        Program a weight block with the iterative read-write-verify loop.

        Weights are snapped to the ``weight_levels`` grid (unless quantizers are
        bypassed). Every device of the region is rewritten: the active pair of
        each cell is driven to |w| with Gaussian write noise until it reads
        back within ``verify_tolerance`` or the iteration budget runs out; the
        other pair (and both pairs for w = 0) are RESET.

        Args:
            weights: (rows, cols) values in [-1, 1]
            region: Region, or (row, col) offset of the block

        Returns:
            report: Final read-back minus requested weight per cell
        """
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 2:
            raise UsageError(f"program expects a 2-D block, got shape {w.shape}")
        region = self._region(region, w.shape)
        if (region.rows, region.cols) != w.shape:
            raise UsageError(
                f"weights {w.shape} do not match region {region.rows}x{region.cols}"
            )
        if not np.all(np.isfinite(w)) or np.any(np.abs(w) > 1.0 + _RANGE_SLACK):
            raise ScalingError(
                f"weights must lie in [-1, 1], max |w| = {np.max(np.abs(w)):.4f}"
            )
        w = np.clip(w, -1.0, 1.0)

        cfg = self.config
        target = w if cfg.bypass_quantizers else round_to_levels(w, cfg.weight_levels)
        magnitude = np.abs(target)
        desired = np.zeros(w.shape + (DEVICES_PER_CELL,), dtype=np.float64)
        desired[..., POS] = np.where(target > 0, magnitude, 0.0)[..., None]
        desired[..., NEG] = np.where(target < 0, magnitude, 0.0)[..., None]
        active = desired > 0

        with self._lock:
            written = np.zeros_like(desired)
            pending = active.copy()
            iterations = 0
            while pending.any() and iterations < cfg.max_verify_iters:
                noise = (
                    self.rng.normal(0.0, cfg.prog_noise_sigma, size=int(pending.sum()))
                    if cfg.prog_noise_sigma > 0
                    else 0.0
                )
                written[pending] = np.clip(desired[pending] + noise, 0.0, 1.0)
                self.write_pulses += int(pending.sum())
                iterations += 1
                pending = active & (np.abs(written - desired) > cfg.verify_tolerance)
                logger.debug(
                    "Verify pass %d: %d devices pending", iterations, int(pending.sum())
                )

            rows, cols = region.slices
            self.conductance[rows, cols] = written.astype(np.float32)
            self.targets[rows, cols] = target.astype(np.float32)
            self.programmed[rows, cols] = True

        unconverged = int(pending.sum())
        if unconverged:
            logger.warning(
                "%d devices missed the verify band after %d passes",
                unconverged,
                iterations,
            )
        return ProgrammingReport(
            region=region,
            residuals=self.read_weights(region) - w,
            iterations=iterations,
            devices_touched=region.cells * DEVICES_PER_CELL,
            unconverged=unconverged,
        )

    def read_weights(self, region: Region) -> np.ndarray:
        """Effective weights (positive pair mean minus negative pair mean)."""
        region = self._region(region)
        block = self.conductance[region.slices].astype(np.float64)
        return block[..., POS].mean(axis=-1) - block[..., NEG].mean(axis=-1)

    # computation

    def _check_programmed(self, region: Region) -> None:
        if not np.all(self.programmed[region.slices]):
            raise UsageError(
                f"region {region.rows}x{region.cols} at ({region.row}, {region.col}) "
                f"of core {self.core_id} is not programmed"
            )

    def analog_mvm(
        self, codes: np.ndarray, region: Region, phase_order: Sequence[str] = PHASES
    ) -> np.ndarray:
        """
        Raw column reads for already-quantized inputs: four single-sign
        passes combined with their signs, then the column distortion.
        """
        block = self.conductance[region.slices].astype(np.float64)
        g_pos = block[..., POS].mean(axis=-1)
        g_neg = block[..., NEG].mean(axis=-1)
        x_pos = np.maximum(codes, 0.0)
        x_neg = np.maximum(-codes, 0.0)
        partial = {
            "pp": lambda: x_pos @ g_pos,
            "pn": lambda: x_pos @ g_neg,
            "np": lambda: x_neg @ g_pos,
            "nn": lambda: x_neg @ g_neg,
        }
        if sorted(phase_order) != sorted(PHASES):
            raise UsageError(f"phase order must be a permutation of {PHASES}")
        raw = np.zeros(codes.shape[:-1] + (region.cols,), dtype=np.float64)
        for phase in phase_order:
            raw = raw + _PHASE_SIGN[phase] * partial[phase]()

        cols = region.slices[1]
        if self.config.bypass_quantizers:
            top = 1.0
        else:
            top = float(2 ** (self.config.input_bits - 1) - 1)
        return raw * self.distortion_gain[cols] + self.distortion_offset[cols] * top

    def mvm(
        self,
        x: np.ndarray,
        region: Region,
        phase_order: Sequence[str] = PHASES,
        calibrated: bool = True,
    ) -> np.ndarray:
        """
        Matrix-vector products x @ W on a programmed region.

        Each input vector is quantized to signed 8-bit codes with its own
        max-abs scale, run through the four sign phases, corrected per column
        and digitized to 8 bits with a per-vector max-abs scale.

        Args:
            x: (rows,) or (batch, rows) inputs in [-1, 1]
            region: Programmed region
            phase_order: Order in which the four sign phases are accumulated
            calibrated: Apply the column affine correction

        Returns:
            y: (cols,) or (batch, cols) outputs in real units
        """
        region = self._region(region)
        self._check_programmed(region)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != region.rows:
            raise UsageError(
                f"input {x.shape} does not match region with {region.rows} rows"
            )
        if not np.all(np.isfinite(x2)) or np.any(np.abs(x2) > 1.0 + _RANGE_SLACK):
            raise ScalingError("mvm inputs must lie in [-1, 1]")

        cfg = self.config
        if cfg.bypass_quantizers:
            codes, in_step = x2, np.ones((x2.shape[0], 1))
        else:
            codes, in_step = quantize_symmetric(x2, cfg.input_bits, axis=-1)

        y = self.analog_mvm(codes, region, phase_order)
        if calibrated:
            cols = region.slices[1]
            gain = self.gain[cols].astype(np.float64)
            y = y * gain + self.offset[cols].astype(np.float64)
        if not cfg.bypass_quantizers:
            out_codes, out_step = quantize_symmetric(y, cfg.output_bits, axis=-1)
            y = out_codes * out_step
        y = y * in_step
        return y[0] if single else y

    # maintenance

    def calibrate_affine(
        self, region: RegionLike, probes: Optional[int] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Fit the per-column affine correction of a programmed region.

        Random +-1 probe vectors are run through the analog path and each
        column's raw reads are regressed (least squares) onto the ideal
        products with the stored target weights.

        Args:
            region: Programmed region
            probes: Number of probe vectors (``calibration_probes`` by default);
                0 leaves the affine at identity

        Returns:
            gain, offset: The fitted values for the region's columns
        """
        region = self._region(region)
        self._check_programmed(region)
        probes = self.config.calibration_probes if probes is None else probes
        cols = region.slices[1]
        with self._lock:
            if probes <= 0:
                self.gain[cols] = 1.0
                self.offset[cols] = 0.0
                return self.gain[cols].copy(), self.offset[cols].copy()

            signs = self.rng.choice(np.array([-1.0, 1.0]), size=(probes, region.rows))
            if self.config.bypass_quantizers:
                codes = signs
            else:
                codes, _ = quantize_symmetric(signs, self.config.input_bits, axis=-1)
            raw = self.analog_mvm(codes, region)
            ideal = codes @ self.targets[region.slices].astype(np.float64)

            raw_mean = raw.mean(axis=0)
            ideal_mean = ideal.mean(axis=0)
            var = ((raw - raw_mean) ** 2).mean(axis=0)
            cov = ((raw - raw_mean) * (ideal - ideal_mean)).mean(axis=0)
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = np.where(var > 1e-12, cov / var, np.nan)
            singular = ~np.isfinite(gain) | (gain <= 0)
            offset = ideal_mean - gain * raw_mean
            if singular.any():
                logger.warning(
                    "Singular affine fit on %d columns of core %d; using gain 1",
                    int(singular.sum()), self.core_id,
                )
                gain = np.where(singular, 1.0, gain)
                offset = np.where(singular, (ideal - raw).mean(axis=0), offset)

            self.gain[cols] = gain.astype(np.float32)
            self.offset[cols] = offset.astype(np.float32)
        logger.debug("Calibrated %d columns of core %d", region.cols, self.core_id)
        return self.gain[cols].copy(), self.offset[cols].copy()

    def drift_apply(self, time_factor: float) -> None:
        """
        Power-law conductance drift: G <- G * t^(-nu) on every device above
        the RESET ceiling. A no-op when ``drift_nu`` is 0.
        """
        if time_factor <= 0:
            raise UsageError(f"drift time factor must be positive, got {time_factor}")
        nu = self.config.drift_nu
        if nu == 0:
            return
        with self._lock:
            active = self.conductance > self.config.reset_ceiling
            factor = np.float32(time_factor ** (-nu))
            self.conductance[active] = self.conductance[active] * factor
        logger.info(
            "Applied drift x%.4f to %d devices of core %d",
            float(factor),
            int(active.sum()),
            self.core_id,
        )

    def inject_column_distortion(
        self, col: int, gain: float = 1.0, offset: float = 0.0
    ) -> None:
        """
        Model an analog column error: raw reads of ``col`` become
        gain * raw + offset * full-scale input code.
        """
        if not 0 <= col < CORE_SIZE:
            raise PlacementError(f"column {col} outside the core")
        with self._lock:
            self.distortion_gain[col] = gain
            self.distortion_offset[col] = offset

    # persistence

    def _tables(self):
        return (
            self.conductance,
            self.targets,
            self.programmed.astype(np.float32),
            self.gain,
            self.offset,
            self.distortion_gain,
            self.distortion_offset,
        )

    def to_bytes(self) -> bytes:
        """Export the state: "PCMC", u16 version, u16 rows/cols/devices, f32 tables."""
        header = BLOB_MAGIC + struct.pack(
            "<HHHH", BLOB_VERSION, CORE_SIZE, CORE_SIZE, DEVICES_PER_CELL
        )
        return header + b"".join(
            np.ascontiguousarray(t, dtype="<f4").tobytes() for t in self._tables()
        )

    def load_bytes(self, blob: bytes) -> None:
        """Restore state written by ``to_bytes`` (bit-exact)."""
        if blob[:4] != BLOB_MAGIC:
            raise UsageError("not a crossbar core blob")
        version, rows, cols, devices = struct.unpack_from("<HHHH", blob, 4)
        expected = (CORE_SIZE, CORE_SIZE, DEVICES_PER_CELL)
        if version != BLOB_VERSION or (rows, cols, devices) != expected:
            raise UsageError(
                f"unsupported core blob v{version} {rows}x{cols}x{devices}"
            )
        offset = 12
        restored = []
        for table in self._tables():
            values = np.frombuffer(blob, dtype="<f4", count=table.size, offset=offset)
            restored.append(values.reshape(table.shape).astype(np.float32))
            offset += 4 * table.size
        with self._lock:
            (self.conductance, self.targets, programmed, self.gain, self.offset,
             self.distortion_gain, self.distortion_offset) = restored
            self.programmed = programmed > 0.5

    def save(self, path: Union[str, Path]) -> Path:
        return atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(
        cls,
        path: Union[str, Path],
        config: Optional[AnalogConfig] = None,
        rng: Optional[np.random.Generator] = None,
        core_id: int = 0,
    ) -> "CrossbarCore":
        core = cls(config, rng, core_id)
        core.load_bytes(Path(path).read_bytes())
        return core


def mvm_error_bound(
    x: np.ndarray, weights: np.ndarray, config: Optional[AnalogConfig] = None
) -> np.ndarray:
    """
    Worst-case |mvm(x) - x @ weights| from the three quantizers.

    Input rounding contributes half an input step times the column's weight
    magnitudes, weight error (half a level step, plus the verify band when
    programming is noisy) times the input magnitudes, and output rounding half
    an output step of the largest possible column result.

    Args:
        x: (rows,) or (batch, rows) inputs
        weights: Requested (rows, cols) weights
        config: Analog settings of the core

    Returns:
        bound: (cols,) or (batch, cols) per-output bound
    """
    config = config or AnalogConfig()
    x = np.asarray(x, dtype=np.float64)
    w = np.abs(np.asarray(weights, dtype=np.float64))
    x2 = np.atleast_2d(x)
    top_in = 2 ** (config.input_bits - 1) - 1
    top_out = 2 ** (config.output_bits - 1) - 1

    in_step = np.max(np.abs(x2), axis=1, keepdims=True) / top_in
    weight_err = 0.5 / config.weight_levels
    if config.prog_noise_sigma > 0:
        weight_err += config.verify_tolerance

    input_term = 0.5 * in_step * (w + weight_err).sum(axis=0)
    weight_term = ((np.abs(x2) + 0.5 * in_step) * weight_err).sum(axis=1, keepdims=True)
    exact = np.abs(x2 @ np.asarray(weights, dtype=np.float64))
    peak = np.max(exact + input_term + weight_term, axis=1, keepdims=True)
    output_term = 0.5 * peak / top_out
    bound = input_term + weight_term + output_term
    return bound[0] if x.ndim == 1 else bound
