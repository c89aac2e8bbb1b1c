"""
Programming and dispatch of placed layers for l2l-pcm.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from l2l_pcm.config import AnalogConfig
from l2l_pcm.crossbar.core import CrossbarCore, ProgrammingReport
from l2l_pcm.deploy.placement import PlacementPlan
from l2l_pcm.errors import UsageError
from l2l_pcm.utils.persistence import MetricsSink

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def layer_matrix(weights: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Flatten a layer to its crossbar matrix.

    A (k, k, C, F) kernel becomes (k*k*C, F) in im2col column order; a bias
    vector is appended as the last row.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 4:
        w = w.reshape(-1, w.shape[3])
    if bias is not None:
        w = np.concatenate([w, np.asarray(bias, dtype=np.float64)[None, :]], axis=0)
    return w


class Deployment:
    """
    A placement plan bound to simulated cores.

    Each layer is scaled into [-1, 1] by its own max-abs before programming;
    ``dispatch_mvm`` undoes the scale. Every program, reprogram, calibrate
    and drift action is appended to ``events`` (and to the ``events`` metric
    family when a sink is attached).
    """

    def __init__(
        self,
        plan: PlacementPlan,
        config: Optional[AnalogConfig] = None,
        rngs: Optional[Sequence[np.random.Generator]] = None,
        sink: Optional[MetricsSink] = None,
        context: Optional[Dict[str, Any]] = None,
    ):
        """
        Initialize the Deployment.

        Args:
            plan: Fragment placement
            config: Analog settings shared by all cores
            rngs: One seeded generator per core
            sink: Optional metrics sink for the event log
            context: Extra columns written with every event (e.g. task index)
        """
        self.plan = plan
        self.config = config or AnalogConfig()
        if rngs is None:
            rngs = [np.random.default_rng(i) for i in range(plan.cores)]
        if len(rngs) < plan.cores:
            raise UsageError(
                f"plan uses {plan.cores} cores but {len(rngs)} generators were given"
            )
        self.cores = [
            CrossbarCore(self.config, rng=rngs[i], core_id=i)
            for i in range(plan.cores)
        ]
        self.scales: Dict[str, float] = {}
        self.events: List[Dict[str, Any]] = []
        self.sink = sink
        self.context: Dict[str, Any] = dict(context or {})

        logger.info(
            "Deployment initialized with %d cores, %d layers",
            plan.cores, len(plan.layers),
        )

    def _event(self, event: str, layer: str, devices: int, core: int = -1) -> None:
        row = dict(self.context)
        row.update({"event": event, "layer": layer, "core": core, "devices": devices})
        self.events.append(row)
        if self.sink is not None:
            self.sink.write("events", row)

    def count_events(self, event: str, layer: Optional[str] = None) -> int:
        return sum(
            1
            for e in self.events
            if e["event"] == event and (layer is None or e["layer"] == layer)
        )

    def _write(
        self, layer: str, matrix: np.ndarray, event: str
    ) -> List[ProgrammingReport]:
        spec = self.plan.layer(layer)
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (spec.rows, spec.cols):
            raise UsageError(
                f"layer {layer} expects {(spec.rows, spec.cols)}, got {matrix.shape}"
            )
        peak = float(np.max(np.abs(matrix))) if matrix.size else 0.0
        scale = peak if peak > 0 else 1.0
        reports = []
        for frag in self.plan.fragments(layer):
            block = matrix[
                frag.row_start : frag.row_start + frag.rows,
                frag.col_start : frag.col_start + frag.cols,
            ]
            reports.append(self.cores[frag.core].program(block / scale, frag.region))
        self.scales[layer] = scale
        self._event(event, layer, sum(r.devices_touched for r in reports))
        return reports

    def program_layer(self, layer: str, matrix: np.ndarray) -> List[ProgrammingReport]:
        """
        Program every fragment of a layer.

        Args:
            layer: Layer id from the plan
            matrix: Full (rows, cols) layer matrix in real units

        Returns:
            reports: One programming report per fragment
        """
        return self._write(layer, matrix, "program")

    def reprogram_region(
        self, layer: str, matrix: np.ndarray
    ) -> List[ProgrammingReport]:
        """Re-program one already programmed layer; no other cell is written."""
        if layer not in self.scales:
            raise UsageError(f"layer {layer} was never programmed")
        return self._write(layer, matrix, "reprogram")

    def dispatch_mvm(self, layer: str, x: np.ndarray) -> np.ndarray:
        """
        Compute x @ W for a programmed layer across its fragments.

        Row tiles add their partial products, column tiles are concatenated,
        and a constant-one input feeds the bias row when the layer has one.

        Args:
            layer: Layer id
            x: (in_rows,) or (batch, in_rows) inputs in real units

        Returns:
            y: (cols,) or (batch, cols) outputs in real units
        """
        if layer not in self.scales:
            raise UsageError(f"layer {layer} is not programmed")
        spec = self.plan.layer(layer)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.shape[1] != spec.input_rows:
            raise UsageError(
                f"layer {layer} takes {spec.input_rows} inputs, got {x2.shape[1]}"
            )
        if spec.bias_row:
            x2 = np.concatenate([x2, np.ones((x2.shape[0], 1))], axis=1)

        peak = np.max(np.abs(x2), axis=1, keepdims=True)
        x_scale = np.where(peak > 0, peak, 1.0)
        scaled = x2 / x_scale

        out = np.zeros((x2.shape[0], spec.cols), dtype=np.float64)
        for frag in self.plan.fragments(layer):
            part = self.cores[frag.core].mvm(
                scaled[:, frag.row_start : frag.row_start + frag.rows], frag.region
            )
            out[:, frag.col_start : frag.col_start + frag.cols] += part
        out *= x_scale * self.scales[layer]
        return out[0] if single else out

    def read_layer(self, layer: str) -> np.ndarray:
        """Reassemble the programmed layer matrix from device read-back (real units)."""
        if layer not in self.scales:
            raise UsageError(f"layer {layer} is not programmed")
        spec = self.plan.layer(layer)
        matrix = np.zeros((spec.rows, spec.cols))
        for frag in self.plan.fragments(layer):
            matrix[
                frag.row_start : frag.row_start + frag.rows,
                frag.col_start : frag.col_start + frag.cols,
            ] = self.cores[frag.core].read_weights(frag.region)
        return matrix * self.scales[layer]

    def calibrate(
        self, layers: Optional[Sequence[str]] = None, probes: Optional[int] = None
    ) -> None:
        """Fit the column affine of every fragment of the given layers.

        Defaults to every programmed layer.
        """
        for layer in layers if layers is not None else list(self.scales):
            for frag in self.plan.fragments(layer):
                self.cores[frag.core].calibrate_affine(frag.region, probes)
            self._event("calibrate", layer, 0)

    def apply_drift(self, time_factor: float) -> None:
        for core in self.cores:
            core.drift_apply(time_factor)
            self._event("drift", "*", 0, core=core.core_id)
