"""
Placement of network layers onto crossbar cores for l2l-pcm.
"""

import json
import logging
from typing import Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from l2l_pcm.crossbar.core import CORE_SIZE, DEVICES_PER_CELL, Region
from l2l_pcm.errors import CapacityError, UsageError

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class LayerSpec(BaseModel):
    """Weight matrix of one layer as it is laid out on the array."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(..., description="Layer id")
    rows: int = Field(..., ge=1, description="Matrix rows, including the bias row")
    cols: int = Field(..., ge=1, description="Matrix columns (output features)")
    kind: Literal["conv", "dense"] = Field("dense", description="Layer type")
    bias_row: bool = Field(
        False, description="Last row carries biases fed by a constant 1"
    )

    @property
    def input_rows(self) -> int:
        return self.rows - int(self.bias_row)


class FragmentEntry(BaseModel):
    """One tile of a layer matrix placed on one core."""

    model_config = ConfigDict(frozen=True)

    layer: str
    fragment: int
    core: int
    row: int = Field(..., description="Row offset on the core")
    col: int = Field(..., description="Column offset on the core")
    rows: int
    cols: int
    row_start: int = Field(..., description="First layer-matrix row of the tile")
    col_start: int = Field(..., description="First layer-matrix column of the tile")
    kind: Literal["conv", "dense"] = "dense"
    bias_row: bool = False

    @property
    def region(self) -> Region:
        return Region(self.row, self.col, self.rows, self.cols)

    @property
    def devices(self) -> int:
        return self.rows * self.cols * DEVICES_PER_CELL


class PlacementPlan(BaseModel):
    """Fragments of every layer with their core and offset."""

    model_config = ConfigDict(frozen=True)

    cores: int = Field(..., ge=1)
    layers: Tuple[LayerSpec, ...]
    entries: Tuple[FragmentEntry, ...]

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise UsageError(f"layer {name!r} is not in the plan")

    def fragments(self, name: str) -> List[FragmentEntry]:
        self.layer(name)
        return [e for e in self.entries if e.layer == name]

    def device_count(self, name: Optional[str] = None) -> int:
        """Devices used by one layer, or by the whole plan."""
        entries = self.entries if name is None else self.fragments(name)
        return sum(e.devices for e in entries)

    def to_jsonl(self) -> str:
        """One JSON record per fragment."""
        return "".join(
            json.dumps(e.model_dump(), sort_keys=True) + "\n" for e in self.entries
        )

    @classmethod
    def from_jsonl(cls, text: str, cores: Optional[int] = None) -> "PlacementPlan":
        entries = tuple(
            FragmentEntry.model_validate(json.loads(line))
            for line in text.splitlines()
            if line.strip()
        )
        layers: Dict[str, LayerSpec] = {}
        for e in entries:
            current = layers.get(e.layer)
            rows = max(e.row_start + e.rows, current.rows if current else 0)
            cols = max(e.col_start + e.cols, current.cols if current else 0)
            layers[e.layer] = LayerSpec(
                name=e.layer, rows=rows, cols=cols, kind=e.kind, bias_row=e.bias_row
            )
        if cores is None:
            cores = max((e.core for e in entries), default=0) + 1
        return cls(cores=cores, layers=tuple(layers.values()), entries=entries)


def tile_layer(
    spec: LayerSpec, size: int = CORE_SIZE
) -> List[Tuple[int, int, int, int]]:
    """Row-major tiles (row_start, col_start, rows, cols) of at most size x size."""
    tiles = []
    for r0 in range(0, spec.rows, size):
        for c0 in range(0, spec.cols, size):
            tiles.append((r0, c0, min(size, spec.rows - r0), min(size, spec.cols - c0)))
    return tiles


class _CoreSpace:
    """Guillotine free-rectangle list of one core."""

    def __init__(self, size: int = CORE_SIZE):
        self.free: List[Tuple[int, int, int, int]] = [(0, 0, size, size)]

    def place(self, rows: int, cols: int) -> Optional[Tuple[int, int]]:
        for i, (r, c, h, w) in enumerate(self.free):
            if rows <= h and cols <= w:
                # the strip to the right keeps the full height
                pieces = [(r, c + cols, h, w - cols), (r + rows, c, h - rows, cols)]
                self.free[i : i + 1] = [p for p in pieces if p[2] > 0 and p[3] > 0]
                return r, c
        return None


def plan_placement(layers: Sequence[LayerSpec], cores: int = 2) -> PlacementPlan:
    """
    Greedy first-fit placement in layer order.

    Layers larger than a core are split row-major into tiles of at most
    256x256; every tile goes to the first core with a free rectangle that
    holds it.

    Args:
        layers: Layer matrices in network order
        cores: Number of available cores

    Returns:
        plan: Fragment placement

    Raises:
        CapacityError: listing every tile that found no space
    """
    if cores < 1:
        raise UsageError("placement needs at least one core")
    names = [spec.name for spec in layers]
    if len(set(names)) != len(names):
        raise UsageError("layer names must be unique")

    spaces = [_CoreSpace() for _ in range(cores)]
    entries: List[FragmentEntry] = []
    overflow: List[str] = []
    for spec in layers:
        for index, (r0, c0, rows, cols) in enumerate(tile_layer(spec)):
            for core_id, space in enumerate(spaces):
                spot = space.place(rows, cols)
                if spot is not None:
                    entries.append(
                        FragmentEntry(
                            layer=spec.name,
                            fragment=index,
                            core=core_id,
                            row=spot[0],
                            col=spot[1],
                            rows=rows, cols=cols, row_start=r0, col_start=c0,
                            kind=spec.kind, bias_row=spec.bias_row,
                        )
                    )
                    break
            else:
                overflow.append(f"{spec.name}#{index} ({rows}x{cols})")

    if overflow:
        raise CapacityError(f"layers need more than {cores} cores", overflow=overflow)

    plan = PlacementPlan(cores=cores, layers=tuple(layers), entries=tuple(entries))
    logger.info(
        "Placed %d layers as %d fragments on %d cores (%d devices)",
        len(layers), len(entries), cores, plan.device_count(),
    )
    return plan


def conv_layer(
    name: str, in_channels: int, filters: int, kernel: int = 3, bias: bool = True
) -> LayerSpec:
    return LayerSpec(
        name=name, rows=kernel * kernel * in_channels + int(bias), cols=filters,
        kind="conv", bias_row=bias,
    )


def dense_layer(name: str, features: int, classes: int) -> LayerSpec:
    return LayerSpec(name=name, rows=features, cols=classes, kind="dense")


def cnn_layers(
    filters: int = 56,
    channels: int = 1,
    classes: int = 5,
    blocks: int = 4,
    conv_bias: bool = True,
) -> List[LayerSpec]:
    """Layer matrices of the four-block few-shot CNN, full size by default."""
    specs = []
    c = channels
    for block in range(blocks):
        specs.append(conv_layer(f"conv{block + 1}", c, filters, bias=conv_bias))
        c = filters
    specs.append(dense_layer("dense", filters, classes))
    return specs
