"""
Checkpoints, atomic writes and CSV metric streams for l2l-pcm.
"""

import csv
import io
import logging
import os
import struct
import tempfile
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from l2l_pcm.errors import UsageError

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_VERSION = 1
MAML_MAGIC = b"MAML"
EPROP_MAGIC = b"EPRP"


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """
    Write ``data`` to a temp file next to ``path`` and rename it into place.

    Readers never see a half-written file: either the old content or the new.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def encode_tensors(magic: bytes, tensors: Mapping[str, np.ndarray]) -> bytes:
    """
    Serialize a named tensor table.

    Layout: magic (4 bytes), u16 version, u32 count, then per tensor u16 name
    length, UTF-8 name, u8 ndim, u32 dims, little-endian float32 data.
    """
    if len(magic) != 4:
        raise UsageError(f"checkpoint magic must be 4 bytes, got {magic!r}")
    out = io.BytesIO()
    out.write(magic)
    out.write(struct.pack("<HI", CHECKPOINT_VERSION, len(tensors)))
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        array = np.asarray(value, dtype="<f4")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", array.ndim))
        out.write(struct.pack(f"<{array.ndim}I", *array.shape))
        out.write(np.ascontiguousarray(array).tobytes())
    return out.getvalue()


def decode_tensors(
    data: bytes, magic: Optional[bytes] = None
) -> Tuple[bytes, Dict[str, np.ndarray]]:
    """Inverse of ``encode_tensors``; checks the magic when one is given."""
    found = data[:4]
    if magic is not None and found != magic:
        raise UsageError(f"expected a {magic!r} checkpoint, found {found!r}")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise UsageError(f"unsupported checkpoint version {version}")
    offset = 10
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + length].decode("utf-8")
        offset += length
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        flat = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
        tensors[name] = flat.reshape(shape).astype(np.float32)
        offset += 4 * size
    return found, tensors


def save_checkpoint(
    path: PathLike, tensors: Mapping[str, np.ndarray], magic: bytes = MAML_MAGIC
) -> Path:
    """Atomically write a tensor table."""
    target = atomic_write_bytes(path, encode_tensors(magic, tensors))
    logger.info("Saved checkpoint %s (%d tensors)", target, len(tensors))
    return target


def load_checkpoint(
    path: PathLike, magic: Optional[bytes] = None
) -> Dict[str, np.ndarray]:
    """Read a tensor table written by ``save_checkpoint``."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    _, tensors = decode_tensors(path.read_bytes(), magic)
    return tensors


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(
    path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> Path:
    """Write a complete CSV dump atomically (header row, repr floats)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))


class MetricsSink:
    """
    Append-only CSV streams, one file per metric family.

    The first row written to a family fixes its header. Floats are written
    with ``repr`` so identical runs give byte-identical files.
    """

    def __init__(self, directory: PathLike):
        """
        Initialize the MetricsSink.

        Args:
            directory: Run directory that receives ``<family>.csv`` files
        """
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._headers: Dict[str, List[str]] = {}
        self._lock = threading.Lock()

        logger.info("MetricsSink initialized with directory: %s", self.directory)

    def path(self, family: str) -> Path:
        return self.directory / f"{family}.csv"

    def _existing_header(self, family: str) -> Optional[List[str]]:
        path = self.path(family)
        if not path.is_file() or path.stat().st_size == 0:
            return None
        with open(path, newline="", encoding="utf-8") as handle:
            return next(csv.reader(handle), None)

    def write(self, family: str, row: Mapping[str, Any]) -> None:
        """
        Append one row to ``family``.

        A family whose file already exists (a resumed run) keeps its rows and
        header; the row must fit that header.

        Args:
            family: Stream name (file stem)
            row: Column values; the first row of a new family defines the columns
        """
        with self._lock:
            header = self._headers.get(family)
            create = False
            if header is None:
                header = self._existing_header(family)
                create = header is None
                if create:
                    header = list(row.keys())
                self._headers[family] = header
            missing = set(row) - set(header)
            if missing:
                raise UsageError(f"unknown columns for {family}: {sorted(missing)}")
            mode = "w" if create else "a"
            with open(self.path(family), mode, newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                if create:
                    writer.writerow(header)
                writer.writerow([_cell(row.get(column)) for column in header])

    def write_many(self, family: str, rows: Iterable[Mapping[str, Any]]) -> None:
        for row in rows:
            self.write(family, row)

    def read(self, family: str) -> List[Dict[str, str]]:
        """Rows written so far, as strings."""
        path = self.path(family)
        if not path.is_file():
            return []
        with open(path, newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))
