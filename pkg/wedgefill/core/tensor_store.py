import csv
import io
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from wedgefill.core.errors import MissingArtifactError, TensorFormatError

logger = logging.getLogger(__name__)

MAGIC = b"SINOTN01"
_U32 = struct.Struct("<I")

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def encode_tensors(entries: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays as a TensorContainer (float32 little-endian, row-major)"""
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(_U32.pack(len(entries)))
    for name, array in entries.items():
        encoded_name = name.encode("utf-8")
        values = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
        buffer.write(_U32.pack(len(encoded_name)))
        buffer.write(encoded_name)
        buffer.write(_U32.pack(values.ndim))
        for dim in values.shape:
            buffer.write(_U32.pack(dim))
        buffer.write(values.tobytes(order="C"))
    return buffer.getvalue()


def decode_tensors(data: bytes, source: str = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    """Parse a TensorContainer; every size is checked against the header arithmetic"""
    view = memoryview(data)
    offset = 0

    def take(count: int) -> memoryview:
        nonlocal offset
        if offset + count > len(view):
            raise TensorFormatError(f"{source}: truncated container at byte {offset}")
        chunk = view[offset:offset + count]
        offset += count
        return chunk

    def take_u32() -> int:
        return _U32.unpack(take(4))[0]

    if bytes(take(len(MAGIC))) != MAGIC:
        raise TensorFormatError(f"{source}: bad magic, not a tensor container")

    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(take_u32()):
        try:
            name = bytes(take(take_u32())).decode("utf-8")
        except UnicodeDecodeError as e:
            raise TensorFormatError(f"{source}: entry name is not UTF-8") from e
        if name in entries:
            raise TensorFormatError(f"{source}: duplicate entry '{name}'")
        shape = tuple(take_u32() for _ in range(take_u32()))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        entries[name] = values.astype(np.float32)
    if offset != len(view):
        raise TensorFormatError(f"{source}: {len(view) - offset} trailing bytes after last entry")
    return entries


def write_tensors(path: PathLike, entries: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_tensors(entries))
    logger.info(f"Wrote {len(entries)} tensors to {path}")


def read_tensors(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(str(path))
    return decode_tensors(path.read_bytes(), source=str(path))


def encode_pgm16(image: np.ndarray) -> bytes:
    """16-bit binary PGM; [0,1] maps linearly onto [0, 65535]"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise TensorFormatError(f"PGM export needs a 2-D image, got shape {image.shape}")
    height, width = image.shape
    samples = np.rint(np.clip(image, 0.0, 1.0) * 65535.0).astype(">u2")
    return f"P5\n{width} {height}\n65535\n".encode("ascii") + samples.tobytes()


def write_pgm16(path: PathLike, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pgm16(image))


def read_raw_slice(path: PathLike, size: int) -> np.ndarray:
    """Headerless float32 little-endian slice of size x size Hounsfield units"""
    data = Path(path).read_bytes()
    if len(data) != 4 * size * size:
        raise TensorFormatError(f"{path}: expected {4 * size * size} bytes for a {size}x{size} slice, got {len(data)}")
    values = np.frombuffer(data, dtype="<f4").reshape(size, size).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise TensorFormatError(f"{path}: slice contains non-finite values")
    return values


def hu_window(values: np.ndarray, low: float = -250.0, high: float = 500.0) -> np.ndarray:
    """Clip to the HU window and min-max normalize the window onto [0, 1]"""
    return (np.clip(values, low, high) - low) / (high - low)


def format_manifest(fields: Mapping[str, object]) -> str:
    return "".join(f"{key} = {value}\n" for key, value in fields.items())


def parse_manifest(text: str) -> Dict[str, str]:
    fields: Dict[str, str] = {}
    for line in text.splitlines():
        if "=" in line and not line.lstrip().startswith("#"):
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    return fields


def format_loss_log(rows: Iterable[Tuple[int, float]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for step, loss in rows:
        writer.writerow([step, repr(float(loss))])
    return buffer.getvalue()


def parse_loss_log(text: str) -> List[Tuple[int, float]]:
    reader = csv.reader(io.StringIO(text))
    next(reader, None)
    return [(int(step), float(loss)) for step, loss in reader]


@dataclass(frozen=True)
class StageArtifact:
    """Where a stage checkpoint lives and which stage produces it"""

    stage: str
    checkpoint: Path
    loss_log: Path
    manifest: Path


class ArtifactStore:
    """Run-directory layout and artifact access"""

    STAGES = ("score", "pairs", "distill", "postproc", "direct", "postproc-noproxy", "postproc-nosino")

    def __init__(self, run_dir: PathLike):
        self.run_dir = Path(run_dir)

    @property
    def dataset_path(self) -> Path:
        return self.run_dir / "dataset" / "dataset.sinotn"

    @property
    def dataset_manifest_path(self) -> Path:
        return self.run_dir / "dataset" / "manifest.txt"

    @property
    def pairs_path(self) -> Path:
        return self.run_dir / "pairs" / "pairs.sinotn"

    @property
    def infer_dir(self) -> Path:
        return self.run_dir / "infer"

    @property
    def eval_dir(self) -> Path:
        return self.run_dir / "eval"

    def stage(self, stage: str) -> StageArtifact:
        """Checkpoint, loss log and manifest paths for a training stage"""
        if stage == "pairs":
            return StageArtifact(stage, self.pairs_path, self.run_dir / "pairs" / "pairs_log.csv",
                                 self.run_dir / "pairs" / "manifest.txt")
        base = self.run_dir / "checkpoints"
        return StageArtifact(stage, base / f"{stage}.sinotn", base / f"{stage}_loss.csv", base / f"{stage}.manifest.txt")

    def require(self, path: Path, produced_by: Optional[str] = None) -> Path:
        """Raise MissingArtifactError naming the producing stage when a prerequisite is absent"""
        if not path.is_file():
            logger.error(f"Missing prerequisite {path}")
            raise MissingArtifactError(str(path), produced_by)
        return path

    def has(self, path: Path) -> bool:
        return path.is_file()

    def write_text(self, path: Path, text: str) -> None:
        atomic_write_bytes(path, text.encode("utf-8"))

    def write_manifest(self, path: Path, fields: Mapping[str, object]) -> None:
        self.write_text(path, format_manifest(fields))

    def read_manifest(self, path: Path) -> Dict[str, str]:
        if not path.is_file():
            return {}
        return parse_manifest(path.read_text(encoding="utf-8"))

    def existing_stages(self) -> Sequence[str]:
        return [stage for stage in self.STAGES if self.stage(stage).checkpoint.is_file()]


def get_store(run_dir: PathLike) -> ArtifactStore:
    """Get an artifact store rooted at the run directory"""
    store = ArtifactStore(run_dir)
    store.run_dir.mkdir(parents=True, exist_ok=True)
    return store
