# src/binfactor/utils/file_formats.py
"""
Binary matrix files, packed model files and shape-config text files.

All integers are little-endian unsigned 32-bit. Files are written to a
temporary sibling first and moved into place, so a failed write never
leaves a partial file behind.
"""

import logging
import os
import struct
import tempfile
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np
from numpy.typing import ArrayLike

from ..accounting.shapes import LayerShape, ModelShape
from ..linalg import DenseMatrix, as_dense
from ..packing.bits import FactorizedLayer, PackedBitMatrix, words_per_row
from .exceptions import FormatError, ValidationError

logger = logging.getLogger(__name__)

MATRIX_MAGIC = b"NQMX"
MODEL_MAGIC = b"NQPK"
FORMAT_VERSION = 1

FP16_MIN_POSITIVE = 2.0**-24
FP16_MAX = 65504.0

_U32 = struct.Struct("<I")


@dataclass(frozen=True, slots=True)
class NamedLayer:
    name: str
    layer: FactorizedLayer


@contextmanager
def _atomic_writer(path: str | Path) -> Iterator[BinaryIO]:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            yield f
        os.replace(tmp_name, target)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if size < 0 or self.offset + size > len(self.data):
            raise FormatError(
                "file is truncated", {"file": self.source, "offset": self.offset, "needed": size, "size": len(self.data)}
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return int(_U32.unpack(self.take(4))[0])

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype, count=count)

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError("trailing bytes after payload", {"file": self.source, "extra": len(self.data) - self.offset})


def _check_header(reader: _Reader, magic: bytes) -> None:
    found = reader.take(4)
    if found != magic:
        raise FormatError("bad magic", {"file": reader.source, "expected": magic.decode(), "found": found.hex()})
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise FormatError("unsupported format version", {"file": reader.source, "version": version})


def write_matrix(path: str | Path, matrix: ArrayLike) -> None:
    """Write a matrix as NQMX: magic, version, rows, cols, row-major float32."""
    values = as_dense(matrix, "matrix")
    rows, cols = values.shape
    with _atomic_writer(path) as f:
        f.write(MATRIX_MAGIC)
        f.write(_U32.pack(FORMAT_VERSION) + _U32.pack(rows) + _U32.pack(cols))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    logger.debug(f"Wrote {rows}x{cols} matrix to {path}")


def read_matrix(path: str | Path) -> DenseMatrix:
    reader = _Reader(Path(path).read_bytes(), str(path))
    _check_header(reader, MATRIX_MAGIC)
    rows, cols = reader.u32(), reader.u32()
    if rows == 0 or cols == 0:
        raise FormatError("matrix dimensions must be positive", {"file": str(path), "rows": rows, "cols": cols})
    values = reader.array("<f4", rows * cols).astype(np.float64).reshape(rows, cols)
    reader.expect_end()
    if not np.all(np.isfinite(values)):
        raise FormatError("matrix file contains non-finite values", {"file": str(path)})
    return values


def _scales_to_fp16(scales: np.ndarray) -> bytes:
    clipped = np.clip(scales, FP16_MIN_POSITIVE, FP16_MAX)
    return clipped.astype("<f2").tobytes()


def write_packed_model(path: str | Path, layers: Sequence[NamedLayer]) -> int:
    """Write NQPK and return the number of bytes written."""
    chunks: list[bytes] = [MODEL_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(layers))]
    for named in layers:
        layer = named.layer
        encoded = named.name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)) + encoded)
        chunks.append(_U32.pack(layer.n) + _U32.pack(layer.m) + _U32.pack(layer.r))
        chunks.append(layer.U_packed.words.astype("<u4").tobytes())
        chunks.append(layer.V_packed.words.astype("<u4").tobytes())
        chunks.append(_scales_to_fp16(layer.s1))
        chunks.append(_scales_to_fp16(layer.s2))
    payload = b"".join(chunks)
    with _atomic_writer(path) as f:
        f.write(payload)
    logger.info(f"Wrote {len(layers)} packed layers ({len(payload)} bytes) to {path}")
    return len(payload)


def read_packed_model(path: str | Path) -> list[NamedLayer]:
    reader = _Reader(Path(path).read_bytes(), str(path))
    _check_header(reader, MODEL_MAGIC)
    count = reader.u32()
    layers: list[NamedLayer] = []
    for index in range(count):
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("layer name is not valid UTF-8", {"file": str(path), "layer": index}) from e
        n, m, r = reader.u32(), reader.u32(), reader.u32()
        if min(n, m, r) == 0:
            raise FormatError("layer dimensions must be positive", {"layer": name, "n": n, "m": m, "r": r})
        wpr = words_per_row(r)
        u_words = reader.array("<u4", n * wpr).astype(np.uint32).reshape(n, wpr)
        v_words = reader.array("<u4", m * wpr).astype(np.uint32).reshape(m, wpr)
        s1 = reader.array("<f2", n).astype(np.float64)
        s2 = reader.array("<f2", m).astype(np.float64)
        try:
            layer = FactorizedLayer(
                U_packed=PackedBitMatrix(rows=n, cols=r, words=u_words),
                V_packed=PackedBitMatrix(rows=m, cols=r, words=v_words),
                s1=s1,
                s2=s2,
            )
        except ValidationError as e:
            raise FormatError(f"layer {name} is invalid: {e.message}", {"file": str(path), **e.context}) from e
        layers.append(NamedLayer(name=name, layer=layer))
    reader.expect_end()
    logger.debug(f"Read {count} packed layers from {path}")
    return layers


def read_shape_config(path: str | Path, name: str | None = None) -> ModelShape:
    """Parse ``name n m count`` records, ``#`` comments and the ``residual`` and ``tied`` counts."""
    source = Path(path)
    layers: list[LayerShape] = []
    residual = 0
    tied = 0
    description: list[str] = []
    for lineno, raw in enumerate(source.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if raw.strip().startswith("#") and not layers:
                description.append(raw.strip().lstrip("#").strip())
            continue
        fields = line.split()
        try:
            if fields[0] == "residual" and len(fields) == 2:
                residual += int(fields[1])
            elif fields[0] == "tied" and len(fields) == 2:
                tied += int(fields[1])
            elif len(fields) == 4:
                layers.append(LayerShape(fields[0], int(fields[1]), int(fields[2]), int(fields[3])))
            else:
                raise FormatError(
                    "expected 'name n m count', 'residual <count>' or 'tied <count>'",
                    {"file": str(source), "line": lineno},
                )
        except (ValueError, ValidationError) as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"bad shape record: {raw.strip()}", {"file": str(source), "line": lineno}) from e
    if not layers:
        raise FormatError("shape config has no layer records", {"file": str(source)})
    return ModelShape(
        name=name or source.stem,
        layers=tuple(layers),
        residual_fp16_params=residual,
        tied_head_params=tied,
        description=" ".join(description),
    )


def write_shape_config(path: str | Path, shape: ModelShape) -> None:
    lines = [f"# {shape.description}" if shape.description else f"# {shape.name}"]
    lines += [f"{layer.name} {layer.n} {layer.m} {layer.count}" for layer in shape.layers]
    if shape.tied_head_params:
        lines.append(f"tied {shape.tied_head_params}")
    lines.append(f"residual {shape.residual_fp16_params}")
    with _atomic_writer(path) as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
