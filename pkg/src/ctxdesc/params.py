"""Container for every trainable weight, BN statistic and architecture setting.

File layout (CTXP): magic, u32 format version, then sections until EOF. Each
section is a u32 name length, the UTF-8 name and one CTXM matrix blob.
Section names:

- ``<param>``            trainable or frozen tensor (``temperature`` holds alpha)
- ``running/<buffer>``   BN running statistics
- ``frozen/<param>``     1x1 marker for parameters excluded from updates
- ``meta/<key>``         1x1 architecture settings
"""
import io
import logging
import struct
from pathlib import Path

import numpy as np

from ctxdesc.errors import FormatError
from ctxdesc.numerics.matrix_io import encode_matrix, read_matrix
from ctxdesc.numerics.tensor import Tensor, parameter

logger = logging.getLogger(__name__)

PARAMS_MAGIC = b"CTXP"
FORMAT_VERSION = 1
TEMPERATURE = "temperature"

_RUNNING = "running/"
_FROZEN = "frozen/"
_META = "meta/"


def storable(value) -> np.ndarray:
    """float64 copy rounded to float32, so the CTXP file holds the values exactly."""
    return np.asarray(value, dtype=np.float64).astype(np.float32).astype(np.float64)


class ModelParameters:
    """Named parameters, BN buffers, frozen tags and architecture metadata."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self.meta: dict[str, float] = {}

    def __repr__(self) -> str:
        return (f"ModelParameters({len(self.tensors)} tensors, "
                f"{self.count()} values, {len(self.frozen)} frozen)")

    # store protocol used by the layers
    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"parameter '{name}' already defined")
        t = parameter(storable(value), name=name)
        self.tensors[name] = t
        if not trainable:
            self.frozen.add(name)
        return t

    def tensor(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"unknown parameter '{name}'") from None

    def update(self, name: str, value) -> None:
        self.tensor(name).data = storable(value)

    def buffer(self, name: str) -> np.ndarray:
        return self.buffers[name]

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = storable(value)

    def set_meta(self, key: str, value: float) -> None:
        self.meta[key] = float(np.float32(value))

    @property
    def temperature(self) -> float:
        return self.tensor(TEMPERATURE).item()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParameters":
        other = ModelParameters()
        for name, t in self.tensors.items():
            other.tensors[name] = parameter(t.data.copy(), name=name)
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.frozen = set(self.frozen)
        other.meta = dict(self.meta)
        return other

    def equals(self, other: "ModelParameters") -> bool:
        """Bit-exact comparison of every section."""
        if (self.tensors.keys() != other.tensors.keys() or self.buffers.keys() != other.buffers.keys()
                or self.frozen != other.frozen or self.meta != other.meta):
            return False
        return (all(np.array_equal(t.data, other.tensors[n].data) for n, t in self.tensors.items())
                and all(np.array_equal(b, other.buffers[n]) for n, b in self.buffers.items()))

    # ------------------------------------------------------------------
    # serialization

    def _sections(self):
        for name in sorted(self.meta):
            yield _META + name, np.array([[self.meta[name]]])
        for name, t in self.tensors.items():
            yield name, t.data
        for name in sorted(self.frozen):
            yield _FROZEN + name, np.ones((1, 1))
        for name in sorted(self.buffers):
            yield _RUNNING + name, self.buffers[name]

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(PARAMS_MAGIC)
        out.write(struct.pack("<I", FORMAT_VERSION))
        for name, matrix in self._sections():
            encoded = name.encode("utf-8")
            out.write(struct.pack("<I", len(encoded)))
            out.write(encoded)
            out.write(encode_matrix(matrix))
        return out.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParameters":
        stream = io.BytesIO(blob)
        if stream.read(4) != PARAMS_MAGIC:
            raise FormatError("not a CTXP parameter file")
        (version,) = struct.unpack("<I", stream.read(4))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported parameter format version {version}")
        params = cls()
        while True:
            prefix = stream.read(4)
            if not prefix:
                break
            if len(prefix) != 4:
                raise FormatError("truncated section header")
            (length,) = struct.unpack("<I", prefix)
            name = stream.read(length).decode("utf-8")
            matrix = read_matrix(stream)
            if name.startswith(_META):
                params.meta[name[len(_META):]] = float(matrix[0, 0])
            elif name.startswith(_FROZEN):
                params.frozen.add(name[len(_FROZEN):])
            elif name.startswith(_RUNNING):
                params.buffers[name[len(_RUNNING):]] = matrix
            else:
                params.tensors[name] = parameter(matrix, name=name)
        unknown = params.frozen - params.tensors.keys()
        if unknown:
            raise FormatError(f"frozen markers without parameters: {sorted(unknown)}")
        return params

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())
        logger.info(f"Saved {self!r} to {path}")

    @classmethod
    def load(cls, path: str | Path) -> "ModelParameters":
        params = cls.from_bytes(Path(path).read_bytes())
        logger.debug(f"Loaded {params!r} from {path}")
        return params
