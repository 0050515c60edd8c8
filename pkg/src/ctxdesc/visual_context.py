"""Regional feature grids, inverse-distance interpolation at keypoints, visual context encoder."""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from ctxdesc.errors import DimensionError, EmptyInputError, FormatError
from ctxdesc.numerics.layers import ForwardContext, MlpSpec, ParameterStore, init_mlp, mlp_apply
from ctxdesc.numerics.tensor import Tensor, as_tensor, concat

logger = logging.getLogger(__name__)

GRID_MAGIC = b"CTXG"
_GRID_HEADER = struct.Struct("<4sIIIf")
EXACT_HIT = 1e-9
DEFAULT_NEIGHBORS = 3


@dataclass
class RegionalGrid:
    """gh x gw cells of d-dimensional features; cell (r, c) sits at ((c + .5) s, (r + .5) s)."""
    features: np.ndarray  # gh x gw x d
    stride: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise EmptyInputError(f"regional grid must be gh x gw x d with gh, gw >= 1, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("regional grid contains non-finite features")
        if self.stride <= 0:
            raise ValueError("grid stride must be positive")

    @property
    def gh(self) -> int:
        return self.features.shape[0]

    @property
    def gw(self) -> int:
        return self.features.shape[1]

    @property
    def depth(self) -> int:
        return self.features.shape[2]

    def anchors(self) -> np.ndarray:
        """Pixel centers of all cells in row-major order, (gh * gw) x 2."""
        rows, cols = np.meshgrid(np.arange(self.gh), np.arange(self.gw), indexing="ij")
        return np.stack([(cols.reshape(-1) + 0.5) * self.stride,
                         (rows.reshape(-1) + 0.5) * self.stride], axis=1)

    def cells(self) -> np.ndarray:
        """Cell features in row-major order, (gh * gw) x d."""
        return self.features.reshape(-1, self.depth)

    def save(self, path: str | Path) -> None:
        header = _GRID_HEADER.pack(GRID_MAGIC, self.gh, self.gw, self.depth, self.stride)
        Path(path).write_bytes(header + self.features.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> "RegionalGrid":
        blob = Path(path).read_bytes()
        if len(blob) < _GRID_HEADER.size:
            raise FormatError(f"{path}: truncated grid header")
        magic, gh, gw, d, stride = _GRID_HEADER.unpack_from(blob)
        if magic != GRID_MAGIC:
            raise FormatError(f"{path}: bad grid magic {magic!r}")
        payload = blob[_GRID_HEADER.size:]
        if len(payload) != 4 * gh * gw * d:
            raise FormatError(f"{path}: expected {gh}x{gw}x{d} values")
        features = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(gh, gw, d)
        return cls(features=features, stride=float(stride))


def interpolate_regional(grid: RegionalGrid, query, k: int = DEFAULT_NEIGHBORS,
                         chunk_size: int | None = None) -> np.ndarray:
    """Inverse-distance weighted average over the k nearest cell anchors.

    A query closer than 1e-9 px to its nearest anchor takes that cell's
    feature exactly. Ties in distance go to the lower row-major cell index.

    Args:
        grid: regional feature grid
        query: K x 2 pixel coordinates
        k: neighbor count, 1 <= k <= gh * gw
        chunk_size: optional number of queries processed at a time

    Returns:
        K x d interpolated features.
    """
    anchors = grid.anchors()
    cells = grid.cells()
    if not 1 <= k <= len(anchors):
        raise ValueError(f"neighbor count must be in [1, {len(anchors)}], got {k}")
    pts = np.asarray(query, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((len(pts), grid.depth))
    step = chunk_size or max(len(pts), 1)
    for start in range(0, len(pts), step):
        block = pts[start:start + step]
        dist = cdist(block, anchors)
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        for row, nearest in enumerate(order):
            d = dist[row, nearest]
            if d[0] < EXACT_HIT:
                out[start + row] = cells[nearest[0]]
                continue
            w = 1.0 / d
            out[start + row] = w @ cells[nearest] / w.sum()
    return out


@dataclass(frozen=True)
class VisEncoder:
    """reduce: d -> 512 -> 128 with CN after each perceptron; fuse: 256 -> 256 -> 128.

    Fusion input is ``[reduced regional || raw local]``.
    """
    regional_dim: int = 64
    local_dim: int = 128
    hidden: int = 512
    out_dim: int = 128
    prefix: str = "vis"

    @property
    def reduce_spec(self) -> MlpSpec:
        return MlpSpec(in_dim=self.regional_dim, widths=(self.hidden, self.out_dim),
                       activations=("relu", "none"), norms=("CN", "CN"))

    @property
    def fuse_spec(self) -> MlpSpec:
        fused = self.out_dim + self.local_dim
        return MlpSpec(in_dim=fused, widths=(fused, self.out_dim),
                       activations=("relu", "none"), norms=("none", "none"))

    def init(self, store, rng: np.random.Generator) -> None:
        init_mlp(self.reduce_spec, store, f"{self.prefix}.reduce", rng)
        init_mlp(self.fuse_spec, store, f"{self.prefix}.fuse", rng)

    def __call__(self, store: ParameterStore, regional, local, ctx: ForwardContext | None = None) -> Tensor:
        regional = as_tensor(regional)
        local = as_tensor(local)
        if regional.shape[0] != local.shape[0]:
            raise DimensionError(f"regional has {regional.shape[0]} rows, local has {local.shape[0]}")
        reduced = mlp_apply(self.reduce_spec, store, f"{self.prefix}.reduce", regional, ctx)
        return mlp_apply(self.fuse_spec, store, f"{self.prefix}.fuse", concat([reduced, local], axis=1), ctx)


def encode_visual(enc: VisEncoder, store: ParameterStore, regional, local,
                  ctx: ForwardContext | None = None) -> Tensor:
    """Visual context features, K x 128."""
    return enc(store, regional, local, ctx)
