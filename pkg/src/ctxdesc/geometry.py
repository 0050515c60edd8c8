"""Homographies from 4-point offsets, projective warps and coordinate normalization."""
import itertools
import logging
from pathlib import Path

import numpy as np

from ctxdesc.errors import ContractError, PointAtInfinityError, SingularSystemError

logger = logging.getLogger(__name__)

# corner order: (-1, 1), (1, 1), (-1, -1), (1, -1)
CORNERS = np.array([[-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
OFFSET_LIMIT = 0.5
W_EPSILON = 1e-12
DET_EPSILON = 1e-12
COLLINEAR_EPSILON = 1e-9
RESIDUAL_LIMIT = 1e-6


def _hartley_transform(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    if mean_dist <= 0:
        raise SingularSystemError("all points coincide")
    s = np.sqrt(2.0) / mean_dist
    return np.array([
        [s, 0.0, -s * centroid[0]],
        [0.0, s, -s * centroid[1]],
        [0.0, 0.0, 1.0],
    ])


def _apply(t: np.ndarray, points: np.ndarray) -> np.ndarray:
    homog = np.hstack([points, np.ones((len(points), 1))]) @ t.T
    return homog[:, :2] / homog[:, 2:3]


def _check_general_position(points: np.ndarray) -> None:
    for i, j, k in itertools.combinations(range(len(points)), 3):
        a, b, c = points[i], points[j], points[k]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) < COLLINEAR_EPSILON:
            raise SingularSystemError(f"corners {i}, {j}, {k} are collinear")


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact homography mapping four source points onto four destinations.

    Normalized DLT: both point sets are conditioned with a Hartley similarity,
    the 8x8 system with h22 = 1 is solved directly, then the conditioning is
    undone and the result rescaled so that h22 = 1.

    Raises:
        SingularSystemError: degenerate configuration or ill-conditioned solve.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ContractError("exactly four 2-D correspondences are required")
    _check_general_position(src)
    _check_general_position(dst)

    t_src = _hartley_transform(src)
    t_dst = _hartley_transform(dst)
    ns = _apply(t_src, src)
    nd = _apply(t_dst, dst)

    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(ns, nd)):
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"DLT system is singular: {e}") from e

    h_norm = np.append(h, 1.0).reshape(3, 3)
    hom = np.linalg.inv(t_dst) @ h_norm @ t_src
    if abs(hom[2, 2]) < W_EPSILON:
        raise SingularSystemError("homography has vanishing h22")
    hom = hom / hom[2, 2]
    if abs(np.linalg.det(hom)) <= DET_EPSILON:
        raise SingularSystemError("homography is singular")

    residual = np.max(np.abs(warp_points(hom, src) - dst))
    if residual > RESIDUAL_LIMIT:
        raise SingularSystemError(f"DLT reprojection residual {residual:.3e} too large")
    return hom


def homography_from_4pt(offsets: np.ndarray) -> np.ndarray:
    """Homography moving the normalized corners by the 4-point offsets.

    Args:
        offsets: 4x2 array of (du, dv) per corner, each in (-0.5, 0.5)

    Returns:
        3x3 matrix with h22 = 1.
    """
    offsets = np.asarray(offsets, dtype=np.float64).reshape(4, 2)
    if np.any(np.abs(offsets) >= OFFSET_LIMIT):
        raise ContractError(f"4-point offsets must lie in (-{OFFSET_LIMIT}, {OFFSET_LIMIT})")
    if not np.any(offsets):
        return np.eye(3)
    return homography_from_points(CORNERS, CORNERS + offsets)


def random_offsets(rng: np.random.Generator, magnitude: float = OFFSET_LIMIT) -> np.ndarray:
    """Uniform 4-point offsets in (-magnitude, magnitude)."""
    if not 0 <= magnitude <= OFFSET_LIMIT:
        raise ContractError(f"offset magnitude must be in [0, {OFFSET_LIMIT}]")
    draw = rng.uniform(-magnitude, magnitude, size=(4, 2))
    # keep strictly inside the open interval
    return np.clip(draw, -np.nextafter(OFFSET_LIMIT, 0), np.nextafter(OFFSET_LIMIT, 0))


def warp_point(h: np.ndarray, p) -> tuple[float, float]:
    """Apply ``h`` to a single point.

    Raises:
        PointAtInfinityError: if the homogeneous w is within 1e-12 of zero.
    """
    x, y = float(p[0]), float(p[1])
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if abs(w) <= W_EPSILON:
        raise PointAtInfinityError(f"point ({x}, {y}) maps to infinity")
    return ((h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w,
            (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w)


def warp_points(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`warp_point` over an Nx2 array."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    w = h[2, 0] * pts[:, 0] + h[2, 1] * pts[:, 1] + h[2, 2]
    if np.any(np.abs(w) <= W_EPSILON):
        raise PointAtInfinityError("a point maps to infinity")
    x = (h[0, 0] * pts[:, 0] + h[0, 1] * pts[:, 1] + h[0, 2]) / w
    y = (h[1, 0] * pts[:, 0] + h[1, 1] * pts[:, 1] + h[1, 2]) / w
    return np.stack([x, y], axis=1)


def normalize_coords(p, width: float, height: float) -> np.ndarray:
    """Pixel coordinates to [-1, 1]: x' = 2x / width - 1, y' = 2y / height - 1."""
    if width <= 0 or height <= 0:
        raise ContractError("image size must be positive")
    pts = np.asarray(p, dtype=np.float64)
    scale = np.array([2.0 / width, 2.0 / height])
    return pts * scale - 1.0


def normalization_matrix(width: float, height: float) -> np.ndarray:
    """The affine map of :func:`normalize_coords` as a 3x3 matrix."""
    return np.array([
        [2.0 / width, 0.0, -1.0],
        [0.0, 2.0 / height, -1.0],
        [0.0, 0.0, 1.0],
    ])


def pixel_homography(h_normalized: np.ndarray, width: float, height: float) -> np.ndarray:
    """Express a homography on normalized coordinates in pixel coordinates."""
    n = normalization_matrix(width, height)
    hom = np.linalg.inv(n) @ h_normalized @ n
    return hom / hom[2, 2]


def write_homography(path: str | Path, h: np.ndarray) -> None:
    Path(path).write_text(" ".join(repr(float(v)) for v in np.asarray(h).reshape(-1)) + "\n")


def read_homography(path: str | Path) -> np.ndarray:
    values = [float(v) for v in Path(path).read_text().split()]
    if len(values) != 9:
        raise ContractError(f"{path}: expected 9 values, found {len(values)}")
    return np.array(values).reshape(3, 3)
