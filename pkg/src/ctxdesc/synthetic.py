"""Synthetic scene pairs with ground-truth homographies and labeled keypoints.

Each scene pair is a planar scene seen twice. Keypoints fall into three
categories: matchable (present in both views with a verified partner),
undiscovered (present in both views but unlabeled) and unrepeatable (present
in one view only). Ambiguity groups share one base descriptor so that raw
local matching cannot tell their members apart, while the regional grids
carry a smooth, position-dependent signal.
"""
import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ctxdesc.config.settings import SceneSpec, parse_config_text
from ctxdesc.errors import SingularSystemError, SpecError
from ctxdesc.geometry import (
    homography_from_4pt,
    normalize_coords,
    pixel_homography,
    random_offsets,
    read_homography,
    warp_points,
    write_homography,
)
from ctxdesc.numerics.matrix_io import load_matrix, save_matrix
from ctxdesc.visual_context import RegionalGrid, interpolate_regional

logger = logging.getLogger(__name__)

MATCHABLE, UNDISCOVERED, UNREPEATABLE = 0, 1, 2
CATEGORY_NAMES = ("matchable", "undiscovered", "unrepeatable")
RESIDUAL_LIMIT_PX = 0.5
UNIT_TOLERANCE = 1e-6
MAX_REDRAWS = 10
_FIELD_FREQUENCY = 1.5  # cycles per image


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class SceneView:
    """One view: keypoints in pixels, labels, descriptors and a regional grid."""
    keypoints: np.ndarray
    categories: np.ndarray
    match_index: np.ndarray
    descriptors: np.ndarray
    grid: RegionalGrid
    groups: np.ndarray
    width: float
    height: float

    def __len__(self) -> int:
        return len(self.keypoints)

    def normalized(self) -> np.ndarray:
        return normalize_coords(self.keypoints, self.width, self.height)

    def indices(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.categories == category)

    def subset(self, rows) -> "SceneView":
        """Rows ``rows`` of this view; match indices are left pointing into the full other view."""
        rows = np.asarray(rows, dtype=np.int64)
        return SceneView(
            keypoints=self.keypoints[rows],
            categories=self.categories[rows],
            match_index=self.match_index[rows],
            descriptors=self.descriptors[rows],
            grid=self.grid,
            groups=self.groups[rows],
            width=self.width,
            height=self.height,
        )


@dataclass
class SceneFile:
    view_a: SceneView
    view_b: SceneView
    homography: np.ndarray  # pixel coordinates, view A -> view B
    spec: SceneSpec
    name: str = "scene"

    def correspondences(self) -> np.ndarray:
        """(i, j) pairs of matchable keypoints, view A index first."""
        rows = self.view_a.indices(MATCHABLE)
        return np.stack([rows, self.view_a.match_index[rows]], axis=1)


@dataclass
class SceneReport:
    counts: dict[str, int]
    mean_residual: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_text(self) -> str:
        lines = [f"{name}={count}" for name, count in self.counts.items()]
        lines.append(f"mean_residual_px={self.mean_residual:.6f}")
        lines.append(f"violations={len(self.violations)}")
        lines.extend(f"violation={v}" for v in self.violations)
        return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# generation

def _draw_homography(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    for attempt in range(MAX_REDRAWS + 1):
        try:
            h = homography_from_4pt(random_offsets(rng, spec.homography_offset))
            return pixel_homography(h, spec.image_width, spec.image_height)
        except SingularSystemError as e:
            logger.warning(f"Degenerate homography draw {attempt + 1}: {e}")
    raise SpecError(f"no usable homography after {MAX_REDRAWS} redraws")


def _inside(points: np.ndarray, width: float, height: float) -> np.ndarray:
    return ((points[:, 0] >= 0) & (points[:, 0] < width)
            & (points[:, 1] >= 0) & (points[:, 1] < height))


def _sample_shared(n: int, h: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Points of view A whose warp lands inside view B."""
    size = np.array([spec.image_width, spec.image_height], dtype=np.float64)
    kept: list[np.ndarray] = []
    total = 0
    for _ in range(1000):
        if total >= n:
            break
        draw = rng.uniform(0.0, 1.0, size=(2 * n, 2)) * size
        good = draw[_inside(warp_points(h, draw), *size)]
        kept.append(good)
        total += len(good)
    if total < n:
        raise SpecError("homography leaves too little overlap between the views")
    return np.concatenate(kept)[:n]


def _jitter(n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _regional_field(spec: SceneSpec, rng: np.random.Generator) -> RegionalGrid:
    """Random low-frequency cosine field sampled at the cell anchors."""
    gw = max(1, int(round(spec.image_width / spec.grid_stride)))
    gh = max(1, int(round(spec.image_height / spec.grid_stride)))
    stride = spec.image_width / gw
    omega = rng.normal(0.0, 2.0 * np.pi * _FIELD_FREQUENCY, size=(2, spec.regional_depth))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=spec.regional_depth)
    empty = RegionalGrid(features=np.zeros((gh, gw, 1)), stride=stride)
    anchors = empty.anchors() / np.array([spec.image_width, spec.image_height])
    features = np.cos(anchors @ omega + phase).reshape(gh, gw, spec.regional_depth)
    return RegionalGrid(features=_f32(features), stride=stride)


def _warped_grid(grid_a: RegionalGrid, h: np.ndarray) -> RegionalGrid:
    """View B grid: each B anchor pulled back through H and re-interpolated on the A grid."""
    pulled = warp_points(np.linalg.inv(h), grid_a.anchors())
    features = interpolate_regional(grid_a, pulled).reshape(grid_a.features.shape)
    return RegionalGrid(features=_f32(features), stride=grid_a.stride)


def gen_scene(spec: SceneSpec, name: str = "scene") -> SceneFile:
    """Generate one scene pair, deterministic under ``spec.seed``."""
    if spec.ambiguity_groups > 0 and spec.num_keypoints < 2 * spec.group_size:
        raise SpecError("num_keypoints must be at least 2 * group_size")
    rng = np.random.default_rng(spec.seed)
    size = np.array([spec.image_width, spec.image_height], dtype=np.float64)
    h = _draw_homography(spec, rng)

    n_match = spec.matchable_count
    n_und = spec.undiscovered_count
    n_unr = spec.unrepeatable_count
    n_shared = n_match + n_und

    shared_a = _sample_shared(n_shared, h, spec, rng)
    shared_b = warp_points(h, shared_a) + _jitter(n_shared, spec.jitter_px, rng)
    only_a = rng.uniform(0.0, 1.0, size=(n_unr, 2)) * size
    only_b = rng.uniform(0.0, 1.0, size=(n_unr, 2)) * size

    # base descriptors: one per shared scene point, one per one-view point
    dim = spec.descriptor_dim
    base_shared = _unit_rows(rng.normal(size=(n_shared, dim)))
    groups_shared = np.full(n_shared, -1, dtype=np.int64)
    if spec.ambiguity_groups > 0:
        members = rng.choice(n_match, size=spec.ambiguity_groups * spec.group_size, replace=False)
        group_bases = _unit_rows(rng.normal(size=(spec.ambiguity_groups, dim)))
        for g in range(spec.ambiguity_groups):
            rows = members[g * spec.group_size:(g + 1) * spec.group_size]
            base_shared[rows] = group_bases[g]
            groups_shared[rows] = g
    base_only_a = _unit_rows(rng.normal(size=(n_unr, dim)))
    base_only_b = _unit_rows(rng.normal(size=(n_unr, dim)))

    def describe(base: np.ndarray) -> np.ndarray:
        return _f32(_unit_rows(base + spec.descriptor_noise * rng.normal(size=base.shape)))

    desc_a = describe(np.vstack([base_shared, base_only_a]))
    desc_b = describe(np.vstack([base_shared, base_only_b]))

    categories = np.concatenate([
        np.full(n_match, MATCHABLE), np.full(n_und, UNDISCOVERED), np.full(n_unr, UNREPEATABLE)
    ]).astype(np.int64)
    groups = np.concatenate([groups_shared, np.full(n_unr, -1, dtype=np.int64)])

    # shuffle each view independently; match_index follows the permutation
    perm_a = rng.permutation(len(categories))
    perm_b = rng.permutation(len(categories))
    pos_in_a = np.argsort(perm_a)
    pos_in_b = np.argsort(perm_b)
    match_a = np.where(categories == MATCHABLE, pos_in_b, -1)
    match_b = np.where(categories == MATCHABLE, pos_in_a, -1)

    grid_a = _regional_field(spec, rng)
    grid_b = _warped_grid(grid_a, h)

    view_a = SceneView(
        keypoints=np.vstack([shared_a, only_a])[perm_a],
        categories=categories[perm_a],
        match_index=match_a[perm_a],
        descriptors=desc_a[perm_a],
        grid=grid_a,
        groups=groups[perm_a],
        width=float(spec.image_width),
        height=float(spec.image_height),
    )
    view_b = SceneView(
        keypoints=np.vstack([shared_b, only_b])[perm_b],
        categories=categories[perm_b],
        match_index=match_b[perm_b],
        descriptors=desc_b[perm_b],
        grid=grid_b,
        groups=groups[perm_b],
        width=float(spec.image_width),
        height=float(spec.image_height),
    )
    logger.debug(f"Generated {name}: {n_match} matchable, {n_und} undiscovered, {n_unr} unrepeatable per view")
    return SceneFile(view_a=view_a, view_b=view_b, homography=h, spec=spec, name=name)


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def gen_scene_pool(spec: SceneSpec) -> list[SceneFile]:
    """``spec.num_scenes`` scenes with seeds derived from ``spec.seed``."""
    return [
        gen_scene(spec.model_copy(update={"seed": scene_seed(spec.seed, i)}), name=f"scene_{i:04d}")
        for i in range(spec.num_scenes)
    ]


# ----------------------------------------------------------------------
# verification

def verify_scene(scene: SceneFile) -> SceneReport:
    """Check every SceneFile invariant; violations are listed, never raised."""
    violations: list[str] = []
    a, b = scene.view_a, scene.view_b
    counts = {name: int(np.sum(a.categories == c)) for c, name in enumerate(CATEGORY_NAMES)}

    residuals = []
    for i in a.indices(MATCHABLE):
        j = int(a.match_index[i])
        if not 0 <= j < len(b) or b.categories[j] != MATCHABLE or b.match_index[j] != i:
            violations.append(f"a[{i}]: partner {j} is not a matchable keypoint pointing back")
            continue
        residual = float(np.linalg.norm(warp_points(scene.homography, a.keypoints[i:i + 1])[0] - b.keypoints[j]))
        residuals.append(residual)
        if residual > RESIDUAL_LIMIT_PX + 1e-9:
            violations.append(f"a[{i}] -> b[{j}]: warp residual {residual:.3f} px exceeds {RESIDUAL_LIMIT_PX}")

    for label, view in (("a", a), ("b", b)):
        unpaired = view.categories != MATCHABLE
        if np.any(view.match_index[unpaired] != -1):
            violations.append(f"view {label}: non-matchable keypoints carry a match index")
        norms = np.linalg.norm(view.descriptors, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOLERANCE)
        if bad.size:
            violations.append(f"view {label}: {bad.size} descriptor rows are not unit-norm")
        if not np.all(np.isfinite(view.grid.features)):
            violations.append(f"view {label}: regional grid has non-finite features")

    if int(np.sum(b.categories == UNREPEATABLE)) != counts["unrepeatable"]:
        violations.append("views disagree on the number of unrepeatable keypoints")
    expected = {
        "matchable": scene.spec.matchable_count,
        "undiscovered": scene.spec.undiscovered_count,
        "unrepeatable": scene.spec.unrepeatable_count,
    }
    for name, want in expected.items():
        if abs(counts[name] - want) > 1:
            violations.append(f"{name} count {counts[name]} differs from expected {want}")

    mean_residual = float(np.mean(residuals)) if residuals else 0.0
    for v in violations:
        logger.warning(f"{scene.name}: {v}")
    return SceneReport(counts=counts, mean_residual=mean_residual, violations=violations)


# ----------------------------------------------------------------------
# persistence

def _write_keypoints(path: Path, view: SceneView) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["x", "y", "category", "match_index"])
    for (x, y), c, m in zip(view.keypoints, view.categories, view.match_index):
        writer.writerow([repr(float(x)), repr(float(y)), CATEGORY_NAMES[c], int(m)])
    path.write_text(buffer.getvalue(), encoding="utf-8")


def _read_keypoints(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    points = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
    categories = np.array([CATEGORY_NAMES.index(r["category"]) for r in rows], dtype=np.int64)
    matches = np.array([int(r["match_index"]) for r in rows], dtype=np.int64)
    return points, categories, matches


def _spec_text(spec: SceneSpec) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(spec.model_dump().items()))


def save_scene(scene: SceneFile, directory: str | Path) -> Path:
    """Write the SceneFile directory layout."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for label, view in (("a", scene.view_a), ("b", scene.view_b)):
        _write_keypoints(out / f"keypoints_{label}.csv", view)
        save_matrix(out / f"desc_{label}.ctxm", view.descriptors)
        view.grid.save(out / f"grid_{label}.ctxg")
        (out / f"groups_{label}.txt").write_text("".join(f"{g}\n" for g in view.groups))
    write_homography(out / "h_ab.txt", scene.homography)
    (out / "spec.txt").write_text(_spec_text(scene.spec), encoding="utf-8")
    logger.info(f"Wrote {scene.name} to {out}")
    return out


def load_scene(directory: str | Path) -> SceneFile:
    src = Path(directory)
    spec = SceneSpec.model_validate(parse_config_text((src / "spec.txt").read_text(encoding="utf-8")))
    views = []
    for label in ("a", "b"):
        points, categories, matches = _read_keypoints(src / f"keypoints_{label}.csv")
        groups_file = src / f"groups_{label}.txt"
        groups = (np.array([int(v) for v in groups_file.read_text().split()], dtype=np.int64)
                  if groups_file.exists() else np.full(len(points), -1, dtype=np.int64))
        views.append(SceneView(
            keypoints=points,
            categories=categories,
            match_index=matches,
            descriptors=load_matrix(src / f"desc_{label}.ctxm"),
            grid=RegionalGrid.load(src / f"grid_{label}.ctxg"),
            groups=groups,
            width=float(spec.image_width),
            height=float(spec.image_height),
        ))
    return SceneFile(view_a=views[0], view_b=views[1], homography=read_homography(src / "h_ab.txt"),
                     spec=spec, name=src.name)


def save_scene_pool(scenes: list[SceneFile], directory: str | Path) -> list[Path]:
    root = Path(directory)
    return [save_scene(scene, root / scene.name) for scene in scenes]


def load_scene_pool(directory: str | Path) -> list[SceneFile]:
    root = Path(directory)
    dirs = sorted(p for p in root.iterdir() if (p / "spec.txt").exists())
    if not dirs:
        raise SpecError(f"no scenes found under {root}")
    return [load_scene(d) for d in dirs]
