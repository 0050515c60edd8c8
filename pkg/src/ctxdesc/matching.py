"""Brute-force nearest-neighbor matching, ratio test and matching metrics.

Recall counts correct matches over ground-truth correspondences; precision
counts correct matches over putative matches. Both use a pixel threshold
under the ground-truth homography.
"""
import csv
import io
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from ctxdesc.errors import ContractError, DimensionError, EmptyInputError
from ctxdesc.geometry import warp_points
from ctxdesc.synthetic import SceneFile, SceneView

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD_PX = 2.5
RATIO_RANGE = (0.5, 1.0)
BISECTION_STEPS = 20
REFERENCE_RATIO = 0.89  # tuned value reported for full-scale descriptors
REPORT_COLUMNS = ("scene", "method", "K", "ratio", "recall", "precision", "correct", "putative",
                  "correspondences")

DescriptorProvider = Callable[[SceneView, SceneView], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class MatchList:
    """Query index ``query[n]`` matched to reference index ``reference[n]``."""
    query: np.ndarray
    reference: np.ndarray
    nn_distance: np.ndarray
    second_distance: np.ndarray

    def __len__(self) -> int:
        return len(self.query)

    @classmethod
    def empty(cls) -> "MatchList":
        none = np.zeros(0, dtype=np.int64)
        return cls(none, none, np.zeros(0), np.zeros(0))

    def pairs(self) -> np.ndarray:
        return np.stack([self.query, self.reference], axis=1)


def nn_match(query, reference, ratio: float | None = None, mutual: bool = False) -> MatchList:
    """Exact Euclidean nearest neighbor per query row.

    Ties go to the lowest reference index. With ``ratio`` a match survives
    only if NN / second-NN <= ratio (equal distances give a ratio of 1).
    With ``mutual`` the query must also be the nearest query of its match.

    Raises:
        EmptyInputError: if either set has no rows.
        ContractError: if the ratio test is requested with fewer than 2 reference rows.
    """
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if q.ndim != 2 or r.ndim != 2 or len(q) == 0 or len(r) == 0:
        raise EmptyInputError("nn_match needs two nonempty descriptor sets")
    if q.shape[1] != r.shape[1]:
        raise DimensionError(f"descriptor widths differ: {q.shape[1]} vs {r.shape[1]}")
    if ratio is not None:
        if len(r) < 2:
            raise ContractError("the ratio test needs at least 2 reference descriptors")
        if ratio <= 0:
            raise ContractError(f"ratio must be positive, got {ratio}")

    dist = cdist(q, r)
    order = np.argsort(dist, axis=1, kind="stable")
    rows = np.arange(len(q))
    nearest = order[:, 0]
    nn = dist[rows, nearest]
    second = dist[rows, order[:, 1]] if len(r) > 1 else np.full(len(q), np.inf)

    keep = np.ones(len(q), dtype=bool)
    if ratio is not None:
        scores = np.ones(len(q))
        np.divide(nn, second, out=scores, where=second > 0)
        keep &= scores <= ratio
    if mutual:
        back = np.argsort(dist, axis=0, kind="stable")[0]
        keep &= back[nearest] == rows
    return MatchList(query=rows[keep], reference=nearest[keep], nn_distance=nn[keep],
                     second_distance=second[keep])


@dataclass(frozen=True)
class EvalReport:
    correspondences: int
    correct: int
    putative: int
    threshold: float
    scene: str = ""
    method: str = ""
    keypoints: int = 0
    ratio: float | None = None

    @property
    def recall(self) -> float | None:
        """None when there are no correspondences."""
        return self.correct / self.correspondences if self.correspondences else None

    @property
    def precision(self) -> float | None:
        """None when there are no putative matches."""
        return self.correct / self.putative if self.putative else None

    def to_text(self) -> str:
        def show(v):
            return "undefined" if v is None else repr(v)

        return (f"scene={self.scene}\nmethod={self.method}\nK={self.keypoints}\n"
                f"ratio={'none' if self.ratio is None else repr(self.ratio)}\n"
                f"threshold_px={self.threshold!r}\ncorrespondences={self.correspondences}\n"
                f"correct={self.correct}\nputative={self.putative}\n"
                f"recall={show(self.recall)}\nprecision={show(self.precision)}\n")

    def csv_row(self) -> list[str]:
        def show(v):
            return "nan" if v is None else repr(v)

        return [self.scene, self.method, str(self.keypoints), show(self.ratio), show(self.recall),
                show(self.precision), str(self.correct), str(self.putative), str(self.correspondences)]


def eval_recall(matches: MatchList, kp_a, kp_b, h: np.ndarray,
                threshold: float = DEFAULT_THRESHOLD_PX) -> EvalReport:
    """Correctness of every match under ``h`` and the number of ground-truth correspondences.

    A match (i, j) is correct iff |h(a_i) - b_j| <= threshold. A query keypoint
    is a correspondence iff h(a_i) lies within the threshold of any keypoint of B.
    """
    if threshold <= 0:
        raise ContractError(f"threshold must be positive, got {threshold}")
    a = np.asarray(kp_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(kp_b, dtype=np.float64).reshape(-1, 2)
    warped = warp_points(h, a)
    correspondences = int(np.sum(cdist(warped, b).min(axis=1) <= threshold)) if len(a) and len(b) else 0
    if len(matches):
        errors = np.linalg.norm(warped[matches.query] - b[matches.reference], axis=1)
        correct = int(np.sum(errors <= threshold))
    else:
        correct = 0
    report = EvalReport(correspondences=correspondences, correct=correct, putative=len(matches),
                        threshold=float(threshold), keypoints=len(a))
    if report.recall is None:
        logger.warning("No ground-truth correspondences; recall is undefined")
    return report


def ambiguity_recall(matches: MatchList, scene: SceneFile, threshold: float = DEFAULT_THRESHOLD_PX) -> EvalReport:
    """Recall restricted to view-A keypoints that belong to an ambiguity group."""
    members = np.flatnonzero(scene.view_a.groups >= 0)
    keep = np.isin(matches.query, members)
    sub = MatchList(query=matches.query[keep], reference=matches.reference[keep],
                    nn_distance=matches.nn_distance[keep], second_distance=matches.second_distance[keep])
    warped = warp_points(scene.homography, scene.view_a.keypoints)
    near = cdist(warped[members], scene.view_b.keypoints).min(axis=1) <= threshold if len(members) else []
    full = eval_recall(sub, scene.view_a.keypoints, scene.view_b.keypoints, scene.homography, threshold)
    return replace(full, correspondences=int(np.sum(near)), scene=scene.name, keypoints=len(members))


def match_scene(scene: SceneFile, desc_a, desc_b, ratio: float | None = None, mutual: bool = False,
                threshold: float = DEFAULT_THRESHOLD_PX, method: str = "") -> EvalReport:
    matches = nn_match(desc_a, desc_b, ratio=ratio, mutual=mutual)
    report = eval_recall(matches, scene.view_a.keypoints, scene.view_b.keypoints, scene.homography, threshold)
    return replace(report, scene=scene.name, method=method, ratio=ratio)


def mean_precision(scenes: Sequence[SceneFile], descriptors: Sequence[tuple[np.ndarray, np.ndarray]],
                   ratio: float, mutual: bool = False, threshold: float = DEFAULT_THRESHOLD_PX) -> float:
    """Mean precision over the pool; a scene without putative matches counts as precision 1."""
    values = []
    for scene, (desc_a, desc_b) in zip(scenes, descriptors):
        precision = match_scene(scene, desc_a, desc_b, ratio, mutual, threshold).precision
        values.append(1.0 if precision is None else precision)
    return float(np.mean(values))


def tune_ratio(scenes: Sequence[SceneFile], descriptors: Sequence[tuple[np.ndarray, np.ndarray]],
               target_precision: float, mutual: bool = False, threshold: float = DEFAULT_THRESHOLD_PX,
               steps: int = BISECTION_STEPS) -> float:
    """Largest ratio in [0.5, 1] whose mean precision over the pool reaches the target.

    Returns 0.5 with a warning when even the strictest ratio misses the target.
    """
    if not 0 <= target_precision < 1:
        raise ContractError(f"target precision must be in [0, 1), got {target_precision}")
    if len(scenes) != len(descriptors) or not scenes:
        raise ContractError("one descriptor pair per scene is required")
    low, high = RATIO_RANGE
    if mean_precision(scenes, descriptors, high, mutual, threshold) >= target_precision:
        return high
    if mean_precision(scenes, descriptors, low, mutual, threshold) < target_precision:
        logger.warning(f"Precision {target_precision} is unreachable at ratio {low}")
        return low
    for _ in range(steps):
        middle = 0.5 * (low + high)
        if mean_precision(scenes, descriptors, middle, mutual, threshold) >= target_precision:
            low = middle
        else:
            high = middle
    logger.info(f"Tuned ratio {low:.4f} for precision {target_precision} (full-scale reference {REFERENCE_RATIO})")
    return low


def density_sweep(scene: SceneFile, provider: DescriptorProvider, counts: Sequence[int], seed: int = 0,
                  ratio: float | None = None, mutual: bool = False,
                  threshold: float = DEFAULT_THRESHOLD_PX, method: str = "") -> list[EvalReport]:
    """Recall at several keypoint budgets.

    For each count, ``count`` view-A keypoints are drawn uniformly, their
    view-B partners are kept, and view B is filled up to ``count`` with other
    keypoints. Descriptors come from ``provider`` on the subsampled views, so
    context is recomputed at every density. A count equal to the full size
    uses both views unchanged.
    """
    rng = np.random.default_rng(seed)
    a, b = scene.view_a, scene.view_b
    reports = []
    for count in counts:
        if not 1 <= count <= min(len(a), len(b)):
            raise ContractError(f"density {count} exceeds the {min(len(a), len(b))} available keypoints")
        if count == len(a) == len(b):
            rows_a, rows_b = np.arange(len(a)), np.arange(len(b))
        else:
            rows_a = np.sort(rng.choice(len(a), size=count, replace=False))
            partners = a.match_index[rows_a]
            partners = partners[partners >= 0][:count]
            rest = np.setdiff1d(np.arange(len(b)), partners)
            fill = rng.choice(rest, size=count - len(partners), replace=False)
            rows_b = np.sort(np.concatenate([partners, fill]).astype(np.int64))
        sub_a, sub_b = a.subset(rows_a), b.subset(rows_b)
        desc_a, desc_b = provider(sub_a, sub_b)
        matches = nn_match(desc_a, desc_b, ratio=ratio, mutual=mutual)
        report = eval_recall(matches, sub_a.keypoints, sub_b.keypoints, scene.homography, threshold)
        reports.append(replace(report, scene=scene.name, method=method, ratio=ratio))
        logger.debug(f"{scene.name} density {count}: recall {report.recall}")
    return reports


def repeatability(resp_a, resp_b, kp_a, kp_b, h: np.ndarray, top_n: int,
                  threshold: float = DEFAULT_THRESHOLD_PX) -> float:
    """Fraction of the top-``top_n`` view-A keypoints landing near a top-``top_n`` view-B keypoint."""
    resp_a = np.asarray(resp_a, dtype=np.float64).reshape(-1)
    resp_b = np.asarray(resp_b, dtype=np.float64).reshape(-1)
    if not 1 <= top_n <= min(len(resp_a), len(resp_b)):
        raise ContractError(f"top_n must be in [1, {min(len(resp_a), len(resp_b))}], got {top_n}")
    top_a = np.argsort(-resp_a, kind="stable")[:top_n]
    top_b = np.argsort(-resp_b, kind="stable")[:top_n]
    warped = warp_points(h, np.asarray(kp_a, dtype=np.float64).reshape(-1, 2)[top_a])
    near = cdist(warped, np.asarray(kp_b, dtype=np.float64).reshape(-1, 2)[top_b]).min(axis=1) <= threshold
    return float(np.mean(near))


def reports_csv(reports: Sequence[EvalReport]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for report in reports:
        writer.writerow(report.csv_row())
    return out.getvalue()


def write_report_csv(path: str | Path, reports: Sequence[EvalReport]) -> None:
    Path(path).write_text(reports_csv(reports), encoding="utf-8", newline="\n")
    logger.info(f"Wrote {len(reports)} report rows to {path}")
