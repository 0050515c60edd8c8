"""Cross-modality aggregation and the N-pair objective with softmax temperature."""
import logging
from dataclasses import dataclass

import numpy as np

from ctxdesc.errors import ContractError, DimensionError
from ctxdesc.numerics.layers import l2_normalize_rows
from ctxdesc.numerics.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-6
LOG_FLOOR = 1e-30
TEMPERATURE_FLOOR = 1e-3

STREAM_CHOICES = ("raw", "+geo", "+vis", "+both")


@dataclass(frozen=True)
class Streams:
    """Which context streams are summed onto the raw descriptor."""
    geo: bool = True
    vis: bool = True

    @classmethod
    def parse(cls, text: str) -> "Streams":
        try:
            geo, vis = {
                "raw": (False, False),
                "+geo": (True, False),
                "+vis": (False, True),
                "+both": (True, True),
            }[text.strip()]
        except KeyError:
            raise ValueError(f"streams must be one of {STREAM_CHOICES}, got '{text}'") from None
        return cls(geo=geo, vis=vis)

    def __str__(self) -> str:
        if self.geo and self.vis:
            return "+both"
        if self.geo:
            return "+geo"
        if self.vis:
            return "+vis"
        return "raw"


@dataclass(frozen=True)
class CorrespondenceMask:
    """Matchable rows (Cm) contribute diagonal terms; noisy rows (Cn) only act as negatives."""
    matchable: np.ndarray
    noisy: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matchable, dtype=np.int64).reshape(-1)
        n = np.asarray(self.noisy, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "matchable", m)
        object.__setattr__(self, "noisy", n)
        if np.intersect1d(m, n).size:
            raise ContractError("matchable and noisy index sets overlap")

    @classmethod
    def all_matchable(cls, n: int) -> "CorrespondenceMask":
        return cls(matchable=np.arange(n), noisy=np.zeros(0, dtype=np.int64))

    @property
    def km(self) -> int:
        return len(self.matchable)

    @property
    def kn(self) -> int:
        return len(self.noisy)


def aggregate(raw, geo=None, vis=None, streams: Streams | None = None) -> Tensor:
    """Sum the enabled streams row-wise and L2-normalize; dimensionality is unchanged."""
    streams = streams or Streams(geo=geo is not None, vis=vis is not None)
    total = as_tensor(raw)
    for enabled, stream, label in ((streams.geo, geo, "geo"), (streams.vis, vis, "vis")):
        if not enabled:
            continue
        if stream is None:
            raise ContractError(f"stream '{label}' is enabled but was not provided")
        stream = as_tensor(stream)
        if stream.shape != total.shape:
            raise DimensionError(f"stream '{label}' has shape {stream.shape}, raw has {total.shape}")
        total = total + stream
    return l2_normalize_rows(total)


def distance_matrix(f1, f2) -> Tensor:
    """D = sqrt(2 clamp(1 - F1 F2^T, 0, 2)); entries lie in [0, 2].

    Raises:
        ContractError: if any row is not unit-norm within 1e-6.
    """
    f1 = as_tensor(f1)
    f2 = as_tensor(f2)
    for label, f in (("F1", f1), ("F2", f2)):
        norms = np.linalg.norm(f.data, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
            raise ContractError(f"{label} rows must be unit-norm")
    if f1.shape[1] != f2.shape[1]:
        raise DimensionError(f"descriptor widths differ: {f1.shape[1]} vs {f2.shape[1]}")
    return ((1.0 - f1 @ f2.T).clip(0.0, 2.0) * 2.0).sqrt()


def npair_loss(f1, f2, alpha, mask: CorrespondenceMask | None = None) -> Tensor:
    """-1/2 (sum_{i in Cm} log s^r_ii + sum_{i in Cm} log s^c_ii).

    ``s^r``/``s^c`` are row-/column-wise softmax of alpha (2 - D) over the full
    N x N matrix, so noisy rows and columns still act as negatives.
    """
    f1 = as_tensor(f1)
    f2 = as_tensor(f2)
    if f1.shape[0] != f2.shape[0]:
        raise DimensionError(f"N-pair views differ in size: {f1.shape[0]} vs {f2.shape[0]}")
    mask = mask or CorrespondenceMask.all_matchable(f1.shape[0])
    if mask.km < 1:
        raise ContractError("N-pair loss needs at least one matchable row")
    logits = (2.0 - distance_matrix(f1, f2)) * as_tensor(alpha)
    idx = mask.matchable
    row_terms = logits.softmax(axis=1).gather(idx, idx).log(LOG_FLOOR).sum()
    col_terms = logits.softmax(axis=0).gather(idx, idx).log(LOG_FLOOR).sum()
    return (row_terms + col_terms) * -0.5


def mean_npair(loss: float, mask: CorrespondenceMask) -> float:
    """Per-matchable-keypoint value, used in logs only."""
    return float(loss) / max(mask.km, 1)


def total_loss(npair, quad, weight: float = 1.0) -> Tensor:
    """npair + weight * quad."""
    if weight < 0:
        raise ContractError(f"loss weight must be non-negative, got {weight}")
    return as_tensor(npair) + as_tensor(quad) * weight
