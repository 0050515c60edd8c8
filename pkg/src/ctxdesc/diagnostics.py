"""Finite-difference verification of every differentiable component.

Each component is rebuilt at a small size with seeded inputs, reduced to a
scalar through fixed random weights, and its reverse-mode gradient compared
with central differences on a sample of coordinates. Coordinates whose two
evaluations fall on different sides of a relu or clip boundary are skipped.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ctxdesc.config.settings import TrainConfig
from ctxdesc.geometric_context import (
    GeoEncoder,
    MatchabilityHead,
    QuadrupleBatch,
    matchability,
    quad_loss,
    ranking_hinge,
)
from ctxdesc.losses import CorrespondenceMask, Streams, aggregate, npair_loss, total_loss
from ctxdesc.numerics.gradcheck import DEFAULT_FLOOR, DEFAULT_STEP, relative_error, sample_indices
from ctxdesc.numerics.layers import ForwardContext, l2_normalize_rows
from ctxdesc.numerics.tensor import Tensor, backward, corrupt_gradient, parameter, record_kinks, same_pattern
from ctxdesc.params import ModelParameters
from ctxdesc.pipeline import ContextModel, describe_keypoints, init_model
from ctxdesc.visual_context import RegionalGrid, VisEncoder

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP_SWEEP = (1e-4, 1e-5, 1e-6)
SAMPLES_PER_TENSOR = 6

# small shapes keep a full check well under a second per component
_K = 6
_DIM = 8
_WIDTH = 8
_DEPTH = 5


@dataclass(frozen=True)
class GradcheckRow:
    component: str
    max_error: float
    checked: int
    skipped: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_error < self.tolerance

    def line(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"{self.component:<20} {self.max_error:.3e} {self.checked:>4} {self.skipped:>3} {verdict}"


def check_component(name: str, build: Callable[[], Tensor], tensors: Sequence[Tensor],
                    rng: np.random.Generator, h: float = DEFAULT_STEP,
                    samples: int = SAMPLES_PER_TENSOR) -> GradcheckRow:
    """Compare d build() / d tensors against central differences.

    ``build`` must read the current ``data`` of every tensor in ``tensors``.
    """
    loss = build()
    backward(loss)
    analytic = {id(t): t.grad.copy() for t in tensors}
    worst, checked, skipped = 0.0, 0, 0
    for t in tensors:
        original = t.data.copy()
        flat = t.data.reshape(-1)
        for i in sample_indices(flat.size, samples, rng):
            flat[i] = original.reshape(-1)[i] + h
            with record_kinks() as upper_pattern:
                upper = build().item()
            flat[i] = original.reshape(-1)[i] - h
            with record_kinks() as lower_pattern:
                lower = build().item()
            flat[i] = original.reshape(-1)[i]
            if not same_pattern(upper_pattern, lower_pattern):
                skipped += 1
                continue
            numeric = (upper - lower) / (2.0 * h)
            worst = max(worst, relative_error(analytic[id(t)].reshape(-1)[i], numeric, DEFAULT_FLOOR))
            checked += 1
        t.data = original
    row = GradcheckRow(component=name, max_error=worst, checked=checked, skipped=skipped)
    logger.debug(row.line())
    return row


def _weights(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.normal(size=(rows, cols))


def _inputs(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    return parameter(rng.normal(size=(rows, cols)))


def _check_matchability(rng, h) -> GradcheckRow:
    head = MatchabilityHead(in_dim=_DIM)
    store = ModelParameters()
    head.init(store, rng)
    f = _inputs(rng, _K, _DIM)
    w = _weights(rng, _K, 1)
    return check_component("matchability", lambda: (matchability(head, store, f) * w).sum(),
                           list(store.tensors.values()) + [f], rng, h)


def _check_geometric(rng, h) -> GradcheckRow:
    enc = GeoEncoder(width=_WIDTH, units=2, out_dim=_DIM)
    store = ModelParameters()
    enc.init(store, rng)
    coords = parameter(rng.uniform(-1.0, 1.0, size=(_K, 2)))
    m = parameter(np.tanh(rng.normal(size=(_K, 1))))
    w = _weights(rng, _K, _DIM)

    def build():
        return (enc(store, coords, m, ForwardContext(training=True)) * w).sum()

    return check_component("geometric_encoder", build, list(store.tensors.values()) + [coords, m], rng, h)


def _check_visual(rng, h) -> GradcheckRow:
    enc = VisEncoder(regional_dim=_DEPTH, local_dim=_DIM, hidden=_WIDTH, out_dim=_DIM)
    store = ModelParameters()
    enc.init(store, rng)
    regional = parameter(rng.normal(size=(_K, _DEPTH)))
    local = _inputs(rng, _K, _DIM)
    w = _weights(rng, _K, _DIM)
    return check_component("visual_encoder", lambda: (enc(store, regional, local) * w).sum(),
                           list(store.tensors.values()) + [regional, local], rng, h)


def _check_aggregate(rng, h) -> GradcheckRow:
    raw, geo, vis = (_inputs(rng, _K, _DIM) for _ in range(3))
    w = _weights(rng, _K, _DIM)
    return check_component("aggregate", lambda: (aggregate(raw, geo, vis) * w).sum(), [raw, geo, vis], rng, h)


def _check_quad(rng, h) -> GradcheckRow:
    head = MatchabilityHead(in_dim=_DIM)
    store = ModelParameters()
    head.init(store, rng)
    f1 = _inputs(rng, _K, _DIM)
    f2 = _inputs(rng, _K, _DIM)
    matchable = np.arange(_K - 1)

    def build():
        return quad_loss(head, store, QuadrupleBatch(f1, f2), matchable)

    return check_component("quad_loss", build, list(store.tensors.values()) + [f1, f2], rng, h)


def _check_npair(rng, h) -> GradcheckRow:
    x1 = _inputs(rng, _K, _DIM)
    x2 = _inputs(rng, _K, _DIM)
    alpha = parameter(np.array([[1.0 + rng.uniform(0.0, 2.0)]]))
    mask = CorrespondenceMask(matchable=np.arange(_K - 2), noisy=np.arange(_K - 2, _K))

    def build():
        return npair_loss(l2_normalize_rows(x1), l2_normalize_rows(x2), alpha, mask)

    return check_component("npair_loss", build, [x1, x2, alpha], rng, h)


def _tiny_model(rng: np.random.Generator) -> ContextModel:
    cfg = TrainConfig(encoder_width=_WIDTH)
    params = init_model(cfg, _DEPTH, rng, local_dim=_DIM, geo_units=2, vis_hidden=_WIDTH, stream_gain=1.0)
    return ContextModel.from_params(params)


def _check_total(rng, h) -> GradcheckRow:
    model = _tiny_model(rng)
    grid = RegionalGrid(features=rng.normal(size=(2, 2, _DEPTH)), stride=16.0)
    views = []
    for _ in range(2):
        keypoints = rng.uniform(0.0, 32.0, size=(_K, 2))
        desc = rng.normal(size=(_K, _DIM))
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        views.append((keypoints / 16.0 - 1.0, keypoints, desc))
    mask = CorrespondenceMask(matchable=np.arange(_K - 1), noisy=np.arange(_K - 1, _K))
    streams = Streams(geo=True, vis=True)

    def build():
        ctx = model.context(training=True)
        (ca, ka, da), (cb, kb, db) = views
        out_a = describe_keypoints(model, ca, ka, da, grid, streams, ctx)
        out_b = describe_keypoints(model, cb, kb, db, grid, streams, ctx)
        npair = npair_loss(out_a.features, out_b.features, model.temperature, mask)
        return total_loss(npair, ranking_hinge(out_a.scores, out_b.scores, mask.matchable), 1.0)

    return check_component("total_loss", build, list(model.params.tensors.values()), rng, h)


COMPONENTS: dict[str, Callable[[np.random.Generator, float], GradcheckRow]] = {
    "matchability": _check_matchability,
    "geometric_encoder": _check_geometric,
    "visual_encoder": _check_visual,
    "aggregate": _check_aggregate,
    "quad_loss": _check_quad,
    "npair_loss": _check_npair,
    "total_loss": _check_total,
}


def run_gradcheck(seed: int = 0, h: float = DEFAULT_STEP) -> list[GradcheckRow]:
    """One row per component, each built from its own seeded sub-stream."""
    streams = np.random.SeedSequence(seed).spawn(len(COMPONENTS))
    rows = [check(np.random.default_rng(s), h) for check, s in zip(COMPONENTS.values(), streams)]
    failed = [r.component for r in rows if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for: {', '.join(failed)}")
    else:
        logger.info(f"Gradient check passed for all {len(rows)} components (seed {seed}, h={h})")
    return rows


def sweep_steps(seed: int = 0, steps: Sequence[float] = STEP_SWEEP) -> list[tuple[float, float]]:
    """(h, worst relative error over all components) for each step size."""
    return [(h, max(r.max_error for r in run_gradcheck(seed, h))) for h in steps]


def format_table(rows: Sequence[GradcheckRow]) -> str:
    header = f"{'component':<20} {'max_error':>9} {'n':>4} {'skip':>3} result"
    return "\n".join([header] + [r.line() for r in rows]) + "\n"


@contextmanager
def injected_fault(op: str = "relu", factor: float = 1.5) -> Iterator[None]:
    """Run a block with one primitive's gradient rule deliberately wrong."""
    with corrupt_gradient(op, factor):
        yield
