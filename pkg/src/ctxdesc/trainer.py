"""SGD training of the matchability head, both context encoders and the softmax temperature."""
import io
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ctxdesc.config.settings import TrainConfig
from ctxdesc.errors import ContractError, NumericalAbort, PointAtInfinityError, SingularSystemError
from ctxdesc.geometric_context import ranking_hinge
from ctxdesc.geometry import homography_from_4pt, random_offsets, warp_points
from ctxdesc.losses import CorrespondenceMask, Streams, mean_npair, npair_loss, total_loss
from ctxdesc.numerics.layers import fold_batch_stats
from ctxdesc.numerics.tensor import Tensor, as_tensor, backward
from ctxdesc.params import TEMPERATURE, ModelParameters
from ctxdesc.pipeline import ContextModel, describe_keypoints
from ctxdesc.synthetic import MATCHABLE, UNDISCOVERED, UNREPEATABLE, SceneFile
from ctxdesc.visual_context import RegionalGrid

logger = logging.getLogger(__name__)

MAX_REDRAWS = 10
REFERENCE_TEMPERATURE = 38.0  # converged value reported for full-scale training
LOG_HEADER = "step,lr,total,npair,quad,alpha"
TEMPERATURE_FLOOR = float(np.float32(1e-3))


def lr_at(cfg: TrainConfig, step: int) -> float:
    """base_lr * decay^(step / decay_every), with a real-valued exponent."""
    if step < 0:
        raise ContractError(f"step must be non-negative, got {step}")
    return cfg.base_lr * cfg.lr_decay_factor ** (step / cfg.lr_decay_every)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale in place so the global L2 norm is at most ``max_norm`` (0 disables). Returns the norm before clipping."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def sgd_step(params: ModelParameters, grads: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float, velocity: dict[str, np.ndarray]) -> ModelParameters:
    """v <- momentum v + grad + weight_decay param; param <- param - lr v.

    Applies to every trainable tensor, the temperature included; frozen
    tensors are left untouched. Parameters without a gradient are treated as
    having a zero gradient. The temperature is kept at or above 1e-3. Updated
    values are rounded to float32 so a saved model reloads bit-exact.
    """
    for name, t in params.tensors.items():
        if name in params.frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        elif g.shape != t.data.shape:
            raise ContractError(f"gradient for '{name}' has shape {g.shape}, parameter has {t.data.shape}")
        v = velocity.get(name)
        v = g + weight_decay * t.data if v is None else momentum * v + g + weight_decay * t.data
        velocity[name] = v
        params.update(name, t.data - lr * v)
    if TEMPERATURE in params.tensors and TEMPERATURE not in params.frozen:
        params.update(TEMPERATURE, np.maximum(params.tensor(TEMPERATURE).data, TEMPERATURE_FLOOR))
    return params


def augment_keypoints(coords: np.ndarray, rng: np.random.Generator, magnitude: float = 0.5) -> np.ndarray:
    """Warp normalized coordinates by a random 4-point homography; results may leave [-1, 1]^2."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    for attempt in range(MAX_REDRAWS + 1):
        try:
            return warp_points(homography_from_4pt(random_offsets(rng, magnitude)), coords)
        except (SingularSystemError, PointAtInfinityError) as e:
            logger.debug(f"Augmentation redraw {attempt + 1}: {e}")
    raise SingularSystemError(f"no usable augmentation homography after {MAX_REDRAWS} redraws")


# ----------------------------------------------------------------------
# batches

@dataclass
class PairSample:
    """Rows drawn from one scene pair; row n of each view is aligned for n < km."""
    scene: SceneFile
    rows_a: np.ndarray
    rows_b: np.ndarray
    mask: CorrespondenceMask

    def keypoints(self, view: str) -> np.ndarray:
        return self._view(view).keypoints[self._rows(view)]

    def coords(self, view: str) -> np.ndarray:
        return self._view(view).normalized()[self._rows(view)]

    def descriptors(self, view: str) -> np.ndarray:
        return self._view(view).descriptors[self._rows(view)]

    def grid(self, view: str) -> RegionalGrid:
        return self._view(view).grid

    def _view(self, view: str):
        return self.scene.view_a if view == "a" else self.scene.view_b

    def _rows(self, view: str) -> np.ndarray:
        return self.rows_a if view == "a" else self.rows_b


def _pick(pool: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(pool, size=n, replace=False) if n else np.zeros(0, dtype=np.int64)


def _sample_pair(scene: SceneFile, cfg: TrainConfig, rng: np.random.Generator) -> PairSample:
    a, b = scene.view_a, scene.view_b
    k = cfg.keypoints_per_pair
    matchable = a.indices(MATCHABLE)
    if len(matchable) < 4:
        raise ContractError(f"{scene.name}: needs at least 4 matchable keypoints, has {len(matchable)}")

    fraction = rng.uniform(cfg.min_matchable_fraction, 1.0)
    km = min(max(int(round(fraction * k)), 2), k)
    remainder = k - km
    n_und = int(rng.integers(0, remainder + 1))
    n_unr = remainder - n_und

    # short categories are refilled from the matchable pool
    n_und = min(n_und, len(a.indices(UNDISCOVERED)), len(b.indices(UNDISCOVERED)))
    n_unr = min(n_unr, len(a.indices(UNREPEATABLE)), len(b.indices(UNREPEATABLE)))
    km = k - n_und - n_unr
    if km > len(matchable):
        raise ContractError(f"{scene.name}: cannot fill {k} keypoints per pair")

    chosen = _pick(matchable, km, rng)
    rows_a = np.concatenate([chosen, _pick(a.indices(UNDISCOVERED), n_und, rng),
                             _pick(a.indices(UNREPEATABLE), n_unr, rng)]).astype(np.int64)
    rows_b = np.concatenate([a.match_index[chosen], _pick(b.indices(UNDISCOVERED), n_und, rng),
                             _pick(b.indices(UNREPEATABLE), n_unr, rng)]).astype(np.int64)
    mask = CorrespondenceMask(matchable=np.arange(km), noisy=np.arange(km, k))
    return PairSample(scene=scene, rows_a=rows_a, rows_b=rows_b, mask=mask)


def sample_batch(scenes: Sequence[SceneFile], cfg: TrainConfig, rng: np.random.Generator) -> list[PairSample]:
    """``batch_pairs`` pairs of ``keypoints_per_pair`` rows each, matchable rows first."""
    if not scenes:
        raise ContractError("scene pool is empty")
    return [_sample_pair(scenes[int(rng.integers(len(scenes)))], cfg, rng) for _ in range(cfg.batch_pairs)]


# ----------------------------------------------------------------------
# training loop

@dataclass
class TrainRecord:
    step: int
    lr: float
    total: float
    npair: float
    quad: float
    alpha: float

    def csv_line(self) -> str:
        return ",".join([str(self.step)] + [repr(v) for v in (self.lr, self.total, self.npair, self.quad, self.alpha)])


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(LOG_HEADER + "\n")
        for record in self.records:
            out.write(record.csv_line() + "\n")
        return out.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")


def _fold_statistics(params: ModelParameters, batch_stats, momentum: float) -> None:
    """Average the batch statistics recorded per BN layer this step and fold them in."""
    grouped: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for key, mean, var in batch_stats:
        grouped.setdefault(key, []).append((mean, var))
    for key, stats in grouped.items():
        mean = np.mean([m for m, _ in stats], axis=0)
        var = np.mean([v for _, v in stats], axis=0)
        running_mean, running_var = fold_batch_stats(
            params.buffer(f"{key}.running_mean"), params.buffer(f"{key}.running_var"), mean, var, momentum)
        params.set_buffer(f"{key}.running_mean", running_mean)
        params.set_buffer(f"{key}.running_var", running_var)


def _dump_batch(dump_dir: Path, step: int, batch: list[PairSample], npair: float, quad: float,
                alpha: float) -> Path:
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nonfinite_step{step}.txt"
    lines = [f"step={step}", f"npair={npair!r}", f"quad={quad!r}", f"alpha={alpha!r}"]
    for n, pair in enumerate(batch):
        lines.append(f"pair{n}.scene={pair.scene.name}")
        lines.append(f"pair{n}.km={pair.mask.km}")
        lines.append(f"pair{n}.rows_a={' '.join(str(i) for i in pair.rows_a)}")
        lines.append(f"pair{n}.rows_b={' '.join(str(i) for i in pair.rows_b)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def perturb_descriptors(descriptors: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Add N(0, sigma^2) noise to every entry and renormalize the rows; sigma 0 returns the input."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if sigma <= 0:
        return descriptors
    noisy = descriptors + rng.normal(0.0, sigma, size=descriptors.shape)
    return noisy / np.linalg.norm(noisy, axis=1, keepdims=True)


def _batch_loss(model: ContextModel, batch: list[PairSample], cfg: TrainConfig, streams: Streams,
                rng: np.random.Generator, ctx) -> tuple[Tensor, Tensor]:
    npair_sum: Tensor | float = 0.0
    quad_sum: Tensor | float = 0.0
    for pair in batch:
        # one warp for both views keeps their relative layout intact
        coords_a, coords_b = pair.coords("a"), pair.coords("b")
        warped = augment_keypoints(np.vstack([coords_a, coords_b]), rng, cfg.augment_offsets)
        coords = {"a": warped[:len(coords_a)], "b": warped[len(coords_a):]}
        outputs = []
        for view in ("a", "b"):
            descriptors = perturb_descriptors(pair.descriptors(view), rng, cfg.augment_noise)
            outputs.append(describe_keypoints(model, coords[view], pair.keypoints(view), descriptors,
                                              pair.grid(view), streams, ctx))
        out_a, out_b = outputs
        npair_sum = npair_loss(out_a.features, out_b.features, model.temperature, pair.mask) + npair_sum
        if cfg.lambda_quad > 0:
            quad_sum = ranking_hinge(out_a.scores, out_b.scores, pair.mask.matchable) + quad_sum
    return npair_sum, quad_sum


def train(cfg: TrainConfig, scenes: Sequence[SceneFile], init: ModelParameters,
          dump_dir: str | Path | None = None) -> tuple[ModelParameters, TrainLog]:
    """Jointly optimize every trainable parameter on the scene pool.

    Args:
        cfg: training configuration
        scenes: scene pairs; their descriptors and grids are read, never written
        init: starting parameters (not modified)
        dump_dir: where a diagnostic dump goes when the loss turns non-finite

    Returns:
        The trained parameters and one TrainRecord per step.

    Raises:
        NumericalAbort: if the loss becomes NaN or infinite.
    """
    params = init.copy()
    log = TrainLog()
    if cfg.max_steps == 0:
        return params, log

    rng = np.random.default_rng(cfg.seed)
    model = ContextModel.from_params(params)
    streams = Streams.parse(cfg.streams)
    velocity: dict[str, np.ndarray] = {}
    logger.info(f"Training {cfg.max_steps} steps on {len(scenes)} scenes, streams {streams}")

    for step in range(cfg.max_steps):
        lr = lr_at(cfg, step)
        batch = sample_batch(scenes, cfg, rng)
        ctx = model.context(training=True)
        npair, quad = _batch_loss(model, batch, cfg, streams, rng, ctx)
        loss = total_loss(npair, quad, cfg.lambda_quad)
        npair_value = as_tensor(npair).item()
        quad_value = as_tensor(quad).item()
        alpha = params.temperature

        if not np.isfinite(loss.item()):
            path = _dump_batch(Path(dump_dir or tempfile.gettempdir()), step, batch, npair_value, quad_value, alpha)
            logger.critical(f"Non-finite loss at step {step}; batch written to {path}")
            raise NumericalAbort(f"non-finite loss at step {step}", dump_path=str(path))

        grads = backward(loss)
        norm = clip_gradients(grads, cfg.grad_clip_norm)
        sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay, velocity)
        _fold_statistics(params, ctx.batch_stats, cfg.bn_momentum)

        log.records.append(TrainRecord(step=step, lr=lr, total=loss.item(), npair=npair_value,
                                       quad=quad_value, alpha=alpha))
        if step % cfg.log_every == 0 or step == cfg.max_steps - 1:
            matchable = sum(p.mask.km for p in batch)
            logger.info(f"step {step}: lr={lr:.5f} total={loss.item():.4f} "
                        f"npair/kp={mean_npair(npair_value, CorrespondenceMask.all_matchable(matchable)):.4f} "
                        f"quad={quad_value:.4f} alpha={alpha:.4f} |g|={norm:.3f}")

    logger.info(f"Finished training: temperature {params.temperature:.4f} "
                f"(full-scale reference about {REFERENCE_TEMPERATURE:.0f})")
    return params, log
