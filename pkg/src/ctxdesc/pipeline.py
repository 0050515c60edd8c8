"""Model assembly and the per-view description pass shared by training, augmentation and evaluation."""
import logging
from dataclasses import dataclass

import numpy as np

from ctxdesc.config.settings import TrainConfig
from ctxdesc.geometric_context import DESCRIPTOR_DIM, GeoEncoder, MatchabilityHead, encode_geometric
from ctxdesc.losses import Streams, aggregate
from ctxdesc.numerics.layers import ForwardContext
from ctxdesc.numerics.tensor import Tensor, as_tensor
from ctxdesc.params import TEMPERATURE, ModelParameters
from ctxdesc.visual_context import DEFAULT_NEIGHBORS, VisEncoder, encode_visual, interpolate_regional

logger = logging.getLogger(__name__)

GEO_UNITS = 4
VIS_HIDDEN = 512
STREAM_GAIN = 0.0
UNIT_STYLE_CODES = {"preact": 0.0, "original": 1.0}
# fusion input layout: 0 = [reduced regional || raw local]
FUSE_ORDER = 0.0


@dataclass(frozen=True)
class ContextModel:
    """Encoders plus the parameter store they read from."""
    params: ModelParameters
    head: MatchabilityHead
    geo: GeoEncoder
    vis: VisEncoder
    interp_k: int = DEFAULT_NEIGHBORS
    cn_epsilon: float = 1e-6

    @property
    def descriptor_dim(self) -> int:
        return self.head.in_dim

    @property
    def temperature(self) -> Tensor:
        return self.params.tensor(TEMPERATURE)

    def context(self, training: bool = False) -> ForwardContext:
        return ForwardContext(training=training, cn_epsilon=self.cn_epsilon)

    @classmethod
    def from_params(cls, params: ModelParameters) -> "ContextModel":
        """Rebuild the architecture recorded in the parameter file's meta sections."""
        meta = params.meta
        try:
            local_dim = int(meta["local_dim"])
            styles = {code: name for name, code in UNIT_STYLE_CODES.items()}
            model = cls(
                params=params,
                head=MatchabilityHead(in_dim=local_dim),
                geo=GeoEncoder(
                    width=int(meta["encoder_width"]),
                    units=int(meta["geo_units"]),
                    out_dim=local_dim,
                    unit_style=styles[meta["unit_style"]],
                    use_matchability=bool(meta["use_matchability"]),
                ),
                vis=VisEncoder(
                    regional_dim=int(meta["regional_depth"]),
                    local_dim=local_dim,
                    hidden=int(meta["vis_hidden"]),
                    out_dim=local_dim,
                ),
                interp_k=int(meta["interp_k"]),
                cn_epsilon=float(meta["cn_epsilon"]),
            )
        except KeyError as e:
            raise ValueError(f"parameter file lacks architecture entry {e}") from None
        if meta.get("fuse_order", FUSE_ORDER) != FUSE_ORDER:
            raise ValueError("parameter file uses an unknown fusion layout")
        return model


def init_model(cfg: TrainConfig, regional_depth: int, rng: np.random.Generator,
               local_dim: int = DESCRIPTOR_DIM, geo_units: int = GEO_UNITS,
               vis_hidden: int = VIS_HIDDEN, stream_gain: float = STREAM_GAIN) -> ModelParameters:
    """Fresh parameters: He-normal perceptrons, unit BN, temperature 1.

    The last projection of each context stream is scaled by ``stream_gain``;
    at the default 0 a fresh model reproduces the raw descriptors exactly.
    The temperature is tagged frozen when ``cfg.train_temperature`` is off.
    """
    params = ModelParameters()
    settings = {
        "local_dim": local_dim,
        "encoder_width": cfg.encoder_width,
        "geo_units": geo_units,
        "unit_style": UNIT_STYLE_CODES[cfg.unit_style],
        "use_matchability": 1.0 if cfg.use_matchability else 0.0,
        "regional_depth": regional_depth,
        "vis_hidden": vis_hidden,
        "interp_k": cfg.interp_k,
        "cn_epsilon": cfg.cn_epsilon,
        "fuse_order": FUSE_ORDER,
    }
    for key, value in settings.items():
        params.set_meta(key, value)
    model = ContextModel.from_params(params)
    model.head.init(params, rng)
    model.geo.init(params, rng)
    model.vis.init(params, rng)
    for name in stream_outputs(model):
        params.update(name, stream_gain * params.tensor(name).data)
    params.add(TEMPERATURE, np.ones((1, 1)), trainable=cfg.train_temperature)
    logger.info(f"Initialized {params!r}")
    return params


def stream_outputs(model: ContextModel) -> tuple[str, str]:
    """Weights of the final geometric and visual projections."""
    last_fuse = len(model.vis.fuse_spec.widths) - 1
    return f"{model.geo.prefix}.head.weight", f"{model.vis.prefix}.fuse.{last_fuse}.weight"


@dataclass
class ViewFeatures:
    features: Tensor  # aggregated, K x D, unit rows
    scores: Tensor    # raw matchability H(f), K x 1


def describe_keypoints(model: ContextModel, coords, keypoints_px, descriptors, grid,
                       streams: Streams, ctx: ForwardContext | None = None) -> ViewFeatures:
    """Context-augmented descriptors for one keypoint set.

    Args:
        model: encoders and parameters
        coords: K x 2 normalized coordinates fed to the geometric encoder
        keypoints_px: K x 2 pixel positions used to sample the regional grid
        descriptors: K x D raw local descriptors (unit rows)
        grid: regional grid of the view
        streams: which context streams to add
        ctx: forward switches; inference mode when omitted

    Returns:
        Aggregated features and the raw matchability scores. With no stream
        enabled the raw descriptors are passed through unchanged.
    """
    ctx = ctx or model.context()
    raw = as_tensor(descriptors)
    scores = model.head.raw(model.params, raw, ctx)
    if not (streams.geo or streams.vis):
        return ViewFeatures(features=raw, scores=scores)
    geo = vis = None
    if streams.geo:
        geo = encode_geometric(model.geo, model.params, coords, scores.tanh(), ctx)
    if streams.vis:
        regional = interpolate_regional(grid, keypoints_px, k=model.interp_k)
        vis = encode_visual(model.vis, model.params, regional, raw, ctx)
    return ViewFeatures(features=aggregate(raw, geo, vis, streams), scores=scores)


def describe_view(model: ContextModel, view, streams: Streams, training: bool = False) -> np.ndarray:
    """Augmented descriptors of a SceneView as a plain K x D array."""
    out = describe_keypoints(model, view.normalized(), view.keypoints, view.descriptors, view.grid,
                             streams, model.context(training))
    return out.features.numpy()
