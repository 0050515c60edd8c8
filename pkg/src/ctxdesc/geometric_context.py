"""Matchability predictor and the geometric context encoder.

The encoder consumes ``(x, y, tanh(H(f)))`` per keypoint, lifts it linearly
to ``width`` channels, runs residual units built around context
normalization, and projects to the descriptor dimension.
"""
import logging
from dataclasses import dataclass

import numpy as np

from ctxdesc.errors import DimensionError, EmptyInputError, InsufficientPairsError
from ctxdesc.numerics.layers import (
    ForwardContext,
    MlpSpec,
    ParameterStore,
    init_batch_norm,
    init_linear,
    init_mlp,
    linear,
    mlp_apply,
    normalize,
)
from ctxdesc.numerics.tensor import Tensor, as_tensor, concat

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 128
UNIT_STYLES = ("preact", "original")


@dataclass(frozen=True)
class MatchabilityHead:
    """4-layer MLP 128 -> 128 -> 32 -> 32 -> 1 with relu between layers."""
    in_dim: int = DESCRIPTOR_DIM
    prefix: str = "match"

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(
            in_dim=self.in_dim,
            widths=(128, 32, 32, 1),
            activations=("relu", "relu", "relu", "none"),
            norms=("none", "none", "none", "none"),
        )

    def init(self, store, rng: np.random.Generator) -> None:
        init_mlp(self.spec, store, self.prefix, rng)

    def raw(self, store: ParameterStore, f, ctx: ForwardContext | None = None) -> Tensor:
        """Unactivated scores H(f), K x 1."""
        f = as_tensor(f)
        if f.shape[1] != self.in_dim:
            raise DimensionError(f"matchability expects {self.in_dim}-d descriptors, got {f.shape[1]}")
        return mlp_apply(self.spec, store, self.prefix, f, ctx)


@dataclass(frozen=True)
class QuadrupleBatch:
    """Row n of ``f1`` and row n of ``f2`` describe the same scene point."""
    f1: np.ndarray
    f2: np.ndarray

    def __post_init__(self):
        if self.f1.shape[0] != self.f2.shape[0]:
            raise DimensionError(f"quadruple views differ in size: {self.f1.shape[0]} vs {self.f2.shape[0]}")


def matchability(head: MatchabilityHead, store: ParameterStore, f,
                 ctx: ForwardContext | None = None) -> Tensor:
    """tanh(H(f)) per row, strictly inside (-1, 1)."""
    return head.raw(store, f, ctx).tanh()


def ranking_hinge(scores1, scores2, matchable_indices) -> Tensor:
    """Mean over ordered pairs i != j in Cm of max(0, 1 - R_ij).

    R_ij = (s1_i - s1_j)(s2_i - s2_j) on raw (unactivated) scores.

    Raises:
        InsufficientPairsError: when fewer than two matchable indices are given.
    """
    idx = np.asarray(matchable_indices, dtype=np.int64)
    km = len(idx)
    if km < 2:
        raise InsufficientPairsError(f"ranking loss needs at least 2 matchable keypoints, got {km}")
    a = as_tensor(scores1).take_rows(idx)
    b = as_tensor(scores2).take_rows(idx)
    agreement = (a - a.T) * (b - b.T)
    off_diagonal = 1.0 - np.eye(km)
    hinge = (1.0 - agreement).relu() * off_diagonal
    return hinge.sum() * (1.0 / (km * (km - 1)))


def quad_loss(head: MatchabilityHead, store: ParameterStore, batch: QuadrupleBatch,
              matchable_indices, ctx: ForwardContext | None = None) -> Tensor:
    """Hinge ranking loss keeping matchability order consistent across views."""
    return ranking_hinge(head.raw(store, batch.f1, ctx), head.raw(store, batch.f2, ctx), matchable_indices)


@dataclass(frozen=True)
class GeoEncoder:
    """Linear lift 3 -> C, residual units, final CN -> BN -> relu, linear head C -> 128.

    ``unit_style="preact"`` orders every half-unit as CN -> BN -> relu ->
    perceptron; ``"original"`` as perceptron -> CN -> BN -> relu.
    """
    width: int = 128
    units: int = 4
    out_dim: int = DESCRIPTOR_DIM
    unit_style: str = "preact"
    use_matchability: bool = True
    prefix: str = "geo"

    def __post_init__(self):
        if self.unit_style not in UNIT_STYLES:
            raise ValueError(f"unit_style must be one of {UNIT_STYLES}")
        if self.width <= 0 or self.units < 0:
            raise ValueError("encoder width must be positive and units non-negative")

    def init(self, store, rng: np.random.Generator) -> None:
        init_linear(store, f"{self.prefix}.lift", 3, self.width, rng)
        for i in range(self.units):
            for j in range(2):
                name = f"{self.prefix}.unit{i}.{j}"
                init_linear(store, name, self.width, self.width, rng)
                init_batch_norm(store, f"{name}.bn", self.width)
        init_batch_norm(store, f"{self.prefix}.tail.bn", self.width)
        init_linear(store, f"{self.prefix}.head", self.width, self.out_dim, rng)

    def _unit(self, store: ParameterStore, i: int, x: Tensor, ctx: ForwardContext) -> Tensor:
        branch = x
        for j in range(2):
            name = f"{self.prefix}.unit{i}.{j}"
            if self.unit_style == "preact":
                branch = normalize(store, f"{name}.bn", branch, "CN+BN", ctx).relu()
                branch = linear(store, name, branch)
            else:
                branch = linear(store, name, branch)
                branch = normalize(store, f"{name}.bn", branch, "CN+BN", ctx).relu()
        return x + branch

    def __call__(self, store: ParameterStore, coords, m, ctx: ForwardContext | None = None) -> Tensor:
        ctx = ctx or ForwardContext()
        coords = as_tensor(coords)
        if coords.shape[0] == 0:
            raise EmptyInputError("geometric encoder needs at least one keypoint")
        if coords.shape[1] != 2:
            raise DimensionError(f"coordinates must be K x 2, got {coords.shape}")
        m = as_tensor(m)
        if m.shape != (coords.shape[0], 1):
            raise DimensionError(f"matchability must be K x 1, got {m.shape}")
        if not self.use_matchability:
            m = Tensor(np.zeros_like(m.data))

        x = linear(store, f"{self.prefix}.lift", concat([coords, m], axis=1))
        for i in range(self.units):
            x = self._unit(store, i, x, ctx)
        x = normalize(store, f"{self.prefix}.tail.bn", x, "CN+BN", ctx).relu()
        return linear(store, f"{self.prefix}.head", x)


def encode_geometric(enc: GeoEncoder, store: ParameterStore, coords, m,
                     ctx: ForwardContext | None = None) -> Tensor:
    """Geometric context features, K x 128; every row depends on all K inputs."""
    return enc(store, coords, m, ctx)
