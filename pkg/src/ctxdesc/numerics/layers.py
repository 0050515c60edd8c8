"""Layer primitives: perceptrons, context/batch normalization, row L2 normalization."""
import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from ctxdesc.errors import DimensionError
from ctxdesc.numerics.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

CN_EPSILON = 1e-6
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
L2_EPSILON = 1e-12

ACTIVATIONS = ("none", "relu", "tanh")
NORMALIZATIONS = ("none", "CN", "BN", "CN+BN")


class ParameterStore(Protocol):
    """Anything that hands out named trainable tensors and BN buffers."""

    def tensor(self, name: str) -> Tensor: ...

    def buffer(self, name: str) -> np.ndarray: ...


@dataclass
class ForwardContext:
    """Per-call switches for the normalization layers.

    In training mode batch normalization uses batch statistics and records
    them in ``batch_stats`` so the caller can fold them into the running
    statistics after the optimizer step.
    """
    training: bool = False
    cn_epsilon: float = CN_EPSILON
    bn_epsilon: float = BN_EPSILON
    batch_stats: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)


def context_normalize(features, eps: float = CN_EPSILON) -> Tensor:
    """Standardize every column over the K points: (x - mu) / sqrt(var + eps).

    Uses the population variance, so K = 1 yields zeros.
    """
    x = as_tensor(features)
    centered = x - x.mean(axis=0)
    variance = (centered * centered).mean(axis=0)
    return centered / (variance + eps).sqrt()


def batch_normalize(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                    running_var: np.ndarray, ctx: ForwardContext, stats_key: str) -> Tensor:
    if ctx.training:
        centered = x - x.mean(axis=0)
        variance = (centered * centered).mean(axis=0)
        ctx.batch_stats.append(
            (stats_key, x.data.mean(axis=0, keepdims=True), variance.data.copy())
        )
        normalized = centered / (variance + ctx.bn_epsilon).sqrt()
    else:
        scale = 1.0 / np.sqrt(running_var + ctx.bn_epsilon)
        normalized = (x - running_mean) * scale
    return normalized * gamma + beta


def fold_batch_stats(running_mean: np.ndarray, running_var: np.ndarray, batch_mean: np.ndarray,
                     batch_var: np.ndarray, momentum: float = BN_MOMENTUM) -> tuple[np.ndarray, np.ndarray]:
    """Exponential moving average of BN statistics."""
    return (momentum * running_mean + (1.0 - momentum) * batch_mean,
            momentum * running_var + (1.0 - momentum) * batch_var)


def l2_normalize_rows(m, eps: float = L2_EPSILON) -> Tensor:
    """Scale every row to unit norm; rows with norm <= eps become zero rows."""
    x = as_tensor(m)
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    live = norms > eps
    safe = np.where(live, norms, 1.0)
    y = np.where(live, x.data / safe, 0.0)

    def _backward(g):
        radial = (g * y).sum(axis=1, keepdims=True)
        x.grad += np.where(live, (g - y * radial) / safe, 0.0)

    return Tensor._make(y, (x,), "l2_normalize", _backward)


def activate(x: Tensor, tag: str) -> Tensor:
    if tag == "relu":
        return x.relu()
    if tag == "tanh":
        return x.tanh()
    return x


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths with one activation and one normalization tag per layer."""
    in_dim: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    norms: tuple[str, ...]

    def __post_init__(self):
        if not self.widths:
            raise ValueError("an MLP needs at least one layer")
        if self.in_dim <= 0 or any(w <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive: {self.in_dim} -> {self.widths}")
        if len(self.activations) != len(self.widths) or len(self.norms) != len(self.widths):
            raise ValueError("one activation and one normalization tag per layer")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation '{tag}'")
        for tag in self.norms:
            if tag not in NORMALIZATIONS:
                raise ValueError(f"unknown normalization '{tag}'")

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.in_dim,) + self.widths
        return list(zip(dims[:-1], dims[1:]))


def init_linear(store, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    """He-normal weights, zero bias."""
    store.add(f"{prefix}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
    store.add(f"{prefix}.bias", np.zeros((1, fan_out)))


def init_batch_norm(store, prefix: str, width: int) -> None:
    store.add(f"{prefix}.gamma", np.ones((1, width)))
    store.add(f"{prefix}.beta", np.zeros((1, width)))
    store.set_buffer(f"{prefix}.running_mean", np.zeros((1, width)))
    store.set_buffer(f"{prefix}.running_var", np.ones((1, width)))


def linear(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    weight = store.tensor(f"{prefix}.weight")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"{prefix}: input has {x.shape[1]} columns, layer expects {weight.shape[0]}")
    return x @ weight + store.tensor(f"{prefix}.bias")


def normalize(store: ParameterStore, prefix: str, x: Tensor, tag: str, ctx: ForwardContext) -> Tensor:
    if tag in ("CN", "CN+BN"):
        x = context_normalize(x, ctx.cn_epsilon)
    if tag in ("BN", "CN+BN"):
        x = batch_normalize(
            x,
            store.tensor(f"{prefix}.gamma"),
            store.tensor(f"{prefix}.beta"),
            store.buffer(f"{prefix}.running_mean"),
            store.buffer(f"{prefix}.running_var"),
            ctx,
            prefix,
        )
    return x


def init_mlp(spec: MlpSpec, store, prefix: str, rng: np.random.Generator) -> None:
    for i, ((fan_in, fan_out), norm) in enumerate(zip(spec.layer_dims(), spec.norms)):
        init_linear(store, f"{prefix}.{i}", fan_in, fan_out, rng)
        if "BN" in norm:
            init_batch_norm(store, f"{prefix}.{i}.bn", fan_out)


def mlp_apply(spec: MlpSpec, store: ParameterStore, prefix: str, x,
              ctx: ForwardContext | None = None) -> Tensor:
    """Per layer: affine map, then the normalization tag, then the activation.

    Raises:
        DimensionError: if the input width does not match ``spec.in_dim``.
    """
    ctx = ctx or ForwardContext()
    out = as_tensor(x)
    if out.shape[1] != spec.in_dim:
        raise DimensionError(f"{prefix}: input has {out.shape[1]} columns, expected {spec.in_dim}")
    for i, (norm, act) in enumerate(zip(spec.norms, spec.activations)):
        out = linear(store, f"{prefix}.{i}", out)
        out = normalize(store, f"{prefix}.{i}.bn", out, norm, ctx)
        out = activate(out, act)
    return out
