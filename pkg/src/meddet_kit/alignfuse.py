"""Adaptive feature alignment and learnable weighted feature fusion.

align(F)  = adaptive_max_pool(conv1x1(F))
alpha(F)  = sigmoid(conv1x1(global_avg_pool(F)))           per input
fused     = conv1x1(cat(alpha(F_1) * F_1, ..., alpha(F_K) * F_K))
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import DimensionError, Tensor


class AlignmentError(DimensionError):
    pass


@dataclass
class AlignSpec:
    in_channels: int
    out_channels: int
    out_h: int
    out_w: int
    conv_weight: Tensor
    conv_bias: Tensor

    def __post_init__(self):
        if self.conv_weight.shape != (self.out_channels, self.in_channels, 1, 1):
            raise DimensionError(
                f"align weight {self.conv_weight.shape} != {(self.out_channels, self.in_channels, 1, 1)}"
            )

    def parameters(self) -> list[Tensor]:
        return [self.conv_weight, self.conv_bias]

    @classmethod
    def init(cls, in_channels, out_channels, out_h, out_w, rng: np.random.Generator) -> "AlignSpec":
        w = rng.normal(0.0, np.sqrt(1.0 / in_channels), size=(out_channels, in_channels, 1, 1))
        return cls(in_channels, out_channels, out_h, out_w,
                   Tensor(w, requires_grad=True), Tensor(np.zeros(out_channels), requires_grad=True))

    @classmethod
    def identity(cls, channels: int, out_h: int, out_w: int) -> "AlignSpec":
        w = np.eye(channels).reshape(channels, channels, 1, 1)
        return cls(channels, channels, out_h, out_w,
                   Tensor(w, requires_grad=True), Tensor(np.zeros(channels), requires_grad=True))


def afa_apply(feat: Tensor, spec: AlignSpec) -> Tensor:
    """Channel alignment by 1x1 conv, then HW alignment by adaptive max pooling."""
    _, c, h, w = feat.shape
    if c != spec.in_channels:
        raise DimensionError(f"afa_apply: input has {c} channels, spec expects {spec.in_channels}")
    if spec.out_h > h or spec.out_w > w:
        raise AlignmentError(
            f"afa_apply: cannot upsample {h}x{w} to {spec.out_h}x{spec.out_w} with max pooling"
        )
    y = nc.conv2d(feat, spec.conv_weight, spec.conv_bias)
    if (spec.out_h, spec.out_w) == (h, w):
        return y
    return nc.adaptive_max_pool(y, spec.out_h, spec.out_w)


@dataclass
class FusionParams:
    head_weights: list  # K x Tensor[C, C, 1, 1]
    head_biases: list  # K x Tensor[C]
    merge_weight: Tensor  # [C, K*C, 1, 1]
    merge_bias: Tensor  # [C]

    @property
    def K(self) -> int:
        return len(self.head_weights)

    def parameters(self) -> list[Tensor]:
        return [*self.head_weights, *self.head_biases, self.merge_weight, self.merge_bias]

    @classmethod
    def init(cls, channels: int, k: int, rng: np.random.Generator | None = None) -> "FusionParams":
        """Zero weight heads (alpha = 0.5) and a mean-of-inputs merge, unless rng adds noise to the heads."""
        heads = []
        for _ in range(k):
            w = np.zeros((channels, channels, 1, 1))
            if rng is not None:
                w = rng.normal(0.0, np.sqrt(1.0 / channels), size=w.shape)
            heads.append(Tensor(w, requires_grad=True))
        biases = [Tensor(np.zeros(channels), requires_grad=True) for _ in range(k)]
        merge = Tensor(mean_partition(channels, k), requires_grad=True)
        return cls(heads, biases, merge, Tensor(np.zeros(channels), requires_grad=True))


def mean_partition(channels: int, k: int) -> np.ndarray:
    """Merge weights [C, K*C, 1, 1] averaging channel c across the K blocks."""
    w = np.tile(np.eye(channels), (1, k)) / k
    return w.reshape(channels, k * channels, 1, 1)


def lwff_weight(feat: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel weights in (0, 1): sigmoid(conv1x1(global_avg_pool(feat)))."""
    return nc.sigmoid(nc.conv2d(nc.global_avg_pool(feat), weight, bias))


def _check_shared(feats: Sequence[Tensor]) -> None:
    ref = feats[0].shape
    for j, f in enumerate(feats[1:], 1):
        if f.shape != ref:
            raise DimensionError(f"fusion input {j} has shape {f.shape}, input 0 has {ref}")


def lwff_fuse(feats: Sequence[Tensor], params: FusionParams) -> Tensor:
    if len(feats) != params.K:
        raise DimensionError(f"lwff_fuse: {len(feats)} inputs for {params.K} weight heads")
    _check_shared(feats)
    weighted = [
        nc.scale_channels(f, lwff_weight(f, w, b))
        for f, w, b in zip(feats, params.head_weights, params.head_biases)
    ]
    return nc.conv2d(nc.concat(weighted, axis=1), params.merge_weight, params.merge_bias)


def fuse_baselines(feats: Sequence[Tensor], mode: str, merge_weight: Tensor | None = None,
                   merge_bias: Tensor | None = None) -> Tensor:
    """'sum': elementwise sum. 'concat': concatenate then an unweighted 1x1 merge
    (mean-of-inputs partition unless merge_weight is given)."""
    _check_shared(feats)
    if mode == "sum":
        out = feats[0]
        for f in feats[1:]:
            out = out + f
        return out
    if mode == "concat":
        c = feats[0].shape[1]
        if merge_weight is None:
            merge_weight = Tensor(mean_partition(c, len(feats)), dtype=feats[0].dtype)
        return nc.conv2d(nc.concat(list(feats), axis=1), merge_weight, merge_bias)
    raise ValueError(f"unknown fusion mode {mode!r}")
