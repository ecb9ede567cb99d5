"""Small configurable detector: plain conv backbone, FPN, GFL-style shared head.

nmODE^2 blocks can be inserted after the backbone stages feeding the FPN,
after each FPN output, or at the end of the shared head tower.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numcore as nc
from .boxes import Detections
from .nmode import PerceptualMap, SolverSpec, nmode2_block
from .numcore import DimensionError, Tensor

ROLES = ("teacher_small", "teacher_mid", "teacher_large", "student")
TEACHER_ROLES = ROLES[:3]
PLACEMENTS = ("backbone", "fpn", "head")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    role: str = "student"
    stem_channels: int = 8
    stage_widths: tuple = (8, 16, 24, 32)
    stage_depths: tuple = (1, 1, 1, 1)
    pyramid_levels: int = 3
    pyramid_channels: int = 16
    head_tower_depth: int = 1
    num_classes: int = 2
    reg_bins: int = 8
    nmode2_placement: tuple = ("head",)
    solver: SolverSpec = field(default_factory=SolverSpec)

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "nmode2_placement", tuple(sorted(set(self.nmode2_placement))))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.role not in ROLES:
            problems.append(f"role {self.role!r} not in {ROLES}")
        if len(self.stage_widths) != len(self.stage_depths):
            problems.append("stage_widths and stage_depths differ in length")
        if any(w < 1 for w in self.stage_widths) or self.stem_channels < 1:
            problems.append("channel widths must be positive")
        if any(d < 1 for d in self.stage_depths):
            problems.append("stage depths must be >= 1")
        if not 2 <= self.pyramid_levels <= min(5, len(self.stage_widths)):
            problems.append(f"pyramid_levels must be in [2, min(5, stages)], got {self.pyramid_levels}")
        if self.pyramid_channels < 1 or self.head_tower_depth < 0:
            problems.append("pyramid_channels >= 1 and head_tower_depth >= 0 required")
        if self.num_classes < 1 or self.reg_bins < 1:
            problems.append("num_classes and reg_bins must be >= 1")
        bad = set(self.nmode2_placement) - set(PLACEMENTS)
        if bad:
            problems.append(f"unknown nmode2 placement {sorted(bad)}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def strides(self) -> list[int]:
        s, L = len(self.stage_widths), self.pyramid_levels
        return [2 ** (s - L + k + 2) for k in range(L)]


def validate_family(configs: dict[str, NetConfig]) -> None:
    """Teacher widths strictly increase small -> mid -> large; the student is below teacher_small."""
    problems = []
    for role, cfg in configs.items():
        if cfg.role != role:
            problems.append(f"{role}: config role is {cfg.role!r}")
    tiers = [configs[r] for r in TEACHER_ROLES if r in configs]
    for lo, hi in zip(tiers, tiers[1:]):
        if not all(a < b for a, b in zip(lo.stage_widths, hi.stage_widths)):
            problems.append(f"{hi.role} widths {hi.stage_widths} not strictly above {lo.role} {lo.stage_widths}")
    if "student" in configs and "teacher_small" in configs:
        s, t = configs["student"], configs["teacher_small"]
        if not all(a < b for a, b in zip(s.stage_widths, t.stage_widths)):
            problems.append(f"student widths {s.stage_widths} not strictly below teacher_small {t.stage_widths}")
    if problems:
        raise ConfigError("; ".join(problems))


DEFAULT_CONFIGS = {
    "teacher_small": NetConfig("teacher_small", 16, (16, 32, 48, 64), (1, 2, 2, 2), 3, 32, 1),
    "teacher_mid": NetConfig("teacher_mid", 16, (20, 40, 56, 80), (1, 2, 2, 2), 3, 40, 1),
    "teacher_large": NetConfig("teacher_large", 16, (24, 48, 64, 96), (1, 2, 3, 3), 3, 48, 1),
    "student": NetConfig("student", 12, (12, 24, 32, 40), (1, 1, 1, 1), 3, 24, 1),
}


@dataclass
class PyramidFeatures:
    levels: list

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]


@dataclass
class HeadOutput:
    class_logits: list
    box_dist: list
    strides: list
    reg_bins: int
    tower: list = field(default_factory=list)


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str  # conv | fc | ode_map
    cin: int
    cout: int
    k: int
    h_out: int
    w_out: int
    repeat: int = 1

    @property
    def params(self) -> int:
        return self.cin * self.cout * self.k * self.k + self.cout

    @property
    def flops(self) -> int:
        return 2 * self.cin * self.cout * self.k * self.k * self.h_out * self.w_out * self.repeat


def _conv_out(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def layer_table(config: NetConfig, input_hw: tuple[int, int] = (64, 64)) -> list[LayerInfo]:
    """Every parameterised layer in forward order with output sizes.

    A shared head layer appears once per pyramid level it runs on.
    """
    h, w = input_hw
    rows = []
    h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
    rows.append(LayerInfo("stem", "conv", 1, config.stem_channels, 3, h, w))
    cin = config.stem_channels
    sizes = []
    for s, (width, depth) in enumerate(zip(config.stage_widths, config.stage_depths)):
        h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
        for d in range(depth):
            rows.append(LayerInfo(f"stage{s}.{d}", "conv", cin if d == 0 else width, width, 3, h, w))
        cin = width
        sizes.append((width, h, w))
    L = config.pyramid_levels
    used = sizes[-L:]
    steps = config.solver.n_steps
    if "backbone" in config.nmode2_placement:
        for k, (c, hh, ww) in enumerate(used):
            rows.append(LayerInfo(f"ode.backbone{k}", "ode_map", c, c, 1, hh, ww, steps))
    P = config.pyramid_channels
    for k, (c, hh, ww) in enumerate(used):
        rows.append(LayerInfo(f"fpn.lateral{k}", "conv", c, P, 1, hh, ww))
    for k, (c, hh, ww) in enumerate(used):
        rows.append(LayerInfo(f"fpn.out{k}", "conv", P, P, 3, hh, ww))
    if "fpn" in config.nmode2_placement:
        for k, (c, hh, ww) in enumerate(used):
            rows.append(LayerInfo(f"ode.fpn{k}", "ode_map", P, P, 1, hh, ww, steps))
    n_out = 4 * (config.reg_bins + 1)
    for k, (c, hh, ww) in enumerate(used):
        for d in range(config.head_tower_depth):
            rows.append(LayerInfo(f"head.tower{d}", "conv", P, P, 3, hh, ww))
        if "head" in config.nmode2_placement:
            rows.append(LayerInfo("ode.head", "ode_map", P, P, 1, hh, ww, steps))
        rows.append(LayerInfo("head.cls", "conv", P, config.num_classes, 3, hh, ww))
        rows.append(LayerInfo("head.reg", "conv", P, n_out, 3, hh, ww))
    return rows


class Network:
    """Parameters plus the forward pass for one NetConfig."""

    def __init__(self, config: NetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _conv(self, x: Tensor, name: str, stride: int = 1, relu: bool = False) -> Tensor:
        w = self.params[name + ".weight"]
        pad = w.shape[-1] // 2
        y = nc.conv2d(x, w, self.params[name + ".bias"], stride=stride, padding=pad)
        return nc.relu(y) if relu else y

    def _ode(self, x: Tensor, name: str) -> Tensor:
        pmap = PerceptualMap(self.params[name + ".weight"], self.params[name + ".bias"], "conv1x1")
        return nmode2_block(x, pmap, self.config.solver)

    def backbone(self, images: Tensor) -> list[Tensor]:
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != 1:
            raise DimensionError(f"expected grayscale NCHW images, got {images.shape}")
        top = max(cfg.strides)
        if images.shape[2] % top or images.shape[3] % top:
            raise DimensionError(f"image size {images.shape[2:]} not divisible by largest stride {top}")
        x = self._conv(images, "stem", 2, relu=True)
        feats = []
        for s, depth in enumerate(cfg.stage_depths):
            for d in range(depth):
                x = self._conv(x, f"stage{s}.{d}", 2 if d == 0 else 1, relu=True)
            feats.append(x)
        used = feats[-cfg.pyramid_levels:]
        if "backbone" in cfg.nmode2_placement:
            used = [self._ode(c, f"ode.backbone{k}") for k, c in enumerate(used)]
        return used

    def neck(self, used: list[Tensor]) -> PyramidFeatures:
        L = len(used)
        lat = [self._conv(c, f"fpn.lateral{k}") for k, c in enumerate(used)]
        p = [None] * L
        p[L - 1] = lat[L - 1]
        for k in range(L - 2, -1, -1):
            _, _, hh, ww = lat[k].shape
            p[k] = lat[k] + nc.upsample_nearest(p[k + 1], hh, ww)
        outs = [self._conv(pk, f"fpn.out{k}") for k, pk in enumerate(p)]
        if "fpn" in self.config.nmode2_placement:
            outs = [self._ode(o, f"ode.fpn{k}") for k, o in enumerate(outs)]
        return PyramidFeatures(outs)

    def head(self, feats: PyramidFeatures) -> HeadOutput:
        cfg = self.config
        cls, reg, tower = [], [], []
        for f in feats.levels:
            t = f
            for d in range(cfg.head_tower_depth):
                t = self._conv(t, f"head.tower{d}", relu=True)
            if "head" in cfg.nmode2_placement:
                t = self._ode(t, "ode.head")
            tower.append(t)
            cls.append(self._conv(t, "head.cls"))
            reg.append(self._conv(t, "head.reg"))
        return HeadOutput(cls, reg, list(cfg.strides), cfg.reg_bins, tower)

    def forward(self, images: Tensor) -> tuple[PyramidFeatures, HeadOutput]:
        feats = self.neck(self.backbone(images))
        return feats, self.head(feats)

    __call__ = forward


def build(config: NetConfig, seed: int) -> Network:
    """He-normal conv weights (std 0.01 for the cls/reg predictors), zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    seen = set()
    for row in layer_table(config):
        if row.name in seen:
            continue
        seen.add(row.name)
        fan_in = row.cin * row.k * row.k
        std = 0.01 if row.name in ("head.cls", "head.reg") else np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(row.cout, row.cin, row.k, row.k))
        params[row.name + ".weight"] = Tensor(w, requires_grad=True, name=row.name + ".weight")
        params[row.name + ".bias"] = Tensor(np.zeros(row.cout), requires_grad=True, name=row.name + ".bias")
    return Network(config, params)


def param_count(net: Network | NetConfig) -> int:
    if isinstance(net, Network):
        return int(sum(p.size for p in net.parameters()))
    seen = {}
    for row in layer_table(net):
        seen[row.name] = row.params
    return sum(seen.values())


def flop_count(net: Network | NetConfig, input_shape: Sequence[int] = (1, 64, 64)) -> int:
    """Multiply-add FLOPs (2 per MAC) per image; nmODE^2 maps count once per solver step."""
    cfg = net.config if isinstance(net, Network) else net
    return sum(r.flops for r in layer_table(cfg, tuple(input_shape[-2:])))


def fc_param_count(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def bin_expectation(logits: np.ndarray) -> np.ndarray:
    """Expected bin index of softmax(logits) along the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ np.arange(logits.shape[-1], dtype=p.dtype)


def location_centers(h: int, w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (xs + 0.5) * stride, (ys + 0.5) * stride


def decode_boxes(head: HeadOutput, score_thresh: float = 0.05, max_per_image: int = 100) -> list[Detections]:
    """Distribution expectations times stride give side distances around each location."""
    n = head.class_logits[0].shape[0]
    nb = head.reg_bins + 1
    per_image = [[] for _ in range(n)]
    for cls_t, reg_t, stride in zip(head.class_logits, head.box_dist, head.strides):
        cl = cls_t.data
        _, k, h, w = cl.shape
        scores = 1.0 / (1.0 + np.exp(-cl.astype(np.float64)))
        dist = reg_t.data.astype(np.float64).reshape(n, 4, nb, h, w).transpose(0, 3, 4, 1, 2)
        d = bin_expectation(dist) * stride  # n,h,w,4
        cx, cy = location_centers(h, w, stride)
        boxes = np.stack([cx - d[..., 0], cy - d[..., 1], cx + d[..., 2], cy + d[..., 3]], axis=-1)
        for i in range(n):
            s = scores[i].transpose(1, 2, 0)  # h,w,k
            yy, xx, cc = np.nonzero(s >= score_thresh)
            per_image[i].append((boxes[i, yy, xx], s[yy, xx, cc], cc))
    out = []
    for parts in per_image:
        b = np.concatenate([p[0] for p in parts]).reshape(-1, 4)
        s = np.concatenate([p[1] for p in parts])
        c = np.concatenate([p[2] for p in parts]).astype(np.int64)
        if len(s) > max_per_image:
            keep = np.argsort(-s, kind="stable")[:max_per_image]
            b, s, c = b[keep], s[keep], c[keep]
        out.append(Detections(b, s, c))
    return out


def with_placement(config: NetConfig, placement: Sequence[str]) -> NetConfig:
    return replace(config, nmode2_placement=tuple(placement))
