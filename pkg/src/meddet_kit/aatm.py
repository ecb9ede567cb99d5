"""Adversarial auxiliary teacher: generator, per-level discriminators and their losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import ContractError, DimensionError, Tensor

P_MIN = 1e-7
P_MAX = 1 - 1e-7


@dataclass
class Generator:
    """conv3x3 -> relu -> conv3x3, channels preserved."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "Generator":
        std = np.sqrt(2.0 / (9 * channels))

        def t(shape, s):
            return Tensor(rng.normal(0.0, s, size=shape) if s else np.zeros(shape), requires_grad=True)

        shape = (channels, channels, 3, 3)
        return cls(t(shape, std), t((channels,), 0), t(shape, std), t((channels,), 0))

    @classmethod
    def zeros(cls, channels: int) -> "Generator":
        z = lambda s: Tensor(np.zeros(s), requires_grad=True)  # noqa: E731
        return cls(z((channels, channels, 3, 3)), z((channels,)), z((channels, channels, 3, 3)), z((channels,)))

    @classmethod
    def identity(cls, channels: int) -> "Generator":
        w = np.zeros((channels, channels, 3, 3))
        w[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(channels), requires_grad=True),
                   Tensor(w.copy(), requires_grad=True), Tensor(np.zeros(channels), requires_grad=True))


def generate(g: Generator, aligned_student: Tensor) -> Tensor:
    if aligned_student.ndim != 4 or aligned_student.shape[1] != g.channels:
        raise DimensionError(f"generator expects {g.channels} channels, got {aligned_student.shape}")
    h = nc.relu(nc.conv2d(aligned_student, g.w1, g.b1, padding=1))
    return nc.conv2d(h, g.w2, g.b2, padding=1)


@dataclass
class Discriminator:
    """flatten -> fc -> relu -> fc -> relu -> fc -> sigmoid."""

    layers: list  # [(W, b)] x 3

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    def parameters(self) -> list[Tensor]:
        return [p for wb in self.layers for p in wb]

    @classmethod
    def init(cls, input_dim: int, rng: np.random.Generator, hidden: Sequence[int] = (128, 64)) -> "Discriminator":
        dims = [input_dim, *hidden, 1]
        layers = []
        for a, b in zip(dims, dims[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
            layers.append((Tensor(w, requires_grad=True), Tensor(np.zeros(b), requires_grad=True)))
        return cls(layers)

    def detached(self) -> "Discriminator":
        return Discriminator([(w.detach(), b.detach()) for w, b in self.layers])


def discriminate(d: Discriminator, feats: Tensor) -> Tensor:
    """Probability [N] that each sample is a teacher feature."""
    n = feats.shape[0]
    flat = nc.reshape(feats, (n, -1))
    if flat.shape[1] != d.input_dim:
        raise DimensionError(f"discriminator input_dim {d.input_dim} != C*H*W {flat.shape[1]}")
    h = flat
    for j, (w, b) in enumerate(d.layers):
        h = nc.fully_connected(h, w, b)
        if j < len(d.layers) - 1:
            h = nc.relu(h)
    return nc.reshape(nc.sigmoid(h), (n,))


@dataclass
class AdversarialBatch:
    level: int
    teacher_feats: Tensor  # positives, label 1
    student_feats: Tensor  # generated student features, label 0

    def __post_init__(self):
        if self.teacher_feats.shape[0] == 0 or self.student_feats.shape[0] == 0:
            raise ContractError(f"empty adversarial batch at level {self.level}")


def _log_prob(p: Tensor) -> Tensor:
    return nc.log(nc.clamp(p, P_MIN, P_MAX))


def _log_one_minus(p: Tensor) -> Tensor:
    return nc.log(1.0 - nc.clamp(p, P_MIN, P_MAX))


def d_loss(batches: Sequence[AdversarialBatch], discriminators: Sequence[Discriminator]) -> Tensor:
    """-[mean log D(T) + mean log(1 - D(G(S)))] summed over levels.

    Generated features are detached: only the discriminators receive gradient.
    """
    if not batches:
        raise ContractError("d_loss needs at least one level")
    total = None
    for b in batches:
        d = discriminators[b.level]
        pos = discriminate(d, b.teacher_feats.detach())
        neg = discriminate(d, b.student_feats.detach())
        term = nc.neg(_log_prob(pos).mean() + _log_one_minus(neg).mean())
        total = term if total is None else total + term
    return total


def g_loss(batches: Sequence[AdversarialBatch], discriminators: Sequence[Discriminator],
           form: str = "nonsaturating") -> Tensor:
    """Generator/student adversarial loss summed over levels.

    'nonsaturating': -mean log D(G(S)); 'literal': mean log(1 - D(G(S))).
    Discriminator parameters are detached so they never accumulate gradient here.
    """
    if not batches:
        raise ContractError("g_loss needs at least one level")
    total = None
    for b in batches:
        p = discriminate(discriminators[b.level].detached(), b.student_feats)
        if form == "nonsaturating":
            term = nc.neg(_log_prob(p).mean())
        elif form == "literal":
            term = _log_one_minus(p).mean()
        else:
            raise ContractError(f"unknown generator loss form {form!r}")
        total = term if total is None else total + term
    return total
