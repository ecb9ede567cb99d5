"""Deterministic synthetic "disc" scenes: noisy grayscale images with small
elliptical objects, optionally carrying a half-ellipse protrusion.

Randomness is keyed by (seed, index, stage) so any image can be rebuilt alone.
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import Truth

STAGE_LAYOUT, STAGE_NOISE = 0, 1
SIDES = ("left", "right", "top", "bottom")
MARGIN = 2.0
SUPERSAMPLE = 4


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 0.1
    rician_sigma: float = 0.05
    streak_count: int = 0
    streak_amplitude: float = 0.3

    def __post_init__(self):
        if self.gaussian_sigma < 0 or self.rician_sigma < 0 or self.streak_count < 0:
            raise ValueError("noise magnitudes and streak_count must be non-negative")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    discs_per_image: tuple = (3, 6)
    disc_radii: tuple = (3.0, 6.0)
    protrusion_bump: float = 0.6
    class_balance: float = 0.5
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "discs_per_image", tuple(self.discs_per_image))
        object.__setattr__(self, "disc_radii", tuple(self.disc_radii))
        lo, hi = self.discs_per_image
        rlo, rhi = self.disc_radii
        if not (1 <= lo <= hi) or not (0 < rlo <= rhi):
            raise ValueError("invalid disc count or radius range")
        if not 0 <= self.class_balance <= 1 or self.protrusion_bump < 0:
            raise ValueError("class_balance must be in [0, 1] and protrusion_bump >= 0")
        if self.image_size < 8:
            raise ValueError("image_size too small")


def rng_for(seed: int, index: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, stage]))


@dataclass(frozen=True)
class Disc:
    cx: float
    cy: float
    rx: float
    ry: float
    side: str | None  # protrusion side, None for a plain disc
    bump: float  # protrusion depth as a fraction of the radius on that side
    intensity: float

    @property
    def label(self) -> int:
        return 1 if self.side is not None else 0

    def extent(self) -> np.ndarray:
        """Analytic tight bounds (x1, y1, x2, y2)."""
        x1, y1, x2, y2 = self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry
        if self.side == "left":
            x1 -= self.bump * self.rx
        elif self.side == "right":
            x2 += self.bump * self.rx
        elif self.side == "top":
            y1 -= self.bump * self.ry
        elif self.side == "bottom":
            y2 += self.bump * self.ry
        return np.array([x1, y1, x2, y2])

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy = x - self.cx, y - self.cy
        m = (dx / self.rx) ** 2 + (dy / self.ry) ** 2 <= 1.0
        if self.side is None:
            return m
        # half-ellipse bump, as deep as bump*radius and half as wide as the disc
        if self.side in ("left", "right"):
            sgn = -1 if self.side == "left" else 1
            u = sgn * dx - self.rx
            a, b, v = self.bump * self.rx, 0.5 * self.ry, dy
        else:
            sgn = -1 if self.side == "top" else 1
            u = sgn * dy - self.ry
            a, b, v = self.bump * self.ry, 0.5 * self.rx, dx
        return m | ((u >= 0) & ((u / a) ** 2 + (v / b) ** 2 <= 1.0))


def _layout(spec: SceneSpec, rng: np.random.Generator) -> list[Disc]:
    size = spec.image_size
    lo, hi = spec.discs_per_image
    rlo, rhi = spec.disc_radii
    for _ in range(50):
        count = int(rng.integers(lo, hi + 1))
        discs: list[Disc] = []
        tries = 0
        protrude, side = None, None
        while len(discs) < count and tries < 500:
            tries += 1
            # class is drawn once per slot so placement retries cannot bias the balance
            if protrude is None:
                protrude = spec.protrusion_bump > 0 and rng.random() < spec.class_balance
                side = SIDES[int(rng.integers(4))] if protrude else None
            rx, ry = rng.uniform(rlo, rhi, size=2)
            reach = max(rx, ry) * (1 + (spec.protrusion_bump if protrude else 0.0))
            lim = MARGIN + reach
            if size - 2 * lim <= 0:
                continue
            cx, cy = rng.uniform(lim, size - lim, size=2)
            if any(np.hypot(cx - d.cx, cy - d.cy) < reach + _reach(d) for d in discs):
                continue
            discs.append(Disc(cx, cy, rx, ry, side, spec.protrusion_bump if protrude else 0.0,
                              rng.uniform(0.6, 0.9)))
            protrude = None
        if len(discs) == count:
            return discs
    raise GenerationError("could not place discs without overlap after bounded retries")


def _reach(d: Disc) -> float:
    return max(d.rx, d.ry) * (1 + d.bump)


def coverage(disc: Disc, size: int, ss: int = SUPERSAMPLE) -> np.ndarray:
    """Fraction of each pixel covered by the shape (ss x ss supersampling)."""
    offs = (np.arange(ss) + 0.5) / ss
    g = np.arange(size)[:, None] + offs[None, :]
    fine = g.reshape(-1)
    xs, ys = np.meshgrid(fine, fine, indexing="xy")
    m = disc.inside(xs, ys).astype(np.float64)
    return m.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render_clean(spec: SceneSpec, index: int) -> tuple[np.ndarray, Truth, list[Disc]]:
    rng = rng_for(spec.seed, index, STAGE_LAYOUT)
    size = spec.image_size
    discs = _layout(spec, rng)
    theta = rng.uniform(0, 2 * np.pi)
    base, slope = rng.uniform(0.1, 0.25), rng.uniform(0.0, 0.15)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = base + slope * (np.cos(theta) * xx + np.sin(theta) * yy)
    for d in discs:
        cov = coverage(d, size)
        img = img * (1 - cov) + d.intensity * cov
    truth = Truth(np.stack([d.extent() for d in discs]), np.array([d.label for d in discs]))
    return np.clip(img, 0, 1)[None], truth, discs


def apply_noise(image: np.ndarray, noise: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Rician magnitude noise, additive Gaussian, bright streaks, then clamp to [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    if noise.rician_sigma > 0:
        n1 = rng.normal(0, noise.rician_sigma, x.shape)
        n2 = rng.normal(0, noise.rician_sigma, x.shape)
        x = np.sqrt((x + n1) ** 2 + n2 ** 2)
    if noise.gaussian_sigma > 0:
        x = x + rng.normal(0, noise.gaussian_sigma, x.shape)
    h, w = x.shape[-2:]
    for _ in range(noise.streak_count):
        if rng.random() < 0.5:
            x[..., int(rng.integers(h)), :] += noise.streak_amplitude
        else:
            x[..., :, int(rng.integers(w))] += noise.streak_amplitude
    return np.clip(x, 0, 1)


def render(spec: SceneSpec, index: int) -> tuple[np.ndarray, Truth]:
    img, truth, _ = render_clean(spec, index)
    img = apply_noise(img, spec.noise, rng_for(spec.seed, index, STAGE_NOISE))
    return img.astype(np.float32), truth


def psnr(clean: np.ndarray, noisy: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(clean, float) - np.asarray(noisy, float)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(1.0 / mse)


class SyntheticDataset:
    """Images for a fixed index range, rendered once and cached."""

    def __init__(self, spec: SceneSpec, indices: Sequence[int], threads: int = 1):
        self.spec = spec
        self.indices = list(indices)
        self.threads = threads
        self._images: np.ndarray | None = None
        self._truths: list[Truth] | None = None

    def __len__(self):
        return len(self.indices)

    def _materialize(self):
        if self._images is None:
            if self.threads > 1:
                with ThreadPoolExecutor(self.threads) as ex:
                    items = list(ex.map(lambda i: render(self.spec, i), self.indices))
            else:
                items = [render(self.spec, i) for i in self.indices]
            self._images = np.stack([im for im, _ in items]) if items else np.zeros((0, 1, 0, 0), np.float32)
            self._truths = [t for _, t in items]

    @property
    def images(self) -> np.ndarray:
        self._materialize()
        return self._images

    @property
    def truths(self) -> list[Truth]:
        self._materialize()
        return self._truths

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        for t in self.truths:
            h.update(t.boxes.tobytes())
            h.update(t.labels.tobytes())
        return h.hexdigest()


def make_split(spec: SceneSpec, n_train: int, n_val: int, n_test: int, threads: int = 1):
    """Disjoint consecutive index ranges: train, then val, then test."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("split sizes must be >= 1")
    a, b = n_train, n_train + n_val
    return (
        SyntheticDataset(spec, range(0, a), threads),
        SyntheticDataset(spec, range(a, b), threads),
        SyntheticDataset(spec, range(b, b + n_test), threads),
    )


MAGIC = b"MDDS"


def export_dataset(ds: SyntheticDataset, path) -> None:
    images = ds.images
    n, _, h, w = images.shape if len(images) else (0, 1, ds.spec.image_size, ds.spec.image_size)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IHH", n, h, w))
        for img, tr in zip(images, ds.truths):
            fh.write(np.ascontiguousarray(img.reshape(-1), dtype="<f4").tobytes())
            fh.write(struct.pack("<H", len(tr)))
            for box, lab in zip(tr.boxes, tr.labels):
                fh.write(np.asarray(box, dtype="<f4").tobytes() + struct.pack("<B", int(lab)))


def read_dataset(path) -> tuple[np.ndarray, list[Truth]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError("not an MDDS dataset file")
    n, h, w = struct.unpack_from("<IHH", buf, 4)
    off = 12
    images, truths = [], []
    for _ in range(n):
        images.append(np.frombuffer(buf, "<f4", h * w, off).reshape(1, h, w))
        off += 4 * h * w
        (m,) = struct.unpack_from("<H", buf, off)
        off += 2
        boxes, labels = [], []
        for _ in range(m):
            boxes.append(np.frombuffer(buf, "<f4", 4, off))
            labels.append(buf[off + 16])
            off += 17
        truths.append(Truth(np.array(boxes).reshape(-1, 4), np.array(labels)))
    return np.stack(images) if images else np.zeros((0, 1, h, w), np.float32), truths
