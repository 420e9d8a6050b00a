"""Synthetic multi-domain shape benchmark with a label-revealing shortcut patch."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from columbus.errors import ConfigError

MAGIC = b"CDG1"
VERSION = 1
SHAPES = ("square", "disk", "triangle", "cross", "bars")
PATCH = 4


@dataclass(frozen=True)
class DomainSpec:
    """Rendering style of one domain.

    Texture is a sum of two sinusoidal gratings whose frequencies and
    orientations come from ``texture_seed``; every image draws its own phases.
    """

    domain: int
    texture_seed: int = 0
    stroke: float = 2.0
    noise: float = 0.05
    rotation: float = 15.0
    scale: tuple[float, float] = (6.0, 9.0)
    background: float = 0.2
    texture_amplitude: float = 0.1
    foreground: float = 0.8
    shortcut_present: bool = False
    shortcut_intensity: float = 1.0


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    domains: np.ndarray  # (n,) int64
    num_classes: int
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index: np.ndarray) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.domains[index], self.num_classes)

    def domain_ids(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.domains))

    def only(self, domains: Sequence[int]) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.domains, list(domains))))


def patch_positions(num_classes: int, height: int, width: int) -> list[tuple[int, int]]:
    """Top-left corner of each class's shortcut patch: four corners, then edge midpoints."""
    cands = [
        (0, 0), (0, width - PATCH), (height - PATCH, 0), (height - PATCH, width - PATCH),
        (0, (width - PATCH) // 2), (height - PATCH, (width - PATCH) // 2),
        ((height - PATCH) // 2, 0), ((height - PATCH) // 2, width - PATCH),
    ]
    if num_classes > len(cands):
        raise ConfigError(f"at most {len(cands)} shortcut positions available, need {num_classes}")
    pos = cands[:num_classes]
    for i in range(len(pos)):
        for j in range(i + 1, len(pos)):
            (r1, c1), (r2, c2) = pos[i], pos[j]
            if abs(r1 - r2) < PATCH and abs(c1 - c2) < PATCH:
                raise ConfigError(f"shortcut patches of classes {i} and {j} overlap in a {height}x{width} image")
    return pos


def _segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _polyline(px, py, points, closed=True):
    pts = list(points) + ([points[0]] if closed else [])
    return np.minimum.reduce([_segment_distance(px, py, *a, *b) for a, b in zip(pts[:-1], pts[1:])])


def shape_distance(name: str, px: np.ndarray, py: np.ndarray, size: float) -> np.ndarray:
    """Distance from shape-local coordinates to the shape's outline."""
    s = size
    if name == "square":
        return _polyline(px, py, [(-s, -s), (s, -s), (s, s), (-s, s)])
    if name == "disk":
        return np.abs(np.hypot(px, py) - s)
    if name == "triangle":
        h = s * np.sqrt(3) / 2
        return _polyline(px, py, [(0.0, -s), (h, s / 2), (-h, s / 2)])
    if name == "cross":
        return np.minimum(_segment_distance(px, py, -s, 0, s, 0), _segment_distance(px, py, 0, -s, 0, s))
    if name == "bars":
        return np.minimum(
            _segment_distance(px, py, -s, -s / 2, s, -s / 2), _segment_distance(px, py, -s, s / 2, s, s / 2)
        )
    raise ConfigError(f"unknown shape {name!r}")


def render(spec: DomainSpec, label: int, num_classes: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One (1, size, size) image; a pure function of (spec, label, rng state)."""
    if label >= len(SHAPES):
        raise ConfigError(f"only {len(SHAPES)} shape classes are defined")
    tex = np.random.default_rng(spec.texture_seed)
    freqs = tex.uniform(0.15, 0.6, size=2)
    angles = tex.uniform(0, np.pi, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    phases = rng.uniform(0, 2 * np.pi, size=2)
    background = np.full((size, size), spec.background)
    for f, a, ph in zip(freqs, angles, phases):
        background += 0.5 * spec.texture_amplitude * np.sin(f * (xx * np.cos(a) + yy * np.sin(a)) + ph)

    scale = rng.uniform(*spec.scale)
    theta = np.deg2rad(rng.uniform(-spec.rotation, spec.rotation))
    margin = scale + spec.stroke + 1
    cx = rng.uniform(margin, size - 1 - margin)
    cy = rng.uniform(margin, size - 1 - margin)
    c, s = np.cos(theta), np.sin(theta)
    lx = c * (xx - cx) + s * (yy - cy)
    ly = -s * (xx - cx) + c * (yy - cy)
    dist = shape_distance(SHAPES[label], lx, ly, scale)
    coverage = np.clip(spec.stroke / 2 + 0.5 - dist, 0.0, 1.0)
    img = background * (1 - coverage) + spec.foreground * coverage
    img = img + spec.noise * rng.standard_normal((size, size))
    if spec.shortcut_present:
        r, col = patch_positions(num_classes, size, size)[label]
        img[r:r + PATCH, col:col + PATCH] = spec.shortcut_intensity
    return np.clip(img, 0.0, 1.0)[None]


def generate(num_classes: int, specs: Sequence[DomainSpec], per_class: int, seed: int, size: int = 32) -> Dataset:
    """Render ``per_class`` images for every (domain, class); each image has its own derived seed."""
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if len(specs) < 2:
        raise ConfigError("need at least two domains")
    if len({s.domain for s in specs}) != len(specs):
        raise ConfigError("domain ids must be unique")
    if any(s.shortcut_present for s in specs):
        patch_positions(num_classes, size, size)
    images, labels, domains = [], [], []
    for spec in specs:
        for k in range(num_classes):
            for i in range(per_class):
                rng = np.random.default_rng([seed, spec.domain, k, i])
                images.append(render(spec, k, num_classes, rng, size))
                labels.append(k)
                domains.append(spec.domain)
    # Pixels are stored as f32, so round-trip through it now to make the
    # in-memory dataset identical to what a file read returns.
    imgs = np.stack(images).astype(np.float32).astype(np.float64)
    return Dataset(imgs, np.array(labels, dtype=np.int64), np.array(domains, dtype=np.int64), num_classes)


def to_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    header = MAGIC + struct.pack("<7I", VERSION, n, ds.num_classes, c, h, w, len(np.unique(ds.domains)))
    rec = np.dtype([("label", "<u2"), ("domain", "<u2"), ("pixels", "<f4", (c * h * w,))])
    body = np.empty(n, dtype=rec)
    body["label"] = ds.labels
    body["domain"] = ds.domains
    body["pixels"] = ds.images.reshape(n, -1)
    return header + body.tobytes()


def from_bytes(blob: bytes) -> Dataset:
    if blob[:4] != MAGIC:
        raise ConfigError("not a dataset file (bad magic)")
    version, n, k, c, h, w, _ = struct.unpack_from("<7I", blob, 4)
    if version != VERSION:
        raise ConfigError(f"unsupported dataset version {version}")
    rec = np.dtype([("label", "<u2"), ("domain", "<u2"), ("pixels", "<f4", (c * h * w,))])
    expected = 32 + n * rec.itemsize
    if len(blob) != expected:
        raise ConfigError(f"dataset file has {len(blob)} bytes, header implies {expected}")
    body = np.frombuffer(blob, dtype=rec, count=n, offset=32)
    images = body["pixels"].astype(np.float64).reshape(n, c, h, w)
    return Dataset(images, body["label"].astype(np.int64), body["domain"].astype(np.int64), int(k))


def write_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def read_dataset(path: str | Path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


def split_80_20(ds: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified (domain, class) split: 20% (rounded) validation, rest training."""
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for d in ds.domain_ids():
        for k in range(ds.num_classes):
            idx = np.flatnonzero((ds.domains == d) & (ds.labels == k))
            if len(idx) == 0:
                continue
            if len(idx) < 5:
                raise ConfigError(f"domain {d} class {k} has {len(idx)} samples; need at least 5 to split")
            idx = rng.permutation(idx)
            n_val = (len(idx) + 2) // 5
            val_idx.append(idx[:n_val])
            train_idx.append(idx[n_val:])
    return ds.subset(np.sort(np.concatenate(train_idx))), ds.subset(np.sort(np.concatenate(val_idx)))


def default_domains(target: int = 3) -> list[DomainSpec]:
    """Four styles; every domain except ``target`` carries the shortcut patch."""
    styles = [
        dict(texture_seed=11, stroke=2.0, noise=0.05, rotation=10.0, background=0.15, texture_amplitude=0.10),
        dict(texture_seed=22, stroke=1.5, noise=0.08, rotation=20.0, background=0.25, texture_amplitude=0.15),
        dict(texture_seed=33, stroke=2.5, noise=0.04, rotation=30.0, background=0.10, texture_amplitude=0.20),
        dict(texture_seed=44, stroke=2.0, noise=0.06, rotation=25.0, background=0.20, texture_amplitude=0.12),
    ]
    return [DomainSpec(domain=i, shortcut_present=(i != target), **s) for i, s in enumerate(styles)]
