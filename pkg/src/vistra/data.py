"""Procedural datasets.

* ``source-shapes``: 10 classes of fine-grained textures and scattered
  shapes (the pretraining domain).
* ``target-faces``: cartoon faces with 8 binary attributes that are exactly
  the rendering switches.
* ``small-A`` / ``small-B``: blossom classes at 17x80 and 31x200 samples.

Every sample is a deterministic function of ``(spec.seed, index)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

KINDS = ("source-shapes", "target-faces", "small-A", "small-B")

FACE_ATTRIBUTES = (
    "eyes_open",
    "smiling",
    "glasses",
    "dark_hair",
    "long_hair",
    "beard",
    "hat",
    "bright_background",
)

SHAPE_CLASSES = (
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "antidiagonal_stripes",
    "checkerboard",
    "dot_lattice",
    "rings",
    "grid_lines",
    "scattered_squares",
    "wavy_stripes",
)

_ARITY = {"source-shapes": len(SHAPE_CLASSES), "target-faces": len(FACE_ATTRIBUTES), "small-A": 17, "small-B": 31}
_DEFAULT_COUNT = {"source-shapes": 10_000, "target-faces": 4_000, "small-A": 17 * 80, "small-B": 31 * 200}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    count: int | None = None
    seed: int = 0
    extent: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.count is None:
            object.__setattr__(self, "count", _DEFAULT_COUNT[self.kind])
        if self.count <= 0:
            raise ValueError(f"sample count must be positive, got {self.count}")
        if self.extent < 16:
            raise ValueError(f"image extent too small: {self.extent}")

    @property
    def arity(self) -> int:
        """Class count, or attribute count for ``target-faces``."""
        return _ARITY[self.kind]

    @property
    def multilabel(self) -> bool:
        return self.kind == "target-faces"


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: int | np.ndarray


class Dataset:
    """Images held as uint8 (quantized to 1/255) to keep 10k samples small."""

    def __init__(self, spec: DatasetSpec, images: np.ndarray, labels: np.ndarray):
        self.spec = spec
        self.images = images
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        label = self.labels[i]
        label = label.copy() if self.spec.multilabel else int(label)
        return Sample(self.images[i].astype(np.float32) / 255.0, label)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices)
        x = self.images[idx].astype(np.float32) / np.float32(255.0)
        return x, self.labels[idx]

    def split(self, val_fraction: float = 0.1, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic (train, validation) index split."""
        n = len(self)
        perm = np.random.default_rng(self.spec.seed if seed is None else seed).permutation(n)
        k = int(round(n * val_fraction))
        return np.sort(perm[k:]), np.sort(perm[:k])


def generate(spec: DatasetSpec) -> Dataset:
    n, e = spec.count, spec.extent
    images = np.empty((n, 3, e, e), dtype=np.uint8)
    stream = KINDS.index(spec.kind)
    if spec.multilabel:
        labels = np.empty((n, spec.arity), dtype=np.uint8)
    else:
        # exactly balanced classes, deterministically shuffled
        labels = np.random.default_rng([spec.seed, stream, 0x5EED]).permutation(np.arange(n) % spec.arity)
    grid = _grid(e)
    for i in range(n):
        rng = np.random.default_rng([spec.seed, stream, i])
        if spec.kind == "target-faces":
            attrs = rng.integers(0, 2, size=spec.arity)
            labels[i] = attrs
            img = render_face(attrs, rng, grid)
        elif spec.kind == "source-shapes":
            img = render_shape(int(labels[i]), rng, grid)
        else:
            petals = 6 if spec.kind == "small-A" else 8
            img = render_blossom(int(labels[i]), petals, rng, grid)
        images[i] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Dataset(spec, images, labels)


def batches(indices, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    """Shuffle ``indices`` (or ``range(indices)``) and cut into batches; the
    final partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    idx = np.arange(indices) if np.isscalar(indices) else np.asarray(indices)
    order = np.random.default_rng(epoch_seed).permutation(idx)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def export(dataset: Dataset, directory) -> Path:
    """Write PNGs plus ``labels.json`` = ``{"samples": [{"file", "label"}]}``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        name = f"{i:06d}.png"
        Image.fromarray(dataset.images[i].transpose(1, 2, 0)).save(out / name)
        label = dataset.labels[i]
        rows.append({"file": name, "label": label.tolist() if dataset.spec.multilabel else int(label)})
    index = {"kind": dataset.spec.kind, "samples": rows}
    if dataset.spec.multilabel:
        index["attributes"] = list(FACE_ATTRIBUTES)
    (out / "labels.json").write_text(json.dumps(index, indent=1))
    return out


# ---------------------------------------------------------------- rendering

def _grid(e: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:e, 0:e].astype(np.float32)
    return yy + 0.5, xx + 0.5


def _fill(img: np.ndarray, mask: np.ndarray, color) -> None:
    img[:, mask] = np.asarray(color, dtype=np.float32)[:, None]


def _contrasting_pair(rng) -> tuple[np.ndarray, np.ndarray]:
    while True:
        a, b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        if abs(a.mean() - b.mean()) > 0.3:
            return a, b


def render_shape(label: int, rng, grid) -> np.ndarray:
    yy, xx = grid
    e = yy.shape[0]
    fg, bg = _contrasting_pair(rng)
    period = rng.uniform(4.0, 8.0)
    phase = rng.uniform(0, 2 * np.pi, 2)
    k = 2 * np.pi / period
    name = SHAPE_CLASSES[label]
    if name == "horizontal_stripes":
        mask = np.sin(k * yy + phase[0]) > 0
    elif name == "vertical_stripes":
        mask = np.sin(k * xx + phase[0]) > 0
    elif name == "diagonal_stripes":
        mask = np.sin(k * (xx + yy) / np.sqrt(2) + phase[0]) > 0
    elif name == "antidiagonal_stripes":
        mask = np.sin(k * (xx - yy) / np.sqrt(2) + phase[0]) > 0
    elif name == "checkerboard":
        mask = np.sin(k * xx + phase[0]) * np.sin(k * yy + phase[1]) > 0
    elif name == "dot_lattice":
        mask = np.cos(k * xx + phase[0]) + np.cos(k * yy + phase[1]) > 1.2
    elif name == "rings":
        cy, cx = rng.uniform(-0.25 * e, 1.25 * e, 2)
        mask = np.sin(k * np.hypot(yy - cy, xx - cx) + phase[0]) > 0
    elif name == "grid_lines":
        mask = (np.abs(np.sin(k * xx / 2 + phase[0])) < 0.3) | (np.abs(np.sin(k * yy / 2 + phase[1])) < 0.3)
    elif name == "scattered_squares":
        mask = np.zeros_like(yy, dtype=bool)
        for _ in range(int(rng.integers(14, 24))):
            s = rng.uniform(3, 6)
            y0, x0 = rng.uniform(0, e - s, 2)
            mask |= (yy >= y0) & (yy < y0 + s) & (xx >= x0) & (xx < x0 + s)
    else:  # wavy_stripes
        amp, q = rng.uniform(1.5, 3.0), rng.uniform(10, 20)
        mask = np.sin(k * (yy + amp * np.sin(2 * np.pi * xx / q + phase[1])) + phase[0]) > 0
    img = np.empty((3, e, e), np.float32)
    img[:] = bg[:, None, None]
    _fill(img, mask, fg)
    img += rng.normal(0, 0.03, img.shape).astype(np.float32)
    return img


_SKIN = np.array([0.87, 0.69, 0.55])
_HATS = np.array([[0.8, 0.1, 0.1], [0.1, 0.3, 0.8], [0.1, 0.6, 0.2], [0.6, 0.2, 0.7]])


def render_face(attrs, rng, grid) -> np.ndarray:
    eyes_open, smiling, glasses, dark_hair, long_hair, beard, hat, bright_bg = (bool(a) for a in attrs)
    yy, xx = grid
    e = yy.shape[0]
    s = e / 64.0
    if bright_bg:
        bg = rng.uniform(0.7, 0.95) + rng.uniform(-0.05, 0.05, 3)
    else:
        bg = rng.uniform(0.05, 0.3) + rng.uniform(-0.05, 0.05, 3)
    img = np.empty((3, e, e), np.float32)
    img[:] = bg[:, None, None]

    cx, cy = (32 + rng.uniform(-2, 2)) * s, (34 + rng.uniform(-2, 2)) * s
    rx, ry = rng.uniform(15, 17) * s, rng.uniform(19, 21) * s
    skin = np.clip(_SKIN * rng.uniform(0.8, 1.1) + rng.uniform(-0.04, 0.04, 3), 0, 1)
    if dark_hair:
        hair = rng.uniform(0.05, 0.18) + rng.uniform(0, 0.05, 3) * np.array([1.0, 0.6, 0.3])
    else:
        hair = np.array([0.9, 0.75, 0.35]) + rng.uniform(-0.06, 0.06, 3)

    def ellipse(x0, y0, ax, ay):
        return ((xx - x0) / ax) ** 2 + ((yy - y0) / ay) ** 2 < 1

    if long_hair:
        _fill(img, ellipse(cx, cy + 4 * s, rx + 6 * s, ry + 6 * s) & (yy < cy + ry + 4 * s), hair)
    face = ellipse(cx, cy, rx, ry)
    _fill(img, face, skin)
    _fill(img, ellipse(cx, cy, rx + 2 * s, ry + 2 * s) & (yy < cy - 0.45 * ry), hair)
    if beard:
        _fill(img, face & (yy > cy + 4 * s), hair * 0.8)
    if hat:
        band = (yy > cy - ry - 7 * s) & (yy < cy - 0.55 * ry) & (np.abs(xx - cx) < rx + 3 * s)
        _fill(img, band, _HATS[rng.integers(len(_HATS))])

    ey = cy - 4 * s
    for ex in (cx - 7 * s, cx + 7 * s):
        if eyes_open:
            _fill(img, ellipse(ex, ey, 3.5 * s, 2.6 * s), (0.97, 0.97, 0.97))
            _fill(img, np.hypot(xx - ex, yy - ey) < 1.6 * s, (0.1, 0.1, 0.15))
        else:
            _fill(img, (np.abs(yy - ey) < 0.9 * s) & (np.abs(xx - ex) < 3.5 * s), (0.15, 0.1, 0.1))
        if glasses:
            _fill(img, np.abs(np.hypot(xx - ex, yy - ey) - 5.0 * s) < 1.0 * s, (0.05, 0.05, 0.05))
    if glasses:
        _fill(img, (np.abs(yy - ey) < 0.8 * s) & (np.abs(xx - cx) < 2.2 * s), (0.05, 0.05, 0.05))

    my, mw = cy + 9 * s, 6 * s
    u = (xx - cx) / mw
    bend = 3.0 * s * (1 - u**2)
    curve = my + bend if smiling else my - bend
    _fill(img, (np.abs(u) <= 1) & (np.abs(yy - curve) < 1.2 * s), (0.55, 0.1, 0.12))

    img += rng.normal(0, 0.02, img.shape).astype(np.float32)
    return img


_PETALS = np.array([[0.9, 0.2, 0.3], [0.95, 0.85, 0.2], [0.6, 0.3, 0.85], [0.95, 0.95, 0.95]])


def render_blossom(label: int, petal_kinds: int, rng, grid) -> np.ndarray:
    """Petal count and palette encode the class."""
    yy, xx = grid
    e = yy.shape[0]
    s = e / 64.0
    petals = 3 + label % petal_kinds
    palette = _PETALS[label // petal_kinds]
    img = np.empty((3, e, e), np.float32)
    img[:] = (np.array([0.15, 0.35, 0.12]) * rng.uniform(0.5, 1.3) + rng.uniform(-0.05, 0.05, 3))[:, None, None]
    cx, cy = (32 + rng.uniform(-6, 6)) * s, (32 + rng.uniform(-6, 6)) * s
    radius = rng.uniform(17, 24) * s
    theta = np.arctan2(yy - cy, xx - cx) + rng.uniform(0, 2 * np.pi)
    r = np.hypot(yy - cy, xx - cx)
    outline = radius * (0.3 + 0.7 * np.abs(np.cos(petals * theta / 2)) ** 0.7)
    _fill(img, r < outline, np.clip(palette * rng.uniform(0.85, 1.1), 0, 1))
    _fill(img, r < 0.22 * radius, (0.55, 0.35, 0.05))
    img += rng.normal(0, 0.03, img.shape).astype(np.float32)
    return img
