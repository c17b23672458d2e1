"""Channel visualization by gradient ascent on a spectral image parametrization."""

from __future__ import annotations

import json
import math
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .nets import ChannelAddress, ModelGraph, channel_objective, forward_to_layer
from .tensor import AdamState, NonFiniteError, Tape, Tensor, adam_step, ops

# Cholesky factor of an assumed RGB covariance (unit variances; correlations
# 0.87 R-G, 0.74 R-B, 0.89 G-B). Fixed data, not fitted at runtime.
COLOR_CHOLESKY = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.87, 0.4931, 0.0],
        [0.74, 0.4993, 0.4506],
    ],
    dtype=np.float32,
)


class VisError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def frequency_scale(h: int, w: int, alpha: float = 1.0) -> np.ndarray:
    """``max(|f|, 1/extent) ** -alpha`` over the full (h, w) DFT grid."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    f = np.sqrt(fy * fy + fx * fx)
    return (np.maximum(f, 1.0 / max(h, w)) ** -alpha).astype(np.float32)


@dataclass
class SpectralImageParam:
    """Per-plane complex spectrum stored as (3, H, W, 2) real pairs.

    Only the real part of the inverse transform is kept, which is the same as
    rendering the Hermitian-symmetric part of the spectrum.
    """

    coeffs: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        c = self.coeffs
        if c.ndim != 4 or c.shape[0] != 3 or c.shape[-1] != 2:
            raise ValueError(f"spectrum must be shaped (3, H, W, 2), got {c.shape}")
        if not (ops.is_power_of_two(c.shape[1]) and ops.is_power_of_two(c.shape[2])):
            raise ValueError(f"image extents must be powers of two, got {c.shape[1]}x{c.shape[2]}")

    @property
    def extent(self) -> tuple[int, int]:
        return self.coeffs.shape[1], self.coeffs.shape[2]

    @classmethod
    def zeros(cls, extent: int, alpha: float = 1.0) -> "SpectralImageParam":
        return cls(np.zeros((3, extent, extent, 2), np.float32), alpha)

    @classmethod
    def random(cls, extent: int, rng: np.random.Generator, std: float = 0.01, alpha: float = 1.0) -> "SpectralImageParam":
        return cls(rng.normal(0.0, std, (3, extent, extent, 2)).astype(np.float32), alpha)


def render_tensor(coeffs: Tensor, scale: np.ndarray, squash: bool = True) -> Tensor:
    """(3, H, W, 2) spectrum -> (1, 3, H, W) image."""
    h, w = coeffs.shape[1], coeffs.shape[2]
    spec = ops.mul(coeffs, scale[None, :, :, None])
    planes = ops.real_part(ops.ifft2(spec))
    img = ops.conv2d(ops.reshape(planes, (1, 3, h, w)), COLOR_CHOLESKY.reshape(3, 3, 1, 1))
    return ops.sigmoid(img) if squash else img


def render(param: SpectralImageParam, squash: bool = True) -> np.ndarray:
    """(3, H, W) image in [0, 1] (or the pre-squash planes)."""
    scale = frequency_scale(*param.extent, param.alpha)
    return render_tensor(Tensor(param.coeffs), scale, squash).data[0]


# ---------------------------------------------------------------- transforms

@dataclass(frozen=True)
class TransformSpec:
    jitter: int = 4
    scales: tuple[float, ...] = (0.95, 1.0, 1.05)
    enabled: bool = True

    def to_dict(self) -> dict:
        return {"jitter": self.jitter, "scales": list(self.scales), "enabled": self.enabled}


def _bilinear_matrix(n: int, s: float) -> np.ndarray:
    """(n, n) matrix resampling a length-n signal zoomed by ``s`` about its center."""
    m = np.zeros((n, n), np.float32)
    c = (n - 1) / 2.0
    for i in range(n):
        src = min(max((i - c) / s + c, 0.0), n - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def apply_transforms(img: Tensor, spec: TransformSpec, rng: np.random.Generator) -> Tensor:
    if not spec.enabled:
        return img
    j = spec.jitter
    dy, dx = (int(v) for v in rng.integers(-j, j + 1, size=2))
    s = float(spec.scales[rng.integers(len(spec.scales))])
    out = ops.roll(img, (dy, dx)) if (dy or dx) else img
    if s != 1.0:
        h, w = img.shape[-2], img.shape[-1]
        out = ops.separable_resample(out, _bilinear_matrix(h, s), _bilinear_matrix(w, s))
    return out


# ---------------------------------------------------------------- jobs

@dataclass(frozen=True)
class VisJob:
    address: ChannelAddress
    checkpoint: str = ""  # provenance label of the snapshot
    steps: int = 256
    lr: float = 0.05
    transforms: TransformSpec = field(default_factory=TransformSpec)
    seed: int = 0
    alpha: float = 1.0
    init_std: float = 0.01

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError(f"step count must be positive, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    def echo(self) -> dict:
        d = asdict(self)
        d["address"] = str(self.address)
        d["transforms"] = self.transforms.to_dict()
        return d

    @property
    def key(self) -> str:
        """Filesystem-safe provenance key."""
        layer = self.address.layer.replace("/", "-")
        tag = zlib.crc32(json.dumps(self.echo(), sort_keys=True).encode()) & 0xFFFFFFFF
        return f"{self.checkpoint or 'model'}__{layer}__c{self.address.channel}__s{self.seed}__{tag:08x}"

    def with_(self, **kw) -> "VisJob":
        return VisJob(**{**self.__dict__, **kw})


@dataclass
class VisResult:
    image: np.ndarray  # (3, H, W) in [0, 1]
    trace: list[float]
    best: float
    best_step: int
    untransformed: float  # objective of the best image without transforms
    job: dict
    duration: float = 0.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def _job_rng(job: VisJob) -> np.random.Generator:
    return np.random.default_rng(job.seed)


def maximize_channel(model: ModelGraph, job: VisJob) -> VisResult:
    """Adam ascent on the average-pooled channel activation of the rendered,
    transformed image. Returns the best image seen.

    While no unit of the channel is active the relu passes no gradient, so
    for those steps the ascent follows the pre-activation mean instead. The
    trace always records the true (post-relu) objective.
    """
    addr = model.resolve(job.address)
    extent = model.input_shape[-1]
    start = time.perf_counter()
    rng = _job_rng(job)
    param = SpectralImageParam.random(extent, rng, job.init_std, job.alpha)
    scale = frequency_scale(extent, extent, job.alpha)
    state = AdamState(lr=job.lr)
    coeffs = {"spectrum": param.coeffs}
    trace: list[float] = []
    best, best_step, best_img = -math.inf, 0, None
    for step in range(job.steps):
        c = Tensor(coeffs["spectrum"], requires_grad=True)
        with Tape() as tape:
            img = render_tensor(c, scale)
            pre = forward_to_layer(model, apply_transforms(img, job.transforms, rng), addr, pre_activation=True)
            value = ops.mean(ops.relu(pre))
            v = value.item()
            if not math.isfinite(v):
                raise VisError(f"objective became {v} at step {step} for {addr}", step)
            target = value if v > 0 else ops.mean(pre)
            try:
                grads = tape.backward(target)
            except NonFiniteError as e:
                raise VisError(f"non-finite gradient at step {step} for {addr}: {e}", step) from None
        trace.append(v)
        if v > best:
            best, best_step, best_img = v, step, img.data[0].copy()
        adam_step(coeffs, {"spectrum": -grads[c]}, state)
    untransformed = channel_objective(model, addr)(best_img[None]).item()
    return VisResult(best_img, trace, best, best_step, untransformed, job.echo(), time.perf_counter() - start)


# ---------------------------------------------------------------- persistence

def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_result(result: VisResult, directory, key: str) -> Path:
    """``<key>.png`` plus ``<key>.json``; the JSON lands last so its presence
    marks a complete cell."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    png = d / f"{key}.png"
    tmp = png.with_name(png.name + ".tmp")
    Image.fromarray(to_uint8(result.image)).save(tmp, format="PNG")
    os.replace(tmp, png)
    record = {
        "job": result.job,
        "best": result.best,
        "best_step": result.best_step,
        "untransformed": result.untransformed,
        "trace": result.trace,
        "trace_summary": {"first": result.trace[0], "last": result.trace[-1], "max": max(result.trace)},
        "library_version": __version__,
    }
    _atomic_write(d / f"{key}.json", json.dumps(record, indent=1, sort_keys=True).encode())
    return png


def load_result(directory, key: str) -> VisResult | None:
    d = Path(directory)
    png, meta = d / f"{key}.png", d / f"{key}.json"
    if not (png.exists() and meta.exists()):
        return None
    rec = json.loads(meta.read_text())
    img = np.asarray(Image.open(png).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    return VisResult(img, rec["trace"], rec["best"], rec["best_step"], rec["untransformed"], rec["job"])


@dataclass
class MatrixReport:
    results: dict  # (snapshot label, ChannelAddress) -> VisResult
    errors: dict  # (snapshot label, ChannelAddress) -> str
    computed: list
    skipped: list


def visualize_matrix(
    snapshots: list[tuple[str, ModelGraph]],
    addresses: list[ChannelAddress],
    template: VisJob,
    out_dir,
    workers: int = 1,
    force: bool = False,
    on_cell=None,
) -> MatrixReport:
    """One visualization per (snapshot, address). Cells whose files already
    exist are loaded instead of recomputed unless ``force``; a failing cell
    is recorded in ``errors`` and the rest of the grid continues."""
    report = MatrixReport({}, {}, [], [])
    cells = []
    for label, model in snapshots:
        for addr in addresses:
            job = template.with_(address=addr, checkpoint=label)
            cells.append((label, addr, model, job))

    def run(cell):
        label, addr, model, job = cell
        cached = None if force else load_result(out_dir, job.key)
        if cached is not None:
            return label, addr, job, cached, None, False
        try:
            res = maximize_channel(model, job)
            save_result(res, out_dir, job.key)
            return label, addr, job, res, None, True
        except Exception as e:  # noqa: BLE001 - per-cell isolation
            return label, addr, job, None, f"{type(e).__name__}: {e}", True

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, cells))
    else:
        outcomes = [run(c) for c in cells]
    for label, addr, job, res, err, fresh in outcomes:
        if err is not None:
            report.errors[(label, addr)] = err
        else:
            report.results[(label, addr)] = res
            (report.computed if fresh else report.skipped).append(job.key)
        if on_cell is not None:
            on_cell(label, addr, job, res, err)
    return report


def cell_path(out_dir, job: VisJob) -> Path:
    return Path(out_dir) / f"{job.key}.png"
