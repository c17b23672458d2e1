"""Metrics over visualization images: spatial period, cross-channel
redundancy and how visualizations drift over transfer snapshots.

Everything here is a pure function of the images it is given.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .nets import ChannelAddress

LUMA = np.array([0.299, 0.587, 0.114])


def grayscale(image) -> np.ndarray:
    """(3,H,W) or (H,W) -> float64 (H,W)."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 3:
            raise ValueError(f"expected a (3,H,W) image, got shape {a.shape}")
        return np.tensordot(LUMA, a, axes=1)
    if a.ndim != 2:
        raise ValueError(f"expected a (3,H,W) or (H,W) image, got shape {a.shape}")
    return a


# ---------------------------------------------------------------- period


@dataclass(frozen=True)
class PeriodEstimate:
    period: float
    prominence: float
    address: ChannelAddress | None = None
    iteration: int | None = None


def _power(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    if h != w:
        raise ValueError(f"period estimation needs a square image, got {h}x{w}")
    win = np.outer(np.hanning(h), np.hanning(w))
    return np.abs(np.fft.fft2((gray - gray.mean()) * win)) ** 2


def _rings(n: int) -> np.ndarray:
    f = np.abs(np.fft.fftfreq(n, 1.0 / n)).round().astype(int)
    return np.maximum(f[:, None], f[None, :])


def radial_profile(gray: np.ndarray) -> np.ndarray:
    """Hann-windowed power averaged over square rings max(|fx|,|fy|) = r.

    Index r is cycles per image along the stronger axis; r=0 is DC.
    """
    power = _power(gray)
    n = power.shape[0]
    ring = _rings(n).ravel()
    sums = np.bincount(ring, weights=power.ravel(), minlength=n // 2 + 1)
    counts = np.bincount(ring, minlength=n // 2 + 1)
    return sums[: n // 2 + 1] / counts[: n // 2 + 1]


def estimate_period(image, address: ChannelAddress | None = None, iteration: int | None = None) -> PeriodEstimate:
    gray = grayscale(image)
    n = gray.shape[0]
    if np.ptp(gray) <= 1e-9:
        raise ValueError("no dominant period: image is constant")
    power = _power(gray)
    ring = _rings(n)
    prof = (np.bincount(ring.ravel(), weights=power.ravel()) / np.bincount(ring.ravel()))[1 : n // 2 + 1]
    if not np.any(prof > 0):
        raise ValueError("no dominant period: spectrum is empty")
    k = int(np.argmax(prof))
    r = float(k + 1)
    # sub-bin refinement: log-parabola through the strongest cell of the
    # peak ring and its neighbors along that cell's dominant axis
    cell = np.unravel_index(np.argmax(np.where(ring == k + 1, power, -1.0)), power.shape)
    fy, fx = (int(np.fft.fftfreq(n, 1.0 / n)[c]) for c in cell)
    axis = 1 if abs(fx) >= abs(fy) else 0
    step = np.zeros(2, int)
    step[axis] = 1 if (fx if axis else fy) >= 0 else -1
    lo = power[tuple((np.array(cell) - step) % n)]
    hi = power[tuple((np.array(cell) + step) % n)]
    if r < n // 2 and lo > 0 and hi > 0:
        a, b, c = np.log([lo, power[cell], hi])
        denom = a - 2 * b + c
        if denom < 0:
            r += float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
    period = float(np.clip(n / r, 2.0, n))
    med = float(np.median(prof))
    prominence = float(prof[k] / med) if med > 0 else math.inf
    return PeriodEstimate(period, prominence, address, iteration)


@dataclass(frozen=True)
class StabilityRow:
    address: ChannelAddress
    period_pre: float
    period_post: float
    ratio: float
    prominence_pre: float
    prominence_post: float


@dataclass
class StabilityReport:
    rows: list[StabilityRow]
    excluded: list[ChannelAddress]
    median_abs_log_ratio: float | None

    def summary(self) -> dict:
        return {
            "channels": len(self.rows),
            "excluded": len(self.excluded),
            "median_abs_log_ratio": self.median_abs_log_ratio,
        }


def scale_stability(
    pre: Mapping[ChannelAddress, np.ndarray],
    post: Mapping[ChannelAddress, np.ndarray],
    addresses: Sequence[ChannelAddress] | None = None,
    min_prominence: float = 4.0,
) -> StabilityReport:
    """Pair period estimates of the same channels before and after transfer.

    Channels whose spectrum peak is weaker than ``min_prominence`` in either
    image are excluded and counted.
    """
    if addresses is None:
        addresses = sorted(set(pre) & set(post))
    addresses = [a for a in addresses if a in pre and a in post]
    if not addresses:
        raise ValueError("pre and post snapshots share no channel addresses")
    rows, excluded = [], []
    for addr in addresses:
        try:
            a, b = estimate_period(pre[addr], addr), estimate_period(post[addr], addr)
        except ValueError:
            excluded.append(addr)
            continue
        if a.prominence < min_prominence or b.prominence < min_prominence:
            excluded.append(addr)
            continue
        rows.append(StabilityRow(addr, a.period, b.period, b.period / a.period, a.prominence, b.prominence))
    med = float(np.median([abs(math.log(r.ratio)) for r in rows])) if rows else None
    return StabilityReport(rows, excluded, med)


# ---------------------------------------------------------------- redundancy


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    addresses: list
    clusters: list[list] = field(default_factory=list)


def _max_shifted_ncc(a: np.ndarray, b: np.ndarray, max_shift: int) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    # circular cross-correlation, corr[s] = sum_x a[x] b[x - s]
    corr = np.real(np.fft.ifft2(np.fft.fft2(a) * np.conj(np.fft.fft2(b))))
    idx = np.r_[0 : max_shift + 1, -max_shift:0]
    window = corr[np.ix_(idx % a.shape[0], idx % a.shape[1])]
    return float(window.max() / (na * nb))


def channel_redundancy(
    images: Sequence[np.ndarray],
    addresses: Sequence | None = None,
    max_shift: int = 8,
    threshold: float = 0.9,
) -> SimilarityMatrix:
    """Pairwise max normalized cross-correlation over shifts up to
    ``max_shift`` px (wrapping), plus groups of channels linked above
    ``threshold``."""
    if len(images) < 2:
        raise ValueError("need at least two visualizations to compare")
    grays = [grayscale(i) for i in images]
    if len({g.shape for g in grays}) != 1:
        raise ValueError(f"visualization extents differ: {sorted({g.shape for g in grays})}")
    grays = [g - g.mean() for g in grays]
    n = len(grays)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = np.clip(_max_shifted_ncc(grays[i], grays[j], max_shift), -1.0, 1.0)
    addresses = list(addresses) if addresses is not None else list(range(n))
    if len(addresses) != n:
        raise ValueError("one address per image required")
    _, labels = connected_components(sim > threshold, directed=False)
    clusters = []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        if len(members) > 1:
            clusters.append([addresses[m] for m in members])
    return SimilarityMatrix(sim, addresses, clusters)


# ---------------------------------------------------------------- timeline


def rgb_to_hsv(image) -> np.ndarray:
    """(3,H,W) rgb in [0,1] -> (3,H,W) hsv, hue in [0,1)."""
    r, g, b = np.asarray(image, dtype=np.float64)
    v = np.maximum(np.maximum(r, g), b)
    c = v - np.minimum(np.minimum(r, g), b)
    s = np.where(v > 0, c / np.where(v > 0, v, 1), 0.0)
    safe = np.where(c > 0, c, 1)
    h = np.where(
        v == r,
        ((g - b) / safe) % 6,
        np.where(v == g, (b - r) / safe + 2, (r - g) / safe + 4),
    )
    h = np.where(c > 0, h / 6.0, 0.0) % 1.0
    return np.stack([h, s, v])


def rms(a) -> float:
    return float(np.sqrt(np.mean(np.square(a))))


def color_change(a, b) -> tuple[float, float]:
    """(hue/saturation change, value-plane change) between two images."""
    ha, hb = rgb_to_hsv(a), rgb_to_hsv(b)
    dh = np.abs(ha[0] - hb[0])
    dh = np.minimum(dh, 1.0 - dh)
    chroma = rms(np.stack([dh, ha[1] - hb[1]]))
    return chroma, rms(ha[2] - hb[2])


@dataclass
class ChannelTimeline:
    address: object
    changes: list[float]  # between consecutive snapshots
    total: float
    early_share: float | None
    color_only: bool
    chroma_change: float
    value_change: float


@dataclass
class AdaptationProfile:
    iterations: list[int]
    channels: list[ChannelTimeline]
    by_layer: dict[str, list[float]]  # mean change per consecutive pair
    layer_order: list[str]


def adaptation_timeline(
    grid: Mapping[int, Mapping],
    early_until: int = 150,
    color_factor: float = 5.0,
    layer_order: Sequence[str] | None = None,
) -> AdaptationProfile:
    """``grid`` maps snapshot iteration -> {address: image}.

    Per channel: RMS change between consecutive snapshots, the share of the
    summed change that happens by ``early_until``, and whether the first-to-
    last change is mostly in hue/saturation rather than the value plane.
    """
    iterations = sorted(grid)
    if len(iterations) < 3:
        raise ValueError(f"need at least 3 snapshots, got {len(iterations)}")
    addresses = sorted(set.intersection(*(set(grid[i]) for i in iterations)), key=str)
    channels = []
    for addr in addresses:
        imgs = [np.asarray(grid[i][addr], dtype=np.float64) for i in iterations]
        changes = [rms(b - a) for a, b in zip(imgs, imgs[1:])]
        total = float(sum(changes))
        early = sum(c for c, it in zip(changes, iterations[1:]) if it <= early_until)
        share = early / total if total > 0 else None
        chroma, value = color_change(imgs[0], imgs[-1]) if imgs[0].ndim == 3 else (0.0, rms(imgs[-1] - imgs[0]))
        color_only = chroma > color_factor * value and chroma > 0
        channels.append(ChannelTimeline(addr, changes, total, share, bool(color_only), chroma, value))
    layer_of = lambda a: getattr(a, "layer", str(a))  # noqa: E731
    layers = list(layer_order) if layer_order else sorted({layer_of(c.address) for c in channels})
    by_layer = {}
    for layer in layers:
        rows = [c.changes for c in channels if layer_of(c.address) == layer]
        if rows:
            by_layer[layer] = [float(v) for v in np.mean(rows, axis=0)]
    return AdaptationProfile(iterations, channels, by_layer, [l for l in layers if l in by_layer])


# ---------------------------------------------------------------- reports


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, ChannelAddress):
        return str(v)
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return v


def write_csv(rows: Sequence, path) -> Path:
    """One row per dataclass (or dict); columns in field order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # shallow: asdict would turn nested addresses into dicts
    dicts = [r if isinstance(r, dict) else {f.name: getattr(r, f.name) for f in fields(r)} for r in rows]
    with path.open("w", newline="") as fh:
        if not dicts:
            return path
        writer = csv.DictWriter(fh, fieldnames=list(dicts[0]))
        writer.writeheader()
        for d in dicts:
            writer.writerow({k: _cell(v) for k, v in d.items()})
    return path


def _jsonable(v):
    if isinstance(v, ChannelAddress):
        return str(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        return None if not math.isfinite(v) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(summary: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return path


def period_rows(estimates: Sequence[PeriodEstimate]) -> list[dict]:
    return [
        {"address": str(e.address), "iteration": e.iteration, "period": e.period, "prominence": e.prominence}
        for e in estimates
    ]


def timeline_rows(profile: AdaptationProfile) -> list[dict]:
    rows = []
    for c in profile.channels:
        rows.append(
            {
                "address": str(c.address),
                "total_change": c.total,
                "early_share": c.early_share,
                "color_only": c.color_only,
                "chroma_change": c.chroma_change,
                "value_change": c.value_change,
                "changes": c.changes,
            }
        )
    return rows


def redundancy_summary(m: SimilarityMatrix) -> dict:
    n = len(m.addresses)
    off = m.values[~np.eye(n, dtype=bool)]
    return {
        "addresses": [str(a) for a in m.addresses],
        "matrix": m.values,
        "mean_offdiagonal": float(off.mean()) if off.size else None,
        "clusters": [[str(a) for a in c] for c in m.clusters],
    }
