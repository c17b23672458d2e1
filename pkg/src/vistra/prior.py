"""Visualization under a learned generative prior, and weight ablation.

The objective for latent ``w`` is::

    F_z(downscale(G(w))) - lam * ||w - w_hat||^2

ascended from ``w = w_hat``. The penalty is applied as a proximal step
(exact minimizer of the quadratic around the gradient step), which is the
plain SGD update for small ``lr * lam`` and stays stable when the penalty
is stiff.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import os
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .checkpoint import Checkpoint
from .data import Dataset, batches
from .nets import ChannelAddress, GeneratorConfig, ModelGraph, build_encoder, build_generator, channel_objective, encode, generate
from .tensor import AdamState, NonFiniteError, Tape, Tensor, adam_step, ops
from .vis import to_uint8

EVAL_NOISE_SEED = 2**31 - 1


class PriorError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


# ---------------------------------------------------------------- autoencoder

@dataclass
class AutoEncoder:
    generator: ModelGraph
    encoder: ModelGraph
    steps_trained: int = 0

    def checkpoints(self) -> tuple[Checkpoint, Checkpoint]:
        return (
            Checkpoint.from_model(self.generator, self.steps_trained),
            Checkpoint.from_model(self.encoder, self.steps_trained),
        )

    @classmethod
    def from_checkpoints(cls, gen: Checkpoint, enc: Checkpoint) -> "AutoEncoder":
        if gen.iteration != enc.iteration:
            raise ValueError(f"generator ({gen.iteration}) and encoder ({enc.iteration}) checkpoints disagree")
        return cls(gen.model(), enc.model(), gen.iteration)


def train_autoencoder(
    dataset: Dataset,
    config: GeneratorConfig = GeneratorConfig(),
    steps: int = 1000,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    progress=None,
) -> tuple[AutoEncoder, list[float]]:
    """Fit decoder ``G`` and encoder jointly on pixel MSE, with ``G``'s noise
    inputs sampled every step."""
    if config.extent != dataset.images.shape[-1]:
        raise ValueError(f"generator extent {config.extent} does not match dataset extent {dataset.images.shape[-1]}")
    gen = build_generator(config, seed=seed)
    enc = build_encoder(config, seed=seed + 1)
    gen_state, enc_state = AdamState(lr=lr), AdamState(lr=lr)
    noise = np.random.default_rng([seed, 0xAE])
    stream = itertools.chain.from_iterable(batches(len(dataset), batch_size, [seed, e]) for e in itertools.count())
    losses = []
    for step in range(1, steps + 1):
        x, _ = dataset.batch(next(stream))
        gp = {f"g:{k}": Tensor(v, requires_grad=True) for k, v in gen.params.items()}
        ep = {f"e:{k}": Tensor(v, requires_grad=True) for k, v in enc.params.items()}
        with Tape() as tape:
            code = encode(enc, x, params={k[2:]: t for k, t in ep.items()})
            recon = generate(gen, code, noise, params={k[2:]: t for k, t in gp.items()})
            diff = ops.sub(recon, x)
            loss = ops.mean(ops.mul(diff, diff))
            value = loss.item()
            if not math.isfinite(value):
                raise PriorError(f"autoencoder training diverged at step {step}", step)
            grads = tape.backward(loss)
        adam_step(gen.params, {k[2:]: grads[t] for k, t in gp.items()}, gen_state)
        adam_step(enc.params, {k[2:]: grads[t] for k, t in ep.items()}, enc_state)
        losses.append(value)
        if progress is not None:
            progress(step, value)
    return AutoEncoder(gen, enc, steps), losses


@dataclass(frozen=True)
class LatentCenter:
    w: np.ndarray
    provenance: dict

    def __post_init__(self):
        if not np.all(np.isfinite(self.w)):
            raise ValueError("latent center has non-finite values")


def _params_digest(model: ModelGraph) -> str:
    h = hashlib.sha256(model.digest.encode())
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes())
    return h.hexdigest()


def fit_latent_center(ae: AutoEncoder, dataset: Dataset, indices=None, batch_size: int = 100) -> LatentCenter:
    """Mean of the encoder's codes over ``dataset`` (float64 accumulation)."""
    if ae.steps_trained <= 0:
        raise ValueError("encoder is untrained; train the autoencoder before fitting the latent center")
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        raise ValueError("cannot fit a latent center on zero samples")
    total = np.zeros(ae.generator.input_shape[0], np.float64)
    idx = np.sort(idx)  # the sum then does not depend on index order
    for i in range(0, len(idx), batch_size):
        x, _ = dataset.batch(idx[i : i + batch_size])
        total += encode(ae.encoder, x).data.astype(np.float64).sum(axis=0)
    w = (total / len(idx)).astype(np.float32)
    prov = {
        "dataset": dataset.spec.kind,
        "dataset_seed": dataset.spec.seed,
        "samples": int(len(idx)),
        "encoder_digest": _params_digest(ae.encoder),
    }
    return LatentCenter(w, prov)


# ---------------------------------------------------------------- prior ascent

@dataclass(frozen=True)
class PriorJob:
    address: ChannelAddress
    lam: float = 0.1
    steps: int = 300
    lr: float = 0.05
    seed: int = 0
    eval_noise_seed: int = EVAL_NOISE_SEED

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be a finite non-negative number, got {self.lam}")
        if self.steps <= 0 or self.lr <= 0:
            raise ValueError("steps and step size must be positive")

    def echo(self) -> dict:
        d = asdict(self)
        d["address"] = str(self.address)
        return d

    def with_(self, **kw) -> "PriorJob":
        return PriorJob(**{**self.__dict__, **kw})


@dataclass
class PriorResult:
    w: np.ndarray
    image: np.ndarray  # G(w*) with the evaluation noise seed, (3, H, W)
    trace: list[float]  # exact objective at each step, before the update
    activation: list[float]
    penalty: list[float]
    final_objective: float  # at w* with evaluation noise
    distance: float  # ||w* - w_hat||
    job: dict


def downscale(img: Tensor, extent: int) -> Tensor:
    """Average-pool resize of square NCHW images to ``extent``."""
    size = img.shape[-1]
    if size == extent:
        return img
    if size % extent:
        raise ValueError(f"cannot downscale {size} to {extent} by an integer factor")
    return ops.avg_pool2d(img, size // extent)


def prior_objective(recog: ModelGraph, generator: ModelGraph, w_hat: np.ndarray, addr: ChannelAddress, lam: float):
    """Returns ``f(w, noise) -> (total, activation, penalty)`` tensors."""
    act_fn = channel_objective(recog, addr)
    extent = recog.input_shape[-1]

    def f(w: Tensor, noise) -> tuple[Tensor, Tensor, Tensor]:
        act = act_fn(downscale(generate(generator, w, noise), extent))
        d = ops.sub(w, w_hat)
        pen = ops.mul(ops.sum(ops.mul(d, d)), lam)
        return ops.sub(act, pen), act, pen

    return f


def _noise_rng(job: PriorJob) -> np.random.Generator:
    return np.random.default_rng([job.seed, 0x9A1])


def maximize_with_prior(recog: ModelGraph, generator: ModelGraph, center: LatentCenter, job: PriorJob) -> PriorResult:
    recog.resolve(job.address)
    w_hat = center.w.astype(np.float32)
    if w_hat.shape != (generator.input_shape[0],):
        raise ValueError(f"latent center has shape {w_hat.shape}, generator expects ({generator.input_shape[0]},)")
    f = prior_objective(recog, generator, w_hat, job.address, job.lam)
    noise = _noise_rng(job)
    w = w_hat.copy()
    shrink = 1.0 + 2.0 * job.lr * job.lam
    trace, acts, pens = [], [], []
    for step in range(job.steps):
        wt = Tensor(w, requires_grad=True)
        with Tape() as tape:
            total, act, pen = f(wt, noise)
            v = total.item()
            if not math.isfinite(v):
                raise PriorError(f"prior objective became {v} at step {step} for {job.address}", step)
            try:
                g = tape.backward(act)[wt]
            except NonFiniteError as e:
                raise PriorError(f"non-finite gradient at step {step}: {e}", step) from None
        trace.append(v)
        acts.append(act.item())
        pens.append(pen.item())
        # ascent on the activation, then the exact proximal step for the penalty
        w = ((w + job.lr * g + (2.0 * job.lr * job.lam) * w_hat) / shrink).astype(np.float32)
        if not np.all(np.isfinite(w)):
            raise PriorError(f"latent became non-finite at step {step}", step)
    wt = Tensor(w)
    image = generate(generator, wt, job.eval_noise_seed)
    final, _, _ = f(wt, np.random.default_rng(job.eval_noise_seed))
    return PriorResult(
        w, image.data[0], trace, acts, pens, final.item(), float(np.linalg.norm(w.astype(np.float64) - w_hat)), job.echo()
    )


def prior_key(job: PriorJob, checkpoint: str, tag: str = "") -> str:
    """Filesystem-safe provenance key for a prior run."""
    layer = job.address.layer.replace("/", "-")
    crc = zlib.crc32(json.dumps({**job.echo(), "checkpoint": checkpoint, "tag": tag}, sort_keys=True).encode())
    return f"{checkpoint or 'model'}__{layer}__c{job.address.channel}__{tag + '__' if tag else ''}s{job.seed}__{crc & 0xFFFFFFFF:08x}"


def save_prior_result(result: PriorResult, directory, key: str) -> Path:
    """``<key>.png`` then ``<key>.json``; the JSON marks a complete run."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    png = d / f"{key}.png"
    tmp = png.with_name(png.name + ".tmp")
    Image.fromarray(to_uint8(result.image)).save(tmp, format="PNG")
    os.replace(tmp, png)
    rec = {
        "job": result.job,
        "w": result.w.tolist(),
        "distance": result.distance,
        "final_objective": result.final_objective,
        "trace": result.trace,
        "activation": result.activation,
        "penalty": result.penalty,
        "library_version": __version__,
    }
    tmp = d / f"{key}.json.tmp"
    tmp.write_text(json.dumps(rec, indent=1, sort_keys=True))
    os.replace(tmp, d / f"{key}.json")
    return png


def load_prior_result(directory, key: str) -> PriorResult | None:
    d = Path(directory)
    png, meta = d / f"{key}.png", d / f"{key}.json"
    if not (png.exists() and meta.exists()):
        return None
    rec = json.loads(meta.read_text())
    img = np.asarray(Image.open(png).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    return PriorResult(
        np.asarray(rec["w"], np.float32), img, rec["trace"], rec["activation"], rec["penalty"],
        rec["final_objective"], rec["distance"], rec["job"],
    )


# ---------------------------------------------------------------- repeated runs

@dataclass
class RepeatedRuns:
    results: list[PriorResult]
    seeds: list[int]
    latent_distances: dict  # (i, j) -> ||w_i - w_j||
    image_rms: dict  # (i, j) -> RMS pixel difference
    within_mean: float
    baseline_mean: float

    @property
    def dispersion_ratio(self) -> float:
        return self.within_mean / self.baseline_mean if self.baseline_mean > 0 else float("nan")

    def summary(self) -> dict:
        return {
            "seeds": self.seeds,
            "pairwise_latent": {f"{i}-{j}": d for (i, j), d in self.latent_distances.items()},
            "pairwise_image_rms": {f"{i}-{j}": d for (i, j), d in self.image_rms.items()},
            "within_mean": self.within_mean,
            "baseline_mean": self.baseline_mean,
            "dispersion_ratio": self.dispersion_ratio,
        }


def random_baseline(center: np.ndarray, points: list[np.ndarray], draws: int = 64, seed: int = 0) -> float:
    """Mean distance from each point to random latents displaced from the
    center by the same norm as that point."""
    rng = np.random.default_rng(seed)
    c = center.astype(np.float64)
    dists = []
    for p in points:
        radius = np.linalg.norm(p - c)
        u = rng.standard_normal((draws, len(c)))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        dists.extend(np.linalg.norm(c + radius * u - p, axis=1))
    return float(np.mean(dists))


def repeated_runs(recog, generator, center: LatentCenter, job: PriorJob, seeds: list[int]) -> RepeatedRuns:
    if len(seeds) < 2:
        raise ValueError("repeated runs need at least two seeds")
    results = [maximize_with_prior(recog, generator, center, job.with_(seed=s)) for s in seeds]
    return summarize_runs(center, results, seeds, baseline_seed=job.seed)


def summarize_runs(center: LatentCenter, results: list[PriorResult], seeds: list[int], baseline_seed: int = 0) -> RepeatedRuns:
    """Pairwise dispersion of finished runs against the random baseline."""
    if len(results) < 2:
        raise ValueError("repeated runs need at least two seeds")
    lat, rms = {}, {}
    for i, j in itertools.combinations(range(len(results)), 2):
        a, b = results[i], results[j]
        lat[(i, j)] = float(np.linalg.norm(a.w.astype(np.float64) - b.w))
        rms[(i, j)] = float(np.sqrt(np.mean((a.image.astype(np.float64) - b.image) ** 2)))
    within = float(np.mean(list(lat.values())))
    base = random_baseline(center.w, [r.w.astype(np.float64) for r in results], seed=baseline_seed)
    return RepeatedRuns(results, list(seeds), lat, rms, within, base)


# ---------------------------------------------------------------- ablation

@dataclass(frozen=True)
class AblationSpec:
    address: ChannelAddress
    k: int


def top_k_indices(weights: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the ``k`` largest |weights|; ties go to the lowest index."""
    flat = np.asarray(weights).ravel()
    if not 0 <= k <= flat.size:
        raise ValueError(f"k={k} outside [0, {flat.size}] for this filter")
    return np.argsort(-np.abs(flat), kind="stable")[:k]


def filter_size(params: dict, address: ChannelAddress) -> int:
    return int(np.prod(params[f"{address.layer}/kernel"].shape[1:]))


def _ablate_params(params: dict, spec: AblationSpec) -> dict:
    name = f"{spec.address.layer}/kernel"
    if name not in params:
        raise ValueError(f"{spec.address.layer!r} has no convolution kernel")
    kernel = params[name]
    if not 0 <= spec.address.channel < kernel.shape[0]:
        raise ValueError(f"channel {spec.address.channel} out of range for {spec.address.layer!r}")
    idx = top_k_indices(kernel[spec.address.channel], spec.k)
    out = {k: v.copy() for k, v in params.items()}
    flat = out[name][spec.address.channel].reshape(-1)  # view into the copy
    flat[idx] = -flat[idx]
    return out


def ablate_weights(checkpoint: Checkpoint, spec: AblationSpec) -> Checkpoint:
    """Copy of ``checkpoint`` with the ``k`` largest-magnitude incoming kernel
    elements of the addressed channel negated."""
    params = _ablate_params(checkpoint.params, spec)
    return Checkpoint(
        checkpoint.kind,
        checkpoint.config,
        checkpoint.iteration,
        params,
        {k: v.copy() for k, v in checkpoint.buffers.items()},
        None,
        checkpoint.rng_state,
    )


def ablate_model(model: ModelGraph, spec: AblationSpec) -> ModelGraph:
    other = model.copy()
    other.params = _ablate_params(model.params, spec)
    return other


def ablation_sweep(recog: ModelGraph, generator, center: LatentCenter, address: ChannelAddress, k_max: int, job: PriorJob, on_cell=None):
    """One prior visualization per k in ``0..k_max`` (row-major grid order)."""
    size = filter_size(recog.params, address)
    if not 0 <= k_max <= size:
        raise ValueError(f"K={k_max} exceeds the filter size {size}")
    out = []
    for k in range(k_max + 1):
        model = ablate_model(recog, AblationSpec(address, k))
        res = maximize_with_prior(model, generator, center, job.with_(address=address))
        res.job["ablate_k"] = k
        out.append(res)
        if on_cell is not None:
            on_cell(k, res)
    return out


def write_lambda_sweep(rows: list[tuple[float, int, float, float]], path) -> Path:
    """CSV ``lambda,seed,final_distance,final_objective``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lambda", "seed", "final_distance", "final_objective"])
        for lam, seed, dist, obj in rows:
            w.writerow([repr(float(lam)), seed, f"{dist:.9g}", f"{obj:.9g}"])
    return path


def lambda_sweep(recog, generator, center, job: PriorJob, lambdas, seeds) -> list[tuple[float, int, float, float]]:
    rows = []
    for lam in lambdas:
        for s in seeds:
            r = maximize_with_prior(recog, generator, center, job.with_(lam=lam, seed=s))
            rows.append((lam, s, r.distance, r.final_objective))
    return rows
