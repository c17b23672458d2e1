"""Pipeline stages behind the subcommands.

Each stage checks the manifest first and only recomputes what is missing
(or everything, with ``force``). Files are written atomically and indexed
right after they land, always from the calling thread.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from difflib import get_close_matches
from pathlib import Path

import numpy as np

from .. import __version__
from ..analysis import (
    adaptation_timeline,
    channel_redundancy,
    estimate_period,
    period_rows,
    redundancy_summary,
    scale_stability,
    timeline_rows,
    write_csv,
    write_json,
)
from ..checkpoint import load_checkpoint, save_checkpoint
from ..data import Dataset, DatasetSpec, generate
from ..nets import ChannelAddress, ModelGraph, build_recognition_net
from ..prior import (
    AblationSpec,
    AutoEncoder,
    LatentCenter,
    PriorJob,
    ablate_model,
    filter_size,
    fit_latent_center,
    load_prior_result,
    maximize_with_prior,
    prior_key,
    save_prior_result,
    summarize_runs,
    train_autoencoder,
    write_lambda_sweep,
)
from ..trainer import SnapshotSchedule, TrainConfig, pretrain, transfer, write_trace
from ..vis import TransformSpec, VisJob, load_result, visualize_matrix
from .config import RunConfig, parse_range
from .manifest import Manifest
from .montage import abbreviate, compose, load_cell, save_png

log = logging.getLogger("vistra")


class UsageError(Exception):
    """Bad invocation or missing prerequisite (exit code 2)."""


class StageFailure(Exception):
    """A stage ran but could not finish (exit code 1)."""


@dataclass
class Filters:
    layers: list[str] | None = None
    channels: list[str] | None = None
    iterations: list[str] | None = None

    @property
    def active(self) -> bool:
        return bool(self.layers or self.channels or self.iterations)


def _is_glob(p: str) -> bool:
    return any(c in p for c in "*?[")


def _channel_match(pattern: str, channel: int) -> bool:
    if re.fullmatch(r"\d+(\.\.\d+)?(,\d+(\.\.\d+)?)*", pattern):
        return channel in parse_range(pattern)
    return fnmatch.fnmatchcase(str(channel), pattern)


def _pool_map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


class Run:
    def __init__(self, cfg: RunConfig, root, seed: int | None = None, force: bool = False, jobs: int = 1, transforms: bool = True):
        self.cfg = cfg
        self.root = Path(root)
        self.seed = cfg.seed if seed is None else seed
        self.force = force
        self.jobs = max(1, jobs)
        self.transforms = transforms
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.root)
        self._datasets: dict[str, Dataset] = {}
        self._models: dict[str, ModelGraph] = {}
        self._bind_config()

    # ------------------------------------------------------------ bookkeeping

    def _bind_config(self) -> None:
        """Pin the run directory to one (config, seed); refuse silent mixing."""
        record = {"config": self.cfg.model_dump(mode="json"), "seed": self.seed, "library_version": __version__}
        record["config"].pop("output")
        text = json.dumps(record, indent=1, sort_keys=True) + "\n"
        path = self.root / "run.json"
        if path.exists() and path.read_text() != text and not self.force:
            raise UsageError(
                f"{self.root} already holds a run with a different config or seed; "
                "pass --force to overwrite or choose another output root"
            )
        if not path.exists() or path.read_text() != text:
            path.write_text(text)
        self.manifest.add("config", "run-config", path)

    def have(self, *keys: str) -> bool:
        return not self.force and all(self.manifest.verify(k) for k in keys)

    def register(self, kind: str, key: str, path) -> None:
        self.manifest.add(kind, key, path)

    def progress(self, name: str, every: int = 100):
        def cb(iteration, loss):
            if iteration % every == 0:
                log.info("%s: iteration %d loss %.4f", name, iteration, loss)

        return cb

    def dataset(self, name: str) -> Dataset:
        if name not in self._datasets:
            sec = getattr(self.cfg.data, name)
            spec = DatasetSpec(sec.kind, sec.count, self.seed if sec.seed is None else sec.seed, sec.extent)
            log.info("generating %s dataset (%s, %d samples)", name, spec.kind, spec.count)
            self._datasets[name] = generate(spec)
        return self._datasets[name]

    def ck_path(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ck"

    def save_ck(self, ck, name: str) -> None:
        path = save_checkpoint(ck, self.ck_path(name))
        self.register("checkpoint", f"checkpoint:{name}", path)

    def load_ck(self, name: str, hint: str):
        key = f"checkpoint:{name}"
        if not self.manifest.verify(key):
            raise UsageError(f"missing artifact {key}; run `vistra {hint}` first")
        return load_checkpoint(self.manifest.file(key))

    # ------------------------------------------------------------ snapshots

    @property
    def schedule(self) -> tuple[int, ...]:
        return self.cfg.transfer.schedule

    def labels(self) -> list[str]:
        return [f"it{i:04d}" for i in self.schedule]

    @property
    def final_label(self) -> str:
        return self.labels()[-1]

    def snapshot_name(self, label: str) -> str:
        return "compare/final" if label == "compare" else f"transfer/{label}"

    def model(self, label: str) -> ModelGraph:
        if label not in self._models:
            self._models[label] = self.load_ck(self.snapshot_name(label), "transfer").model()
        return self._models[label]

    # ------------------------------------------------------------ addresses

    def resolve_addresses(self, model: ModelGraph, addrs) -> list[ChannelAddress]:
        out = []
        layers = model.conv_layers()
        for a in addrs:
            a = ChannelAddress.parse(a) if isinstance(a, str) else a
            if a.layer not in layers:
                close = get_close_matches(a.layer, layers, n=3)
                hint = f" (did you mean {', '.join(close)}?)" if close else ""
                raise UsageError(f"unknown layer {a.layer!r}{hint}; candidates: {', '.join(layers)}")
            n = model.channel_count(a.layer)
            if not 0 <= a.channel < n:
                raise UsageError(f"channel {a.channel} out of range for {a.layer} (candidates: 0..{n - 1})")
            out.append(a)
        return out

    def filter_addresses(self, model: ModelGraph, filters: Filters, base: list[ChannelAddress]) -> list[ChannelAddress]:
        """Select addresses by layer/channel globs. Without a layer filter the
        configured ``base`` addresses are the candidates."""
        layers = model.conv_layers()
        if filters.layers:
            chosen = []
            for pat in filters.layers:
                if not _is_glob(pat) and pat not in layers:
                    close = get_close_matches(pat, layers, n=3)
                    hint = f" (did you mean {', '.join(close)}?)" if close else ""
                    raise UsageError(f"unknown layer {pat!r}{hint}; candidates: {', '.join(layers)}")
                chosen += [l for l in layers if fnmatch.fnmatchcase(l, pat) and l not in chosen]
            pool = [ChannelAddress(l, c) for l in chosen for c in range(model.channel_count(l))]
        else:
            pool = list(base)
        if filters.channels:
            literal = [p for p in filters.channels if not _is_glob(p)]
            for pat in literal:
                for c in parse_range(pat) if re.fullmatch(r"[\d.,]+", pat) else []:
                    if not any(c < model.channel_count(a.layer) for a in pool):
                        raise UsageError(f"channel {c} does not exist in the selected layers")
            pool = [a for a in pool if any(_channel_match(p, a.channel) for p in filters.channels)]
        return pool

    def filter_labels(self, filters: Filters) -> list[str]:
        if not filters.iterations:
            return self.labels()
        keep = []
        for it, label in zip(self.schedule, self.labels()):
            if any(fnmatch.fnmatchcase(str(it), p) for p in filters.iterations):
                keep.append(label)
        return keep


# ---------------------------------------------------------------- training


def _final_metric(trace) -> float | None:
    vals = [r.metric for r in trace if r.metric is not None]
    return vals[-1] if vals else None


def stage_pretrain(run: Run) -> None:
    keys = ["checkpoint:pretrain", "metrics:pretrain-trace", "metrics:pretrain"]
    if run.have(*keys):
        log.info("pretrain: up to date")
        return
    sec = run.cfg.pretrain
    t0 = time.perf_counter()
    if sec.checkpoint:
        ck, trace = load_checkpoint(sec.checkpoint), []
        log.info("pretrain: reusing %s", sec.checkpoint)
    else:
        ds = run.dataset("source")
        model = build_recognition_net(run.cfg.model.recognition(ds.spec.extent, ds.spec.arity), seed=run.seed)
        tc = TrainConfig(sec.lr, sec.batch_size, sec.epochs, sec.iterations, seed=run.seed, loss="categorical")
        ck, trace = pretrain(model, ds, tc, progress=run.progress("pretrain"))
    run.save_ck(ck, "pretrain")
    run.register("metrics", "metrics:pretrain-trace", write_trace(trace, run.root / "metrics" / "pretrain_trace.csv"))
    summary = {"iterations": ck.iteration, "val_metric": _final_metric(trace), "metric": "accuracy"}
    run.register("metrics", "metrics:pretrain", write_json(summary, run.root / "metrics" / "pretrain.json"))
    log.info("pretrain: %d iterations, val accuracy %s (%.0f s)", ck.iteration, summary["val_metric"], time.perf_counter() - t0)


def _transfer_one(run: Run, base, ds: Dataset, iterations: int, schedule, prefix: str, name: str) -> None:
    sec = run.cfg.transfer
    loss = "binary" if ds.spec.multilabel else "categorical"
    tc = TrainConfig(sec.lr, sec.batch_size, None, iterations, seed=run.seed, loss=loss)

    def on_snapshot(ck):
        label = f"it{ck.iteration:04d}" if prefix == "transfer" else "final"
        run.save_ck(ck, f"{prefix}/{label}")

    t0 = time.perf_counter()
    _, trace = transfer(base, ds, tc, SnapshotSchedule(schedule), on_snapshot=on_snapshot, progress=run.progress(name, 500))
    run.register("metrics", f"metrics:{name}-trace", write_trace(trace, run.root / "metrics" / f"{name}_trace.csv"))
    metric = "mean attribute accuracy" if ds.spec.multilabel else "accuracy"
    summary = {"iterations": iterations, "val_metric": _final_metric(trace), "metric": metric, "dataset": ds.spec.kind}
    run.register("metrics", f"metrics:{name}", write_json(summary, run.root / "metrics" / f"{name}.json"))
    log.info("%s: %d iterations, val %s %s (%.0f s)", name, iterations, metric, summary["val_metric"], time.perf_counter() - t0)


def stage_transfer(run: Run) -> None:
    keys = [f"checkpoint:transfer/{l}" for l in run.labels()] + ["metrics:transfer-trace", "metrics:transfer"]
    if run.have(*keys):
        log.info("transfer: up to date")
    else:
        base = run.load_ck("pretrain", "pretrain")
        _transfer_one(run, base, run.dataset("target"), run.cfg.transfer.iterations, run.schedule, "transfer", "transfer")
    if run.cfg.data.compare is None:
        return
    keys = ["checkpoint:compare/final", "metrics:compare-trace", "metrics:compare"]
    if run.have(*keys):
        log.info("transfer (compare): up to date")
        return
    base = run.load_ck("pretrain", "pretrain")
    n = run.cfg.transfer.compare_iterations
    _transfer_one(run, base, run.dataset("compare"), n, (n,), "compare", "compare")


# ---------------------------------------------------------------- visualization


def vis_template(run: Run) -> VisJob:
    v = run.cfg.visualize
    spec = TransformSpec(v.jitter, tuple(v.scales), v.transforms and run.transforms)
    return VisJob(ChannelAddress("conv1/a3x3", 0), "", v.steps, v.lr, spec, run.seed, v.alpha, v.init_std)


def grid_addresses(run: Run, model: ModelGraph) -> list[ChannelAddress]:
    return run.resolve_addresses(model, run.cfg.visualize.grid)


def prepost_addresses(run: Run, model: ModelGraph) -> list[ChannelAddress]:
    v = run.cfg.visualize
    return run.resolve_addresses(model, [ChannelAddress(l, c) for l in v.prepost_layers for c in range(v.prepost_channels)])


def redundancy_addresses(run: Run, model: ModelGraph) -> list[ChannelAddress]:
    v = run.cfg.visualize
    return run.resolve_addresses(model, [ChannelAddress(v.redundancy_layer, c) for c in range(v.redundancy_channels)])


def vis_plan(run: Run, filters: Filters) -> list[tuple[list[str], list[ChannelAddress]]]:
    final = run.model(run.final_label)
    if filters.active:
        labels = run.filter_labels(filters)
        addrs = run.filter_addresses(final, filters, grid_addresses(run, final))
        if not labels or not addrs:
            return []
        return [(labels, addrs)]
    plan = [
        (run.labels(), grid_addresses(run, final)),
        ([run.labels()[0], run.final_label], prepost_addresses(run, final)),
    ]
    red = [run.final_label] + (["compare"] if run.cfg.data.compare is not None else [])
    plan.append((red, redundancy_addresses(run, final)))
    return plan


def vis_key(run: Run, label: str, addr: ChannelAddress) -> str:
    return vis_template(run).with_(address=addr, checkpoint=label).key


def stage_visualize(run: Run, filters: Filters = Filters()) -> int:
    plan = vis_plan(run, filters)
    if not plan:
        log.warning("visualize: the filters match no channels or snapshots; nothing to do")
        return 0
    out = run.root / "vis"
    template = vis_template(run)
    made = 0
    failures = []
    for labels, addrs in plan:
        t0 = time.perf_counter()
        snaps = [(label, run.model(label)) for label in labels]
        rep = visualize_matrix(snaps, addrs, template, out, workers=run.jobs, force=run.force)
        for label in labels:
            for addr in addrs:
                if (label, addr) in rep.results:
                    key = template.with_(address=addr, checkpoint=label).key
                    run.register("vis", f"vis:{key}", out / f"{key}.png")
                    run.register("vis-meta", f"vis-meta:{key}", out / f"{key}.json")
                    made += 1
        failures += [f"{label} {addr}: {err}" for (label, addr), err in rep.errors.items()]
        log.info(
            "visualize: %d x %d grid, %d computed, %d reused (%.0f s)",
            len(labels), len(addrs), len(rep.computed), len(rep.skipped), time.perf_counter() - t0,
        )
    if failures:
        raise StageFailure("visualization failed for:\n  " + "\n  ".join(failures))
    return made


# ---------------------------------------------------------------- prior


def _autoencoder(run: Run) -> AutoEncoder:
    keys = ["checkpoint:autoencoder/generator", "checkpoint:autoencoder/encoder", "metrics:autoencoder"]
    if run.have(*keys):
        return AutoEncoder.from_checkpoints(run.load_ck("autoencoder/generator", "prior"), run.load_ck("autoencoder/encoder", "prior"))
    sec = run.cfg.prior.autoencoder
    gcfg = sec.generator()
    ds = run.dataset("target")
    if gcfg.extent != ds.spec.extent:
        raise UsageError(f"generator extent {gcfg.extent} does not match the target extent {ds.spec.extent}")
    t0 = time.perf_counter()
    ae, losses = train_autoencoder(ds, gcfg, sec.steps, sec.batch_size, sec.lr, seed=run.seed, progress=run.progress("autoencoder"))
    gen_ck, enc_ck = ae.checkpoints()
    run.save_ck(gen_ck, "autoencoder/generator")
    run.save_ck(enc_ck, "autoencoder/encoder")
    rows = [{"step": i + 1, "mse": l} for i, l in enumerate(losses)]
    run.register("metrics", "metrics:autoencoder", write_csv(rows, run.root / "metrics" / "autoencoder_loss.csv"))
    log.info("autoencoder: %d steps, final mse %.4f (%.0f s)", sec.steps, losses[-1], time.perf_counter() - t0)
    return ae


def _center(run: Run, ae: AutoEncoder) -> LatentCenter:
    path = run.root / "prior" / "center.json"
    if run.have("prior:center"):
        rec = json.loads(path.read_text())
        return LatentCenter(np.asarray(rec["w"], dtype=rec["dtype"]), rec["provenance"])
    center = fit_latent_center(ae, run.dataset("target"))
    rec = {"w": center.w.tolist(), "dtype": str(center.w.dtype), "provenance": center.provenance}
    run.register("latent-center", "prior:center", write_json(rec, path))
    return center


@dataclass
class PriorContext:
    recog: ModelGraph
    ae: AutoEncoder
    center: LatentCenter
    label: str
    template: PriorJob


def prior_context(run: Run) -> PriorContext:
    label = run.final_label
    recog = run.model(label)
    ae = _autoencoder(run)
    center = _center(run, ae)
    p = run.cfg.prior
    template = PriorJob(ChannelAddress("conv1/a3x3", 0), p.lam, p.steps, p.lr, run.seed)
    return PriorContext(recog, ae, center, label, template)


def _prior_cells(run: Run, ctx: PriorContext, cells, subdir: str, kind: str):
    """cells: list of (job, model, tag, extra_job_fields). Cached cells are
    loaded; the rest computed (bounded pool) and indexed in order."""
    out = run.root / subdir

    def one(cell):
        job, model, tag, extra = cell
        key = prior_key(job, ctx.label, tag)
        res = None if run.force else load_prior_result(out, key)
        if res is None:
            res = maximize_with_prior(model, ctx.ae.generator, ctx.center, job)
            res.job.update(extra)
            save_prior_result(res, out, key)
            # summaries must not depend on whether a cell was cached
            res = load_prior_result(out, key)
        return key, res

    done = _pool_map(one, cells, run.jobs)
    for key, _ in done:
        run.register(kind, f"{kind}:{key}", out / f"{key}.png")
        run.register(f"{kind}-meta", f"{kind}-meta:{key}", out / f"{key}.json")
    return [r for _, r in done]


def prior_addresses(run: Run, model: ModelGraph, filters: Filters) -> list[ChannelAddress]:
    base = run.resolve_addresses(model, run.cfg.prior.addresses)
    return run.filter_addresses(model, filters, base) if filters.active else base


def stage_prior(run: Run, filters: Filters = Filters()) -> None:
    final = run.model(run.final_label)
    addrs = prior_addresses(run, final, filters)
    if not addrs:
        log.warning("prior: the filters match no channels; nothing to do")
        return
    ctx = prior_context(run)
    p = run.cfg.prior
    t0 = time.perf_counter()
    _prior_cells(run, ctx, [(ctx.template.with_(address=a), ctx.recog, "", {}) for a in addrs], "prior", "prior")
    log.info("prior: %d visualizations (%.0f s)", len(addrs), time.perf_counter() - t0)

    # lambda sweep on the first address
    t0 = time.perf_counter()
    seeds = [run.seed + i for i in range(p.sweep_seeds)]
    grid = [(lam, s) for lam in p.lambdas for s in seeds]
    jobs = [(ctx.template.with_(address=addrs[0], lam=lam, seed=s), ctx.recog, "", {}) for lam, s in grid]
    results = _prior_cells(run, ctx, jobs, "prior", "prior")
    rows = [(lam, s, r.distance, r.final_objective) for (lam, s), r in zip(grid, results)]
    run.register("report", "report:lambda-sweep", write_lambda_sweep(rows, run.root / "prior" / "lambda_sweep.csv"))
    means = [float(np.mean([r[2] for r in rows if r[0] == lam])) for lam in p.lambdas]
    log.info("prior: lambda sweep mean distances %s (%.0f s)", ", ".join(f"{m:.3g}" for m in means), time.perf_counter() - t0)

    # repeated runs
    seeds = [run.seed + s for s in p.repeated_seeds]
    jobs = [(ctx.template.with_(address=addrs[0], seed=s), ctx.recog, "", {}) for s in seeds]
    results = _prior_cells(run, ctx, jobs, "prior", "prior")
    rr = summarize_runs(ctx.center, results, seeds, baseline_seed=run.seed)
    summary = {"address": str(addrs[0]), **rr.summary()}
    run.register("report", "report:repeated-runs", write_json(summary, run.root / "prior" / "repeated_runs.json"))
    log.info("prior: repeated-runs dispersion ratio %.3f", rr.dispersion_ratio)


def stage_ablate(run: Run, filters: Filters = Filters(), ks: str | None = None) -> None:
    final = run.model(run.final_label)
    base = run.resolve_addresses(final, [run.cfg.ablate.address])
    addrs = run.filter_addresses(final, filters, base) if (filters.layers or filters.channels) else base
    if not addrs:
        log.warning("ablate: the filters match no channels; nothing to do")
        return
    try:
        k_values = parse_range(ks if ks is not None else run.cfg.ablate.k)
    except ValueError as e:
        raise UsageError(f"--ablate-k: {e}") from None
    for addr in addrs:
        size = filter_size(final.params, addr)
        if max(k_values) > size:
            raise UsageError(f"k={max(k_values)} exceeds the {size} incoming weights of {addr}")
    ctx = prior_context(run)
    cols = run.cfg.montage.ablation_columns
    for addr in addrs:
        t0 = time.perf_counter()
        job = ctx.template.with_(address=addr)
        cells = [(job, ablate_model(ctx.recog, AblationSpec(addr, k)), f"ablate-k{k:02d}", {"ablate_k": k}) for k in k_values]
        results = _prior_cells(run, ctx, cells, "ablation", "ablation")
        tags = [prior_key(job, ctx.label, f"ablate-k{k:02d}") for k in k_values]
        images = [load_cell(run.root / "ablation" / f"{t}.png") for t in tags]
        rows = [images[i : i + cols] for i in range(0, len(images), cols)]
        row_labels = [f"k={k_values[i]}" for i in range(0, len(k_values), cols)]
        canvas = compose(rows, row_labels, [f"+{c}" for c in range(min(cols, len(images)))], run.cfg.montage.gutter)
        name = f"{addr.layer.replace('/', '-')}-c{addr.channel}"
        path = save_png(canvas, run.root / "ablation" / f"grid_{name}.png")
        run.register("montage", f"montage:ablation/{name}", path)
        dist = [{"k": k, "distance": r.distance, "final_objective": r.final_objective} for k, r in zip(k_values, results)]
        run.register("report", f"report:ablation/{name}", write_csv(dist, run.root / "ablation" / f"sweep_{name}.csv"))
        log.info("ablate: %s, %d cells (%.0f s)", addr, len(k_values), time.perf_counter() - t0)


# ---------------------------------------------------------------- analysis

ANALYSES = ("periods", "scale", "redundancy", "timeline")


def _vis_images(run: Run, labels, addrs) -> dict:
    out, missing = {}, []
    for label in labels:
        for addr in addrs:
            key = vis_key(run, label, addr)
            res = load_result(run.root / "vis", key) if run.manifest.verify(f"vis:{key}") else None
            if res is None:
                missing.append(f"vis:{key}")
            else:
                out[(label, addr)] = res.image
    if missing:
        raise UsageError(
            f"insufficient inputs: {len(missing)} visualizations missing (first: {missing[0]}); run `vistra visualize` first"
        )
    return out


def stage_analyze(run: Run, only: list[str] | None = None) -> dict:
    chosen = list(only or ANALYSES)
    bad = [a for a in chosen if a not in ANALYSES]
    if bad:
        raise UsageError(f"unknown analysis {', '.join(bad)}; choose from {', '.join(ANALYSES)}")
    a = run.cfg.analyze
    final = run.model(run.final_label)
    labels = run.labels()
    iteration = dict(zip(labels, run.schedule))
    d = run.root / "analysis"
    summary = {}
    if "periods" in chosen or "timeline" in chosen:
        grid_addrs = grid_addresses(run, final)
        grid = _vis_images(run, labels, grid_addrs)
    if "scale" in chosen:
        pp_addrs = prepost_addresses(run, final)
        imgs = _vis_images(run, [labels[0], labels[-1]], pp_addrs)
    if "periods" in chosen:
        ests = []
        for (label, addr), img in grid.items():
            try:
                ests.append(estimate_period(img, addr, iteration[label]))
            except ValueError as e:
                log.warning("periods: %s at %s: %s", addr, label, e)
        run.register("report", "report:periods", write_csv(period_rows(ests), d / "periods.csv"))
        summary["periods"] = {"cells": len(ests)}
    if "scale" in chosen:
        pre = {addr: imgs[(labels[0], addr)] for addr in pp_addrs}
        post = {addr: imgs[(labels[-1], addr)] for addr in pp_addrs}
        rep = scale_stability(pre, post, pp_addrs, min_prominence=a.min_prominence)
        run.register("report", "report:scale-stability", write_csv(rep.rows, d / "scale_stability.csv"))
        summary["scale"] = {**rep.summary(), "excluded_channels": [str(x) for x in rep.excluded]}
    if "redundancy" in chosen:
        red_addrs = redundancy_addresses(run, final)
        models = [("target", run.final_label)] + ([("compare", "compare")] if run.cfg.data.compare is not None else [])
        rows = []
        for name, label in models:
            imgs_r = _vis_images(run, [label], red_addrs)
            m = channel_redundancy([imgs_r[(label, x)] for x in red_addrs], red_addrs, a.max_shift, a.redundancy_threshold)
            s = redundancy_summary(m)
            run.register("report", f"report:redundancy-{name}", write_json(s, d / f"redundancy_{name}.json"))
            rows.append(
                {
                    "model": name,
                    "snapshot": label,
                    "layer": run.cfg.visualize.redundancy_layer,
                    "channels": len(red_addrs),
                    "mean_offdiagonal": s["mean_offdiagonal"],
                    "clusters": len(m.clusters),
                    "clustered_channels": sum(len(c) for c in m.clusters),
                }
            )
        run.register("report", "report:redundancy", write_csv(rows, d / "redundancy.csv"))
        summary["redundancy"] = rows
    if "timeline" in chosen:
        by_iter = {iteration[l]: {addr: grid[(l, addr)] for addr in grid_addrs} for l in labels}
        prof = adaptation_timeline(by_iter, a.early_until, layer_order=final.conv_layers())
        run.register("report", "report:timeline", write_csv(timeline_rows(prof), d / "timeline.csv"))
        tl = {"iterations": prof.iterations, "layer_order": prof.layer_order, "mean_change_by_layer": prof.by_layer}
        run.register("report", "report:timeline-layers", write_json(tl, d / "timeline.json"))
        shares = [c.early_share for c in prof.channels if c.early_share is not None]
        summary["timeline"] = {"median_early_share": float(np.median(shares)) if shares else None}
    run.register("report", "report:analysis-summary", write_json(summary, d / "summary.json"))
    log.info("analyze: %s", ", ".join(chosen))
    return summary


# ---------------------------------------------------------------- montage

LAYOUTS = ("iterations-by-channels", "pre-post-interleaved")


def _cell(run: Run, label: str, addr: ChannelAddress, allow_gaps: bool):
    key = f"vis:{vis_key(run, label, addr)}"
    if run.manifest.verify(key):
        return load_cell(run.manifest.file(key))
    if allow_gaps:
        log.warning("montage: %s missing, drawing a placeholder", key)
        return None
    raise UsageError(f"montage cell missing from the manifest: {key} (run `vistra visualize` or pass --allow-gaps)")


def stage_montage(run: Run, layouts: list[str] | None = None, allow_gaps: bool = False) -> list[Path]:
    chosen = list(layouts or LAYOUTS)
    bad = [l for l in chosen if l not in LAYOUTS]
    if bad:
        raise UsageError(f"unknown layout {', '.join(bad)}; choose from {', '.join(LAYOUTS)}")
    final = run.model(run.final_label)
    g = run.cfg.montage.gutter
    out = []
    if "iterations-by-channels" in chosen:
        addrs = grid_addresses(run, final)
        cells = [[_cell(run, l, a, allow_gaps) for a in addrs] for l in run.labels()]
        canvas = compose(cells, [str(i) for i in run.schedule], [abbreviate(str(a)) for a in addrs], g)
        path = save_png(canvas, run.root / "montage" / "iterations_by_channels.png")
        run.register("montage", "montage:iterations-by-channels", path)
        out.append(path)
    if "pre-post-interleaved" in chosen:
        v = run.cfg.visualize
        run.resolve_addresses(final, [ChannelAddress(l, 0) for l in v.prepost_layers])
        pre, post = run.labels()[0], run.final_label
        cells = []
        for layer in v.prepost_layers:
            row = []
            for c in range(v.prepost_channels):
                addr = ChannelAddress(layer, c)
                row += [_cell(run, pre, addr, allow_gaps), _cell(run, post, addr, allow_gaps)]
            cells.append(row)
        cols = [f"c{c} {w}" for c in range(v.prepost_channels) for w in ("pre", "post")]
        canvas = compose(cells, [abbreviate(l) for l in v.prepost_layers], cols, g)
        path = save_png(canvas, run.root / "montage" / "pre_post_interleaved.png")
        run.register("montage", "montage:pre-post-interleaved", path)
        out.append(path)
    return out


# ---------------------------------------------------------------- demo


def stage_demo(run: Run) -> None:
    t0 = time.perf_counter()
    for name, fn in (
        ("pretrain", stage_pretrain),
        ("transfer", stage_transfer),
        ("visualize", stage_visualize),
        ("prior", stage_prior),
        ("ablate", stage_ablate),
        ("analyze", stage_analyze),
        ("montage", stage_montage),
    ):
        t = time.perf_counter()
        fn(run)
        log.info("demo: %s done (%.0f s)", name, time.perf_counter() - t)
    problems = run.manifest.problems()
    if problems:
        raise StageFailure("manifest verification failed:\n  " + "\n  ".join(problems))
    log.info("demo: complete in %.0f s, %d artifacts indexed", time.perf_counter() - t0, len(run.manifest.entries))
