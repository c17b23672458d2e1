import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from vistra.cli import main
from vistra.cli.config import ConfigError, RunConfig, parse_config, parse_range
from vistra.cli.manifest import Manifest, strip_timestamps
from vistra.cli.montage import ADVANCE, GLYPH_H, compose, text_bitmap
from vistra.cli.stages import Run, vis_key
from vistra.nets import ChannelAddress

TINY = Path(__file__).resolve().parent.parent / "configs" / "tiny.yaml"


def vistra(*args) -> int:
    return main([*map(str, args), "-q"])


@pytest.fixture(scope="module")
def demo_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    assert vistra("demo", "--config", TINY, "--out", root) == 0
    return root


def _manifest(root) -> list[dict]:
    return [json.loads(l) for l in (root / "manifest.jsonl").read_text().splitlines()]


def _kinds(root) -> dict:
    out = {}
    for rec in _manifest(root):
        out[rec["kind"]] = out.get(rec["kind"], 0) + 1
    return out


# ---------------------------------------------------------------- config

@pytest.mark.parametrize(
    "text, line, needle",
    [
        ("pretrain:\n  lr: -0.5\n", 2, "pretrain.lr"),
        ("seed: 1\ntransfer:\n  batch_size: 10\n  bogus: 3\n", 4, "transfer.bogus"),
        ("visualize:\n  grid:\n    - conv1/a3x3:0\n    - conv1\n", 4, "visualize.grid.1"),
        ("data:\n  target: {kind: faces}\n", 2, "data.target.kind"),
        ("seed: [1,\n", 2, "YAML syntax"),
    ],
)
def test_config_errors_name_the_line(tmp_path, capsys, text, line, needle):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    assert vistra("pretrain", "--config", cfg, "--out", tmp_path / "out") == 2
    err = capsys.readouterr().err
    assert f"bad.yaml:{line}:" in err and needle in err


def test_config_paths_resolved_at_validation(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config("pretrain:\n  checkpoint: missing.ck\n", "c.yaml", tmp_path)
    (tmp_path / "there.ck").write_bytes(b"")
    cfg = parse_config("pretrain:\n  checkpoint: there.ck\n", "c.yaml", tmp_path)
    assert Path(cfg.pretrain.checkpoint) == (tmp_path / "there.ck").resolve()


def test_defaults_and_ranges():
    cfg = RunConfig()
    assert cfg.transfer.schedule == (0, 10, 20, 30, 60, 150, 1000, 3000) and cfg.transfer.batch_size == 10
    assert len(cfg.visualize.grid) == 6 and len(cfg.visualize.prepost_layers) == 8
    assert parse_range("0..39") == list(range(40))
    assert parse_range("0..2,7") == [0, 1, 2, 7]
    with pytest.raises(ValueError):
        parse_range("3..1")


# ---------------------------------------------------------------- manifest

def test_manifest_unique_keys_and_verification(tmp_path):
    m = Manifest(tmp_path)
    f = tmp_path / "a.txt"
    f.write_text("one")
    m.add("report", "k", f)
    m.add("report", "k", f)
    assert len((tmp_path / "manifest.jsonl").read_text().splitlines()) == 1
    f.write_text("two")
    assert not m.verify("k") and m.problems()
    m.add("report", "k", f)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 1 and Manifest(tmp_path).verify("k")
    f.unlink()
    assert "missing" in Manifest(tmp_path).problems()[0]


# ---------------------------------------------------------------- montage

def test_text_bitmap():
    bm = text_bitmap("ab")
    assert bm.shape == (GLYPH_H, 2 * ADVANCE - 1)
    assert np.array_equal(text_bitmap("~"), text_bitmap("?"))
    assert np.array_equal(text_bitmap("A"), text_bitmap("a"))


def test_single_cell_montage_is_framed_input():
    img = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    out = compose([[img]], gutter=5)
    assert out.shape == (21, 21, 3)
    assert np.array_equal(out[5:, 5:], img)
    assert np.all(out[:5] == 255) and np.all(out[:, :5] == 255)


def test_grid_extent_arithmetic():
    cell = np.zeros((10, 10, 3), np.uint8)
    out = compose([[cell] * 6 for _ in range(8)], [str(i) for i in range(8)], ["c"] * 6, gutter=12)
    assert out.shape == (8 * 22, 6 * 22, 3)
    with pytest.raises(ValueError):
        compose([[cell, np.zeros((8, 8, 3), np.uint8)]])


# ---------------------------------------------------------------- pipeline

def test_demo_artifacts(demo_root):
    kinds = _kinds(demo_root)
    for kind in ("config", "checkpoint", "metrics", "vis", "vis-meta", "prior", "ablation", "report", "montage"):
        assert kinds.get(kind), kind
    assert Manifest(demo_root).problems() == []
    # every file on disk is indexed
    listed = {rec["path"] for rec in _manifest(demo_root)}
    on_disk = {p.relative_to(demo_root).as_posix() for p in demo_root.rglob("*") if p.is_file()}
    assert on_disk - listed == {"manifest.jsonl"}
    snaps = [r for r in _manifest(demo_root) if r["key"].startswith("checkpoint:transfer/")]
    assert len(snaps) == 8


def test_rerun_is_noop(demo_root):
    before = (demo_root / "manifest.jsonl").read_bytes()
    ck = demo_root / "checkpoints" / "pretrain.ck"
    mtime = ck.stat().st_mtime_ns
    assert vistra("pretrain", "--config", TINY, "--out", demo_root) == 0
    assert vistra("demo", "--config", TINY, "--out", demo_root) == 0
    assert (demo_root / "manifest.jsonl").read_bytes() == before
    assert ck.stat().st_mtime_ns == mtime


def test_same_seed_same_digests(demo_root, tmp_path):
    assert vistra("demo", "--config", TINY, "--out", tmp_path / "again", "--jobs", 2) == 0
    a = strip_timestamps((demo_root / "manifest.jsonl").read_text())
    b = strip_timestamps((tmp_path / "again" / "manifest.jsonl").read_text())
    assert a == b


def test_forced_prior_rerun_same_digests(demo_root):
    before = {e["key"]: e["digest"] for e in _manifest(demo_root)}
    mtime = (demo_root / "prior" / "repeated_runs.json").stat().st_mtime_ns
    assert vistra("prior", "--config", TINY, "--out", demo_root, "--force") == 0
    after = {e["key"]: e["digest"] for e in _manifest(demo_root)}
    assert (demo_root / "prior" / "repeated_runs.json").stat().st_mtime_ns != mtime
    assert after == before


def test_seed_mismatch_refused(demo_root, capsys):
    assert vistra("visualize", "--config", TINY, "--out", demo_root, "--seed", 9) == 2
    assert "--force" in capsys.readouterr().err


def test_filtered_visualize_grid(demo_root):
    before = len(_manifest(demo_root))
    args = ("visualize", "--config", TINY, "--out", demo_root)
    assert vistra(*args, "--layers", "conv2/c3x3", "--channels", "0..5", "--iterations", "*") == 0
    cfg = parse_config(TINY.read_text(), base=TINY.parent)
    run = Run(cfg, demo_root)
    labels = run.labels()
    addrs = [ChannelAddress("conv2/c3x3", c) for c in range(6)]
    keys = [vis_key(run, l, a) for l in labels for a in addrs]
    assert len(keys) == 48
    for k in keys:
        assert run.manifest.verify(f"vis:{k}") and run.manifest.verify(f"vis-meta:{k}")
    assert len(_manifest(demo_root)) <= before + 96


def test_filter_errors_and_empty_match(demo_root, capsys):
    args = ("visualize", "--config", TINY, "--out", demo_root)
    assert vistra(*args, "--layers", "mixed4/branch1/b3x4") == 2
    err = capsys.readouterr().err
    assert "mixed4/branch1/b3x3" in err and "candidates" in err
    before = (demo_root / "manifest.jsonl").read_bytes()
    assert vistra(*args, "--layers", "nothing*") == 0
    assert vistra(*args, "--iterations", "77*") == 0
    assert (demo_root / "manifest.jsonl").read_bytes() == before


def test_ablate_range_and_limits(demo_root):
    args = ("ablate", "--config", TINY, "--out", demo_root)
    assert vistra(*args, "--ablate-k", "0..5") == 0
    rows = list(csv.DictReader((demo_root / "ablation" / "sweep_mixed5-branch0-a1x1-c0.csv").open()))
    assert [int(r["k"]) for r in rows] == list(range(6))
    assert vistra(*args, "--ablate-k", "0..100000") == 2
    assert vistra(*args, "--ablate-k", "0..3") == 0  # restore the configured sweep


def test_montage_layouts(demo_root):
    cfg = parse_config(TINY.read_text(), base=TINY.parent)
    run = Run(cfg, demo_root)
    g = cfg.montage.gutter
    grid = np.asarray(Image.open(demo_root / "montage" / "iterations_by_channels.png"))
    assert grid.shape == (8 * (16 + g), 3 * (16 + g), 3)
    pp = np.asarray(Image.open(demo_root / "montage" / "pre_post_interleaved.png"))
    assert pp.shape == (2 * (16 + g), 4 * (16 + g), 3)
    pre, post = run.labels()[0], run.final_label
    for r, layer in enumerate(cfg.visualize.prepost_layers):
        for c in range(cfg.visualize.prepost_channels):
            for j, label in enumerate((pre, post)):
                key = vis_key(run, label, ChannelAddress(layer, c))
                cell = np.asarray(Image.open(demo_root / "vis" / f"{key}.png"))
                y, x = r * (16 + g) + g, (2 * c + j) * (16 + g) + g
                assert np.array_equal(pp[y : y + 16, x : x + 16], cell)


def test_montage_missing_cell(demo_root, tmp_path, capsys):
    root = tmp_path / "copy"
    shutil.copytree(demo_root, root)
    run = Run(parse_config(TINY.read_text(), base=TINY.parent), root)
    victim = root / "vis" / f"{vis_key(run, 'it0010', ChannelAddress('mixed4/branch1/b3x3', 0))}.png"
    victim.unlink()
    args = ("montage", "--config", TINY, "--out", root, "--layout", "iterations-by-channels")
    assert vistra(*args) == 2
    assert victim.stem in capsys.readouterr().err
    assert vistra(*args, "--allow-gaps") == 0


def test_analysis_reports(demo_root):
    rows = list(csv.DictReader((demo_root / "analysis" / "timeline.csv").open()))
    assert len(rows) == 3 and "early_share" in rows[0]
    red = list(csv.DictReader((demo_root / "analysis" / "redundancy.csv").open()))
    assert [r["model"] for r in red] == ["target", "compare"]
    for name in ("target", "compare"):
        m = json.loads((demo_root / "analysis" / f"redundancy_{name}.json").read_text())
        assert len(m["matrix"]) == 3 and all(m["matrix"][i][i] == 1.0 for i in range(3))
    sweep = list(csv.DictReader((demo_root / "prior" / "lambda_sweep.csv").open()))
    assert len(sweep) == 4


def test_analyze_without_inputs(tmp_path, capsys):
    root = tmp_path / "bare"
    assert vistra("pretrain", "--config", TINY, "--out", root) == 0
    assert vistra("analyze", "--config", TINY, "--out", root) == 2  # no snapshots yet
    assert vistra("transfer", "--config", TINY, "--out", root) == 0
    assert vistra("analyze", "--config", TINY, "--out", root) == 2
    assert "insufficient inputs" in capsys.readouterr().err


def test_negative_lr_exit_code(tmp_path):
    cfg = tmp_path / "neg.yaml"
    cfg.write_text(TINY.read_text().replace("pretrain: {iterations: 30}", "pretrain: {iterations: 30, lr: -1}"))
    assert vistra("transfer", "--config", cfg, "--out", tmp_path / "o") == 2
