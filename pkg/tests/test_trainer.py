import csv

import numpy as np
import pytest

from vistra.checkpoint import (
    Checkpoint,
    CheckpointDigestError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from vistra.data import DatasetSpec, generate
from vistra.nets import BlockWidths, GeneratorConfig, HeadSpec, RecognitionConfig, build_generator, build_recognition_net
from vistra.trainer import (
    TRANSFER_SCHEDULE,
    DivergenceError,
    SnapshotSchedule,
    TrainConfig,
    backbone_equal,
    pretrain,
    transfer,
    write_trace,
)

TINY = RecognitionConfig(
    input_extent=16,
    stem=(4, 4, 8),
    blocks=(BlockWidths(4, 4, 4, 2, 2, 2), BlockWidths(4, 4, 4, 2, 2, 2), BlockWidths(4, 4, 4, 2, 2, 2)),
)


@pytest.fixture(scope="module")
def shapes():
    return generate(DatasetSpec("source-shapes", 300, seed=0, extent=16))


@pytest.fixture(scope="module")
def faces():
    return generate(DatasetSpec("target-faces", 200, seed=0, extent=16))


@pytest.fixture(scope="module")
def pretrained(shapes):
    model = build_recognition_net(TINY, seed=0)
    ck, _ = pretrain(model, shapes, TrainConfig(iterations=30, seed=0))
    return ck


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        SnapshotSchedule((0, 10, 10))
    assert TrainConfig(batch_size=32, epochs=3).budget(100) == 12


def test_zero_lr_leaves_weights(shapes):
    model = build_recognition_net(TINY, seed=1)
    before = {k: v.copy() for k, v in model.params.items()}
    ck, _ = pretrain(model, shapes, TrainConfig(lr=0.0, iterations=5))
    assert all(np.array_equal(before[k], ck.params[k]) for k in before)


def test_loss_decreases(shapes):
    model = build_recognition_net(TINY, seed=2)
    _, trace = pretrain(model, shapes, TrainConfig(lr=3e-3, iterations=80, seed=2))
    losses = [r.loss for r in trace]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_pretrain_deterministic(shapes):
    runs = []
    for _ in range(2):
        ck, _ = pretrain(build_recognition_net(TINY, seed=3), shapes, TrainConfig(iterations=12, seed=3))
        runs.append(encode_checkpoint(ck))
    assert runs[0] == runs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_iteration(shapes):
    model = build_recognition_net(TINY, seed=4)
    with pytest.raises(DivergenceError, match="iteration") as err:
        pretrain(model, shapes, TrainConfig(lr=1e30, iterations=50))
    assert 1 <= err.value.iteration <= 50


def test_schedule_zero_is_input_backbone(pretrained, faces):
    snaps, _ = transfer(pretrained, faces, TrainConfig(batch_size=10, iterations=5, loss="binary"), SnapshotSchedule((0,)))
    assert len(snaps) == 1 and snaps[0].iteration == 0
    assert backbone_equal(snaps[0], pretrained)


def test_default_schedule_and_gradient_flow(pretrained, faces):
    seen = []
    snaps, trace = transfer(
        pretrained,
        faces,
        TrainConfig(batch_size=10, iterations=3000, loss="binary"),
        on_snapshot=lambda ck: seen.append(ck.iteration),
    )
    assert [s.iteration for s in snaps] == list(TRANSFER_SCHEDULE) == seen
    assert len(trace) == 3000
    assert backbone_equal(snaps[0], pretrained)
    k0, k10 = snaps[0].params["conv1/a3x3/kernel"], snaps[1].params["conv1/a3x3/kernel"]
    assert np.any(k0 != k10)


def test_schedule_beyond_budget(pretrained, faces):
    with pytest.raises(ValueError, match="beyond"):
        transfer(pretrained, faces, TrainConfig(batch_size=10, iterations=20, loss="binary"), SnapshotSchedule((0, 30)))


def test_transfer_digest_check(pretrained, faces):
    with pytest.raises(CheckpointDigestError):
        transfer(pretrained, faces, TrainConfig(iterations=1, loss="binary"), SnapshotSchedule((0,)), expected_digest="0" * 64)


def test_head_loss_mismatch(pretrained, faces):
    with pytest.raises(ValueError, match="does not match"):
        transfer(pretrained, faces, TrainConfig(iterations=1), SnapshotSchedule((0,)))


def test_trace_csv(tmp_path, shapes):
    _, trace = pretrain(build_recognition_net(TINY, seed=5), shapes, TrainConfig(iterations=3))
    path = write_trace(trace, tmp_path / "trace.csv")
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["iteration", "loss", "metric"]
    assert [int(r["iteration"]) for r in rows] == [1, 2, 3]


# ---------------------------------------------------------------- checkpoints

def test_save_load_save_identical(tmp_path, pretrained):
    a = save_checkpoint(pretrained, tmp_path / "a.ck")
    loaded = load_checkpoint(a, expected_digest=pretrained.digest)
    b = save_checkpoint(loaded, tmp_path / "b.ck")
    assert a.read_bytes() == b.read_bytes()
    model = loaded.model()
    assert np.array_equal(model.params["conv1/a3x3/kernel"], pretrained.params["conv1/a3x3/kernel"])
    assert loaded.optimizer.step == pretrained.optimizer.step


def test_generator_checkpoint_roundtrip(tmp_path):
    g = build_generator(GeneratorConfig(), seed=0)
    ck = Checkpoint.from_model(g, 0)
    path = save_checkpoint(ck, tmp_path / "g.ck")
    again = load_checkpoint(path).model()
    assert all(np.array_equal(g.params[k], again.params[k]) for k in g.params)


def test_corrupt_header_is_version_error(tmp_path, pretrained):
    data = bytearray(encode_checkpoint(pretrained))
    data[8] = 99  # version field
    p = tmp_path / "bad.ck"
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(p)
    data = bytearray(encode_checkpoint(pretrained))
    data[0:2] = b"XX"
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(p)


def test_truncated_file(tmp_path, pretrained):
    data = encode_checkpoint(pretrained)
    p = tmp_path / "short.ck"
    for cut in (5, 40, len(data) - 3):
        p.write_bytes(data[:cut])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(p)


def test_mismatched_architecture(tmp_path, pretrained):
    other = build_recognition_net(RecognitionConfig(), seed=0)
    path = save_checkpoint(pretrained, tmp_path / "a.ck")
    with pytest.raises(CheckpointDigestError):
        load_checkpoint(path, expected_digest=other.digest)
    forged = Checkpoint("recognition", other.config, 0, pretrained.params, pretrained.buffers)
    with pytest.raises(CheckpointDigestError):
        forged.model()


def test_head_spec_in_transfer_config(pretrained, faces):
    snaps, _ = transfer(
        pretrained, faces, TrainConfig(iterations=2, loss="binary"), SnapshotSchedule((0, 2)), head=HeadSpec(8, None, "sigmoid")
    )
    assert snaps[-1].config["head"] == {"classes": 8, "hidden": None, "activation": "sigmoid"}
