"""Mini-Inception recognition network, classifier heads, objectives and losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..tensor import Tensor, ops
from .graph import ChannelAddress, LayerSpec, ModelGraph


@dataclass(frozen=True)
class BlockWidths:
    """Output widths of one Inception-style block.

    branch0: 1x1; branch1: 1x1 -> 3x3; branch2: 1x1 -> 3x3 -> 3x3 (a 5x5
    receptive field); branch3: 3x3 avg-pool -> 1x1.
    """

    b0: int
    b1_reduce: int
    b1: int
    b2_reduce: int
    b2: int
    b3: int

    @property
    def out(self) -> int:
        return self.b0 + self.b1 + self.b2 + self.b3


@dataclass(frozen=True)
class HeadSpec:
    """``dense(hidden, relu) -> dense(classes)``; ``hidden=None`` keeps only
    the output layer."""

    classes: int
    hidden: int | None = 1024
    activation: str = "softmax"

    def __post_init__(self):
        if self.classes <= 0:
            raise ValueError(f"class count must be positive, got {self.classes}")
        if self.hidden is not None and self.hidden <= 0:
            raise ValueError(f"hidden width must be positive, got {self.hidden}")
        if self.activation not in ("softmax", "sigmoid"):
            raise ValueError(f"head activation must be softmax or sigmoid, got {self.activation!r}")

    @property
    def loss(self) -> str:
        return "categorical" if self.activation == "softmax" else "binary"


DEFAULT_BLOCKS = (
    BlockWidths(16, 16, 24, 8, 12, 8),
    BlockWidths(32, 32, 48, 16, 24, 24),
    BlockWidths(48, 48, 64, 24, 32, 32),
)


@dataclass(frozen=True)
class RecognitionConfig:
    input_extent: int = 64
    stem: tuple[int, int, int] = (16, 16, 32)
    blocks: tuple[BlockWidths, ...] = DEFAULT_BLOCKS
    head: HeadSpec = field(default_factory=lambda: HeadSpec(classes=10))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem"] = list(self.stem)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RecognitionConfig":
        return cls(
            input_extent=d["input_extent"],
            stem=tuple(d["stem"]),
            blocks=tuple(BlockWidths(**b) for b in d["blocks"]),
            head=HeadSpec(**d["head"]),
        )

    def with_head(self, head: HeadSpec) -> "RecognitionConfig":
        return RecognitionConfig(self.input_extent, self.stem, self.blocks, head)


BLOCK_NAMES = ("mixed3", "mixed4", "mixed5")


def _conv(name, src, out, k, stride=1):
    return LayerSpec(name, "conv_bn_relu", (src,), {"out": out, "k": k, "stride": stride})


def _block_layers(name: str, src: str, w: BlockWidths) -> list[LayerSpec]:
    return [
        _conv(f"{name}/branch0/a1x1", src, w.b0, 1),
        _conv(f"{name}/branch1/a1x1", src, w.b1_reduce, 1),
        _conv(f"{name}/branch1/b3x3", f"{name}/branch1/a1x1", w.b1, 3),
        _conv(f"{name}/branch2/a1x1", src, w.b2_reduce, 1),
        _conv(f"{name}/branch2/b3x3", f"{name}/branch2/a1x1", w.b2, 3),
        _conv(f"{name}/branch2/c3x3", f"{name}/branch2/b3x3", w.b2, 3),
        LayerSpec(f"{name}/branch3/pool", "avgpool", (src,), {"size": 3, "stride": 1, "padding": "same"}),
        _conv(f"{name}/branch3/b1x1", f"{name}/branch3/pool", w.b3, 1),
        LayerSpec(
            name,
            "concat",
            (f"{name}/branch0/a1x1", f"{name}/branch1/b3x3", f"{name}/branch2/c3x3", f"{name}/branch3/b1x1"),
        ),
    ]


def _head_layers(head: HeadSpec, src: str) -> list[LayerSpec]:
    layers = []
    if head.hidden is not None:
        layers.append(LayerSpec("head/hidden", "dense", (src,), {"out": head.hidden, "activation": "relu"}))
        src = "head/hidden"
    layers.append(LayerSpec("head/logits", "dense", (src,), {"out": head.classes}))
    return layers


def build_recognition_net(config: RecognitionConfig | None = None, seed: int = 0) -> ModelGraph:
    config = config or RecognitionConfig()
    widths = [*config.stem, *(v for b in config.blocks for v in asdict(b).values())]
    if any(w <= 0 for w in widths):
        raise ValueError(f"all layer widths must be positive, got {widths}")
    ext = config.input_extent
    if ext & (ext - 1) or ext < 16:
        raise ValueError(f"input extent must be a power of two >= 16, got {ext}")
    if len(config.blocks) != len(BLOCK_NAMES):
        raise ValueError(f"expected {len(BLOCK_NAMES)} blocks, got {len(config.blocks)}")

    if len(config.stem) != 3:
        raise ValueError(f"stem needs three widths, got {config.stem}")
    layers = [
        LayerSpec("input", "input"),
        _conv("conv1/a3x3", "input", config.stem[0], 3, stride=2),
        LayerSpec("pool1", "avgpool", ("conv1/a3x3",), {"size": 2}),
        _conv("conv2/b1x1", "pool1", config.stem[1], 1),
        _conv("conv2/c3x3", "conv2/b1x1", config.stem[2], 3),
    ]
    src = "conv2/c3x3"
    for i, (name, widths_) in enumerate(zip(BLOCK_NAMES, config.blocks)):
        layers += _block_layers(name, src, widths_)
        src = name
        if i < len(config.blocks) - 1:
            layers.append(LayerSpec(f"pool{name[-1]}", "avgpool", (name,), {"size": 2}))
            src = f"pool{name[-1]}"
    layers.append(LayerSpec("gap", "gap", (src,)))
    layers += _head_layers(config.head, "gap")

    graph = ModelGraph("recognition", config.to_dict(), layers, (3, ext, ext))
    _init_params(graph, np.random.default_rng(seed))
    return graph


def _channels_in(graph: ModelGraph, name: str) -> int:
    spec = graph.layer(name)
    if spec.kind in ("conv_bn_relu", "conv_bias", "dense"):
        return spec.attrs["out"]
    if spec.kind == "input":
        return graph.input_shape[0]
    if spec.kind == "concat":
        return sum(_channels_in(graph, i) for i in spec.inputs)
    return _channels_in(graph, spec.inputs[0])


def _init_params(graph: ModelGraph, rng: np.random.Generator) -> None:
    for spec in graph.layers:
        if spec.kind == "conv_bn_relu":
            c_in = _channels_in(graph, spec.inputs[0])
            out, k = spec.attrs["out"], spec.attrs["k"]
            std = np.sqrt(2.0 / (c_in * k * k))
            graph.params[f"{spec.name}/kernel"] = (rng.standard_normal((out, c_in, k, k)) * std).astype(np.float32)
            graph.params[f"{spec.name}/gamma"] = np.ones(out, np.float32)
            graph.params[f"{spec.name}/beta"] = np.zeros(out, np.float32)
            graph.buffers[f"{spec.name}/mean"] = np.zeros(out, np.float32)
            graph.buffers[f"{spec.name}/var"] = np.ones(out, np.float32)
        elif spec.kind == "dense":
            c_in = _channels_in(graph, spec.inputs[0])
            out = spec.attrs["out"]
            std = np.sqrt(2.0 / c_in) if spec.attrs.get("activation") == "relu" else 0.01
            graph.params[f"{spec.name}/weight"] = (rng.standard_normal((c_in, out)) * std).astype(np.float32)
            graph.params[f"{spec.name}/bias"] = np.zeros(out, np.float32)


def replace_head(graph: ModelGraph, head: HeadSpec, seed: int) -> ModelGraph:
    """Copy ``graph`` with a freshly initialized head.

    Head weights are Gaussian with std 0.01 and zero bias.
    """
    config = RecognitionConfig.from_dict(graph.config).with_head(head)
    backbone = [layer for layer in graph.layers if not layer.name.startswith("head/")]
    layers = backbone + _head_layers(head, "gap")
    new = ModelGraph("recognition", config.to_dict(), layers, graph.input_shape)
    new.params = {k: v.copy() for k, v in graph.params.items() if not k.startswith("head/")}
    new.buffers = {k: v.copy() for k, v in graph.buffers.items()}
    rng = np.random.default_rng(seed)
    for spec in layers:
        if spec.name.startswith("head/"):
            c_in = _channels_in(new, spec.inputs[0])
            out = spec.attrs["out"]
            new.params[f"{spec.name}/weight"] = (rng.standard_normal((c_in, out)) * 0.01).astype(np.float32)
            new.params[f"{spec.name}/bias"] = np.zeros(out, np.float32)
    return new


# ---------------------------------------------------------------- objectives

def forward_to_layer(model: ModelGraph, image, addr: ChannelAddress, pre_activation: bool = False) -> Tensor:
    """(N, H, W) map of one channel, after the relu unless ``pre_activation``."""
    model.resolve(addr)
    fmap = model.forward(image, (addr.layer,), pre_activation=pre_activation)[addr.layer]
    return fmap[:, addr.channel]


def channel_objective(model: ModelGraph, addr: ChannelAddress, pre_activation: bool = False):
    """Average-pooled activation of one channel as a function of the image."""
    model.resolve(addr)

    def objective(image) -> Tensor:
        return ops.mean(forward_to_layer(model, image, addr, pre_activation))

    return objective


def logits(model: ModelGraph, images, training: bool = False, params=None) -> Tensor:
    return model.forward(images, ("head/logits",), training=training, params=params)["head/logits"]


def predict(model: ModelGraph, images) -> np.ndarray:
    """Class probabilities (softmax head) or attribute probabilities (sigmoid head)."""
    z = logits(model, images).data
    head = HeadSpec(**model.config["head"])
    return ops.softmax(z) if head.activation == "softmax" else ops._sigmoid(z)


def loss_categorical(logits_: Tensor, labels) -> Tensor:
    return ops.softmax_cross_entropy(logits_, labels)


def loss_mean_binary(predictions: Tensor, attributes) -> Tensor:
    """Mean coordinate-wise binary cross-entropy of sigmoid outputs."""
    return ops.binary_cross_entropy(predictions, attributes)


def head_loss(model: ModelGraph, logits_: Tensor, targets) -> Tensor:
    """Training loss matching the head's output activation (computed from
    logits for numerical stability)."""
    if model.config["head"]["activation"] == "softmax":
        return ops.softmax_cross_entropy(logits_, targets)
    return ops.sigmoid_binary_cross_entropy(logits_, targets)
