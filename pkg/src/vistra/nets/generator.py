"""Small decoder generator with per-stage noise injection, plus the encoder
used to train it as an autoencoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..tensor import Tensor
from .graph import LayerSpec, ModelGraph


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 32
    base_extent: int = 4
    widths: tuple[int, ...] = (48, 32, 16, 8)
    encoder_widths: tuple[int, ...] = (16, 32, 48, 64)
    noise_gain: float = 0.1

    @property
    def extent(self) -> int:
        return self.base_extent * 2 ** len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**{**d, "widths": tuple(d["widths"]), "encoder_widths": tuple(d["encoder_widths"])})


def build_generator(config: GeneratorConfig | None = None, seed: int = 0) -> ModelGraph:
    """latent -> dense -> 4x4 map -> [upsample, conv3x3, +noise, relu] x stages -> rgb sigmoid."""
    config = config or GeneratorConfig()
    if config.latent_dim <= 0 or any(w <= 0 for w in config.widths):
        raise ValueError("generator dimensions must be positive")
    b = config.base_extent
    c0 = config.widths[0]
    layers = [
        LayerSpec("latent", "input"),
        LayerSpec("fc", "dense", ("latent",), {"out": c0 * b * b, "activation": "relu"}),
        LayerSpec("fc/map", "to_map", ("fc",), {"shape": (c0, b, b)}),
    ]
    src, c_in = "fc/map", c0
    for i, width in enumerate(config.widths, start=1):
        layers += [
            LayerSpec(f"stage{i}/up", "upsample", (src,)),
            LayerSpec(f"stage{i}/conv", "conv_bias", (f"stage{i}/up",), {"out": width, "k": 3, "in": c_in}),
            LayerSpec(f"stage{i}/noise", "noise", (f"stage{i}/conv",), {"channels": width}),
            LayerSpec(f"stage{i}/act", "relu", (f"stage{i}/noise",)),
        ]
        src, c_in = f"stage{i}/act", width
    layers.append(LayerSpec("rgb", "conv_bias", (src,), {"out": 3, "k": 1, "in": c_in, "activation": "sigmoid"}))

    graph = ModelGraph("generator", config.to_dict(), layers, (config.latent_dim,))
    rng = np.random.default_rng(seed)
    graph.params["fc/weight"] = _he(rng, (config.latent_dim, c0 * b * b), config.latent_dim)
    graph.params["fc/bias"] = np.zeros(c0 * b * b, np.float32)
    for spec in layers:
        if spec.kind == "conv_bias":
            k, out, cin = spec.attrs["k"], spec.attrs["out"], spec.attrs["in"]
            graph.params[f"{spec.name}/kernel"] = _he(rng, (out, cin, k, k), cin * k * k)
            graph.params[f"{spec.name}/bias"] = np.zeros(out, np.float32)
        elif spec.kind == "noise":
            graph.params[f"{spec.name}/gain"] = np.full(spec.attrs["channels"], config.noise_gain, np.float32)
    return graph


def build_encoder(config: GeneratorConfig | None = None, seed: int = 1) -> ModelGraph:
    """Strided conv stack mapping a generator-sized image to a latent vector."""
    config = config or GeneratorConfig()
    ext = config.extent
    layers = [LayerSpec("input", "input")]
    src, c_in, size = "input", 3, ext
    for i, width in enumerate(config.encoder_widths, start=1):
        layers.append(
            LayerSpec(f"enc{i}", "conv_bias", (src,), {"out": width, "k": 3, "in": c_in, "stride": 2, "activation": "relu"})
        )
        src, c_in, size = f"enc{i}", width, size // 2
    layers += [
        LayerSpec("flat", "flatten", (src,)),
        LayerSpec("code", "dense", ("flat",), {"out": config.latent_dim}),
    ]
    graph = ModelGraph("encoder", {**config.to_dict(), "role": "encoder"}, layers, (3, ext, ext))
    rng = np.random.default_rng(seed)
    for spec in layers:
        if spec.kind == "conv_bias":
            k, out, cin = spec.attrs["k"], spec.attrs["out"], spec.attrs["in"]
            graph.params[f"{spec.name}/kernel"] = _he(rng, (out, cin, k, k), cin * k * k)
            graph.params[f"{spec.name}/bias"] = np.zeros(out, np.float32)
    flat = c_in * size * size
    graph.params["code/weight"] = (rng.standard_normal((flat, config.latent_dim)) / np.sqrt(flat)).astype(np.float32)
    graph.params["code/bias"] = np.zeros(config.latent_dim, np.float32)
    return graph


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def generate(generator: ModelGraph, w, noise_seed: int | np.random.Generator, params=None) -> Tensor:
    """Render latent(s) ``w`` (shape (d,) or (N, d)) to images in [0, 1].

    Noise maps are drawn fresh from ``noise_seed``; the same seed gives the
    same image.
    """
    w = w if isinstance(w, Tensor) else Tensor(w)
    d = generator.input_shape[0]
    if w.shape[-1] != d or w.ndim not in (1, 2):
        raise ValueError(f"latent must have length {d}, got shape {w.shape}")
    if w.ndim == 1:
        w = w.reshape(1, d)
    rng = noise_seed if isinstance(noise_seed, np.random.Generator) else np.random.default_rng(noise_seed)
    return generator.forward(w, ("rgb",), noise_rng=rng, params=params)["rgb"]


def encode(encoder: ModelGraph, images, params=None) -> Tensor:
    return encoder.forward(images, ("code",), params=params)["code"]
