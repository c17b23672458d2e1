"""Named layer graphs with per-channel addressing.

A :class:`ModelGraph` is a list of :class:`LayerSpec` in topological order
plus parameter and buffer stores keyed by ``"<layer>/<slot>"``. The graph is
interpreted by :meth:`ModelGraph.forward`, which only evaluates the layers
the requested outputs depend on.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..tensor import Tensor, ops

# Layer kinds whose outputs are channel-addressable feature maps.
CONV_KINDS = ("conv_bn_relu",)


class UnknownLayerError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass(frozen=True, order=True)
class ChannelAddress:
    layer: str
    channel: int

    def __str__(self) -> str:
        return f"{self.layer}:{self.channel}"

    @classmethod
    def parse(cls, text: str) -> "ChannelAddress":
        layer, sep, channel = text.rpartition(":")
        if not sep or not layer or not channel.isdigit():
            raise ValueError(f"channel address must look like 'layer:index', got {text!r}")
        return cls(layer, int(channel))


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class ModelGraph:
    def __init__(self, kind: str, config: dict, layers: list[LayerSpec], input_shape: tuple[int, ...]):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        seen: set[str] = set()
        for layer in layers:
            missing = [i for i in layer.inputs if i not in seen]
            if missing:
                raise ValueError(f"layer {layer.name!r} reads {missing} before they are defined")
            seen.add(layer.name)
        self.kind = kind
        self.config = config
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._by_name = {layer.name: layer for layer in layers}
        self._deps_cache: dict[tuple[str, ...], list[LayerSpec]] = {}

    # ------------------------------------------------------------ structure

    @property
    def digest(self) -> str:
        return config_digest(self.config)

    def layer(self, name: str) -> LayerSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownLayerError(
                f"unknown layer {name!r}; valid channel layers: {', '.join(self.conv_layers())}"
            ) from None

    def conv_layers(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.kind in CONV_KINDS]

    def channel_count(self, name: str) -> int:
        spec = self.layer(name)
        if spec.kind not in CONV_KINDS:
            raise UnknownLayerError(f"layer {name!r} is not a convolutional layer; valid: {', '.join(self.conv_layers())}")
        return spec.attrs["out"]

    def addresses(self, layer: str | None = None) -> Iterator[ChannelAddress]:
        for name in [layer] if layer else self.conv_layers():
            for c in range(self.channel_count(name)):
                yield ChannelAddress(name, c)

    def resolve(self, addr: ChannelAddress) -> ChannelAddress:
        n = self.channel_count(addr.layer)
        if not 0 <= addr.channel < n:
            raise UnknownLayerError(f"channel {addr.channel} out of range for {addr.layer!r} ({n} channels)")
        return addr

    def parameter_count(self, prefix: str | None = None) -> int:
        return sum(p.size for k, p in self.params.items() if prefix is None or k.startswith(prefix))

    def copy(self) -> "ModelGraph":
        other = copy.copy(self)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other._deps_cache = {}
        return other

    def _schedule(self, outputs: tuple[str, ...]) -> list[LayerSpec]:
        plan = self._deps_cache.get(outputs)
        if plan is None:
            need: set[str] = set()
            stack = [self.layer(o).name for o in outputs]
            while stack:
                name = stack.pop()
                if name not in need:
                    need.add(name)
                    stack.extend(self._by_name[name].inputs)
            plan = [layer for layer in self.layers if layer.name in need]
            self._deps_cache[outputs] = plan
        return plan

    # ------------------------------------------------------------ evaluation

    def forward(
        self,
        x,
        outputs: tuple[str, ...] | list[str],
        *,
        training: bool = False,
        params: dict[str, Tensor] | None = None,
        noise_rng: np.random.Generator | None = None,
        pre_activation: bool = False,
    ) -> dict[str, Tensor]:
        """Evaluate the layers ``outputs`` depend on.

        ``params`` supplies tensor views of the parameters (for training);
        otherwise they enter as constants. With ``pre_activation`` the conv
        units listed in ``outputs`` return their batch-norm output before the
        relu.
        """
        outputs = tuple(outputs)
        if params is None:
            params = {k: Tensor(v) for k, v in self.params.items()}
        acts: dict[str, Tensor] = {}
        for spec in self._schedule(outputs):
            ins = [acts[i] for i in spec.inputs]
            fn = _KINDS[spec.kind]
            want_pre = pre_activation and spec.name in outputs
            acts[spec.name] = fn(self, spec, ins, x, params, training, noise_rng, want_pre)
        return {o: acts[o] for o in outputs}


# ---------------------------------------------------------------- layer kinds

def _input(g, spec, ins, x, p, training, rng, pre):
    x = x if isinstance(x, Tensor) else Tensor(x)
    expected = g.input_shape
    if tuple(x.shape[1:]) != expected:
        raise ValueError(f"input shape {tuple(x.shape[1:])} does not match model input {expected}")
    return x


def _conv_bn_relu(g, spec, ins, x, p, training, rng, pre):
    n = spec.name
    a = spec.attrs
    y = ops.conv2d(ins[0], p[f"{n}/kernel"], a.get("stride", 1), a.get("padding", "same"))
    y = ops.batch_norm(y, p[f"{n}/gamma"], p[f"{n}/beta"], g.buffers[f"{n}/mean"], g.buffers[f"{n}/var"], training)
    return y if pre else ops.relu(y)


def _conv_bias(g, spec, ins, x, p, training, rng, pre):
    n = spec.name
    a = spec.attrs
    y = ops.conv2d(ins[0], p[f"{n}/kernel"], a.get("stride", 1), a.get("padding", "same"))
    y = ops.add(y, ops.reshape(p[f"{n}/bias"], (1, -1, 1, 1)))
    act = a.get("activation")
    if act == "relu" and not pre:
        y = ops.relu(y)
    elif act == "sigmoid" and not pre:
        y = ops.sigmoid(y)
    return y


def _avgpool(g, spec, ins, x, p, training, rng, pre):
    a = spec.attrs
    return ops.avg_pool2d(ins[0], a["size"], a.get("stride"), a.get("padding", "valid"))


def _concat(g, spec, ins, x, p, training, rng, pre):
    return ops.concat(ins, axis=1)


def _gap(g, spec, ins, x, p, training, rng, pre):
    return ops.global_avg_pool(ins[0])


def _flatten(g, spec, ins, x, p, training, rng, pre):
    return ops.reshape(ins[0], (ins[0].shape[0], -1))


def _dense(g, spec, ins, x, p, training, rng, pre):
    n = spec.name
    y = ops.dense(ins[0], p[f"{n}/weight"], p[f"{n}/bias"])
    act = spec.attrs.get("activation")
    if act == "relu" and not pre:
        y = ops.relu(y)
    return y


def _to_map(g, spec, ins, x, p, training, rng, pre):
    c, h, w = spec.attrs["shape"]
    return ops.reshape(ins[0], (ins[0].shape[0], c, h, w))


def _upsample(g, spec, ins, x, p, training, rng, pre):
    return ops.upsample2x(ins[0])


def _noise(g, spec, ins, x, p, training, rng, pre):
    if rng is None:
        raise ValueError(f"layer {spec.name!r} injects noise and needs a noise generator")
    h = ins[0]
    n, _, hh, ww = h.shape
    field_ = rng.standard_normal((n, 1, hh, ww)).astype(h.data.dtype)
    gain = ops.reshape(p[f"{spec.name}/gain"], (1, -1, 1, 1))
    return ops.add(h, ops.mul(gain, field_))


def _relu(g, spec, ins, x, p, training, rng, pre):
    return ins[0] if pre else ops.relu(ins[0])


_KINDS = {
    "input": _input,
    "conv_bn_relu": _conv_bn_relu,
    "conv_bias": _conv_bias,
    "avgpool": _avgpool,
    "concat": _concat,
    "gap": _gap,
    "flatten": _flatten,
    "dense": _dense,
    "to_map": _to_map,
    "upsample": _upsample,
    "noise": _noise,
    "relu": _relu,
}
