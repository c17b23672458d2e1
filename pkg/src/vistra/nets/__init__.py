from .generator import GeneratorConfig, build_encoder, build_generator, encode, generate
from .graph import ChannelAddress, LayerSpec, ModelGraph, UnknownLayerError, config_digest
from .recognition import (
    BlockWidths,
    HeadSpec,
    RecognitionConfig,
    build_recognition_net,
    channel_objective,
    forward_to_layer,
    head_loss,
    logits,
    loss_categorical,
    loss_mean_binary,
    predict,
    replace_head,
)

__all__ = [
    "BlockWidths",
    "ChannelAddress",
    "GeneratorConfig",
    "HeadSpec",
    "LayerSpec",
    "ModelGraph",
    "RecognitionConfig",
    "UnknownLayerError",
    "build_encoder",
    "build_generator",
    "build_recognition_net",
    "channel_objective",
    "config_digest",
    "encode",
    "forward_to_layer",
    "generate",
    "head_loss",
    "logits",
    "loss_categorical",
    "loss_mean_binary",
    "predict",
    "replace_head",
]
