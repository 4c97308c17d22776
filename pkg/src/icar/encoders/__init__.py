"""Vision and text encoders sharing one embedding space."""

from icar.encoders.routing import encode_image_routed
from icar.encoders.text import (
    TextEncoder,
    TextEncoderConfig,
    encode_text,
    pad_tokens,
)
from icar.encoders.vit import (
    MiniViT,
    VisionEncoderConfig,
    encode_image_at_exit,
    encode_image_full,
)

__all__ = [
    "MiniViT", "TextEncoder", "TextEncoderConfig", "VisionEncoderConfig",
    "encode_image_at_exit", "encode_image_full", "encode_image_routed",
    "encode_text", "pad_tokens",
]
