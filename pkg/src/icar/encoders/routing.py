"""Complexity-routed image encoding: simple images exit early."""

from __future__ import annotations

import numpy as np

from icar.complexity.model import classify
from icar.encoders.vit import MiniViT, encode_image_at_exit
from icar.errors import ContractError


def encode_image_routed(vit: MiniViT, complexity_model, image: np.ndarray,
                        exit_layer_for_simple: int, threshold: float = 0.5,
                        sample_id: int = 0):
    """Classify, pick a depth, encode; returns (embedding, decision, layers_used).

    Simple images exit at ``exit_layer_for_simple``; complex ones run the
    full stack. ``complexity_model`` is anything classify() accepts: a
    binary head plus a forward producing 2 logits.
    """
    if exit_layer_for_simple not in vit.config.exit_layers:
        raise ContractError(
            f"exit layer {exit_layer_for_simple} not in exit_layers "
            f"{vit.config.exit_layers}"
        )
    decision = classify(complexity_model, image, threshold=threshold,
                        sample_id=sample_id)
    layers_used = exit_layer_for_simple if decision.is_simple else vit.config.depth
    embedding = encode_image_at_exit(vit, image, layers_used)
    return embedding, decision, layers_used
