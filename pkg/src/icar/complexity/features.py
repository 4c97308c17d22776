"""Handcrafted image-complexity features.

These are the classical baseline: cheap statistics that correlate with
perceived complexity without any learning. All four are deterministic
functions of the pixel grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from icar.errors import ContractError

EDGE_THRESHOLD = 0.1
COLOR_LEVELS = 4  # per channel -> 4**3 = 64 palette entries
PATCH = 4


@dataclass(frozen=True)
class ComplexityFeatures:
    pixel_entropy: float  # bits, in [0, 8]
    edge_density: float  # fraction of edge pixels, in [0, 1]
    color_diversity: float  # distinct quantized colors / 64, in (0, 1]
    patch_variance: float  # mean variance over 4x4 grayscale patches

    def as_array(self) -> np.ndarray:
        return np.array([self.pixel_entropy, self.edge_density,
                         self.color_diversity, self.patch_variance])


def _grayscale(image: np.ndarray) -> np.ndarray:
    return image.mean(axis=0)


def pixel_entropy(gray: np.ndarray) -> float:
    """Shannon entropy of the 256-bin grayscale histogram, in bits."""
    counts, _ = np.histogram(gray, bins=256, range=(0.0, 1.0))
    p = counts[counts > 0] / gray.size
    return float(-(p * np.log2(p)).sum())


def edge_density(gray: np.ndarray, threshold: float = EDGE_THRESHOLD) -> float:
    """Fraction of pixels whose 3x3 neighborhood contrast exceeds the threshold.

    Contrast at a pixel is the maximum absolute difference between the pixel
    and its 8 neighbors (replicate padding at the border), so a pixel-scale
    checkerboard is 100% edges.
    """
    padded = np.pad(gray, 1, mode="edge")
    contrast = np.zeros_like(gray)
    for di in (0, 1, 2):
        for dj in (0, 1, 2):
            if di == dj == 1:
                continue
            shifted = padded[di:di + gray.shape[0], dj:dj + gray.shape[1]]
            contrast = np.maximum(contrast, np.abs(gray - shifted))
    return float((contrast > threshold).mean())


def color_diversity(image: np.ndarray) -> float:
    """Distinct colors after 4-level-per-channel quantization, over 64."""
    q = np.minimum((image * COLOR_LEVELS).astype(np.int64), COLOR_LEVELS - 1)
    codes = q[0] * COLOR_LEVELS * COLOR_LEVELS + q[1] * COLOR_LEVELS + q[2]
    return len(np.unique(codes)) / float(COLOR_LEVELS ** 3)


def patch_variance(gray: np.ndarray, patch: int = PATCH) -> float:
    """Mean per-patch variance over non-overlapping ``patch``-square tiles."""
    h, w = gray.shape
    if h % patch or w % patch:
        raise ContractError(
            f"image size {gray.shape} not divisible into {patch}x{patch} patches"
        )
    tiles = gray.reshape(h // patch, patch, w // patch, patch)
    return float(tiles.var(axis=(1, 3)).mean())


def extract_features(image: np.ndarray) -> ComplexityFeatures:
    """Compute all four features for a (3,S,S) image with values in [0,1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"expected a (3,S,S) image, got {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ContractError(
            f"pixel values outside [0,1]: min {image.min()}, max {image.max()}"
        )
    gray = _grayscale(image)
    return ComplexityFeatures(
        pixel_entropy=pixel_entropy(gray),
        edge_density=edge_density(gray),
        color_diversity=color_diversity(image),
        patch_variance=patch_variance(gray),
    )
