"""Procedural scene specs: sampling, rendering, captions, vocabulary.

Scenes are colored geometric shapes on a mid-gray background placed on a
4x4 grid (no overlap by construction). Ground-truth complexity combines
object count and background noise; captions are template renderings that
uniquely identify each instance within a dataset.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, replace

import numpy as np

from icar.errors import ContractError

GRID = 4
GRID_CELLS = GRID * GRID

SHAPES = ("circle", "cross", "square", "triangle")
PLURALS = {"circle": "circles", "cross": "crosses", "square": "squares",
           "triangle": "triangles"}

COLORS = {
    "blue": (0.1, 0.2, 0.9),
    "cyan": (0.1, 0.85, 0.9),
    "green": (0.1, 0.8, 0.2),
    "magenta": (0.9, 0.1, 0.9),
    "orange": (1.0, 0.55, 0.1),
    "purple": (0.5, 0.1, 0.8),
    "red": (0.9, 0.1, 0.1),
    "yellow": (0.95, 0.9, 0.1),
}

SIZES = ("small", "large")

NUMBER_WORDS = ("one", "two", "three", "four", "five", "six", "seven",
                "eight", "nine", "ten", "eleven", "twelve", "thirteen",
                "fourteen", "fifteen", "sixteen")

PAD, EOS = "<pad>", "<eos>"

#: Fixed caption vocabulary; id 0 is padding, id 1 ends every sequence.
VOCAB = (
    (PAD, EOS)
    + ("and", "at", "column", "row")
    + SIZES
    + NUMBER_WORDS
    + tuple(sorted(COLORS))
    + SHAPES
    + tuple(sorted(PLURALS.values()))
)

_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int  # row-major index into the 4x4 grid
    size: str


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    background_noise: float
    seed: int  # 64-bit render seed; drives the noise pattern only
    caption_detail: int = 1

    @property
    def object_count(self) -> int:
        return len(self.objects)


def _derived_seed(label: str, *parts: int) -> int:
    payload = label + ":" + ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(payload.encode()).digest()[:8], "little")


def complexity_score(object_count: int, background_noise: float,
                     max_objects: int) -> float:
    """Ground-truth score: object count and noise contribute half each."""
    if max_objects > 1:
        count_term = (object_count - 1) / (max_objects - 1)
    else:
        count_term = 0.0
    return float(np.clip(0.5 * count_term + 0.5 * background_noise, 0.0, 1.0))


def sample_scene_spec(dataset_seed: int, instance_id: int, max_objects: int,
                      attempt: int = 0) -> SceneSpec:
    rng = np.random.default_rng(_derived_seed("spec", dataset_seed, instance_id, attempt))
    count = int(rng.integers(1, max_objects + 1))
    cells = rng.choice(GRID_CELLS, size=count, replace=False)
    color_names = sorted(COLORS)
    objects = tuple(
        SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=color_names[rng.integers(len(color_names))],
            cell=int(cell),
            size=SIZES[rng.integers(len(SIZES))],
        )
        for cell in cells
    )
    noise = float(rng.uniform(0.0, 1.0))
    return SceneSpec(
        objects=objects,
        background_noise=noise,
        seed=_derived_seed("render", dataset_seed, instance_id, attempt),
    )


def sample_scene_specs(dataset_seed: int, n_samples: int, max_objects: int) -> list:
    """Sample all specs for a dataset, resolving caption collisions.

    Colliding captions are first retried at higher detail (sizes, then grid
    positions); specs that remain textually identical are redrawn. The whole
    procedure is a pure function of its arguments.
    """
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    if not 1 <= max_objects <= GRID_CELLS:
        raise ContractError(
            f"max_objects must lie in [1, {GRID_CELLS}], got {max_objects}"
        )
    specs = [sample_scene_spec(dataset_seed, i, max_objects) for i in range(n_samples)]
    attempts = [0] * n_samples
    for _ in range(100):
        collided = _caption_collisions(specs)
        if not collided:
            return specs
        for group in collided:
            for i in group:
                if specs[i].caption_detail < 3:
                    specs[i] = replace(specs[i], caption_detail=specs[i].caption_detail + 1)
                else:
                    keep = min(group)
                    if i != keep:
                        attempts[i] += 1
                        specs[i] = sample_scene_spec(
                            dataset_seed, i, max_objects, attempt=attempts[i]
                        )
    raise ContractError("could not produce collision-free captions in 100 rounds")


def _caption_collisions(specs: list) -> list:
    by_text: dict[str, list[int]] = {}
    for i, spec in enumerate(specs):
        by_text.setdefault(render_caption(spec), []).append(i)
    return [idxs for idxs in by_text.values() if len(idxs) > 1]


def render_caption(spec: SceneSpec) -> str:
    """Template caption at the spec's detail level.

    Level 1 groups by color+shape ("two red circles and one blue square"),
    level 2 adds sizes, level 3 spells out each object with its grid cell.
    """
    if spec.caption_detail >= 3:
        parts = []
        for obj in sorted(spec.objects, key=lambda o: o.cell):
            row, col = divmod(obj.cell, GRID)
            parts.append(
                f"one {obj.size} {obj.color} {obj.shape} at row "
                f"{NUMBER_WORDS[row]} column {NUMBER_WORDS[col]}"
            )
        return " and ".join(parts)

    if spec.caption_detail == 2:
        keys = sorted((o.size, o.color, o.shape) for o in spec.objects)
        groups: dict[tuple, int] = {}
        for key in keys:
            groups[key] = groups.get(key, 0) + 1
        parts = [
            f"{NUMBER_WORDS[n - 1]} {size} {color} "
            f"{shape if n == 1 else PLURALS[shape]}"
            for (size, color, shape), n in groups.items()
        ]
        return " and ".join(parts)

    keys = sorted((o.color, o.shape) for o in spec.objects)
    groups = {}
    for key in keys:
        groups[key] = groups.get(key, 0) + 1
    parts = [
        f"{NUMBER_WORDS[n - 1]} {color} {shape if n == 1 else PLURALS[shape]}"
        for (color, shape), n in groups.items()
    ]
    return " and ".join(parts)


def tokenize(text: str) -> tuple:
    """Map a caption to vocabulary ids, ending with the <eos> id."""
    try:
        ids = tuple(_WORD_TO_ID[w] for w in text.split())
    except KeyError as exc:
        raise ContractError(f"word not in vocabulary: {exc.args[0]!r}") from exc
    return ids + (_WORD_TO_ID[EOS],)


def category_id(spec: SceneSpec) -> int:
    """Stable id of the sorted multiset of shape types present."""
    key = ",".join(sorted(o.shape for o in spec.objects))
    return zlib.crc32(key.encode())


def _shape_mask(shape: str, cell_px: int, radius: int) -> np.ndarray:
    c = (cell_px - 1) / 2.0
    yy, xx = np.mgrid[0:cell_px, 0:cell_px]
    dy, dx = yy - c, xx - c
    if shape == "circle":
        return dy**2 + dx**2 <= radius**2
    if shape == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if shape == "triangle":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= (dy + radius) / 2.0)
    if shape == "cross":
        bar = max(1, radius // 2)
        horiz = (np.abs(dy) <= bar) & (np.abs(dx) <= radius)
        vert = (np.abs(dx) <= bar) & (np.abs(dy) <= radius)
        return horiz | vert
    raise ContractError(f"unknown shape {shape!r}")


def render_scene(spec: SceneSpec, image_size: int) -> np.ndarray:
    """Rasterize a spec to a float image of shape (3, S, S) in [0, 1].

    Noise only perturbs the background, so object silhouettes stay crisp
    at every noise level.
    """
    if image_size % GRID != 0:
        raise ContractError(f"image_size must be a multiple of {GRID}")
    cell_px = image_size // GRID
    rng = np.random.default_rng(spec.seed)
    noise = spec.background_noise * rng.uniform(-0.5, 0.5, (image_size, image_size))
    img = np.clip(0.5 + noise, 0.0, 1.0)
    img = np.repeat(img[None, :, :], 3, axis=0)
    for obj in spec.objects:
        row, col = divmod(obj.cell, GRID)
        radius = max(1, cell_px // 2 - 1) if obj.size == "large" else max(1, cell_px // 4)
        mask = _shape_mask(obj.shape, cell_px, radius)
        y0, x0 = row * cell_px, col * cell_px
        block = img[:, y0:y0 + cell_px, x0:x0 + cell_px]
        for ch, value in enumerate(COLORS[obj.color]):
            block[ch][mask] = value
    return img
