"""Procedural image-caption dataset generation and on-disk formats."""

from icar.synthdata.manifest import (
    DatasetManifest,
    ManifestRecord,
    SceneSample,
    generate_dataset,
    load_dataset,
    load_manifest,
    read_ppm,
    regenerate_specs,
    split_dataset,
    write_ppm,
)
from icar.synthdata.scenes import (
    COLORS,
    EOS,
    PAD,
    SHAPES,
    VOCAB,
    SceneObject,
    SceneSpec,
    category_id,
    complexity_score,
    render_caption,
    render_scene,
    sample_scene_specs,
    tokenize,
)

__all__ = [
    "COLORS", "EOS", "PAD", "SHAPES", "VOCAB",
    "DatasetManifest", "ManifestRecord", "SceneObject", "SceneSample",
    "SceneSpec",
    "category_id", "complexity_score", "generate_dataset", "load_dataset",
    "load_manifest", "read_ppm", "regenerate_specs", "render_caption",
    "render_scene", "sample_scene_specs", "split_dataset", "tokenize",
    "write_ppm",
]
