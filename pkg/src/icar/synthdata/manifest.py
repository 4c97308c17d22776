"""Dataset manifests, PPM image files, and split assignment.

The on-disk layout is a `manifest.jsonl` (one header line, then one record
per sample with fixed field names) next to an `images/` directory of
binary PPM (P6) files. Everything is byte-reproducible from the generator
arguments.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from icar.errors import ContractError, DataError
from icar.synthdata import scenes

MANIFEST_NAME = "manifest.jsonl"
FORMAT_VERSION = "1"
VALID_IMAGE_SIZES = (16, 32, 64)
UNSPLIT = ""


@dataclass(frozen=True)
class ManifestRecord:
    id: int
    path: str
    tokens: tuple
    text: str
    score: float
    label: bool  # True = complex
    category: int
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    version: str
    seed: int
    n_samples: int
    image_size: int
    max_objects: int
    vocab: tuple
    images_sha256: str
    records: tuple


@dataclass(frozen=True)
class SceneSample:
    image: np.ndarray  # (3, S, S) float64 in [0, 1]
    tokens: tuple
    text: str
    score: float
    label: bool
    instance_id: int
    category_id: int
    split: str


# ---------------------------------------------------------------------------
# PPM (P6) image files
# ---------------------------------------------------------------------------

def write_ppm(path: Path, image: np.ndarray) -> bytes:
    """Quantize a (3,S,S) float image to 8-bit P6 and write it; returns bytes."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"expected a (3,S,S) image, got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    pixels = np.round(image * 255.0).astype(np.uint8).transpose(1, 2, 0)
    payload = b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()
    path.write_bytes(payload)
    return payload


def read_ppm(path: Path) -> np.ndarray:
    """Decode a P6 file back to a (3,S,S) float image in [0,1]."""
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image file {path}: {exc}") from exc
    try:
        magic, dims, maxval, rest = raw.split(b"\n", 3)
    except ValueError:
        raise DataError(f"malformed PPM header in {path}") from None
    if magic != b"P6":
        raise DataError(f"{path} is not a binary PPM (magic {magic!r})")
    if maxval != b"255":
        raise DataError(f"{path} has unsupported maxval {maxval!r}")
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise DataError(f"malformed PPM dimensions in {path}") from None
    expected = w * h * 3
    if len(rest) != expected:
        raise DataError(
            f"truncated image file {path}: expected {expected} pixel bytes, "
            f"got {len(rest)}"
        )
    pixels = np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate_dataset(out_dir, seed: int, n_samples: int, image_size: int = 32,
                     max_objects: int = 6) -> DatasetManifest:
    """Generate images plus manifest under ``out_dir``.

    Byte-identical output for identical arguments. Split assignment is a
    separate step (see :func:`split_dataset`); fresh records carry an empty
    split field.
    """
    if image_size not in VALID_IMAGE_SIZES:
        raise ContractError(
            f"image_size must be one of {VALID_IMAGE_SIZES}, got {image_size}"
        )
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {image_dir}: {exc}") from exc

    specs = scenes.sample_scene_specs(seed, n_samples, max_objects)
    records = []
    digest = hashlib.sha256()
    for instance_id, spec in enumerate(specs):
        image = scenes.render_scene(spec, image_size)
        rel_path = f"images/{instance_id:05d}.ppm"
        payload = write_ppm(out_dir / rel_path, image)
        digest.update(hashlib.sha256(payload).digest())
        text = scenes.render_caption(spec)
        score = scenes.complexity_score(spec.object_count, spec.background_noise,
                                        max_objects)
        records.append(ManifestRecord(
            id=instance_id,
            path=rel_path,
            tokens=scenes.tokenize(text),
            text=text,
            score=score,
            label=score > 0.5,
            category=scenes.category_id(spec),
            split=UNSPLIT,
        ))
    manifest = DatasetManifest(
        version=FORMAT_VERSION,
        seed=seed,
        n_samples=n_samples,
        image_size=image_size,
        max_objects=max_objects,
        vocab=scenes.VOCAB,
        images_sha256=digest.hexdigest(),
        records=tuple(records),
    )
    write_manifest(out_dir / MANIFEST_NAME, manifest)
    return manifest


def regenerate_specs(manifest: DatasetManifest) -> list:
    """Re-derive the scene specs a manifest was generated from."""
    return scenes.sample_scene_specs(manifest.seed, manifest.n_samples,
                                     manifest.max_objects)


# ---------------------------------------------------------------------------
# manifest serialization
# ---------------------------------------------------------------------------

def write_manifest(path: Path, manifest: DatasetManifest) -> None:
    header = {
        "version": manifest.version,
        "seed": manifest.seed,
        "n_samples": manifest.n_samples,
        "image_size": manifest.image_size,
        "max_objects": manifest.max_objects,
        "vocab": list(manifest.vocab),
        "images_sha256": manifest.images_sha256,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for r in manifest.records:
        lines.append(json.dumps({
            "id": r.id,
            "path": r.path,
            "tokens": list(r.tokens),
            "text": r.text,
            "score": r.score,
            "label": r.label,
            "category": r.category,
            "split": r.split,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_RECORD_FIELDS = {"id", "path", "tokens", "text", "score", "label", "category",
                  "split"}


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise DataError(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
        raw_records = [json.loads(line) for line in lines[1:] if line]
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSONL: {exc}") from exc
    records = []
    seen = set()
    for raw in raw_records:
        if set(raw) != _RECORD_FIELDS:
            raise DataError(
                f"manifest record has unexpected fields: {sorted(raw)}"
            )
        if raw["id"] in seen:
            raise DataError(f"duplicate instance id {raw['id']} in {path}")
        seen.add(raw["id"])
        records.append(ManifestRecord(
            id=raw["id"],
            path=raw["path"],
            tokens=tuple(raw["tokens"]),
            text=raw["text"],
            score=raw["score"],
            label=raw["label"],
            category=raw["category"],
            split=raw["split"],
        ))
    return DatasetManifest(
        version=header["version"],
        seed=header["seed"],
        n_samples=header["n_samples"],
        image_size=header["image_size"],
        max_objects=header["max_objects"],
        vocab=tuple(header["vocab"]),
        images_sha256=header["images_sha256"],
        records=tuple(records),
    )


def load_dataset(manifest_path, verify_checksum: bool = True) -> list:
    """Load every sample of a generated dataset into memory."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    samples = []
    digest = hashlib.sha256()
    for r in sorted(manifest.records, key=lambda rec: rec.id):
        img_path = base / r.path
        if not img_path.exists():
            raise DataError(f"manifest references missing image file {img_path}")
        if verify_checksum:
            digest.update(hashlib.sha256(img_path.read_bytes()).digest())
        image = read_ppm(img_path)
        if image.shape != (3, manifest.image_size, manifest.image_size):
            raise DataError(
                f"image {img_path} has shape {image.shape}, manifest says "
                f"{(3, manifest.image_size, manifest.image_size)}"
            )
        samples.append(SceneSample(
            image=image,
            tokens=r.tokens,
            text=r.text,
            score=r.score,
            label=r.label,
            instance_id=r.id,
            category_id=r.category,
            split=r.split,
        ))
    if verify_checksum and digest.hexdigest() != manifest.images_sha256:
        raise DataError(
            f"image checksum mismatch for {manifest_path}: files on disk do "
            f"not match the manifest"
        )
    return samples


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def _largest_remainder(n: int, ratios: tuple) -> list:
    base = [math.floor(n * r) for r in ratios]
    remainders = [n * r - b for r, b in zip(ratios, base)]
    leftover = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def split_dataset(manifest: DatasetManifest,
                  ratios: tuple = (0.70, 0.15, 0.15),
                  seed: int = 0) -> DatasetManifest:
    """Assign train/val/test splits, stratified by the binary label.

    Split sizes match the ratios exactly (largest-remainder rounding);
    per-label allocations are rebalanced so totals stay exact while label
    proportions per split remain within a couple of samples of global.
    """
    if len(ratios) != 3:
        raise ContractError(f"expected 3 ratios, got {len(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(manifest.records)
    targets = _largest_remainder(n, ratios)
    if min(targets) < 1:
        raise ContractError(
            f"split of {n} samples at ratios {ratios} leaves an empty split "
            f"(sizes {targets})"
        )

    by_label = {False: [], True: []}
    for r in manifest.records:
        by_label[r.label].append(r.id)

    alloc = {}
    for label in (False, True):
        alloc[label] = _largest_remainder(len(by_label[label]), ratios)

    def totals():
        return [alloc[False][s] + alloc[True][s] for s in range(3)]

    while totals() != targets:
        t = totals()
        over = next(s for s in range(3) if t[s] > targets[s])
        under = next(s for s in range(3) if t[s] < targets[s])
        label = max((False, True), key=lambda lb: alloc[lb][over])
        alloc[label][over] -= 1
        alloc[label][under] += 1

    split_of = {}
    names = ("train", "val", "test")
    for label in (False, True):
        ids = np.array(sorted(by_label[label]))
        rng = np.random.default_rng([seed, int(label)])
        ids = ids[rng.permutation(len(ids))]
        start = 0
        for s, name in enumerate(names):
            for i in ids[start:start + alloc[label][s]]:
                split_of[int(i)] = name
            start += alloc[label][s]

    records = tuple(replace(r, split=split_of[r.id]) for r in manifest.records)
    return replace(manifest, records=records)
