"""Deterministic synthetic-shapes detection dataset.

Scenes are square RGB images with 1..n filled shapes (rectangle, ellipse,
triangle by default) over a noisy background.  Annotation boxes are the
exact bounding boxes of the rasterized shapes, stored as fractions of the
image size in (x_tl, y_tl, w, h) form.

On-disk layout of a dataset directory:

    images/NNNNNN.ppm     binary P6, 8-bit
    annotations.jsonl     one JSON record per image, in index order
    manifest.json         format version, classes, split membership

Generation is a pure function of (seed, index): every scene draws from its
own rng stream, so datasets are reproducible bit for bit and scenes can be
generated in any order.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import BoxOffsets, decode_offsets, iou

MANIFEST_NAME = "manifest.json"
ANNOTATIONS_NAME = "annotations.jsonl"
IMAGES_DIR = "images"
PLACEMENT_RETRIES = 40


class DatasetError(Exception):
    """A dataset file is missing or malformed."""


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    class_names: tuple[str, ...] = ("rectangle", "ellipse", "triangle")
    n_min: int = 1
    n_max: int = 4
    size_min: float = 0.15
    size_max: float = 0.5
    max_overlap: float = 0.3
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(self.class_names) < 2:
            raise ValueError("need at least 2 classes")
        if not 0 <= self.n_min <= self.n_max:
            raise ValueError(f"bad object count range [{self.n_min}, {self.n_max}]")
        if not 0.0 < self.size_min <= self.size_max <= 1.0:
            raise ValueError(f"bad size range [{self.size_min}, {self.size_max}]")
        if int(self.size_min * self.image_size) < 3:
            raise ValueError("minimum object size below 3 pixels")


@dataclass
class AnnotatedImage:
    """Image in [0, 1] (values on the 1/255 grid) plus ground-truth objects."""

    image: np.ndarray  # (S, S, 3) float64
    objects: list[tuple[int, BoxOffsets]]

    @property
    def n_objects(self) -> int:
        return len(self.objects)


def _shape_mask(kind: str, w: int, h: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean (h, w) mask for one shape filling its placement box."""
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "ellipse":
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        rx, ry = max(cx, 0.5), max(cy, 0.5)
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    if kind == "triangle":
        # apex on the top edge, base along the bottom edge
        ax = rng.uniform(0.2, 0.8) * (w - 1)
        v0, v1, v2 = (ax, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)

        def edge(p, q):
            return (q[0] - p[0]) * (yy - p[1]) - (q[1] - p[1]) * (xx - p[0])

        e0, e1, e2 = edge(v0, v1), edge(v1, v2), edge(v2, v0)
        return (e0 <= 0) & (e1 <= 0) & (e2 <= 0)
    raise ValueError(f"unknown shape kind {kind!r}")


def _mask_bbox(mask: np.ndarray) -> Optional[tuple[int, int, int, int]]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-scene stream derived from (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_scene(rng: np.random.Generator, cfg: SceneConfig) -> AnnotatedImage:
    """Draw one scene; pure function of the rng state and config."""
    s = cfg.image_size
    base = rng.uniform(0.10, 0.35, size=3)
    img = base[None, None, :] + rng.uniform(-cfg.noise, cfg.noise, size=(s, s, 3))
    img = np.clip(img, 0.0, 0.45)

    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    objects: list[tuple[int, BoxOffsets]] = []
    colors: list[np.ndarray] = []
    for _ in range(n):
        class_id = int(rng.integers(len(cfg.class_names)))
        placed = None
        for _attempt in range(PLACEMENT_RETRIES):
            w = int(round(rng.uniform(cfg.size_min, cfg.size_max) * s))
            h = int(round(rng.uniform(cfg.size_min, cfg.size_max) * s))
            w, h = max(w, 3), max(h, 3)
            if w > s - 2 or h > s - 2:
                continue
            x0 = int(rng.integers(1, s - w))
            y0 = int(rng.integers(1, s - h))
            mask = _shape_mask(cfg.class_names[class_id], w, h, rng)
            bbox = _mask_bbox(mask)
            if bbox is None:
                continue
            bx0, by0, bx1, by1 = bbox
            box = BoxOffsets(
                (x0 + bx0) / s, (y0 + by0) / s, (bx1 - bx0 + 1) / s, (by1 - by0 + 1) / s
            )
            candidate = decode_offsets(box)
            if all(iou(candidate, decode_offsets(b)) <= cfg.max_overlap for _, b in objects):
                placed = (x0, y0, mask, box)
                break
            placed = placed or (x0, y0, mask, box)  # keep first try as fallback
        if placed is None:
            continue
        x0, y0, mask, box = placed
        color = rng.uniform(0.5, 0.95, size=3)
        for _ in range(8):  # nudge toward pairwise-distinct fills
            if all(np.abs(color - c).max() >= 0.08 for c in colors):
                break
            color = rng.uniform(0.5, 0.95, size=3)
        colors.append(color)
        region = img[y0 : y0 + mask.shape[0], x0 : x0 + mask.shape[1]]
        region[mask] = color
        objects.append((class_id, box))

    quantized = np.rint(img * 255.0).astype(np.uint8)
    return AnnotatedImage(image=quantized.astype(np.float64) / 255.0, objects=objects)


def generate_dataset(cfg: SceneConfig, count: int, start_index: int = 0) -> list[AnnotatedImage]:
    return [generate_scene(scene_rng(cfg.seed, start_index + i), cfg) for i in range(count)]


# ---------------------------------------------------------------------------
# pixel formats: binary portable pixmap / graymap


def write_ppm(path, image01: np.ndarray) -> None:
    """8-bit binary P6 from an (H, W, 3) array of values in [0, 1]."""
    data = np.rint(np.clip(image01, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise DatasetError(f"{path}: not a binary P6 file")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as e:
        raise DatasetError(f"{path}: bad P6 header") from e
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    pixels = parts[3][: w * h * 3]
    if len(pixels) != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, gray01: np.ndarray) -> None:
    """8-bit binary P5 from an (H, W) array of values in [0, 1]."""
    data = np.rint(np.clip(gray01, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def write_attention_map(path, attention: np.ndarray) -> None:
    """Min-max normalize one attention map and dump it as P5."""
    lo, hi = float(attention.min()), float(attention.max())
    scaled = (attention - lo) / (hi - lo) if hi > lo else np.zeros_like(attention)
    write_pgm(path, scaled)


# ---------------------------------------------------------------------------
# dataset directory io


def _record_name(index: int) -> str:
    return f"{IMAGES_DIR}/{index:06d}.ppm"


def write_dataset(
    directory,
    scenes: Sequence[AnnotatedImage],
    splits: Optional[dict[str, list[int]]] = None,
    class_names: Optional[Sequence[str]] = None,
    metadata: Optional[dict] = None,
) -> None:
    """Write scenes plus manifest; splits map split name -> scene indices."""
    os.makedirs(os.path.join(directory, IMAGES_DIR), exist_ok=True)
    records = []
    for i, scene in enumerate(scenes):
        name = _record_name(i)
        write_ppm(os.path.join(directory, name), scene.image)
        records.append(
            {
                "image": name,
                "objects": [
                    {"class": cls, "x": b.x_tl, "y": b.y_tl, "w": b.w, "h": b.h}
                    for cls, b in scene.objects
                ],
            }
        )
    with open(os.path.join(directory, ANNOTATIONS_NAME), "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    manifest = {
        "format_version": 1,
        "count": len(scenes),
        "classes": list(class_names) if class_names is not None else None,
        "splits": {k: sorted(v) for k, v in (splits or {}).items()},
        "metadata": metadata or {},
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(directory) -> dict:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise DatasetError(f"{path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed manifest: {e}") from e


def read_dataset(directory, split: Optional[str] = None) -> list[AnnotatedImage]:
    """Load scenes (optionally one split); inverse of write_dataset."""
    manifest = read_manifest(directory)
    ann_path = os.path.join(directory, ANNOTATIONS_NAME)
    scenes = []
    try:
        with open(ann_path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DatasetError(f"{ann_path}: {e}") from e
    for idx, line in enumerate(lines):
        try:
            rec = json.loads(line)
            objects = [
                (int(o["class"]), BoxOffsets(float(o["x"]), float(o["y"]), float(o["w"]), float(o["h"])))
                for o in rec["objects"]
            ]
            image = read_ppm(os.path.join(directory, rec["image"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"{ann_path}: record {idx}: {e}") from e
        scenes.append(AnnotatedImage(image=image, objects=objects))
    if split is not None:
        splits = manifest.get("splits", {})
        if split not in splits:
            raise DatasetError(f"{directory}: no split named {split!r}")
        indices = splits[split]
        bad = [i for i in indices if not 0 <= i < len(scenes)]
        if bad:
            raise DatasetError(f"{directory}: split {split!r} references missing records {bad}")
        return [scenes[i] for i in indices]
    return scenes
