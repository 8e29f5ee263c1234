"""Datasets, class-disjoint splits, N-way K-shot episode sampling, and the
procedural synthetic dataset used for desk-scale verification.

Images are float32 arrays of shape (3, H, W) with values in [0, 1],
channel-first. Split assignment is per class, never per sample, so the
class sets of train/val/test are pairwise disjoint by construction.

Each synthetic class embeds its identity in one localized sub-part (a
class-unique shape/color combination placed inside a class-assigned home
cell of the image grid, with jittered position, size and color). All other
content (background color, texture noise, distractor shapes drawn from a
pool shared by every class) carries no class signal, so region-level
attribution has a checkable ground truth: the part's bounding box.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

SPLITS = ("train", "val", "test")


class EpisodeError(ValueError):
    """Episode request cannot be satisfied; message carries the counts."""


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int class ids
    class_names: list[str]
    split_of: dict[int, str]  # class id -> train | val | test
    part_boxes: Optional[np.ndarray] = None  # (n, 4) r0, c0, r1, c1 (half-open)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        bad = set(self.split_of.values()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split names {sorted(bad)}; use {SPLITS}")

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def classes_in_split(self, split: str) -> list[int]:
        return sorted(c for c, s in self.split_of.items() if s == split)

    def indices_of_class(self, class_id: int) -> np.ndarray:
        return np.nonzero(self.labels == class_id)[0]


@dataclass
class Episode:
    """One self-contained N-way K-shot task with episode-local labels 0..N-1."""

    n_way: int
    k_shot: int
    queries_per_class: int
    support_images: np.ndarray  # (N*K, 3, H, W), class-major order
    support_labels: np.ndarray  # (N*K,)
    query_images: np.ndarray    # (N*B, 3, H, W), class-major order
    query_labels: np.ndarray    # (N*B,)
    class_ids: list[int]        # episode-local label -> original class id
    support_indices: np.ndarray
    query_indices: np.ndarray


def sample_episode(
    dataset: LabeledDataset,
    split: str,
    n_way: int,
    k_shot: int,
    queries_per_class: int,
    rng: np.random.Generator,
    augment: Optional["AugmentPolicy"] = None,
) -> Episode:
    """Draw an episode from one split; the rng fully determines the draw.

    Support and query samples are disjoint within every class. ``augment``
    is applied to query images only and is intended for the training split.
    """
    classes = dataset.classes_in_split(split)
    if len(classes) < n_way:
        raise EpisodeError(
            f"split {split!r} has {len(classes)} classes, episode needs {n_way}"
        )
    chosen = rng.choice(np.asarray(classes), size=n_way, replace=False)
    need = k_shot + queries_per_class
    sup_imgs, sup_labels, sup_idx = [], [], []
    qry_imgs, qry_labels, qry_idx = [], [], []
    for local, cid in enumerate(chosen):
        pool = dataset.indices_of_class(int(cid))
        if len(pool) < need:
            raise EpisodeError(
                f"class {dataset.class_names[int(cid)]!r} has {len(pool)} samples, "
                f"episode needs {need} (K={k_shot} + B={queries_per_class})"
            )
        picked = rng.choice(pool, size=need, replace=False)
        for i in picked[:k_shot]:
            sup_imgs.append(dataset.images[i])
            sup_labels.append(local)
            sup_idx.append(i)
        for i in picked[k_shot:]:
            img = dataset.images[i]
            if augment is not None and augment.enabled:
                img = augment_query(img, rng, augment)
            qry_imgs.append(img)
            qry_labels.append(local)
            qry_idx.append(i)
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        queries_per_class=queries_per_class,
        support_images=np.stack(sup_imgs),
        support_labels=np.asarray(sup_labels, dtype=np.int64),
        query_images=np.stack(qry_imgs),
        query_labels=np.asarray(qry_labels, dtype=np.int64),
        class_ids=[int(c) for c in chosen],
        support_indices=np.asarray(sup_idx, dtype=np.int64),
        query_indices=np.asarray(qry_idx, dtype=np.int64),
    )


# --- query-set augmentation ---------------------------------------------------------

@dataclass
class AugmentPolicy:
    """Query-only augmentation: resized crop, color jitter, flip, erasing."""

    enabled: bool = True
    crop: bool = True
    crop_scale: tuple[float, float] = (0.6, 1.0)
    crop_ratio: tuple[float, float] = (0.75, 1.3333)
    jitter: bool = True
    brightness: float = 0.25
    contrast: float = 0.25
    saturation: float = 0.25
    flip: bool = True
    flip_prob: float = 0.5
    erase: bool = True
    erase_prob: float = 0.5
    erase_scale: tuple[float, float] = (0.02, 0.15)
    erase_ratio: tuple[float, float] = (0.4, 2.5)


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def erase_rect(image: np.ndarray, r0: int, c0: int, r1: int, c1: int, value) -> np.ndarray:
    """Replace the half-open rectangle with ``value``; everything else untouched."""
    out = image.copy()
    out[:, r0:r1, c0:c1] = value
    return out


def resize_bilinear(image: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Plain numpy bilinear resize (half-pixel grid), for augmentation only."""
    from .tensor.ops import _bilinear_coords

    h_out, w_out = hw
    h, w = image.shape[-2:]
    r0, r1, wr0, wr1 = _bilinear_coords(h, h_out)
    c0, c1, wc0, wc1 = _bilinear_coords(w, w_out)
    top = image[..., r0, :] * wr0[:, None] + image[..., r1, :] * wr1[:, None]
    return (top[..., c0] * wc0 + top[..., c1] * wc1).astype(image.dtype)


def random_resized_crop(image, rng, scale, ratio):
    _, h, w = image.shape
    area = h * w
    for _ in range(10):
        target_area = rng.uniform(*scale) * area
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        ch = int(round(np.sqrt(target_area / aspect)))
        cw = int(round(np.sqrt(target_area * aspect)))
        if 0 < ch <= h and 0 < cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = image[:, top : top + ch, left : left + cw]
            return resize_bilinear(crop, (h, w))
    return image.copy()


def color_jitter(image, rng, brightness, contrast, saturation):
    out = image.astype(np.float32, copy=True)
    if brightness > 0:
        out *= rng.uniform(1 - brightness, 1 + brightness)
    if contrast > 0:
        mean = out.mean()
        out = mean + (out - mean) * rng.uniform(1 - contrast, 1 + contrast)
    if saturation > 0:
        gray = out.mean(axis=0, keepdims=True)
        out = gray + (out - gray) * rng.uniform(1 - saturation, 1 + saturation)
    return out


def random_erase(image, rng, prob, scale, ratio):
    if rng.uniform() >= prob:
        return image
    _, h, w = image.shape
    for _ in range(10):
        target_area = rng.uniform(*scale) * h * w
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        eh = int(round(np.sqrt(target_area / aspect)))
        ew = int(round(np.sqrt(target_area * aspect)))
        if 0 < eh <= h and 0 < ew <= w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            fill = rng.uniform(size=(image.shape[0], eh, ew)).astype(image.dtype)
            return erase_rect(image, top, left, top + eh, left + ew, fill)
    return image


def augment_query(image: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Apply the augmentation pipeline to one query image; output stays in [0,1]."""
    if not policy.enabled:
        return image
    out = image
    if policy.crop:
        out = random_resized_crop(out, rng, policy.crop_scale, policy.crop_ratio)
    if policy.jitter:
        out = color_jitter(out, rng, policy.brightness, policy.contrast, policy.saturation)
    if policy.flip and rng.uniform() < policy.flip_prob:
        out = horizontal_flip(out)
    if policy.erase:
        out = random_erase(out, rng, policy.erase_prob, policy.erase_scale, policy.erase_ratio)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --- synthetic dataset ----------------------------------------------------------------

PART_SHAPES = ("disk", "square", "triangle", "ring", "diamond", "cross")

PART_COLORS = (
    (0.95, 0.15, 0.15),
    (0.15, 0.85, 0.20),
    (0.20, 0.35, 0.95),
    (0.95, 0.85, 0.15),
    (0.85, 0.20, 0.85),
    (0.15, 0.85, 0.85),
    (0.95, 0.55, 0.15),
    (0.55, 0.95, 0.45),
    (0.45, 0.15, 0.95),
    (0.90, 0.90, 0.90),
)

DISTRACTOR_COLORS = (
    (0.55, 0.55, 0.35),
    (0.35, 0.55, 0.55),
    (0.55, 0.35, 0.55),
    (0.45, 0.45, 0.45),
)


@dataclass
class SyntheticSpec:
    """Recipe for the procedural dataset; identical seeds give identical pixels."""

    n_classes: int = 10
    images_per_class: int = 40
    image_size: int = 32
    part_size: tuple[int, int] = (9, 13)  # min/max part diameter in px
    position_jitter: int = 3
    color_jitter: float = 0.06
    n_distractors: tuple[int, int] = (2, 3)
    noise_sigma: float = 0.03
    grid: int = 2  # home-cell grid along each image axis
    seed: int = 0
    split_fractions: tuple[int, int, int] = (6, 2, 2)  # classes per split


def _shape_mask(shape: str, size: int, radius: float, cy: float, cx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy * dy + dx * dx <= radius * radius
    if shape == "square":
        return (np.abs(dy) <= radius * 0.85) & (np.abs(dx) <= radius * 0.85)
    if shape == "triangle":
        return (dy >= -radius) & (np.abs(dx) <= (dy + radius) * 0.6) & (dy <= radius * 0.8)
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= radius * radius) & (d2 >= (radius * 0.45) ** 2)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius * 1.15
    if shape == "cross":
        arm = radius * 0.4
        inside = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
        return inside & ((np.abs(dy) <= arm) | (np.abs(dx) <= arm))
    raise ValueError(f"unknown shape {shape!r}")


def _paint(canvas: np.ndarray, mask: np.ndarray, color, rng) -> None:
    for ch in range(3):
        canvas[ch][mask] = np.clip(color[ch] + rng.normal(0, 0.02, size=int(mask.sum())), 0, 1)


def _place_in_cell(rng, cell_index: int, cell: int, radius: float, size: int) -> float:
    """A center coordinate inside one grid cell, kept clear of image borders."""
    lo = max(cell_index * cell + radius + 1, radius + 1)
    hi = min((cell_index + 1) * cell - radius - 1, size - radius - 1)
    if hi <= lo:
        return min(max(cell_index * cell + cell / 2.0, radius + 1), size - radius - 1)
    return rng.uniform(lo, hi)


def _class_recipes(spec: SyntheticSpec):
    """Assign each class a unique (shape, color) part and a home grid cell."""
    recipes = []
    cells = [(r, c) for r in range(spec.grid) for c in range(spec.grid)]
    for k in range(spec.n_classes):
        recipes.append(
            {
                "shape": PART_SHAPES[k % len(PART_SHAPES)],
                "color": PART_COLORS[k % len(PART_COLORS)],
                "cell": cells[k % len(cells)],
            }
        )
    return recipes


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Render the synthetic dataset described by ``spec``."""
    if spec.n_classes > len(PART_COLORS):
        raise ValueError(f"at most {len(PART_COLORS)} synthetic classes supported")
    if sum(spec.split_fractions) != spec.n_classes:
        raise ValueError(
            f"split fractions {spec.split_fractions} must sum to {spec.n_classes} classes"
        )
    if spec.part_size[1] >= spec.image_size - 3:
        raise ValueError(
            f"part diameter up to {spec.part_size[1]} cannot fit a "
            f"{spec.image_size}px image"
        )
    size = spec.image_size
    cell = size // spec.grid
    recipes = _class_recipes(spec)
    root = np.random.SeedSequence(spec.seed)
    streams = root.spawn(spec.n_classes * spec.images_per_class)

    images, labels, boxes = [], [], []
    for k, recipe in enumerate(recipes):
        for j in range(spec.images_per_class):
            rng = np.random.default_rng(streams[k * spec.images_per_class + j])
            canvas = np.empty((3, size, size), dtype=np.float64)
            base = rng.uniform(0.10, 0.45, size=3)
            for ch in range(3):
                canvas[ch] = base[ch]
            canvas += rng.normal(0, spec.noise_sigma, size=canvas.shape)

            # distractors: shared pool, placed outside the class home cell
            n_d = int(rng.integers(spec.n_distractors[0], spec.n_distractors[1] + 1))
            home_r, home_c = recipe["cell"]
            other_cells = [
                (r, c)
                for r in range(spec.grid)
                for c in range(spec.grid)
                if (r, c) != (home_r, home_c)
            ]
            for _ in range(n_d):
                dr, dc = other_cells[int(rng.integers(len(other_cells)))]
                radius = rng.uniform(0.08, 0.14) * size
                cy = _place_in_cell(rng, dr, cell, radius, size)
                cx = _place_in_cell(rng, dc, cell, radius, size)
                shape = PART_SHAPES[int(rng.integers(len(PART_SHAPES)))]
                color = DISTRACTOR_COLORS[int(rng.integers(len(DISTRACTOR_COLORS)))]
                _paint(canvas, _shape_mask(shape, size, radius, cy, cx), color, rng)

            # the distinctive part, jittered inside its home cell
            diameter = rng.uniform(*spec.part_size)
            radius = diameter / 2.0
            cy0 = home_r * cell + cell / 2.0
            cx0 = home_c * cell + cell / 2.0
            jit = spec.position_jitter
            cy = np.clip(cy0 + rng.uniform(-jit, jit), radius + 1, size - radius - 1)
            cx = np.clip(cx0 + rng.uniform(-jit, jit), radius + 1, size - radius - 1)
            color = np.clip(
                np.asarray(recipe["color"])
                + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3),
                0,
                1,
            )
            mask = _shape_mask(recipe["shape"], size, radius, cy, cx)
            _paint(canvas, mask, color, rng)

            rows, cols = np.nonzero(mask)
            boxes.append([rows.min(), cols.min(), rows.max() + 1, cols.max() + 1])
            images.append(np.clip(canvas, 0, 1).astype(np.float32))
            labels.append(k)

    n_train, n_val, _ = spec.split_fractions
    split_of = {}
    for k in range(spec.n_classes):
        split_of[k] = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
    return LabeledDataset(
        images=np.stack(images),
        labels=np.asarray(labels),
        class_names=[f"synthetic-{r['shape']}-{k}" for k, r in enumerate(recipes)],
        split_of=split_of,
        part_boxes=np.asarray(boxes, dtype=np.int64),
    )


# --- directory ingestion / export -------------------------------------------------------

def _hash_split(name: str) -> str:
    digest = int(hashlib.md5(name.encode("utf-8")).hexdigest(), 16) % 100
    return "train" if digest < 60 else ("val" if digest < 80 else "test")


def ingest_directory(root) -> LabeledDataset:
    """Build a dataset from <root>/<class>/<image>.png directories.

    A ``splits.json`` file at the root (class name -> split) is honored;
    otherwise classes are split deterministically by name hash (60/20/20).
    Images whose size differs from the first readable image are skipped
    with a warning; a class with no usable image is an error.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"dataset root {root} has no class subdirectories")

    splits_file = root / "splits.json"
    explicit = json.loads(splits_file.read_text()) if splits_file.is_file() else None

    images, labels, class_names, split_of = [], [], [], {}
    expected_hw = None
    for cid, cdir in enumerate(class_dirs):
        class_names.append(cdir.name)
        count = 0
        for img_path in sorted(cdir.glob("*.png")):
            try:
                with Image.open(img_path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except Exception as err:  # unreadable file: skip, keep going
                warnings.warn(f"skipping unreadable image {img_path}: {err}")
                continue
            hw = arr.shape[:2]
            if expected_hw is None:
                expected_hw = hw
            if hw != expected_hw:
                warnings.warn(
                    f"skipping {img_path}: size {hw} differs from dataset size {expected_hw}"
                )
                continue
            images.append(arr.transpose(2, 0, 1))
            labels.append(cid)
            count += 1
        if count == 0:
            raise ValueError(f"class directory {cdir} contains no usable images")
        if explicit is not None:
            if cdir.name not in explicit:
                raise ValueError(f"splits.json is missing class {cdir.name!r}")
            split_of[cid] = explicit[cdir.name]
        else:
            split_of[cid] = _hash_split(cdir.name)
    return LabeledDataset(
        images=np.stack(images),
        labels=np.asarray(labels),
        class_names=class_names,
        split_of=split_of,
    )


def save_dataset_directory(dataset: LabeledDataset, root) -> Path:
    """Write a dataset as PNG class directories plus splits.json (+ part boxes)."""
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for cid, cname in enumerate(dataset.class_names):
        cdir = root / cname
        cdir.mkdir(exist_ok=True)
        for j, idx in enumerate(dataset.indices_of_class(cid)):
            arr = (dataset.images[idx].transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
            Image.fromarray(arr).save(cdir / f"img_{j:04d}.png")
    splits = {dataset.class_names[c]: s for c, s in dataset.split_of.items()}
    (root / "splits.json").write_text(json.dumps(splits, indent=2, sort_keys=True))
    if dataset.part_boxes is not None:
        (root / "part_boxes.json").write_text(
            json.dumps(
                {"boxes": dataset.part_boxes.tolist(), "order": "dataset index"}, indent=2
            )
        )
    return root
