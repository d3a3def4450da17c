"""Synthetic shape-segmentation dataset with scene-dependent class priors.

Every image belongs to a scene type, and each scene type admits only a
subset of the foreground classes, so class frequencies differ per image.
Images are stored quantised to 8 bits so that the on-disk PPM/PGM form is an
exact copy of the in-memory arrays.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, GenerationError
from .rng import Rng

SPLITS = ("labeled", "unlabeled", "val")
SHAPES = ("disk", "rectangle", "cross")
NOISE_SIGMA = 0.05
MANIFEST_NAME = "manifest.txt"
META_NAME = "meta.txt"


@dataclass(frozen=True)
class SceneSpec:
    scene_type: int
    allowed_classes: tuple[int, ...]
    background: tuple[float, float, float]


@dataclass
class Sample:
    image: np.ndarray       # (3, H, W) float32 in [0, 1], multiples of 1/255
    mask: np.ndarray        # (H, W) uint8 class ids
    scene_type: int
    split: str

    def __eq__(self, other):
        return (isinstance(other, Sample) and self.scene_type == other.scene_type
                and self.split == other.split and np.array_equal(self.image, other.image)
                and np.array_equal(self.mask, other.mask))


@dataclass
class Dataset:
    samples: list[Sample]
    n_class: int
    scenes: list[SceneSpec] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def __len__(self):
        return len(self.samples)


def scene_specs(n_foreground: int, n_scene_types: int) -> list[SceneSpec]:
    """Scene ``s`` admits ``K - 1`` consecutive classes starting at ``s + 1`` (mod K)."""
    k = n_foreground
    width = max(1, k - 1)
    specs = []
    for s in range(n_scene_types):
        allowed = tuple(sorted(1 + (s + j) % k for j in range(width)))
        tint = 0.25 + 0.5 * ((s * 0.618) % 1.0)
        specs.append(SceneSpec(s, allowed, (tint, 0.45, 1.0 - tint)))
    return specs


def class_palette(n_foreground: int) -> np.ndarray:
    """Base RGB colour per foreground class (row 0 unused)."""
    hues = np.linspace(0.0, 1.0, n_foreground, endpoint=False)
    rgb = np.stack([0.5 + 0.45 * np.cos(2 * np.pi * (hues + off)) for off in (0.0, 1 / 3, 2 / 3)], axis=1)
    return np.vstack([np.zeros(3), rgb])


def shape_mask(kind: str, h: int, w: int, cy: float, cx: float, size: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= size * size
    if kind == "rectangle":
        return (np.abs(dy) <= 0.7 * size) & (np.abs(dx) <= size)
    if kind == "cross":
        arm = max(1.0, 0.35 * size)
        return (((np.abs(dy) <= arm) & (np.abs(dx) <= size))
                | ((np.abs(dx) <= arm) & (np.abs(dy) <= size)))
    raise ValueError(f"unknown shape {kind!r}")


def _render(rng: Rng, scene: SceneSpec, h: int, w: int, palette: np.ndarray,
            color_jitter: float, max_retries: int) -> tuple[np.ndarray, np.ndarray]:
    n_objects = int(rng.integers(2, 5))
    for _ in range(max_retries):
        mask = np.zeros((h, w), np.uint8)
        placed = []
        for _ in range(n_objects):
            cls = int(scene.allowed_classes[int(rng.integers(0, len(scene.allowed_classes)))])
            size = float(rng.uniform(3.0, max(3.5, min(h, w) / 4.0)))
            cy = float(rng.uniform(size * 0.5, h - size * 0.5))
            cx = float(rng.uniform(size * 0.5, w - size * 0.5))
            region = shape_mask(SHAPES[(cls - 1) % len(SHAPES)], h, w, cy, cx, size)
            mask[region] = cls
            placed.append((cls, int(region.sum())))
        # every placed class must keep a visible part
        if all((mask == cls).sum() >= max(1, area // 4) for cls, area in placed):
            break
    else:
        raise GenerationError(f"could not place {n_objects} shapes without occlusion in {max_retries} tries")

    image = np.empty((3, h, w), np.float64)
    bg = np.asarray(scene.background)
    grad = np.linspace(-0.1, 0.1, w)[None, :]
    for ch in range(3):
        image[ch] = bg[ch] + grad
    for cls in np.unique(mask):
        if cls == 0:
            continue
        colour = palette[cls] + rng.uniform(-color_jitter, color_jitter, 3)
        image[:, mask == cls] = colour[:, None]
    image += rng.normal((3, h, w), dtype=np.float64) * NOISE_SIGMA
    image = np.clip(image, 0.0, 1.0)
    return _quantise(image), mask


def _quantise(image: np.ndarray) -> np.ndarray:
    return (np.round(image * 255.0) / 255.0).astype(np.float32)


def generate(seed: int = 0, n_labeled: int = 32, n_unlabeled: int = 256, n_val: int = 64,
             height: int = 32, width: int = 32, n_foreground: int = 3, n_scene_types: int = 2,
             color_jitter: float = 0.55, max_retries: int = 50) -> Dataset:
    """Build a seeded dataset; splits are disjoint by construction."""
    if n_foreground < 2:
        raise GenerationError("need at least 2 foreground classes")
    if min(height, width) < 8:
        raise GenerationError("image extents must be >= 8")
    if n_scene_types < 1:
        raise GenerationError("need at least one scene type")
    if n_labeled < 0 or n_unlabeled < 0 or n_val < 0:
        raise GenerationError("split sizes must be non-negative")
    scenes = scene_specs(n_foreground, n_scene_types)
    palette = class_palette(n_foreground)
    root = Rng(seed).child("synthdata")
    samples = []
    for split, count in zip(SPLITS, (n_labeled, n_unlabeled, n_val)):
        for i in range(count):
            r = root.child(f"{split}/{i}")
            scene = scenes[int(r.integers(0, n_scene_types))]
            image, mask = _render(r, scene, height, width, palette, color_jitter, max_retries)
            samples.append(Sample(image, mask, scene.scene_type, split))
    return Dataset(samples, n_foreground + 1, scenes)


def augment(sample: Sample, strength: str, rng: Rng) -> Sample:
    """Weak: horizontal flip with probability 0.5.  Strong: the same flip, then
    brightness jitter in +-0.2 and extra Gaussian noise (sigma 0.05).

    The flip draw comes from ``rng.child("flip")`` so a weak and a strong view
    made from the same stream share their geometry.
    """
    if strength not in ("weak", "strong"):
        raise ValueError(f"strength must be 'weak' or 'strong', got {strength!r}")
    flip = bool(rng.child("flip").random() < 0.5)
    image, mask = sample.image, sample.mask
    if flip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    image = np.ascontiguousarray(image)
    if strength == "strong":
        photo = rng.child("photometric")
        image = image + np.float32(photo.uniform(-0.2, 0.2)) + photo.normal(image.shape) * NOISE_SIGMA
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return replace(sample, image=image, mask=np.ascontiguousarray(mask))


def stack_samples(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise DataError("empty sample list")
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]))


# on-disk format ------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 from a (3, H, W) array in [0, 1]."""
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def write_pgm(path, values: np.ndarray) -> None:
    """Binary P5 from an (H, W) array of integers in [0, 255]."""
    arr = np.asarray(values)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise DataError("PGM values must lie in [0, 255]")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.astype(np.uint8).tobytes())


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit files are supported")
    return np.frombuffer(data, np.uint8, offset=pos), h, w


def read_ppm(path) -> np.ndarray:
    raw, h, w = _read_netpbm(path, b"P6")
    if raw.size != h * w * 3:
        raise FormatError(f"{path}: pixel payload has {raw.size} bytes, expected {h * w * 3}")
    return (raw.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def read_pgm(path) -> np.ndarray:
    raw, h, w = _read_netpbm(path, b"P5")
    if raw.size != h * w:
        raise FormatError(f"{path}: pixel payload has {raw.size} bytes, expected {h * w}")
    return raw.reshape(h, w).copy()


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write images (PPM), masks (PGM) and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    counters = {s: 0 for s in SPLITS}
    for s in dataset.samples:
        idx = counters[s.split]
        counters[s.split] += 1
        stem = f"{s.split}_{idx:04d}"
        write_ppm(out / "images" / f"{stem}.ppm", s.image)
        write_pgm(out / "masks" / f"{stem}.pgm", s.mask)
        lines.append(f"images/{stem}.ppm {s.split} {s.scene_type}")
    manifest = out / MANIFEST_NAME
    manifest.write_text("".join(line + "\n" for line in lines))
    (out / META_NAME).write_text(f"n_class={dataset.n_class}\n")
    return manifest


def mask_path_for(image_path: str) -> str:
    head, name = os.path.split(image_path)
    return os.path.join(os.path.dirname(head), "masks", name[:-4] + ".pgm")


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    n_class = None
    meta = root / META_NAME
    if meta.exists():
        for line in meta.read_text().splitlines():
            key, _, value = line.partition("=")
            if key.strip() == "n_class":
                n_class = int(value)
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[1] not in SPLITS:
            raise FormatError(f"{manifest}:{lineno}: expected '<path> <split> <scene_type>'")
        rel, split, scene = parts
        image = read_ppm(root / rel)
        mask = read_pgm(root / mask_path_for(rel))
        samples.append(Sample(image, mask, int(scene), split))
    if n_class is None:
        n_class = int(max(int(s.mask.max()) for s in samples)) + 1 if samples else 0
    return Dataset(samples, n_class)
