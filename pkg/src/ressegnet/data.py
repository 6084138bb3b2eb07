"""Dataset management: splits, patch sampling, flips, PNG/manifest I/O and a
synthetic ellipse dataset for end-to-end runs.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1]; masks are
uint8 arrays of shape (H, W) with values in {0, 1}.  All randomness flows from
explicit seeds or generators passed in by the caller.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import PolygonAnnotation, rasterize_polygons, rasterize_ring_into


@dataclass
class SubImage:
    """One image/mask pair."""

    id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be (H, W, 3), got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]

    def to_json(self) -> str:
        return json.dumps(
            {"train": self.train, "validation": self.validation, "test": self.test}, indent=2
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        doc = json.loads(text)
        return cls(list(doc["train"]), list(doc["validation"]), list(doc["test"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def split_dataset(ids, ratios=(8, 1, 1), seed=0) -> DatasetSplit:
    """Shuffle ids deterministically and split floor-proportionally.

    Validation and test sizes are floor(n * ratio / total); the remainder goes
    to train.
    """
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    rt, rv, rs = ratios
    if min(ratios) < 0 or rt + rv + rs == 0:
        raise ValueError(f"ratios must be nonnegative with a positive sum, got {ratios}")
    buckets = sum(1 for r in ratios if r > 0)
    if len(ids) < buckets:
        raise ValueError(f"{len(ids)} ids cannot fill {buckets} nonzero ratio buckets")
    total = rt + rv + rs
    n = len(ids)
    n_val = n * rv // total
    n_test = n * rs // total
    n_train = n - n_val - n_test
    shuffled = ids[:]
    random.Random(seed).shuffle(shuffled)
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
    )


def sample_patch(sub: SubImage, patch_size: int, rng: np.random.Generator):
    """Crop a random in-bounds square patch, identically from image and mask."""
    h, w = sub.mask.shape
    if patch_size > min(h, w):
        raise ValueError(f"patch size {patch_size} exceeds image size {h}x{w}")
    r = int(rng.integers(0, h - patch_size + 1))
    c = int(rng.integers(0, w - patch_size + 1))
    return (
        sub.image[r:r + patch_size, c:c + patch_size],
        sub.mask[r:r + patch_size, c:c + patch_size],
    )


def random_flip(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Flip horizontally and/or vertically, each with probability 1/2."""
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} differ")
    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))
    return apply_flips(image, mask, flip_h, flip_v)


def apply_flips(image, mask, flip_h: bool, flip_v: bool):
    if flip_h:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if flip_v:
        image, mask = image[::-1, :], mask[::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


# ---------------------------------------------------------------------------
# Synthetic ellipse data


@dataclass
class SynthConfig:
    count: int = 250
    image_size: int = 128
    ellipse_count_range: tuple[int, int] = (3, 8)
    radius_range: tuple[float, float] = (8.0, 24.0)  # per-axis radius bounds, px
    noise_stddev: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        lo, hi = self.ellipse_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad ellipse_count_range {self.ellipse_count_range}")
        rlo, rhi = self.radius_range
        if rlo <= 0 or rhi < rlo:
            raise ValueError(f"bad radius_range {self.radius_range}")
        if self.noise_stddev < 0:
            raise ValueError(f"noise_stddev must be >= 0, got {self.noise_stddev}")


def ellipse_polygon(cx, cy, rx, ry, angle=0.0, vertices=64):
    """Polygonal approximation of a rotated ellipse, as a vertex ring."""
    theta = np.linspace(0.0, 2.0 * math.pi, vertices, endpoint=False)
    ex = rx * np.cos(theta)
    ey = ry * np.sin(theta)
    ca, sa = math.cos(angle), math.sin(angle)
    xs = cx + ca * ex - sa * ey
    ys = cy + sa * ex + ca * ey
    return list(zip(xs.tolist(), ys.tolist()))


def generate_synthetic(config: SynthConfig) -> list[SubImage]:
    """Bright elliptic blobs over a darker textured background.

    The mask is the rasterized union of 64-vertex polygonal approximations of
    the ellipses; the output is bit-identical for equal configs.
    """
    rng = np.random.default_rng(config.seed)
    size = config.image_size
    subs = []
    for i in range(config.count):
        n_lo, n_hi = config.ellipse_count_range
        n_ellipses = int(rng.integers(n_lo, n_hi + 1))

        # smooth low-frequency background texture between ~0.15 and ~0.40
        coarse = rng.uniform(0.15, 0.40, size=(8, 8))
        background = _upscale_smooth(coarse, size)

        structure = background.copy()
        mask = np.zeros((size, size), dtype=np.uint8)
        r_lo, r_hi = config.radius_range
        for _ in range(n_ellipses):
            rx = float(rng.uniform(r_lo, r_hi))
            ry = float(rng.uniform(r_lo, r_hi))
            margin = max(rx, ry) * 0.5
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            angle = float(rng.uniform(0.0, math.pi))
            brightness = float(rng.uniform(0.65, 0.90))
            ring = ellipse_polygon(cx, cy, rx, ry, angle)
            region = np.zeros_like(mask)
            rasterize_ring_into(region, ring)
            structure[region == 1] = brightness
            mask |= region

        # mild per-channel tint so images are RGB rather than replicated gray
        tint = np.array([1.0, 0.9, 0.95])
        image = structure[:, :, None] * tint[None, None, :]
        image = image + rng.normal(0.0, config.noise_stddev, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        subs.append(SubImage(id=f"synth_{i:04d}", image=image, mask=mask))
    return subs


def _upscale_smooth(coarse: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upscale of a coarse grid to (size, size)."""
    n = coarse.shape[0]
    xs = np.linspace(0, n - 1, size)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    t = xs - i0
    rows = coarse[i0][:, i0] * ((1 - t)[:, None] * (1 - t)[None, :])
    rows += coarse[i0][:, i1] * ((1 - t)[:, None] * t[None, :])
    rows += coarse[i1][:, i0] * (t[:, None] * (1 - t)[None, :])
    rows += coarse[i1][:, i1] * (t[:, None] * t[None, :])
    return rows


# ---------------------------------------------------------------------------
# PNG and manifest I/O


def save_image_png(path, image: np.ndarray) -> None:
    """Write a float [0,1] RGB image as 8-bit PNG (linear mapping)."""
    arr = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_mask_png(path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as 8-bit grayscale PNG with foreground 255."""
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr != 0).astype(np.uint8)


def write_dataset(subs: list[SubImage], out_dir) -> Path:
    """Write images, masks and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    items = []
    for sub in subs:
        image_rel = f"images/{sub.id}.png"
        mask_rel = f"masks/{sub.id}.png"
        save_image_png(out / image_rel, sub.image)
        save_mask_png(out / mask_rel, sub.mask)
        items.append({"id": sub.id, "image_path": image_rel, "mask_path": mask_rel})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"items": items}, indent=2), encoding="utf-8")
    return manifest


def load_manifest(path) -> list[dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    items = doc.get("items")
    if items is None:
        raise ValueError(f"{path}: manifest must contain an 'items' list")
    return items


def load_subimages(manifest_path, ids=None) -> list[SubImage]:
    """Load SubImages named by a manifest, restricted to `ids` when given.

    Each item provides either a mask PNG or a polygon annotation JSON, which
    is rasterized at the image size.  Relative paths resolve against the
    manifest's directory.
    """
    base = Path(manifest_path).parent
    by_id = {item["id"]: item for item in load_manifest(manifest_path)}

    def load_one(item):
        image = load_image_png(base / item["image_path"])
        if "mask_path" in item:
            mask = load_mask_png(base / item["mask_path"])
        elif "annotation_path" in item:
            ann = PolygonAnnotation.load(base / item["annotation_path"])
            mask = rasterize_polygons(ann, image.shape[1], image.shape[0])
        else:
            raise ValueError(f"item {item['id']}: needs mask_path or annotation_path")
        return SubImage(id=item["id"], image=image, mask=mask)

    if ids is None:
        return [load_one(item) for item in by_id.values()]
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise KeyError(f"manifest is missing ids: {missing}")
    return [load_one(by_id[i]) for i in ids]
