"""Deterministic multi-label synthetic shapes dataset.

Layout of a dataset directory::

    manifest.json   classes, per-image file/size/label vector (training input)
    gt.json         per-image ground-truth boxes (evaluation only)
    images/*.png    8-bit RGB

Image-level labels live in ``manifest.json`` and boxes only in ``gt.json``;
training code reads the former and never opens the latter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SHAPE_KINDS = ("disk", "triangle", "square", "cross", "ring")
MANIFEST_VERSION = 1
MAX_PLACEMENT_TRIES = 50
MAX_REGENERATIONS = 20


@dataclass(frozen=True)
class GeneratorConfig:
    num_images: int = 200
    num_classes: int = 3
    image_size: tuple[int, int] = (160, 256)  # min/max side length in pixels
    objects: tuple[int, int] = (1, 2)  # min/max objects per image
    object_size: tuple[int, int] = (64, 128)  # min/max object side
    clutter: int = 1  # 0 = clean background
    seed: int = 0


@dataclass
class ImageRecord:
    id: str
    file: str
    width: int
    height: int
    labels: list[int]


@dataclass
class Dataset:
    root: Path
    classes: list[str]
    images: list[ImageRecord]

    def __len__(self) -> int:
        return len(self.images)

    def image_path(self, rec: ImageRecord) -> Path:
        return self.root / rec.file

    def load_image(self, rec: ImageRecord) -> np.ndarray:
        """HxWx3 uint8 pixels."""
        with Image.open(self.image_path(rec)) as im:
            return np.asarray(im.convert("RGB"))

    def labels(self) -> np.ndarray:
        return np.asarray([r.labels for r in self.images], dtype=np.int64)

    def sizes(self) -> dict[str, tuple[int, int]]:
        return {r.id: (r.width, r.height) for r in self.images}


class DataError(ValueError):
    """Dataset files missing or inconsistent."""


def _sub_rng(seed: int, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, attempt]))


def _background(rng: np.random.Generator, w: int, h: int) -> Image.Image:
    base = rng.uniform(60, 200, size=3)
    coarse = rng.normal(0, 25, size=(max(h // 16, 2), max(w // 16, 2), 3))
    coarse_img = np.clip(base + coarse, 0, 255).astype(np.uint8)
    smooth = np.asarray(Image.fromarray(coarse_img).resize((w, h), Image.BILINEAR), dtype=np.float64)
    fine = rng.normal(0, 6, size=(h, w, 3))
    return Image.fromarray(np.clip(smooth + fine, 0, 255).astype(np.uint8))


def _color_far_from(rng: np.random.Generator, ref: np.ndarray) -> tuple[int, int, int]:
    for _ in range(100):
        c = rng.integers(0, 256, size=3)
        if np.abs(c - ref).sum() > 150:
            break
    return tuple(int(v) for v in c)


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, box, fill, width: int) -> None:
    x0, y0, x1, y1 = box
    if kind == "disk":
        draw.ellipse(box, fill=fill)
    elif kind == "ring":
        draw.ellipse(box, outline=fill, width=width)
    elif kind == "square":
        draw.rectangle((x0, y0, x1 - 1, y1 - 1), fill=fill)
    elif kind == "triangle":
        draw.polygon([((x0 + x1) / 2, y0), (x1 - 1, y1 - 1), (x0, y1 - 1)], fill=fill)
    elif kind == "cross":
        bw = max((x1 - x0) // 3, 2)
        bh = max((y1 - y0) // 3, 2)
        cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
        draw.rectangle((cx - bw // 2, y0, cx - bw // 2 + bw - 1, y1 - 1), fill=fill)
        draw.rectangle((x0, cy - bh // 2, x1 - 1, cy - bh // 2 + bh - 1), fill=fill)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")


def _overlaps(a, b, margin: int) -> bool:
    return not (
        a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1]
    )


def _try_render(cfg: GeneratorConfig, rng: np.random.Generator):
    lo, hi = cfg.image_size
    w = int(rng.integers(lo, hi + 1))
    h = int(rng.integers(lo, hi + 1))
    img = _background(rng, w, h)
    bg_mean = np.asarray(img, dtype=np.float64).reshape(-1, 3).mean(axis=0)
    draw = ImageDraw.Draw(img)

    for _ in range(cfg.clutter * int(rng.integers(3, 7))):
        c = _color_far_from(rng, bg_mean)
        x, y = rng.uniform(0, w), rng.uniform(0, h)
        if rng.random() < 0.5:
            dx, dy = rng.uniform(-30, 30, size=2)
            draw.line((x, y, x + dx, y + dy), fill=c, width=int(rng.integers(1, 3)))
        else:
            r = rng.uniform(2, 6)
            draw.rectangle((x - r, y - r, x + r, y + r), fill=c)

    n_obj = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    objects = []
    for _ in range(n_obj):
        cls = int(rng.integers(0, cfg.num_classes))
        kind = SHAPE_KINDS[cls]
        placed = None
        for _ in range(MAX_PLACEMENT_TRIES):
            side = rng.uniform(cfg.object_size[0], cfg.object_size[1])
            aspect = rng.uniform(0.8, 1.25)
            ow = int(round(min(side * np.sqrt(aspect), w)))
            oh = int(round(min(side / np.sqrt(aspect), h)))
            x0 = int(rng.integers(0, w - ow + 1))
            y0 = int(rng.integers(0, h - oh + 1))
            cand = (x0, y0, x0 + ow, y0 + oh)
            if all(not _overlaps(cand, o[1], 4) for o in objects):
                placed = cand
                break
        if placed is None:
            return None
        color = _color_far_from(rng, bg_mean)
        mask = Image.new("L", (w, h), 0)
        _draw_shape(ImageDraw.Draw(mask), kind, placed, 255, max(min(ow, oh) // 5, 3))
        tight = mask.getbbox()
        if tight is None:
            return None
        img.paste(Image.new("RGB", (w, h), color), (0, 0), mask)
        objects.append((cls, tight))
    return img, objects


def generate_dataset(out_dir: str | Path, cfg: GeneratorConfig = GeneratorConfig()) -> Dataset:
    """Render ``cfg.num_images`` images plus ``manifest.json`` and ``gt.json``."""
    if not 1 <= cfg.num_classes <= len(SHAPE_KINDS):
        raise ValueError(
            f"num_classes must be in [1, {len(SHAPE_KINDS)}] (one shape kind per class), got {cfg.num_classes}"
        )
    if cfg.objects[0] < 1 or cfg.objects[1] < cfg.objects[0]:
        raise ValueError(f"invalid objects-per-image range {cfg.objects}")
    if cfg.image_size[0] < cfg.object_size[0] or cfg.image_size[1] < cfg.image_size[0]:
        raise ValueError(f"invalid image size range {cfg.image_size} for objects {cfg.object_size}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, gt = [], {}
    for i in range(cfg.num_images):
        for attempt in range(MAX_REGENERATIONS):
            result = _try_render(cfg, _sub_rng(cfg.seed, i, attempt))
            if result is not None:
                break
        else:
            raise RuntimeError(f"could not place objects for image {i} after {MAX_REGENERATIONS} attempts")
        img, objects = result
        image_id = f"{i:06d}"
        rel = f"images/{image_id}.png"
        img.save(out / rel, format="PNG")
        labels = [0] * cfg.num_classes
        for cls, _ in objects:
            labels[cls] = 1
        records.append(ImageRecord(image_id, rel, img.width, img.height, labels))
        gt[image_id] = [{"class": cls, "box": list(box)} for cls, box in objects]
    classes = list(SHAPE_KINDS[: cfg.num_classes])
    manifest = {
        "version": MANIFEST_VERSION,
        "image_format": "png",
        "classes": classes,
        "generator": asdict(cfg),
        "images": [asdict(r) for r in records],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (out / "gt.json").write_text(json.dumps({"version": MANIFEST_VERSION, "images": gt}, indent=1) + "\n")
    return Dataset(out, classes, records)


def load_dataset(root: str | Path) -> Dataset:
    """Read ``manifest.json`` only (image-level labels, no boxes)."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DataError(f"{path} not found")
    m = json.loads(path.read_text())
    if m.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {m.get('version')}")
    images = [ImageRecord(**r) for r in m["images"]]
    C = len(m["classes"])
    for r in images:
        if len(r.labels) != C or any(v not in (0, 1) for v in r.labels):
            raise DataError(f"{path}: bad label vector for image {r.id}: {r.labels}")
    return Dataset(root, list(m["classes"]), images)


def load_ground_truth(root: str | Path) -> dict[str, list[tuple[int, tuple[float, float, float, float]]]]:
    """Evaluation-only boxes: image id -> [(class, (lx, ly, rx, ry)), ...]."""
    path = Path(root) / "gt.json"
    if not path.exists():
        raise DataError(f"{path} not found")
    g = json.loads(path.read_text())
    return {
        k: [(int(o["class"]), tuple(float(v) for v in o["box"])) for o in objs]
        for k, objs in g["images"].items()
    }
