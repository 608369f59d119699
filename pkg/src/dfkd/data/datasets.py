"""Procedural stand-ins for the image datasets.

Classification images are single-channel shapes (bars, crosses, disks,
rings) on a dark background, with random placement, size, thickness and
pixel noise, scaled to [-1, 1]. Detection scenes are RGB canvases holding a
few non-overlapping coloured shapes, annotated in COCO form.

Every image draws from its own child stream of the dataset seed, so
generation is reproducible one image at a time.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from ..engine import Rng
from ..errors import ConfigError
from .coco import CocoAnnotation, CocoCategory, CocoDataset, CocoImage
from .images import tile, to_uint8, write_pnm

SHAPE_FAMILIES = ("bar", "cross", "disk", "ring")


@dataclass
class ClassificationDatasetSpec:
    num_classes: int = 3
    samples_per_class: int = 200
    image_size: int = 16
    channels: int = 1
    families: Tuple[str, ...] = SHAPE_FAMILIES
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.families = tuple(self.families)
        if not 1 <= self.num_classes <= len(self.families):
            raise ConfigError(f"num_classes must be in 1..{len(self.families)}")
        unknown = set(self.families) - set(SHAPE_FAMILIES)
        if unknown:
            raise ConfigError(f"unknown shape families {sorted(unknown)}")
        if self.samples_per_class < 1 or self.image_size < 8 or self.channels < 1:
            raise ConfigError("samples_per_class >= 1, image_size >= 8, channels >= 1 required")


@dataclass
class ClassificationDataset:
    images: np.ndarray          # (M, C, H, W) float64 in [-1, 1]
    labels: np.ndarray          # (M,) int64
    splits: Dict[str, np.ndarray]
    spec: ClassificationDatasetSpec

    def split(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.images[idx], self.labels[idx]


def _grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")  # (y, x)


def _soft(mask_dist: np.ndarray) -> np.ndarray:
    """Coverage from a signed distance (negative inside), one-pixel ramp."""
    return np.clip(0.5 - mask_dist, 0.0, 1.0)


def _box_dist(y, x, cy, cx, half_h, half_w):
    return np.maximum(np.abs(y - cy) - half_h, np.abs(x - cx) - half_w)


def render_shape(family: str, size: int, rng: Rng) -> np.ndarray:
    """Coverage map in [0, 1] for one jittered instance of ``family``."""
    y, x = _grid(size)
    s = size / 16.0
    cy, cx = size / 2 + rng.uniform(-2, 2, 2) * s
    if family == "bar":
        length, thick = rng.uniform(5.0, 7.0) * s, rng.uniform(1.0, 1.6) * s
        if rng.random() < 0.5:
            d = _box_dist(y, x, cy, cx, thick, length)
        else:
            d = _box_dist(y, x, cy, cx, length, thick)
    elif family == "cross":
        arm, thick = rng.uniform(4.0, 6.0) * s, rng.uniform(0.8, 1.3) * s
        d = np.minimum(_box_dist(y, x, cy, cx, thick, arm), _box_dist(y, x, cy, cx, arm, thick))
    elif family == "disk":
        d = np.hypot(y - cy, x - cx) - rng.uniform(3.0, 5.0) * s
    elif family == "ring":
        r, thick = rng.uniform(4.0, 6.0) * s, rng.uniform(0.6, 1.0) * s
        d = np.abs(np.hypot(y - cy, x - cx) - r) - thick
    else:
        raise ConfigError(f"unknown shape family {family!r}")
    return _soft(d)


def stratified_split(labels: np.ndarray, rng: Rng, fractions=(0.7, 0.15, 0.15)) -> Dict[str, np.ndarray]:
    out = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.child(int(c)).permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        out["train"].append(idx[:n_train])
        out["val"].append(idx[n_train:n_train + n_val])
        out["test"].append(idx[n_train + n_val:])
    return {k: np.sort(np.concatenate(v)).astype(np.int64) for k, v in out.items()}


def gen_classification_dataset(spec: ClassificationDatasetSpec) -> ClassificationDataset:
    root = Rng(spec.seed)
    images, labels = [], []
    for c in range(spec.num_classes):
        for i in range(spec.samples_per_class):
            rng = root.child(0).child(c).child(i)
            cover = render_shape(spec.families[c], spec.image_size, rng)
            noise = rng.normal((spec.channels, spec.image_size, spec.image_size)) * spec.noise
            images.append(np.clip(2.0 * cover[None] - 1.0 + noise, -1.0, 1.0))
            labels.append(c)
    labels = np.array(labels, dtype=np.int64)
    return ClassificationDataset(np.stack(images), labels, stratified_split(labels, root.child(1)), spec)


def save_classification_dataset(ds: ClassificationDataset, out_dir: str, previews: int = 32) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, arr):
        path = os.path.join(out_dir, name)
        np.save(path, arr)
        written.append(path)

    put("images.npy", ds.images)
    put("labels.npy", ds.labels)
    for name, idx in ds.splits.items():
        put(f"split_{name}.npy", idx)
    spec_path = os.path.join(out_dir, "spec.json")
    with open(spec_path, "w") as f:
        json.dump(asdict(ds.spec), f, indent=2, sort_keys=True)
    written.append(spec_path)
    if previews:
        prev = to_uint8(ds.images[:: max(1, len(ds.images) // previews)][:previews, 0])
        path = os.path.join(out_dir, "preview.pgm")
        write_pnm(path, tile(prev))
        written.append(path)
    return written


def load_classification_dataset(out_dir: str) -> ClassificationDataset:
    with open(os.path.join(out_dir, "spec.json")) as f:
        spec = ClassificationDatasetSpec(**json.load(f))
    load = lambda n: np.load(os.path.join(out_dir, n))
    splits = {k: load(f"split_{k}.npy") for k in ("train", "val", "test")}
    return ClassificationDataset(load("images.npy"), load("labels.npy"), splits, spec)


# -- detection scenes ---------------------------------------------------------

DETECTION_FAMILIES = ("square", "disk", "triangle")
# base colours per class, jittered per object
DETECTION_COLOURS = ((230, 60, 50), (60, 200, 70), (70, 90, 235))


@dataclass
class DetectionSceneSpec:
    canvas: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 2
    min_size: int = 14
    max_size: int = 26
    box_jitter: float = 0.15
    num_images: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(DETECTION_FAMILIES):
            raise ConfigError(f"num_classes must be in 1..{len(DETECTION_FAMILIES)}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        if not 2 <= self.min_size <= self.max_size < self.canvas:
            raise ConfigError("need 2 <= min_size <= max_size < canvas")


@dataclass
class DetectionDataset:
    images: np.ndarray                    # (M, H, W, 3) uint8
    coco: CocoDataset
    spec: DetectionSceneSpec = field(default_factory=DetectionSceneSpec)

    def targets(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        """(class ids, xywh absolute boxes) of image ``index`` in annotation order."""
        img = self.coco.images[index]
        anns = self.coco.annotations_for(img.id)
        labels = np.array([self.coco.class_index(a.category_id) for a in anns], dtype=np.int64)
        boxes = np.array([a.bbox for a in anns], dtype=np.float64).reshape(-1, 4)
        return labels, boxes


def _object_mask(family: str, h: int, w: int, rng: Rng) -> np.ndarray:
    y, x = _grid(max(h, w))
    y, x = y[:h, :w], x[:h, :w]
    if family == "square":
        return np.ones((h, w), dtype=bool)
    if family == "disk":
        return ((y - h / 2) / (h / 2)) ** 2 + ((x - w / 2) / (w / 2)) ** 2 <= 1.0
    if family == "triangle":
        # apex at top centre, base along the bottom row
        return np.abs(x - w / 2) <= (y / h) * (w / 2) + 0.5
    raise ConfigError(f"unknown detection family {family!r}")


def _overlaps(box, placed, margin=1):
    x, y, w, h = box
    return any(x < px + pw + margin and px < x + w + margin and y < py + ph + margin and py < y + h + margin
               for px, py, pw, ph in placed)


def render_scene(spec: DetectionSceneSpec, rng: Rng):
    """One canvas plus [(class, (x, y, w, h))], objects sorted left to right."""
    n = spec.canvas
    base = rng.uniform(10, 50)
    img = np.clip(base + rng.normal((n, n, 3)) * 6.0, 0, 255)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects, placed = [], []
    for _ in range(count):
        for _attempt in range(50):
            cls = int(rng.integers(0, spec.num_classes))
            side = rng.uniform(spec.min_size, spec.max_size)
            aspect = 1.0 + rng.uniform(-spec.box_jitter, spec.box_jitter)
            w = int(np.clip(round(side * aspect), 2, n - 1))
            h = int(np.clip(round(side / aspect), 2, n - 1))
            x, y = int(rng.integers(0, n - w + 1)), int(rng.integers(0, n - h + 1))
            if not _overlaps((x, y, w, h), placed):
                break
        else:
            continue
        placed.append((x, y, w, h))
        mask = _object_mask(DETECTION_FAMILIES[cls], h, w, rng)
        colour = np.clip(np.array(DETECTION_COLOURS[cls]) + rng.normal(3) * 15, 0, 255)
        img[y:y + h, x:x + w][mask] = colour
        objects.append((cls, (float(x), float(y), float(w), float(h))))
    objects.sort(key=lambda o: (o[1][0] + o[1][2] / 2, o[1][1]))
    return np.rint(img).astype(np.uint8), objects


def gen_detection_dataset(spec: DetectionSceneSpec) -> DetectionDataset:
    root = Rng(spec.seed).child(2)
    images = []
    coco = CocoDataset(categories=[CocoCategory(i + 1, DETECTION_FAMILIES[i]) for i in range(spec.num_classes)])
    ann_id = 1
    for i in range(spec.num_images):
        img, objects = render_scene(spec, root.child(i))
        images.append(img)
        coco.images.append(CocoImage(i + 1, f"scene_{i:05d}.ppm", spec.canvas, spec.canvas))
        for cls, box in objects:
            coco.annotations.append(CocoAnnotation(ann_id, i + 1, cls + 1, box, box[2] * box[3]))
            ann_id += 1
    return DetectionDataset(np.stack(images), coco, spec)


def save_detection_dataset(ds: DetectionDataset, out_dir: str, dump_images: bool = True) -> List[str]:
    from .coco import write_coco

    os.makedirs(out_dir, exist_ok=True)
    written = [os.path.join(out_dir, "images.npy"), os.path.join(out_dir, "annotations.json"),
               os.path.join(out_dir, "spec.json")]
    np.save(written[0], ds.images)
    write_coco(ds.coco, written[1])
    with open(written[2], "w") as f:
        json.dump(asdict(ds.spec), f, indent=2, sort_keys=True)
    if dump_images:
        img_dir = os.path.join(out_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
        for img, meta in zip(ds.images, ds.coco.images):
            path = os.path.join(img_dir, meta.file_name)
            write_pnm(path, img)
            written.append(path)
    return written


def load_detection_dataset(out_dir: str) -> DetectionDataset:
    from .coco import read_coco

    with open(os.path.join(out_dir, "spec.json")) as f:
        spec = DetectionSceneSpec(**json.load(f))
    return DetectionDataset(np.load(os.path.join(out_dir, "images.npy")),
                            read_coco(os.path.join(out_dir, "annotations.json")), spec)
