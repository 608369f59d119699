"""COCO-style annotation files: images, annotations and categories.

Fields this package does not consume are kept in each record's ``extra``
mapping and written back unchanged, so read -> write round trips preserve
the whole file.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence

import numpy as np

from ..errors import FormatError


class CocoFormatError(FormatError):
    """A COCO file is malformed; the message names the offending line or field."""


@dataclass
class CocoImage:
    id: int
    file_name: str
    width: int
    height: int
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class CocoAnnotation:
    id: int
    image_id: int
    category_id: int
    bbox: tuple                # (x, y, w, h), absolute pixels
    area: float
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class CocoCategory:
    id: int
    name: str
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class CocoDataset:
    images: List[CocoImage] = field(default_factory=list)
    annotations: List[CocoAnnotation] = field(default_factory=list)
    categories: List[CocoCategory] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)

    def annotations_for(self, image_id: int) -> List[CocoAnnotation]:
        return [a for a in self.annotations if a.image_id == image_id]

    def class_index(self, category_id: int) -> int:
        """Position of ``category_id`` among categories sorted by id."""
        ids = sorted(c.id for c in self.categories)
        try:
            return ids.index(category_id)
        except ValueError:
            raise FormatError(f"category_id {category_id} not in categories table") from None


_IMAGE_KEYS = ("id", "file_name", "width", "height")
_ANN_KEYS = ("id", "image_id", "category_id", "bbox", "area")
_CAT_KEYS = ("id", "name")


def _require(record, keys, where):
    if not isinstance(record, dict):
        raise CocoFormatError(f"{where}: expected an object, got {type(record).__name__}")
    missing = [k for k in keys if k not in record]
    if missing:
        raise CocoFormatError(f"{where}: missing field(s) {', '.join(missing)}")


def _number(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CocoFormatError(f"{where}: expected a number, got {value!r}")
    return value


def _int(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise CocoFormatError(f"{where}: expected an integer, got {value!r}")
    return value


def parse_coco(doc: Any) -> CocoDataset:
    if not isinstance(doc, dict):
        raise CocoFormatError("top level: expected an object")
    out = CocoDataset(extra={k: v for k, v in doc.items() if k not in ("images", "annotations", "categories")})
    for i, rec in enumerate(doc.get("images", [])):
        w = f"images[{i}]"
        _require(rec, _IMAGE_KEYS, w)
        out.images.append(CocoImage(_int(rec["id"], w + ".id"), str(rec["file_name"]),
                                    _int(rec["width"], w + ".width"), _int(rec["height"], w + ".height"),
                                    {k: v for k, v in rec.items() if k not in _IMAGE_KEYS}))
    for i, rec in enumerate(doc.get("annotations", [])):
        w = f"annotations[{i}]"
        _require(rec, _ANN_KEYS, w)
        bbox = rec["bbox"]
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise CocoFormatError(f"{w}.bbox: expected 4 numbers [x, y, w, h]")
        bbox = tuple(_number(v, f"{w}.bbox[{j}]") for j, v in enumerate(bbox))
        out.annotations.append(CocoAnnotation(_int(rec["id"], w + ".id"), _int(rec["image_id"], w + ".image_id"),
                                              _int(rec["category_id"], w + ".category_id"), bbox,
                                              _number(rec["area"], w + ".area"),
                                              {k: v for k, v in rec.items() if k not in _ANN_KEYS}))
    for i, rec in enumerate(doc.get("categories", [])):
        w = f"categories[{i}]"
        _require(rec, _CAT_KEYS, w)
        out.categories.append(CocoCategory(_int(rec["id"], w + ".id"), str(rec["name"]),
                                           {k: v for k, v in rec.items() if k not in _CAT_KEYS}))
    return out


def read_coco(path) -> CocoDataset:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    try:
        return parse_coco(doc)
    except CocoFormatError as e:
        raise CocoFormatError(f"{path}: {e}") from None


def to_document(ds: CocoDataset) -> Dict[str, Any]:
    doc = dict(ds.extra)
    doc["images"] = [{"id": r.id, "file_name": r.file_name, "width": r.width, "height": r.height, **r.extra}
                     for r in ds.images]
    doc["annotations"] = [{"id": r.id, "image_id": r.image_id, "category_id": r.category_id,
                           "bbox": list(r.bbox), "area": r.area, **r.extra} for r in ds.annotations]
    doc["categories"] = [{"id": r.id, "name": r.name, **r.extra} for r in ds.categories]
    return doc


def write_coco(ds: CocoDataset, path) -> None:
    with open(path, "w") as f:
        json.dump(to_document(ds), f, indent=1)
        f.write("\n")


def normalize_bbox(bbox: Sequence[float], width: float, height: float) -> np.ndarray:
    """Absolute [x, y, w, h] -> normalised (cx, cy, w, h)."""
    x, y, w, h = (float(v) for v in bbox)
    return np.array([(x + w / 2) / width, (y + h / 2) / height, w / width, h / height])


def denormalize_bbox(box: Sequence[float], width: float, height: float) -> np.ndarray:
    """Normalised (cx, cy, w, h) -> absolute [x, y, w, h]."""
    cx, cy, w, h = (float(v) for v in box)
    return np.array([(cx - w / 2) * width, (cy - h / 2) * height, w * width, h * height])
