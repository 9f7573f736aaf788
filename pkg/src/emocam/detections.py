"""Ingest externally produced object detections (JSON lines)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

DEFAULT_DET_THRESHOLD = 0.005


class DetectionFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise ValueError(f"invalid box {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class Detection:
    class_name: str
    score: float
    box: BoundingBox

    def __post_init__(self):
        if not self.class_name:
            raise ValueError("empty class name")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class ImageDetections:
    image_id: str
    width: int
    height: int
    detections: list[Detection] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "detections": [
                {"class": d.class_name, "score": d.score, "box": d.box.as_list()}
                for d in self.detections
            ],
        }, ensure_ascii=False)


def _parse_record(obj: dict) -> ImageDetections:
    image_id = obj["image_id"]
    if not isinstance(image_id, str):
        raise TypeError("image_id must be a string")
    try:
        dets = [
            Detection(str(d["class"]), float(d["score"]), BoundingBox(*(float(v) for v in d["box"])))
            for d in obj["detections"]
        ]
        width, height = int(obj["width"]), int(obj["height"])
        if width < 1 or height < 1:
            raise ValueError(f"invalid image size {width}x{height}")
    except (KeyError, TypeError, ValueError) as exc:
        raise DetectionFormatError(f"image {image_id!r}: {exc}") from exc
    return ImageDetections(image_id, width, height, dets)


def parse_detections(path: str | Path) -> dict[str, ImageDetections]:
    """Read a detections file into ``{image_id: ImageDetections}``.

    Blank lines are skipped. Errors name the line number, or the image id
    once the line is syntactically valid.
    """
    out: dict[str, ImageDetections] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict) or "image_id" not in obj:
                    raise ValueError("not an object with an image_id")
                if not isinstance(obj["image_id"], str):
                    raise ValueError("image_id is not a string")
            except ValueError as exc:
                raise DetectionFormatError(f"line {lineno}: malformed record ({exc})") from exc
            rec = _parse_record(obj)
            if rec.image_id in out:
                raise DetectionFormatError(f"image {rec.image_id!r}: duplicate image_id (line {lineno})")
            out[rec.image_id] = rec
    return out


def write_detections(path: str | Path, records: Iterable[ImageDetections]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def filter_detections(dets: Iterable[Detection], threshold: float = DEFAULT_DET_THRESHOLD) -> list[Detection]:
    """Keep detections whose confidence is strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    return [d for d in dets if d.score > threshold]


def read_class_list(path: str | Path) -> list[str]:
    """Newline-separated class vocabulary; blank lines ignored."""
    names = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n]
    if len(set(names)) != len(names):
        raise ValueError(f"{path}: duplicate class names")
    return names
