"""Box importance (mean CAM activation inside a box) and the B* selection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .detections import BoundingBox, Detection

DEFAULT_CACT_THRESHOLD = 0.3


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredDetection:
    detection: Detection
    c_act: float


def box_pixel_span(lo: float, hi: float, size: int) -> tuple[int, int]:
    """Half-open index span of pixels ``p`` with ``lo <= p + 0.5 < hi``, clipped to ``[0, size)``."""
    start = max(0, math.ceil(lo - 0.5))
    stop = min(size, math.ceil(hi - 0.5))
    return start, max(start, stop)


def box_importance(values: np.ndarray, box: BoundingBox) -> float:
    """Mean map value over the pixels whose centers lie inside ``box``.

    Raises:
        DegenerateBoxError: the clipped box covers no pixel center.
    """
    values = np.asarray(values)
    h, w = values.shape
    x0, x1 = box_pixel_span(box.x_min, box.x_max, w)
    y0, y1 = box_pixel_span(box.y_min, box.y_max, h)
    area = (x1 - x0) * (y1 - y0)
    if area == 0:
        raise DegenerateBoxError(f"box {box.as_list()} covers no pixel of a {w}x{h} map")
    total = float(np.sum(values[y0:y1, x0:x1], dtype=np.float64))
    return min(1.0, max(0.0, total / area))


def select_important(dets: Iterable[Detection], values: np.ndarray,
                     threshold: float = DEFAULT_CACT_THRESHOLD) -> list[ScoredDetection]:
    """B*: detections whose importance is strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    out = []
    for d in dets:
        c = box_importance(values, d.box)
        if c > threshold:
            out.append(ScoredDetection(d, c))
    return out


def bstar_line(image_id: str, predicted_label: str, method: str,
               bstar: Iterable[ScoredDetection]) -> str:
    return json.dumps({
        "image_id": image_id,
        "predicted_label": predicted_label,
        "method": method,
        "bstar": [{"class": s.detection.class_name, "c_act": round(s.c_act, 6)} for s in bstar],
    }, ensure_ascii=False)
