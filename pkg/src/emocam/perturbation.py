"""Paste-an-object experiment: label switches under patch compositing."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .engine import ModelSpec, PredictionResult, forward
from .imaging import ImageRGBA, composite_over, decode_image, to_model_input

PATCH_HEIGHT_FRACTION = 0.2


@dataclass(frozen=True)
class PositionGrid:
    positions: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.positions:
            raise ValueError("position grid must be nonempty")
        for cx, cy in self.positions:
            if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
                raise ValueError(f"position {(cx, cy)} outside [0, 1]^2")
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("duplicate positions in grid")

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)


def default_grid() -> PositionGrid:
    """4x4 lattice over {0.2, 0.4, 0.6, 0.8}, row-major, then the center."""
    steps = (0.2, 0.4, 0.6, 0.8)
    pts = [(cx, cy) for cy in steps for cx in steps]
    pts.append((0.5, 0.5))
    return PositionGrid(tuple(pts))


def read_positions(path: str | Path) -> PositionGrid:
    """Positions file: one ``cx cy`` (or ``cx,cy``) pair per line; ``#`` comments."""
    pts = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{path}: bad position line {line!r}")
        pts.append((float(parts[0]), float(parts[1])))
    return PositionGrid(tuple(pts))


@dataclass(frozen=True)
class PerturbationOutcome:
    image_id: str
    patch_name: str
    position_index: int
    original_label: str
    new_label: str
    changed: bool
    # full predictions; kept in memory only
    original: PredictionResult | None = field(default=None, compare=False, repr=False)
    perturbed: PredictionResult | None = field(default=None, compare=False, repr=False)

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k not in ("original", "perturbed")}
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> PerturbationOutcome:
        d = json.loads(line)
        return cls(d["image_id"], d["patch_name"], int(d["position_index"]),
                   d["original_label"], d["new_label"], bool(d["changed"]))

    def sort_key(self):
        return (self.image_id, self.patch_name, self.position_index)


def predict_image(model: ModelSpec, image: ImageRGBA) -> PredictionResult:
    return forward(model, to_model_input(image, model))


def perturb_and_predict(model: ModelSpec, image: ImageRGBA, patch: ImageRGBA,
                        position: tuple[float, float], *, image_id: str = "",
                        patch_name: str = "", position_index: int = 0,
                        original: PredictionResult | None = None,
                        fraction: float = PATCH_HEIGHT_FRACTION) -> PerturbationOutcome:
    """Paste ``patch`` at ``position`` and compare argmax labels before/after."""
    if original is None:
        original = predict_image(model, image)
    altered = composite_over(image, patch, position, fraction)
    new = predict_image(model, altered)
    a = model.labels[original.predicted_index]
    b = model.labels[new.predicted_index]
    return PerturbationOutcome(image_id, patch_name, position_index, a, b, a != b, original, new)


@dataclass
class ExperimentResult:
    outcomes: list[PerturbationOutcome]
    failures: dict[str, str] = field(default_factory=dict)


ImageSource = ImageRGBA | str | Path | Callable[[], ImageRGBA]


def _load(src: ImageSource) -> ImageRGBA:
    if isinstance(src, ImageRGBA):
        return src
    if callable(src):
        return src()
    return decode_image(src)


def _run_one(model: ModelSpec, image_id: str, src: ImageSource,
             patches: Sequence[tuple[str, ImageRGBA]], grid: PositionGrid,
             fraction: float) -> list[PerturbationOutcome]:
    image = _load(src)
    original = predict_image(model, image)
    out = []
    for name, patch in patches:
        for k, pos in enumerate(grid):
            out.append(perturb_and_predict(model, image, patch, pos, image_id=image_id,
                                           patch_name=name, position_index=k,
                                           original=original, fraction=fraction))
    return out


def _worker(args):
    model, image_id, src, patches, grid, fraction = args
    try:
        outs = _run_one(model, image_id, src, patches, grid, fraction)
    except Exception as exc:  # noqa: BLE001 - recorded per image
        return image_id, None, f"{type(exc).__name__}: {exc}"
    # drop the in-memory predictions before crossing the process boundary
    return image_id, [PerturbationOutcome(o.image_id, o.patch_name, o.position_index,
                                          o.original_label, o.new_label, o.changed)
                      for o in outs], None


def run_experiment(model: ModelSpec, corpus: Mapping[str, ImageSource],
                   patches: Mapping[str, ImageRGBA], grid: PositionGrid | None = None,
                   *, workers: int = 1, fraction: float = PATCH_HEIGHT_FRACTION) -> ExperimentResult:
    """Every image x patch x position; outcomes sorted by (image, patch, position).

    Images that fail to load or predict are skipped and listed in
    ``failures``.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if not patches:
        raise ValueError("no patches given")
    grid = grid or default_grid()
    plist = sorted(patches.items())
    ids = sorted(corpus)
    outcomes: list[PerturbationOutcome] = []
    failures: dict[str, str] = {}
    if workers <= 1:
        for image_id in ids:
            try:
                outcomes.extend(_run_one(model, image_id, corpus[image_id], plist, grid, fraction))
            except Exception as exc:  # noqa: BLE001
                failures[image_id] = f"{type(exc).__name__}: {exc}"
    else:
        jobs = [(model, i, corpus[i], plist, grid, fraction) for i in ids]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for image_id, outs, err in pool.map(_worker, jobs):
                if err is not None:
                    failures[image_id] = err
                else:
                    outcomes.extend(outs)
    outcomes.sort(key=PerturbationOutcome.sort_key)
    return ExperimentResult(outcomes, failures)


@dataclass(frozen=True)
class CellSummary:
    patch_name: str
    position_index: int
    total: int
    n_changed: int
    percent_changed: float
    modal_new_label: str | None


def summarize(outcomes: Iterable[PerturbationOutcome]) -> list[CellSummary]:
    """Percent changed and most common switched-to label per (patch, position)."""
    cells: dict[tuple[str, int], list[PerturbationOutcome]] = {}
    for o in outcomes:
        cells.setdefault((o.patch_name, o.position_index), []).append(o)
    out = []
    for key in sorted(cells):
        group = cells[key]
        changed = [o.new_label for o in group if o.changed]
        modal = None
        if changed:
            counts = Counter(changed)
            top = max(counts.values())
            modal = min(label for label, c in counts.items() if c == top)
        out.append(CellSummary(key[0], key[1], len(group), len(changed),
                               100.0 * len(changed) / len(group), modal))
    return out


def write_outcomes(path: str | Path, outcomes: Iterable[PerturbationOutcome]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for o in outcomes:
            fh.write(o.to_json() + "\n")


def read_outcomes(path: str | Path) -> list[PerturbationOutcome]:
    with open(path, encoding="utf-8") as fh:
        return [PerturbationOutcome.from_json(line) for line in fh if line.strip()]


def summary_csv(summary: Sequence[CellSummary], grid: PositionGrid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patch", "position_index", "cx", "cy", "percent_changed", "modal_new_label"])
    for s in summary:
        cx, cy = grid.positions[s.position_index]
        w.writerow([s.patch_name, s.position_index, f"{cx:.4f}", f"{cy:.4f}",
                    f"{s.percent_changed:.4f}", s.modal_new_label or ""])
    return buf.getvalue()


def transparent_patch(width: int = 16, height: int = 16) -> ImageRGBA:
    return ImageRGBA(np.zeros((height, width, 4), dtype=np.uint8))
