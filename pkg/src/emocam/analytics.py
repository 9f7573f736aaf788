"""Corpus-level association matrices, class ranking and cross-method RSA."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class AssociationMatrix:
    """Image counts per (object class, predicted emotion).

    ``counts[i, j]`` is the number of images predicted as emotion ``j`` whose
    important-box set contains class ``i`` at least once; ``images_per_emotion[j]``
    is the number of images predicted as ``j``.
    """

    class_names: list[str]
    emotion_labels: list[str]
    counts: np.ndarray
    images_per_emotion: np.ndarray

    @classmethod
    def zeros(cls, class_names: Sequence[str], emotion_labels: Sequence[str]) -> AssociationMatrix:
        return cls(list(class_names), list(emotion_labels),
                   np.zeros((len(class_names), len(emotion_labels)), dtype=np.int64),
                   np.zeros(len(emotion_labels), dtype=np.int64))

    def add(self, predicted_label: str, classes: Iterable[str]) -> None:
        try:
            j = self.emotion_labels.index(predicted_label)
        except ValueError:
            raise ValueError(f"unknown emotion label {predicted_label!r}") from None
        rows = []
        for name in set(classes):
            try:
                rows.append(self.class_names.index(name))
            except ValueError:
                raise ValueError(f"unknown object class {name!r}") from None
        self.images_per_emotion[j] += 1
        for i in rows:
            self.counts[i, j] += 1

    def merge(self, other: AssociationMatrix) -> AssociationMatrix:
        if other.class_names != self.class_names or other.emotion_labels != self.emotion_labels:
            raise ValueError("cannot merge matrices with different orderings")
        return AssociationMatrix(self.class_names, self.emotion_labels,
                                 self.counts + other.counts,
                                 self.images_per_emotion + other.images_per_emotion)

    def to_json(self) -> str:
        return json.dumps({
            "class_names": self.class_names,
            "emotion_labels": self.emotion_labels,
            "counts": self.counts.tolist(),
            "images_per_emotion": self.images_per_emotion.tolist(),
        }, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> AssociationMatrix:
        d = json.loads(text)
        counts = np.asarray(d["counts"], dtype=np.int64).reshape(len(d["class_names"]), len(d["emotion_labels"]))
        return cls(d["class_names"], d["emotion_labels"], counts,
                   np.asarray(d["images_per_emotion"], dtype=np.int64))


@dataclass
class NormalizedAssociation:
    class_names: list[str]
    emotion_labels: list[str]
    percentages: np.ndarray


@dataclass
class RsaMatrix:
    methods: list[str]
    rho: np.ndarray
    p_values: np.ndarray


def accumulate(records: Iterable[tuple[str, Iterable[str]]], class_names: Sequence[str],
               emotion_labels: Sequence[str]) -> AssociationMatrix:
    """Build M_A from ``(predicted_label, important classes)`` per image."""
    m = AssociationMatrix.zeros(class_names, emotion_labels)
    for label, classes in records:
        m.add(label, classes)
    return m


def normalize(m: AssociationMatrix) -> NormalizedAssociation:
    """Column-wise percentages; columns with no images are all zero."""
    n = m.images_per_emotion.astype(np.float64)
    pct = np.zeros(m.counts.shape, dtype=np.float64)
    nz = n > 0
    pct[:, nz] = 100.0 * m.counts[:, nz] / n[nz]
    return NormalizedAssociation(list(m.class_names), list(m.emotion_labels), pct)


def top_k_classes(m: NormalizedAssociation, k: int = 25) -> list[str]:
    """Classes by descending row mean, ties broken by name."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not m.class_names:
        return []
    if m.percentages.shape[1] == 0:
        means = np.zeros(len(m.class_names))
    else:
        means = m.percentages.mean(axis=1)
    order = sorted(range(len(m.class_names)), key=lambda i: (-means[i], m.class_names[i]))
    return [m.class_names[i] for i in order[:k]]


def restrict(m: NormalizedAssociation, classes: Sequence[str]) -> NormalizedAssociation:
    idx = [m.class_names.index(c) for c in classes]
    return NormalizedAssociation(list(classes), list(m.emotion_labels), m.percentages[idx])


def flatten(m: AssociationMatrix | NormalizedAssociation) -> np.ndarray:
    """Row-major concatenation of the matrix rows."""
    data = m.counts if isinstance(m, AssociationMatrix) else m.percentages
    return np.asarray(data, dtype=np.float64).reshape(-1)


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    boundaries = np.flatnonzero(np.diff(sx) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(sx)]))
    ranks = np.empty(len(x), dtype=np.float64)
    # positions start..end-1 share rank mean(start+1 .. end)
    group_rank = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Spearman's rho with a two-sided Student-t p-value.

    Raises:
        UndefinedCorrelationError: either input is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D vectors of equal length")
    n = len(x)
    if n < 3:
        raise ValueError("spearman needs at least 3 observations")
    rx = average_ranks(x)
    ry = average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    rho = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    rho = min(1.0, max(-1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return rho, min(1.0, max(0.0, p))


def rsa(matrices: dict[str, AssociationMatrix], use_percentages: bool = False) -> RsaMatrix:
    """Pairwise Spearman correlation of flattened association matrices."""
    names = list(matrices)
    if len(names) < 2:
        raise ValueError("RSA needs at least two methods")
    ref = matrices[names[0]]
    for name in names[1:]:
        m = matrices[name]
        if m.class_names != ref.class_names or m.emotion_labels != ref.emotion_labels:
            raise ValueError(f"method {name!r} uses a different class/emotion ordering")
    vecs = [flatten(normalize(matrices[n])) if use_percentages else flatten(matrices[n]) for n in names]
    k = len(names)
    rho = np.eye(k)
    p = np.zeros((k, k))
    for a in range(k):
        for b in range(a + 1, k):
            r, pv = spearman(vecs[a], vecs[b])
            rho[a, b] = rho[b, a] = r
            p[a, b] = p[b, a] = pv
    return RsaMatrix(names, rho, p)


# --- export ---------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.4f}"


def matrix_csv(row_names: Sequence[str], col_names: Sequence[str], data: np.ndarray,
               corner: str = "class") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([corner, *col_names])
    arr = np.asarray(data)
    for i, name in enumerate(row_names):
        w.writerow([name, *(_fmt(v) for v in arr[i])])
    return buf.getvalue()


def to_csv(m: AssociationMatrix | NormalizedAssociation | RsaMatrix, which: str = "rho") -> str:
    """CSV text: header of column names, first column of row names."""
    if isinstance(m, AssociationMatrix):
        return matrix_csv(m.class_names, m.emotion_labels, m.counts)
    if isinstance(m, NormalizedAssociation):
        return matrix_csv(m.class_names, m.emotion_labels, m.percentages.astype(np.float64))
    data = m.rho if which == "rho" else m.p_values
    return matrix_csv(m.methods, m.methods, data.astype(np.float64), corner="method")


def export(m, path: str | Path, format: str = "csv", which: str = "rho") -> None:
    """Write ``m`` as CSV, or as a PNG heatmap (``format="png"``)."""
    path = Path(path)
    if format == "csv":
        path.write_text(to_csv(m, which), encoding="utf-8", newline="")
    elif format == "png":
        from .imaging import write_png
        write_png(path, heatmap_image(m, which))
    else:
        raise ValueError(f"unknown export format {format!r}")


def heatmap_image(m, which: str = "rho", cell: int = 16):
    """Blocky colormapped rendering of a matrix, min-max scaled."""
    from .imaging import ImageRGBA, colormap

    if isinstance(m, AssociationMatrix):
        data = m.counts.astype(np.float64)
    elif isinstance(m, NormalizedAssociation):
        data = m.percentages
    else:
        data = m.rho if which == "rho" else m.p_values
    data = np.asarray(data, dtype=np.float64)
    if data.size == 0:
        data = np.zeros((1, 1))
    lo, hi = data.min(), data.max()
    scaled = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    big = np.kron(scaled, np.ones((cell, cell)))
    px = np.empty(big.shape + (4,), dtype=np.uint8)
    px[..., :3] = np.rint(colormap(big)).astype(np.uint8)
    px[..., 3] = 255
    return ImageRGBA(px)
