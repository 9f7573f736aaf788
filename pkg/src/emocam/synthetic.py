"""Fixed-seed synthetic fixtures: small models, image corpora, detections.

Used by the test suite and for desk-scale end-to-end runs when real EmoNet
weights and a detections file are unavailable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import ModelSpec, init_weights, model_from_descriptor, save_model

EMOTIONS = ["Joy", "Excitement", "Admiration", "Sadness", "Fear"]
OBJECT_CLASSES = ["Human face", "Clothing", "Tree", "Car", "Sports equipment", "Food", "Plant"]


def small_descriptor(input_hw: tuple[int, int] = (64, 64), labels: list[str] | None = None) -> dict:
    """Three conv + two linear layers, AlexNet-style ordering."""
    labels = list(labels or EMOTIONS)
    return {
        "input": {"channels": 3, "height": input_hw[0], "width": input_hw[1]},
        "normalization": {"mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]},
        "labels": labels,
        "layers": [
            {"name": "conv1", "kind": "conv2d", "out_channels": 8, "kernel": 5, "stride": 2, "padding": 2},
            {"name": "relu1", "kind": "relu"},
            {"name": "pool1", "kind": "maxpool", "kernel": 3, "stride": 2},
            {"name": "conv2", "kind": "conv2d", "out_channels": 12, "kernel": 3, "padding": 1},
            {"name": "relu2", "kind": "relu"},
            {"name": "conv3", "kind": "conv2d", "out_channels": 16, "kernel": 3, "padding": 1},
            {"name": "relu3", "kind": "relu"},
            {"name": "pool3", "kind": "maxpool", "kernel": 3, "stride": 2},
            {"name": "avgpool", "kind": "adaptive-avgpool", "output": [3, 3]},
            {"name": "flatten", "kind": "flatten"},
            {"name": "drop4", "kind": "dropout", "rate": 0.5},
            {"name": "fc4", "kind": "linear", "out_features": 32},
            {"name": "relu4", "kind": "relu"},
            {"name": "fc5", "kind": "linear", "out_features": len(labels)},
        ],
    }


def small_model(seed: int = 0, input_hw: tuple[int, int] = (64, 64), labels: list[str] | None = None) -> ModelSpec:
    desc = small_descriptor(input_hw, labels)
    return model_from_descriptor(desc, init_weights(desc, seed))


def random_image(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Smooth-ish RGB noise with a few solid rectangles, as (H, W, 4) uint8."""
    base = rng.integers(0, 256, size=(height // 8 + 1, width // 8 + 1, 3)).astype(np.float64)
    ys = np.minimum(np.arange(height) // 8, base.shape[0] - 1)
    xs = np.minimum(np.arange(width) // 8, base.shape[1] - 1)
    img = base[ys][:, xs]
    img += rng.normal(0, 12, size=img.shape)
    for _ in range(3):
        x0, y0 = rng.integers(0, width - 4), rng.integers(0, height - 4)
        x1, y1 = x0 + rng.integers(4, width // 2), y0 + rng.integers(4, height // 2)
        img[y0:y1, x0:x1] = rng.integers(0, 256, size=3)
    rgba = np.empty((height, width, 4), dtype=np.uint8)
    rgba[..., :3] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    rgba[..., 3] = 255
    return rgba


def random_detections(rng: np.random.Generator, width: int, height: int,
                      classes: list[str], max_boxes: int = 5) -> list[dict]:
    dets = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        bw = float(rng.uniform(4, width / 2))
        bh = float(rng.uniform(4, height / 2))
        x0 = float(rng.uniform(0, width - bw))
        y0 = float(rng.uniform(0, height - bh))
        dets.append({
            "class": classes[int(rng.integers(len(classes)))],
            "score": round(float(rng.uniform(0, 1)), 4),
            "box": [round(x0, 2), round(y0, 2), round(x0 + bw, 2), round(y0 + bh, 2)],
        })
    return dets


def write_corpus(root: str | Path, n_images: int = 6, size: tuple[int, int] = (64, 64),
                 seed: int = 0, model_seed: int = 0) -> dict[str, Path]:
    """Write a complete synthetic workspace under ``root``.

    Creates ``images/`` (PNG), ``detections.jsonl``, ``classes.txt``,
    ``model.json`` and ``model.weights``; returns their paths.
    """
    from .imaging import ImageRGBA, encode_png

    root = Path(root)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    w, h = size
    lines = []
    for i in range(n_images):
        image_id = f"img{i:04d}"
        pixels = random_image(rng, w, h)
        (img_dir / f"{image_id}.png").write_bytes(encode_png(ImageRGBA(pixels)))
        dets = random_detections(rng, w, h, OBJECT_CLASSES)
        lines.append(json.dumps({"image_id": image_id, "width": w, "height": h, "detections": dets}))
    det_path = root / "detections.jsonl"
    det_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    classes_path = root / "classes.txt"
    classes_path.write_text("".join(c + "\n" for c in OBJECT_CLASSES), encoding="utf-8")
    model = small_model(model_seed)
    desc_path, weights_path = root / "model.json", root / "model.weights"
    save_model(model, desc_path, weights_path)
    return {
        "images": img_dir,
        "detections": det_path,
        "classes": classes_path,
        "model": desc_path,
        "weights": weights_path,
    }
