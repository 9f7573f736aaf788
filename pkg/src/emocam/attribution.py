"""Class-activation maps at a target convolutional layer.

Three methods produce a raw, feature-resolution map:

* Grad-CAM: channel weights are the spatial mean of the class-logit gradient.
* Ablation-CAM: channel weights are the relative logit drop when the channel
  is zeroed, ``(y_c - y_c^k) / y_c``.
* Occlusion grid: the model input is split into ``grid_n x grid_n`` cells;
  each cell scores ``y_c(x) - y_c(x with the cell set to a baseline)``.

:func:`normalize_map` rectifies, upsamples to the original image size and
scales to a max of 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import ModelSpec, forward, forward_split, tail_backward, tail_forward
from .imaging import resize_map


class CamMethod(str, enum.Enum):
    GRADCAM = "gradcam"
    ABLATIONCAM = "ablationcam"
    OCCLUSION = "occlusion"


class DegenerateScoreError(ValueError):
    pass


class NumericError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ActivationMap:
    values: np.ndarray  # (height, width) float32 in [0, 1]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def weighted_channel_sum(weights: np.ndarray, activations: np.ndarray) -> np.ndarray:
    """``sum_k weights[k] * activations[k]`` in float64."""
    return np.tensordot(np.asarray(weights, dtype=np.float64),
                        np.asarray(activations, dtype=np.float64), axes=(0, 0))


def grad_cam_weights(gradients: np.ndarray) -> np.ndarray:
    return np.asarray(gradients, dtype=np.float64).mean(axis=(1, 2))


def grad_cam_raw(model: ModelSpec, x: np.ndarray, class_index: int, target_layer: str) -> np.ndarray:
    acts, trace = forward_split(model, x, target_layer)
    grads = tail_backward(model, trace, target_layer, class_index)
    return weighted_channel_sum(grad_cam_weights(grads), acts)


def ablation_weights(model: ModelSpec, target_layer: str, activations: np.ndarray,
                     class_index: int) -> tuple[np.ndarray, float]:
    """Per-channel Ablation-CAM weights and the baseline logit.

    Runs the tail exactly ``K + 1`` times for ``K`` channels.
    """
    y_c = float(tail_forward(model, target_layer, activations)[class_index])
    if abs(y_c) < 1e-8:
        raise DegenerateScoreError(
            f"class score {y_c!r} too close to zero; ablation weights undefined"
        )
    k = activations.shape[0]
    weights = np.empty(k, dtype=np.float64)
    for ch in range(k):
        ablated = activations.copy()
        ablated[ch] = 0.0
        y_k = float(tail_forward(model, target_layer, ablated)[class_index])
        weights[ch] = (y_c - y_k) / y_c
    return weights, y_c


def ablation_cam_raw(model: ModelSpec, x: np.ndarray, class_index: int, target_layer: str) -> np.ndarray:
    acts, _ = forward_split(model, x, target_layer)
    weights, _ = ablation_weights(model, target_layer, acts, class_index)
    return weighted_channel_sum(weights, acts)


def grid_cells(n: int, size: int) -> list[tuple[int, int]]:
    """Partition ``range(size)`` into ``n`` contiguous half-open spans."""
    return [((i * size) // n, ((i + 1) * size) // n) for i in range(n)]


def occlusion_grid_raw(model: ModelSpec, x: np.ndarray, class_index: int,
                       grid_n: int = 7, baseline_value: float = 0.0) -> np.ndarray:
    """Logit drop per occluded cell of the (normalized) model input."""
    if grid_n < 1:
        raise ValueError("grid_n must be >= 1")
    x = np.asarray(x, dtype=np.float32).reshape(model.input_shape)
    y_c = float(forward(model, x).logits[class_index])
    _, h, w = x.shape
    out = np.zeros((grid_n, grid_n), dtype=np.float64)
    for i, (r0, r1) in enumerate(grid_cells(grid_n, h)):
        for j, (c0, c1) in enumerate(grid_cells(grid_n, w)):
            if r0 == r1 or c0 == c1:
                continue
            occluded = x.copy()
            occluded[:, r0:r1, c0:c1] = baseline_value
            out[i, j] = y_c - float(forward(model, occluded).logits[class_index])
    return out


def normalize_map(raw: np.ndarray, out_w: int, out_h: int) -> ActivationMap:
    """Rectify, bilinearly upsample to ``(out_w, out_h)`` and divide by the max."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NumericError("raw map contains NaN or Inf")
    up = resize_map(np.maximum(raw, 0.0), out_w, out_h)
    peak = up.max()
    if peak > 0:
        values = (up / peak).astype(np.float32)
    else:
        values = np.zeros((out_h, out_w), dtype=np.float32)
    return ActivationMap(values)


def compute_raw(method: CamMethod | str, model: ModelSpec, x: np.ndarray, class_index: int,
                target_layer: str, grid_n: int = 7, baseline_value: float = 0.0) -> np.ndarray:
    method = CamMethod(method)
    if method is CamMethod.GRADCAM:
        return grad_cam_raw(model, x, class_index, target_layer)
    if method is CamMethod.ABLATIONCAM:
        return ablation_cam_raw(model, x, class_index, target_layer)
    return occlusion_grid_raw(model, x, class_index, grid_n, baseline_value)


# --- float map files --------------------------------------------------------------

MAP_MAGIC = "EMOCAM-MAP v1"


def encode_map(m: ActivationMap) -> bytes:
    header = f"{MAP_MAGIC} {m.width} {m.height}\n".encode("ascii")
    return header + np.ascontiguousarray(m.values, dtype="<f4").tobytes()


def decode_map(data: bytes) -> ActivationMap:
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError("map file lacks a header line")
    parts = data[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 4 or " ".join(parts[:2]) != MAP_MAGIC:
        raise ValueError(f"bad map header {data[:nl]!r}")
    w, h = int(parts[2]), int(parts[3])
    body = data[nl + 1 :]
    if len(body) != 4 * w * h:
        raise ValueError(f"map body has {len(body)} bytes, expected {4 * w * h}")
    return ActivationMap(np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32))


def write_map(path: str | Path, m: ActivationMap) -> None:
    Path(path).write_bytes(encode_map(m))


def read_map(path: str | Path) -> ActivationMap:
    return decode_map(Path(path).read_bytes())
