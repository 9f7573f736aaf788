"""Minimal CNN inference engine for AlexNet-family classifiers.

Tensors are plain ``numpy.float32`` arrays in channel-major layout without a
batch axis: ``(C, H, W)`` for feature maps and ``(N,)`` for vectors. Every
layer computes in float64 and rounds its output to float32.

Besides the plain forward pass the engine can split a network at a named
convolution, re-run only the tail from (possibly edited) activations, and
back-propagate a class logit through the tail to those activations. This is
all the machinery that Grad-CAM and Ablation-CAM need when the target is the
last convolutional layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .container import load_tensors

LAYER_KINDS = ("conv2d", "relu", "maxpool", "adaptive-avgpool", "flatten", "linear", "dropout")
TAIL_KINDS = frozenset({"relu", "maxpool", "adaptive-avgpool", "flatten", "linear", "dropout"})


class ModelError(ValueError):
    """Invalid descriptor, weights, or layer/input combination."""


class MissingTensorError(ModelError):
    def __init__(self, name: str):
        super().__init__(f"missing tensor {name!r} in weights container")
        self.name = name


def _pair(v: Any, what: str) -> tuple[int, int]:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ModelError(f"{what} must be an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    output_size: tuple[int, int] = (1, 1)
    out_features: int = 0
    rate: float = 0.0
    weights: str | None = None
    bias: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        try:
            name = str(d["name"])
            kind = str(d["kind"])
        except KeyError as exc:
            raise ModelError(f"layer entry lacks {exc.args[0]!r}: {d!r}") from None
        if kind not in LAYER_KINDS:
            raise ModelError(f"layer {name!r}: unknown kind {kind!r}")
        kw: dict[str, Any] = {"name": name, "kind": kind}
        if kind == "conv2d":
            kw["out_channels"] = int(d["out_channels"])
            kw["kernel"] = _pair(d["kernel"], f"{name}.kernel")
            kw["stride"] = _pair(d.get("stride", 1), f"{name}.stride")
            kw["padding"] = _pair(d.get("padding", 0), f"{name}.padding")
        elif kind == "maxpool":
            kw["kernel"] = _pair(d["kernel"], f"{name}.kernel")
            kw["stride"] = _pair(d.get("stride", d["kernel"]), f"{name}.stride")
        elif kind == "adaptive-avgpool":
            kw["output_size"] = _pair(d["output"], f"{name}.output")
        elif kind == "linear":
            kw["out_features"] = int(d["out_features"])
        elif kind == "dropout":
            kw["rate"] = float(d.get("rate", 0.5))
        if kind in ("conv2d", "linear"):
            kw["weights"] = str(d.get("weights", f"{name}.weight"))
            kw["bias"] = str(d.get("bias", f"{name}.bias"))
        spec = cls(**kw)
        spec.validate()
        return spec

    def validate(self) -> None:
        if min(self.stride) < 1 or min(self.kernel) < 1:
            raise ModelError(f"layer {self.name!r}: stride and kernel must be >= 1")
        if min(self.padding) < 0:
            raise ModelError(f"layer {self.name!r}: padding must be >= 0")
        if self.kind == "conv2d" and self.out_channels < 1:
            raise ModelError(f"layer {self.name!r}: out_channels must be >= 1")
        if self.kind == "linear" and self.out_features < 1:
            raise ModelError(f"layer {self.name!r}: out_features must be >= 1")
        if self.kind == "adaptive-avgpool" and min(self.output_size) < 1:
            raise ModelError(f"layer {self.name!r}: output size must be >= 1")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "kind": self.kind}
        if self.kind == "conv2d":
            d.update(out_channels=self.out_channels, kernel=list(self.kernel),
                     stride=list(self.stride), padding=list(self.padding))
        elif self.kind == "maxpool":
            d.update(kernel=list(self.kernel), stride=list(self.stride))
        elif self.kind == "adaptive-avgpool":
            d["output"] = list(self.output_size)
        elif self.kind == "linear":
            d["out_features"] = self.out_features
        elif self.kind == "dropout":
            d["rate"] = self.rate
        if self.weights is not None:
            d["weights"] = self.weights
            d["bias"] = self.bias
        return d

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape produced from an input of ``in_shape``; raises on mismatch."""
        k = self.kind
        if k in ("relu", "dropout"):
            return tuple(in_shape)
        if k == "flatten":
            return (int(np.prod(in_shape)),)
        if k == "linear":
            return (self.out_features,)
        if len(in_shape) != 3:
            raise ModelError(f"layer {self.name!r}: {k} expects (C, H, W), got shape {in_shape}")
        c, h, w = in_shape
        if k == "adaptive-avgpool":
            return (c, *self.output_size)
        ph, pw = self.padding if k == "conv2d" else (0, 0)
        kh, kw = self.kernel
        sh, sw = self.stride
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ModelError(
                f"layer {self.name!r}: kernel {self.kernel} larger than padded input {(h, w)}"
            )
        return (self.out_channels if k == "conv2d" else c, oh, ow)


@dataclass
class ModelSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]  # (channels, height, width)
    mean: np.ndarray
    std: np.ndarray
    labels: list[str]
    weights: dict[str, np.ndarray] = field(repr=False)
    shapes: list[tuple[int, ...]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ModelError("layer names must be unique")
        if len(self.mean) != self.input_shape[0] or len(self.std) != self.input_shape[0]:
            raise ModelError("normalization mean/std length must equal input channels")
        if np.any(np.asarray(self.std) <= 0):
            raise ModelError("normalization std must be positive")
        shape: tuple[int, ...] = tuple(self.input_shape)
        shapes = []
        for layer in self.layers:
            if layer.kind == "conv2d":
                kh, kw = layer.kernel
                self._check(layer.weights, (layer.out_channels, shape[0] if len(shape) == 3 else -1, kh, kw), layer)
                self._check(layer.bias, (layer.out_channels,), layer)
            elif layer.kind == "linear":
                self._check(layer.weights, (layer.out_features, int(np.prod(shape))), layer)
                self._check(layer.bias, (layer.out_features,), layer)
            shape = layer.output_shape(shape)
            shapes.append(shape)
        linears = [l for l in self.layers if l.kind == "linear"]
        if not linears or self.layers[-1].kind not in ("linear", "dropout"):
            raise ModelError("model must end with a linear layer")
        if shape != (len(self.labels),):
            raise ModelError(
                f"final output dimension {shape} does not match {len(self.labels)} labels"
            )
        self.shapes = shapes

    def _check(self, name: str | None, expected: tuple[int, ...], layer: LayerSpec) -> None:
        if name not in self.weights:
            raise MissingTensorError(str(name))
        found = tuple(self.weights[name].shape)
        if found != expected:
            raise ModelError(
                f"layer {layer.name!r}: tensor {name!r} has shape {list(found)}, "
                f"expected {list(expected)}"
            )

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise ModelError(f"unknown layer {name!r}")

    def last_conv(self) -> str:
        convs = [l.name for l in self.layers if l.kind == "conv2d"]
        if not convs:
            raise ModelError("model has no conv2d layer")
        return convs[-1]

    def descriptor(self) -> dict:
        c, h, w = self.input_shape
        return {
            "input": {"channels": c, "height": h, "width": w},
            "normalization": {"mean": [float(m) for m in self.mean], "std": [float(s) for s in self.std]},
            "labels": list(self.labels),
            "layers": [l.to_dict() for l in self.layers],
        }


def model_from_descriptor(desc: dict, weights: dict[str, np.ndarray]) -> ModelSpec:
    try:
        inp = desc["input"]
        norm = desc["normalization"]
        input_shape = (int(inp["channels"]), int(inp["height"]), int(inp["width"]))
        layers = [LayerSpec.from_dict(d) for d in desc["layers"]]
        labels = [str(s) for s in desc["labels"]]
        mean = np.asarray(norm["mean"], dtype=np.float64)
        std = np.asarray(norm["std"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed architecture descriptor: {exc!r}") from exc
    return ModelSpec(layers, input_shape, mean, std, labels, dict(weights))


def load_model(descriptor_path: str | Path, weights_path: str | Path) -> ModelSpec:
    """Load an architecture descriptor and its weights container.

    Raises:
        MissingTensorError: a parameterized layer names an absent tensor.
        ModelError: malformed descriptor or a weight shape mismatch.
        ContainerError: the weights file header is malformed.
    """
    try:
        desc = json.loads(Path(descriptor_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelError(f"descriptor {descriptor_path} is not valid JSON: {exc}") from exc
    return model_from_descriptor(desc, load_tensors(weights_path))


def save_model(model: ModelSpec, descriptor_path: str | Path, weights_path: str | Path) -> None:
    from .container import save_tensors

    Path(descriptor_path).write_text(json.dumps(model.descriptor(), indent=2), encoding="utf-8")
    save_tensors(weights_path, model.weights)


@dataclass
class ForwardTrace:
    """Per-layer outputs of one forward pass plus maxpool argmax maps.

    ``outputs[i]`` is the output of ``layers[i]``; ``argmax[i]`` holds, for a
    maxpool layer, the flat index into the input plane ``h * W + w`` of the
    winning element for every output position.
    """

    input: np.ndarray
    outputs: list[np.ndarray] = field(default_factory=list)
    argmax: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]


@dataclass(frozen=True)
class PredictionResult:
    logits: np.ndarray
    probabilities: np.ndarray
    predicted_index: int


# --- layer kernels -----------------------------------------------------------

def _windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """View of shape (C, OH, OW, kh, kw) over a (C, H, W) array."""
    c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    s0, s1, s2 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(c, oh, ow, kh, kw), strides=(s0, s1 * sh, s2 * sw, s1, s2), writeable=False
    )


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           stride: tuple[int, int], padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    xd = np.asarray(x, dtype=np.float64)
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (ph, ph), (pw, pw)))
    o, _, kh, kw = weight.shape
    win = _windows(np.ascontiguousarray(xd), kh, kw, *stride)
    _, oh, ow = win.shape[:3]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, -1)
    wd = weight.reshape(o, -1).astype(np.float64)
    out = cols @ wd.T + bias.astype(np.float64)
    return out.T.reshape(o, oh, ow).astype(np.float32)


def maxpool(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    kh, kw = kernel
    sh, sw = stride
    c, h, w = x.shape
    win = _windows(np.ascontiguousarray(x), kh, kw, sh, sw)
    _, oh, ow = win.shape[:3]
    flat = win.reshape(c, oh, ow, kh * kw)
    # np.argmax returns the first maximum in row-major window order.
    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * sh + local // kw
    cols = np.arange(ow)[None, :] * sw + local % kw
    return out.astype(np.float32), (rows * w + cols).astype(np.int64)


def _bins(n_in: int, n_out: int) -> list[tuple[int, int]]:
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_avgpool(x: np.ndarray, output_size: tuple[int, int]) -> np.ndarray:
    c, h, w = x.shape
    oh, ow = output_size
    xd = x.astype(np.float64)
    out = np.empty((c, oh, ow), dtype=np.float64)
    for i, (r0, r1) in enumerate(_bins(h, oh)):
        for j, (c0, c1) in enumerate(_bins(w, ow)):
            out[:, i, j] = xd[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return out.astype(np.float32)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = weight.astype(np.float64) @ x.astype(np.float64) + bias.astype(np.float64)
    return out.astype(np.float32)


def apply_layer(model: ModelSpec, layer: LayerSpec, x: np.ndarray,
                trace: ForwardTrace | None = None, index: int | None = None) -> np.ndarray:
    """Apply one layer to ``x``; maxpool argmax maps are recorded in ``trace``."""
    layer.output_shape(tuple(x.shape))
    k = layer.kind
    if k == "conv2d":
        if x.shape[0] != model.weights[layer.weights].shape[1]:
            raise ModelError(
                f"layer {layer.name!r}: expected {model.weights[layer.weights].shape[1]} "
                f"input channels, got {x.shape[0]}"
            )
        return conv2d(x, model.weights[layer.weights], model.weights[layer.bias],
                      layer.stride, layer.padding)
    if k == "relu":
        return np.maximum(x, np.float32(0.0))
    if k == "maxpool":
        out, idx = maxpool(x, layer.kernel, layer.stride)
        if trace is not None and index is not None:
            trace.argmax[index] = idx
        return out
    if k == "adaptive-avgpool":
        return adaptive_avgpool(x, layer.output_size)
    if k == "flatten":
        return x.reshape(-1)
    if k == "linear":
        if x.size != model.weights[layer.weights].shape[1]:
            raise ModelError(
                f"layer {layer.name!r}: expected {model.weights[layer.weights].shape[1]} "
                f"features, got {x.size}"
            )
        return linear(x.reshape(-1), model.weights[layer.weights], model.weights[layer.bias])
    if k == "dropout":
        return x
    raise ModelError(f"layer {layer.name!r}: unknown kind {k!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def _check_input(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if tuple(x.shape) != tuple(model.input_shape):
        if x.size != int(np.prod(model.input_shape)):
            raise ModelError(f"input shape {x.shape} does not match model input {model.input_shape}")
        x = x.reshape(model.input_shape)
    return x


def _run(model: ModelSpec, x: np.ndarray, start: int, trace: ForwardTrace | None) -> np.ndarray:
    for i in range(start, len(model.layers)):
        x = apply_layer(model, model.layers[i], x, trace, i)
        if trace is not None:
            trace.outputs.append(x)
    return x


def run_trace(model: ModelSpec, x: np.ndarray) -> ForwardTrace:
    x = _check_input(model, x)
    trace = ForwardTrace(input=x)
    _run(model, x, 0, trace)
    return trace


def predict_logits(logits: np.ndarray) -> PredictionResult:
    probs = softmax(logits)
    return PredictionResult(np.asarray(logits), probs, int(np.argmax(logits)))


def forward(model: ModelSpec, x: np.ndarray) -> PredictionResult:
    """Full forward pass: logits, softmax probabilities, argmax class."""
    x = _check_input(model, x)
    return predict_logits(_run(model, x, 0, None))


def forward_split(model: ModelSpec, x: np.ndarray, target_layer: str) -> tuple[np.ndarray, ForwardTrace]:
    """Run the full network and return the target conv layer's raw output."""
    idx = model.layer_index(target_layer)
    if model.layers[idx].kind != "conv2d":
        raise ModelError(f"target layer {target_layer!r} is not a conv2d layer")
    trace = run_trace(model, x)
    return trace.outputs[idx], trace


def tail_forward(model: ModelSpec, target_layer: str, activations: np.ndarray) -> np.ndarray:
    """Logits obtained by running only the layers after ``target_layer``."""
    idx = model.layer_index(target_layer)
    activations = np.asarray(activations, dtype=np.float32)
    expected = model.shapes[idx]
    if tuple(activations.shape) != tuple(expected):
        raise ModelError(
            f"activations shape {activations.shape} does not match {target_layer!r} output {expected}"
        )
    return _run(model, activations, idx + 1, None)


def tail_backward(model: ModelSpec, trace: ForwardTrace, target_layer: str, class_index: int) -> np.ndarray:
    """Gradient of logit ``class_index`` with respect to ``target_layer``'s output.

    Only relu, maxpool, adaptive-avgpool, flatten, linear and dropout may
    follow the target layer.
    """
    idx = model.layer_index(target_layer)
    n_out = model.shapes[-1][0]
    if not 0 <= class_index < n_out:
        raise ModelError(f"class index {class_index} out of range for {n_out} outputs")
    if len(trace.outputs) != len(model.layers):
        raise ModelError("trace does not cover the full forward pass")

    grad = np.zeros(n_out, dtype=np.float64)
    grad[class_index] = 1.0
    for i in range(len(model.layers) - 1, idx, -1):
        layer = model.layers[i]
        x_in = trace.outputs[i - 1]
        k = layer.kind
        if k not in TAIL_KINDS:
            raise ModelError(
                f"layer {layer.name!r} of kind {k!r} after the target layer; "
                "backward through it is not supported"
            )
        if k == "linear":
            grad = (model.weights[layer.weights].astype(np.float64).T @ grad).reshape(x_in.shape)
        elif k == "relu":
            grad = np.where(x_in > 0, grad, 0.0)
        elif k == "flatten":
            grad = grad.reshape(x_in.shape)
        elif k == "maxpool":
            c, h, w = x_in.shape
            g = np.zeros((c, h * w), dtype=np.float64)
            am = trace.argmax[i].reshape(c, -1)
            rows = np.repeat(np.arange(c), am.shape[1])
            np.add.at(g, (rows, am.ravel()), grad.reshape(c, -1).ravel())
            grad = g.reshape(c, h, w)
        elif k == "adaptive-avgpool":
            c, h, w = x_in.shape
            g = np.zeros((c, h, w), dtype=np.float64)
            oh, ow = layer.output_size
            for a, (r0, r1) in enumerate(_bins(h, oh)):
                for b, (c0, c1) in enumerate(_bins(w, ow)):
                    area = (r1 - r0) * (c1 - c0)
                    g[:, r0:r1, c0:c1] += grad[:, a, b][:, None, None] / area
            grad = g
        # dropout: identity
    return grad.astype(np.float32)


def attribution_targets(model: ModelSpec) -> list[str]:
    """Names of conv layers usable as attribution targets (no conv after them)."""
    convs = [i for i, l in enumerate(model.layers) if l.kind == "conv2d"]
    return [model.layers[i].name for i in convs
            if all(l.kind in TAIL_KINDS for l in model.layers[i + 1:])]


def alexnet_descriptor(num_classes: int = 26, input_hw: tuple[int, int] = (227, 227),
                       labels: list[str] | None = None, hidden: int = 4096) -> dict:
    """Descriptor for the torchvision-style AlexNet layout.

    ``hidden`` sets the width of the two fully connected hidden layers; tests
    shrink it to keep weight files small.
    """
    layers = [
        {"name": "conv1", "kind": "conv2d", "out_channels": 64, "kernel": 11, "stride": 4, "padding": 2},
        {"name": "relu1", "kind": "relu"},
        {"name": "pool1", "kind": "maxpool", "kernel": 3, "stride": 2},
        {"name": "conv2", "kind": "conv2d", "out_channels": 192, "kernel": 5, "padding": 2},
        {"name": "relu2", "kind": "relu"},
        {"name": "pool2", "kind": "maxpool", "kernel": 3, "stride": 2},
        {"name": "conv3", "kind": "conv2d", "out_channels": 384, "kernel": 3, "padding": 1},
        {"name": "relu3", "kind": "relu"},
        {"name": "conv4", "kind": "conv2d", "out_channels": 256, "kernel": 3, "padding": 1},
        {"name": "relu4", "kind": "relu"},
        {"name": "conv5", "kind": "conv2d", "out_channels": 256, "kernel": 3, "padding": 1},
        {"name": "relu5", "kind": "relu"},
        {"name": "pool5", "kind": "maxpool", "kernel": 3, "stride": 2},
        {"name": "avgpool", "kind": "adaptive-avgpool", "output": [6, 6]},
        {"name": "flatten", "kind": "flatten"},
        {"name": "drop6", "kind": "dropout", "rate": 0.5},
        {"name": "fc6", "kind": "linear", "out_features": hidden},
        {"name": "relu6", "kind": "relu"},
        {"name": "drop7", "kind": "dropout", "rate": 0.5},
        {"name": "fc7", "kind": "linear", "out_features": hidden},
        {"name": "relu7", "kind": "relu"},
        {"name": "fc8", "kind": "linear", "out_features": num_classes},
    ]
    if labels is None:
        labels = [f"class_{i}" for i in range(num_classes)]
    return {
        "input": {"channels": 3, "height": input_hw[0], "width": input_hw[1]},
        "normalization": {"mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]},
        "labels": labels,
        "layers": layers,
    }


def init_weights(desc: dict, seed: int = 0, scale: float | None = None) -> dict[str, np.ndarray]:
    """Fixed-seed He-style random weights matching ``desc``."""
    rng = np.random.default_rng(seed)
    inp = desc["input"]
    shape: tuple[int, ...] = (inp["channels"], inp["height"], inp["width"])
    out: dict[str, np.ndarray] = {}
    for d in desc["layers"]:
        layer = LayerSpec.from_dict(d)
        if layer.kind == "conv2d":
            fan_in = shape[0] * layer.kernel[0] * layer.kernel[1]
            std = scale if scale is not None else math.sqrt(2.0 / fan_in)
            out[layer.weights] = (rng.standard_normal((layer.out_channels, shape[0], *layer.kernel)) * std).astype(np.float32)
            out[layer.bias] = (rng.standard_normal(layer.out_channels) * 0.01).astype(np.float32)
        elif layer.kind == "linear":
            fan_in = int(np.prod(shape))
            std = scale if scale is not None else math.sqrt(2.0 / fan_in)
            out[layer.weights] = (rng.standard_normal((layer.out_features, fan_in)) * std).astype(np.float32)
            out[layer.bias] = (rng.standard_normal(layer.out_features) * 0.01).astype(np.float32)
        shape = layer.output_shape(shape)
    return out
