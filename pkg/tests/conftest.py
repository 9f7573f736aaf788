"""Shared fixtures and independent reference implementations (oracles).

The oracles here deliberately avoid the package's own kernels: convolution is
a six-deep loop, the reference forward pass is torch (when available) or a
float64 re-implementation, and the finite-difference tail is float64.
"""

from __future__ import annotations

import numpy as np
import pytest

from emocam.engine import ModelSpec, alexnet_descriptor, init_weights, model_from_descriptor


def build_model(layers: list[dict], input_shape: tuple[int, int, int], n_labels: int,
                weights: dict[str, np.ndarray] | None = None, seed: int = 0) -> ModelSpec:
    desc = {
        "input": {"channels": input_shape[0], "height": input_shape[1], "width": input_shape[2]},
        "normalization": {"mean": [0.0] * input_shape[0], "std": [1.0] * input_shape[0]},
        "labels": [f"L{i}" for i in range(n_labels)],
        "layers": layers,
    }
    w = init_weights(desc, seed)
    if weights:
        w.update({k: np.asarray(v, dtype=np.float32) for k, v in weights.items()})
    return model_from_descriptor(desc, w)


def identity_conv(channels: int) -> dict[str, np.ndarray]:
    w = np.zeros((channels, channels, 1, 1), dtype=np.float32)
    for c in range(channels):
        w[c, c, 0, 0] = 1.0
    return {"target.weight": w, "target.bias": np.zeros(channels, dtype=np.float32)}


def conv_six_loop(x, w, b, stride=(1, 1), padding=(0, 0)):
    """Direct convolution, float64, explicit loops."""
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = float(b[o])
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            yy = i * sh + u - ph
                            xx = j * sw + v - pw
                            if 0 <= yy < h and 0 <= xx < wd:
                                acc += float(w[o, c, u, v]) * float(x[c, yy, xx])
                out[o, i, j] = acc
    return out


def reference_layer(layer, x, weights):
    """float64 re-implementation of one layer, loops for pooling."""
    x = np.asarray(x, dtype=np.float64)
    k = layer.kind
    if k == "conv2d":
        wt = weights[layer.weights].astype(np.float64)
        b = weights[layer.bias].astype(np.float64)
        ph, pw = layer.padding
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
        o, _, kh, kw = wt.shape
        sh, sw = layer.stride
        oh = (xp.shape[1] - kh) // sh + 1
        ow = (xp.shape[2] - kw) // sw + 1
        out = np.empty((o, oh, ow))
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * sh : i * sh + kh, j * sw : j * sw + kw]
                out[:, i, j] = np.einsum("ocuv,cuv->o", wt, patch) + b
        return out
    if k == "relu":
        return np.maximum(x, 0)
    if k == "maxpool":
        kh, kw = layer.kernel
        sh, sw = layer.stride
        c, h, w = x.shape
        oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
        out = np.empty((c, oh, ow))
        for i in range(oh):
            for j in range(ow):
                out[:, i, j] = x[:, i * sh : i * sh + kh, j * sw : j * sw + kw].max(axis=(1, 2))
        return out
    if k == "adaptive-avgpool":
        c, h, w = x.shape
        oh, ow = layer.output_size
        out = np.empty((c, oh, ow))
        for i in range(oh):
            r0, r1 = (i * h) // oh, -((-(i + 1) * h) // oh)
            for j in range(ow):
                c0, c1 = (j * w) // ow, -((-(j + 1) * w) // ow)
                out[:, i, j] = x[:, r0:r1, c0:c1].mean(axis=(1, 2))
        return out
    if k == "flatten":
        return x.reshape(-1)
    if k == "linear":
        return weights[layer.weights].astype(np.float64) @ x.reshape(-1) + weights[layer.bias].astype(np.float64)
    if k == "dropout":
        return x
    raise AssertionError(k)


def reference_forward(model: ModelSpec, x, start: int = 0):
    for layer in model.layers[start:]:
        x = reference_layer(layer, x, model.weights)
    return x


def torch_forward(model: ModelSpec, x):
    torch = pytest.importorskip("torch")
    F = torch.nn.functional
    t = torch.from_numpy(np.asarray(x, dtype=np.float64))[None]
    for layer in model.layers:
        k = layer.kind
        if k == "conv2d":
            t = F.conv2d(t, torch.from_numpy(model.weights[layer.weights].astype(np.float64)),
                         torch.from_numpy(model.weights[layer.bias].astype(np.float64)),
                         stride=layer.stride, padding=layer.padding)
        elif k == "relu":
            t = F.relu(t)
        elif k == "maxpool":
            t = F.max_pool2d(t, layer.kernel, layer.stride)
        elif k == "adaptive-avgpool":
            t = F.adaptive_avg_pool2d(t, layer.output_size)
        elif k == "flatten":
            t = t.reshape(1, -1)
        elif k == "linear":
            t = F.linear(t.reshape(1, -1), torch.from_numpy(model.weights[layer.weights].astype(np.float64)),
                         torch.from_numpy(model.weights[layer.bias].astype(np.float64)))
    return t[0].numpy()


def small_alexnet(seed: int = 0, num_classes: int = 26, hidden: int = 64) -> ModelSpec:
    desc = alexnet_descriptor(num_classes=num_classes, hidden=hidden)
    return model_from_descriptor(desc, init_weights(desc, seed))


@pytest.fixture(scope="session")
def alexnet_model() -> ModelSpec:
    return small_alexnet(seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- finite-difference tail cases --------------------------------------------------

TAIL_TEMPLATES = [
    lambda r: [{"kind": "relu"}, {"kind": "maxpool", "kernel": 2, "stride": 2},
               {"kind": "flatten"}, {"kind": "linear", "out_features": int(r.integers(2, 6))}],
    lambda r: [{"kind": "relu"}, {"kind": "adaptive-avgpool", "output": [int(r.integers(1, 4)), int(r.integers(1, 4))]},
               {"kind": "flatten"}, {"kind": "linear", "out_features": int(r.integers(2, 6))}],
    lambda r: [{"kind": "maxpool", "kernel": 2, "stride": 1}, {"kind": "relu"}, {"kind": "flatten"},
               {"kind": "dropout", "rate": 0.5}, {"kind": "linear", "out_features": 6},
               {"kind": "relu"}, {"kind": "linear", "out_features": int(r.integers(2, 6))}],
    lambda r: [{"kind": "adaptive-avgpool", "output": [2, 3]}, {"kind": "flatten"},
               {"kind": "linear", "out_features": 5}, {"kind": "relu"},
               {"kind": "linear", "out_features": int(r.integers(2, 6))}],
    lambda r: [{"kind": "relu"}, {"kind": "maxpool", "kernel": 3, "stride": 2},
               {"kind": "adaptive-avgpool", "output": [2, 2]}, {"kind": "flatten"},
               {"kind": "linear", "out_features": int(r.integers(2, 6))}],
]

FD_STEP = 1e-3


def _kink_margin_ok(model, acts, step):
    """True when no ReLU input or max-pool winner can flip within one step."""
    x = np.asarray(acts, dtype=np.float64)
    for layer in model.layers[1:]:
        if layer.kind == "relu" and np.min(np.abs(x)) < 50 * step:
            return False
        if layer.kind == "maxpool":
            kh, kw = layer.kernel
            sh, sw = layer.stride
            c, h, w = x.shape
            for i in range(0, h - kh + 1, sh):
                for j in range(0, w - kw + 1, sw):
                    win = np.sort(x[:, i:i + kh, j:j + kw].reshape(c, -1), axis=1)
                    if np.min(win[:, -1] - win[:, -2]) < 10 * step:
                        return False
        x = reference_layer(layer, x, model.weights)
    return True


def random_tail_case(seed: int):
    """Model = identity 1x1 conv target + random tail; input equals the activations.

    Activations are well separated distinct values so the finite-difference
    step never crosses a ReLU or max-pool kink (checked, redrawn otherwise).
    """
    r = np.random.default_rng(seed)
    template = TAIL_TEMPLATES[seed % len(TAIL_TEMPLATES)]
    for _ in range(100):
        c, h, w = int(r.integers(1, 5)), int(r.integers(4, 9)), int(r.integers(4, 9))
        tail = template(r)
        layers = [{"name": "target", "kind": "conv2d", "out_channels": c, "kernel": 1}]
        layers += [dict(d, name=f"t{i}") for i, d in enumerate(tail)]
        n_out = tail[-1]["out_features"]
        model = build_model(layers, (c, h, w), n_out, weights=identity_conv(c), seed=seed)
        n = c * h * w
        mags = 0.1 + 0.05 * r.permutation(n)
        acts = (mags * r.choice([-1.0, 1.0], size=n)).reshape(c, h, w).astype(np.float32)
        if _kink_margin_ok(model, acts, FD_STEP):
            return model, acts, int(r.integers(n_out))
    raise RuntimeError("could not draw a kink-free case")


def finite_difference_grad(model, acts, class_index, step=FD_STEP):
    """Central differences of the float64 reference tail."""
    base = np.asarray(acts, dtype=np.float64)
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        up, dn = base.copy(), base.copy()
        up[idx] += step
        dn[idx] -= step
        fu = reference_forward(model, up, start=1)[class_index]
        fd = reference_forward(model, dn, start=1)[class_index]
        grad[idx] = (fu - fd) / (2 * step)
    return grad


def fd_relative_errors(analytic, numeric):
    mask = np.abs(numeric) > 1e-6
    return np.abs(analytic[mask] - numeric[mask]) / np.abs(numeric[mask]), mask


def bilinear_map_oracle(src, out_w, out_h):
    """Per-pixel half-pixel-center bilinear interpolation, float64."""
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        ty = sy - y0
        for ox in range(out_w):
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            tx = sx - x0
            out[oy, ox] = ((1 - ty) * ((1 - tx) * src[y0, x0] + tx * src[y0, x1])
                           + ty * ((1 - tx) * src[y1, x0] + tx * src[y1, x1]))
    return out


# --- six-image association corpus -----------------------------------------------------

SIX_CLASSES = ["Ball", "Human face", "Tree"]
SIX_EMOTIONS = ["Joy", "Sadness", "Fear", "Anger"]
SIX_CORPUS = [
    ("Joy", ["Human face", "Human face", "Ball"]),
    ("Joy", ["Human face"]),
    ("Joy", ["Ball"]),
    ("Joy", ["Tree", "Human face"]),
    ("Sadness", ["Tree"]),
    ("Fear", ["Ball", "Tree", "Tree"]),
]
# counted by hand from the list above
SIX_COUNTS = [
    [2, 0, 1, 0],
    [3, 0, 0, 0],
    [1, 1, 1, 0],
]
SIX_N = [4, 1, 1, 0]
SIX_PERCENT = [
    [50.0, 0.0, 100.0, 0.0],
    [75.0, 0.0, 0.0, 0.0],
    [25.0, 100.0, 100.0, 0.0],
]


def rank_pearson_oracle(x, y):
    """Spearman via scipy average ranks, numpy Pearson and the t survival function."""
    from scipy import stats
    rx = stats.rankdata(x, method="average")
    ry = stats.rankdata(y, method="average")
    rho = float(np.corrcoef(rx, ry)[0, 1])
    n = len(x)
    if abs(rho) >= 1.0:
        return rho, 0.0
    t = rho * np.sqrt((n - 2) / (1 - rho * rho))
    return rho, float(2 * stats.t.cdf(-abs(t), n - 2))


# --- acceptance reporting ---------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
