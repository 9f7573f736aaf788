"""Convert an AlexNet-layout PyTorch checkpoint into an emocam model.

Writes an architecture descriptor (JSON) and a weights container. Conv and
linear tensors are taken in checkpoint order and mapped onto conv1..conv5
and fc6..fc8; output widths come from the tensor shapes, while kernel,
stride and padding follow the torchvision AlexNet layout.

Local response normalization layers (present in some AlexNet variants) have
no counterpart in the engine; such checkpoints convert, but predictions will
differ from the source framework.

Usage:
    python tools/export_emonet.py CHECKPOINT OUT_PREFIX [--labels FILE] [--input 227]

Requires torch (only for reading the checkpoint).
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from emocam.engine import alexnet_descriptor, model_from_descriptor, save_model


def load_state_dict(path: str | Path) -> dict[str, np.ndarray]:
    import torch

    obj = torch.load(path, map_location="cpu", weights_only=False)
    if hasattr(obj, "state_dict"):
        obj = obj.state_dict()
    if "state_dict" in obj and isinstance(obj["state_dict"], dict):
        obj = obj["state_dict"]
    return {k: v.detach().cpu().numpy() for k, v in obj.items() if hasattr(v, "detach")}


def convert(state: dict[str, np.ndarray], labels: list[str] | None = None,
            input_hw: tuple[int, int] = (227, 227)):
    """Map an ordered state dict onto the AlexNet descriptor."""
    convs = [k for k, v in state.items() if k.endswith("weight") and v.ndim == 4]
    fcs = [k for k, v in state.items() if k.endswith("weight") and v.ndim == 2]
    if len(convs) != 5 or len(fcs) != 3:
        raise ValueError(f"expected 5 conv and 3 linear weights, found {len(convs)} and {len(fcs)}")
    n_out = state[fcs[-1]].shape[0]
    hidden = state[fcs[0]].shape[0]
    desc = alexnet_descriptor(num_classes=n_out, input_hw=input_hw, labels=labels, hidden=hidden)
    by_name = {d["name"]: d for d in desc["layers"]}
    weights = {}
    for ours, theirs in zip(["conv1", "conv2", "conv3", "conv4", "conv5"], convs):
        by_name[ours]["out_channels"] = int(state[theirs].shape[0])
        weights[f"{ours}.weight"] = state[theirs].astype(np.float32)
        weights[f"{ours}.bias"] = state[theirs[: -len("weight")] + "bias"].astype(np.float32)
    for ours, theirs in zip(["fc6", "fc7", "fc8"], fcs):
        weights[f"{ours}.weight"] = state[theirs].astype(np.float32)
        weights[f"{ours}.bias"] = state[theirs[: -len("weight")] + "bias"].astype(np.float32)
    if labels is not None and len(labels) != n_out:
        raise ValueError(f"{len(labels)} labels for a {n_out}-way output")
    return model_from_descriptor(desc, weights)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("checkpoint")
    ap.add_argument("out_prefix", help="writes OUT_PREFIX.json and OUT_PREFIX.weights")
    ap.add_argument("--labels", type=Path, help="one label per line, in output order")
    ap.add_argument("--input", type=int, default=227, help="square input size")
    args = ap.parse_args(argv)
    labels = None
    if args.labels:
        labels = [s.strip() for s in args.labels.read_text(encoding="utf-8").splitlines() if s.strip()]
    model = convert(load_state_dict(args.checkpoint), labels, (args.input, args.input))
    save_model(model, f"{args.out_prefix}.json", f"{args.out_prefix}.weights")
    print(json.dumps({"labels": len(model.labels), "layers": len(model.layers)}))


if __name__ == "__main__":
    main()
