"""Run a torchvision detector over an image directory and write detections.jsonl.

The output matches the format ``emocam analyze --detections`` reads. The
bundled torchvision detectors use the COCO vocabulary rather than Open
Images; pass ``--classes-out`` to also write the vocabulary file.

Usage:
    python tools/detect_torchvision.py IMAGES_DIR OUT.jsonl [--weights DEFAULT] [--min-score 0.005]

Requires torch and torchvision; pretrained weights are downloaded by
torchvision on first use.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from emocam.pipeline import list_images


def main(argv=None) -> None:
    import torch
    from PIL import Image
    from torchvision.models.detection import FasterRCNN_ResNet50_FPN_V2_Weights, fasterrcnn_resnet50_fpn_v2

    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("images", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--min-score", type=float, default=0.005)
    ap.add_argument("--classes-out", type=Path)
    args = ap.parse_args(argv)

    weights = FasterRCNN_ResNet50_FPN_V2_Weights.DEFAULT
    names = [n for n in weights.meta["categories"]]
    model = fasterrcnn_resnet50_fpn_v2(weights=weights, box_score_thresh=args.min_score).eval()
    prep = weights.transforms()
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh, torch.no_grad():
        for image_id, path in list_images(args.images).items():
            img = Image.open(path).convert("RGB")
            res = model([prep(img)])[0]
            dets = [{"class": names[int(c)], "score": float(s), "box": [float(v) for v in b]}
                    for b, c, s in zip(res["boxes"], res["labels"], res["scores"])]
            fh.write(json.dumps({"image_id": image_id, "width": img.width, "height": img.height,
                                 "detections": dets}) + "\n")
    if args.classes_out:
        vocab = dict.fromkeys(n for n in names if n not in ("__background__", "N/A"))
        args.classes_out.write_text("".join(n + "\n" for n in vocab), encoding="utf-8")


if __name__ == "__main__":
    main()
