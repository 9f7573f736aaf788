"""``emocam`` command-line interface."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from .pipeline import (
    ConfigError,
    RunConfig,
    cmd_analyze,
    cmd_overlay,
    cmd_perturb,
    cmd_predict,
    cmd_rsa,
    resolve_workers,
)

PATH_KEYS = {"model", "weights", "detections", "images", "out", "positions", "classes"}


def _csv_list(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON file with default option values")
    common.add_argument("--model", type=Path, help="architecture descriptor (JSON)")
    common.add_argument("--weights", type=Path, help="weights container")
    common.add_argument("--detections", type=Path, help="detections JSON-lines file")
    common.add_argument("--images", type=Path, help="directory of corpus images")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--methods", type=_csv_list, help="comma-separated: gradcam,ablationcam,occlusion")
    common.add_argument("--det-threshold", type=float, help="keep detections with score > F (default 0.005)")
    common.add_argument("--cact-threshold", type=float, help="keep boxes with importance > F (default 0.3)")
    common.add_argument("--grid-n", type=int, help="occlusion grid size (default 7)")
    common.add_argument("--workers", type=int, help="worker processes (fallback: $EMOCAM_WORKERS, then 1)")
    common.add_argument("--positions", type=Path, help="file of relative paste positions")
    common.add_argument("--patches", type=_csv_list, help="comma-separated RGBA patch image paths")
    common.add_argument("--classes", type=Path, help="newline-separated object class vocabulary")
    common.add_argument("--target-layer", help="conv layer for CAM (default: last conv)")
    common.add_argument("--rsa-percent", action="store_true", default=None,
                        help="correlate column-normalized percentages instead of counts")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="emocam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("predict", parents=[common], help="predicted label per image")
    sub.add_parser("analyze", parents=[common], help="CAM -> B* -> association matrices")
    sub.add_parser("rsa", parents=[common], help="Spearman RSA across CAM methods")
    sub.add_parser("perturb", parents=[common], help="patch-pasting label-switch experiment")
    ov = sub.add_parser("overlay", parents=[common], help="render heatmap overlay with B* boxes")
    ov.add_argument("image_id")
    return parser


def load_config_file(path: Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def make_config(args: argparse.Namespace) -> RunConfig:
    """Flags override config-file values, which override defaults."""
    file_vals = load_config_file(args.config)
    fields = RunConfig.__dataclass_fields__
    unknown = set(file_vals) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged: dict[str, Any] = {}
    for name in fields:
        if name == "workers":
            continue
        flag = getattr(args, name, None)
        value = flag if flag is not None else file_vals.get(name)
        if value is None:
            continue
        if name in PATH_KEYS:
            value = Path(value)
        elif name == "patches":
            value = [Path(p) for p in (_csv_list(value) if isinstance(value, str) else value)]
        elif name == "methods" and isinstance(value, str):
            value = _csv_list(value)
        merged[name] = value
    merged["workers"] = resolve_workers(args.workers, file_vals.get("workers"))
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("emocam")
    try:
        cfg = make_config(args)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        if args.command == "rsa":
            return cmd_rsa(cfg)
        if args.command == "perturb":
            return cmd_perturb(cfg)
        path = cmd_overlay(cfg, args.image_id)
        log.info("wrote %s", path)
        return 0
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except KeyError as exc:
        log.error("%s", exc.args[0] if exc.args else exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
