"""Corpus-level orchestration behind the command-line subcommands."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import analytics
from .attribution import (
    ActivationMap,
    CamMethod,
    compute_raw,
    normalize_map,
    read_map,
    write_map,
)
from .container import fnv1a64
from .detections import (
    DEFAULT_DET_THRESHOLD,
    ImageDetections,
    filter_detections,
    parse_detections,
    read_class_list,
)
from .engine import ModelSpec, forward, load_model
from .imaging import (
    decode_image,
    draw_box,
    encode_pgm,
    map_to_gray,
    render_heatmap_overlay,
    to_model_input,
    write_png,
)
from .importance import DEFAULT_CACT_THRESHOLD, DegenerateBoxError, bstar_line, select_important
from .perturbation import (
    default_grid,
    read_positions,
    run_experiment,
    summarize,
    summary_csv,
    write_outcomes,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp")
TOP_K = 25


class ConfigError(ValueError):
    """Invalid configuration or unusable inputs; raised before any image work."""


@dataclass
class RunConfig:
    model: Path | None = None
    weights: Path | None = None
    detections: Path | None = None
    images: Path | None = None
    out: Path = Path("emocam-out")
    methods: list[str] = field(default_factory=lambda: ["gradcam"])
    det_threshold: float = DEFAULT_DET_THRESHOLD
    cact_threshold: float = DEFAULT_CACT_THRESHOLD
    grid_n: int = 7
    workers: int = 1
    positions: Path | None = None
    patches: list[Path] = field(default_factory=list)
    classes: Path | None = None
    target_layer: str | None = None
    rsa_percent: bool = False

    def validate(self) -> None:
        for name in ("det_threshold", "cact_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.grid_n < 1:
            raise ConfigError("grid_n must be >= 1")
        for m in self.methods:
            try:
                CamMethod(m)
            except ValueError:
                raise ConfigError(f"unknown CAM method {m!r}") from None
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate CAM methods")


# --- shared helpers -----------------------------------------------------------------

def list_images(root: Path) -> dict[str, Path]:
    """Image files directly under ``root`` keyed by file stem."""
    if root is None or not Path(root).is_dir():
        raise ConfigError(f"image directory {root} does not exist")
    out: dict[str, Path] = {}
    for p in sorted(Path(root).iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in out:
                raise ConfigError(f"two images share the id {p.stem!r}")
            out[p.stem] = p
    return out


def open_model(cfg: RunConfig) -> tuple[ModelSpec, str]:
    """Load the model and its FNV-1a hash, or raise ConfigError."""
    if cfg.model is None or cfg.weights is None:
        raise ConfigError("--model and --weights are required")
    try:
        blob = Path(cfg.weights).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read weights {cfg.weights}: {exc}") from exc
    try:
        model = load_model(cfg.model, cfg.weights)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load model: {exc}") from exc
    return model, f"{fnv1a64(blob):016x}"


def _target_layer(cfg: RunConfig, model: ModelSpec) -> str:
    return cfg.target_layer or model.last_conv()


def _pool_map(fn: Callable, items: list, workers: int, init: Callable, init_args: tuple) -> list:
    """Map ``fn`` over ``items``; results come back in input order."""
    if workers <= 1 or len(items) <= 1:
        init(*init_args)
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=init, initargs=init_args) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


_CTX: dict[str, Any] = {}


def _init_ctx(cfg: RunConfig, extra: dict | None = None) -> None:
    model, mhash = open_model(cfg)
    _CTX.clear()
    _CTX.update(cfg=cfg, model=model, hash=mhash, target=_target_layer(cfg, model))
    if extra:
        _CTX.update(extra)


# --- predict ---------------------------------------------------------------------------

def _cache_dir(cfg: RunConfig, mhash: str) -> Path:
    return Path(cfg.out) / "cache" / mhash


def _predict_one(item: tuple[str, str]):
    image_id, path = item
    model: ModelSpec = _CTX["model"]
    try:
        img = decode_image(path)
    except ValueError as exc:
        return image_id, None, str(exc)
    pred = forward(model, to_model_input(img, model))
    rec = {
        "image_id": image_id,
        "label": model.labels[pred.predicted_index],
        "probabilities": [float(p) for p in pred.probabilities],
    }
    return image_id, rec, None


def cmd_predict(cfg: RunConfig) -> int:
    cfg.validate()
    open_model(cfg)
    images = list_images(cfg.images)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if not images:
        log.warning("no images found under %s", cfg.images)
        (out / "predictions.jsonl").write_text("", encoding="utf-8")
        return 0
    items = [(i, str(p)) for i, p in images.items()]
    results = _pool_map(_predict_one, items, cfg.workers, _init_ctx, (cfg,))
    failed = 0
    with open(out / "predictions.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for image_id, rec, err in sorted(results, key=lambda r: r[0]):
            if err is not None:
                failed += 1
                log.error("skipping %s: %s", image_id, err)
                continue
            fh.write(json.dumps(rec) + "\n")
    if failed:
        log.warning("%d of %d images failed to decode", failed, len(items))
    return 1 if failed == len(items) else 0


# --- analyze ------------------------------------------------------------------------------

def _prediction_cached(img, image_id: str) -> int:
    """Predicted class index, cached per model hash."""
    cfg: RunConfig = _CTX["cfg"]
    path = _cache_dir(cfg, _CTX["hash"]) / "predictions" / f"{image_id}.json"
    if path.exists():
        return int(json.loads(path.read_text(encoding="utf-8"))["predicted_index"])
    model: ModelSpec = _CTX["model"]
    idx = forward(model, to_model_input(img, model)).predicted_index
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"predicted_index": idx}), encoding="utf-8")
    return idx


def _map_cached(img, image_id: str, method: str, class_index: int) -> ActivationMap:
    cfg: RunConfig = _CTX["cfg"]
    model: ModelSpec = _CTX["model"]
    suffix = f"-g{cfg.grid_n}" if method == CamMethod.OCCLUSION.value else ""
    path = _cache_dir(cfg, _CTX["hash"]) / _CTX["target"] / f"{method}{suffix}" / f"{image_id}.map"
    if path.exists():
        m = read_map(path)
        if (m.width, m.height) == (img.width, img.height):
            return m
    x = to_model_input(img, model)
    raw = compute_raw(method, model, x, class_index, _CTX["target"], grid_n=cfg.grid_n)
    m = normalize_map(raw, img.width, img.height)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_map(path, m)
    # 8-bit preview for viewing only; analysis always reads the float map
    path.with_suffix(".pgm").write_bytes(encode_pgm(map_to_gray(m.values)))
    return m


def _analyze_one(item: tuple[str, str]):
    image_id, path = item
    cfg: RunConfig = _CTX["cfg"]
    model: ModelSpec = _CTX["model"]
    dets: dict[str, ImageDetections] = _CTX["detections"]
    result: dict[str, Any] = {"image_id": image_id, "methods": {}, "error": None,
                              "missing_detections": False, "skipped_boxes": 0}
    try:
        img = decode_image(path)
    except ValueError as exc:
        result["error"] = str(exc)
        return result
    idx = _prediction_cached(img, image_id)
    label = model.labels[idx]
    rec = dets.get(image_id)
    if rec is None:
        result["missing_detections"] = True
        candidates = []
    else:
        candidates = filter_detections(rec.detections, cfg.det_threshold)
    for method in cfg.methods:
        try:
            amap = _map_cached(img, image_id, method, idx)
        except ValueError as exc:
            result["methods"][method] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        bstar = []
        for d in candidates:
            try:
                bstar.extend(select_important([d], amap.values, cfg.cact_threshold))
            except DegenerateBoxError:
                result["skipped_boxes"] += 1
        result["methods"][method] = {
            "label": label,
            "line": bstar_line(image_id, label, method, bstar),
            "classes": sorted({s.detection.class_name for s in bstar}),
        }
    return result


def class_vocabulary(cfg: RunConfig, dets: dict[str, ImageDetections]) -> list[str]:
    if cfg.classes is not None:
        return read_class_list(cfg.classes)
    return sorted({d.class_name for rec in dets.values() for d in rec.detections})


def cmd_analyze(cfg: RunConfig) -> int:
    cfg.validate()
    if not cfg.methods:
        raise ConfigError("at least one CAM method is required")
    model, _ = open_model(cfg)
    if cfg.detections is None:
        raise ConfigError("--detections is required")
    try:
        dets = parse_detections(cfg.detections)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read detections: {exc}") from exc
    classes = class_vocabulary(cfg, dets)
    images = list_images(cfg.images)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    items = [(i, str(p)) for i, p in images.items()]
    results = _pool_map(_analyze_one, items, cfg.workers, _init_ctx, (cfg, {"detections": dets}))
    results.sort(key=lambda r: r["image_id"])

    report: dict[str, Any] = {
        "images": len(items),
        "decode_failures": sorted(r["image_id"] for r in results if r["error"]),
        "missing_detections": sorted(r["image_id"] for r in results if r["missing_detections"]),
        "skipped_boxes": int(sum(r["skipped_boxes"] for r in results)),
        "methods": {},
    }
    ok = True
    for method in cfg.methods:
        mdir = out / method
        mdir.mkdir(parents=True, exist_ok=True)
        matrix = analytics.AssociationMatrix.zeros(classes, model.labels)
        failures = []
        with open(mdir / "bstar.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for r in results:
                entry = r["methods"].get(method)
                if entry is None or "error" in entry:
                    if entry is not None:
                        failures.append({"image_id": r["image_id"], "error": entry["error"]})
                    continue
                fh.write(entry["line"] + "\n")
                unknown = [c for c in entry["classes"] if c not in classes]
                if unknown:
                    raise ConfigError(f"classes {unknown} missing from the class vocabulary")
                matrix.add(entry["label"], entry["classes"])
        norm = analytics.normalize(matrix)
        top = analytics.top_k_classes(norm, TOP_K) if classes else []
        analytics.export(matrix, mdir / "association_counts.csv")
        analytics.export(norm, mdir / "association_percent.csv")
        analytics.export(analytics.restrict(norm, top), mdir / f"association_percent_top{TOP_K}.csv")
        analytics.export(analytics.restrict(norm, top), mdir / f"association_percent_top{TOP_K}.png", "png")
        (mdir / "association.json").write_text(matrix.to_json() + "\n", encoding="utf-8")
        report["methods"][method] = {"images_used": int(matrix.images_per_emotion.sum()),
                                     "failures": failures}
        if failures:
            ok = False
    (out / "analyze_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    if report["decode_failures"]:
        log.warning("%d images failed to decode", len(report["decode_failures"]))
    if report["missing_detections"]:
        log.warning("%d images have no detections record", len(report["missing_detections"]))
    return 0 if ok and len(report["decode_failures"]) < max(1, len(items)) else 1


# --- rsa -------------------------------------------------------------------------------------

def cmd_rsa(cfg: RunConfig) -> int:
    cfg.validate()
    if len(cfg.methods) < 2:
        raise ConfigError("RSA needs at least two methods")
    out = Path(cfg.out)
    matrices = {}
    for method in cfg.methods:
        path = out / method / "association.json"
        if not path.exists():
            raise ConfigError(f"no association matrix for method {method!r} at {path}; run analyze first")
        matrices[method] = analytics.AssociationMatrix.from_json(path.read_text(encoding="utf-8"))
    r = analytics.rsa(matrices, use_percentages=cfg.rsa_percent)
    analytics.export(r, out / "rsa_rho.csv", which="rho")
    analytics.export(r, out / "rsa_p.csv", which="p")
    analytics.export(r, out / "rsa_rho.png", "png", which="rho")
    return 0


# --- perturb ---------------------------------------------------------------------------------

def cmd_perturb(cfg: RunConfig) -> int:
    cfg.validate()
    model, _ = open_model(cfg)
    if not cfg.patches:
        raise ConfigError("at least one patch asset is required (--patches)")
    patches = {}
    for p in cfg.patches:
        p = Path(p)
        try:
            patches[p.stem] = decode_image(p)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read patch {p}: {exc}") from exc
    grid = read_positions(cfg.positions) if cfg.positions else default_grid()
    images = list_images(cfg.images)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if not images:
        log.warning("no images found under %s", cfg.images)
        write_outcomes(out / "perturb_outcomes.jsonl", [])
        (out / "perturb_summary.csv").write_text(summary_csv([], grid), encoding="utf-8")
        return 0
    res = run_experiment(model, {i: p for i, p in images.items()}, patches, grid, workers=cfg.workers)
    write_outcomes(out / "perturb_outcomes.jsonl", res.outcomes)
    (out / "perturb_summary.csv").write_text(summary_csv(summarize(res.outcomes), grid), encoding="utf-8")
    for image_id, err in sorted(res.failures.items()):
        log.error("skipped %s: %s", image_id, err)
    return 1 if len(res.failures) == len(images) else 0


# --- overlay ---------------------------------------------------------------------------------

def cmd_overlay(cfg: RunConfig, image_id: str) -> Path:
    """Render the heatmap overlay of ``image_id`` with its B* boxes outlined."""
    cfg.validate()
    images = list_images(cfg.images)
    if image_id not in images:
        raise KeyError(f"unknown image id {image_id!r}")
    dets = parse_detections(cfg.detections) if cfg.detections else {}
    _init_ctx(cfg, {"detections": dets})
    method = cfg.methods[0]
    img = decode_image(images[image_id])
    idx = _prediction_cached(img, image_id)
    amap = _map_cached(img, image_id, method, idx)
    rendered = render_heatmap_overlay(img, amap.values)
    rec = dets.get(image_id)
    if rec is not None:
        for d in filter_detections(rec.detections, cfg.det_threshold):
            try:
                if select_important([d], amap.values, cfg.cact_threshold):
                    rendered = draw_box(rendered, tuple(d.box.as_list()))
            except DegenerateBoxError:
                continue
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"overlay_{image_id}_{method}.png"
    write_png(path, rendered)
    return path


def resolve_workers(flag: int | None, config_value: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("EMOCAM_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"EMOCAM_WORKERS must be an integer, got {env!r}") from None
    return config_value if config_value is not None else 1


__all__ = [
    "ConfigError", "RunConfig", "cmd_analyze", "cmd_overlay", "cmd_perturb", "cmd_predict",
    "cmd_rsa", "list_images", "open_model", "resolve_workers",
]
