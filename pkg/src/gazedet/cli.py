"""Command-line interface: train, eval, infer, visualize, gen-data.

Exit codes: 0 on success, 2 for configuration/usage errors (unknown
fields, invalid values), 1 for runtime failures (missing files,
diverged training).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import random
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from PIL import Image, ImageDraw

from .core import instance_heatmap
from .data import SceneImage, generate_corpus, load_dataset
from .matching import CostWeights, total_loss
from .metrics import MetricReport, evaluate_split
from .model import (
    WATCH_INSIDE,
    GazeTargetDetector,
    ModelConfig,
    load_checkpoint,
    prepare_images,
    save_checkpoint,
)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class RunConfig:
    """Everything one run needs: architecture, loss weights, optimizer
    settings, dataset locations, and reproducibility switches."""

    model: ModelConfig = field(default_factory=ModelConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    image_size: int = 96
    batch_size: int = 8
    epochs: int = 150
    lr_main: float = 1e-4
    lr_backbone: float = 1e-5
    weight_decay: float = 1e-4
    lr_decay_epoch: int = 80
    lr_decay_factor: float = 0.1
    grad_clip: float = 0.1
    heatmap_sigma: float = 3.0
    aux_loss: bool = True
    seed: int = 0
    deterministic: bool = False
    train_manifest: str = ""
    eval_manifest: str = ""
    out_dir: str = "runs/default"
    checkpoint_every: int = 50

    def __post_init__(self):
        for name in ("image_size", "batch_size", "epochs", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_main", "lr_backbone", "weight_decay", "lr_decay_factor",
                     "grad_clip", "heatmap_sigma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0.0):
                raise ValueError(f"{name} must be positive, got {v}")
        if not 1 <= self.lr_decay_epoch <= self.epochs:
            raise ValueError(
                f"lr_decay_epoch must lie in [1, epochs], got {self.lr_decay_epoch} "
                f"for {self.epochs} epochs"
            )
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")


def desk_profile() -> RunConfig:
    """Small CPU-friendly configuration for synthetic scenes.

    The tiny backbone trains from scratch, so it gets the full learning
    rate; the reduced backbone rate only makes sense for pretrained trunks.
    Dropout is off: at a few thousand training scenes it only jitters the
    per-step assignments without any measurable regularization benefit.
    """
    return RunConfig(
        model=ModelConfig(
            d_model=64, num_encoder_layers=2, num_decoder_layers=2,
            num_heads=8, num_queries=8, backbone="tiny", ffn_dim=256,
            dropout=0.0,
        ),
        image_size=96,
        batch_size=8,
        lr_main=3e-4,
        lr_backbone=3e-4,
    )


def paper_profile() -> RunConfig:
    """Full-scale configuration (ImageNet-sized inputs, deep transformer)."""
    return RunConfig(
        model=ModelConfig(backbone="resnet50"),
        image_size=224,
        batch_size=16,
    )


_PROFILES: dict[str, Callable[[], RunConfig]] = {"desk": desk_profile, "paper": paper_profile}


def _coerce(raw: str, typ) -> object:
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """Parse a flat 'key value' (or 'key = value') config document."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" in stripped:
            key, _, raw = stripped.partition("=")
        else:
            parts = stripped.split(None, 1)
            if len(parts) != 2:
                raise ValueError(f"config line {lineno}: expected 'key value', got {line!r}")
            key, raw = parts
        key, raw = key.strip(), raw.strip()
        if not key or not raw:
            raise ValueError(f"config line {lineno}: expected 'key value', got {line!r}")
        out[key] = raw
    return out


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Return a new RunConfig with flat key overrides applied.

    Keys resolve against RunConfig itself, then the nested ModelConfig and
    CostWeights; unknown keys are rejected by name.
    """
    run_kwargs = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in ("model", "weights")}
    model_kwargs = dataclasses.asdict(cfg.model)
    weight_kwargs = dataclasses.asdict(cfg.weights)
    run_fields = {f.name: f.type for f in fields(RunConfig)}
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    weight_fields = {f.name: f.type for f in fields(CostWeights)}

    for key, raw in overrides.items():
        if key in ("model", "weights"):
            raise ValueError(f"config field '{key}' cannot be set directly")
        if key in run_fields:
            run_kwargs[key] = _coerce(raw, type(run_kwargs[key]))
        elif key in model_fields:
            model_kwargs[key] = _coerce(raw, type(model_kwargs[key]))
        elif key in weight_fields:
            weight_kwargs[key] = _coerce(raw, type(weight_kwargs[key]))
        else:
            raise ValueError(f"unknown config field '{key}'")

    return RunConfig(
        model=ModelConfig(**model_kwargs),
        weights=CostWeights(**weight_kwargs),
        **run_kwargs,
    )


def load_run_config(profile: str = "desk", config_path: Optional[str] = None,
                    extra: Optional[dict[str, str]] = None) -> RunConfig:
    if profile not in _PROFILES:
        raise ValueError(f"unknown profile '{profile}' (expected one of: {', '.join(_PROFILES)})")
    cfg = _PROFILES[profile]()
    overrides: dict[str, str] = {}
    if config_path:
        overrides.update(parse_config_text(Path(config_path).read_text(encoding="utf-8")))
    if extra:
        overrides.update(extra)
    return apply_overrides(cfg, overrides) if overrides else cfg


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seed torch / numpy / random; single-threaded torch when deterministic."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_log_path: Path
    final_loss: float
    steps: int


def _build_optimizer(model: GazeTargetDetector, cfg: RunConfig) -> torch.optim.AdamW:
    backbone_params = list(model.features.backbone.parameters())
    backbone_ids = {id(p) for p in backbone_params}
    main_params = [p for p in model.parameters() if id(p) not in backbone_ids]
    return torch.optim.AdamW(
        [
            {"params": backbone_params, "lr": cfg.lr_backbone},
            {"params": main_params, "lr": cfg.lr_main},
        ],
        weight_decay=cfg.weight_decay,
    )


def cmd_train(cfg: RunConfig) -> TrainResult:
    """Train a model per the run config; writes checkpoints and a loss log."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed, cfg.deterministic)

    if not cfg.train_manifest:
        raise ValueError("train_manifest is required for training")
    dataset = list(load_dataset(cfg.train_manifest))
    if not dataset:
        raise RuntimeError(f"training dataset is empty: {cfg.train_manifest}")
    mc = cfg.model
    if any(len(rec.instances) > mc.num_queries for _, rec in dataset):
        raise ValueError(
            f"dataset contains images with more than num_queries={mc.num_queries} people"
        )
    for _, rec in dataset:
        for inst in rec.instances:
            instance_heatmap(inst, mc.heatmap_h, mc.heatmap_w, cfg.heatmap_sigma)

    model = GazeTargetDetector(mc)
    model.train()
    optimizer = _build_optimizer(model, cfg)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=[cfg.lr_decay_epoch], gamma=cfg.lr_decay_factor
    )
    shuffle_rng = np.random.default_rng(cfg.seed)

    loss_log_path = out_dir / "loss_log.txt"
    step = 0
    final_loss = float("nan")
    with open(loss_log_path, "w", encoding="utf-8") as log:
        log.write("# step epoch total box is_head watch heatmap lr\n")
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(len(dataset))
            for start in range(0, len(dataset), cfg.batch_size):
                batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
                images = prepare_images([scene for scene, _ in batch], cfg.image_size)
                gts_batch = [rec.instances for _, rec in batch]
                result = model(images)
                layers = result.layers if cfg.aux_loss else [result.final]
                loss, comps = total_loss(gts_batch, layers, cfg.weights, cfg.heatmap_sigma)
                if not torch.isfinite(loss.detach()):
                    diag = {
                        "step": step,
                        "epoch": epoch,
                        "components": {k: float(v.detach()) for k, v in comps.items()},
                    }
                    (out_dir / "divergence.json").write_text(json.dumps(diag, indent=1))
                    raise TrainingDiverged(f"non-finite loss at step {step} (see divergence.json)")
                optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                step += 1
                final_loss = float(loss.detach())
                c = {k: float(v.detach()) for k, v in comps.items()}
                log.write(
                    f"{step} {epoch} {final_loss!r} "
                    f"{c['box']!r} {c['is_head']!r} {c['watch']!r} {c['heatmap']!r} "
                    f"{optimizer.param_groups[1]['lr']!r}\n"
                )
            scheduler.step()
            if (epoch + 1) % cfg.checkpoint_every == 0 and (epoch + 1) < cfg.epochs:
                save_checkpoint(out_dir / f"checkpoint_{epoch + 1:05d}.ckpt", model,
                                meta=_train_meta(cfg, epoch + 1, step))

    checkpoint_path = out_dir / "checkpoint_final.ckpt"
    save_checkpoint(checkpoint_path, model, meta=_train_meta(cfg, cfg.epochs, step))
    return TrainResult(checkpoint_path, loss_log_path, final_loss, step)


def _train_meta(cfg: RunConfig, epoch: int, step: int) -> dict:
    return {
        "epoch": epoch,
        "step": step,
        "seed": cfg.seed,
        "image_size": cfg.image_size,
        "heatmap_sigma": cfg.heatmap_sigma,
    }


def _render_table(report: MetricReport) -> str:
    columns = [
        ("AUC", report.auc, "{:.4f}"),
        ("Avg.Dist.", report.avg_dist, "{:.4f}"),
        ("Min.Dist.", report.min_dist, "{:.4f}"),
        ("Ang.", report.angle_deg, "{:.2f}"),
        ("AP", report.watch_ap, "{:.4f}"),
        ("mAP", report.hgt_map, "{:.4f}"),
    ]
    names = [c[0] for c in columns]
    vals = [c[2].format(c[1]) for c in columns]
    widths = [max(len(n), len(v)) for n, v in zip(names, vals)]
    header = "  ".join(n.ljust(w) for n, w in zip(names, widths))
    row = "  ".join(v.ljust(w) for v, w in zip(vals, widths))
    return header + "\n" + row + "\n"


def cmd_eval(
    checkpoint: str,
    manifest: str,
    out_dir: str = "runs/eval",
    decoder_layer: Optional[int] = None,
    predictor: Optional[Callable] = None,
    sigma: float = 3.0,
) -> tuple[MetricReport, Path]:
    """Evaluate a checkpoint over a manifest split; writes report + table.

    `decoder_layer` (1-based) evaluates an intermediate decoder layer's
    predictions instead of the final ones.  A `predictor` callable
    (SceneImage -> PredictionSet) replaces the model entirely — useful for
    oracle/baseline probes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = None
    meta: dict = {}
    if predictor is None:
        model, meta = load_checkpoint(checkpoint)
        model.eval()
        n_layers = model.config.num_decoder_layers
        if decoder_layer is not None and not 1 <= decoder_layer <= n_layers:
            raise ValueError(
                f"decoder_layer must lie in [1, {n_layers}], got {decoder_layer}"
            )
    image_size = int(meta.get("image_size", 96))
    records = []
    with torch.no_grad():
        for scene, rec in load_dataset(manifest):
            if predictor is not None:
                preds = predictor(scene)
            else:
                result = model(prepare_images([scene], image_size))
                layer = result.layers[(decoder_layer or len(result.layers)) - 1]
                preds = layer[0]
            records.append((rec.instances, preds))
    report = evaluate_split(records, sigma=sigma)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "table.txt").write_text(_render_table(report), encoding="utf-8")
    return report, out / "report.txt"


def _load_scene(image_path: str) -> SceneImage:
    with Image.open(image_path) as im:
        pixels = np.asarray(im.convert("RGB"))
    return SceneImage(pixels, pixels.shape[1], pixels.shape[0])


def cmd_infer(
    checkpoint: str,
    image_path: str,
    out_dir: str = "runs/infer",
    threshold: float = 0.5,
) -> tuple[list[dict], Path, Path]:
    """Run one image through a checkpoint and emit detections.

    Returns (detections, overlay_path, json_path); a detection is every
    prediction slot whose is-head probability exceeds the threshold.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, meta = load_checkpoint(checkpoint)
    model.eval()
    scene = _load_scene(image_path)
    with torch.no_grad():
        result = model(prepare_images([scene], int(meta.get("image_size", 96))))
    preds = result.final[0]
    head_probs = preds.is_head_probs.numpy()
    watch_probs = preds.watch_probs.numpy()

    detections = []
    for slot in range(preds.num_queries):
        score = float(head_probs[slot, 1])
        if score <= threshold:
            continue
        inst = preds.instance(slot)
        detections.append(
            {
                "slot": slot,
                "score": score,
                "box": [round(v, 6) for v in inst.head.as_tuple()],
                "watch_inside_prob": float(watch_probs[slot, WATCH_INSIDE]),
                "watch_inside": inst.gaze.inside,
                "gaze_point": (
                    [round(inst.gaze.point[0], 6), round(inst.gaze.point[1], 6)]
                    if inst.gaze.inside else None
                ),
                "heatmap": np.round(inst.heatmap.values, 5).tolist(),
            }
        )

    json_path = out / "detections.json"
    json_path.write_text(
        json.dumps({"image": str(image_path), "threshold": threshold, "detections": detections}),
        encoding="utf-8",
    )

    overlay = Image.fromarray(scene.pixels).convert("RGB")
    draw = ImageDraw.Draw(overlay)
    w, h = scene.width, scene.height
    for det in detections:
        x0, y0, x1, y1 = det["box"]
        draw.rectangle([x0 * w, y0 * h, x1 * w, y1 * h], outline=(40, 255, 40), width=1)
        if det["gaze_point"] is not None:
            gx, gy = det["gaze_point"][0] * w, det["gaze_point"][1] * h
            cx, cy = (x0 + x1) / 2 * w, (y0 + y1) / 2 * h
            draw.line([cx, cy, gx, gy], fill=(255, 230, 40), width=1)
            r = 2.5
            draw.ellipse([gx - r, gy - r, gx + r, gy + r], outline=(255, 40, 40), width=1)
    overlay_path = out / "overlay.png"
    overlay.save(overlay_path)
    return detections, overlay_path, json_path


def cmd_visualize(
    checkpoint: str,
    image_path: str,
    slot: int = 0,
    out_dir: str = "runs/visualize",
) -> tuple[Path, np.ndarray]:
    """Overlay one query's final-layer cross-attention on the input image.

    Returns (output path, raw attention grid); the grid sums to 1.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, meta = load_checkpoint(checkpoint)
    model.eval()
    if not 0 <= slot < model.config.num_queries:
        raise ValueError(
            f"slot must lie in [0, {model.config.num_queries - 1}], got {slot}"
        )
    scene = _load_scene(image_path)
    with torch.no_grad():
        result = model(prepare_images([scene], int(meta.get("image_size", 96))),
                       need_attention=True)
    grid = result.cross_attention[0, slot].reshape(result.grid_h, result.grid_w)
    up = torch.nn.functional.interpolate(
        grid[None, None], size=(scene.height, scene.width),
        mode="bilinear", align_corners=False,
    )[0, 0].numpy()
    lo, hi = up.min(), up.max()
    norm = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)

    base = scene.pixels.astype(np.float64)
    heat = np.zeros_like(base)
    heat[..., 0] = 255.0 * norm  # red channel carries the attention mass
    blended = np.clip(0.55 * base + 0.45 * heat, 0, 255).astype(np.uint8)
    out_path = out / f"attention_slot{slot}.png"
    Image.fromarray(blended).save(out_path)
    return out_path, grid.numpy()


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key-value config file")
    parser.add_argument("--profile", choices=sorted(_PROFILES), default="desk",
                        help="base configuration profile")
    parser.add_argument("--seed", type=int, help="random seed override")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded, fully seeded execution")
    parser.add_argument("--out", help="output directory override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazedet",
        description="Detect people and their gaze targets in a single forward pass.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    _add_common(p_train)
    p_train.add_argument("--train-manifest", help="training split manifest")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--decoder-layers", type=int, default=None,
                        help="evaluate this (1-based) decoder layer instead of the last")

    p_infer = sub.add_parser("infer", help="detect people+gaze in one image")
    _add_common(p_infer)
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("image", help="input image path")
    p_infer.add_argument("--threshold", type=float, default=0.5,
                         help="is-head probability threshold")

    p_vis = sub.add_parser("visualize", help="overlay decoder cross-attention")
    _add_common(p_vis)
    p_vis.add_argument("--checkpoint", required=True)
    p_vis.add_argument("image", help="input image path")
    p_vis.add_argument("--slot", type=int, default=0, help="query slot to visualize")

    p_gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p_gen)
    p_gen.add_argument("--count", type=int, default=100)
    p_gen.add_argument("--canvas", type=int, default=96)
    p_gen.add_argument("--min-people", type=int, default=1)
    p_gen.add_argument("--max-people", type=int, default=3)
    p_gen.add_argument("--p-outside", type=float, default=0.2)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            extra: dict[str, str] = {}
            if args.seed is not None:
                extra["seed"] = str(args.seed)
            if args.deterministic:
                extra["deterministic"] = "true"
            if args.out:
                extra["out_dir"] = args.out
            if args.train_manifest:
                extra["train_manifest"] = args.train_manifest
            cfg = load_run_config(args.profile, args.config, extra)
        elif args.command in ("eval", "infer", "visualize"):
            if args.seed is not None:
                seed_everything(args.seed, args.deterministic)
            elif args.deterministic:
                torch.set_num_threads(1)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    try:
        if args.command == "train":
            result = cmd_train(cfg)
            print(f"trained {result.steps} steps; final loss {result.final_loss:.6f}")
            print(f"checkpoint: {result.checkpoint_path}")
            print(f"loss log:   {result.loss_log_path}")
        elif args.command == "eval":
            report, report_path = cmd_eval(
                args.checkpoint, args.manifest,
                out_dir=args.out or "runs/eval",
                decoder_layer=args.decoder_layers,
            )
            print(_render_table(report), end="")
            print(f"report: {report_path}")
        elif args.command == "infer":
            detections, overlay_path, json_path = cmd_infer(
                args.checkpoint, args.image,
                out_dir=args.out or "runs/infer",
                threshold=args.threshold,
            )
            print(f"{len(detections)} detection(s) above threshold {args.threshold}")
            print(f"overlay: {overlay_path}")
            print(f"json:    {json_path}")
        elif args.command == "visualize":
            out_path, _ = cmd_visualize(
                args.checkpoint, args.image, slot=args.slot,
                out_dir=args.out or "runs/visualize",
            )
            print(f"attention overlay: {out_path}")
        elif args.command == "gen-data":
            manifest = generate_corpus(
                args.out or "runs/data",
                count=args.count,
                seed=args.seed if args.seed is not None else 0,
                canvas=args.canvas,
                min_people=args.min_people,
                max_people=args.max_people,
                p_outside=args.p_outside,
            )
            print(f"manifest: {manifest}")
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
