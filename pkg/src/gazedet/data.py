"""Dataset handling.

Per-person annotation merging into per-image records, video frame
subsampling, a deterministic synthetic scene generator (the package's
training data at desk scale), and manifest-based dataset I/O.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import GazeInstance, GazeTarget, HeadBox


@dataclass
class SceneImage:
    """Raw RGB pixels of one scene (uint8, height x width x 3)."""

    pixels: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8 (H, W, 3), got {p.dtype} {p.shape}")
        if p.shape[0] != self.height or p.shape[1] != self.width:
            raise ValueError(
                f"pixel shape {p.shape[:2]} does not match declared {self.height}x{self.width}"
            )
        self.pixels = p


@dataclass
class ImageRecord:
    """One annotated image: identity, native size, and its instances."""

    image_id: str
    width: int
    height: int
    instances: list[GazeInstance]
    source: str = "real"


@dataclass(frozen=True)
class PersonAnnotation:
    """A single person's annotation before per-image merging."""

    image_id: str
    width: int
    height: int
    head: HeadBox
    gaze: GazeTarget


def merge_annotations(records) -> list[ImageRecord]:
    """Group per-person annotations into per-image records.

    Output images appear in first-seen order and keep their instances in
    input order.  Conflicting sizes for the same image_id are rejected.
    """
    merged: dict[str, ImageRecord] = {}
    for idx, rec in enumerate(records):
        if not isinstance(rec, PersonAnnotation):
            raise ValueError(f"record {idx}: expected PersonAnnotation, got {type(rec).__name__}")
        if rec.width < 1 or rec.height < 1:
            raise ValueError(f"record {idx}: image size must be positive, got {rec.width}x{rec.height}")
        existing = merged.get(rec.image_id)
        if existing is None:
            merged[rec.image_id] = ImageRecord(
                rec.image_id, rec.width, rec.height,
                [GazeInstance(rec.head, rec.gaze)],
            )
        else:
            if (existing.width, existing.height) != (rec.width, rec.height):
                raise ValueError(
                    f"record {idx}: image '{rec.image_id}' size {rec.width}x{rec.height} "
                    f"conflicts with earlier {existing.width}x{existing.height}"
                )
            existing.instances.append(GazeInstance(rec.head, rec.gaze))
    return list(merged.values())


def subsample_video_frames(frames, block: int = 5, rng=None) -> list:
    """Keep one uniformly chosen frame out of every `block` consecutive ones.

    The trailing partial block (if any) also contributes one frame, so the
    result has ceil(len(frames) / block) entries in temporal order.
    """
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    out = []
    frames = list(frames)
    for start in range(0, len(frames), block):
        chunk = frames[start:start + block]
        out.append(chunk[int(rng.integers(len(chunk)))])
    return out


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic scene: the same spec always renders the
    same image and annotations."""

    seed: int
    n_people: int = 2
    canvas: int = 96
    p_outside: float = 0.2

    def __post_init__(self):
        if self.n_people < 1:
            raise ValueError(f"n_people must be >= 1, got {self.n_people}")
        if self.canvas < 32:
            raise ValueError(f"canvas must be >= 32 pixels, got {self.canvas}")
        if not 0.0 <= self.p_outside <= 1.0:
            raise ValueError(f"p_outside must lie in [0, 1], got {self.p_outside}")


_NOTCH_COLOR = np.array([15, 15, 15], dtype=np.uint8)
_CROSS_COLOR = np.array([225, 45, 35], dtype=np.uint8)
_GUIDE_COLOR = np.array([205, 95, 85], dtype=np.uint8)


def _draw_disk(img: np.ndarray, cx: float, cy: float, r: float, color: np.ndarray) -> None:
    h, w = img.shape[:2]
    x0, x1 = max(0, int(cx - r - 2)), min(w, int(cx + r + 3))
    y0, y1 = max(0, int(cy - r - 2)), min(h, int(cy + r + 3))
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    img[y0:y1, x0:x1][mask] = color


def _draw_segment(img, ax, ay, bx, by, half_width, color) -> None:
    h, w = img.shape[:2]
    pad = int(math.ceil(half_width)) + 1
    x0 = max(0, int(min(ax, bx)) - pad)
    x1 = min(w, int(max(ax, bx)) + pad + 1)
    y0 = max(0, int(min(ay, by)) - pad)
    y1 = min(h, int(max(ay, by)) + pad + 1)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = bx - ax, by - ay
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0.0:
        dist2 = (xx - ax) ** 2 + (yy - ay) ** 2
    else:
        t = np.clip(((xx - ax) * dx + (yy - ay) * dy) / seg_len2, 0.0, 1.0)
        dist2 = (xx - (ax + t * dx)) ** 2 + (yy - (ay + t * dy)) ** 2
    img[y0:y1, x0:x1][dist2 <= half_width * half_width] = color


def _draw_cross(img, cx, cy, arm: float, color) -> None:
    _draw_segment(img, cx - arm, cy, cx + arm, cy, 1.6, color)
    _draw_segment(img, cx, cy - arm, cx, cy + arm, 1.6, color)


def _ray_exit_distance(cx: float, cy: float, dx: float, dy: float, size: float) -> float:
    """Distance along (dx, dy) from an interior point to the canvas border."""
    best = math.inf
    for pos, d in ((cx, dx), (cy, dy)):
        if d > 1e-12:
            best = min(best, (size - pos) / d)
        elif d < -1e-12:
            best = min(best, -pos / d)
    return best


def generate_synthetic_scene(spec: SceneSpec) -> tuple[SceneImage, ImageRecord]:
    """Render one synthetic scene with exact analytic annotations.

    People are high-contrast disks with a dark notch pointing along their
    gaze direction and a thin ray running to the gaze target; in-frame
    targets additionally appear as red cross markers (outside-watchers'
    rays run off the border instead).  All geometry is drawn from the
    spec's seeded generator, and the annotations come from the placement
    values — never from the rendered pixels — so they are exact by
    construction.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.canvas
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = rng.integers(25, 75, size=3, dtype=np.uint8)

    r_lo, r_hi = 0.05 * size, 0.09 * size
    margin_attempts = 250
    placed: list[tuple[float, float, float]] = []  # (cx, cy, r)
    for _ in range(spec.n_people):
        for attempt in range(margin_attempts):
            r = rng.uniform(r_lo, r_hi)
            cx = rng.uniform(r + 2.0, size - r - 2.0)
            cy = rng.uniform(r + 2.0, size - r - 2.0)
            if all(
                math.hypot(cx - px, cy - py) >= r + pr + 3.0 for px, py, pr in placed
            ):
                placed.append((cx, cy, r))
                break
        else:
            raise RuntimeError(
                f"could not place {spec.n_people} people on a {size}px canvas; "
                "use fewer people or a larger canvas"
            )

    instances: list[GazeInstance] = []
    draw_ops: list[tuple] = []
    for cx, cy, r in placed:
        outside = bool(rng.random() < spec.p_outside)
        target = None
        theta = None
        if outside:
            # prefer directions that exit the frame quickly so "no room for a
            # marker" is visually unambiguous; the flag alone is the annotation
            theta = rng.uniform(0.0, 2.0 * math.pi)
            for attempt in range(100):
                dx, dy = math.cos(theta), math.sin(theta)
                if _ray_exit_distance(cx, cy, dx, dy, float(size)) < 0.45 * size:
                    break
                theta = rng.uniform(0.0, 2.0 * math.pi)
        else:
            # The marker point is drawn uniformly over the canvas (the gaze
            # direction follows from it), so target positions carry no
            # geometric bias an evaluator could exploit.
            for attempt in range(100):
                tx = rng.uniform(1.0, size - 1.0)
                ty = rng.uniform(1.0, size - 1.0)
                if math.hypot(tx - cx, ty - cy) < r + 8.0:
                    continue  # marker would sit on (or hug) the gazer's own head
                if any(
                    math.hypot(tx - px, ty - py) < pr + 4.0 for px, py, pr in placed
                ):
                    continue
                theta = math.atan2(ty - cy, tx - cx)
                target = (tx, ty)
                break
            if target is None:
                raise RuntimeError(
                    "could not sample an in-frame gaze target; "
                    "use fewer people or a larger canvas"
                )

        # Grayscale disks keep the red marker channel unambiguous.
        disk_color = np.full(3, rng.integers(110, 245), dtype=np.uint8)
        dx, dy = math.cos(theta), math.sin(theta)
        draw_ops.append(("disk", cx, cy, r, disk_color))
        draw_ops.append(("notch", cx, cy, cx + 1.15 * r * dx, cy + 1.15 * r * dy))
        # The gaze ray is drawn explicitly, head edge to marker (or to the
        # border for outside-watchers): each marker is visually bound to
        # its gazer, not just implied by the notch orientation.
        if target is not None:
            draw_ops.append(("ray", cx + (r + 0.5) * dx, cy + (r + 0.5) * dy,
                             target[0], target[1]))
            draw_ops.append(("cross", target[0], target[1]))
        else:
            reach = _ray_exit_distance(cx, cy, dx, dy, float(size))
            draw_ops.append(("ray", cx + (r + 0.5) * dx, cy + (r + 0.5) * dy,
                             cx + reach * dx, cy + reach * dy))

        head = HeadBox((cx - r) / size, (cy - r) / size, (cx + r) / size, (cy + r) / size)
        if target is None:
            gaze = GazeTarget(None, False)
        else:
            gaze = GazeTarget((target[0] / size, target[1] / size), True)
        instances.append(GazeInstance(head, gaze))

    # Disks, then rays, then notches and crosses, so markers stay visible
    # and every ray is traceable end to end even where it crosses a disk.
    for op in draw_ops:
        if op[0] == "disk":
            _draw_disk(img, op[1], op[2], op[3], op[4])
    for op in draw_ops:
        if op[0] == "ray":
            _draw_segment(img, op[1], op[2], op[3], op[4], 0.9, _NOTCH_COLOR)
    for op in draw_ops:
        if op[0] == "notch":
            _draw_segment(img, op[1], op[2], op[3], op[4], 1.2, _NOTCH_COLOR)
    for op in draw_ops:
        if op[0] == "cross":
            _draw_cross(img, op[1], op[2], 6.0, _CROSS_COLOR)

    scene = SceneImage(img, size, size)
    record = ImageRecord(
        image_id=f"scene_{spec.seed:010d}",
        width=size,
        height=size,
        instances=instances,
        source="synthetic",
    )
    return scene, record


def generate_corpus(
    out_dir,
    count: int,
    seed: int = 0,
    canvas: int = 96,
    min_people: int = 1,
    max_people: int = 3,
    p_outside: float = 0.2,
) -> Path:
    """Write `count` synthetic scenes plus a manifest; returns the manifest path."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 1 <= min_people <= max_people:
        raise ValueError(f"need 1 <= min_people <= max_people, got {min_people}..{max_people}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        spec = SceneSpec(
            seed=int(rng.integers(0, 2**31 - 1)),
            n_people=int(rng.integers(min_people, max_people + 1)),
            canvas=canvas,
            p_outside=p_outside,
        )
        scene, record = generate_synthetic_scene(spec)
        record.image_id = f"scene_{i:05d}"
        rel = f"images/scene_{i:05d}.png"
        Image.fromarray(scene.pixels).save(out_dir / rel)
        entries.append((record, rel))
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, entries)
    return manifest


def write_manifest(path, entries) -> None:
    """Serialize (ImageRecord, relative image path) pairs as a JSON manifest."""
    doc = []
    for record, rel in entries:
        insts = []
        for inst in record.instances:
            item = {
                "box": [float(v) for v in inst.head.as_tuple()],
                "inside": inst.gaze.inside,
            }
            if inst.gaze.inside:
                item["gaze"] = [float(inst.gaze.point[0]), float(inst.gaze.point[1])]
            insts.append(item)
        doc.append(
            {
                "image_id": record.image_id,
                "file": rel,
                "width": record.width,
                "height": record.height,
                "instances": insts,
            }
        )
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def _manifest_error(index, image_id, field, detail) -> ValueError:
    ident = f" ('{image_id}')" if image_id else ""
    return ValueError(f"manifest entry {index}{ident}: field '{field}' {detail}")


def load_dataset(manifest_path):
    """Yield (SceneImage, ImageRecord) pairs for every manifest entry.

    Validates the schema (reporting the offending entry and field) and
    loads each referenced image relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, list):
        raise ValueError(f"{manifest_path}: manifest must be a JSON list of image entries")
    base = manifest_path.parent
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict):
            raise ValueError(f"manifest entry {i}: expected an object, got {type(entry).__name__}")
        image_id = entry.get("image_id")
        for key, typ in (("image_id", str), ("file", str), ("width", int), ("height", int)):
            if not isinstance(entry.get(key), typ):
                raise _manifest_error(i, image_id, key, f"must be a {typ.__name__}")
        if entry["width"] < 1 or entry["height"] < 1:
            raise _manifest_error(i, image_id, "width/height", "must be positive")
        if not isinstance(entry.get("instances"), list) or not entry["instances"]:
            raise _manifest_error(i, image_id, "instances", "must be a non-empty list")

        instances = []
        for j, inst in enumerate(entry["instances"]):
            box = inst.get("box")
            if not (isinstance(box, list) and len(box) == 4):
                raise _manifest_error(i, image_id, f"instances[{j}].box", "must be a list of 4 floats")
            try:
                head = HeadBox(*(float(v) for v in box))
            except (TypeError, ValueError) as e:
                raise _manifest_error(i, image_id, f"instances[{j}].box", str(e)) from None
            inside = inst.get("inside")
            if not isinstance(inside, bool):
                raise _manifest_error(i, image_id, f"instances[{j}].inside", "must be a boolean")
            if inside:
                gaze = inst.get("gaze")
                if not (isinstance(gaze, list) and len(gaze) == 2):
                    raise _manifest_error(i, image_id, f"instances[{j}].gaze", "must be a list of 2 floats")
                try:
                    target = GazeTarget((float(gaze[0]), float(gaze[1])), True)
                except (TypeError, ValueError) as e:
                    raise _manifest_error(i, image_id, f"instances[{j}].gaze", str(e)) from None
            else:
                target = GazeTarget(None, False)
            instances.append(GazeInstance(head, target))

        file_path = base / entry["file"]
        if not file_path.exists():
            raise FileNotFoundError(f"manifest entry {i} ('{image_id}'): image not found: {file_path}")
        with Image.open(file_path) as im:
            pixels = np.asarray(im.convert("RGB"))
        scene = SceneImage(pixels, pixels.shape[1], pixels.shape[0])
        if (scene.width, scene.height) != (entry["width"], entry["height"]):
            raise _manifest_error(
                i, image_id, "width/height",
                f"declared {entry['width']}x{entry['height']} but image is {scene.width}x{scene.height}",
            )
        record = ImageRecord(
            image_id=entry["image_id"],
            width=entry["width"],
            height=entry["height"],
            instances=instances,
            source=entry.get("source", "synthetic"),
        )
        yield scene, record
