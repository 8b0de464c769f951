"""Synthetic shapes detection dataset: generation and on-disk format.

Eight shape classes grouped into four supercategories of two visually
similar members each (the two members of a pair are the kind of thing a
weak detector confuses).  Images carry low-contrast background clutter —
texture patches, thin line segments, speckle dots — so that background
false positives are attainable.  Generation is deterministic: each sample's
randomness derives from (seed, sample_id) only.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DatasetError

# (class_id, name, supercategory_id); supercategories pair confusable shapes.
CLASS_TABLE = (
    (1, "triangle_up", 1),
    (2, "triangle_down", 1),
    (3, "disk", 2),
    (4, "ellipse", 2),
    (5, "square", 3),
    (6, "bar", 3),
    (7, "plus", 4),
    (8, "cross", 4),
)

SUPERCATEGORY_NAMES = {1: "triangle", 2: "round", 3: "block", 4: "mark"}

_SUPERSAMPLE = 2


def class_name(class_id: int) -> str:
    return CLASS_TABLE[class_id - 1][1]


def supercategory_of(class_id: int) -> int:
    return CLASS_TABLE[class_id - 1][2]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, origin top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self, width: int, height: int):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DatasetError(f"degenerate box {self.as_list()}")
        if self.x1 < 0 or self.y1 < 0 or self.x2 > width or self.y2 > height:
            raise DatasetError(
                f"box {self.as_list()} exceeds image bounds {width}x{height}"
            )

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Annotation:
    box: BBox
    class_id: int

    @property
    def supercategory_id(self) -> int:
        return supercategory_of(self.class_id)


@dataclass
class DetectionSample:
    image: np.ndarray  # H×W×3 floats in [0, 1]
    annotations: list[Annotation]
    sample_id: int

    def boxes(self) -> np.ndarray:
        if not self.annotations:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([a.box.as_list() for a in self.annotations], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([a.class_id for a in self.annotations], dtype=np.int64)


@dataclass
class DatasetSpec:
    num_images: int
    image_size: int = 128
    num_classes: int = 8
    min_objects: int = 1
    max_objects: int = 3
    min_box_side: float = 14.0
    max_box_side: float = 48.0
    background: str = "clutter"  # or "plain"
    seed: int = 0

    def validate(self, max_stride: int = 16):
        if self.num_images < 0:
            raise ConfigurationError("num_images must be non-negative")
        if self.num_classes < 2 or self.num_classes > len(CLASS_TABLE):
            raise ConfigurationError(
                f"num_classes must be in [2, {len(CLASS_TABLE)}], got {self.num_classes}"
            )
        if self.image_size % max_stride != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by stride {max_stride}"
            )
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("need 0 <= min_objects <= max_objects")
        if not 0 < self.min_box_side <= self.max_box_side:
            raise ConfigurationError("need 0 < min_box_side <= max_box_side")
        if self.max_box_side > self.image_size - 4:
            raise ConfigurationError(
                f"max_box_side {self.max_box_side} too large for image_size "
                f"{self.image_size}"
            )
        if self.background not in ("clutter", "plain"):
            raise ConfigurationError(f"unknown background mode {self.background!r}")


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _shape_mask(name, xs, ys, cx, cy, hw, hh):
    """Boolean membership of grid points (xs across, ys down) in the shape."""
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    in_box = (np.abs(dx) <= hw) & (np.abs(dy) <= hh)
    if name == "triangle_up":
        # apex at the top; half-width grows linearly towards the base
        return in_box & (np.abs(dx) <= hw * (dy + hh) / (2.0 * hh))
    if name == "triangle_down":
        return in_box & (np.abs(dx) <= hw * (hh - dy) / (2.0 * hh))
    if name == "disk" or name == "ellipse":
        return (dx / hw) ** 2 + (dy / hh) ** 2 <= 1.0
    if name == "square" or name == "bar":
        return in_box
    if name == "plus":
        t = 0.32
        return ((np.abs(dx) <= hw) & (np.abs(dy) <= t * hh)) | (
            (np.abs(dx) <= t * hw) & (np.abs(dy) <= hh)
        )
    if name == "cross":
        w = 0.30 * hw * np.sqrt(2.0)
        return in_box & ((np.abs(dx - dy) <= w) | (np.abs(dx + dy) <= w))
    raise ValueError(f"unknown shape {name!r}")


def _shape_extent(name, rng, side):
    """Half-width/half-height for a nominal box side, per-class aspect."""
    h = side / 2.0
    if name in ("triangle_up", "triangle_down"):
        return h, h * rng.uniform(0.8, 1.1)
    if name == "ellipse":
        hw, hh = h, h * rng.uniform(0.45, 0.65)
        return (hh, hw) if rng.random() < 0.5 else (hw, hh)
    if name == "bar":
        hw, hh = h, h * rng.uniform(0.28, 0.42)
        return (hh, hw) if rng.random() < 0.5 else (hw, hh)
    return h, h  # disk, square, plus, cross are unit-aspect


def _paint(canvas, mask, color):
    canvas[mask] = color


def _render_background(rng, size_ss, mode):
    base = _hsv(rng.uniform(), rng.uniform(0.0, 0.08), rng.uniform(0.62, 0.80))
    canvas = np.tile(base, (size_ss, size_ss, 1))
    canvas += rng.normal(0.0, 0.015, size=canvas.shape)
    if mode == "plain":
        return np.clip(canvas, 0.0, 1.0)

    xs = np.arange(size_ss) + 0.5
    ys = np.arange(size_ss) + 0.5
    ss = float(_SUPERSAMPLE)

    for _ in range(rng.integers(5, 11)):  # low-contrast texture patches
        w, h = rng.uniform(5, 18, size=2) * ss / 2.0
        cx, cy = rng.uniform(0, size_ss, size=2)
        shade = np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
        if rng.random() < 0.5:
            mask = (np.abs(xs[None, :] - cx) <= w) & (np.abs(ys[:, None] - cy) <= h)
        else:
            mask = ((xs[None, :] - cx) / w) ** 2 + ((ys[:, None] - cy) / h) ** 2 <= 1.0
        _paint(canvas, mask, shade)

    for _ in range(rng.integers(2, 6)):  # thin dark line segments
        x0, y0 = rng.uniform(0, size_ss, size=2)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(8, 26) * ss
        x1, y1 = x0 + length * np.cos(ang), y0 + length * np.sin(ang)
        half_w = rng.uniform(0.5, 1.0) * ss
        px = xs[None, :] - x0
        py = ys[:, None] - y0
        vx, vy = x1 - x0, y1 - y0
        t = np.clip((px * vx + py * vy) / (vx * vx + vy * vy), 0.0, 1.0)
        dist2 = (px - t * vx) ** 2 + (py - t * vy) ** 2
        _paint(canvas, dist2 <= half_w**2, base * rng.uniform(0.55, 0.75))

    for _ in range(rng.integers(3, 9)):  # speckle dots
        cx, cy = rng.uniform(0, size_ss, size=2)
        r = rng.uniform(0.8, 1.8) * ss
        shade = np.clip(base + rng.choice((-1, 1)) * rng.uniform(0.12, 0.22), 0.0, 1.0)
        mask = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r * r
        _paint(canvas, mask, shade)

    return np.clip(canvas, 0.0, 1.0)


def _downsample(canvas_ss):
    s = _SUPERSAMPLE
    H = canvas_ss.shape[0] // s
    W = canvas_ss.shape[1] // s
    return canvas_ss.reshape(H, s, W, s, -1).mean(axis=(1, 3))


def generate_sample(spec: DatasetSpec, sample_id: int) -> DetectionSample:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, sample_id)))
    size = spec.image_size
    size_ss = size * _SUPERSAMPLE
    canvas = _render_background(rng, size_ss, spec.background)

    # supersampled pixel centers in image coordinates
    grid = (np.arange(size_ss) + 0.5) / _SUPERSAMPLE

    annotations = []
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n_objects):
        class_id = int(rng.integers(1, spec.num_classes + 1))
        name = class_name(class_id)
        side = rng.uniform(spec.min_box_side, spec.max_box_side)
        hw, hh = _shape_extent(name, rng, side)
        cx = rng.uniform(hw + 1.0, size - hw - 1.0)
        cy = rng.uniform(hh + 1.0, size - hh - 1.0)
        color = _hsv(rng.uniform(), rng.uniform(0.55, 0.95), rng.uniform(0.25, 0.60))
        mask = _shape_mask(name, grid, grid, cx, cy, hw, hh)
        _paint(canvas, mask, color)

        # tight box around the shape's rendered coverage at full resolution
        covered = mask.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).any(axis=(1, 3))
        rows = np.flatnonzero(covered.any(axis=1))
        cols = np.flatnonzero(covered.any(axis=0))
        box = BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
        box.validate(size, size)
        annotations.append(Annotation(box=box, class_id=class_id))

    image = _downsample(canvas)
    return DetectionSample(image=image, annotations=annotations, sample_id=sample_id)


def generate_dataset(spec: DatasetSpec) -> list[DetectionSample]:
    """Render all samples of ``spec``; pure function of the spec."""
    spec.validate()
    return [generate_sample(spec, i) for i in range(spec.num_images)]


def _image_filename(sample_id: int) -> str:
    return f"img_{sample_id:06d}.png"


def write_dataset(samples, dir_path, spec: DatasetSpec) -> Path:
    """Write PNGs plus ``annotations.json``; returns the manifest path."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    images = []
    for s in samples:
        fname = _image_filename(s.sample_id)
        arr = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(dir_path / fname)
        images.append(
            {
                "id": s.sample_id,
                "file": fname,
                "width": int(s.image.shape[1]),
                "height": int(s.image.shape[0]),
                "annotations": [
                    {"class_id": a.class_id, "box": a.box.as_list()}
                    for a in s.annotations
                ],
            }
        )
    manifest = {
        "spec": asdict(spec),
        "classes": [
            {"id": cid, "name": name, "supercategory_id": sc}
            for cid, name, sc in CLASS_TABLE[: spec.num_classes]
        ],
        "images": images,
    }
    path = dir_path / "annotations.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_spec(dir_path) -> DatasetSpec:
    manifest = _load_manifest(Path(dir_path))
    try:
        return DatasetSpec(**manifest["spec"])
    except TypeError as e:
        raise DatasetError(f"bad spec block in annotations.json: {e}") from e


def _load_manifest(dir_path: Path) -> dict:
    path = dir_path / "annotations.json"
    if not path.exists():
        raise DatasetError(f"no annotations.json under {dir_path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed annotations.json: {e}") from e
    for key in ("spec", "classes", "images"):
        if key not in manifest:
            raise DatasetError(f"annotations.json missing top-level field {key!r}")
    return manifest


def read_dataset(dir_path) -> list[DetectionSample]:
    """Load samples from a written dataset directory, sorted by sample_id."""
    dir_path = Path(dir_path)
    manifest = _load_manifest(dir_path)
    valid_ids = {int(c["id"]) for c in manifest["classes"]}
    samples = []
    for rec in manifest["images"]:
        try:
            img_path = dir_path / rec["file"]
            if not img_path.exists():
                raise DatasetError(f"image file missing: {rec['file']}")
            image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64)
            image /= 255.0
            annotations = []
            for a in rec["annotations"]:
                box = BBox(*[float(v) for v in a["box"]])
                box.validate(rec["width"], rec["height"])
                class_id = int(a["class_id"])
                if class_id not in valid_ids:
                    raise DatasetError(f"class_id {class_id} not in declared classes")
                annotations.append(Annotation(box=box, class_id=class_id))
            samples.append(
                DetectionSample(
                    image=image, annotations=annotations, sample_id=int(rec["id"])
                )
            )
        except DatasetError as e:
            raise DatasetError(f"image record {rec.get('id', '?')}: {e}") from e
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"bad image record {rec.get('id', '?')}: {e}") from e
    samples.sort(key=lambda s: s.sample_id)
    return samples
