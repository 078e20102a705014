"""Synthetic multi-object scenes with image-level labels and pixel ground truth.

Each category is one shape family with its own base hue.  Objects never
overlap.  Only a band a few pixels wide along each object boundary carries
the category colour; deeper interiors fade to a gray shared by all
categories, so small objects are coloured throughout while large ones
hold most of their class evidence near the edge.
"""
from __future__ import annotations

import colorsys
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ChecksumError, ConfigError, FormatVersionError, GenerationError, \
    MissingArtifactError

FORMAT_VERSION = 1
SHAPE_FAMILIES = ("disk", "square", "triangle", "ring", "diamond", "cross")
MAX_ATTEMPTS = 1000
# interiors fade to a category-neutral tone between these depths (pixels)
FADE_START = 2.0
FADE_WIDTH = 3.0
INTERIOR_GRAY = 0.62


@dataclass
class DatasetSpec:
    num_scenes: int = 200
    image_size: int = 64
    num_categories: int = 4
    size_range: tuple = (0.02, 0.30)
    max_objects: int = 2
    noise: float = 0.04
    core_fade: float = 1.0
    seed: int = 1234

    def __post_init__(self):
        self.size_range = tuple(float(v) for v in self.size_range)
        lo, hi = self.size_range
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"size_range must satisfy 0 < min <= max < 1, got {self.size_range}")
        if self.num_scenes < 1 or self.image_size < 8 or self.num_categories < 1:
            raise ConfigError("num_scenes, image_size and num_categories must be positive")
        if not 1 <= self.max_objects <= self.num_categories:
            raise ConfigError("max_objects must lie in [1, num_categories]")
        if self.noise < 0 or not 0 <= self.core_fade <= 1:
            raise ConfigError("noise must be >= 0 and core_fade in [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["size_range"] = list(self.size_range)
        return d


@dataclass
class SceneSample:
    image: np.ndarray            # [3, H, W] in [0, 1]
    labels: np.ndarray           # [C] multi-hot, int
    gt_masks: dict               # category -> bool [H, W]
    object_areas: dict           # category -> pixel count
    id: str
    meta: dict = field(default_factory=dict)

    @property
    def positives(self) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.labels)]

    def area_vector(self) -> np.ndarray:
        out = np.zeros(len(self.labels), dtype=np.int64)
        for j, a in self.object_areas.items():
            out[j] = a
        return out


def category_color(j: int, num_categories: int) -> np.ndarray:
    hue = (j / num_categories + 0.02) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9))


def _shape_mask(family: str, area: float, size: int, cy: float, cx: float, angle: float,
                aspect: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if family == "disk":
        r = np.sqrt(area / np.pi)
        return dx * dx + dy * dy <= r * r
    if family == "square":
        w = np.sqrt(area * aspect)
        h = area / w
        return (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)
    if family == "triangle":
        side = np.sqrt(4 * area / np.sqrt(3))
        height = side * np.sqrt(3) / 2
        # centroid-centred, apex up in rotated frame
        vv = v + height / 3
        return (vv >= 0) & (vv <= height) & (np.abs(u) <= (height - vv) / np.sqrt(3))
    if family == "ring":
        r = np.sqrt(area / (0.75 * np.pi))
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= 0.25 * r * r)
    if family == "diamond":
        half = np.sqrt(area / 2)
        return np.abs(u) + np.abs(v) <= half
    if family == "cross":
        arm = np.sqrt(area / 5)
        return ((np.abs(u) <= 1.5 * arm) & (np.abs(v) <= arm / 2)) | \
            ((np.abs(v) <= 1.5 * arm) & (np.abs(u) <= arm / 2))
    raise ConfigError(f"unknown shape family {family}")


def _extent(family: str, area: float, aspect: float) -> float:
    """Radius of a circle guaranteed to contain the shape."""
    if family == "disk":
        return np.sqrt(area / np.pi)
    if family == "square":
        w = np.sqrt(area * aspect)
        return 0.5 * np.hypot(w, area / w)
    if family == "triangle":
        side = np.sqrt(4 * area / np.sqrt(3))
        return side / np.sqrt(3)
    if family == "ring":
        return np.sqrt(area / (0.75 * np.pi))
    if family == "diamond":
        return np.sqrt(area / 2)
    return 1.5 * np.sqrt(2.25 + 0.25) * np.sqrt(area / 5)


def _background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), 3.0, mode="wrap")
    field_ = 0.5 + 0.12 * field_ / (field_.std() + 1e-12)
    tint = rng.uniform(-0.03, 0.03, size=3)
    img = field_[None] + tint[:, None, None]
    img = img + rng.normal(0.0, noise, size=(3, size, size))
    return img


def generate_scene(spec: DatasetSpec, index: int) -> SceneSample:
    """Render scene ``index``; bit-identical for the same ``(spec, index)``."""
    if not 0 <= index < spec.num_scenes:
        raise ConfigError(f"scene index {index} out of range [0, {spec.num_scenes})")
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    n_obj = int(rng.integers(1, spec.max_objects + 1))
    cats = sorted(int(c) for c in rng.choice(spec.num_categories, size=n_obj, replace=False))
    img = _background(rng, size, spec.noise)
    occupied = np.zeros((size, size), dtype=bool)
    masks, areas, placed = {}, {}, []
    lo, hi = spec.size_range
    for j in cats:
        family = SHAPE_FAMILIES[j % len(SHAPE_FAMILIES)]
        for _ in range(MAX_ATTEMPTS):
            frac = rng.uniform(lo, hi)
            area = frac * size * size
            aspect = rng.uniform(0.6, 1.6) if family == "square" else 1.0
            angle = rng.uniform(0, 2 * np.pi)
            ext = _extent(family, area, aspect)
            if 2 * ext + 2 > size:
                continue
            cy = rng.uniform(ext + 1, size - ext - 1)
            cx = rng.uniform(ext + 1, size - ext - 1)
            mask = _shape_mask(family, area, size, cy, cx, angle, aspect)
            # one pixel of clearance keeps objects visually separate
            if mask.any() and not (ndimage.binary_dilation(mask) & occupied).any():
                break
        else:
            raise GenerationError(f"could not place category {j} in scene {index} after "
                                  f"{MAX_ATTEMPTS} attempts (spec too crowded)")
        occupied |= mask
        color = category_color(j, spec.num_categories)
        color = np.clip(color + rng.uniform(-0.06, 0.06, size=3), 0, 1)
        depth = ndimage.distance_transform_edt(mask)
        fade = spec.core_fade * np.clip((depth - FADE_START) / FADE_WIDTH, 0.0, 1.0)
        dull = np.full(3, INTERIOR_GRAY)
        pix = (1 - fade)[None] * color[:, None, None] + fade[None] * dull[:, None, None]
        pix = pix + rng.normal(0.0, spec.noise, size=(3, size, size))
        img = np.where(mask[None], pix, img)
        masks[j] = mask
        areas[j] = int(mask.sum())
        placed.append({"category": j, "family": family, "center": [float(cy), float(cx)],
                       "target_area": float(area)})
    labels = np.zeros(spec.num_categories, dtype=np.int64)
    labels[cats] = 1
    return SceneSample(image=np.clip(img, 0.0, 1.0), labels=labels, gt_masks=masks,
                       object_areas=areas, id=f"s{spec.seed}-{index:05d}",
                       meta={"objects": placed})


@dataclass
class Dataset:
    spec: DatasetSpec
    scenes: list
    train: list
    eval: list

    def subset(self, split: str) -> list:
        return [self.scenes[i] for i in getattr(self, split)]


def split_indices(num_scenes: int, seed: int, eval_frac: float = 0.1) -> tuple[list, list]:
    n_eval = int(round(eval_frac * num_scenes))
    perm = np.random.default_rng([seed, 0x5117]).permutation(num_scenes)
    return sorted(int(i) for i in perm[n_eval:]), sorted(int(i) for i in perm[:n_eval])


def generate_dataset(spec: DatasetSpec) -> Dataset:
    scenes = [generate_scene(spec, i) for i in range(spec.num_scenes)]
    train, ev = split_indices(spec.num_scenes, spec.seed)
    return Dataset(spec=spec, scenes=scenes, train=train, eval=ev)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _write_blob(path: Path, arr: np.ndarray) -> str:
    raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path.write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def _read_blob(path: Path, digest: str, shape) -> np.ndarray:
    if not path.exists():
        raise MissingArtifactError(f"missing blob {path}")
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != digest:
        raise ChecksumError(f"checksum mismatch for {path}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_dataset(ds: Dataset, path) -> Path:
    root = Path(path)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    records = []
    for sc in ds.scenes:
        rec = {"id": sc.id, "labels": sc.labels.tolist(),
               "areas": {str(j): a for j, a in sc.object_areas.items()},
               "image": {"file": f"scenes/{sc.id}.f64", "shape": list(sc.image.shape)},
               "masks": {}, "meta": sc.meta}
        rec["image"]["sha256"] = _write_blob(root / rec["image"]["file"], sc.image)
        for j, m in sc.gt_masks.items():
            f = f"masks/{sc.id}_c{j}.f64"
            rec["masks"][str(j)] = {"file": f, "shape": list(m.shape),
                                    "sha256": _write_blob(root / f, m.astype(np.float64))}
        records.append(rec)
    manifest = {"format_version": FORMAT_VERSION, "spec": ds.spec.to_dict(),
                "split": {"train": ds.train, "eval": ds.eval}, "scenes": records}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise MissingArtifactError(f"no dataset manifest in {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"dataset format {manifest.get('format_version')} "
                                 f"!= {FORMAT_VERSION}")
    spec = DatasetSpec(**manifest["spec"])
    scenes = []
    for rec in manifest["scenes"]:
        img = _read_blob(root / rec["image"]["file"], rec["image"]["sha256"],
                         rec["image"]["shape"])
        masks = {int(j): _read_blob(root / m["file"], m["sha256"], m["shape"]) > 0.5
                 for j, m in rec["masks"].items()}
        scenes.append(SceneSample(image=img, labels=np.asarray(rec["labels"], dtype=np.int64),
                                  gt_masks=masks,
                                  object_areas={int(j): int(a) for j, a in rec["areas"].items()},
                                  id=rec["id"], meta=rec.get("meta", {})))
    return Dataset(spec=spec, scenes=scenes, train=list(manifest["split"]["train"]),
                   eval=list(manifest["split"]["eval"]))
