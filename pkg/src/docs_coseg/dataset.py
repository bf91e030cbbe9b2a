"""Synthetic multi-object scenes and co-segmentation pair construction.

Each of the eight object classes has a fixed shape and hue family. Scenes
place a few objects on a low-saturation textured background, which is never
foreground. A pair of scenes is usable when the two share at least one
class; its masks mark the pixels of the shared classes only.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from PIL import Image

GENERATOR_VERSION = 1
SHAPES = ("circle", "square", "triangle")
# class id -> (shape, base hue in [0, 1)); id 0 is background
CLASSES = {
    1: ("circle", 0.00),
    2: ("square", 0.125),
    3: ("triangle", 0.25),
    4: ("circle", 0.375),
    5: ("square", 0.50),
    6: ("triangle", 0.625),
    7: ("circle", 0.75),
    8: ("square", 0.875),
}
SPLITS = ("train", "val", "test")
MAX_OVERLAP = 0.3
PLACEMENT_RETRIES = 200


class PlacementError(RuntimeError):
    pass


@dataclass
class ObjectSpec:
    class_id: int
    scale: float  # object area as a fraction of the canvas area
    position: tuple[float, float] | None = None  # (row, col) of the centroid; None = random
    hue_jitter: float = 0.0
    saturation: float = 0.85
    value: float = 0.85

    @property
    def shape_kind(self) -> str:
        return CLASSES[self.class_id][0]


@dataclass
class SceneSpec:
    seed: int
    canvas: int = 64
    objects: list[ObjectSpec] = field(default_factory=list)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def shape_mask(kind: str, scale: float, center: tuple[float, float], canvas: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas] + 0.5
    cy, cx = center
    area = scale * canvas * canvas
    if kind == "circle":
        r = np.sqrt(area / np.pi)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        half = np.sqrt(area) / 2
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if kind == "triangle":
        side = np.sqrt(4 * area / np.sqrt(3))
        height = side * np.sqrt(3) / 2
        top = cy - 2 * height / 3
        base = cy + height / 3
        # apex up; half-width grows linearly from the apex to the base
        t = (yy - top) / height
        return (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= t * side / 2)
    raise ValueError(f"unknown shape {kind!r}")


def extent(kind: str, scale: float, canvas: int) -> float:
    """Radius of a circle around the centroid that contains the shape."""
    area = scale * canvas * canvas
    if kind == "circle":
        return np.sqrt(area / np.pi)
    if kind == "square":
        return np.sqrt(area) / np.sqrt(2)
    side = np.sqrt(4 * area / np.sqrt(3))
    return side / np.sqrt(3)


def _overlap_ok(new: np.ndarray, placed: list[np.ndarray]) -> bool:
    a_new = new.sum()
    for m in placed:
        inter = np.logical_and(new, m).sum()
        if inter > MAX_OVERLAP * a_new or inter > MAX_OVERLAP * m.sum():
            return False
    return True


def _background(rng: np.random.Generator, canvas: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas] / max(canvas - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * yy + np.sin(angle) * xx
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-6)
    lo, hi = sorted(rng.uniform(0.15, 0.75, size=2))
    gray = lo + (hi - lo) * ramp
    tint = rng.uniform(-0.04, 0.04, size=3)
    img = gray[None] + tint[:, None, None]
    img = img + rng.normal(0.0, 0.04, size=(3, canvas, canvas))
    return img


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render a scene; returns ``(image 3xSxS float32 in [0,1], labels SxS uint8)``.

    Objects without a position are placed at random, subject to the canvas
    and overlap constraints.
    """
    s = spec.canvas
    rng = _rng(spec.seed, 0x5CE)
    image = _background(rng, s)
    labels = np.zeros((s, s), dtype=np.uint8)
    placed: list[np.ndarray] = []
    for obj in spec.objects:
        kind = obj.shape_kind
        r = extent(kind, obj.scale, s)
        if r > s / 2:
            raise PlacementError(f"seed {spec.seed}: object of scale {obj.scale} cannot fit a {s}px canvas")
        if obj.position is not None:
            cy, cx = obj.position
            if not (r <= cy <= s - r and r <= cx <= s - r):
                raise PlacementError(f"seed {spec.seed}: object at {obj.position} leaves the canvas")
            mask = shape_mask(kind, obj.scale, (cy, cx), s)
            if not _overlap_ok(mask, placed):
                raise PlacementError(f"seed {spec.seed}: object at {obj.position} overlaps too much")
        else:
            for _ in range(PLACEMENT_RETRIES):
                cy, cx = rng.uniform(r, s - r, size=2)
                mask = shape_mask(kind, obj.scale, (cy, cx), s)
                if _overlap_ok(mask, placed):
                    break
            else:
                raise PlacementError(f"seed {spec.seed}: could not place class {obj.class_id} after {PLACEMENT_RETRIES} tries")
        placed.append(mask)
        hue = (CLASSES[obj.class_id][1] + obj.hue_jitter) % 1.0
        rgb = np.array(colorsys.hsv_to_rgb(hue, obj.saturation, obj.value))
        fill = rgb[:, None, None] + rng.normal(0.0, 0.03, size=(3, s, s))
        image = np.where(mask[None], fill, image)
        labels[mask] = obj.class_id
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def random_scene_spec(seed: int, canvas: int = 64, max_objects: int = 3, classes=None) -> SceneSpec:
    """Draw 1..max_objects objects of distinct classes with random appearance."""
    rng = _rng(seed, 0x0B1)
    pool = sorted(CLASSES) if classes is None else sorted(classes)
    count = int(rng.integers(1, max_objects + 1))
    chosen = rng.choice(pool, size=min(count, len(pool)), replace=False)
    return SceneSpec(seed, canvas, [_random_object(rng, int(c)) for c in chosen])


def _random_object(rng: np.random.Generator, class_id: int) -> ObjectSpec:
    return ObjectSpec(
        class_id=class_id,
        scale=float(rng.uniform(0.05, 0.12)),
        hue_jitter=float(rng.uniform(-0.03, 0.03)),
        saturation=float(rng.uniform(0.65, 1.0)),
        value=float(rng.uniform(0.65, 1.0)),
    )


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# pairs and splits


@dataclass
class PairRecord:
    id_a: str
    id_b: str
    common_classes: frozenset[int]
    mask_a: np.ndarray | None = None
    mask_b: np.ndarray | None = None
    mask_a_path: str | None = None
    mask_b_path: str | None = None

    @property
    def key(self) -> str:
        return f"{self.id_a}__{self.id_b}"


@dataclass
class Manifest:
    split: str
    records: list[PairRecord]
    seed: int
    version: int = GENERATOR_VERSION
    image_ids: list[str] = field(default_factory=list)


def common_mask(labels: np.ndarray, classes) -> np.ndarray:
    return np.isin(labels, sorted(classes)).astype(np.uint8)


def sample_pairs(images: list[tuple[str, np.ndarray]], rng: np.random.Generator, max_pairs: int) -> list[PairRecord]:
    """Unordered pairs with at least one shared class, subsampled uniformly."""
    class_sets = [frozenset(int(c) for c in np.unique(lab) if c != 0) for _, lab in images]
    candidates = [(i, j) for i, j in combinations(range(len(images)), 2) if class_sets[i] & class_sets[j]]
    if len(candidates) > max_pairs:
        keep = np.sort(rng.choice(len(candidates), size=max_pairs, replace=False))
        candidates = [candidates[k] for k in keep]
    records = []
    for i, j in candidates:
        common = class_sets[i] & class_sets[j]
        (ia, la), (ib, lb) = images[i], images[j]
        records.append(PairRecord(ia, ib, common, common_mask(la, common), common_mask(lb, common)))
    return records


def image_id(index: int) -> str:
    return f"img{index:05d}"


def synth_images(ids: list[int], seed: int, canvas: int = 64) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for idx in ids:
        image, labels = generate_scene(random_scene_spec(int(np.uint32(seed * 1_000_003 + idx)), canvas))
        out[image_id(idx)] = (image, labels)
    return out


def make_splits(
    n_images: int,
    seed: int = 0,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    max_pairs: tuple[int, int, int] = (3000, 300, 300),
    canvas: int = 64,
):
    """Partition images into disjoint train/val/test pools and pair within each.

    Returns ``(manifests, images)`` where ``images`` maps id to
    ``(image, labels)``.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    sizes = [int(round(r * n_images)) for r in ratios]
    sizes[0] = n_images - sizes[1] - sizes[2]
    for name, ratio, size in zip(SPLITS, ratios, sizes):
        if ratio > 0 and size < 2:
            raise ValueError(f"{name} pool has {size} image(s); at least 2 are needed to form a pair")
    order = _rng(seed, 0x5B1).permutation(n_images)
    images = synth_images(list(range(n_images)), seed, canvas)
    manifests = []
    start = 0
    for k, (name, size) in enumerate(zip(SPLITS, sizes)):
        pool = sorted(int(i) for i in order[start : start + size])
        start += size
        ids = [image_id(i) for i in pool]
        recs = sample_pairs([(i, images[i][1]) for i in ids], _rng(seed, 0x9A1, k), max_pairs[k]) if size >= 2 else []
        manifests.append(Manifest(name, recs, seed, GENERATOR_VERSION, ids))
    return manifests, images


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class PairSample:
    image_a: np.ndarray  # (3, S, S) float32
    image_b: np.ndarray
    mask_a: np.ndarray  # (S, S) {0, 1}
    mask_b: np.ndarray


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def augment_pair(sample: PairSample, rng: np.random.Generator, max_jitter: float = 0.1) -> PairSample:
    """Random horizontal flip (image and mask together) and brightness shift (image only)."""
    out = []
    for img, mask in ((sample.image_a, sample.mask_a), (sample.image_b, sample.mask_b)):
        if rng.random() < 0.5:
            img, mask = hflip(img), hflip(mask)
        delta = rng.uniform(-max_jitter, max_jitter)
        img = np.clip(img + np.float32(delta), 0.0, 1.0).astype(np.float32)
        out.append((img, mask))
    (ia, ma), (ib, mb) = out
    return PairSample(ia, ib, ma, mb)


# ---------------------------------------------------------------------------
# groups for multi-image co-segmentation


def make_group(seed: int, n_images: int, common_class: int, n_outliers: int = 0, canvas: int = 64):
    """Images that all contain ``common_class`` plus optional outliers that do not.

    Returns ``[(id, image, labels, gt_mask)]``; the ground truth marks only
    the common class.
    """
    rng = _rng(seed, 0x6A0)
    others = [c for c in CLASSES if c != common_class]
    group = []
    for n in range(n_images + n_outliers):
        outlier = n >= n_images
        extra = rng.choice(others, size=int(rng.integers(0 if not outlier else 1, 3)), replace=False)
        classes = [int(c) for c in extra] if outlier else [common_class] + [int(c) for c in extra]
        objs = [_random_object(rng, c) for c in classes]
        spec = SceneSpec(int(rng.integers(2**31)), canvas, objs)
        image, labels = generate_scene(spec)
        group.append((f"g{seed}_{n:03d}", image, labels, common_mask(labels, {common_class})))
    return group


# ---------------------------------------------------------------------------
# on-disk format: 8-bit PNGs plus one tab-separated manifest per split


def save_png(path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, optimize=False)


def load_image(path) -> np.ndarray:
    """RGB PNG -> (3, H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def load_labels(path) -> np.ndarray:
    """Class-id label image, stored as raw ids in a greyscale PNG."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L")).copy()


def save_mask(path, mask: np.ndarray) -> None:
    save_png(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def format_manifest_line(split: str, rec: PairRecord) -> str:
    classes = ",".join(str(c) for c in sorted(rec.common_classes))
    return "\t".join([split, rec.id_a, rec.id_b, classes, rec.mask_a_path or "", rec.mask_b_path or ""])


def write_dataset(out_dir, manifests: list[Manifest], images) -> None:
    out = Path(out_dir)
    for sub in ("images", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for mid, (image, labels) in sorted(images.items()):
        save_png(out / "images" / f"{mid}.png", np.ascontiguousarray(to_uint8(image).transpose(1, 2, 0)))
        save_png(out / "labels" / f"{mid}.png", labels)
    for man in manifests:
        mdir = out / "masks" / man.split
        mdir.mkdir(parents=True, exist_ok=True)
        lines = [f"# docs-manifest split={man.split} seed={man.seed} version={man.version}"]
        for rec in man.records:
            rec.mask_a_path = f"masks/{man.split}/{rec.key}_A.png"
            rec.mask_b_path = f"masks/{man.split}/{rec.key}_B.png"
            save_mask(out / rec.mask_a_path, rec.mask_a)
            save_mask(out / rec.mask_b_path, rec.mask_b)
            lines.append(format_manifest_line(man.split, rec))
        (out / f"{man.split}.tsv").write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    split, seed, version = path.stem, 0, GENERATOR_VERSION
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            meta = dict(tok.split("=", 1) for tok in line[1:].split() if "=" in tok)
            seed = int(meta.get("seed", seed))
            version = int(meta.get("version", version))
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ValueError(f"{path}: malformed manifest line {line!r}")
        split, ia, ib, classes, pa, pb = fields
        common = frozenset(int(c) for c in classes.split(",") if c)
        records.append(PairRecord(ia, ib, common, mask_a_path=pa, mask_b_path=pb))
    return Manifest(split, records, seed, version)


def load_split(data_dir, split: str):
    """Read a split into memory: ``(manifest, images by id, masks by (key, side))``."""
    data_dir = Path(data_dir)
    man = read_manifest(data_dir / f"{split}.tsv")
    ids = sorted({r.id_a for r in man.records} | {r.id_b for r in man.records})
    images = {i: load_image(data_dir / "images" / f"{i}.png") for i in ids}
    for rec in man.records:
        rec.mask_a = load_mask(data_dir / rec.mask_a_path)
        rec.mask_b = load_mask(data_dir / rec.mask_b_path)
    return man, images


def is_nonempty_dir(path) -> bool:
    return os.path.isdir(path) and any(os.scandir(path))
