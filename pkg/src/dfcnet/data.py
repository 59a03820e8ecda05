"""DeepGlobe-style image/mask loading, per-task augmentation and batch streams.

On-disk layout::

    <root>/land/images/<stem>.png   RGB image
    <root>/land/masks/<stem>.png    RGB-coded class mask
    <root>/road/images/<stem>.png
    <root>/road/masks/<stem>.png    white road on black background
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .model import IGNORE_INDEX, merge_batches
from .tensor import resize_bilinear

TASK_IDS = {"land": 0, "road": 1}


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# palette


@dataclass
class ClassPalette:
    names: list
    colors: list
    ignored: list

    def __post_init__(self):
        if len({tuple(c) for c in self.colors}) != len(self.colors):
            raise DataError("palette colours must be unique")
        if sum(self.ignored) > 1:
            raise DataError("at most one palette entry may be ignored")
        self.colors = [tuple(int(v) for v in c) for c in self.colors]

    @classmethod
    def from_entries(cls, entries):
        return cls([e["name"] for e in entries], [tuple(e["rgb"]) for e in entries],
                   [bool(e.get("ignored", False)) for e in entries])

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            doc = yaml.safe_load(fh)
        return cls.from_entries(doc["classes"] if isinstance(doc, dict) else doc)

    def to_entries(self):
        return [{"name": n, "rgb": list(c), "ignored": i} for n, c, i in zip(self.names, self.colors, self.ignored)]

    @property
    def class_names(self):
        return [n for n, i in zip(self.names, self.ignored) if not i]

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def has_ignored(self):
        return any(self.ignored)

    def _indices(self):
        # evaluated classes get 0..K-1 in palette order; the ignored entry maps to IGNORE_INDEX
        out, k = [], 0
        for ig in self.ignored:
            if ig:
                out.append(IGNORE_INDEX)
            else:
                out.append(k)
                k += 1
        return out

    def decode(self, rgb):
        """RGB mask (H, W, 3) -> index map (H, W)."""
        rgb = np.asarray(rgb)
        codes = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
        keys = np.array([(r << 16) | (g << 8) | b for r, g, b in self.colors], dtype=np.int64)
        order = np.argsort(keys)
        sorted_keys = keys[order]
        pos = np.clip(np.searchsorted(sorted_keys, codes), 0, len(keys) - 1)
        matched = sorted_keys[pos] == codes
        lut = np.array(self._indices(), dtype=np.int64)[order]
        out = np.where(matched, lut[pos], IGNORE_INDEX)
        if not matched.all():
            if not self.has_ignored:
                bad = codes[~matched]
                first = int(bad[0])
                rgb_bad = ((first >> 16) & 255, (first >> 8) & 255, first & 255)
                raise DataError(f"mask colour {rgb_bad} not in palette ({bad.size} pixels unmatched)")
        return out.astype(np.uint8)

    def encode(self, index):
        """Index map -> RGB mask; IGNORE_INDEX uses the ignored colour (black if none)."""
        index = np.asarray(index)
        out = np.zeros(index.shape + (3,), dtype=np.uint8)
        for idx, color in zip(self._indices(), self.colors):
            out[index == idx] = color
        return out


DEEPGLOBE_ENTRIES = [
    {"name": "urban", "rgb": [0, 255, 255]},
    {"name": "agriculture", "rgb": [255, 255, 0]},
    {"name": "rangeland", "rgb": [255, 0, 255]},
    {"name": "forest", "rgb": [0, 255, 0]},
    {"name": "water", "rgb": [0, 0, 255]},
    {"name": "barren", "rgb": [255, 255, 255]},
    {"name": "unknown", "rgb": [0, 0, 0], "ignored": True},
]


def deepglobe_palette(num_classes=6):
    """The first ``num_classes`` DeepGlobe land classes plus the ignored 'unknown'."""
    if not 2 <= num_classes <= 6:
        raise DataError("DeepGlobe palette supports 2..6 land classes")
    return ClassPalette.from_entries(DEEPGLOBE_ENTRIES[:num_classes] + DEEPGLOBE_ENTRIES[-1:])


# ---------------------------------------------------------------------------
# records and loading


@dataclass(frozen=True)
class SampleRecord:
    image: Path
    mask: Path
    task: str


def list_records(root, task):
    root = Path(root)
    img_dir, mask_dir = root / task / "images", root / task / "masks"
    if not img_dir.is_dir():
        return []
    records = []
    for img in sorted(img_dir.glob("*.png")):
        mask = mask_dir / img.name
        if not mask.exists():
            raise DataError(f"{img}: no matching mask {mask}")
        records.append(SampleRecord(img, mask, task))
    return records


def split_records(records, eval_count, seed):
    """Seeded split into (train, eval)."""
    if eval_count <= 0:
        return list(records), []
    if eval_count >= len(records):
        raise DataError(f"cannot hold out {eval_count} of {len(records)} records")
    order = np.random.default_rng([seed, 7]).permutation(len(records))
    held = set(order[:eval_count].tolist())
    train = [r for i, r in enumerate(records) if i not in held]
    evl = [r for i, r in enumerate(records) if i in held]
    return train, evl


def read_image(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def road_mask_to_index(mask):
    """Grayscale or RGB road annotation -> {0, 1}, thresholded at 128."""
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask.mean(axis=2)
    return (mask >= 128).astype(np.uint8)


def load_sample(record, palette=None):
    """Returns (image float32 (3, H, W) in [0, 1], target uint8 (H, W))."""
    img = read_image(record.image)
    try:
        with Image.open(record.mask) as im:
            raw = np.asarray(im.convert("RGB") if record.task == "land" else im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {record.mask}: {exc}") from exc
    if raw.shape[:2] != img.shape[:2]:
        raise DataError(f"{record.image}: image {img.shape[:2]} and mask {raw.shape[:2]} differ")
    if record.task == "land":
        if palette is None:
            raise DataError("land masks need a palette")
        target = palette.decode(raw)
    else:
        target = road_mask_to_index(raw)
    return img.transpose(2, 0, 1).astype(np.float32) / 255.0, target


def normalize_image(image, mean=0.5, std=0.25):
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float32), (3,))[:, None, None]
    std = np.broadcast_to(np.asarray(std, dtype=np.float32), (3,))[:, None, None]
    return ((image - mean) / std).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    resize_range: dict = field(default_factory=lambda: {"land": (0.8, 1.25), "road": (0.5, 1.5)})
    crop_size: int = 64
    horizontal_flip: bool = True

    def __post_init__(self):
        self.resize_range = {k: tuple(float(x) for x in v) for k, v in self.resize_range.items()}
        for task, (lo, hi) in self.resize_range.items():
            if not 0 < lo <= hi:
                raise DataError(f"{task}: invalid resize range ({lo}, {hi})")
        if self.crop_size < 1:
            raise DataError("crop_size must be >= 1")


def resize_nearest(target, out_h, out_w):
    h, w = target.shape
    if (h, w) == (out_h, out_w):
        return target.copy()
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return target[ys[:, None], xs[None, :]]


def random_resize_crop(image, target, cfg, task, rng):
    """Random scale from the task's range, pad if needed, random crop, optional flip."""
    lo, hi = cfg.resize_range[task]
    s = rng.uniform(lo, hi) if hi > lo else lo
    _, h, w = image.shape
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    image = resize_bilinear(image, nh, nw).astype(np.float32)
    target = resize_nearest(target, nh, nw)
    c = cfg.crop_size
    if nh < c or nw < c:
        ph, pw = max(0, c - nh), max(0, c - nw)
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        target = np.pad(target, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)
        nh, nw = target.shape
    y0 = int(rng.integers(0, nh - c + 1))
    x0 = int(rng.integers(0, nw - c + 1))
    image = image[:, y0:y0 + c, x0:x0 + c]
    target = target[y0:y0 + c, x0:x0 + c]
    if cfg.horizontal_flip and rng.random() < 0.5:
        image = image[:, :, ::-1]
        target = target[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(target)


# ---------------------------------------------------------------------------
# batch stream


class SampleCache:
    def __init__(self, palette):
        self.palette = palette
        self._cache = {}

    def get(self, record):
        if record not in self._cache:
            self._cache[record] = load_sample(record, self.palette)
        return self._cache[record]


def _epoch_order(n, seed, task, epoch):
    return np.random.default_rng([seed, TASK_IDS[task], epoch]).permutation(n)


def batch_indices(n, batch, seed, task, step):
    """Record indices for ``step``; a pure function of its arguments."""
    per_epoch = n // batch
    epoch, k = divmod(step, per_epoch)
    order = _epoch_order(n, seed, task, epoch)
    return order[k * batch:(k + 1) * batch]


def steps_per_epoch(n_land, land_batch):
    return n_land // land_batch


def make_batch(step, land, road, cache, cfg, batch_sizes, seed, norm=(0.5, 0.25)):
    parts = {}
    for task, recs in (("land", land), ("road", road)):
        b = batch_sizes.get(task, 0)
        if b == 0 or not recs:
            continue
        imgs, tgs = [], []
        for slot, idx in enumerate(batch_indices(len(recs), b, seed, task, step)):
            image, target = cache.get(recs[idx])
            rng = np.random.default_rng([seed, TASK_IDS[task], step, slot, 99])
            image, target = random_resize_crop(image, target, cfg, task, rng)
            imgs.append(normalize_image(image, *norm))
            tgs.append(target)
        parts[task] = (np.stack(imgs), np.stack(tgs))
    return merge_batches(parts.get("land"), parts.get("road"))


def make_epoch_stream(land, road, cfg, batch_sizes, seed, start_step=0, palette=None, cache=None, norm=(0.5, 0.25)):
    """Endless iterator of MultiTaskBatch; batch ``k`` depends only on (records, cfg, seed, k).

    Land records are reshuffled every land epoch; road records recycle on
    their own epoch length.
    """
    if not land:
        raise DataError("land dataset is empty")
    for task, recs in (("land", land), ("road", road)):
        b = batch_sizes.get(task, 0)
        if b and len(recs) < b:
            raise DataError(f"{task}: batch size {b} exceeds {len(recs)} records")
    cache = cache or SampleCache(palette)
    step = start_step
    while True:
        yield make_batch(step, land, road, cache, cfg, batch_sizes, seed, norm)
        step += 1


# ---------------------------------------------------------------------------
# writing


def save_rgb(path, rgb):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format="PNG")


def save_gray(path, gray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(gray, dtype=np.uint8)).save(path, format="PNG")
