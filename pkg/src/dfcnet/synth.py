"""Seeded synthetic land-cover scenes with correlated roads.

Scenes are Voronoi partitions whose cells carry a land class and a
class-specific colour texture.  Roads run along boundaries between the
designated class pairs and form a dense grid inside urban cells, so road
pixels concentrate on class boundaries and in urban areas by construction.
Roads are painted into the image but keep the underlying land label.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D

# mean colour and texture amplitude per land class, in DeepGlobe palette order
CLASS_LOOKS = [
    ((128, 118, 104), 14.0),  # urban
    ((132, 124, 100), 12.0),  # agriculture
    ((124, 122, 102), 16.0),  # rangeland
    ((64, 96, 58), 12.0),     # forest
    ((40, 62, 120), 6.0),     # water
    ((170, 160, 140), 10.0),  # barren
]
ROAD_COLOR = np.array([88, 86, 84], dtype=np.float64)


@dataclass
class SyntheticConfig:
    num_images: int = 128
    image_size: int = 64
    num_classes: int = 4
    cells: tuple = (5, 9)
    class_weights: list = None
    road_density: float = 1.0
    road_pairs: list = field(default_factory=lambda: [("urban", "agriculture"), ("urban", "rangeland"),
                                                      ("agriculture", "rangeland")])
    urban_grid_spacing: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise D.DataError("num_images must be >= 1")
        if self.image_size < 8:
            raise D.DataError("image_size must be >= 8")
        if not 2 <= self.num_classes <= len(CLASS_LOOKS):
            raise D.DataError(f"num_classes must be in 2..{len(CLASS_LOOKS)}")
        if not 0 <= self.road_density <= 1:
            raise D.DataError("road_density must be in [0, 1]")
        self.cells = tuple(self.cells)
        self.road_pairs = [tuple(p) for p in self.road_pairs]


def class_boundaries(labels):
    """Pixels whose 4-neighbourhood contains a different label."""
    b = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:] != labels[:-1]
    dh = labels[:, 1:] != labels[:, :-1]
    b[1:] |= dv
    b[:-1] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def dilate(mask, radius):
    """Square (Chebyshev) dilation."""
    out = mask.copy()
    for _ in range(radius):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def boundary_distance_mask(labels, radius):
    return dilate(class_boundaries(labels), radius)


def _voronoi(size, n_cells, rng):
    pts = rng.uniform(0, size, size=(n_cells, 2))
    yy, xx = np.mgrid[0:size, 0:size]
    d = (yy[..., None] + 0.5 - pts[:, 0]) ** 2 + (xx[..., None] + 0.5 - pts[:, 1]) ** 2
    return d.argmin(axis=2)


def generate_scene(cfg, rng, names):
    """Returns (rgb uint8 (S, S, 3), land index map (S, S), road mask bool (S, S))."""
    s = cfg.image_size
    n_cells = int(rng.integers(cfg.cells[0], cfg.cells[1] + 1))
    cell = _voronoi(s, n_cells, rng)
    k = cfg.num_classes
    weights = np.asarray(cfg.class_weights if cfg.class_weights else np.ones(k), dtype=np.float64)
    cell_class = rng.choice(k, size=n_cells, p=weights / weights.sum())
    land = cell_class[cell]

    road = np.zeros((s, s), dtype=bool)
    if cfg.road_density > 0:
        index = {n: i for i, n in enumerate(names)}
        pairs = {(index[a], index[b]) for a, b in cfg.road_pairs if a in index and b in index}
        pairs |= {(b, a) for a, b in pairs}
        # roads along boundaries between designated class pairs
        for (dy, dx) in ((1, 0), (0, 1)):
            a = land[: s - dy, : s - dx]
            b = land[dy:, dx:]
            hit = np.zeros((s - dy, s - dx), dtype=bool)
            for p, q in pairs:
                hit |= (a == p) & (b == q)
            keep = rng.random(n_cells) < cfg.road_density
            hit &= keep[cell[: s - dy, : s - dx]]
            road[: s - dy, : s - dx] |= hit
        road = dilate(road, 1) if road.any() else road
        # dense grid inside urban cells
        if "urban" in index:
            spacing = max(3, int(round(cfg.urban_grid_spacing / cfg.road_density)))
            oy, ox = rng.integers(0, spacing, size=2)
            yy, xx = np.mgrid[0:s, 0:s]
            grid = ((yy - oy) % spacing == 0) | ((xx - ox) % spacing == 0)
            road |= grid & (land == index["urban"])

    img = np.zeros((s, s, 3), dtype=np.float64)
    for c in range(k):
        color, amp = CLASS_LOOKS[c]
        m = land == c
        if not m.any():
            continue
        noise = rng.normal(0, amp, size=(s, s, 3))
        img[m] = np.asarray(color, dtype=np.float64) + noise[m]
    # per-cell brightness jitter blurs the colour cue between similar classes
    img *= rng.uniform(0.9, 1.1, size=n_cells)[cell][..., None]
    img[road] = ROAD_COLOR + rng.normal(0, 6, size=(int(road.sum()), 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8), land.astype(np.uint8), road


def synth_generate(cfg, out_dir, palette=None):
    """Write land and road datasets under ``out_dir``; returns a summary dict.

    Land and road samples are independent scenes drawn from separate seed
    streams, mirroring the two separately collected datasets.
    """
    out = Path(out_dir)
    palette = palette or D.deepglobe_palette(cfg.num_classes)
    names = palette.class_names
    if len(names) < cfg.num_classes:
        raise D.DataError(f"palette has {len(names)} classes, config asks for {cfg.num_classes}")
    class_pixels = np.zeros(cfg.num_classes, dtype=np.int64)
    road_pixels = 0
    total = 0
    for task in ("land", "road"):
        for i in range(cfg.num_images):
            rng = np.random.default_rng([cfg.seed, D.TASK_IDS[task], i])
            rgb, land, road = generate_scene(cfg, rng, names)
            stem = f"{task}_{i:05d}.png"
            D.save_rgb(out / task / "images" / stem, rgb)
            if task == "land":
                D.save_rgb(out / task / "masks" / stem, palette.encode(land))
                class_pixels += np.bincount(land.reshape(-1), minlength=cfg.num_classes)
                total += land.size
            else:
                D.save_gray(out / task / "masks" / stem, road.astype(np.uint8) * 255)
                road_pixels += int(road.sum())
    return {
        "land_images": cfg.num_images,
        "road_images": cfg.num_images,
        "class_share": {n: float(c) / total for n, c in zip(names, class_pixels)},
        "road_share": road_pixels / float(cfg.num_images * cfg.image_size ** 2),
    }
