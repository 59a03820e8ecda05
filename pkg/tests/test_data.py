import filecmp
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from dfcnet import config as CFG
from dfcnet import data as D
from dfcnet import synth as S
from dfcnet.model import IGNORE_INDEX

PAL = D.deepglobe_palette(4)


def _write_pair(root, task, stem, rgb, mask):
    D.save_rgb(Path(root) / task / "images" / f"{stem}.png", rgb)
    path = Path(root) / task / "masks" / f"{stem}.png"
    (D.save_rgb if mask.ndim == 3 else D.save_gray)(path, mask)


# ---------------------------------------------------------------------------
# palette


def test_decode_constant_mask():
    mask = np.zeros((3, 4, 3), np.uint8) + np.array([0, 255, 0], np.uint8)
    np.testing.assert_array_equal(PAL.decode(mask), np.full((3, 4), 3))


def test_decode_two_colour_hand_mapping():
    cyan, yellow = [0, 255, 255], [255, 255, 0]
    mask = np.array([[cyan, yellow], [yellow, yellow]], np.uint8)
    np.testing.assert_array_equal(PAL.decode(mask), [[0, 1], [1, 1]])


def test_unlisted_colour_maps_to_ignored_or_errors():
    mask = np.array([[[0, 255, 255], [1, 2, 3]], [[1, 2, 3], [0, 0, 0]]], np.uint8)
    np.testing.assert_array_equal(PAL.decode(mask), [[0, IGNORE_INDEX], [IGNORE_INDEX, IGNORE_INDEX]])
    strict = D.ClassPalette.from_entries(D.DEEPGLOBE_ENTRIES[:4])
    with pytest.raises(D.DataError, match=r"\(1, 2, 3\).*2 pixels"):
        strict.decode(np.array([[[0, 255, 255], [1, 2, 3], [1, 2, 3]]], np.uint8))


def test_palette_invariants():
    with pytest.raises(D.DataError, match="unique"):
        D.ClassPalette(["a", "b"], [(1, 1, 1), (1, 1, 1)], [False, False])
    with pytest.raises(D.DataError, match="one"):
        D.ClassPalette(["a", "b"], [(1, 1, 1), (2, 2, 2)], [True, True])
    assert PAL.num_classes == 4 and PAL.class_names == ["urban", "agriculture", "rangeland", "forest"]


def test_shipped_palette_file():
    full = D.ClassPalette.from_file(CFG.CONFIG_DIR / "deepglobe_palette.yaml")
    assert full.num_classes == 6 and full.has_ignored
    assert full.to_entries() == D.ClassPalette.from_entries(D.DEEPGLOBE_ENTRIES).to_entries()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_encode_decode_round_trip(h, w, seed):
    r = np.random.default_rng(seed)
    colors = np.array(PAL.colors, np.uint8)
    mask = colors[r.integers(0, len(colors), size=(h, w))]
    assert np.array_equal(PAL.encode(PAL.decode(mask)), mask)


# ---------------------------------------------------------------------------
# loading


def test_load_sample_land_and_road(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (6, 5, 3)).astype(np.uint8)
    mask = np.zeros((6, 5, 3), np.uint8) + np.array([255, 0, 255], np.uint8)
    _write_pair(tmp_path, "land", "a", rgb, mask)
    road = np.zeros((6, 5), np.uint8)
    road[2, :] = 200
    road[3, :] = 100
    _write_pair(tmp_path, "road", "a", rgb, road)
    (rec,) = D.list_records(tmp_path, "land")
    image, target = D.load_sample(rec, PAL)
    assert image.shape == (3, 6, 5) and image.dtype == np.float32
    np.testing.assert_allclose(image, rgb.transpose(2, 0, 1) / 255.0, atol=1e-7)
    assert np.all(target == 2)
    (rec,) = D.list_records(tmp_path, "road")
    _, target = D.load_sample(rec)
    assert target[2].all() and not target[3].any() and target.sum() == 5


def test_load_sample_errors(tmp_path):
    _write_pair(tmp_path, "land", "a", np.zeros((4, 4, 3), np.uint8), np.zeros((5, 4, 3), np.uint8))
    (rec,) = D.list_records(tmp_path, "land")
    with pytest.raises(D.DataError, match="differ"):
        D.load_sample(rec, PAL)
    (tmp_path / "land" / "images" / "b.png").write_bytes(b"not a png")
    (tmp_path / "land" / "masks" / "b.png").write_bytes(b"not a png")
    with pytest.raises(D.DataError, match="decode"):
        D.load_sample(D.list_records(tmp_path, "land")[1], PAL)


def test_missing_mask_is_reported(tmp_path):
    D.save_rgb(tmp_path / "land" / "images" / "x.png", np.zeros((2, 2, 3), np.uint8))
    (tmp_path / "land" / "masks").mkdir(parents=True)
    with pytest.raises(D.DataError, match="mask"):
        D.list_records(tmp_path, "land")


def test_split_records_seeded():
    recs = [D.SampleRecord(Path(f"{i}.png"), Path(f"{i}.png"), "land") for i in range(20)]
    a = D.split_records(recs, 5, 1)
    assert a == D.split_records(recs, 5, 1)
    assert len(a[0]) == 15 and len(a[1]) == 5 and not set(a[0]) & set(a[1])
    assert D.split_records(recs, 0, 1) == (recs, [])


# ---------------------------------------------------------------------------
# augmentation


def test_identity_augmentation():
    cfg = D.AugmentConfig({"land": (1, 1)}, 8, False)
    r = np.random.default_rng(0)
    img = r.standard_normal((3, 8, 8)).astype(np.float32)
    tg = r.integers(0, 4, (8, 8)).astype(np.uint8)
    out_i, out_t = D.random_resize_crop(img, tg, cfg, "land", np.random.default_rng(1))
    assert np.array_equal(out_i, img) and np.array_equal(out_t, tg)


def test_resize_ranges_per_task_from_config():
    cfg = CFG.augment_from(CFG.load_config())
    assert cfg.resize_range == {"land": (0.8, 1.25), "road": (0.5, 1.5)}


def test_augmentation_deterministic_for_seed():
    cfg = D.AugmentConfig(crop_size=16)
    r = np.random.default_rng(0)
    img, tg = r.standard_normal((3, 24, 24)).astype(np.float32), r.integers(0, 4, (24, 24)).astype(np.uint8)
    a = [D.random_resize_crop(img, tg, cfg, "road", np.random.default_rng(s)) for s in range(5)]
    b = [D.random_resize_crop(img, tg, cfg, "road", np.random.default_rng(s)) for s in range(5)]
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))


def test_small_image_padded_with_ignored():
    cfg = D.AugmentConfig({"road": (0.5, 0.5)}, 16, False)
    img, tg = np.ones((3, 16, 16), np.float32), np.ones((16, 16), np.uint8)
    out_i, out_t = D.random_resize_crop(img, tg, cfg, "road", np.random.default_rng(0))
    assert out_i.shape == (3, 16, 16) and out_t.shape == (16, 16)
    assert (out_t == IGNORE_INDEX).sum() == 16 * 16 - 8 * 8
    assert out_i[:, out_t == IGNORE_INDEX].max() == 0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.3, 2.0), st.floats(0.0, 1.0), st.integers(4, 20), st.integers(0, 2 ** 31))
def test_augmentation_preserves_label_support(lo, span, crop, seed):
    r = np.random.default_rng(seed)
    tg = r.integers(0, 3, (20, 20)).astype(np.uint8)
    img = r.standard_normal((3, 20, 20)).astype(np.float32)
    cfg = D.AugmentConfig({"land": (lo, lo + span)}, crop, True)
    _, out = D.random_resize_crop(img, tg, cfg, "land", r)
    assert set(np.unique(out)) <= set(np.unique(tg)) | {IGNORE_INDEX}


def test_augment_config_validation():
    with pytest.raises(D.DataError):
        D.AugmentConfig({"land": (1.2, 1.0)})
    with pytest.raises(D.DataError):
        D.AugmentConfig(crop_size=0)


# ---------------------------------------------------------------------------
# synthetic generator


def test_synth_byte_identical(tmp_path):
    cfg = S.SyntheticConfig(num_images=3, seed=11)
    s1 = S.synth_generate(cfg, tmp_path / "a")
    s2 = S.synth_generate(cfg, tmp_path / "b")
    assert s1 == s2
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(files) == 12
    for f in files:
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)


def test_synth_layout_is_loadable(tiny_corpus):
    land, road = D.list_records(tiny_corpus, "land"), D.list_records(tiny_corpus, "road")
    assert len(land) == len(road) == 12
    image, target = D.load_sample(land[0], PAL)
    assert image.shape == (3, 64, 64) and target.max() < 4


def test_zero_road_density_gives_empty_masks(tmp_path):
    S.synth_generate(S.SyntheticConfig(num_images=3, road_density=0.0, seed=2), tmp_path)
    for rec in D.list_records(tmp_path, "road"):
        _, t = D.load_sample(rec)
        assert not t.any()


def _scenes(n, **kw):
    cfg = S.SyntheticConfig(**kw)
    names = PAL.class_names
    for seed in range(n):
        yield S.generate_scene(cfg, np.random.default_rng([seed, 1, 0]), names)


def test_roads_denser_in_urban_than_forest_over_20_seeds():
    urban = [0, 0]
    forest = [0, 0]
    for _, land, road in _scenes(20):
        urban[0] += road[land == 0].sum()
        urban[1] += (land == 0).sum()
        forest[0] += road[land == 3].sum()
        forest[1] += (land == 3).sum()
    assert urban[0] / urban[1] > forest[0] / max(forest[1], 1)


def test_roads_concentrate_on_boundaries_over_20_seeds():
    for seed, (_, land, road) in enumerate(_scenes(20)):
        near = S.boundary_distance_mask(land, 3)
        if not road.any():
            continue
        assert road[near].sum() / road.sum() > near.mean(), seed


def test_synth_config_validation():
    with pytest.raises(D.DataError):
        S.SyntheticConfig(num_images=0)
    with pytest.raises(D.DataError):
        S.SyntheticConfig(road_density=2)


# ---------------------------------------------------------------------------
# batch stream


def _records(n, task):
    return [D.SampleRecord(Path(f"{task}{i}"), Path(f"{task}{i}"), task) for i in range(n)]


class FakeCache:
    def get(self, rec):
        i = int(str(rec.image).lstrip("landroad"))
        img = np.full((3, 8, 8), i / 10, np.float32)
        tg = np.full((8, 8), i % 2 if rec.task == "road" else i % 4, np.uint8)
        return img, tg


def test_stream_counts_and_epoch_length():
    cfg = D.AugmentConfig({"land": (1, 1), "road": (1, 1)}, 8, False)
    land, road = _records(10, "land"), _records(10, "road")
    assert D.steps_per_epoch(len(land), 2) == 5
    stream = D.make_epoch_stream(land, road, cfg, {"land": 2, "road": 2}, seed=0, cache=FakeCache())
    seen = []
    for _ in range(5):
        b = next(stream)
        assert b.size == 4 and b.boundaries == {"land": (0, 2), "road": (2, 4)}
        seen += list(np.round(b.images[:2, 0, 0, 0] * 0.25 + 0.5, 3))
    assert len(set(seen)) == 10  # one land epoch visits every record once


def test_stream_single_task_and_determinism():
    cfg = D.AugmentConfig(crop_size=8)
    land, road = _records(6, "land"), _records(4, "road")
    s1 = D.make_epoch_stream(land, road, cfg, {"land": 2, "road": 0}, seed=3, cache=FakeCache())
    assert next(s1).boundaries == {"land": (0, 2)}
    a = D.make_epoch_stream(land, road, cfg, {"land": 2, "road": 2}, seed=3, cache=FakeCache())
    b = D.make_epoch_stream(land, road, cfg, {"land": 2, "road": 2}, seed=3, cache=FakeCache(), start_step=4)
    batches = [next(a) for _ in range(7)]
    later = [next(b) for _ in range(3)]
    for x, y in zip(batches[4:], later):
        assert np.array_equal(x.images, y.images)
        assert all(np.array_equal(x.targets[t], y.targets[t]) for t in x.targets)


def test_stream_errors():
    cfg = D.AugmentConfig(crop_size=8)
    with pytest.raises(D.DataError, match="empty"):
        next(D.make_epoch_stream([], [], cfg, {"land": 2}, 0))
    with pytest.raises(D.DataError, match="exceeds"):
        next(D.make_epoch_stream(_records(1, "land"), [], cfg, {"land": 2}, 0))


def test_normalize_image():
    out = D.normalize_image(np.full((3, 2, 2), 0.75, np.float32))
    np.testing.assert_allclose(out, 1.0)
