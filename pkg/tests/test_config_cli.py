import json

import numpy as np
import pytest
import yaml
from PIL import Image

from dfcnet import cli
from dfcnet import config as CFG
from dfcnet import data as D
from dfcnet.cli import main


def test_defaults_and_override_order(tmp_path, monkeypatch):
    monkeypatch.delenv("DFCNET_OUT", raising=False)
    monkeypatch.delenv("DFCNET_THREADS", raising=False)
    f = tmp_path / "c.yaml"
    f.write_text("out: from_file\ntrain:\n  iterations: 7\n")
    cfg = CFG.load_config(f)
    assert cfg["out"] == "from_file" and cfg["train"]["iterations"] == 7
    assert cfg["train"]["land_batch"] == CFG.DEFAULTS["train"]["land_batch"]
    monkeypatch.setenv("DFCNET_OUT", "from_env")
    monkeypatch.setenv("DFCNET_THREADS", "3")
    cfg = CFG.load_config(f)
    assert cfg["out"] == "from_env" and cfg["threads"] == 3
    cfg = CFG.load_config(f, {"out": "from_cli"})
    assert cfg["out"] == "from_cli"


def test_config_errors(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("train:\n  iteratons: 7\n")
    with pytest.raises(CFG.ConfigError, match="train.iteratons"):
        CFG.load_config(f)
    f.write_text("train: [unclosed\n")
    with pytest.raises(CFG.ConfigError, match="invalid YAML"):
        CFG.load_config(f)
    with pytest.raises(CFG.ConfigError, match="cannot read"):
        CFG.load_config(tmp_path / "missing.yaml")
    with pytest.raises(CFG.ConfigError, match="preset"):
        CFG.load_config(overrides={"model": {"preset": "nope"}})
    with pytest.raises(CFG.ConfigError, match="overlap"):
        CFG.load_config(overrides={"inference": {"tile": 8, "overlap": 8}})


def test_materialize_round_trip(tmp_path):
    cfg = CFG.load_config(overrides={"seed": 9})
    path = CFG.materialize(cfg, tmp_path)
    assert CFG.load_config(path) == cfg


def test_shipped_configs_load():
    for name in ("desk.yaml", "paper.yaml"):
        cfg = CFG.load_config(CFG.CONFIG_DIR / name)
        CFG.model_spec_from(cfg)
    paper = CFG.load_config(CFG.CONFIG_DIR / "paper.yaml")
    pal = CFG.palette_from(paper)
    assert pal.num_classes == 6 and len(pal.class_names) == 6


# ---------------------------------------------------------------------------
# command line


@pytest.fixture
def run_cfg(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--num-images", "6", "--seed", "2"]) == 0
    cfg = {"seed": 1, "data": {"root": str(data), "eval_count": 2},
           "augment": {"crop_size": 32},
           "train": {"iterations": 2, "land_batch": 2, "road_batch": 2, "log_interval": 1,
                     "eval_interval": 100, "checkpoint_interval": 2},
           "inference": {"tile": 32, "overlap": 16, "scales": [1.0]}}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, data


@pytest.fixture
def trained(run_cfg, tmp_path):
    path, data = run_cfg
    out = tmp_path / "run"
    assert main(["train", "--config", str(path), "--out", str(out)]) == 0
    return path, data, out / "ckpt_000002.ckpt"


def test_synth_reproducible_summary(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--num-images", "3", "--seed", "5"]) == 0
    a = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert a == json.loads((tmp_path / "b" / "summary.json").read_text())
    assert a["land_images"] == a["road_images"] == 3
    assert abs(sum(a["class_share"].values()) - 1) < 1e-9
    for f in sorted((tmp_path / "a").rglob("*.png")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    assert "road" in capsys.readouterr().out


def test_synth_zero_images_is_validation_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--num-images", "0"]) == 1
    assert "num_images" in capsys.readouterr().err


def test_train_writes_config_log_and_checkpoints(trained):
    _, _, ckpt = trained
    out = ckpt.parent
    assert ckpt.is_file() and (out / "config.yaml").is_file()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[-1])["iter"] == 2


def test_eval_report(trained, tmp_path, capsys):
    path, _, ckpt = trained
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(path), "--out", str(out), "--ckpt", str(ckpt)]) == 0
    rep = json.loads((out / "eval_report.json").read_text())
    assert [c["name"] for c in rep["classes"]] == D.deepglobe_palette(4).class_names
    ious = [c["iou"] for c in rep["classes"] if c["iou"] is not None]
    assert rep["miou"] == pytest.approx(np.mean(ious))
    assert "probabilities" in rep["fusion"] and rep["scales"] == [1.0]
    printed = capsys.readouterr().out
    assert "mIoU" in printed
    # a duplicated ensemble gives the same answer
    out2 = tmp_path / "ev2"
    assert main(["eval", "--config", str(path), "--out", str(out2), "--ckpt", str(ckpt), "--ckpt", str(ckpt)]) == 0
    assert json.loads((out2 / "eval_report.json").read_text())["miou"] == pytest.approx(rep["miou"], abs=1e-12)


def test_predict_masks(trained, tmp_path):
    path, data, ckpt = trained
    image = sorted((data / "land" / "images").glob("*.png"))[0]
    out = tmp_path / "pred"
    assert main(["predict", "--config", str(path), "--out", str(out), "--ckpt", str(ckpt),
                 "--image", str(image), "--scales", "0.75,1.0"]) == 0
    stem = image.stem
    src = D.read_image(image)
    idx = np.asarray(Image.open(out / f"{stem}_index.png"))
    assert idx.ndim == 2
    col = D.read_image(out / f"{stem}_color.png")
    assert idx.shape[:2] == src.shape[:2] and col.shape == src.shape
    allowed = {tuple(c) for c in D.deepglobe_palette(4).colors}
    assert {tuple(p) for p in col.reshape(-1, 3)} <= allowed
    np.testing.assert_array_equal(D.deepglobe_palette(4).encode(idx), col)


def test_inspect_features(trained, tmp_path):
    path, data, ckpt = trained
    image = sorted((data / "land" / "images").glob("*.png"))[0]
    out = tmp_path / "ins"
    assert main(["inspect", "--config", str(path), "--out", str(out), "--ckpt", str(ckpt), "--image", str(image)]) == 0
    pngs = sorted((out / "features").glob("channel_*.png"))
    cfg = CFG.load_config(path)
    net = cli.TR.model_from_checkpoint(cfg, ckpt)
    feats = net.forward(cli._prepare_image(cfg, image)[None], keep_features=True).features.data[0]
    assert len(pngs) == feats.shape[0]
    np.testing.assert_array_equal(np.asarray(Image.open(pngs[0])), cli.feature_to_gray(feats[0]))


def test_feature_to_gray():
    assert (cli.feature_to_gray(np.full((3, 4), 2.5)) == 128).all()
    g = cli.feature_to_gray(np.array([[-1.0, 0.0, 1.0]]))
    assert g.tolist() == [[0, 128, 255]]


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--op", "conv2d"]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "pass" in out
    assert main(["gradcheck", "--op", "no_such_op"]) == 1


def test_exit_codes(run_cfg, tmp_path, capsys):
    path, data = run_cfg
    assert main(["eval", "--config", str(path), "--out", str(tmp_path / "x"), "--ckpt", str(tmp_path / "none.ckpt")]) == 1
    assert main(["eval", "--config", str(path), "--out", str(tmp_path / "x")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("modle: {}\n")
    assert main(["train", "--config", str(bad)]) == 1
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--config", str(path), "--out", str(tmp_path / "x"), "--ckpt", str(junk)]) == 2
    assert main(["predict", "--config", str(path), "--out", str(tmp_path / "x"), "--ckpt", str(junk),
                 "--image", str(tmp_path / "missing.png"), "--scales", "a,b"]) == 1
    assert main(["eval", "--config", str(path), "--out", str(tmp_path / "x"), "--scales", "-1", "--ckpt", str(junk)]) == 1
    with pytest.raises(SystemExit):
        main(["frobnicate"])
