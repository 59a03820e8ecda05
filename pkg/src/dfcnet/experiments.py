"""Small reproducible training experiments on the synthetic corpus."""
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as CFG
from . import data as D
from . import model as M
from . import synth as S
from . import tensor as T
from .train import Trainer, evaluate

QUIET = {"log_interval": 10 ** 9, "eval_interval": 10 ** 9, "checkpoint_interval": 10 ** 9}


@dataclass
class OverfitResult:
    accuracy: list = field(default_factory=list)  # (iteration, land pixel accuracy)
    losses: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def best(self):
        return max(a for _, a in self.accuracy)

    def first_reaching(self, threshold):
        for it, acc in self.accuracy:
            if acc >= threshold:
                return it
        return None


def land_accuracy(net, batch):
    """Non-ignored land pixel accuracy at logit resolution, eval mode."""
    with T.no_grad():
        out = net.forward(batch, training=False)
    pred = out.logits["land"].data.argmax(1)
    target = M.downsample_targets(batch.targets["land"], net.stride)
    keep = target != M.IGNORE_INDEX
    return float((pred[keep] == target[keep]).mean())


def overfit_single_batch(root, iterations=500, base_lr=0.01, seed=0, check_every=25, stop_at=None):
    """Repeatedly fit one fixed land+road batch (no augmentation)."""
    cfg = CFG.load_config(overrides={
        "seed": seed, "data": {"root": str(root), "eval_count": 0},
        "augment": {"land_range": [1, 1], "road_range": [1, 1], "horizontal_flip": False},
        "train": dict(QUIET, iterations=iterations, base_lr=base_lr, land_batch=4, road_batch=4),
    })
    tr = Trainer(cfg)
    batch = D.make_batch(0, tr.land, tr.road, tr.cache, tr.augment, tr.batch_sizes, seed)
    res = OverfitResult()
    t0 = time.perf_counter()
    for i in range(1, iterations + 1):
        total, _, _ = tr.step(batch)
        res.losses.append(total)
        if i % check_every == 0 or i == iterations:
            res.accuracy.append((i, land_accuracy(tr.net, batch)))
            if stop_at is not None and res.accuracy[-1][1] >= stop_at:
                break
    res.seconds = time.perf_counter() - t0
    return res


@dataclass
class ComparisonConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    presets: tuple = ("baseline", "classmate")
    iterations: int = 1000
    crop_size: int = 32
    base_lr: float = 0.01
    land_batch: int = 4
    road_batch: int = 4
    train_images: int = 128
    eval_images: int = 32
    data_seed: int = 0


def make_corpus(root, cc):
    """Synthetic corpus with train + eval land tiles and as many road tiles."""
    n = cc.train_images + cc.eval_images
    return S.synth_generate(S.SyntheticConfig(num_images=n, seed=cc.data_seed), root)


def compare_presets(root, cc=None, progress=None):
    """Land mIoU per (seed, preset); every preset sees the same land stream."""
    cc = cc or ComparisonConfig()
    palette = D.deepglobe_palette(4)
    land, held_out = D.split_records(D.list_records(root, "land"), cc.eval_images, cc.data_seed)
    road = D.list_records(root, "road")[:cc.train_images]
    results = {}
    for seed in cc.seeds:
        for preset in cc.presets:
            cfg = CFG.load_config(overrides={
                "seed": seed, "model": {"preset": preset}, "augment": {"crop_size": cc.crop_size},
                "train": dict(QUIET, iterations=cc.iterations, base_lr=cc.base_lr,
                              land_batch=cc.land_batch, road_batch=cc.road_batch),
            })
            t0 = time.perf_counter()
            tr = Trainer(cfg, land=land, road=road, eval_records=[], palette=palette)
            tr.run()
            cm = evaluate(tr.net, held_out, palette)
            results[seed, preset] = cm.miou()
            if progress:
                progress(seed, preset, cm, time.perf_counter() - t0)
    return results


def summarize(results, treated="classmate", control="baseline"):
    seeds = sorted({s for s, _ in results})
    diffs = np.array([results[s, treated] - results[s, control] for s in seeds])
    return {
        "median_" + treated: float(np.median([results[s, treated] for s in seeds])),
        "median_" + control: float(np.median([results[s, control] for s in seeds])),
        "worst_gap": float(diffs.min()),
        "gaps": diffs.tolist(),
    }
