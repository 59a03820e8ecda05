"""Training loop, evaluation and model (re)loading."""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as C
from . import config as CFG
from . import data as D
from . import inference as I
from . import metrics
from . import model as M
from . import tensor as T
from .optim import SGD, ScheduleSpec, poly_lr

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


def build_model(cfg, num_classes=None):
    spec = CFG.model_spec_from(cfg, num_classes)
    net = M.DFCNet(spec, seed=cfg["seed"])
    net.spec_hash = spec.hash()
    return net


def model_from_checkpoint(cfg, path):
    net = build_model(cfg)
    ckpt = C.load_checkpoint(path, expected_hash=net.spec_hash)
    net.params.load_arrays({k: v for k, v in ckpt.tensors.items() if not k.startswith("momentum/")})
    return net


def make_checkpoint(net, opt, schedule, cfg):
    tensors = dict(net.params.state_arrays())
    tensors.update(opt.state_arrays())
    meta = {"base_lr": schedule.base_lr, "max_iter": schedule.max_iter, "power": schedule.power,
            "seed": cfg["seed"], "preset": cfg["model"]["preset"]}
    return C.Checkpoint({k: np.array(v) for k, v in tensors.items()}, net.spec_hash, opt.iteration, meta)


def evaluate(model, records, palette, scales=(1.0,), tile=None, overlap=None, norm=(0.5, 0.25), models=None):
    """Confusion matrix over ``records`` using (ensembled) multi-scale tiled prediction."""
    models = models or [model]
    cm = metrics.ConfusionMatrix(models[0].num_classes)
    for rec in records:
        image, target = D.load_sample(rec, palette)
        image = D.normalize_image(image, *norm)
        t = tile or max(image.shape[1:])
        probs = I.ensemble_fuse(models, image, scales, t, overlap if overlap is not None else t // 2)
        cm.update(probs.argmax(axis=0), target, ignore_index=M.IGNORE_INDEX)
    return cm


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    model: object = None


class Trainer:
    def __init__(self, cfg, land=None, road=None, eval_records=None, palette=None):
        self.cfg = cfg
        self.palette = palette or CFG.palette_from(cfg)
        self.net = build_model(cfg, self.palette.num_classes)
        t = cfg["train"]
        self.schedule = ScheduleSpec(t["base_lr"], t["iterations"], t["power"])
        self.opt = SGD(self.net.params, t["momentum"], t["weight_decay"])
        if land is None:
            root = cfg["data"]["root"]
            land, eval_records = D.split_records(D.list_records(root, "land"), cfg["data"]["eval_count"], cfg["seed"])
            road = D.list_records(root, "road")
        self.land = land
        self.road = road or []
        self.eval_records = eval_records or []
        self.use_road = self.net.spec.task("road") is not None and t["road_batch"] > 0
        self.batch_sizes = {"land": t["land_batch"], "road": t["road_batch"] if self.use_road else 0}
        if self.use_road and not self.road:
            raise TrainError("model has a road head but no road records were found")
        self.augment = CFG.augment_from(cfg)
        self.norm = (cfg["data"]["mean"], cfg["data"]["std"])
        self.cache = D.SampleCache(self.palette)

    def resume(self, path):
        ckpt = C.load_checkpoint(path, expected_hash=self.net.spec_hash)
        arrays = {k: v for k, v in ckpt.tensors.items() if not k.startswith("momentum/")}
        self.net.params.load_arrays(arrays)
        self.opt.load_arrays(ckpt.tensors, ckpt.iteration)

    def step(self, batch):
        """One forward/backward/update; returns (total loss, per-task losses, lr)."""
        lr = poly_lr(self.opt.iteration, self.schedule)
        self.net.params.zero_grad()
        with T.Tape():
            out = self.net.forward(batch, training=True)
            loss, per_task = M.multitask_loss(self.net, out, batch)
        T.backward(loss)
        self.opt.step(lr)
        return loss.item(), per_task, lr

    def run(self, out_dir=None, log_path=None):
        t = self.cfg["train"]
        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        log_path = log_path or (out / "metrics.jsonl" if out else None)
        result = TrainResult(model=self.net)
        stream = D.make_epoch_stream(self.land, self.road if self.use_road else [], self.augment,
                                     self.batch_sizes, self.cfg["seed"], start_step=self.opt.iteration,
                                     cache=self.cache, norm=self.norm)
        fh = open(log_path, "a") if log_path else None
        try:
            while self.opt.iteration < self.schedule.max_iter:
                it = self.opt.iteration
                batch = next(stream)
                try:
                    total, per_task, lr = self.step(batch)
                except (ValueError, FloatingPointError) as exc:
                    raise TrainError(f"iteration {it}: {exc}") from exc
                result.losses.append(total)
                done = self.opt.iteration
                rec = None
                if done % t["log_interval"] == 0 or done == self.schedule.max_iter:
                    rec = {"iter": done, "lr": lr, "land_loss": per_task.get("land"),
                           "road_loss": per_task.get("road"), "miou": None}
                if self.eval_records and (done % t["eval_interval"] == 0 or done == self.schedule.max_iter):
                    cm = evaluate(self.net, self.eval_records, self.palette, norm=self.norm)
                    rec = rec or {"iter": done, "lr": lr, "land_loss": per_task.get("land"),
                                  "road_loss": per_task.get("road"), "miou": None}
                    rec["miou"] = cm.miou()
                if rec is not None:
                    result.records.append(rec)
                    log.info("iter %d lr %.3g land %.4f road %s miou %s", done, lr, rec["land_loss"],
                             rec["road_loss"], rec["miou"])
                    if fh:
                        fh.write(json.dumps(rec) + "\n")
                        fh.flush()
                if out and (done % t["checkpoint_interval"] == 0 or done == self.schedule.max_iter):
                    path = out / f"ckpt_{done:06d}.ckpt"
                    C.save_checkpoint(path, make_checkpoint(self.net, self.opt, self.schedule, self.cfg))
                    result.checkpoints.append(path)
        finally:
            if fh:
                fh.close()
        return result


def train(cfg, out_dir=None, resume=None, **kwargs):
    trainer = Trainer(cfg, **kwargs)
    if resume:
        trainer.resume(resume)
    return trainer.run(out_dir)
