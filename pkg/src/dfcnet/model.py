"""Multi-task DFCNet assembly.

Land and road samples are concatenated on the batch axis, share the stem,
dense blocks and (optionally) the fusion tree, are sliced apart again at the
deepest shared feature, and then pass task-specific convolution heads.
"""
import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import backbone as B
from . import fusion as F
from . import layers as L
from . import tensor as T

IGNORE_INDEX = 255
TASK_ORDER = ("land", "road")


class ModelError(ValueError):
    pass


@dataclass
class TaskSpec:
    name: str
    num_classes: int
    head: list = field(default_factory=list)  # [(channels, kernel), ...]; last is (num_classes, 1)
    loss_weight: float = 1.0

    def validate(self):
        if self.name not in TASK_ORDER:
            raise ModelError(f"unknown task {self.name!r}")
        if self.name == "land" and self.num_classes < 2:
            raise ModelError("land task needs at least 2 classes")
        if self.name == "road" and self.num_classes != 2:
            raise ModelError("road task is binary (2 classes)")
        if not self.head or tuple(self.head[-1]) != (self.num_classes, 1):
            raise ModelError(f"{self.name} head must end in a ({self.num_classes}, 1) conv, got {self.head}")
        if self.loss_weight < 0:
            raise ModelError(f"{self.name}: negative loss weight")


@dataclass
class ModelSpec:
    backbone: B.BackboneSpec
    tasks: list
    fusion: bool = True
    fusion_leaves: list = None  # block names; None = every block
    target_channels: int = 64
    output_stride: int = 2
    loss_at_full_resolution: bool = False

    def task(self, name):
        for t in self.tasks:
            if t.name == name:
                return t
        return None

    def to_dict(self):
        return {
            "backbone": self.backbone.to_dict(),
            "tasks": [{"name": t.name, "num_classes": t.num_classes,
                       "head": [list(h) for h in t.head], "loss_weight": t.loss_weight} for t in self.tasks],
            "fusion": self.fusion,
            "fusion_leaves": self.fusion_leaves,
            "target_channels": self.target_channels,
            "output_stride": self.output_stride,
            "loss_at_full_resolution": self.loss_at_full_resolution,
        }

    @classmethod
    def from_dict(cls, d):
        tasks = [TaskSpec(t["name"], int(t["num_classes"]), [tuple(h) for h in t["head"]],
                          float(t.get("loss_weight", 1.0))) for t in d["tasks"]]
        return cls(
            B.BackboneSpec.from_dict(d["backbone"]), tasks,
            bool(d.get("fusion", True)), d.get("fusion_leaves"),
            int(d.get("target_channels", 64)), int(d.get("output_stride", 2)),
            bool(d.get("loss_at_full_resolution", False)),
        )

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


MODEL_PRESETS = {
    # name: (fusion, use road task, output stride)
    "baseline": (False, False, 4),
    "classmate": (False, True, 2),
    "dfcnet": (True, True, 2),
}


def make_model_spec(preset="dfcnet", backbone="desk", land_classes=4, target_channels=None,
                    head_channels=None, land_weight=1.0, road_weight=1.0):
    if preset not in MODEL_PRESETS:
        raise ModelError(f"unknown model preset {preset!r}; choose from {sorted(MODEL_PRESETS)}")
    fusion, use_road, stride = MODEL_PRESETS[preset]
    bb = B.get_preset(backbone) if isinstance(backbone, str) else copy.deepcopy(backbone)
    if target_channels is None:
        target_channels = 256 if backbone == "paper" else 64
    if head_channels is None:
        head_channels = 128 if backbone == "paper" else 32
    tasks = [TaskSpec("land", land_classes, [(head_channels, 3), (land_classes, 1)], land_weight)]
    if use_road:
        tasks.append(TaskSpec("road", 2, [(head_channels, 3), (2, 1)], road_weight))
    return ModelSpec(bb, tasks, fusion, None, target_channels, stride)


# ---------------------------------------------------------------------------
# batches


@dataclass
class MultiTaskBatch:
    images: np.ndarray
    boundaries: dict
    targets: dict

    @property
    def size(self):
        return self.images.shape[0]

    def task_names(self):
        return [t for t in TASK_ORDER if t in self.boundaries]


def merge_batches(land=None, road=None):
    """Concatenate (images, targets) pairs on the batch axis, land first."""
    parts = [(name, p) for name, p in (("land", land), ("road", road))
             if p is not None and len(p[0]) > 0]
    if not parts:
        raise ModelError("both land and road batches are empty")
    sizes = {name: tuple(p[0].shape[2:]) for name, p in parts}
    if len(set(sizes.values())) > 1:
        raise ModelError(f"spatial sizes differ across tasks: {sizes}")
    start = 0
    boundaries, targets = {}, {}
    for name, (imgs, tg) in parts:
        tg = np.asarray(tg)
        if tg.shape != (imgs.shape[0],) + tuple(imgs.shape[2:]):
            raise ModelError(f"{name}: targets {tg.shape} do not match images {imgs.shape}")
        boundaries[name] = (start, start + imgs.shape[0])
        targets[name] = tg
        start += imgs.shape[0]
    images = np.concatenate([p[0] for _, p in parts], axis=0)
    return MultiTaskBatch(images, boundaries, targets)


def split_deepest(features, boundaries):
    """Batch-axis slice of the shared feature, one tensor per task."""
    n = features.shape[0]
    end = max(e for _, e in boundaries.values())
    if end != n:
        raise ModelError(f"boundaries cover {end} samples but features have batch {n}")
    if len(boundaries) == 1:
        (name,) = boundaries
        return {name: features}
    return {name: T.slice_axis(features, 0, s, e) for name, (s, e) in boundaries.items()}


def downsample_targets(targets, stride):
    """Nearest-neighbour pick at half-pixel centres: index d*stride + stride//2."""
    if stride == 1:
        return targets
    off = stride // 2
    return np.ascontiguousarray(targets[..., off::stride, off::stride])


# ---------------------------------------------------------------------------
# network


@dataclass
class ModelOutput:
    logits: dict
    features: object = None
    input_size: tuple = None


class DFCNet:
    def __init__(self, spec, seed=0):
        for t in spec.tasks:
            t.validate()
        if spec.task("land") is None:
            raise ModelError("model needs a land task")
        if spec.output_stride < 1:
            raise ModelError("output_stride must be positive")
        self.spec = spec
        self.spec_hash = spec.hash()
        self.params = L.ParameterSet(seed)
        self.backbone = B.build_backbone(spec.backbone, params=self.params)
        blocks = {name: (ch, f) for name, ch, f in self.backbone.blocks}
        self.input_factor = max(self.backbone.input_factor, spec.output_stride)
        if spec.fusion:
            leaves = spec.fusion_leaves or [name for name, _, _ in self.backbone.blocks]
            unknown = [n for n in leaves if n not in blocks]
            if unknown:
                raise ModelError(f"fusion leaves {unknown} are not backbone blocks")
            self.leaf_names = list(leaves)
            self.tree = F.build_fusion_tree([blocks[n][0] for n in leaves], spec.target_channels, self.params)
            trunk_factor = min(blocks[n][1] for n in leaves)
        else:
            self.tree = None
            self.params.conv("project", spec.target_channels, self.backbone.out_channels, 1)
            trunk_factor = self.backbone.out_factor
        if trunk_factor < spec.output_stride or trunk_factor % spec.output_stride:
            raise ModelError(f"trunk output is at 1/{trunk_factor}, cannot produce stride {spec.output_stride}")
        self.trunk_factor = trunk_factor
        for t in spec.tasks:
            ch = spec.target_channels
            for j, (out_ch, k) in enumerate(t.head):
                L.add_preact_conv(self.params, f"head_{t.name}/{j}", ch, int(out_ch), int(k))
                ch = int(out_ch)

    @property
    def stride(self):
        return self.spec.output_stride

    @property
    def num_classes(self):
        return self.spec.task("land").num_classes

    def trunk(self, x, training):
        final, feats = self.backbone.forward(x, training)
        if self.tree is not None:
            lookup = dict(feats)
            shared = F.fusion_forward(self.tree, [lookup[n] for n in self.leaf_names], self.params)
        else:
            shared = L.conv(self.params, "project", final)
        _, _, h, w = x.shape
        s = self.spec.output_stride
        if shared.shape[2] != h // s:
            shared = T.bilinear_upsample(shared, h // s, w // s)
        return shared

    def head(self, name, feats, training):
        t = self.spec.task(name)
        if t is None:
            raise ModelError(f"model has no {name!r} head")
        out = feats
        for j in range(len(t.head)):
            out = L.preact_conv(self.params, f"head_{name}/{j}", out, training)
        return out

    def forward(self, batch, training=False, keep_features=False):
        """Shared trunk on the merged batch, then split and per-task heads."""
        if isinstance(batch, np.ndarray):
            images, boundaries = batch, {"land": (0, batch.shape[0])}
        else:
            images, boundaries = batch.images, batch.boundaries
        x = T.Tensor(images)
        try:
            shared = self.trunk(x, training)
        except ValueError as exc:
            raise ModelError(f"trunk: {exc}") from exc
        parts = split_deepest(shared, boundaries)
        logits = {name: self.head(name, parts[name], training) for name in TASK_ORDER if name in parts}
        return ModelOutput(logits, shared if keep_features else None, tuple(images.shape[2:]))

    def predict_proba(self, images, task="land"):
        """Eval-mode softmax at 1/stride resolution for an (N, 3, H, W) array."""
        with T.no_grad():
            out = self.forward(MultiTaskBatch(images, {task: (0, len(images))}, {}))
        return T.softmax(out.logits[task].data, axis=1)


def multitask_loss(model, output, batch, weights=None):
    """Weighted sum of per-task pixel cross-entropies.

    Returns (total loss Tensor, {task: float loss}).  Tasks with no samples
    contribute nothing; zero-weight tasks are reported but not differentiated.
    """
    if weights is None:
        weights = {t.name: t.loss_weight for t in model.spec.tasks}
    total = None
    per_task = {}
    for name, logits in output.logits.items():
        tg = batch.targets[name]
        if model.spec.loss_at_full_resolution and model.stride > 1:
            h, w = output.input_size
            logits = T.bilinear_upsample(logits, h, w)
        else:
            tg = downsample_targets(tg, model.stride)
        try:
            ce, _ = T.softmax_cross_entropy(logits, tg, ignore_index=IGNORE_INDEX)
        except ValueError as exc:
            raise ModelError(f"{name} loss: {exc}") from exc
        per_task[name] = ce.item()
        w = float(weights.get(name, 0.0))
        if w == 0:
            continue
        term = ce if w == 1 else T.scale(ce, w)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ModelError("every task has zero loss weight or no samples")
    return total, per_task
