"""FC-DenseNet style encoder-decoder: dense blocks, transition down, bilinear transition up."""
import math
from dataclasses import asdict, dataclass, field

from . import layers as L
from . import tensor as T


class SpecError(ValueError):
    pass


@dataclass
class DenseBlockSpec:
    name: str
    num_units: int
    growth_rate: int

    def out_channels(self, in_channels):
        return in_channels + self.num_units * self.growth_rate


@dataclass
class TransitionDownSpec:
    compression: float = 1.0

    def out_channels(self, in_channels):
        return math.ceil(self.compression * in_channels)


@dataclass
class TransitionUpSpec:
    """Bilinear x2 upsampling, optional 1x1 compression, optional skip concat."""
    skip: str = None
    compression: float = 1.0


@dataclass
class StemSpec:
    channels: int = 16
    kernel: int = 3
    pool: bool = True


@dataclass
class BackboneSpec:
    in_channels: int = 3
    stem: StemSpec = field(default_factory=StemSpec)
    stages: list = field(default_factory=list)

    def to_dict(self):
        stages = []
        for s in self.stages:
            if isinstance(s, DenseBlockSpec):
                stages.append({"type": "dense", "name": s.name, "units": s.num_units, "growth": s.growth_rate})
            elif isinstance(s, TransitionDownSpec):
                stages.append({"type": "down", "compression": s.compression})
            else:
                stages.append({"type": "up", "skip": s.skip, "compression": s.compression})
        return {"in_channels": self.in_channels, "stem": asdict(self.stem), "stages": stages}

    @classmethod
    def from_dict(cls, d):
        stages = []
        for i, s in enumerate(d.get("stages", [])):
            kind = s.get("type")
            if kind == "dense":
                stages.append(DenseBlockSpec(s["name"], int(s["units"]), int(s["growth"])))
            elif kind == "down":
                stages.append(TransitionDownSpec(float(s.get("compression", 1.0))))
            elif kind == "up":
                stages.append(TransitionUpSpec(s.get("skip"), float(s.get("compression", 1.0))))
            else:
                raise SpecError(f"stage {i}: unknown type {kind!r}")
        return cls(int(d.get("in_channels", 3)), StemSpec(**d.get("stem", {})), stages)

    def blocks(self):
        return [s for s in self.stages if isinstance(s, DenseBlockSpec)]

    def trace(self):
        """Walk the stage list; returns per-block (name, channels, downsample factor) and the final pair.

        Raises SpecError naming the offending stage.
        """
        ch = self.stem.channels
        factor = 2 if self.stem.pool else 1
        seen = {}
        blocks = []
        names = set()
        for i, s in enumerate(self.stages):
            if isinstance(s, DenseBlockSpec):
                if s.name in names:
                    raise SpecError(f"stage {i}: duplicate block name {s.name!r}")
                if s.num_units < 0 or s.growth_rate < 1:
                    raise SpecError(f"stage {i} ({s.name}): units must be >= 0 and growth >= 1")
                names.add(s.name)
                ch = s.out_channels(ch)
                seen[s.name] = (ch, factor)
                blocks.append((s.name, ch, factor))
            elif isinstance(s, TransitionDownSpec):
                if not 0 < s.compression <= 1:
                    raise SpecError(f"stage {i}: compression {s.compression} outside (0, 1]")
                ch = s.out_channels(ch)
                factor *= 2
            elif isinstance(s, TransitionUpSpec):
                if not 0 < s.compression <= 1 or factor < 2:
                    raise SpecError(f"stage {i}: invalid transition up (compression {s.compression}, factor {factor})")
                ch = math.ceil(s.compression * ch)
                factor //= 2
                if s.skip is not None:
                    if s.skip not in seen:
                        raise SpecError(f"stage {i}: skip block {s.skip!r} not defined earlier")
                    skip_ch, skip_factor = seen[s.skip]
                    if skip_factor != factor:
                        raise SpecError(f"stage {i}: skip {s.skip!r} is at 1/{skip_factor}, upsampled path at 1/{factor}")
                    ch += skip_ch
            else:
                raise SpecError(f"stage {i}: unsupported stage {s!r}")
        if not blocks:
            raise SpecError("backbone needs at least one dense block")
        return blocks, (ch, factor)

    def max_factor(self):
        factor = 2 if self.stem.pool else 1
        best = factor
        for s in self.stages:
            if isinstance(s, TransitionDownSpec):
                factor *= 2
            elif isinstance(s, TransitionUpSpec):
                factor //= 2
            best = max(best, factor)
        return best


def desk_spec():
    """Four blocks of four units, growth 12; bottleneck at 1/8, output at 1/4.

    Channel trace: stem 16 -> conv2 64 @1/2 -> conv3 112 @1/4 -> conv4 160 @1/8
    -> up (compress 0.5) 80 + skip conv3 112 = 192 -> conv5 240 @1/4.
    """
    return BackboneSpec(3, StemSpec(16, 3, True), [
        DenseBlockSpec("conv2", 4, 12), TransitionDownSpec(1.0),
        DenseBlockSpec("conv3", 4, 12), TransitionDownSpec(1.0),
        DenseBlockSpec("conv4", 4, 12), TransitionUpSpec("conv3", 0.5),
        DenseBlockSpec("conv5", 4, 12),
    ])


def paper_spec():
    """DenseNet-121 encoder (6/12/24/16 units, growth 32, compression 0.5) plus a small mirrored decoder.

    Blocks are named conv2 .. conv9; conv5 is the 16-unit block.
    """
    return BackboneSpec(3, StemSpec(64, 3, True), [
        DenseBlockSpec("conv2", 6, 32), TransitionDownSpec(0.5),
        DenseBlockSpec("conv3", 12, 32), TransitionDownSpec(0.5),
        DenseBlockSpec("conv4", 24, 32), TransitionDownSpec(0.5),
        DenseBlockSpec("conv5", 16, 32), TransitionUpSpec("conv4", 0.25),
        DenseBlockSpec("conv6", 8, 32), TransitionUpSpec("conv3", 0.25),
        DenseBlockSpec("conv7", 6, 32), TransitionUpSpec("conv2", 0.25),
        DenseBlockSpec("conv8", 4, 32),
        DenseBlockSpec("conv9", 4, 32),
    ])


PRESETS = {"desk": desk_spec, "paper": paper_spec}


def get_preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise SpecError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# forward pieces


def add_dense_unit(params, name, in_ch, growth):
    L.add_preact_conv(params, name, in_ch, growth, 3)


def dense_unit_forward(params, name, x, training):
    return L.preact_conv(params, name, x, training)


def add_dense_block(params, spec, in_ch):
    ch = in_ch
    for u in range(spec.num_units):
        add_dense_unit(params, f"{spec.name}/unit{u}", ch, spec.growth_rate)
        ch += spec.growth_rate
    return ch


def dense_block_forward(params, spec, x, training):
    """Returns (block_output, block_feature); the feature tapped for fusion is the block output itself."""
    feats = [x]
    for u in range(spec.num_units):
        inp = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
        try:
            feats.append(dense_unit_forward(params, f"{spec.name}/unit{u}", inp, training))
        except ValueError as exc:
            raise type(exc)(f"{spec.name} unit {u}: {exc}") from exc
    out = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
    return out, out


def add_transition_down(params, name, spec, in_ch):
    out_ch = spec.out_channels(in_ch)
    L.add_preact_conv(params, name, in_ch, out_ch, 1)
    return out_ch


def transition_down(params, name, x, training):
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise T.ShapeError(f"{name}: odd spatial size {h}x{w}; pad inputs to a multiple of the total downsample factor")
    return T.avg_pool_2x2(L.preact_conv(params, name, x, training))


class Backbone:
    """Parameters plus forward for a BackboneSpec.

    ``forward`` returns the final feature map and the ordered per-block
    features (name, tensor) consumed by the fusion module.
    """

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params
        self.blocks, (self.out_channels, self.out_factor) = spec.trace()
        self.input_factor = spec.max_factor()
        st = spec.stem
        params.conv("stem", st.channels, spec.in_channels, st.kernel)
        ch = st.channels
        channels = {}
        for i, s in enumerate(spec.stages):
            if isinstance(s, DenseBlockSpec):
                ch = add_dense_block(params, s, ch)
                channels[s.name] = ch
            elif isinstance(s, TransitionDownSpec):
                ch = add_transition_down(params, f"down{i}", s, ch)
            else:
                if s.compression < 1:
                    new_ch = math.ceil(s.compression * ch)
                    L.add_preact_conv(params, f"up{i}", ch, new_ch, 1)
                    ch = new_ch
                if s.skip is not None:
                    ch += channels[s.skip]

    def forward(self, x, training):
        n, c, h, w = x.shape
        if c != self.spec.in_channels:
            raise T.ShapeError(f"backbone expects {self.spec.in_channels} input channels, got {c}")
        f = self.input_factor
        if h % f or w % f:
            raise T.ShapeError(f"input {h}x{w} must be a multiple of the downsample factor {f}")
        out = L.conv(self.params, "stem", x)
        if self.spec.stem.pool:
            out = T.avg_pool_2x2(out)
        block_out = {}
        features = []
        for i, s in enumerate(self.spec.stages):
            if isinstance(s, DenseBlockSpec):
                out, feat = dense_block_forward(self.params, s, out, training)
                block_out[s.name] = out
                features.append((s.name, feat))
            elif isinstance(s, TransitionDownSpec):
                out = transition_down(self.params, f"down{i}", out, training)
            else:
                if s.compression < 1:
                    out = L.preact_conv(self.params, f"up{i}", out, training)
                out = T.bilinear_upsample(out, out.shape[2] * 2, out.shape[3] * 2)
                if s.skip is not None:
                    out = T.concat([out, block_out[s.skip]], axis=1)
        return out, features


def build_backbone(spec, seed=0, params=None):
    """Validate ``spec`` and allocate its parameters from ``seed``."""
    if params is None:
        params = L.ParameterSet(seed)
    return Backbone(spec, params)
