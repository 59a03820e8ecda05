import numpy as np
import pytest
import yaml

from dfcnet import backbone as B
from dfcnet import layers as L
from dfcnet import tensor as T


def _block(in_ch, units, growth, seed=0):
    params = L.ParameterSet(seed)
    spec = B.DenseBlockSpec("blk", units, growth)
    out_ch = B.add_dense_block(params, spec, in_ch)
    return params, spec, out_ch


def test_dense_unit_shape():
    params = L.ParameterSet(0)
    B.add_dense_unit(params, "u", 48, 16)
    out = B.dense_unit_forward(params, "u", T.Tensor(np.random.default_rng(0).standard_normal((1, 48, 16, 16))), True)
    assert out.shape == (1, 16, 16, 16)


def test_dense_unit_depends_on_every_input_channel():
    params = L.ParameterSet(0, dtype=np.float64)
    B.add_dense_unit(params, "u", 6, 4)
    x = T.Tensor(np.random.default_rng(1).standard_normal((2, 6, 5, 5)), requires_grad=True)
    proj = np.random.default_rng(2).standard_normal((2, 4, 5, 5))
    with T.Tape():
        out = B.dense_unit_forward(params, "u", x, True)
        loss = T.tensor_sum(T.mul(out, T.Tensor(proj)))
    T.backward(loss)
    assert np.all(np.abs(x.grad).sum(axis=(0, 2, 3)) > 0)


def test_dense_unit_zero_weights_give_zero():
    params = L.ParameterSet(0)
    B.add_dense_unit(params, "u", 5, 3)
    params["u/conv/weight"].data[...] = 0
    out = B.dense_unit_forward(params, "u", T.Tensor(np.ones((1, 5, 4, 4))), False)
    assert not out.data.any()


def test_dense_unit_channel_mismatch():
    params = L.ParameterSet(0)
    B.add_dense_unit(params, "u", 5, 3)
    with pytest.raises(ValueError):
        B.dense_unit_forward(params, "u", T.Tensor(np.ones((1, 4, 4, 4))), False)


@pytest.mark.parametrize("cin,units,growth,expect", [(48, 4, 16, 112), (64, 16, 32, 576)])
def test_dense_block_channel_examples(cin, units, growth, expect):
    params, spec, out_ch = _block(cin, units, growth)
    assert out_ch == expect == spec.out_channels(cin)
    if units <= 4:
        out, feat = B.dense_block_forward(params, spec, T.Tensor(np.zeros((1, cin, 4, 4))), False)
        assert out.shape == (1, expect, 4, 4) and feat is out


def test_dense_block_input_is_prefix_of_output():
    params, spec, _ = _block(3, 2, 4)
    x = np.random.default_rng(0).standard_normal((1, 3, 4, 4)).astype(np.float32)
    out, _ = B.dense_block_forward(params, spec, T.Tensor(x), False)
    assert np.array_equal(out.data[:, :3], x)


def test_empty_block_is_identity():
    params, spec, out_ch = _block(7, 0, 5)
    x = T.Tensor(np.random.default_rng(0).standard_normal((1, 7, 3, 3)))
    out, _ = B.dense_block_forward(params, spec, x, True)
    assert out_ch == 7 and np.array_equal(out.data, x.data)


def test_dense_block_error_names_unit():
    params, spec, _ = _block(4, 2, 3)
    params.stats["blk/unit1/norm"] = T.RunningStats(99)
    with pytest.raises(ValueError, match="unit 1"):
        B.dense_block_forward(params, spec, T.Tensor(np.zeros((1, 4, 4, 4))), False)


def test_channel_formula_random_specs():
    r = np.random.default_rng(0)
    for i in range(200):
        cin, units, growth = int(r.integers(1, 9)), int(r.integers(0, 4)), int(r.integers(1, 6))
        params, spec, out_ch = _block(cin, units, growth, seed=i)
        assert out_ch == cin + units * growth
        if i % 10 == 0:
            out, _ = B.dense_block_forward(params, spec, T.Tensor(r.standard_normal((1, cin, 2, 2))), True)
            assert out.shape[1] == out_ch


def test_transition_down_examples():
    params = L.ParameterSet(0)
    ch = B.add_transition_down(params, "td", B.TransitionDownSpec(0.5), 112)
    out = B.transition_down(params, "td", T.Tensor(np.zeros((1, 112, 32, 32))), False)
    assert ch == 56 and out.shape == (1, 56, 16, 16)
    params = L.ParameterSet(0)
    B.add_transition_down(params, "td", B.TransitionDownSpec(1.0), 6)
    out = B.transition_down(params, "td", T.Tensor(np.full((1, 6, 8, 8), 0.7)), False)
    assert out.shape == (1, 6, 4, 4)
    for c in range(6):
        assert np.ptp(out.data[0, c]) == 0
    with pytest.raises(T.ShapeError, match="odd"):
        B.transition_down(params, "td", T.Tensor(np.zeros((1, 6, 5, 4))), False)


def test_build_is_deterministic():
    a = B.build_backbone(B.desk_spec(), seed=5).params.state_arrays()
    b = B.build_backbone(B.desk_spec(), seed=5).params.state_arrays()
    c = B.build_backbone(B.desk_spec(), seed=6).params.state_arrays()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith("weight"))


def test_initialization_scheme():
    params = B.build_backbone(B.desk_spec(), seed=0).params
    w = params["conv3/unit0/conv/weight"].data  # 64 inputs, 3x3
    assert abs(w.std() - np.sqrt(2 / (64 * 9))) < 0.1 * np.sqrt(2 / (64 * 9))
    assert not params["conv3/unit0/conv/bias"].data.any()
    assert np.all(params["conv3/unit0/norm/gamma"].data == 1)
    assert not params["conv3/unit0/norm/beta"].data.any()


def test_desk_shape_trace():
    bb = B.build_backbone(B.desk_spec(), seed=0)
    final, feats = bb.forward(T.Tensor(np.zeros((1, 3, 64, 64))), False)
    got = [(n, f.shape) for n, f in feats]
    assert got == [("conv2", (1, 64, 32, 32)), ("conv3", (1, 112, 16, 16)),
                   ("conv4", (1, 160, 8, 8)), ("conv5", (1, 240, 16, 16))]
    # deepest encoder feature at 1/8, decoder output at 1/4
    assert bb.spec.max_factor() == 8
    assert final.shape == (1, 240, 16, 16) and (bb.out_channels, bb.out_factor) == (240, 4)


def test_paper_spec_constructs():
    spec = B.paper_spec()
    names = [b.name for b in spec.blocks()]
    assert names == [f"conv{i}" for i in range(2, 10)]
    blocks, (ch, factor) = spec.trace()
    chans = {n: c for n, c, _ in blocks}
    assert chans["conv2"] == 256 and chans["conv3"] == 512 and chans["conv4"] == 1024 and chans["conv5"] == 1024
    assert factor == 2 and spec.max_factor() == 16
    bb = B.build_backbone(spec, seed=0)
    assert bb.params.count() > 5_000_000


def test_paper_backbone_forward_tiny_input():
    bb = B.build_backbone(B.paper_spec(), seed=0)
    with T.no_grad():
        final, feats = bb.forward(T.Tensor(np.random.default_rng(0).standard_normal((1, 3, 32, 32))), False)
    assert final.shape[2:] == (16, 16) and len(feats) == 8
    assert np.all(np.isfinite(final.data))


def test_doubling_resolution_doubles_every_feature():
    bb = B.build_backbone(B.desk_spec(), seed=0)
    _, small = bb.forward(T.Tensor(np.zeros((1, 3, 32, 32))), False)
    _, big = bb.forward(T.Tensor(np.zeros((1, 3, 64, 64))), False)
    for (n1, a), (n2, b) in zip(small, big):
        assert n1 == n2 and a.shape[1] == b.shape[1]
        assert (b.shape[2], b.shape[3]) == (2 * a.shape[2], 2 * a.shape[3])


def test_forward_finite_over_50_seeds():
    x = np.random.default_rng(99).standard_normal((2, 3, 16, 16))
    for seed in range(50):
        bb = B.build_backbone(B.desk_spec(), seed=seed)
        with T.no_grad():
            final, feats = bb.forward(T.Tensor(x), training=seed % 2 == 0)
        assert np.all(np.isfinite(final.data)), seed
        assert all(np.all(np.isfinite(f.data)) for _, f in feats)


def test_input_size_must_match_factor():
    bb = B.build_backbone(B.desk_spec(), seed=0)
    with pytest.raises(T.ShapeError, match="multiple"):
        bb.forward(T.Tensor(np.zeros((1, 3, 20, 20))), False)


def test_spec_round_trips_through_yaml():
    for spec in (B.desk_spec(), B.paper_spec()):
        text = yaml.safe_dump(spec.to_dict())
        back = B.BackboneSpec.from_dict(yaml.safe_load(text))
        assert back == spec


@pytest.mark.parametrize("stages,match", [
    ([], "at least one"),
    ([B.DenseBlockSpec("a", 1, 4), B.DenseBlockSpec("a", 1, 4)], "stage 1"),
    ([B.DenseBlockSpec("a", 1, 4), B.TransitionDownSpec(1.5)], "stage 1"),
    ([B.DenseBlockSpec("a", 1, 4), B.TransitionUpSpec("zzz")], "stage 1"),
    ([B.DenseBlockSpec("a", 1, 0)], "stage 0"),
])
def test_invalid_specs_name_the_stage(stages, match):
    with pytest.raises(B.SpecError, match=match):
        B.build_backbone(B.BackboneSpec(3, B.StemSpec(), stages))


def test_unknown_stage_type_and_preset():
    with pytest.raises(B.SpecError, match="stage 0"):
        B.BackboneSpec.from_dict({"stages": [{"type": "pool"}]})
    with pytest.raises(B.SpecError, match="unknown backbone preset"):
        B.get_preset("huge")
