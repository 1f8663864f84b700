import numpy as np
import pytest

from gaitcnn import zoo
from gaitcnn.nn import Concat, Parallel
from oracles import conv_params, fc_params


def _walk(spec):
    yield spec
    for key in ("layers", "branches"):
        for child in spec.get(key, []):
            yield from _walk(child)
    if "body" in spec:
        yield from _walk(spec["body"])


def _kinds(graph):
    return [s["kind"] for s in _walk(graph.layer_specs())]


def _audit_2dcnn(cin, classes, f=(96, 192, 512, 4096), fc=(4096, 2048)):
    # 60 -> conv1 60 -> pool 30 -> conv2/2 15 -> pool 7 -> conv3 7 -> pool 3 -> conv4 2
    return (conv_params((7, 7), cin, f[0]) + conv_params((5, 5), f[0], f[1])
            + conv_params((3, 3), f[1], f[2]) + conv_params((2, 2), f[2], f[3])
            + fc_params(2 * 2 * f[3], fc[0]) + fc_params(fc[0], fc[1])
            + fc_params(fc[1], classes))


def _audit_3d_branch(cin, f):
    # 60x60x25 -> pool 30x30x12 -> conv2/2 15x15x6 -> pool 7x7x3 -> pool 3x3x1
    # conv4 pads time by 1 so its output is 2x2x2
    k = (3, 3, 3)
    return (conv_params(k, cin, f[0]) + conv_params(k, f[0], f[1])
            + conv_params(k, f[1], f[2]) + conv_params((2, 2, 2), f[2], f[3])), 2 * 2 * 2 * f[3]


def _audit_3dcnn(modality, classes):
    if modality == "of":
        p, out = _audit_3d_branch(1, (48, 96, 256, 2048))
        p, out = 2 * p, 2 * out
    else:
        p, out = _audit_3d_branch(1, (96, 192, 512, 4096))
    return p + fc_params(out, 4096) + fc_params(4096, 2048) + fc_params(2048, classes)


def _audit_resnet_a(cin, classes):
    total = 3 * 3 * cin * 16 + 2 * 16  # stem conv (no bias) + bn
    prev = 16
    for s, w in enumerate((16, 32, 64)):
        for b in range(5):
            total += 9 * prev * w + 2 * w + 9 * w * w + 2 * w
            if prev != w or (s > 0 and b == 0):
                total += conv_params((1, 1), prev, w)
            prev = w
    return total + fc_params(64, classes)


def _audit_resnet_b(cin, classes):
    # 60 -> pool 3x3/2 29 -> stages 29, 15, 8, 4 -> avgpool 2x2/1 leaves 3x3
    total = 7 * 7 * cin * 64 + 2 * 64
    prev = 64
    for s, (w, n) in enumerate(zip((64, 128, 256, 256), (4, 6, 8, 3))):
        for b in range(n):
            total += prev * w + 9 * w * w + w * w + 3 * 2 * w
            if prev != w or (s > 0 and b == 0):
                total += conv_params((1, 1), prev, w)
            prev = w
    return total + fc_params(3 * 3 * 256, classes)


@pytest.mark.parametrize("arch", zoo.ARCHS)
@pytest.mark.parametrize("modality", ["gray", "of"])
def test_builders_infer_to_class_vector(arch, modality):
    g = zoo.build(arch, 10, modality, width=0.25 if "cnn" in arch else 1.0)
    assert g.input_shape == zoo.input_shape_for(modality)
    assert g.output_shape == (10,)


def test_input_shapes():
    assert zoo.input_shape_for("gray") == (60, 60, 25)
    assert zoo.input_shape_for("depth") == (60, 60, 25)
    assert zoo.input_shape_for("of") == (60, 60, 50)
    with pytest.raises(ValueError):
        zoo.input_shape_for("rgb")


def test_2dcnn_full_width_parameter_audit():
    g = zoo.build_2dcnn(155)
    assert g.param_count() == _audit_2dcnn(25, 155) == 85_677_851
    shapes = g.param_shapes()
    assert shapes["conv1.W"] == (7, 7, 25, 96)
    assert shapes["full5.W"] == (2 * 2 * 4096, 4096)
    assert sum(np.prod(s) for k, s in shapes.items() if k.startswith("conv1")) == 117_696


def test_2dcnn_of_and_width_audit():
    assert zoo.build_2dcnn(10, modality="of").param_count() == _audit_2dcnn(50, 10)
    g = zoo.build_2dcnn(10, width=0.5)
    assert g.param_count() == _audit_2dcnn(25, 10, (48, 96, 256, 2048), (2048, 1024))


@pytest.mark.parametrize("modality,total", [("of", 152_902_107), ("gray", 162_866_651)])
def test_3dcnn_parameter_audit(modality, total):
    g = zoo.build_3dcnn(155, modality=modality)
    assert g.param_count() == _audit_3dcnn(modality, 155) == total


@pytest.mark.parametrize("arch,audit,total", [("resnet_a", _audit_resnet_a, 479_403),
                                               ("resnet_b", _audit_resnet_b, 9_716_443)])
def test_resnet_parameter_audit(arch, audit, total):
    g = zoo.build(arch, 155, "gray")
    assert g.param_count() == audit(25, 155) == total


def test_3dcnn_of_has_two_branches_and_one_concat():
    g = zoo.build_3dcnn(10, width=0.25, modality="of")
    kinds = _kinds(g)
    assert kinds.count("Parallel") == 1 and kinds.count("Concat") == 1
    par = next(l for l in g.root.layers if isinstance(l, Parallel))
    assert [b.name for b in par.branches] == ["xflow", "yflow"]
    assert par.mode == "interleave"


def test_3dcnn_gray_is_single_path():
    kinds = _kinds(zoo.build_3dcnn(10, width=0.25, modality="gray"))
    assert "Parallel" not in kinds and "Concat" not in kinds


def test_fusion_p5_concatenates_2048_wide_signatures():
    spec = zoo.FusionSpec([("2dcnn", "gray"), ("3dcnn", "of")], "P5")
    g = zoo.build_fusion_net(spec, 155)
    fuse = g.root.layers[g.root.index("fuse")]
    assert isinstance(fuse, Concat) and fuse.out_shape == (4096,)
    par = g.root.layers[g.root.index("branches")]
    assert all(b.out_shape == (2048,) for b in par.branches)
    names = {l.name for l in g.root.layers}
    assert {"full7", "full8", "full9"} <= names
    assert g.output_shape == (155,)


@pytest.mark.parametrize("pos", ["P1", "P2", "P3", "P4"])
def test_fusion_early_positions_share_trunk(pos):
    spec = zoo.FusionSpec([("2dcnn", "gray"), ("2dcnn", "depth")], pos, width=0.25)
    g = zoo.build_fusion_net(spec, 10)
    assert g.output_shape == (10,)
    assert any(n.startswith("trunk_") for n, _ in g.leaves())


def test_fusion_rejects_mixed_archs_before_p5():
    spec = zoo.FusionSpec([("2dcnn", "gray"), ("3dcnn", "of")], "P3", width=0.25)
    with pytest.raises(ValueError):
        zoo.build_fusion_net(spec, 10)


def test_fusion_softmax_head_and_bad_position():
    spec = zoo.FusionSpec([("2dcnn", "gray"), ("2dcnn", "of")], "P5", head="softmax", width=0.25)
    g = zoo.build_fusion_net(spec, 10)
    assert "full7" not in {l.name for l in g.root.layers}
    with pytest.raises(ValueError):
        zoo.FusionSpec([("2dcnn", "gray")], "P6")


def test_builder_errors():
    with pytest.raises(ValueError):
        zoo.build_2dcnn(1)
    with pytest.raises(ValueError):
        zoo.build_2dcnn(10, width=1.5)
    with pytest.raises(ValueError):
        zoo.build("vgg", 10, "gray")
    with pytest.raises(ValueError):
        zoo.build_resnet_b(10, input_shape=(8, 8, 25))


def test_non_integer_width_warns_and_rounds_up():
    with pytest.warns(UserWarning):
        assert zoo.scaled(96, 0.3) == 29


def test_signature_widths():
    assert zoo.signature_width(zoo.build_2dcnn(10, width=0.5)) == 1024
    assert zoo.signature_width(zoo.build_resnet_a(10)) == 64


def test_forward_at_small_width(rng):
    g = zoo.build_3dcnn(4, width=0.25, modality="of").init_params(rng)
    x = rng.standard_normal((2, 60, 60, 50)).astype(np.float32)
    p = g.forward(x)
    assert p.shape == (2, 4)
    np.testing.assert_allclose(p.sum(1), 1, rtol=1e-5)
