import numpy as np
import pytest

from facefuse import engine
from facefuse.errors import ConfigurationError, DimensionError
from facefuse.model import (LossProbe, NetworkSpec, TaskDescriptor, build_backbone, build_cross_task_head,
                            build_fusion_head, forward_full, zeroed)


@pytest.fixture(scope="module")
def id_backbone():
    return build_backbone(TaskDescriptor.default("id"), seed=3)


def test_task_defaults():
    assert TaskDescriptor.default("id") == TaskDescriptor("id", 77, 200)
    assert TaskDescriptor.default("age") == TaskDescriptor("age", 3, 50)
    assert TaskDescriptor.default("race").class_count == 4
    assert TaskDescriptor.default("gender").class_count == 2
    with pytest.raises(ConfigurationError):
        TaskDescriptor.default("mood")


def test_backbone_layout(id_backbone):
    layers = id_backbone.spec.layers
    assert [l.kind for l in layers] == ["conv", "conv", "conv", "fc", "fc"]
    assert [l.kernel for l in layers[:3]] == [5, 5, 3]
    assert layers[3].out == 200
    assert id_backbone.feature_tap == 3
    assert id_backbone.feature_dim == 200
    assert id_backbone.class_count == 77


def test_race_backbone_widths():
    net = build_backbone(TaskDescriptor.default("race"))
    assert net.feature_dim == 50
    assert net.class_count == 4


@pytest.mark.parametrize("task", ["id", "age", "race", "gender"])
def test_feature_tap_width(task):
    desc = TaskDescriptor.default(task)
    assert build_backbone(desc).feature_dim == desc.feature_dim


def test_forward_full_shapes(id_backbone):
    x = np.random.default_rng(0).normal(size=(1, 32, 32))
    logits, feature = forward_full(id_backbone, x)
    assert logits.shape == (77,)
    assert feature.shape == (200,)


def test_layerwise_shapes(id_backbone):
    x = np.zeros((2, 1, 32, 32), np.float32)
    _, _, cache = id_backbone.forward(x, keep_cache=True)
    for entry, shape in zip(cache[1:], id_backbone.layer_shapes):
        assert entry["input"].shape[1:] in (shape, (int(np.prod(shape)),))


def test_zero_network_zero_logits(id_backbone):
    logits, _ = forward_full(zeroed(id_backbone), np.ones((1, 32, 32)))
    assert not logits.any()


def test_input_too_small_reports_stage():
    with pytest.raises(ConfigurationError, match="stage 1"):
        build_backbone(TaskDescriptor.default("age"), (1, 12, 12))


def test_wrong_input_shape(id_backbone):
    with pytest.raises(DimensionError):
        forward_full(id_backbone, np.zeros((3, 32, 32)))


def test_seed_determinism():
    a = build_backbone(TaskDescriptor.default("gender"), seed=11)
    b = build_backbone(TaskDescriptor.default("gender"), seed=11)
    c = build_backbone(TaskDescriptor.default("gender"), seed=12)
    for pa, pb in zip(a.params, b.params):
        assert pa.weights.tobytes() == pb.weights.tobytes()
    assert a.params[0].weights.tobytes() != c.params[0].weights.tobytes()


def test_init_is_gaussian_with_zero_bias():
    net = build_backbone(TaskDescriptor.default("id"), seed=0)
    for p in net.params:
        assert not p.bias.any()
    w = net.params[3].weights  # fc 64 -> 200
    assert abs(w.std() - 1 / np.sqrt(64)) < 0.01
    w = net.params[1].weights  # conv 16 -> 32, 5x5
    assert abs(w.std() - np.sqrt(2 / (16 * 25))) < 0.01
    fixed = build_backbone(TaskDescriptor.default("id"), seed=0, conv_std=0.01)
    assert abs(fixed.params[1].weights.std() - 0.01) < 1e-3


def test_cross_task_head():
    head = build_cross_task_head(200, 3)
    assert head.input_shape == (200,)
    assert head.class_count == 3
    assert [l.kind for l in head.spec.layers] == ["fc", "fc", "fc"]
    assert build_cross_task_head(50, 2).input_shape == (50,)
    with pytest.raises(ConfigurationError):
        build_cross_task_head(0, 2)


def test_zero_head_uniform_softmax():
    head = zeroed(build_cross_task_head(50, 4))
    logits, _ = forward_full(head, np.zeros(50))
    _, probs, _ = engine.softmax_cross_entropy(logits, 0)
    np.testing.assert_allclose(probs, np.full(4, 0.25))


@pytest.mark.parametrize("dims,width", [([200, 50, 50, 50], 350), ([50, 50, 50], 150), ([200], 200)])
def test_fusion_head_width(dims, width):
    assert build_fusion_head(dims, 3).input_shape == (width,)


def test_fusion_head_needs_dims():
    with pytest.raises(ConfigurationError):
        build_fusion_head([], 3)


def test_single_input_fusion_head_equals_cross_head():
    a = build_fusion_head([200], 3, seed=5)
    b = build_cross_task_head(200, 3, seed=5)
    assert a.spec == b.spec
    x = np.random.default_rng(0).normal(size=200)
    assert forward_full(a, x)[0].tobytes() == forward_full(b, x)[0].tobytes()


def test_spec_text_round_trip(id_backbone):
    spec = id_backbone.spec
    assert NetworkSpec.from_text(spec.to_text()) == spec
    fixed = build_backbone(TaskDescriptor.default("age"), conv_std=0.01).spec
    assert NetworkSpec.from_text(fixed.to_text()) == fixed


def test_tiny_backbone_gradients():
    net = build_backbone(TaskDescriptor("id", 3, 10), (1, 8, 8), seed=1, precision="float64",
                         channels=(2, 3, 4), conv_padding="same")
    rng = np.random.default_rng(1)
    net = net.with_params([engine.LayerParams(p.kind, rng.normal(0, 0.5, p.weights.shape),
                                              rng.normal(0, 0.2, p.bias.shape)) for p in net.params])
    err = engine.grad_check(LossProbe(net, [0, 2]), rng.normal(size=(2, 1, 8, 8)), 1e-5)
    assert err < 1e-4
