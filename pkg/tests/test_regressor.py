import hashlib
import time

import numpy as np
import pytest
import torch

from svrkit.geometry import DegenerateGeometryError, RigidPose, anchors_from_pose, pose_error_decomposed
from svrkit.regressor import (
    AnchorNet,
    CheckpointError,
    ConfigMismatchError,
    NetConfig,
    TrainingDivergedError,
    backprop_check,
    forward,
    init_model,
    layer_shapes,
    load_checkpoint,
    mean_anchor_error,
    parameter_count,
    predict,
    predict_many,
    reference_config,
    save_checkpoint,
    train,
)

TINY_LAYERS = [
    {"type": "conv", "out": 4, "kernel": 3, "pad": 1},
    {"type": "pool", "kernel": 2, "stride": 2},
    {"type": "conv", "out": 4, "kernel": 3, "pad": 1},
    {"type": "pool", "kernel": 2, "stride": 2},
    {"type": "fc", "width": 16},
]


def tiny(**kw):
    base = dict(input_size=16, layers=[dict(x) for x in TINY_LAYERS], batch_size=4, epochs=5)
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture
def data():
    rng = np.random.default_rng(0)
    return rng.random((8, 16, 16)).astype(np.float32), rng.uniform(-30, 30, (8, 3, 3))


def params(m):
    return [p.detach().clone() for p in m.net.parameters()]


# configuration and shapes


def test_reference_topology_parameter_counts():
    rows = [r for r in layer_shapes(reference_config()) if r["params"]]
    assert [r["params"] for r in rows] == [
        11712, 307456, 885120, 663936, 442624, 51384320, 16781312, 4097000, 3003, 3003, 3003,
    ]


def test_reference_network_matches_analytic_count():
    cfg = reference_config()
    net = AnchorNet(cfg)
    assert sum(p.numel() for p in net.parameters()) == parameter_count(cfg)
    out = net(torch.zeros(1, 1, 256, 256))
    assert out.shape == (1, 3, 3)


def test_desk_network_matches_analytic_count():
    cfg = NetConfig()
    assert sum(p.numel() for p in init_model(cfg).net.parameters()) == parameter_count(cfg)


def test_invalid_shapes_rejected():
    with pytest.raises(ValueError):
        NetConfig(input_size=4, layers=[{"type": "conv", "out": 2, "kernel": 7}])
    with pytest.raises(ValueError):
        NetConfig(layers=[{"type": "fc", "width": 4}, {"type": "conv", "out": 2, "kernel": 3}])
    with pytest.raises(ValueError):
        NetConfig(layers=[{"type": "dropout"}])


# init and forward


def test_init_deterministic():
    a, b = init_model(NetConfig(seed=3)), init_model(NetConfig(seed=3))
    assert all(torch.equal(x, y) for x, y in zip(params(a), params(b)))
    c = init_model(NetConfig(seed=4))
    assert not all(torch.equal(x, y) for x, y in zip(params(a), params(c)))


def test_init_biases_zero_and_weights_bounded():
    m = init_model(NetConfig())
    for mod in m.net.modules():
        if isinstance(mod, (torch.nn.Conv2d, torch.nn.Linear)):
            assert torch.all(mod.bias == 0)
            assert mod.weight.abs().max() <= np.sqrt(6.0 / mod.weight[0].numel()) + 1e-7


def test_desk_forward_shape_and_finite(rng):
    out = forward(init_model(NetConfig()), rng.random((5, 64, 64)))
    assert out.shape == (5, 3, 3) and np.all(np.isfinite(out))


def test_zero_heads_output_biases():
    m = init_model(tiny())
    with torch.no_grad():
        for k, h in enumerate(m.net.heads):
            h.weight.zero_()
            h.bias.copy_(torch.tensor([k + 0.5, -1.0, 2.0]))
    out = forward(m, np.zeros((16, 16)))[0]
    expected = np.array([[k + 0.5, -1.0, 2.0] for k in range(3)]) * m.config.target_scale
    assert np.allclose(out, expected)


def test_identical_images_identical_outputs(rng):
    img = rng.random((64, 64))
    out = forward(init_model(NetConfig()), np.stack([img] * 4))
    assert np.all(out == out[0])


def test_batched_equals_single(rng):
    m = init_model(NetConfig())
    imgs = rng.random((6, 64, 64))
    batched = forward(m, imgs)
    single = np.stack([forward(m, im)[0] for im in imgs])
    assert np.abs(batched - single).max() < 1e-6


def test_pixel_sensitivity(rng):
    m = init_model(NetConfig())
    img = rng.random((64, 64))
    bumped = img.copy()
    bumped[30, 30] += 0.5
    assert not np.array_equal(forward(m, img), forward(m, bumped))


def test_forward_is_pure(rng):
    m = init_model(NetConfig())
    img = rng.random((64, 64))
    first = forward(m, img)
    forward(m, rng.random((3, 64, 64)))
    assert np.array_equal(forward(m, img), first)


def test_size_mismatch():
    with pytest.raises(ConfigMismatchError):
        forward(init_model(NetConfig()), np.zeros((2, 32, 32)))


def test_forward_timing(rng):
    m = init_model(NetConfig())
    imgs = rng.random((64, 64, 64))
    forward(m, imgs[:2])
    t0 = time.perf_counter()
    forward(m, imgs)
    per_slice = (time.perf_counter() - t0) / len(imgs)
    print(f"desk forward: {1e3 * per_slice:.2f} ms/slice")
    assert per_slice < 0.1


# training


def test_backprop_matches_finite_differences(data):
    cfg = tiny()
    assert parameter_count(cfg) <= 5000
    X, Y = data
    assert backprop_check(init_model(cfg), X[:3], Y[:3]) < 1e-3


def test_memorise_single_sample(data):
    X, Y = data
    m = train(init_model(tiny(batch_size=1, epochs=300)), X[:1], Y[:1])
    assert m.log[-1]["mean_loss"] < 1e-3
    assert mean_anchor_error(m, X[:1], Y[:1]) < 1e-2


def test_loss_drops_tenfold(data):
    X, Y = data
    m = train(init_model(tiny(epochs=200)), X, Y)
    assert m.log[-1]["mean_loss"] < m.log[0]["mean_loss"] / 10
    assert [e["epoch"] for e in m.log] == list(range(1, 201))


def test_training_bit_reproducible(data):
    X, Y = data
    a = train(init_model(tiny()), X, Y)
    b = train(init_model(tiny()), X, Y)
    assert all(torch.equal(x, y) for x, y in zip(params(a), params(b)))
    assert a.log == b.log


def test_training_leaves_input_state(data):
    X, Y = data
    m = init_model(tiny())
    before = params(m)
    train(m, X, Y)
    assert all(torch.equal(x, y) for x, y in zip(before, params(m)))


def test_training_continues_log(data):
    X, Y = data
    m = train(train(init_model(tiny(epochs=2)), X, Y), X, Y)
    assert [e["epoch"] for e in m.log] == [1, 2, 3, 4]


def test_training_errors(data):
    X, Y = data
    with pytest.raises(ValueError):
        train(init_model(tiny()), X[:0], Y[:0])
    with pytest.raises(ValueError):
        train(init_model(tiny()), 5 * X, Y)
    with pytest.raises(TrainingDivergedError):
        train(init_model(tiny(learning_rate=1e6, epochs=20)), X, 1e3 * Y)


# prediction


def test_predict_memorised_pose():
    rng = np.random.default_rng(1)
    pose = RigidPose.in_stack(np.eye(3), 4.0)
    img = rng.random((16, 16)).astype(np.float32)
    label = anchors_from_pose(pose, 16.0).as_array()
    m = train(init_model(tiny(batch_size=1, epochs=300)), img[None], label[None])
    dt, dr = pose_error_decomposed(pose, predict(m, img))
    assert dt < 0.05 and dr < 0.5


def test_degenerate_prediction_is_failure():
    m = init_model(tiny())
    with torch.no_grad():
        for h in m.net.heads:
            h.weight.zero_()
    with pytest.raises(DegenerateGeometryError):
        predict(m, np.zeros((16, 16)))
    anchors, poses = predict_many(m, np.zeros((3, 16, 16)))
    assert poses == [None, None, None] and anchors.shape == (3, 3, 3)


# checkpoints


def test_checkpoint_roundtrip(tmp_path, data):
    X, Y = data
    m = train(init_model(tiny(epochs=3)), X, Y)
    path = save_checkpoint(m, tmp_path / "m.svrk")
    back = load_checkpoint(path)
    assert np.array_equal(forward(back, X), forward(m, X))
    assert back.log == m.log and back.seed == m.seed and back.config == m.config


def test_checkpoint_wrong_input_size(tmp_path):
    path = save_checkpoint(init_model(tiny()), tmp_path / "m.svrk")
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, input_size=32)


def test_checkpoint_hash_stable(tmp_path, data):
    X, Y = data
    digests = []
    for k in range(2):
        p = save_checkpoint(train(init_model(tiny()), X, Y), tmp_path / f"{k}.svrk")
        digests.append(hashlib.sha256(p.read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_checkpoint_corruption(tmp_path):
    path = save_checkpoint(init_model(tiny()), tmp_path / "m.svrk")
    raw = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad_magic")
    (tmp_path / "truncated").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "truncated")
    (tmp_path / "version").write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "version")
