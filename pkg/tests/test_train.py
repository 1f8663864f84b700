import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitcnn import train as T
from gaitcnn import zoo
from gaitcnn.nn import Conv, FullyConnected, ModelGraph, NonFiniteError, ReLU, Sequential, Softmax


def _linear_trace(steps, lr, gamma, lam, w0, b0, x, t):
    """Scalar hand simulation of v = g*v + lr*(dL + lam*theta); theta -= v."""
    w, b, vw, vb = w0, b0, 0.0, 0.0
    out = []
    for _ in range(steps):
        r = w * x + b - t
        gw, gb = r * x, r
        vw = gamma * vw + lr * (gw + lam * w)
        vb = gamma * vb + lr * gb  # bias is not decayed
        w, b = w - vw, b - vb
        out.append((w, b))
    return out


def _sgd_trace(steps, lr, gamma, lam, w0, b0, x, t):
    p = {"fc.W": np.array([w0]), "fc.b": np.array([b0])}
    v = {k: np.zeros(1) for k in p}
    out = []
    for _ in range(steps):
        r = p["fc.W"][0] * x + p["fc.b"][0] - t
        g = {"fc.W": np.array([r * x]), "fc.b": np.array([r])}
        T.sgd_step(p, v, g, lr, gamma, lam, decayed={"fc.W"})
        out.append((p["fc.W"][0], p["fc.b"][0]))
    return out


# ---------------------------------------------------------------- update rule
def test_sgd_plain_gradient_step():
    p, v = {"a": np.array([3.0])}, {"a": np.zeros(1)}
    T.sgd_step(p, v, {"a": np.array([2 * 3.0])}, 0.1, 0.0)  # L = a^2
    assert p["a"][0] == pytest.approx(3.0 - 0.1 * 6.0, abs=1e-15)


def test_sgd_zero_gradient_velocity_decays():
    p, v = {"a": np.array([0.0])}, {"a": np.array([1.0])}
    for k in range(1, 4):
        T.sgd_step(p, v, {"a": np.zeros(1)}, 0.1, 0.9)
        assert v["a"][0] == pytest.approx(0.9 ** k, abs=1e-15)


def test_sgd_three_step_trace_matches_hand_simulation():
    args = (3, 0.05, 0.9, 5e-4, 0.7, -0.2, 1.5, 2.0)
    for (w1, b1), (w2, b2) in zip(_linear_trace(*args), _sgd_trace(*args)):
        assert abs(w1 - w2) < 1e-10 and abs(b1 - b2) < 1e-10


def test_sgd_rejects_non_finite_gradient_without_touching_params():
    p, v = {"a": np.ones(2), "b": np.ones(2)}, {"a": np.zeros(2), "b": np.zeros(2)}
    with pytest.raises(NonFiniteError, match="b"):
        T.sgd_step(p, v, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, 0.1, 0.9)
    np.testing.assert_array_equal(p["a"], 1.0)


# ---------------------------------------------------------------- sampler
def test_sampler_divisible_case_is_exactly_balanced(rng):
    labels = np.repeat(np.arange(10), 100)
    batches = T.balanced_sampler(labels, 150, rng)
    assert [len(b) for b in batches] == [150] * 6 + [100]
    for b in batches[:-1]:
        assert np.all(np.bincount(labels[b], minlength=10) == 15)
    assert np.all(np.bincount(labels[batches[-1]], minlength=10) == 10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=2, max_size=8), st.integers(2, 40),
       st.integers(0, 2 ** 32 - 1))
def test_sampler_covers_every_sample_once(counts, batch, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    batches = T.balanced_sampler(labels, batch, np.random.default_rng(seed))
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(len(labels)))
    assert all(len(b) >= 2 for b in batches) or len(batches) == 1


def test_sampler_three_classes_batch_four_within_one(rng):
    labels = np.repeat(np.arange(3), 40)
    for b in T.balanced_sampler(labels, 4, rng)[:-1]:
        counts = np.bincount(labels[b], minlength=3)
        assert counts.max() - counts.min() <= 1
    with pytest.raises(ValueError):
        T.balanced_sampler(np.array([], int), 4, rng)


# ---------------------------------------------------------------- scheduler
def test_scheduler_examples():
    s = T.PlateauScheduler(10.0, 3)
    hist = [0.9, 0.8, 0.7, 0.6, 0.5]
    assert all(s.step(hist[:n], 1e-2)[0] == 1e-2 for n in range(1, 6))
    lr, decayed = s.step([0.5, 0.5, 0.5, 0.5], 1e-2)
    assert decayed and lr == pytest.approx(1e-3)
    lr, _ = T.PlateauScheduler(2.0, 3).step([0.5] * 4, 1e-3)
    assert lr == pytest.approx(5e-4)
    assert T.TrainConfig.profile("multiview").lr_decay_factor == 2.0


def test_scheduler_needs_a_full_window_after_best():
    s = T.PlateauScheduler(10.0, 3)
    assert not s.step([0.3, 0.9, 0.5], 1e-2)[1]  # too few evaluations after the first
    assert s.step([0.3, 0.9, 0.5, 0.4], 1e-2)[1]
    assert not s.step([0.3, 0.9, 0.5, 0.2], 1e-2)[1]
    assert not s.step([0.5] * 6, 1e-3, last_decay=4)[1]  # one decay per window
    assert s.step([0.5] * 7, 1e-3, last_decay=4)[1]
    with pytest.raises(ValueError):
        s.step([], 1e-2)


# ---------------------------------------------------------------- config
def test_train_config_validation_and_profiles():
    with pytest.raises(ValueError):
        T.TrainConfig(lr=0)
    with pytest.raises(ValueError):
        T.TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        T.TrainConfig(batch=1)
    assert T.TrainConfig.profile().stages == T.DEFAULT_CURRICULUM
    assert T.TrainConfig.profile("resnet").lr == 0.1
    assert T.config_hash({"a": 1, "b": 2}) == T.config_hash({"b": 2, "a": 1})
    assert T.config_hash({"a": 1}) != T.config_hash({"a": 2})


def test_missing_class_is_rejected():
    with pytest.raises(ValueError, match="without training samples"):
        T.check_classes([0, 1, 1], 3)


# ---------------------------------------------------------------- training helpers
def _tiny_builder(classes=3, shape=(6, 6, 2)):
    def build(width, dropout):
        layers = [Conv("conv1", zoo.scaled(8, width), (3, 3), 1, 1), ReLU("r1"),
                  FullyConnected("full5", zoo.scaled(16, width)), ReLU("r5"),
                  FullyConnected("softmax", classes), Softmax("prob")]
        return ModelGraph(Sequential("", layers), shape, classes=classes)
    return build


def _tiny_data(rng, n=24, classes=3, shape=(6, 6, 2)):
    y = np.arange(n) % classes
    x = rng.standard_normal((n,) + shape).astype(np.float32) + y[:, None, None, None]
    return T.Dataset(x, y)


def test_dataset_join_and_take(rng):
    a, b = _tiny_data(rng, 6), _tiny_data(rng, 3)
    j = a.join(b)
    assert len(j) == 9 and j.take([0, 8]).shape == (2, 6, 6, 2)
    with pytest.raises(ValueError):
        T.Dataset(np.zeros((3, 2)), [0, 1])


def test_single_stage_reduces_loss_with_zero_transfers(rng):
    data = _tiny_data(rng)
    cfg = T.TrainConfig(lr=0.05, batch=6, max_epochs=8, joint_epochs=0)
    losses = []
    g, state = T.curriculum_train("custom", data, data, cfg, 3, builder=_tiny_builder(),
                                  on_epoch=lambda g, s, loss, e: losses.append(loss))
    assert state.transfers == 0 and len(state.val_history) == 8
    assert losses[-1] < losses[0]


def test_four_stage_curriculum_transfers_and_momentum(rng, monkeypatch):
    data = _tiny_data(rng)
    cfg = T.TrainConfig(batch=6, max_epochs=1, joint_epochs=1, stages=T.DEFAULT_CURRICULUM)
    seen, checks = [], []
    real = T.sgd_step
    monkeypatch.setattr(T, "sgd_step", lambda *a, **k: seen.append(a[4]) or real(*a, **k))

    def on_transfer(prev, new):
        src, dst = prev.params(), new.params()
        for name, a in src.items():
            b = dst[name]
            if name == "full5.W":
                b = b.reshape(new.root.layers[2].in_shape + (b.shape[-1],))
                a = a.reshape(prev.root.layers[2].in_shape + (a.shape[-1],))
            checks.append(np.array_equal(b[tuple(slice(0, n) for n in a.shape)], a))

    g, state = T.curriculum_train("custom", data, data, cfg, 3, builder=_tiny_builder(),
                                  on_transfer=on_transfer)
    assert state.transfers == 3
    assert checks and all(checks)
    per_epoch = len(T.balanced_sampler(data.y, 6, rng))
    joint = len(T.balanced_sampler(data.join(data).y, 6, rng))
    assert seen == [0.9] * 3 * per_epoch + [0.95] * (per_epoch + joint)
    assert g.params()["conv1.W"].shape[-1] == 8


def test_curriculum_rejects_shrinking_widths(rng):
    cfg = T.TrainConfig(stages=((1.0, 0.0, 0.9), (0.5, 0.0, 0.9)))
    with pytest.raises(ValueError):
        T.curriculum_train("custom", _tiny_data(rng), None, cfg, 3, builder=_tiny_builder())
    with pytest.raises(ValueError):
        T.curriculum_train("resnet_a", _tiny_data(rng), None, T.TrainConfig.profile(), 3)


def test_transfer_through_flow_concat():
    small = zoo.build_3dcnn(4, width=0.125, modality="of").init_params(np.random.default_rng(0))
    big = zoo.build_3dcnn(4, width=0.25, modality="of").init_params(np.random.default_rng(1))
    assert T.transfer_params(small, big) == len(small.params())
    w_s = small.params()["full5.W"].reshape(small.root.layers[2].in_shape + (-1,))
    w_b = big.params()["full5.W"].reshape(big.root.layers[2].in_shape + (-1,))
    half_s, half_b = w_s.shape[-2] // 2, w_b.shape[-2] // 2
    np.testing.assert_array_equal(w_b[..., :half_s, :w_s.shape[-1]], w_s[..., :half_s, :])
    np.testing.assert_array_equal(w_b[..., half_b:half_b + half_s, :w_s.shape[-1]],
                                  w_s[..., half_s:, :])
    key = "flows.yflow.conv2.W"
    a, b = small.params()[key], big.params()[key]
    np.testing.assert_array_equal(b[..., :a.shape[-2], :a.shape[-1]], a)


# ---------------------------------------------------------------- checkpoints
def _trained(rng, epochs=2):
    data = _tiny_data(rng)
    cfg = T.TrainConfig(batch=6, max_epochs=epochs, joint_epochs=0, strict=True)
    return T.curriculum_train("custom", data, data, cfg, 3, builder=_tiny_builder())


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    g, state = _trained(rng)
    digest = T.save_checkpoint(tmp_path / "a.ckpt", state, "abc123", {"arch": "x"})
    loaded, h, meta = T.load_checkpoint(tmp_path / "a.ckpt", expect_hash="abc123")
    assert h == "abc123" and meta == {"arch": "x"}
    for store in ("params", "velocity", "bn_state"):
        a, b = getattr(state, store), getattr(loaded, store)
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)
    assert loaded.val_history == state.val_history and loaded.lr == state.lr
    again = T.save_checkpoint(tmp_path / "b.ckpt", loaded, "abc123", {"arch": "x"})
    assert again == digest


def test_checkpoint_corruption_and_hash_mismatch(tmp_path, rng):
    _, state = _trained(rng, 1)
    path = tmp_path / "a.ckpt"
    T.save_checkpoint(path, state, "h")
    with pytest.raises(T.CheckpointError, match="hash"):
        T.load_checkpoint(path, expect_hash="other")
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(T.CheckpointError, match="checksum"):
        T.load_checkpoint(path)
    (tmp_path / "x.ckpt").write_bytes(b"nonsense")
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(tmp_path / "x.ckpt")


def test_resume_matches_uninterrupted_run(tmp_path):
    data = _tiny_data(np.random.default_rng(5))
    cfg = T.TrainConfig(batch=6, max_epochs=10, joint_epochs=0, strict=True)
    build = _tiny_builder()
    full, _ = T.curriculum_train("custom", data, data, cfg, 3, builder=build)

    g = build(1.0, 0.4).init_params(np.random.default_rng([cfg.seed, 2, 0]))
    state = T.TrainState.fresh(g, cfg.lr)
    T.train_stage(g, data, data, cfg, state, 0.9, until_epoch=5)
    T.save_checkpoint(tmp_path / "mid.ckpt", state)
    state, _, _ = T.load_checkpoint(tmp_path / "mid.ckpt")
    g = build(1.0, 0.4).init_params(np.random.default_rng(99))
    T.attach(g, state)
    T.train_stage(g, data, data, cfg, state, 0.9)
    assert state.epoch == 10
    for k, v in full.params().items():
        np.testing.assert_array_equal(g.params()[k], v)


def test_strict_runs_are_reproducible(tmp_path):
    hashes = []
    for i in range(2):
        _, state = _trained(np.random.default_rng(8))
        hashes.append(T.save_checkpoint(tmp_path / f"{i}.ckpt", state, "h"))
    assert hashes[0] == hashes[1]
