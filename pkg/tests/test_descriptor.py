"""Descriptor network tests: layer oracles, losses, gradients, training."""

import numpy as np
import pytest

from pdm4d.descriptor import (ClassifierHeads, DescriptorNet, TrainBatch,
                              TrainConfig, gradient, load_weights, loss_data,
                              loss_reg, normalize_depth, save_weights,
                              softmax, train, _BN_EPS)
from pdm4d.errors import FormatError, TrainingError

from oracles import conv3x3_oracle, data_loss_oracle, reg_loss_oracle


def small_net(channels=4, out_dim=4, seed=0):
    net = DescriptorNet(channels=channels, out_dim=out_dim, seed=seed)
    # non-degenerate batch-norm state for eval-mode checks
    rng = np.random.default_rng(seed + 1)
    for name in net.running:
        if name.endswith("_mean"):
            net.running[name] = 0.1 * rng.standard_normal(
                net.running[name].shape)
    return net


def random_batch(rng, B=2, H=8, W=8, n_labels=3, n_segs=2):
    images = rng.standard_normal((B, H, W))
    labels = rng.integers(0, n_labels, size=(B, H, W))
    valid = rng.random((B, H, W)) > 0.3
    valid[:, 0, 0] = True  # keep every sample non-empty
    seg_ids = rng.integers(0, n_segs, size=B)
    return TrainBatch(images, labels, valid, seg_ids)


def forward_oracle(net, images):
    """Re-runs the full forward path with the naive convolution oracle and
    plain formula evaluation for the other layers (training-mode BN)."""
    x = np.asarray(images, dtype=np.float64)[..., None]

    def block(x, name):
        p = net.params
        y = conv3x3_oracle(x, p[name + "_w"], p[name + "_b"])
        mean = y.mean(axis=(0, 1, 2))
        var = y.var(axis=(0, 1, 2))
        xhat = (y - mean) / np.sqrt(var + _BN_EPS)
        y = p[name + "_g"] * xhat + p[name + "_beta"]
        return np.maximum(y, 0.0)

    def pool(x):
        B, H, W, C = x.shape
        return x.reshape(B, H // 2, 2, W // 2, 2, C).max(axis=(2, 4))

    def up(x):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    a0 = block(x, "stem")
    s1 = block(a0, "enc1")
    s2 = block(pool(s1), "enc2")
    a3 = block(pool(s2), "mid")
    a4 = block(up(a3) + s2, "dec1")
    a5 = block(up(a4) + s1, "dec2")
    return conv3x3_oracle(a5, net.params["out_w"], net.params["out_b"])


# ---------------------------------------------------------------------------
# forward


def test_forward_matches_naive_oracle_on_8x8():
    rng = np.random.default_rng(0)
    net = small_net()
    x = rng.standard_normal((2, 8, 8))
    got = net.forward(x, training=True)
    want = forward_oracle(net, x)
    assert np.abs(got - want).max() < 1e-6


def test_forward_shape_contract():
    net = DescriptorNet(channels=4, out_dim=16, seed=1)
    rng = np.random.default_rng(1)
    out = net.forward(rng.standard_normal((1, 64, 64)))
    assert out.shape == (1, 64, 64, 16)


def test_forward_deterministic():
    net = small_net()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 16, 16))
    a = net.forward(x)
    b = net.forward(x)
    assert np.array_equal(a, b)


def test_forward_rejects_bad_dims():
    net = small_net()
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 10, 10)))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 16, 18)))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 16, 16, 2)))


def test_eval_mode_uses_running_stats():
    net = small_net()
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 8, 8))
    before = {k: v.copy() for k, v in net.running.items()}
    net.forward(x, training=False)
    for k in before:
        assert np.array_equal(net.running[k], before[k])
    net.forward(x, training=True)
    changed = any(not np.array_equal(net.running[k], before[k])
                  for k in before)
    assert changed


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((50, 7)) * 300.0
    s = softmax(z)
    assert np.abs(s.sum(axis=-1) - 1.0).max() < 1e-9
    assert (s >= 0.0).all()


# ---------------------------------------------------------------------------
# losses


def test_data_loss_uniform_heads_is_log_k():
    # one sample, exactly one valid pixel, zero heads -> uniform softmax
    for K in (2, 3, 20):
        heads = ClassifierHeads.zeros(1, K, 4)
        feats = np.ones((1, 4, 4, 4))
        valid = np.zeros((1, 4, 4), dtype=bool)
        valid[0, 1, 2] = True
        batch = TrainBatch(np.zeros((1, 4, 4)),
                           np.ones((1, 4, 4), dtype=np.int64), valid,
                           np.zeros(1, dtype=np.int64))
        assert abs(loss_data(feats, heads, batch) - np.log(K)) < 1e-9


def test_data_loss_saturated_softmax_near_zero():
    K = 3
    heads = ClassifierHeads(20.0 * np.eye(K)[None])  # logit margin 20
    rng = np.random.default_rng(5)
    labels = rng.integers(0, K, size=(1, 4, 4))
    feats = np.eye(K)[labels]  # one-hot features, d == K
    valid = np.ones((1, 4, 4), dtype=bool)
    batch = TrainBatch(np.zeros((1, 4, 4)), labels, valid,
                       np.zeros(1, dtype=np.int64))
    per_pixel = loss_data(feats, heads, batch) / valid.sum()
    assert 0.0 <= per_pixel < 1e-8


def test_data_loss_matches_scalar_oracle():
    rng = np.random.default_rng(6)
    feats = rng.standard_normal((2, 3, 3, 4))
    heads = ClassifierHeads(rng.standard_normal((2, 3, 4)))
    batch = random_batch(rng, B=2, H=3, W=3)
    got = loss_data(feats, heads, batch)
    want = data_loss_oracle(feats, heads.weights, batch.labels, batch.valid,
                            batch.seg_ids)
    assert abs(got - want) < 1e-10
    assert got >= 0.0


def test_data_loss_empty_valid_raises():
    heads = ClassifierHeads.zeros(1, 3, 4)
    batch = TrainBatch(np.zeros((1, 4, 4)),
                       np.zeros((1, 4, 4), dtype=np.int64),
                       np.zeros((1, 4, 4), dtype=bool),
                       np.zeros(1, dtype=np.int64))
    with pytest.raises(ValueError):
        loss_data(np.zeros((1, 4, 4, 4)), heads, batch)


def test_data_loss_rejects_out_of_range_labels():
    heads = ClassifierHeads.zeros(1, 3, 4)
    labels = np.full((1, 4, 4), 7, dtype=np.int64)
    batch = TrainBatch(np.zeros((1, 4, 4)), labels,
                       np.ones((1, 4, 4), dtype=bool),
                       np.zeros(1, dtype=np.int64))
    with pytest.raises(ValueError):
        loss_data(np.zeros((1, 4, 4, 4)), heads, batch)


def test_reg_loss_identical_features_zero():
    feats = np.ones((1, 4, 4, 5))
    batch = random_batch(np.random.default_rng(7), B=1, H=4, W=4)
    assert loss_reg(feats, batch) == 0.0


def test_reg_loss_single_pair_value():
    # two labels, means differing by v -> loss is -(v . v)
    labels = np.zeros((1, 2, 4), dtype=np.int64)
    labels[0, :, 2:] = 1
    valid = np.ones((1, 2, 4), dtype=bool)
    batch = TrainBatch(np.zeros((1, 2, 4)), labels, valid,
                       np.zeros(1, dtype=np.int64))
    feats = np.zeros((1, 2, 4, 3))
    feats[0, :, 2:, :] = np.array([1.0, 2.0, -1.0])
    assert loss_reg(feats, batch) == pytest.approx(-6.0, abs=1e-12)


def test_reg_loss_matches_bruteforce_oracle():
    rng = np.random.default_rng(8)
    feats = rng.standard_normal((3, 6, 6, 4))
    batch = random_batch(rng, B=3, H=6, W=6, n_labels=3)
    got = loss_reg(feats, batch)
    want = reg_loss_oracle(feats, batch.labels, batch.valid)
    assert abs(got - want) < 1e-10
    assert got <= 0.0


def test_reg_loss_clamps_distant_pairs():
    labels = np.zeros((1, 2, 2), dtype=np.int64)
    labels[0, :, 1] = 1
    valid = np.ones((1, 2, 2), dtype=bool)
    batch = TrainBatch(np.zeros((1, 2, 2)), labels, valid,
                       np.zeros(1, dtype=np.int64))
    feats = np.zeros((1, 2, 2, 2))
    feats[0, :, 1, 0] = 50.0  # squared separation 2500 > clamp
    assert loss_reg(feats, batch) == pytest.approx(-100.0, abs=1e-12)


def test_reg_loss_single_label_sample_contributes_zero():
    labels = np.zeros((1, 4, 4), dtype=np.int64)
    valid = np.ones((1, 4, 4), dtype=bool)
    batch = TrainBatch(np.zeros((1, 4, 4)), labels, valid,
                       np.zeros(1, dtype=np.int64))
    rng = np.random.default_rng(9)
    assert loss_reg(rng.standard_normal((1, 4, 4, 3)), batch) == 0.0


# ---------------------------------------------------------------------------
# gradients


def flatten_params(net, heads):
    names = net.param_names()
    vecs = [net.params[n].ravel() for n in names]
    vecs.append(heads.weights.ravel())
    return np.concatenate(vecs)


def write_params(net, heads, vec):
    pos = 0
    for n in net.param_names():
        size = net.params[n].size
        net.params[n] = vec[pos:pos + size].reshape(net.params[n].shape).copy()
        pos += size
    heads.weights = vec[pos:].reshape(heads.weights.shape).copy()


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    net = small_net(channels=4, out_dim=4, seed=11)
    heads = ClassifierHeads(0.1 * rng.standard_normal((2, 3, 4)))
    batch = random_batch(rng, B=2, H=8, W=8)
    reg_weight = 1e-2

    lt, _, _, grads, dtheta = gradient(net, heads, batch, reg_weight)
    analytic = np.concatenate(
        [grads[n].ravel() for n in net.param_names()] + [dtheta.ravel()])

    base = flatten_params(net, heads)
    probes = rng.choice(base.size, size=100, replace=False)
    h = 1e-4
    worst = 0.0
    for p in probes:
        vec = base.copy()
        vec[p] = base[p] + h
        write_params(net, heads, vec)
        lp = gradient(net, heads, batch, reg_weight)[0]
        vec[p] = base[p] - h
        write_params(net, heads, vec)
        lm = gradient(net, heads, batch, reg_weight)[0]
        fd = (lp - lm) / (2 * h)
        scale = max(abs(fd), abs(analytic[p]), 1e-6)
        worst = max(worst, abs(fd - analytic[p]) / scale)
    write_params(net, heads, base)
    assert worst < 1e-4


def test_gradient_linearity_in_reg_weight():
    rng = np.random.default_rng(12)
    net = small_net(seed=13)
    heads = ClassifierHeads(0.1 * rng.standard_normal((2, 3, 4)))
    batch = random_batch(rng, B=2, H=8, W=8)
    _, _, _, g0, h0 = gradient(net, heads, batch, 0.0)
    _, _, _, g1, h1 = gradient(net, heads, batch, 1.0)
    lam = 0.37
    _, _, _, gl, hl = gradient(net, heads, batch, lam)
    for n in g0:
        want = g0[n] + lam * (g1[n] - g0[n])
        assert np.allclose(gl[n], want, atol=1e-9)
    assert np.allclose(hl, h0 + lam * (h1 - h0), atol=1e-9)


def test_unused_head_gets_zero_gradient():
    rng = np.random.default_rng(14)
    net = small_net(seed=15)
    heads = ClassifierHeads(0.1 * rng.standard_normal((3, 3, 4)))
    batch = random_batch(rng, B=2, H=8, W=8, n_segs=2)  # head 2 unused
    _, _, _, _, dtheta = gradient(net, heads, batch, 1e-3)
    assert (dtheta[2] == 0.0).all()
    assert (dtheta[:2] != 0.0).any()


# ---------------------------------------------------------------------------
# training


def two_label_dataset(rng, n=8, H=16, W=16):
    # label follows a depth step; the net must learn the association
    images = np.empty((n, H, W))
    labels = np.empty((n, H, W), dtype=np.int64)
    for i in range(n):
        split = int(rng.integers(W // 4, 3 * W // 4))
        img = np.full((H, W), 0.3) + 0.02 * rng.standard_normal((H, W))
        img[:, split:] += 0.4
        lab = np.zeros((H, W), dtype=np.int64)
        lab[:, split:] = 1
        images[i], labels[i] = img, lab
    valid = np.ones((n, H, W), dtype=bool)
    return TrainBatch(images, labels, valid, np.zeros(n, dtype=np.int64))


def test_train_zero_steps_is_identity():
    net = small_net(seed=16)
    heads = ClassifierHeads.zeros(1, 2, 4)
    before = {k: v.copy() for k, v in net.params.items()}
    dataset = two_label_dataset(np.random.default_rng(17))
    history = train(net, heads, dataset, TrainConfig(seed=0, steps=0))
    assert history["loss_data"] == []
    for k, v in before.items():
        assert np.array_equal(net.params[k], v)
    assert (heads.weights == 0.0).all()


def test_train_reduces_data_loss():
    net = small_net(seed=18)
    heads = ClassifierHeads.zeros(1, 2, 4)
    dataset = two_label_dataset(np.random.default_rng(19))
    cfg = TrainConfig(seed=1, steps=500, learning_rate=0.002, batch_size=4)
    history = train(net, heads, dataset, cfg)
    assert history["loss_data"][-1] < history["loss_data"][0]
    # must actually classify: uniform would sit at ln 2 per pixel
    per_pixel = history["loss_data"][-1] / (16 * 16)
    assert per_pixel < 0.3 * np.log(2.0)


def test_train_deterministic_per_seed():
    def run():
        net = small_net(seed=20)
        heads = ClassifierHeads.zeros(1, 2, 4)
        dataset = two_label_dataset(np.random.default_rng(21))
        hist = train(net, heads, dataset,
                     TrainConfig(seed=2, steps=30, learning_rate=0.002))
        return hist, net, heads

    h1, n1, hd1 = run()
    h2, n2, hd2 = run()
    assert h1["loss_total"] == h2["loss_total"]
    for k in n1.params:
        assert np.array_equal(n1.params[k], n2.params[k])
    assert np.array_equal(hd1.weights, hd2.weights)


def test_train_divergence_reports_step():
    net = small_net(seed=22)
    heads = ClassifierHeads.zeros(1, 2, 4)
    dataset = two_label_dataset(np.random.default_rng(23))
    with pytest.raises(TrainingError) as exc:
        with np.errstate(over="ignore", invalid="ignore"):
            train(net, heads, dataset,
                  TrainConfig(seed=3, steps=200, learning_rate=1e9))
    assert exc.value.step is not None


def test_train_empty_dataset_rejected():
    net = small_net(seed=24)
    heads = ClassifierHeads.zeros(1, 2, 4)
    empty = TrainBatch(np.zeros((0, 8, 8)), np.zeros((0, 8, 8), np.int64),
                       np.zeros((0, 8, 8), bool), np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        train(net, heads, empty, TrainConfig(seed=0, steps=1))


# ---------------------------------------------------------------------------
# containers and helpers


def test_weight_container_roundtrip(tmp_path):
    rng = np.random.default_rng(25)
    net = small_net(channels=3, out_dim=5, seed=26)
    heads = ClassifierHeads(rng.standard_normal((2, 4, 5)))
    path = str(tmp_path / "weights.pdmw")
    save_weights(path, net, heads)
    net2, heads2 = load_weights(path)
    assert net2.channels == 3 and net2.out_dim == 5
    for k in net.params:
        assert np.array_equal(net2.params[k],
                              net.params[k].astype(np.float32))
    for k in net.running:
        assert np.array_equal(net2.running[k],
                              net.running[k].astype(np.float32))
    assert np.array_equal(heads2.weights,
                          heads.weights.astype(np.float32))
    x = rng.standard_normal((1, 8, 8))
    a = net.forward(x)
    b = net2.forward(x)
    assert np.abs(a - b).max() < 1e-5


def test_weight_container_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.pdmw"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_weights(str(bad))
    short = tmp_path / "short.pdmw"
    net = small_net(seed=27)
    heads = ClassifierHeads.zeros(1, 2, 4)
    save_weights(str(short), net, heads)
    data = short.read_bytes()
    short.write_bytes(data[:-40])
    with pytest.raises(FormatError):
        load_weights(str(short))


def test_train_batch_validation():
    with pytest.raises(ValueError):
        TrainBatch(np.zeros((2, 4, 4)), np.zeros((2, 4, 5), np.int64),
                   np.zeros((2, 4, 4), bool), np.zeros(2, np.int64))
    with pytest.raises(ValueError):
        TrainBatch(np.zeros((2, 4, 4)), np.zeros((2, 4, 4), np.int64),
                   np.zeros((2, 4, 4), bool), np.zeros(3, np.int64))


def test_normalize_depth():
    from pdm4d.camera import CMCamera
    from pdm4d.render import render_pdm
    from pdm4d import synth
    mesh = synth.rotate_mesh(synth.icosphere(1, radius=0.5),
                             (1.0, 0.7, 0.3), 0.41)
    center, r = mesh.bounding_sphere()
    cam = CMCamera(center=tuple(center), radius=2.5 * r,
                   inclination_deg=0.0, width=64, height=32)
    pdm = render_pdm(cam, mesh)
    img = normalize_depth(pdm)
    assert (img[~pdm.valid] == 0.0).all()
    assert img[pdm.valid].max() <= 1.0
    assert img[pdm.valid].min() > 0.0
