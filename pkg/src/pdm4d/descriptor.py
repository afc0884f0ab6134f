"""Per-pixel feature descriptor: a two-level encoder-decoder over depth
panoramas, trained from scratch with hand-written backpropagation.

The network maps a normalized single-channel depth image to a per-pixel
feature vector. Per-segmentation linear softmax heads classify each valid
pixel into its patch label (the classification loss), while a separation
loss pushes the mean features of different patches apart. Everything runs
in float64 numpy; no autograd, so gradients are verified against finite
differences in the tests.

Layout convention: images and activations are channel-last, (B, H, W, C).
"""

import json
import logging
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import TrainingError

log = logging.getLogger(__name__)

LEVELS = 2                # pooling steps; input dims must divide 2**LEVELS
_BN_EPS = 1e-5
_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


# ---------------------------------------------------------------------------
# layer primitives


def _conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution. w is (3, 3, Cin, Cout)."""
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((B, H, W, 9, C))
    for k, (dy, dx) in enumerate(_OFFSETS):
        cols[:, :, :, k, :] = xp[:, dy:dy + H, dx:dx + W, :]
    wm = w.reshape(9 * C, -1)
    y = cols.reshape(B * H * W, 9 * C) @ wm + b
    return y.reshape(B, H, W, -1), cols


def _conv3x3_backward(dy, cols, w):
    B, H, W, O = dy.shape
    C = cols.shape[-1]
    dyf = dy.reshape(B * H * W, O)
    dw = (cols.reshape(B * H * W, 9 * C).T @ dyf).reshape(3, 3, C, O)
    db = dyf.sum(axis=0)
    dcols = (dyf @ w.reshape(9 * C, O).T).reshape(B, H, W, 9, C)
    dxp = np.zeros((B, H + 2, W + 2, C))
    for k, (dy_, dx_) in enumerate(_OFFSETS):
        dxp[:, dy_:dy_ + H, dx_:dx_ + W, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _bn_forward(x, gamma, beta, training, running_mean, running_var,
                momentum):
    if training:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x - mean) * invstd
    return gamma * xhat + beta, (xhat, invstd, gamma)


def _bn_backward(dy, cache):
    xhat, invstd, gamma = cache
    m = dy.shape[0] * dy.shape[1] * dy.shape[2]
    dbeta = dy.sum(axis=(0, 1, 2))
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dxhat = dy * gamma
    dx = (invstd / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2))
                         - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
    return dx, dgamma, dbeta


def _maxpool_forward(x):
    B, H, W, C = x.shape
    xr = x.reshape(B, H // 2, 2, W // 2, 2, C)
    flat = xr.transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool_backward(dy, idx, x_shape):
    B, H, W, C = x_shape
    dflat = np.zeros((B, H // 2, W // 2, C, 4))
    np.put_along_axis(dflat, idx[..., None], dy[..., None], axis=-1)
    return (dflat.reshape(B, H // 2, W // 2, C, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C))


def _upsample(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample_backward(dy):
    B, H, W, C = dy.shape
    return dy.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


def softmax(logits):
    """Row-wise stable softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# network


# conv blocks in execution order: name, channel multiplier in/out
_BLOCKS = (("stem", None, 1), ("enc1", 1, 1), ("enc2", 1, 2),
           ("mid", 2, 2), ("dec1", 2, 1), ("dec2", 1, 1))


class DescriptorNet:
    """Two-level encoder-decoder with additive skip connections.

    Path: stem -> enc1 (skip) -> pool -> enc2 (skip) -> pool -> mid ->
    upsample+skip -> dec1 -> upsample+skip -> dec2 -> linear output conv.
    Every conv block is 3x3 + batch norm + ReLU; the output conv is 3x3
    linear. Channel width is `channels` at full resolution and doubles at
    the pooled level.
    """

    def __init__(self, channels=8, out_dim=16, seed=0, bn_momentum=0.1):
        self.channels = int(channels)
        self.out_dim = int(out_dim)
        self.bn_momentum = float(bn_momentum)
        self.params = {}
        self.running = {}
        rng = np.random.default_rng(seed)
        for name, mul_in, mul_out in _BLOCKS:
            cin = 1 if name == "stem" else self.channels * mul_in
            cout = self.channels * mul_out
            fan_in = 9 * cin
            self.params[name + "_w"] = (rng.standard_normal((3, 3, cin, cout))
                                        * np.sqrt(2.0 / fan_in))
            self.params[name + "_b"] = np.zeros(cout)
            self.params[name + "_g"] = np.ones(cout)
            self.params[name + "_beta"] = np.zeros(cout)
            self.running[name + "_mean"] = np.zeros(cout)
            self.running[name + "_var"] = np.ones(cout)
        fan_in = 9 * self.channels
        self.params["out_w"] = (rng.standard_normal(
            (3, 3, self.channels, self.out_dim)) / np.sqrt(fan_in))
        self.params["out_b"] = np.zeros(self.out_dim)

    def param_names(self):
        return sorted(self.params)

    def _block_forward(self, x, name, training, cache):
        p = self.params
        y, cols = _conv3x3_forward(x, p[name + "_w"], p[name + "_b"])
        y, bn_cache = _bn_forward(y, p[name + "_g"], p[name + "_beta"],
                                  training, self.running[name + "_mean"],
                                  self.running[name + "_var"],
                                  self.bn_momentum)
        mask = y > 0.0
        cache[name] = (cols, bn_cache, mask)
        return np.where(mask, y, 0.0)

    def _block_backward(self, dy, name, grads, cache):
        cols, bn_cache, mask = cache[name]
        dy = np.where(mask, dy, 0.0)
        dy, dg, dbeta = _bn_backward(dy, bn_cache)
        dx, dw, db = _conv3x3_backward(dy, cols, self.params[name + "_w"])
        grads[name + "_w"] = dw
        grads[name + "_b"] = db
        grads[name + "_g"] = dg
        grads[name + "_beta"] = dbeta
        return dx

    def forward(self, images, training=False, cache_out=None):
        """(B, H, W) or (B, H, W, 1) images -> (B, H, W, out_dim) features."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[..., None]
        B, H, W, C = x.shape
        if C != 1:
            raise ValueError(f"expected single-channel input, got {C}")
        div = 2 ** LEVELS
        if H % div or W % div:
            raise ValueError(
                f"input dims must be divisible by {div}, got {H}x{W}")
        cache = {} if cache_out is None else cache_out
        a0 = self._block_forward(x, "stem", training, cache)
        skip1 = self._block_forward(a0, "enc1", training, cache)
        p1, idx1 = _maxpool_forward(skip1)
        skip2 = self._block_forward(p1, "enc2", training, cache)
        p2, idx2 = _maxpool_forward(skip2)
        a3 = self._block_forward(p2, "mid", training, cache)
        u1 = _upsample(a3) + skip2
        a4 = self._block_forward(u1, "dec1", training, cache)
        u2 = _upsample(a4) + skip1
        a5 = self._block_forward(u2, "dec2", training, cache)
        out, out_cols = _conv3x3_forward(a5, self.params["out_w"],
                                         self.params["out_b"])
        cache["out_cols"] = out_cols
        cache["pool"] = (idx1, skip1.shape, idx2, skip2.shape)
        return out

    def backward(self, dout, cache):
        """Gradients of every parameter given d(loss)/d(features)."""
        grads = {}
        idx1, shape1, idx2, shape2 = cache["pool"]
        dx, dw, db = _conv3x3_backward(dout, cache["out_cols"],
                                       self.params["out_w"])
        grads["out_w"] = dw
        grads["out_b"] = db
        dx = self._block_backward(dx, "dec2", grads, cache)
        dskip1 = dx
        dx = _upsample_backward(dx)
        dx = self._block_backward(dx, "dec1", grads, cache)
        dskip2 = dx
        dx = _upsample_backward(dx)
        dx = self._block_backward(dx, "mid", grads, cache)
        dx = _maxpool_backward(dx, idx2, shape2) + dskip2
        dx = self._block_backward(dx, "enc2", grads, cache)
        dx = _maxpool_backward(dx, idx1, shape1) + dskip1
        dx = self._block_backward(dx, "enc1", grads, cache)
        dx = self._block_backward(dx, "stem", grads, cache)
        return grads


@dataclass
class ClassifierHeads:
    """One linear softmax classifier per segmentation, sharing the
    descriptor's feature space. weights: (n_segmentations, n_labels, dim)."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValueError("head weights must be (segmentations, labels, "
                             "feature dim)")

    @classmethod
    def zeros(cls, n_segmentations, n_labels, dim):
        return cls(np.zeros((n_segmentations, n_labels, dim)))


@dataclass
class TrainBatch:
    """Stacked training samples: normalized depth images, per-pixel patch
    labels, validity masks and the segmentation id each sample's labels
    came from."""

    images: np.ndarray    # (B, H, W) float64, invalid pixels 0
    labels: np.ndarray    # (B, H, W) int64, only read where valid
    valid: np.ndarray     # (B, H, W) bool
    seg_ids: np.ndarray   # (B,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.seg_ids = np.asarray(self.seg_ids, dtype=np.int64)
        if not (self.images.shape == self.labels.shape == self.valid.shape):
            raise ValueError("images, labels and valid must share a shape")
        if len(self.seg_ids) != len(self.images):
            raise ValueError("one segmentation id per sample required")

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return TrainBatch(self.images[idx], self.labels[idx],
                          self.valid[idx], self.seg_ids[idx])


def normalize_depth(pdm):
    """Depth scaled by the ring radius to roughly [0,1]; invalid pixels 0."""
    return np.where(pdm.valid, pdm.depth / pdm.camera.radius, 0.0)


# ---------------------------------------------------------------------------
# losses


def _data_loss_and_grad(features, heads, batch):
    B = len(batch)
    theta = heads.weights
    total = 0.0
    dfeat = np.zeros_like(features)
    dtheta = np.zeros_like(theta)
    n_valid = 0
    for i in range(B):
        v = batch.valid[i]
        if not v.any():
            continue
        f = features[i][v]                      # (P, dim)
        lab = batch.labels[i][v]
        th = theta[batch.seg_ids[i]]            # (n_labels, dim)
        if lab.min() < 0 or lab.max() >= th.shape[0]:
            raise ValueError(f"sample {i}: labels outside [0, "
                             f"{th.shape[0]})")
        logits = f @ th.T
        logp = _log_softmax(logits)
        total -= logp[np.arange(len(lab)), lab].sum()
        dz = softmax(logits)
        dz[np.arange(len(lab)), lab] -= 1.0
        dfeat[i][v] = dz @ th
        dtheta[batch.seg_ids[i]] += dz.T @ f
        n_valid += len(lab)
    if n_valid == 0:
        raise ValueError("no valid pixels in the batch")
    return total / B, dfeat / B, dtheta / B


def _reg_loss_and_grad(features, batch, pair_clamp):
    total = 0.0
    dfeat = np.zeros_like(features)
    for i in range(len(batch)):
        v = batch.valid[i]
        lab = np.where(v, batch.labels[i], -1)
        present = np.unique(lab[lab >= 0])
        if len(present) < 2:
            log.debug("sample %d has %d labels present; separation loss "
                      "contributes 0", i, len(present))
            continue
        means = np.empty((len(present), features.shape[-1]))
        counts = np.empty(len(present))
        masks = []
        for a, l in enumerate(present):
            m = lab == l
            masks.append(m)
            counts[a] = m.sum()
            means[a] = features[i][m].mean(axis=0)
        dmeans = np.zeros_like(means)
        for a in range(len(present)):
            for b in range(a + 1, len(present)):
                diff = means[a] - means[b]
                s = float(diff @ diff)
                if s >= pair_clamp:
                    total -= pair_clamp
                else:
                    total -= s
                    dmeans[a] -= 2.0 * diff
                    dmeans[b] += 2.0 * diff
        for a, m in enumerate(masks):
            dfeat[i][m] += dmeans[a] / counts[a]
    return total, dfeat


def loss_data(features, heads, batch):
    """Mean (over batch) summed cross-entropy of valid pixels."""
    value, _, _ = _data_loss_and_grad(features, heads, batch)
    return value


def loss_reg(features, batch, pair_clamp=100.0):
    """Negated pairwise squared distance between per-label mean features,
    summed per sample; each pair's distance is clamped at `pair_clamp`."""
    value, _ = _reg_loss_and_grad(features, batch, pair_clamp)
    return value


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 500
    learning_rate: float = 0.05
    momentum: float = 0.9
    reg_weight: float = 1e-3
    batch_size: int = 4
    pair_clamp: float = 100.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def gradient(net, heads, batch, reg_weight, pair_clamp=100.0):
    """Total loss and gradients for one batch.

    Returns (loss_total, loss_data, loss_reg, net_grads, head_grads).
    """
    cache = {}
    features = net.forward(batch.images, training=True, cache_out=cache)
    ld, dfeat_d, dtheta = _data_loss_and_grad(features, heads, batch)
    lr_, dfeat_r = _reg_loss_and_grad(features, batch, pair_clamp)
    dfeat = dfeat_d + reg_weight * dfeat_r
    grads = net.backward(dfeat, cache)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name}")
    if not np.isfinite(dtheta).all():
        raise TrainingError("non-finite gradient in head weights")
    return ld + reg_weight * lr_, ld, lr_, grads, dtheta


def train(net, heads, dataset, config):
    """Momentum gradient descent; deterministic per config.seed.

    `dataset` is a TrainBatch holding the full sample pool; each step
    draws config.batch_size samples with the seeded generator. Returns a
    history dict with per-step losses.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    vel = {name: np.zeros_like(p) for name, p in net.params.items()}
    vel_heads = np.zeros_like(heads.weights)
    history = {"loss_data": [], "loss_reg": [], "loss_total": []}
    for step in range(config.steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        batch = dataset.subset(idx)
        try:
            lt, ld, lr_, grads, dtheta = gradient(
                net, heads, batch, config.reg_weight, config.pair_clamp)
        except TrainingError as e:
            raise TrainingError(str(e), step=step) from None
        if not np.isfinite(lt):
            raise TrainingError("loss diverged", step=step)
        for name, g in grads.items():
            vel[name] *= config.momentum
            vel[name] -= config.learning_rate * g
            net.params[name] += vel[name]
        vel_heads *= config.momentum
        vel_heads -= config.learning_rate * dtheta
        heads.weights += vel_heads
        history["loss_data"].append(ld)
        history["loss_reg"].append(lr_)
        history["loss_total"].append(lt)
    return history


# ---------------------------------------------------------------------------
# weight container


_MAGIC = b"PDMW"
_VERSION = 1


def save_weights(path, net, heads):
    """Versioned little-endian container: header JSON + float32 tensors."""
    tensors = []
    payload = []
    items = ([(n, net.params[n]) for n in net.param_names()]
             + [("running/" + n, net.running[n]) for n in
                sorted(net.running)]
             + [("heads", heads.weights)])
    for name, arr in items:
        tensors.append({"name": name, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps({
        "channels": net.channels,
        "out_dim": net.out_dim,
        "bn_momentum": net.bn_momentum,
        "tensors": tensors,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(header)))
        fh.write(header)
        for blob in payload:
            fh.write(blob)


def load_weights(path):
    """Read a container written by save_weights -> (net, heads)."""
    from .errors import FormatError
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise FormatError(f"{path}: not a descriptor weight file")
        version, hlen = struct.unpack("<HI", fh.read(6))
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        net = DescriptorNet(channels=header["channels"],
                            out_dim=header["out_dim"],
                            bn_momentum=header["bn_momentum"])
        heads = None
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise FormatError(f"{path}: truncated tensor "
                                  f"{entry['name']}")
            arr = np.frombuffer(raw, dtype="<f4").astype(
                np.float64).reshape(entry["shape"])
            name = entry["name"]
            if name == "heads":
                heads = ClassifierHeads(arr)
            elif name.startswith("running/"):
                net.running[name[len("running/"):]] = arr.copy()
            else:
                if name not in net.params:
                    raise FormatError(f"{path}: unknown tensor {name}")
                net.params[name] = arr.copy()
    if heads is None:
        raise FormatError(f"{path}: missing head weights")
    return net, heads
