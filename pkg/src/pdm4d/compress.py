"""Trajectory codec: parallel per-coordinate autoencoder plus PCA baseline.

Each vertex trajectory row is split into x/y/z parts, pushed through three
parallel fully-connected encoder stacks, merged into one shared latent layer,
and decoded by three parallel stacks back to per-coordinate trajectories
(seven layers end to end). A clip stores the per-vertex latents, the decoder
tensors, and the reference connectivity, so decoding needs no training-time
state. Rates are swept via the latent and hidden widths.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, TrainingError
from .mesh import MeshSequence, TriangleMesh
from .refine import TrajectoryMatrix

_MAGIC = b"PDMC"
_VERSION = 1

_QUANT_MAX = 32767  # int16 symmetric fixed point


def split_xyz(A):
    """Split trajectory positions into three V x N coordinate matrices."""
    pos = A.positions if isinstance(A, TrajectoryMatrix) else np.asarray(A)
    return pos[:, :, 0].copy(), pos[:, :, 1].copy(), pos[:, :, 2].copy()


def recombine_xyz(x, y, z):
    """Inverse of split_xyz."""
    return np.stack([x, y, z], axis=2)


@dataclass
class CodecConfig:
    """Autoencoder codec tunables.

    latent        : shared bottleneck width (sweeps the rate)
    hidden        : (h1, h2) stack widths; None resolves to (N//2, N//4)
    activation    : 'relu' or 'linear' (linear exists for baseline checks)
    steps         : training iterations
    learning_rate : Adam step size
    lr_decay      : multiplicative per-step learning-rate factor
    batch_size    : trajectory rows per step; clamped to V
    seed          : init + batch sampling seed
    quantize      : store latents and decoder tensors as 16-bit fixed point
    """

    latent: int = 8
    hidden: tuple = None
    activation: str = "relu"
    steps: int = 2000
    learning_rate: float = 1e-3
    lr_decay: float = 1.0
    batch_size: int = 200
    seed: int = 0
    quantize: bool = True

    def __post_init__(self):
        if self.latent < 1:
            raise ValueError("latent width must be >= 1")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.hidden is not None:
            if len(self.hidden) != 2:
                raise ValueError("hidden must be a (h1, h2) pair of widths")
            self.hidden = (int(self.hidden[0]), int(self.hidden[1]))
            if min(self.hidden) < 1:
                raise ValueError("hidden widths must be >= 1")

    def resolve_hidden(self, n_frames):
        if self.hidden is not None:
            return self.hidden
        return max(1, n_frames // 2), max(1, n_frames // 4)

    def to_dict(self):
        return {"latent": self.latent, "hidden": self.hidden,
                "activation": self.activation, "steps": self.steps,
                "learning_rate": self.learning_rate,
                "lr_decay": self.lr_decay, "batch_size": self.batch_size,
                "seed": self.seed, "quantize": self.quantize}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("hidden") is not None:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def _act(x, kind):
    return np.maximum(x, 0.0) if kind == "relu" else x


def _act_grad(pre, kind):
    return (pre > 0.0).astype(np.float64) if kind == "relu" else 1.0


# layer name -> (input width key, output width key); widths resolved per net
_ENC_LAYERS = (("e0", "N", "h1"), ("e1", "h1", "h2"), ("e2", "h2", "c"))
_DEC_LAYERS = (("d0", "c", "h2"), ("d1", "h2", "h1"), ("d2", "h1", "N"))


class AutoencoderCodec:
    """Trained (or freshly initialized) trajectory autoencoder."""

    def __init__(self, config, n_frames, norm, params):
        self.config = config
        self.n_frames = int(n_frames)
        self.norm = np.asarray(norm, dtype=np.float64)  # (3, 2) min/max
        if self.norm.shape != (3, 2):
            raise ValueError("norm must be (3, 2) min/max per coordinate")
        self.params = params

    @classmethod
    def initialize(cls, config, n_frames, norm):
        h1, h2 = config.resolve_hidden(n_frames)
        c = config.latent
        widths = {"N": n_frames, "h1": h1, "h2": h2, "c": c}
        rng = np.random.default_rng(config.seed)
        params = {}

        def dense(name, n_in, n_out, out_layer=False):
            std = np.sqrt((1.0 if out_layer else 2.0) / n_in)
            params[name + "_w"] = std * rng.standard_normal((n_in, n_out))
            # small positive bias keeps narrow ReLU bottlenecks alive at init
            bias = 0.0 if out_layer or config.activation == "linear" else 0.1
            params[name + "_b"] = np.full(n_out, bias)

        last = len(_ENC_LAYERS) - 1
        for b in range(3):
            for i, (name, win, wout) in enumerate(_ENC_LAYERS):
                dense(f"{name}{b}", widths[win], widths[wout],
                      out_layer=(i == last))
        dense("merge", 3 * c, c, out_layer=True)
        for b in range(3):
            for i, (name, win, wout) in enumerate(_DEC_LAYERS):
                dense(f"{name}{b}", widths[win], widths[wout],
                      out_layer=(i == len(_DEC_LAYERS) - 1))
        return cls(config, n_frames, norm, params)

    def param_names(self):
        return sorted(self.params)

    def decoder_names(self):
        return sorted(n for n in self.params if n.startswith("d"))

    # ------------------------------------------------------------------
    # normalization

    def normalize(self, pos):
        lo = self.norm[:, 0]
        span = self.norm[:, 1] - self.norm[:, 0]
        span = np.where(span > 0, span, 1.0)
        return (pos - lo) / span

    def denormalize(self, rows):
        lo = self.norm[:, 0]
        span = self.norm[:, 1] - self.norm[:, 0]
        span = np.where(span > 0, span, 1.0)
        return rows * span + lo

    # ------------------------------------------------------------------
    # forward / backward on normalized rows (B, N, 3)

    def encode_rows(self, rows, cache=None):
        # stack outputs and the merge latent stay linear; a ReLU bottleneck
        # can die irrecoverably at small widths
        act = self.config.activation
        last = len(_ENC_LAYERS) - 1
        merged = []
        for b in range(3):
            x = rows[:, :, b]
            for i, (name, _, _) in enumerate(_ENC_LAYERS):
                pre = x @ self.params[f"{name}{b}_w"] \
                    + self.params[f"{name}{b}_b"]
                if cache is not None:
                    cache[f"{name}{b}_in"], cache[f"{name}{b}_pre"] = x, pre
                x = pre if i == last else _act(pre, act)
            merged.append(x)
        cat = np.concatenate(merged, axis=1)
        pre = cat @ self.params["merge_w"] + self.params["merge_b"]
        if cache is not None:
            cache["merge_in"], cache["merge_pre"] = cat, pre
        return pre

    def decode_rows(self, latent, cache=None):
        act = self.config.activation
        out = []
        for b in range(3):
            x = latent
            last = len(_DEC_LAYERS) - 1
            for i, (name, _, _) in enumerate(_DEC_LAYERS):
                pre = x @ self.params[f"{name}{b}_w"] \
                    + self.params[f"{name}{b}_b"]
                if cache is not None:
                    cache[f"{name}{b}_in"], cache[f"{name}{b}_pre"] = x, pre
                x = pre if i == last else _act(pre, act)
            out.append(x)
        return np.stack(out, axis=2)

    def forward_rows(self, rows, cache=None):
        return self.decode_rows(self.encode_rows(rows, cache), cache)

    def reconstruct(self, positions):
        """Full pipeline on raw positions: normalize, code, denormalize."""
        rows = self.normalize(np.asarray(positions, dtype=np.float64))
        return self.denormalize(self.forward_rows(rows))

    def _backward(self, dout, cache):
        act = self.config.activation
        grads = {}

        def through(name, dpost, linear=False):
            pre, xin = cache[name + "_pre"], cache[name + "_in"]
            dpre = dpost if linear else dpost * _act_grad(pre, act)
            grads[name + "_w"] = xin.T @ dpre
            grads[name + "_b"] = dpre.sum(axis=0)
            return dpre @ self.params[name + "_w"].T

        dlatent = 0.0
        for b in range(3):
            d = dout[:, :, b]
            for i in range(len(_DEC_LAYERS) - 1, -1, -1):
                name = f"{_DEC_LAYERS[i][0]}{b}"
                d = through(name, d, linear=(i == len(_DEC_LAYERS) - 1))
            dlatent = dlatent + d
        dcat = through("merge", dlatent, linear=True)
        c = self.config.latent
        last = len(_ENC_LAYERS) - 1
        for b in range(3):
            d = dcat[:, b * c:(b + 1) * c]
            for i in range(last, -1, -1):
                d = through(f"{_ENC_LAYERS[i][0]}{b}", d,
                            linear=(i == last))
        return grads


def train_codec(A, config=None):
    """Fit the autoencoder to trajectory rows by Adam on MSE.

    Returns (codec, history) with history["loss"] per step. Deterministic
    for a fixed config. Non-finite loss aborts with the step index.
    """
    if config is None:
        config = CodecConfig()
    pos = A.positions if isinstance(A, TrajectoryMatrix) else \
        np.asarray(A, dtype=np.float64)
    V, N = pos.shape[:2]
    norm = np.stack([pos[:, :, b].min() for b in range(3)] +
                    [pos[:, :, b].max() for b in range(3)]).reshape(2, 3).T
    codec = AutoencoderCodec.initialize(config, N, norm)
    rows = codec.normalize(pos)

    rng = np.random.default_rng(config.seed + 1)
    batch = min(config.batch_size, V)
    m = {k: np.zeros_like(v) for k, v in codec.params.items()}
    v2 = {k: np.zeros_like(v) for k, v in codec.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr = config.learning_rate
    history = {"loss": []}
    for step in range(config.steps):
        idx = rng.choice(V, size=batch, replace=False) if batch < V \
            else np.arange(V)
        target = rows[idx]
        cache = {}
        out = codec.forward_rows(target, cache)
        diff = out - target
        loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            raise TrainingError("codec loss diverged", step=step)
        grads = codec._backward(2.0 * diff / diff.size, cache)
        t = step + 1
        for k in codec.params:
            g = grads[k]
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {k}", step=step)
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v2[k] = beta2 * v2[k] + (1 - beta2) * g * g
            mhat = m[k] / (1 - beta1 ** t)
            vhat = v2[k] / (1 - beta2 ** t)
            codec.params[k] -= lr * mhat / (np.sqrt(vhat) + eps)
        history["loss"].append(loss)
        lr *= config.lr_decay
    return codec, history


# ---------------------------------------------------------------------------
# clip container


@dataclass
class CompressedClip:
    """Self-contained compressed motion clip."""

    header: dict
    latents: np.ndarray        # (V, c) float32, or int16 when quantized
    latent_scale: float
    decoder: dict              # name -> float32 or int16 tensor
    decoder_scales: dict       # name -> float
    faces: np.ndarray          # (F, 3) int32 reference connectivity

    def payload_bytes(self):
        total = self.latents.nbytes
        total += sum(t.nbytes for t in self.decoder.values())
        return total

    def connectivity_bytes(self):
        return self.faces.nbytes


def bpvf(clip, V, N):
    """Bits per vertex per frame of the coded payload.

    Counts latent and decoder sections; connectivity is reported separately
    (see CompressedClip.connectivity_bytes).
    """
    return 8.0 * clip.payload_bytes() / (V * N)


def _quantize(arr):
    arr = np.asarray(arr, dtype=np.float64)
    peak = float(np.abs(arr).max()) if arr.size else 0.0
    scale = peak / _QUANT_MAX if peak > 0 else 1.0
    q = np.clip(np.rint(arr / scale), -_QUANT_MAX, _QUANT_MAX)
    return q.astype("<i2"), scale


def _dequantize(q, scale):
    return q.astype(np.float64) * scale


def encode(A, codec, faces):
    """Compress a trajectory matrix into a self-contained clip."""
    pos = A.positions if isinstance(A, TrajectoryMatrix) else \
        np.asarray(A, dtype=np.float64)
    ref = A.ref_frame if isinstance(A, TrajectoryMatrix) else 0
    V, N = pos.shape[:2]
    if N != codec.n_frames:
        raise ValueError(f"codec expects {codec.n_frames} frames, got {N}")
    latent = codec.encode_rows(codec.normalize(pos))

    quant = codec.config.quantize
    if quant:
        latents, latent_scale = _quantize(latent)
    else:
        latents, latent_scale = latent.astype("<f4"), 1.0
    decoder, scales = {}, {}
    for name in codec.decoder_names():
        if quant:
            decoder[name], scales[name] = _quantize(codec.params[name])
        else:
            decoder[name] = codec.params[name].astype("<f4")
            scales[name] = 1.0

    h1, h2 = codec.config.resolve_hidden(N)
    header = {
        "vertex_count": V,
        "frame_count": N,
        "ref_frame": int(ref),
        "latent": codec.config.latent,
        "hidden": [h1, h2],
        "activation": codec.config.activation,
        "quantize": bool(quant),
        "norm": codec.norm.tolist(),
        "latent_scale": latent_scale,
        "decoder_scales": {n: scales[n] for n in sorted(scales)},
        "decoder_shapes": {n: list(decoder[n].shape)
                           for n in sorted(decoder)},
        "face_count": int(len(faces)),
    }
    faces = np.ascontiguousarray(faces, dtype="<i4").reshape(-1, 3)
    return CompressedClip(header, latents, latent_scale, decoder, scales,
                          faces)


def decode(clip):
    """Reconstruct the trajectory matrix and a constant-topology sequence."""
    h = clip.header
    V, N = h["vertex_count"], h["frame_count"]
    config = CodecConfig(latent=h["latent"], hidden=tuple(h["hidden"]),
                         activation=h["activation"],
                         quantize=h["quantize"])
    params = {}
    for name, tensor in clip.decoder.items():
        if h["quantize"]:
            params[name] = _dequantize(tensor, clip.decoder_scales[name])
        else:
            params[name] = tensor.astype(np.float64)
    codec = AutoencoderCodec(config, N, np.asarray(h["norm"]), params)
    if h["quantize"]:
        latent = _dequantize(clip.latents, clip.latent_scale)
    else:
        latent = clip.latents.astype(np.float64)
    rows = codec.decode_rows(latent)
    positions = codec.denormalize(rows)
    A = TrajectoryMatrix(positions, h["ref_frame"])
    faces = clip.faces.astype(np.int64)
    frames = [TriangleMesh(positions[:, n], faces) for n in range(N)]
    return A, MeshSequence(frames)


def _header_bytes(header):
    return json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode()


def serialize_clip(clip):
    head = _header_bytes(clip.header)
    parts = [struct.pack("<4sHI", _MAGIC, _VERSION, len(head)), head,
             np.ascontiguousarray(clip.latents).tobytes()]
    for name in sorted(clip.decoder):
        parts.append(np.ascontiguousarray(clip.decoder[name]).tobytes())
    parts.append(clip.faces.tobytes())
    return b"".join(parts)


def save_clip(clip, path):
    with open(path, "wb") as fh:
        fh.write(serialize_clip(clip))


def deserialize_clip(data):
    fixed = struct.calcsize("<4sHI")
    if len(data) < fixed:
        raise FormatError("clip header truncated")
    magic, version, hlen = struct.unpack("<4sHI", data[:fixed])
    if magic != _MAGIC:
        raise FormatError(f"bad clip magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported clip version {version}")
    if len(data) < fixed + hlen:
        raise FormatError("clip header truncated")
    try:
        header = json.loads(data[fixed:fixed + hlen].decode())
    except ValueError as exc:
        raise FormatError(f"unreadable clip header: {exc}") from None
    pos = fixed + hlen

    def take(count, dtype):
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(data):
            raise FormatError("clip payload truncated")
        out = np.frombuffer(data[pos:pos + nbytes], dtype=dtype)
        pos += nbytes
        return out

    V, c = header["vertex_count"], header["latent"]
    dtype = "<i2" if header["quantize"] else "<f4"
    latents = take(V * c, dtype).reshape(V, c)
    decoder, scales = {}, {}
    for name in sorted(header["decoder_shapes"]):
        shape = header["decoder_shapes"][name]
        decoder[name] = take(int(np.prod(shape)), dtype).reshape(shape)
        scales[name] = header["decoder_scales"][name]
    faces = take(header["face_count"] * 3, "<i4").reshape(-1, 3)
    if pos != len(data):
        raise FormatError("trailing bytes after clip payload")
    return CompressedClip(header, latents, header["latent_scale"],
                          decoder, scales, faces)


def load_clip(path):
    with open(path, "rb") as fh:
        return deserialize_clip(fh.read())


# ---------------------------------------------------------------------------
# PCA baseline


def pca_encode(A, rank):
    """Per-coordinate truncated PCA of the trajectory rows.

    Rows are centered on the mean trajectory (mean over vertices), which
    makes rank-r reconstruction the best possible affine rank-r fit. Returns
    a dict holding the mean, components, and per-vertex scores.
    """
    pos = A.positions if isinstance(A, TrajectoryMatrix) else \
        np.asarray(A, dtype=np.float64)
    V, N = pos.shape[:2]
    if not 0 <= rank <= min(V, N):
        raise ValueError(f"rank {rank} outside [0, {min(V, N)}]")
    coords = split_xyz(pos)
    mean = np.stack([c.mean(axis=0) for c in coords])          # (3, N)
    comps, scores = [], []
    for b, c in enumerate(coords):
        centered = c - mean[b]
        if rank == 0:
            comps.append(np.zeros((0, N)))
            scores.append(np.zeros((V, 0)))
            continue
        u, s, vt = np.linalg.svd(centered, full_matrices=False)
        comps.append(vt[:rank])                                 # (r, N)
        scores.append(u[:, :rank] * s[:rank])                   # (V, r)
    return {"rank": int(rank), "mean": mean,
            "components": comps, "scores": scores}


def pca_decode(code):
    """Reconstruct (V, N, 3) positions from a pca_encode dict."""
    parts = []
    for b in range(3):
        recon = code["scores"][b] @ code["components"][b] + code["mean"][b]
        parts.append(recon)
    return recombine_xyz(*parts)


def pca_payload_bytes(code, bits=16):
    """Storage accounting for the PCA baseline at the given sample width.

    Counts scores, components, and the mean trajectory for all three
    coordinates; mirrors the autoencoder's payload accounting.
    """
    values = 0
    for b in range(3):
        values += code["scores"][b].size + code["components"][b].size
        values += code["mean"][b].size
    return values * bits // 8
