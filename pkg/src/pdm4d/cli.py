"""Pipeline driver.

One subcommand per stage: ``synth`` builds synthetic mesh sequences,
``render-pdm`` rasterizes them into panoramic depth maps,
``train-descriptor`` fits the per-pixel feature network,
``match`` votes dense correspondences against a reference frame,
``refine`` repairs outlier trajectories, ``compress`` / ``decompress``
run the trajectory codec, and ``evaluate`` writes metric reports
(CSV + JSON + SVG).

Conventions shared by every command:

- settings come from a JSON file (``--config``); ``--seed`` and ``--out``
  override the corresponding config keys;
- all products land under the output directory, next to a
  ``manifest.json`` naming the resolved config, its hash, the hash of
  every input, and every file written;
- commands never modify their inputs, and a failed run removes the
  files it had started to write;
- reruns with identical inputs, config, and seed produce identical
  bytes (all randomness sits behind explicit seeds);
- exit codes: 0 success, 2 config/input validation failure, 1 runtime
  failure.
"""

import argparse
import glob
import hashlib
import json
import os
import re
import sys

import numpy as np

from . import compress as codec_mod
from . import descriptor, geodesic, matching, mesh, metrics, refine, render
from . import synth
from .camera import (CMCamera, DEFAULT_HALF_FOV_DEG,
                     DEFAULT_INCLINATIONS_DEG, DEFAULT_RADIUS_SCALE)

MANIFEST_NAME = "manifest.json"

_PDM_STEM_RE = re.compile(r"frame_(\d{4})_view(\d{2})$")


class ValidationError(Exception):
    """Bad config or missing/inconsistent inputs. Exits with status 2."""


# ---------------------------------------------------------------------------
# config schema plumbing


_REQUIRED = object()


def _v_int(lo=None, hi=None):
    def check(name, value):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{name}: expected an integer, got "
                                  f"{value!r}")
        if lo is not None and value < lo:
            raise ValidationError(f"{name}: must be >= {lo}, got {value}")
        if hi is not None and value > hi:
            raise ValidationError(f"{name}: must be <= {hi}, got {value}")
        return value
    return check


def _v_num(lo=None, strict=False):
    def check(name, value):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{name}: expected a number, got "
                                  f"{value!r}")
        value = float(value)
        if lo is not None and (value <= lo if strict else value < lo):
            op = ">" if strict else ">="
            raise ValidationError(f"{name}: must be {op} {lo}, got {value}")
        return value
    return check


def _v_bool(name, value):
    if not isinstance(value, bool):
        raise ValidationError(f"{name}: expected true/false, got {value!r}")
    return value


def _v_str(choices=None):
    def check(name, value):
        if not isinstance(value, str) or not value:
            raise ValidationError(f"{name}: expected a non-empty string, "
                                  f"got {value!r}")
        if choices is not None and value not in choices:
            raise ValidationError(f"{name}: must be one of "
                                  f"{sorted(choices)}, got {value!r}")
        return value
    return check


def _v_num_list(name, value):
    if not isinstance(value, (list, tuple)) or not value:
        raise ValidationError(f"{name}: expected a non-empty list of "
                              f"numbers, got {value!r}")
    out = []
    for i, item in enumerate(value):
        out.append(_v_num()(f"{name}[{i}]", item))
    return out


def _v_dict(name, value):
    if not isinstance(value, dict):
        raise ValidationError(f"{name}: expected an object, got {value!r}")
    return dict(value)


def _v_opt(inner):
    def check(name, value):
        if value is None:
            return None
        return inner(name, value)
    return check


_V_SEED = _v_int(0, 2 ** 64 - 1)
_V_PATH = _v_str()


def _load_config_file(path):
    if not os.path.isfile(path):
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return raw


def _apply_schema(command, raw, schema):
    unknown = set(raw) - set(schema) - {"out"}
    if unknown:
        raise ValidationError(f"{command}: unknown config keys "
                              f"{sorted(unknown)}")
    cfg = {}
    for key, (default, check) in schema.items():
        if key in raw:
            cfg[key] = check(key, raw[key])
        elif default is _REQUIRED:
            raise ValidationError(f"{command}: config key '{key}' is "
                                  "required")
        else:
            cfg[key] = default
    return cfg


# ---------------------------------------------------------------------------
# input hashing and filesystem helpers


def _require_file(path, what="input"):
    if not os.path.isfile(path):
        raise ValidationError(f"{what} not found: {path}")
    return path


def _require_dir(path, what="input"):
    if not os.path.isdir(path):
        raise ValidationError(f"{what} not found: {path}")
    return path


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_path(path):
    """sha256 of a file, or of a directory's sorted (name, file-hash) list."""
    if os.path.isfile(path):
        return _sha256_file(path)
    h = hashlib.sha256()
    for root, dirs, files in sorted(os.walk(path)):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            rel = os.path.relpath(full, path)
            h.update(f"{rel}:{_sha256_file(full)}\n".encode("utf-8"))
    return h.hexdigest()


def _snapshot(out_dir):
    """Files and directories already under out_dir before the run."""
    files, dirs = set(), set()
    if os.path.isdir(out_dir):
        dirs.add(os.path.abspath(out_dir))
        for root, dnames, fnames in os.walk(out_dir):
            for d in dnames:
                dirs.add(os.path.abspath(os.path.join(root, d)))
            for f in fnames:
                files.add(os.path.abspath(os.path.join(root, f)))
    return files, dirs


def _remove_new(out_dir, before):
    """Delete files/dirs created since the snapshot (partial outputs)."""
    files_before, dirs_before = before
    if not os.path.isdir(out_dir):
        return
    for root, _, fnames in os.walk(out_dir, topdown=False):
        for f in fnames:
            full = os.path.abspath(os.path.join(root, f))
            if full not in files_before:
                try:
                    os.remove(full)
                except OSError:
                    pass
        full = os.path.abspath(root)
        if full not in dirs_before:
            try:
                os.rmdir(full)
            except OSError:
                pass


def _config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_manifest(out_dir, command, cfg, inputs, outputs):
    rel = sorted(os.path.relpath(p, out_dir) for p in outputs)
    # The recorded config identifies the computation, not the destination,
    # so the output directory is excluded from it (and from its hash).
    recorded = {k: v for k, v in cfg.items() if k != "out"}
    manifest = {
        "command": command,
        "config": recorded,
        "config_sha256": _config_hash(recorded),
        "inputs": inputs,
        "outputs": rel,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_sequence(path):
    _require_dir(path, "sequence directory")
    return mesh.load_sequence(path)


def _save_sequence(seq, seq_dir):
    paths = mesh.save_sequence(seq, seq_dir)
    paths.append(os.path.join(seq_dir, mesh.SEQUENCE_MANIFEST))
    return paths


# ---------------------------------------------------------------------------
# synth


def _take(params, key, default, check):
    if key in params:
        return check(f"params.{key}", params.pop(key))
    return default


def _dataclass_params(cls, raw, where):
    fields = set(cls.__dataclass_fields__)
    unknown = set(raw) - fields
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)} "
                              f"(allowed: {sorted(fields)})")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {exc}") from None


def _run_synth(cfg, out_dir):
    kind = cfg["kind"]
    frames = cfg["frames"]
    rng = np.random.default_rng(cfg["seed"])
    p = dict(cfg["params"])

    if kind in ("sphere", "torus", "slab", "rigid"):
        amplitude = _take(p, "amplitude", 0.3, _v_num(lo=0.0))
        if kind == "sphere":
            base = synth.icosphere(
                _take(p, "subdivisions", 2, _v_int(0, 6)),
                _take(p, "radius", 1.0, _v_num(lo=0.0, strict=True)))
        elif kind == "torus":
            base = synth.torus_mesh(
                _take(p, "n_major", 24, _v_int(3)),
                _take(p, "n_minor", 12, _v_int(3)),
                _take(p, "r_major", 1.0, _v_num(lo=0.0, strict=True)),
                _take(p, "r_minor", 0.35, _v_num(lo=0.0, strict=True)))
        elif kind == "slab":
            base = synth.slab_with_holes(
                _take(p, "holes", 1, _v_int(0)),
                _take(p, "cell", 1.0, _v_num(lo=0.0, strict=True)))
        else:
            base = synth.random_convex_mesh(
                rng, _take(p, "points", 40, _v_int(4)))
        if p:
            raise ValidationError(f"params: unknown keys {sorted(p)}")
        offsets = amplitude * rng.standard_normal((frames, 3))
        offsets[0] = 0.0
        seq = synth.rigid_sequence(base, offsets, fps=cfg["fps"])

    elif kind == "arm":
        motion = {
            "shoulder_amp": _take(p, "shoulder_amp", 0.35, _v_num()),
            "shoulder_freq": _take(p, "shoulder_freq", 1.0, _v_num()),
            "elbow_amp": _take(p, "elbow_amp", 0.9, _v_num()),
            "elbow_freq": _take(p, "elbow_freq", 2.0, _v_num()),
            "phase": _take(p, "phase", 0.7, _v_num()),
        }
        vertices = _take(p, "vertices", None, _v_opt(_v_int(20)))
        if vertices is not None:
            if p:
                raise ValidationError(
                    f"params: {sorted(p)} cannot be combined with "
                    "'vertices' (it picks the tube shape)")
            try:
                params = synth.arm_params_for_vertex_count(vertices)
            except ValueError as exc:
                raise ValidationError(f"params.vertices: {exc}") from None
        else:
            params = _dataclass_params(synth.ArmParams, p, "params")
        seq = synth.arm_clip(params, frames, fps=cfg["fps"], **motion)

    elif kind == "chain":
        motion = {
            "amp": _take(p, "amp", 0.45, _v_num()),
            "harmonics": _take(p, "harmonics", 3, _v_int(1)),
            "twist_amp": _take(p, "twist_amp", 0.0, _v_num()),
        }
        vertices = _take(p, "vertices", None, _v_opt(_v_int(20)))
        if vertices is not None:
            joints = _take(p, "joints", 7, _v_int(1))
            if p:
                raise ValidationError(
                    f"params: {sorted(p)} cannot be combined with "
                    "'vertices' (it picks the tube shape)")
            try:
                params = synth.chain_params_for_vertex_count(vertices,
                                                             joints=joints)
            except ValueError as exc:
                raise ValidationError(f"params.vertices: {exc}") from None
        else:
            params = _dataclass_params(synth.ChainParams, p, "params")
        seq = synth.chain_clip(params, frames, seed=cfg["seed"],
                               fps=cfg["fps"], **motion)
    else:  # unreachable: schema restricts kind
        raise ValidationError(f"unknown kind {kind!r}")

    outputs = _save_sequence(seq, os.path.join(out_dir, "sequence"))
    return {}, outputs


# ---------------------------------------------------------------------------
# render-pdm


def _union_bounding_sphere(seq):
    """One sphere that encloses every frame's bounding sphere."""
    spheres = [frame.bounding_sphere() for frame in seq.frames]
    center = np.mean([c for c, _ in spheres], axis=0)
    radius = max(float(np.linalg.norm(c - center)) + r for c, r in spheres)
    return center, radius


def _run_render_pdm(cfg, out_dir):
    seq_dir = _require_dir(cfg["sequence"], "sequence directory")
    seq = mesh.load_sequence(seq_dir)
    center, radius = _union_bounding_sphere(seq)
    cams = [CMCamera(center=tuple(center),
                     radius=cfg["radius_scale"] * radius,
                     inclination_deg=float(th),
                     width=cfg["width"], height=cfg["height"],
                     half_fov_deg=cfg["half_fov_deg"])
            for th in cfg["inclinations_deg"]]

    outputs = []
    seg = None
    if cfg["labels"] > 0:
        counts = {frame.vertex_count for frame in seq.frames}
        if len(counts) != 1:
            raise ValidationError(
                "label rendering needs a topology-constant sequence; "
                f"found vertex counts {sorted(counts)}")
        ref = mesh.select_reference_frame(seq)
        seg = geodesic.generate_segmentation(seq[ref], cfg["labels"],
                                             cfg["seed"])
        seg_path = os.path.join(out_dir, "segmentation.txt")
        mesh.save_segmentation(seg, seg_path)
        outputs.append(seg_path)

    pdm_dir = os.path.join(out_dir, "pdms")
    os.makedirs(pdm_dir, exist_ok=True)
    for n, frame in enumerate(seq.frames):
        for v, cam in enumerate(cams):
            pdm = render.render_pdm(cam, frame, seg)
            stem = os.path.join(pdm_dir, f"frame_{n:04d}_view{v:02d}")
            outputs.extend(render.save_pdm(pdm, stem))
    rig_path = _write_json(os.path.join(out_dir, "rig.json"), {
        "cameras": [cam.to_dict() for cam in cams],
        "frames": len(seq),
        "views": len(cams),
    })
    outputs.append(rig_path)
    return {seq_dir: _hash_path(seq_dir)}, outputs


# ---------------------------------------------------------------------------
# train-descriptor


def _pdm_stems(pdm_dir):
    _require_dir(pdm_dir, "PDM directory")
    stems = sorted(p[:-len(".pfm")]
                   for p in glob.glob(os.path.join(pdm_dir, "*.pfm")))
    if not stems:
        raise ValidationError(f"no PDM files (*.pfm) under {pdm_dir}")
    return stems


def _check_descriptor_size(pdm):
    div = 2 ** descriptor.LEVELS
    H, W = pdm.shape
    if H % div or W % div:
        raise ValidationError(
            f"PDM size {W}x{H} not divisible by {div}; re-render with "
            "compatible width/height for the descriptor net")


def _run_train_descriptor(cfg, out_dir):
    stems = _pdm_stems(cfg["pdms"])
    pdms = [render.load_pdm(stem) for stem in stems]
    if len({p.shape for p in pdms}) != 1:
        raise ValidationError(f"{cfg['pdms']}: PDMs have mixed image sizes")
    _check_descriptor_size(pdms[0])
    for stem, pdm in zip(stems, pdms):
        if pdm.label_map is None:
            raise ValidationError(
                f"{stem}_labels.png not found: render the PDMs with "
                "labels > 0 before training")

    images = np.stack([descriptor.normalize_depth(p) for p in pdms])
    label_maps = np.stack([p.label_map for p in pdms])
    valid = np.stack([p.valid for p in pdms]) & (label_maps >= 0)
    if not valid.any():
        raise ValidationError(f"{cfg['pdms']}: no valid labeled pixels")
    labels = np.where(valid, label_maps, 0)
    n_labels = cfg["n_labels"] or int(labels[valid].max()) + 1

    net = descriptor.DescriptorNet(channels=cfg["channels"],
                                   out_dim=cfg["out_dim"], seed=cfg["seed"],
                                   bn_momentum=cfg["bn_momentum"])
    heads = descriptor.ClassifierHeads.zeros(1, n_labels, cfg["out_dim"])
    batch = descriptor.TrainBatch(images, labels, valid,
                                  np.zeros(len(pdms), dtype=np.int64))
    train_cfg = descriptor.TrainConfig(
        seed=cfg["seed"], steps=cfg["steps"],
        learning_rate=cfg["learning_rate"], momentum=cfg["momentum"],
        reg_weight=cfg["reg_weight"], batch_size=cfg["batch_size"],
        pair_clamp=cfg["pair_clamp"])
    history = descriptor.train(net, heads, batch, train_cfg)

    weights_path = os.path.join(out_dir, "weights.pdmw")
    descriptor.save_weights(weights_path, net, heads)
    history_path = _write_json(
        os.path.join(out_dir, "history.json"),
        {k: [float(x) for x in v] for k, v in history.items()})
    return ({cfg["pdms"]: _hash_path(cfg["pdms"])},
            [weights_path, history_path])


# ---------------------------------------------------------------------------
# match


def _scan_pdm_views(pdm_dir):
    """Map frame index -> {view index -> stem} from rendered file names."""
    by_frame = {}
    for stem in _pdm_stems(pdm_dir):
        m = _PDM_STEM_RE.search(os.path.basename(stem))
        if m is None:
            raise ValidationError(
                f"unrecognized PDM name {stem}.pfm (expected "
                "frame_NNNN_viewVV.pfm, as written by render-pdm)")
        by_frame.setdefault(int(m.group(1)), {})[int(m.group(2))] = stem
    return by_frame


def _frame_features(net, by_frame, n):
    pdms, fields = [], []
    for view in sorted(by_frame[n]):
        pdm = render.load_pdm(by_frame[n][view])
        dense = net.forward(descriptor.normalize_depth(pdm)[None])[0]
        pdms.append(pdm)
        fields.append(matching.feature_field(dense, pdm, view))
    return pdms, fields


def _resolve_ref_frame(cfg_value, seq):
    if cfg_value < 0:
        return mesh.select_reference_frame(seq)
    if cfg_value >= len(seq):
        raise ValidationError(f"ref_frame {cfg_value} outside "
                              f"[0, {len(seq)})")
    return cfg_value


def _run_match(cfg, out_dir):
    seq = _load_sequence(cfg["sequence"])
    weights_path = _require_file(cfg["weights"], "weights file")
    net, _ = descriptor.load_weights(weights_path)
    by_frame = _scan_pdm_views(cfg["pdms"])
    missing = sorted(set(range(len(seq))) - set(by_frame))
    if missing:
        raise ValidationError(
            f"{cfg['pdms']}: no PDMs for frames {missing}")
    for pdm in (render.load_pdm(next(iter(by_frame[0].values()))),):
        _check_descriptor_size(pdm)
    ref = _resolve_ref_frame(cfg["ref_frame"], seq)

    corres_dir = os.path.join(out_dir, "corres")
    os.makedirs(corres_dir, exist_ok=True)
    pdms_ref, fields_ref = _frame_features(net, by_frame, ref)
    outputs = []
    unmatched = {}
    for n in range(len(seq)):
        if n == ref:
            continue
        pdms_n, fields_n = _frame_features(net, by_frame, n)
        corres, _ = matching.vote(seq[ref], seq[n], fields_ref, fields_n,
                                  pdms_ref, pdms_n)
        unmatched[str(n)] = int((corres < 0).sum())
        path = os.path.join(corres_dir, f"frame_{n:04d}.txt")
        matching.save_correspondence(path, corres)
        outputs.append(path)
    meta_path = _write_json(os.path.join(out_dir, "match.json"), {
        "ref_frame": ref,
        "frames": len(seq),
        "unmatched": unmatched,
    })
    outputs.append(meta_path)
    inputs = {path: _hash_path(path)
              for path in (cfg["sequence"], cfg["pdms"], weights_path)}
    return inputs, outputs


# ---------------------------------------------------------------------------
# refine


def _run_refine(cfg, out_dir):
    seq = _load_sequence(cfg["sequence"])
    corres_dir = _require_dir(cfg["corres"], "correspondence directory")
    ref = cfg["ref_frame"]
    if ref < 0:
        meta_path = os.path.join(corres_dir, "match.json")
        if not os.path.isfile(meta_path):
            raise ValidationError(
                f"ref_frame not configured and {meta_path} not found")
        with open(meta_path, "r", encoding="utf-8") as fh:
            ref = int(json.load(fh)["ref_frame"])
    if not 0 <= ref < len(seq):
        raise ValidationError(f"ref_frame {ref} outside [0, {len(seq)})")

    frame_dir = corres_dir
    if os.path.isdir(os.path.join(corres_dir, "corres")):
        frame_dir = os.path.join(corres_dir, "corres")
    correspondences = {}
    for n in range(len(seq)):
        if n == ref:
            continue
        path = os.path.join(frame_dir, f"frame_{n:04d}.txt")
        _require_file(path, "correspondence file")
        correspondences[n] = matching.load_correspondence(path)

    A = refine.build_trajectory_matrix(seq, ref, correspondences)
    refine_cfg = refine.RefineConfig(
        threshold=cfg["threshold"], neighbors=cfg["neighbors"],
        anchors=cfg["anchors"], max_sweeps=cfg["max_sweeps"])
    result = refine.refine_sequence(A, seq, refine_cfg)

    traj_path = os.path.join(out_dir, "trajectory.pdmt")
    refine.save_trajectory(result.trajectory, traj_path)
    report_path = _write_json(os.path.join(out_dir, "refine.json"), {
        "ref_frame": ref,
        "sweep_energies": [float(e) for e in result.sweep_energies],
        "outliers_before": int(result.flags_before.sum()),
        "outliers_after": int(result.trajectory.flags.sum()),
        "skipped": len(result.skipped),
    })
    inputs = {path: _hash_path(path)
              for path in (cfg["sequence"], corres_dir)}
    return inputs, [traj_path, traj_path + ".flags", report_path]


# ---------------------------------------------------------------------------
# compress / decompress


def _run_compress(cfg, out_dir):
    traj_path = _require_file(cfg["trajectory"], "trajectory file")
    A = refine.load_trajectory(traj_path)
    seq = _load_sequence(cfg["sequence"])
    V, N = A.positions.shape[:2]
    if A.ref_frame >= len(seq):
        raise ValidationError(
            f"trajectory reference frame {A.ref_frame} outside the "
            f"{len(seq)}-frame sequence {cfg['sequence']}")
    ref_mesh = seq[A.ref_frame]
    if ref_mesh.vertex_count != V:
        raise ValidationError(
            f"trajectory holds {V} vertices but sequence frame "
            f"{A.ref_frame} has {ref_mesh.vertex_count}")

    hidden = cfg["hidden"]
    if hidden is not None and len(hidden) != 2:
        raise ValidationError("hidden: expected two stack widths [h1, h2]")
    codec_cfg = codec_mod.CodecConfig(
        latent=cfg["latent"],
        hidden=tuple(int(h) for h in hidden) if hidden else None,
        activation=cfg["activation"], steps=cfg["steps"],
        learning_rate=cfg["learning_rate"], lr_decay=cfg["lr_decay"],
        batch_size=cfg["batch_size"], seed=cfg["seed"],
        quantize=cfg["quantize"])
    codec, history = codec_mod.train_codec(A, codec_cfg)
    clip = codec_mod.encode(A, codec, ref_mesh.faces)

    clip_path = os.path.join(out_dir, "clip.pdmc")
    codec_mod.save_clip(clip, clip_path)
    stats_path = _write_json(os.path.join(out_dir, "compress.json"), {
        "bpvf": codec_mod.bpvf(clip, V, N),
        "payload_bytes": int(clip.payload_bytes()),
        "connectivity_bytes": int(clip.connectivity_bytes()),
        "final_loss": (float(history["loss"][-1])
                       if history["loss"] else None),
    })
    inputs = {path: _hash_path(path)
              for path in (traj_path, cfg["sequence"])}
    return inputs, [clip_path, stats_path]


def _run_decompress(cfg, out_dir):
    clip_path = _require_file(cfg["clip"], "clip file")
    clip = codec_mod.load_clip(clip_path)
    A, seq = codec_mod.decode(clip)
    outputs = _save_sequence(seq, os.path.join(out_dir, "sequence"))
    traj_path = os.path.join(out_dir, "trajectory.pdmt")
    refine.save_trajectory(A, traj_path)
    outputs.extend([traj_path, traj_path + ".flags"])
    return {clip_path: _hash_path(clip_path)}, outputs


# ---------------------------------------------------------------------------
# evaluate


def _sequence_positions(seq):
    counts = {frame.vertex_count for frame in seq.frames}
    if len(counts) != 1:
        raise ValidationError(
            "evaluation needs a topology-constant sequence; found vertex "
            f"counts {sorted(counts)}")
    return np.stack([frame.vertices for frame in seq.frames], axis=1)


def _run_evaluate(cfg, out_dir):
    seq = _load_sequence(cfg["sequence"])
    inputs = {cfg["sequence"]: _hash_path(cfg["sequence"])}

    if (cfg["clip"] is None) == (cfg["reconstructed"] is None):
        raise ValidationError(
            "exactly one of 'clip' and 'reconstructed' must be configured")
    extra = {}
    if cfg["clip"] is not None:
        clip_path = _require_file(cfg["clip"], "clip file")
        inputs[clip_path] = _hash_path(clip_path)
        clip = codec_mod.load_clip(clip_path)
        A_hat, hat_seq = codec_mod.decode(clip)
        hat_positions = A_hat.positions
        V, N = hat_positions.shape[:2]
        extra = {"bpvf": codec_mod.bpvf(clip, V, N),
                 "payload_bytes": int(clip.payload_bytes())}
    else:
        hat_seq = _load_sequence(cfg["reconstructed"])
        inputs[cfg["reconstructed"]] = _hash_path(cfg["reconstructed"])
        hat_positions = _sequence_positions(hat_seq)

    if cfg["trajectory"] is not None:
        traj_path = _require_file(cfg["trajectory"], "trajectory file")
        inputs[traj_path] = _hash_path(traj_path)
        ref_positions = refine.load_trajectory(traj_path).positions
    else:
        ref_positions = _sequence_positions(seq)
    if ref_positions.shape != hat_positions.shape:
        raise ValidationError(
            f"reference positions {ref_positions.shape} do not match "
            f"reconstruction {hat_positions.shape}")
    if len(seq) != len(hat_seq.frames):
        raise ValidationError(
            f"sequence has {len(seq)} frames, reconstruction "
            f"{len(hat_seq.frames)}")

    reports = [metrics.kg_report(ref_positions, hat_positions),
               metrics.hausdorff_sequence(seq.frames, hat_seq.frames)]

    curve = None
    if cfg["corres_pred"] is not None:
        pred_path = _require_file(cfg["corres_pred"], "correspondence file")
        inputs[pred_path] = _hash_path(pred_path)
        pred = matching.load_correspondence(pred_path)
        frame = cfg["corres_frame"]
        if not 0 <= frame < len(seq):
            raise ValidationError(f"corres_frame {frame} outside "
                                  f"[0, {len(seq)})")
        target = seq[frame]
        if cfg["corres_truth"] == "identity":
            truth = np.arange(len(pred), dtype=np.int64)
        else:
            truth_path = _require_file(cfg["corres_truth"],
                                       "correspondence file")
            inputs[truth_path] = _hash_path(truth_path)
            truth = matching.load_correspondence(truth_path)
        if len(truth) != len(pred):
            raise ValidationError(
                f"prediction maps {len(pred)} vertices, ground truth "
                f"{len(truth)}")
        curve = metrics.correspondence_error_curve(pred, truth, target)
        reports.append(curve)

    report_dir = os.path.join(out_dir, "reports")
    os.makedirs(report_dir, exist_ok=True)
    outputs = [
        metrics.write_frame_csv(reports[:2],
                                os.path.join(report_dir, "frames.csv")),
        metrics.write_summary_json(reports,
                                   os.path.join(report_dir, "summary.json"),
                                   extra=extra),
        metrics.render_report_svg(reports,
                                  os.path.join(report_dir, "report.svg")),
    ]
    if curve is not None:
        outputs.append(metrics.write_curve_csv(
            curve, os.path.join(report_dir, "curve.csv")))
    return inputs, outputs


# ---------------------------------------------------------------------------
# command table and driver


_COMMANDS = {
    "synth": (_run_synth, "generate a synthetic mesh sequence", {
        "kind": (_REQUIRED, _v_str({"sphere", "torus", "slab", "rigid",
                                    "arm", "chain"})),
        "frames": (8, _v_int(1)),
        "fps": (24.0, _v_num(lo=0.0, strict=True)),
        "seed": (0, _V_SEED),
        "params": ({}, _v_dict),
    }),
    "render-pdm": (_run_render_pdm,
                   "rasterize every frame into ring-camera depth maps", {
                       "sequence": (_REQUIRED, _V_PATH),
                       "width": (64, _v_int(4)),
                       "height": (64, _v_int(4)),
                       "half_fov_deg": (DEFAULT_HALF_FOV_DEG,
                                        _v_num(lo=0.0, strict=True)),
                       "radius_scale": (DEFAULT_RADIUS_SCALE,
                                        _v_num(lo=1.0)),
                       "inclinations_deg": (list(DEFAULT_INCLINATIONS_DEG),
                                            _v_num_list),
                       "labels": (0, _v_int(0)),
                       "seed": (0, _V_SEED),
                   }),
    "train-descriptor": (_run_train_descriptor,
                         "fit the per-pixel feature network", {
                             "pdms": (_REQUIRED, _V_PATH),
                             "channels": (8, _v_int(1)),
                             "out_dim": (16, _v_int(1)),
                             "bn_momentum": (0.1, _v_num(lo=0.0)),
                             "n_labels": (0, _v_int(0)),
                             "steps": (500, _v_int(0)),
                             "learning_rate": (0.002,
                                               _v_num(lo=0.0, strict=True)),
                             "momentum": (0.9, _v_num(lo=0.0)),
                             "reg_weight": (1e-3, _v_num(lo=0.0)),
                             "batch_size": (4, _v_int(1)),
                             "pair_clamp": (100.0,
                                            _v_num(lo=0.0, strict=True)),
                             "seed": (0, _V_SEED),
                         }),
    "match": (_run_match,
              "vote dense correspondences against a reference frame", {
                  "sequence": (_REQUIRED, _V_PATH),
                  "pdms": (_REQUIRED, _V_PATH),
                  "weights": (_REQUIRED, _V_PATH),
                  "ref_frame": (-1, _v_int(-1)),
              }),
    "refine": (_run_refine, "repair outlier trajectory entries", {
        "sequence": (_REQUIRED, _V_PATH),
        "corres": (_REQUIRED, _V_PATH),
        "ref_frame": (-1, _v_int(-1)),
        "threshold": (None, _v_opt(_v_num(lo=0.0, strict=True))),
        "neighbors": (32, _v_int(1)),
        "anchors": (20, _v_int(1)),
        "max_sweeps": (8, _v_int(1)),
    }),
    "compress": (_run_compress, "train the codec and write a clip file", {
        "trajectory": (_REQUIRED, _V_PATH),
        "sequence": (_REQUIRED, _V_PATH),
        "latent": (8, _v_int(1)),
        "hidden": (None, _v_opt(_v_num_list)),
        "activation": ("relu", _v_str({"relu", "linear"})),
        "steps": (2000, _v_int(0)),
        "learning_rate": (1e-3, _v_num(lo=0.0, strict=True)),
        "lr_decay": (1.0, _v_num(lo=0.0, strict=True)),
        "batch_size": (200, _v_int(1)),
        "quantize": (True, _v_bool),
        "seed": (0, _V_SEED),
    }),
    "decompress": (_run_decompress, "decode a clip back into meshes", {
        "clip": (_REQUIRED, _V_PATH),
    }),
    "evaluate": (_run_evaluate,
                 "write reconstruction/correspondence quality reports", {
                     "sequence": (_REQUIRED, _V_PATH),
                     "clip": (None, _v_opt(_V_PATH)),
                     "reconstructed": (None, _v_opt(_V_PATH)),
                     "trajectory": (None, _v_opt(_V_PATH)),
                     "corres_pred": (None, _v_opt(_V_PATH)),
                     "corres_truth": ("identity", _V_PATH),
                     "corres_frame": (0, _v_int(0)),
                 }),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pdm4d",
        description="Panoramic-depth correspondence and trajectory "
                    "compression pipeline.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    for name, (_, help_text, _schema) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="FILE",
                       help="JSON config file (flags override its keys)")
        p.add_argument("--seed", type=int, metavar="U64",
                       help="override the config's random seed")
        p.add_argument("--out", metavar="DIR",
                       help="output directory (or config key 'out')")
    return parser


def _resolve(args):
    runner, _, schema = _COMMANDS[args.command]
    raw = _load_config_file(args.config) if args.config else {}
    out_dir = args.out or raw.get("out")
    if not out_dir or not isinstance(out_dir, str):
        raise ValidationError(f"{args.command}: an output directory is "
                              "required (--out or config key 'out')")
    cfg = _apply_schema(args.command, raw, schema)
    if args.seed is not None:
        if "seed" not in schema:
            raise ValidationError(
                f"{args.command} is deterministic and takes no --seed")
        cfg["seed"] = _V_SEED("seed", args.seed)
    cfg["out"] = out_dir
    return runner, cfg, out_dir


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        runner, cfg, out_dir = _resolve(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    before = _snapshot(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    try:
        inputs, outputs = runner(cfg, out_dir)
        manifest = _write_manifest(out_dir, args.command, cfg, inputs,
                                   outputs)
    except ValidationError as exc:
        _remove_new(out_dir, before)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary: map to exit code
        _remove_new(out_dir, before)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: wrote {len(outputs)} files to {out_dir} "
          f"({os.path.basename(manifest)})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
