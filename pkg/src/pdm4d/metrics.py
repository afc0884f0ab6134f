"""Sequence-quality metrics and report writers.

Three measurements cover reconstruction and matching quality: a normalized
whole-sequence position error (percent of the motion energy around each
vertex's temporal mean), per-frame symmetric Hausdorff distance between
vertex clouds, and cumulative geodesic error curves for predicted
correspondences. Reports serialize as per-frame CSV, summary JSON, and
optional SVG line plots.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError
from .geodesic import geodesic_distance
from .mesh import MeshSequence, TriangleMesh

_CHUNK_ELEMS = int(2e7)  # scratch budget for pairwise distance blocks


@dataclass
class ErrorReport:
    """One metric's outcome: headline scalar, optional series, extras.

    ``series`` holds per-frame values when the metric is frame-aligned
    (None otherwise). ``params`` carries auxiliary outputs; keys starting
    with ``series_`` are per-frame companions of ``series``, other array
    values (curves, distances) feed the curve writer, and scalar values
    land in the summary JSON.
    """

    metric: str
    value: float
    series: np.ndarray = None
    params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# whole-sequence reconstruction error


def coordinate_rows(positions):
    """Stack (V, N, 3) trajectories into the (3V, N) row layout."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 3 or pos.shape[2] != 3:
        raise MetricError(f"expected (V, N, 3) positions, got {pos.shape}")
    return np.concatenate([pos[:, :, b] for b in range(3)], axis=0)


def _as_rows(B, name):
    B = np.asarray(B, dtype=np.float64)
    if B.ndim == 3:
        B = coordinate_rows(B)
    if B.ndim != 2:
        raise MetricError(f"{name} must be a 2-D row matrix, got {B.shape}")
    return B


def kg_error(B, Bhat):
    """Percent reconstruction error normalized by the motion spread.

    Both arguments are coordinate-row matrices (rows = per-coordinate
    vertex trajectories, columns = frames); (V, N, 3) position arrays are
    stacked automatically. The denominator measures the sequence around
    each row's temporal mean, so a static sequence has no scale to measure
    against and raises MetricError.
    """
    B = _as_rows(B, "reference")
    Bh = _as_rows(Bhat, "reconstruction")
    if B.shape != Bh.shape:
        raise MetricError(f"shape mismatch {B.shape} vs {Bh.shape}")
    spread = B - B.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(spread)
    if denom == 0.0:
        raise MetricError("static sequence: error scale is undefined")
    return 100.0 * float(np.linalg.norm(B - Bh)) / float(denom)


def kg_report(B, Bhat):
    """kg_error plus a per-frame breakdown.

    The per-frame series is scaled so its quadratic mean equals the
    sequence value: series[n] = 100 * ||column diff|| * sqrt(N) / denom.
    """
    B = _as_rows(B, "reference")
    Bh = _as_rows(Bhat, "reconstruction")
    value = kg_error(B, Bh)
    denom = np.linalg.norm(B - B.mean(axis=1, keepdims=True))
    n_frames = B.shape[1]
    series = (100.0 * np.sqrt(n_frames) / denom
              * np.linalg.norm(B - Bh, axis=0))
    return ErrorReport("kg_error", value, series=series)


# ---------------------------------------------------------------------------
# Hausdorff distance


def _frame_points(frame, index, side):
    pts = frame.vertices if isinstance(frame, TriangleMesh) else \
        np.asarray(frame, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise MetricError(
            f"{side} frame {index}: expected (n, 3) points, got {pts.shape}")
    if len(pts) == 0:
        raise MetricError(f"{side} frame {index} is empty")
    return pts


def _directed_hausdorff(P, Q):
    """max over P of the distance to the nearest point of Q."""
    worst = 0.0
    step = max(1, _CHUNK_ELEMS // (len(Q) * 3))
    for lo in range(0, len(P), step):
        block = P[lo:lo + step, None, :] - Q[None, :, :]
        d = np.sqrt((block * block).sum(axis=2)).min(axis=1)
        worst = max(worst, float(d.max()))
    return worst


def hausdorff_distance(points_a, points_b):
    """Symmetric point-set Hausdorff distance plus both directed values."""
    A = _frame_points(points_a, 0, "first")
    B = _frame_points(points_b, 0, "second")
    forward = _directed_hausdorff(A, B)
    backward = _directed_hausdorff(B, A)
    return max(forward, backward), forward, backward


def hausdorff_sequence(seq_a, seq_b):
    """Per-frame symmetric Hausdorff between two vertex-cloud sequences.

    The headline value is the mean over frames; the unnormalized sum and
    both directed means are reported alongside, with the per-frame directed
    series under ``series_forward`` / ``series_backward``.
    """
    frames_a = seq_a.frames if isinstance(seq_a, MeshSequence) else list(seq_a)
    frames_b = seq_b.frames if isinstance(seq_b, MeshSequence) else list(seq_b)
    if len(frames_a) != len(frames_b):
        raise MetricError(f"frame count mismatch: "
                          f"{len(frames_a)} vs {len(frames_b)}")
    if not frames_a:
        raise MetricError("empty sequence")
    sym, fwd, bwd = [], [], []
    for n, (fa, fb) in enumerate(zip(frames_a, frames_b)):
        A = _frame_points(fa, n, "first")
        B = _frame_points(fb, n, "second")
        f = _directed_hausdorff(A, B)
        b = _directed_hausdorff(B, A)
        sym.append(max(f, b))
        fwd.append(f)
        bwd.append(b)
    sym = np.asarray(sym)
    fwd = np.asarray(fwd)
    bwd = np.asarray(bwd)
    return ErrorReport(
        "hausdorff", float(sym.mean()), series=sym,
        params={"sum": float(sym.sum()),
                "mean_forward": float(fwd.mean()),
                "mean_backward": float(bwd.mean()),
                "series_forward": fwd,
                "series_backward": bwd})


# ---------------------------------------------------------------------------
# correspondence error curve


def correspondence_error_curve(pred, truth, mesh, thresholds=None):
    """Cumulative curve of geodesic errors for predicted correspondences.

    Each source vertex contributes the geodesic distance, measured on the
    target mesh, between its predicted and true correspondents. Unmatched
    predictions (target -1) count as +infinity, so they depress the curve
    everywhere instead of vanishing. The curve samples (threshold,
    fraction of vertices with error <= threshold) and is non-decreasing;
    the headline value is the fraction within the largest threshold.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise MetricError(f"prediction shape {pred.shape} does not match "
                          f"ground truth {truth.shape}")
    V = mesh.vertex_count
    if truth.min(initial=0) < 0 or truth.max(initial=-1) >= V:
        raise MetricError("ground-truth correspondents outside the target "
                          "mesh")
    if pred.max(initial=-1) >= V:
        raise MetricError("predicted correspondents outside the target mesh")

    matched = pred >= 0
    distances = np.full(pred.shape, np.inf)
    if matched.any():
        unique_truth, inverse = np.unique(truth, return_inverse=True)
        D = geodesic_distance(mesh, unique_truth)
        distances[matched] = D[inverse[matched], pred[matched]]

    finite = distances[np.isfinite(distances)]
    if thresholds is None:
        top = float(finite.max()) if finite.size else 1.0
        thresholds = np.linspace(0.0, top, 64)
    else:
        thresholds = np.asarray(thresholds, dtype=np.float64)
        if thresholds.ndim != 1 or len(thresholds) == 0:
            raise MetricError("thresholds must be a non-empty 1-D array")
        thresholds = np.sort(thresholds)
    fractions = (distances[None, :] <= thresholds[:, None]).mean(axis=1)
    return ErrorReport(
        "correspondence_error", float(fractions[-1]),
        params={"thresholds": thresholds,
                "fractions": fractions,
                "distances": distances,
                "unmatched": int(np.count_nonzero(~matched)),
                "mean_error": float(distances.mean())})


# ---------------------------------------------------------------------------
# report writers


def _fmt(x):
    return f"{float(x):.17g}"


def write_frame_csv(reports, path):
    """One row per frame; one column per frame-aligned series."""
    columns = {}
    length = None
    for rep in reports:
        if rep.series is None:
            continue
        columns[rep.metric] = rep.series
        for key, val in rep.params.items():
            if key.startswith("series_"):
                columns[f"{rep.metric}_{key[len('series_'):]}"] = val
        if length is None:
            length = len(rep.series)
        elif len(rep.series) != length:
            raise MetricError("reports cover different frame counts")
    if not columns:
        raise MetricError("no frame-aligned series to write")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", *columns])
        for n in range(length):
            writer.writerow([n, *(_fmt(col[n]) for col in columns.values())])
    return path


def write_curve_csv(report, path):
    """Threshold/fraction samples of a correspondence error curve."""
    try:
        thresholds = report.params["thresholds"]
        fractions = report.params["fractions"]
    except KeyError:
        raise MetricError(f"report {report.metric!r} has no curve") from None
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fraction_below"])
        for t, f in zip(thresholds, fractions):
            writer.writerow([_fmt(t), _fmt(f)])
    return path


def _json_safe(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    return x if math.isfinite(x) else None


def write_summary_json(reports, path, extra=None):
    """Headline values and scalar parameters of every report, plus extras.

    Non-finite values serialize as null (JSON has no infinity).
    """
    summary = {}
    for rep in reports:
        entry = {"value": _json_safe(rep.value)}
        for key, val in rep.params.items():
            if np.isscalar(val) and not isinstance(val, str):
                entry[key] = _json_safe(val)
            elif isinstance(val, (int, float)):
                entry[key] = _json_safe(val)
        summary[rep.metric] = entry
    if extra:
        summary.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def render_report_svg(reports, path):
    """Line plots of every report: series over frames, curves over
    thresholds. Rendered without any display backend; output bytes are
    deterministic (fixed id salt, no timestamp metadata)."""
    import matplotlib
    from matplotlib.figure import Figure

    frame_reports = [r for r in reports if r.series is not None]
    curve_reports = [r for r in reports if "thresholds" in r.params]
    panels = int(bool(frame_reports)) + int(bool(curve_reports))
    if panels == 0:
        raise MetricError("nothing to plot")
    fig = Figure(figsize=(6.4 * panels, 4.2))
    axes = fig.subplots(1, panels) if panels > 1 else [fig.subplots(1, 1)]
    col = 0
    if frame_reports:
        ax = axes[col]
        col += 1
        for rep in frame_reports:
            ax.plot(np.arange(len(rep.series)), rep.series, label=rep.metric)
        ax.set_xlabel("frame")
        ax.set_ylabel("per-frame error")
        ax.legend()
        ax.grid(True, alpha=0.3)
    if curve_reports:
        ax = axes[col]
        for rep in curve_reports:
            ax.plot(rep.params["thresholds"], rep.params["fractions"],
                    label=rep.metric)
        ax.set_xlabel("geodesic error threshold")
        ax.set_ylabel("fraction below")
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "error-report"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path
