"""Metric tests against scalar-loop oracles, plus report writer checks."""

import csv
import json

import numpy as np
import pytest

from oracles import floyd_warshall_oracle, hausdorff_oracle, kg_error_oracle
from pdm4d.errors import MetricError
from pdm4d.mesh import MeshSequence
from pdm4d.metrics import (ErrorReport, coordinate_rows,
                           correspondence_error_curve, hausdorff_distance,
                           hausdorff_sequence, kg_error, kg_report,
                           render_report_svg, write_curve_csv,
                           write_frame_csv, write_summary_json)
from pdm4d.synth import icosphere, torus_mesh


def random_rows(rows, cols, seed=0):
    return np.random.default_rng(seed).random((rows, cols)) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# sequence reconstruction error


class TestKG:
    def test_identity_is_zero(self):
        B = random_rows(18, 6)
        assert kg_error(B, B) == 0.0

    def test_temporal_mean_scores_hundred(self):
        B = random_rows(18, 6, seed=3)
        mean = np.repeat(B.mean(axis=1, keepdims=True), 6, axis=1)
        assert abs(kg_error(B, mean) - 100.0) < 1e-12

    def test_matches_scalar_oracle(self):
        B = random_rows(6, 4, seed=5)
        Bh = B + 0.1 * random_rows(6, 4, seed=6)
        assert abs(kg_error(B, Bh) - kg_error_oracle(B, Bh)) < 1e-10

    def test_static_sequence_raises(self):
        B = np.ones((9, 5))
        with pytest.raises(MetricError):
            kg_error(B, B + 0.1)

    def test_shape_mismatch_raises(self):
        with pytest.raises(MetricError):
            kg_error(random_rows(6, 4), random_rows(6, 5))

    def test_column_permutation_invariance(self):
        B = random_rows(12, 8, seed=7)
        Bh = B + 0.05 * random_rows(12, 8, seed=8)
        perm = np.random.default_rng(9).permutation(8)
        assert abs(kg_error(B, Bh)
                   - kg_error(B[:, perm], Bh[:, perm])) < 1e-12

    def test_position_arrays_are_stacked(self):
        pos = np.random.default_rng(1).random((10, 5, 3))
        rec = pos + 0.01
        want = kg_error(coordinate_rows(pos), coordinate_rows(rec))
        assert kg_error(pos, rec) == want

    def test_report_series_recovers_value(self):
        B = random_rows(15, 7, seed=11)
        Bh = B + 0.02 * random_rows(15, 7, seed=12)
        rep = kg_report(B, Bh)
        assert rep.metric == "kg_error"
        assert len(rep.series) == 7
        quad_mean = np.sqrt(np.mean(rep.series ** 2))
        assert abs(quad_mean - rep.value) < 1e-10


# ---------------------------------------------------------------------------
# Hausdorff distance


def random_cloud(n, seed):
    return np.random.default_rng(seed).random((n, 3)) * 4.0 - 2.0


class TestHausdorff:
    def test_identical_sequences_are_zero(self):
        clouds = [random_cloud(20, s) for s in range(4)]
        rep = hausdorff_sequence(clouds, [c.copy() for c in clouds])
        assert rep.value == 0.0
        assert np.all(rep.series == 0.0)
        assert rep.params["sum"] == 0.0

    def test_single_points_give_their_distance(self):
        sym, fwd, bwd = hausdorff_distance([[0.0, 0.0, 0.0]],
                                           [[0.0, 3.0, 4.0]])
        assert sym == fwd == bwd == 5.0

    def test_matches_double_loop_oracle_exactly(self):
        for seed in range(5):
            A = random_cloud(30, seed)
            B = random_cloud(30, seed + 50)
            sym, _, _ = hausdorff_distance(A, B)
            assert sym == hausdorff_oracle(A, B)

    def test_symmetry(self):
        A, B = random_cloud(25, 1), random_cloud(35, 2)
        assert hausdorff_distance(A, B)[0] == hausdorff_distance(B, A)[0]

    def test_identity_of_indiscernibles(self):
        A = random_cloud(12, 3)
        shuffled = A[np.random.default_rng(0).permutation(12)]
        assert hausdorff_distance(A, shuffled)[0] == 0.0
        assert hausdorff_distance(A, A + 0.5)[0] > 0.0

    def test_mean_and_sum_reported(self):
        a = [random_cloud(15, s) for s in range(3)]
        b = [random_cloud(15, s + 9) for s in range(3)]
        rep = hausdorff_sequence(a, b)
        assert abs(rep.value - rep.series.mean()) < 1e-15
        assert abs(rep.params["sum"] - rep.series.sum()) < 1e-15
        per_frame_sym = np.maximum(rep.params["series_forward"],
                                   rep.params["series_backward"])
        assert np.array_equal(rep.series, per_frame_sym)

    def test_accepts_mesh_sequences(self):
        base = icosphere(1)
        seq_a = MeshSequence(frames=[base, base.translated([1, 0, 0])])
        seq_b = MeshSequence(frames=[base.translated([0, 2, 0]), base])
        rep = hausdorff_sequence(seq_a, seq_b)
        want0 = hausdorff_oracle(seq_a.frames[0].vertices,
                                 seq_b.frames[0].vertices)
        assert rep.series[0] == want0

    def test_frame_count_mismatch_raises(self):
        clouds = [random_cloud(5, 0)]
        with pytest.raises(MetricError):
            hausdorff_sequence(clouds, clouds * 2)

    def test_empty_frame_raises(self):
        with pytest.raises(MetricError):
            hausdorff_sequence([np.zeros((0, 3))], [random_cloud(4, 0)])

    def test_empty_sequence_raises(self):
        with pytest.raises(MetricError):
            hausdorff_sequence([], [])


# ---------------------------------------------------------------------------
# correspondence error curve


class TestCurve:
    def setup_method(self):
        self.mesh = torus_mesh(10, 10)
        assert self.mesh.vertex_count == 100
        self.rng = np.random.default_rng(4)

    def test_perfect_prediction_is_full_from_zero(self):
        truth = self.rng.integers(0, 100, size=60)
        rep = correspondence_error_curve(truth.copy(), truth, self.mesh)
        assert rep.params["thresholds"][0] == 0.0
        assert np.all(rep.params["fractions"] == 1.0)
        assert rep.value == 1.0
        assert rep.params["unmatched"] == 0

    def test_all_unmatched_is_zero_everywhere(self):
        truth = self.rng.integers(0, 100, size=40)
        pred = np.full(40, -1)
        rep = correspondence_error_curve(pred, truth, self.mesh)
        assert np.all(rep.params["fractions"] == 0.0)
        assert rep.value == 0.0
        assert rep.params["unmatched"] == 40
        assert rep.params["mean_error"] == np.inf

    def test_matches_per_vertex_geodesic_oracle(self):
        D = floyd_warshall_oracle(self.mesh)
        truth = self.rng.integers(0, 100, size=80)
        pred = self.rng.integers(0, 100, size=80)
        pred[self.rng.random(80) < 0.15] = -1
        rep = correspondence_error_curve(pred, truth, self.mesh)
        want = np.array([np.inf if p < 0 else D[t, p]
                         for p, t in zip(pred, truth)])
        got = rep.params["distances"]
        finite = np.isfinite(want)
        assert np.array_equal(finite, np.isfinite(got))
        np.testing.assert_allclose(got[finite], want[finite],
                                   rtol=0, atol=1e-9)
        for t, f in zip(rep.params["thresholds"], rep.params["fractions"]):
            assert f == np.mean(want <= t)

    def test_curve_is_monotone(self):
        truth = self.rng.integers(0, 100, size=70)
        pred = self.rng.integers(0, 100, size=70)
        pred[:10] = -1
        rep = correspondence_error_curve(pred, truth, self.mesh)
        assert np.all(np.diff(rep.params["fractions"]) >= 0.0)
        assert rep.params["fractions"].max() <= 1.0 - 10 / 70 + 1e-12

    def test_custom_thresholds_are_sorted(self):
        truth = self.rng.integers(0, 100, size=30)
        rep = correspondence_error_curve(truth.copy(), truth, self.mesh,
                                         thresholds=[2.0, 0.0, 1.0])
        assert np.array_equal(rep.params["thresholds"], [0.0, 1.0, 2.0])

    def test_validates_vertex_ids(self):
        truth = np.array([0, 5, 200])
        with pytest.raises(MetricError):
            correspondence_error_curve(np.zeros(3, int), truth, self.mesh)
        with pytest.raises(MetricError):
            correspondence_error_curve(np.array([0, 100, 1]), truth[:3] % 100,
                                       self.mesh)


# ---------------------------------------------------------------------------
# writers


def sample_reports():
    series = np.array([1.0, 2.5, 0.5])
    rep_a = ErrorReport("kg_error", 1.5, series=series)
    rep_b = ErrorReport(
        "hausdorff", 0.4, series=series * 0.1,
        params={"sum": 1.2, "mean_forward": 0.3, "mean_backward": 0.4,
                "series_forward": series * 0.09,
                "series_backward": series * 0.1})
    curve = ErrorReport(
        "correspondence_error", 0.9,
        params={"thresholds": np.array([0.0, 1.0, 2.0]),
                "fractions": np.array([0.2, 0.7, 0.9]),
                "distances": np.array([0.1, np.inf]),
                "unmatched": 1, "mean_error": np.inf})
    return rep_a, rep_b, curve


class TestWriters:
    def test_frame_csv_roundtrip(self, tmp_path):
        rep_a, rep_b, _ = sample_reports()
        path = tmp_path / "frames.csv"
        write_frame_csv([rep_a, rep_b], path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["frame", "kg_error", "hausdorff",
                           "hausdorff_forward", "hausdorff_backward"]
        assert len(rows) == 4
        assert [float(r[1]) for r in rows[1:]] == list(rep_a.series)
        assert [float(r[4]) for r in rows[1:]] == \
            list(rep_b.params["series_backward"])

    def test_frame_csv_requires_series(self, tmp_path):
        _, _, curve = sample_reports()
        with pytest.raises(MetricError):
            write_frame_csv([curve], tmp_path / "x.csv")

    def test_curve_csv_roundtrip(self, tmp_path):
        _, _, curve = sample_reports()
        path = tmp_path / "curve.csv"
        write_curve_csv(curve, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["threshold", "fraction_below"]
        got = np.array([[float(a), float(b)] for a, b in rows[1:]])
        assert np.array_equal(got[:, 0], curve.params["thresholds"])
        assert np.array_equal(got[:, 1], curve.params["fractions"])

    def test_summary_json_sanitizes_infinities(self, tmp_path):
        reports = sample_reports()
        path = tmp_path / "summary.json"
        write_summary_json(reports, path, extra={"bpvf": 2.0})
        data = json.loads(path.read_text())
        assert data["kg_error"]["value"] == 1.5
        assert data["hausdorff"]["sum"] == 1.2
        assert data["correspondence_error"]["mean_error"] is None
        assert data["correspondence_error"]["unmatched"] == 1
        assert data["bpvf"] == 2.0
        assert "thresholds" not in data["correspondence_error"]

    def test_svg_rendering(self, tmp_path):
        reports = sample_reports()
        path = tmp_path / "plot.svg"
        render_report_svg(reports, path)
        text = path.read_text()
        assert text.lstrip().startswith("<?xml")
        assert "<svg" in text

    def test_svg_requires_content(self, tmp_path):
        with pytest.raises(MetricError):
            render_report_svg([ErrorReport("empty", 0.0)],
                              tmp_path / "x.svg")
