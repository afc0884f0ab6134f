"""Nearest-neighbor search and cross-view voting tests."""

import numpy as np
import pytest

from pdm4d import synth
from pdm4d.camera import CMCamera
from pdm4d.errors import CorrespondenceError
from pdm4d.matching import (FeatureField, feature_field, load_correspondence,
                            nnsearch, save_correspondence, vote,
                            vote_from_samples)
from pdm4d.render import render_pdm, reproject

from oracles import nnsearch_oracle, vote_transcription_oracle


# ---------------------------------------------------------------------------
# nnsearch


def test_nnsearch_identity_on_distinct_points():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 5))
    assert np.array_equal(nnsearch(X, X), np.arange(40))


def test_nnsearch_single_target():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((1, 3))
    Y = rng.standard_normal((25, 3))
    assert (nnsearch(X, Y) == 0).all()


def test_nnsearch_ties_take_lowest_index():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    Y = np.array([[1.0, 0.0], [0.5, 0.5]])
    idx = nnsearch(X, Y)
    assert idx[0] == 0  # exact duplicate at indices 0 and 2
    assert idx[1] in (0, 1)  # equidistant pair, must not pick index 2
    assert idx[1] == 0


def test_nnsearch_matches_exhaustive_scan():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((500, 16))
    Y = rng.standard_normal((500, 16))
    assert np.array_equal(nnsearch(X, Y), nnsearch_oracle(X, Y))


def test_nnsearch_chunking_does_not_change_result():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((64, 8))
    Y = rng.standard_normal((200, 8))
    assert np.array_equal(nnsearch(X, Y, chunk_elems=128), nnsearch(X, Y))


def test_nnsearch_empty_and_mismatched():
    with pytest.raises(ValueError):
        nnsearch(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        nnsearch(np.zeros((2, 3)), np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# voting over raw samples


def random_instance(rng, n_s, n_t, views_s, views_t, d=2):
    verts_s = rng.standard_normal((n_s, 3))
    verts_t = rng.standard_normal((n_t, 3))
    def views(verts, count):
        out = []
        for _ in range(count):
            k = rng.integers(1, 2 * len(verts))
            pts = verts[rng.integers(0, len(verts), k)]
            pts = pts + 0.01 * rng.standard_normal(pts.shape)
            out.append((pts, rng.standard_normal((k, d))))
        return out
    return (verts_s, verts_t, views(verts_s, views_s),
            views(verts_t, views_t))


def test_vote_matches_transcription_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        verts_s, verts_t, ss, st = random_instance(
            rng, n_s=int(rng.integers(3, 12)), n_t=int(rng.integers(3, 12)),
            views_s=int(rng.integers(1, 4)), views_t=int(rng.integers(1, 4)))
        corres, votes = vote_from_samples(verts_s, verts_t, ss, st)
        ocorres, ovotes = vote_transcription_oracle(verts_s, verts_t, ss, st)
        assert np.array_equal(votes, ovotes)
        assert np.array_equal(corres, ocorres)


def test_vote_hand_built_two_views():
    # 3 source and 3 target vertices; features picked so every source
    # sample matches the target sample sitting on the same vertex
    verts_s = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    verts_t = np.array([[0, 0, 2.0], [1.0, 0, 2.0], [0, 1.0, 2.0]])
    feats = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    ss = [(verts_s, feats), (verts_s[:2], feats[:2])]
    st = [(verts_t, feats), (verts_t, feats)]
    corres, votes = vote_from_samples(verts_s, verts_t, ss, st)
    assert np.array_equal(corres, [0, 1, 2])
    # each source view votes once per pixel per target view
    assert votes.sum() == (3 + 2) * 2
    assert np.array_equal(np.diag(votes), [4, 4, 2])


def test_vote_single_pair_equals_composition():
    rng = np.random.default_rng(11)
    verts_s, verts_t, ss, st = random_instance(rng, 8, 9, 1, 1, d=4)
    corres, votes = vote_from_samples(verts_s, verts_t, ss, st)
    pts_s, f_s = ss[0]
    pts_t, f_t = st[0]
    index_s = nnsearch(verts_s, pts_s)
    index_t = nnsearch(verts_t, pts_t)
    target = index_t[nnsearch(f_t, f_s)]
    expect = np.zeros_like(votes)
    np.add.at(expect, (index_s, target), 1)
    assert np.array_equal(votes, expect)


def test_vote_conservation_and_monotonicity():
    rng = np.random.default_rng(13)
    verts_s, verts_t, ss, st = random_instance(rng, 10, 10, 3, 2)
    _, votes_all = vote_from_samples(verts_s, verts_t, ss, st)
    n_src_pixels = sum(len(p) for p, _ in ss)
    assert votes_all.sum() == n_src_pixels * len(st)
    _, votes_some = vote_from_samples(verts_s, verts_t, ss[:1], st)
    assert (votes_some <= votes_all).all()


def test_vote_permutation_equivariance():
    rng = np.random.default_rng(17)
    verts_s, verts_t, ss, st = random_instance(rng, 9, 7, 2, 2)
    corres, _ = vote_from_samples(verts_s, verts_t, ss, st)
    perm = rng.permutation(len(verts_t))
    inv = np.argsort(perm)
    corres_p, _ = vote_from_samples(verts_s, verts_t[inv], ss, st)
    matched = corres >= 0
    # ties may re-resolve under permutation, so compare vote-count-backed
    # winners only where the winner was unique
    _, votes = vote_from_samples(verts_s, verts_t, ss, st)
    unique = matched & (np.sort(votes, axis=1)[:, -2] < votes.max(axis=1))
    assert np.array_equal(perm[corres[unique]], corres_p[unique])


def test_vote_unseen_vertex_unmatched():
    verts_s = np.array([[0.0, 0, 0], [5.0, 0, 0]])
    verts_t = np.array([[0.0, 0, 1], [5.0, 0, 1]])
    # every sample sits on source vertex 0; vertex 1 never votes
    ss = [(np.array([[0.0, 0, 0.01]]), np.array([[1.0]]))]
    st = [(verts_t, np.array([[1.0], [2.0]]))]
    corres, votes = vote_from_samples(verts_s, verts_t, ss, st)
    assert corres[0] == 0
    assert corres[1] == -1
    assert votes[1].sum() == 0


def test_vote_no_pixels_raises():
    verts = np.zeros((3, 3))
    with pytest.raises(CorrespondenceError):
        vote_from_samples(verts, verts,
                          [(np.zeros((0, 3)), np.zeros((0, 2)))],
                          [(np.zeros((0, 3)), np.zeros((0, 2)))])


# ---------------------------------------------------------------------------
# PDM-level glue


def rendered_views(mesh, thetas, width=96, height=48):
    center, r = mesh.bounding_sphere()
    pdms = []
    for th in thetas:
        cam = CMCamera(center=tuple(center), radius=2.5 * r,
                       inclination_deg=th, width=width, height=height)
        pdms.append(render_pdm(cam, mesh))
    return pdms


def position_features(pdms):
    # injective per-point features make matching exact: the 3D position
    fields = []
    for vid, pdm in enumerate(pdms):
        dense = pdm.point_map.copy()
        fields.append(feature_field(dense, pdm, vid))
    return fields


def test_vote_identity_on_same_mesh():
    mesh = synth.rotate_mesh(synth.icosphere(1, radius=0.8),
                             (1.0, 0.7, 0.3), 0.41)
    pdms = rendered_views(mesh, (0.0, 40.0))
    fields = position_features(pdms)
    corres, votes = vote(mesh, mesh, fields, fields, pdms, pdms)
    seen = votes.sum(axis=1) > 0
    assert seen.sum() > 0.9 * mesh.vertex_count
    assert np.array_equal(corres[seen], np.nonzero(seen)[0])


def test_vote_feature_field_must_cover_pdm():
    mesh = synth.rotate_mesh(synth.icosphere(1, radius=0.8),
                             (1.0, 0.7, 0.3), 0.41)
    pdms = rendered_views(mesh, (0.0,))
    fields = position_features(pdms)
    bad = FeatureField(fields[0].vectors[:-1], fields[0].pixels[:-1], 0)
    with pytest.raises(CorrespondenceError):
        vote(mesh, mesh, [bad], fields, pdms, pdms)


def test_feature_field_validation():
    with pytest.raises(ValueError):
        FeatureField(np.zeros((3, 2)), np.zeros((2, 2), dtype=np.int64), 0)
    with pytest.raises(ValueError):
        FeatureField(np.array([[np.nan, 0.0]]),
                     np.zeros((1, 2), dtype=np.int64), 0)


def test_feature_field_order_matches_reproject():
    mesh = synth.rotate_mesh(synth.icosphere(1, radius=0.8),
                             (1.0, 0.7, 0.3), 0.41)
    pdm = rendered_views(mesh, (20.0,))[0]
    ff = position_features([pdm])[0]
    points, pixels = reproject(pdm.camera, pdm)
    assert np.array_equal(ff.pixels, pixels)
    assert np.array_equal(ff.vectors, points)


# ---------------------------------------------------------------------------
# serialization


def test_correspondence_roundtrip(tmp_path):
    corres = np.array([3, -1, 0, 2], dtype=np.int64)
    path = str(tmp_path / "corres.txt")
    save_correspondence(path, corres)
    assert np.array_equal(load_correspondence(path), corres)
    text = open(path).read().splitlines()
    assert text[1] == "1 -1"


def test_correspondence_rejects_gaps(tmp_path):
    path = str(tmp_path / "bad.txt")
    path2 = str(tmp_path / "bad2.txt")
    with open(path, "w") as fh:
        fh.write("0 1\n2 0\n")
    with pytest.raises(CorrespondenceError):
        load_correspondence(path)
    with open(path2, "w") as fh:
        fh.write("0 1 9\n")
    with pytest.raises(CorrespondenceError):
        load_correspondence(path2)
