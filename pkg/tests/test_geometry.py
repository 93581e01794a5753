import numpy as np
import pytest

from synthloc.geometry import (
    ConsistencyScore,
    MatchParams,
    consistency_score,
    match_features,
    self_consistency,
    validate_pair,
    verify_identity,
)
from synthloc.variants import apply_variant, default_prompt_set, identity_shift

from conftest import make_view
from test_variants import binom_interval


def brute_force_mutual_nn(a, b, ratio):
    """O(n^2) oracle for mutual-NN matching with the two-sided ratio test."""
    da, db = a.descriptors(), b.descriptors()
    dist = np.linalg.norm(da[:, None, :] - db[None, :, :], axis=2)
    pairs = []
    for i in range(da.shape[0]):
        j = int(np.argmin(dist[i]))
        if int(np.argmin(dist[:, j])) != i:
            continue

        def ok(row):
            if row.size < 2:
                return True
            two = np.sort(row)[:2]
            return two[0] <= ratio * two[1]

        if ok(dist[i, :]) and ok(dist[:, j]):
            pairs.append((i, j))
    return pairs


def test_self_match_identity():
    rng = np.random.default_rng(0)
    view = make_view(rng, 30, 16)
    corrs = match_features(view, view, MatchParams())
    assert corrs.pairs == [(i, i) for i in range(30)]


def test_disjoint_random_descriptors_near_empty():
    rng = np.random.default_rng(1)
    a = make_view(rng, 100, 32)
    b = make_view(rng, 100, 32)
    corrs = match_features(a, b, MatchParams(ratio=0.8))
    assert len(corrs) <= 5


def test_matches_equal_brute_force():
    rng = np.random.default_rng(2)
    for trial in range(20):
        a = make_view(np.random.default_rng(100 + trial), 10, 8)
        b = make_view(np.random.default_rng(200 + trial), 12, 8)
        got = match_features(a, b, MatchParams(ratio=0.9)).pairs
        assert got == brute_force_mutual_nn(a, b, 0.9)


def test_match_symmetry():
    rng = np.random.default_rng(3)
    for trial in range(10):
        a = make_view(np.random.default_rng(300 + trial), 15, 8)
        b = make_view(np.random.default_rng(400 + trial), 18, 8)
        ab = match_features(a, b, MatchParams()).pairs
        ba = match_features(b, a, MatchParams()).pairs
        assert sorted((j, i) for (i, j) in ab) == sorted(ba)


def test_verify_identity_trivial_and_shifted():
    rng = np.random.default_rng(4)
    view = make_view(rng, 20, 8)
    same = apply_variant(view, identity_shift("same", 8), seed=0)
    corrs = match_features(view, same, MatchParams())
    kept = verify_identity(corrs, view, same, pixel_tol=2.0)
    assert kept.pairs == corrs.pairs

    far = apply_variant(view, identity_shift("far", 8), seed=0)
    for f in far.features:
        f.keypoint = f.keypoint + np.array([20.0, 0.0])
    far._arrays = None
    corrs = match_features(view, far, MatchParams())
    assert verify_identity(corrs, view, far, pixel_tol=2.0).pairs == []


def test_verify_identity_mixed_equals_thresholding():
    rng = np.random.default_rng(5)
    view = make_view(rng, 30, 8)
    moved = apply_variant(view, identity_shift("mix", 8), seed=0)
    shifts = rng.uniform(0, 4, size=30)
    for f, s in zip(moved.features, shifts):
        f.keypoint = f.keypoint + np.array([s, 0.0])
    moved._arrays = None
    corrs = match_features(view, moved, MatchParams())
    kept = verify_identity(corrs, view, moved, pixel_tol=2.0)
    expected = [
        (i, j)
        for (i, j) in corrs.pairs
        if np.linalg.norm(view.keypoints()[i] - moved.keypoints()[j]) <= 2.0
    ]
    assert kept.pairs == expected
    assert set(kept.pairs) <= set(corrs.pairs)


def _paired_views(rng, n, d, desc_noise=0.01):
    """A (q, p) pair observing the same landmarks with noisy descriptors."""
    q = make_view(rng, n, d, view_id=0)
    p = make_view(rng, n, d, view_id=1)
    for i, f in enumerate(p.features):
        f.descriptor = q.features[i].descriptor + desc_noise * rng.standard_normal(d)
        f.descriptor /= np.linalg.norm(f.descriptor)
    p._arrays = None
    return q, p


def test_consistency_identity_exact_one():
    rng = np.random.default_rng(6)
    q, p = _paired_views(rng, 40, 16)
    variant = apply_variant(q, identity_shift("same", 16), seed=1)
    s = consistency_score(q, p, variant, MatchParams())
    assert s.value == 1.0
    assert s.kept == s.original > 0


def test_consistency_full_dropout_exact_zero():
    rng = np.random.default_rng(7)
    q, p = _paired_views(rng, 40, 16)
    dead = identity_shift("dead", 16)
    dead.dropout_rate = 1.0
    dead.clutter_rate = 0.25
    variant = apply_variant(q, dead, seed=2)
    s = consistency_score(q, p, variant, MatchParams())
    assert s.value == 0.0
    assert s.kept == 0
    assert s.original > 0


def brute_force_score(q, p, variant, params):
    """Independent enumeration of both correspondence sets, restricted to
    landmark-bearing endpoints, and their p-keypoint-keyed intersection."""

    def aoi(pairs, a, b):
        la, lb = a.landmark_ids(), b.landmark_ids()
        return [(i, j) for (i, j) in pairs if la[i] >= 0 and lb[j] >= 0]

    c_qp = aoi(brute_force_mutual_nn(q, p, params.ratio), q, p)
    c_vp = aoi(brute_force_mutual_nn(variant, p, params.ratio), variant, p)
    if not c_qp:
        return ConsistencyScore(0.0, 0, 0)
    kp = p.keypoints()
    kept = 0
    for (_, j) in c_qp:
        for (_, j2) in c_vp:
            if np.linalg.norm(kp[j] - kp[j2]) <= params.pixel_tol:
                kept += 1
                break
    return ConsistencyScore(kept / len(c_qp), kept, len(c_qp))


def test_consistency_equals_brute_force_oracle():
    """20 seeded 50-feature pairs against the intersection oracle, exactly."""
    ps = default_prompt_set(16, seed=0)
    shift = ps.by_name("in winter")
    params = MatchParams()
    for trial in range(20):
        rng = np.random.default_rng(500 + trial)
        q, p = _paired_views(rng, 50, 16)
        variant = apply_variant(q, shift, seed=trial)
        got = consistency_score(q, p, variant, params)
        want = brute_force_score(q, p, variant, params)
        assert got.kept == want.kept
        assert got.original == want.original
        assert got.value == want.value


def test_validate_pair_modes():
    assert validate_pair(ConsistencyScore(1.0, 30, 30), 0.2)
    assert not validate_pair(ConsistencyScore(0.0, 0, 30), 0.2)
    assert validate_pair(ConsistencyScore(0.05, 2, 40), 0.0)  # filter disabled
    assert validate_pair(ConsistencyScore(0.1, 12, 120), 10, mode="absolute")
    assert not validate_pair(ConsistencyScore(0.1, 8, 80), 10, mode="absolute")
    with pytest.raises(ValueError):
        validate_pair(ConsistencyScore(0.5, 5, 10), 0.2, mode="quantile")


def test_self_consistency_extremes():
    rng = np.random.default_rng(8)
    view = make_view(rng, 40, 16, n_clutter=6)
    same = apply_variant(view, identity_shift("same", 16), seed=3)
    assert self_consistency(view, same, MatchParams()).value == 1.0

    dead = identity_shift("dead", 16)
    dead.dropout_rate = 1.0
    dead.clutter_rate = 0.2
    gone = apply_variant(view, dead, seed=4)
    assert self_consistency(view, gone, MatchParams()).value == 0.0


def test_self_consistency_binomial():
    """30% dropout, no descriptor noise: score within the Binomial envelope."""
    rng = np.random.default_rng(9)
    view = make_view(rng, 100, 16)
    drop = identity_shift("drop", 16)
    drop.dropout_rate = 0.3
    lo, hi = binom_interval(100, 0.7)
    vals = []
    for seed in range(200):
        variant = apply_variant(view, drop, seed=seed)
        s = self_consistency(view, variant, MatchParams())
        vals.append(s.kept)
    inside = np.mean([(lo <= v <= hi) for v in vals])
    assert inside >= 0.97
    assert abs(np.mean(vals) / 100.0 - 0.7) < 0.02


def test_score_bounds(small_world, small_scores):
    for (_, _, _), s in small_scores.items():
        assert 0.0 <= s.value <= 1.0
        if s.original > 0:
            assert s.value == s.kept / s.original


def test_consistency_of_pair_with_itself_relabeled():
    rng = np.random.default_rng(10)
    q, p = _paired_views(rng, 30, 16)
    relabeled = apply_variant(q, identity_shift("relabel", 16), seed=0)
    assert consistency_score(q, p, relabeled, MatchParams()).value == 1.0


def test_keypoint_corruption_caught_by_identity_check():
    """Failure injection: moving keypoints while keeping descriptors intact.
    The pair score keys its intersection on the unaltered p side, so it stays
    high; the identity-transform check (self-consistency) is the mechanism
    that catches geometry-breaking generator failures."""
    rng = np.random.default_rng(11)
    q, p = _paired_views(rng, 40, 16)
    broken = identity_shift("broken", 16)
    broken.keypoint_corruption_sigma = 50.0
    variant = apply_variant(q, broken, seed=3)
    assert consistency_score(q, p, variant, MatchParams()).value > 0.8
    assert self_consistency(q, variant, MatchParams()).value < 0.2
