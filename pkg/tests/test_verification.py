import numpy as np
import pytest

from conftest import K_DEFAULT
from viosfm.geometry import Pose, Rotation, compose, epipolar_error, fundamental_from_prior, project, relative_pose
from viosfm.model import VioSequence
from viosfm.verification import (
    MatchSet,
    PairingConfig,
    PairStatus,
    StaticRetrieval,
    generate_candidates,
    ransac_fundamental,
    symmetric_distances,
    verify_pairs,
    vio_screen,
)


def two_view(rng, n=60, baseline=0.5, K=K_DEFAULT, noise=0.0):
    pa = Pose.identity()
    pb = Pose(Rotation.from_rotvec(rng.normal(size=3) * 0.05), np.r_[baseline, rng.normal(size=2) * 0.1])
    X = np.c_[rng.uniform(-2, 2.5, n), rng.uniform(-1.5, 1.5, n), rng.uniform(4, 9, n)]
    xa = project(pa, X, K) + rng.normal(size=(n, 2)) * noise
    xb = project(pb, X, K) + rng.normal(size=(n, 2)) * noise
    idx = np.c_[np.arange(n), np.arange(n)]
    return pa, pb, MatchSet(0, 1, idx, xa, xb), X


def test_generate_candidates_temporal():
    cfg = PairingConfig(n1_temporal=2, n2_retrieval=0)
    assert generate_candidates(range(5), None, cfg) == [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3), (2, 4), (3, 4)]
    assert generate_candidates(range(5), None, PairingConfig(n1_temporal=0, n2_retrieval=0)) == []


def test_generate_candidates_includes_retrieval_loops():
    retrieval = StaticRetrieval({9: [1, 2, 9], 1: [9]})
    pairs = generate_candidates(range(10), retrieval, PairingConfig(n1_temporal=1, n2_retrieval=2))
    assert (1, 9) in pairs and (2, 9) in pairs
    assert len(pairs) == len(set(pairs))
    assert all(a < b for a, b in pairs)


def test_matchset_rejects_duplicates():
    with pytest.raises(ValueError):
        MatchSet(0, 1, [[0, 1], [0, 2]], np.zeros((2, 2)), np.zeros((2, 2)))


def test_vio_screen_same_place_noisy_prior():
    rng = np.random.default_rng(0)
    pa, pb, ms, _ = two_view(rng, baseline=1.0)
    true_rel = relative_pose(pb, pa)
    noisy = compose(
        true_rel, Pose(Rotation.from_rotvec(rng.normal(size=3) * np.deg2rad(0.5)), rng.normal(size=3) * 0.01)
    )
    v = vio_screen(ms, noisy, K_DEFAULT, PairingConfig())
    assert v.ee_outlier_ratio < 0.1
    assert v.status == PairStatus.PENDING


def test_vio_screen_doppelganger_rejected():
    rng = np.random.default_rng(1)
    pa, pb, ms, X = two_view(rng, baseline=0.3)
    # frame b actually sits 12 m away in front of a congruent copy of the scene
    far = Pose(Rotation.from_rotvec([0, np.pi / 2, 0]), [12.0, 0.0, 3.0])
    pb_true = compose(far, pb)
    v = vio_screen(ms, relative_pose(pb_true, pa), K_DEFAULT, PairingConfig())
    assert v.ee_outlier_ratio > 0.5
    assert v.status == PairStatus.REJECTED_BY_VIO


def test_vio_screen_empty_and_degenerate():
    v = vio_screen(MatchSet.empty(0, 1), Pose.identity(), K_DEFAULT, PairingConfig())
    assert v.status == PairStatus.REJECTED_BY_VIO and v.ee_outlier_ratio == 1.0
    rng = np.random.default_rng(2)
    _, _, ms, _ = two_view(rng)
    v = vio_screen(ms, Pose(Rotation.from_rotvec([0, 0.1, 0]), [0, 0, 0]), K_DEFAULT, PairingConfig())
    assert v.status == PairStatus.PENDING and v.ee_outlier_ratio is None


def test_vio_screen_exact_prior_zero_ratio_and_monotone():
    rng = np.random.default_rng(3)
    pa, pb, ms, _ = two_view(rng, noise=1.0)
    _, _, clean, _ = two_view(np.random.default_rng(3))
    assert vio_screen(clean, relative_pose(pb, pa), K_DEFAULT, PairingConfig(t_ee=1e-3)).ee_outlier_ratio == 0.0
    prior = compose(relative_pose(pb, pa), Pose(Rotation.from_rotvec([0.01, 0.02, 0]), [0.02, 0, 0]))
    ratios = [vio_screen(ms, prior, K_DEFAULT, PairingConfig(t_ee=t)).ee_outlier_ratio for t in (40, 20, 10, 5, 2, 1)]
    assert all(b >= a for a, b in zip(ratios, ratios[1:]))
    perm = rng.permutation(len(ms))
    shuffled = MatchSet(0, 1, ms.idx[perm], ms.xa[perm], ms.xb[perm])
    assert vio_screen(shuffled, prior, K_DEFAULT, PairingConfig(t_ee=5)).ee_outlier_ratio == ratios[3]


def test_ransac_with_outliers():
    rng = np.random.default_rng(4)
    pa, pb, ms, _ = two_view(rng, n=50)
    F_true = fundamental_from_prior(K_DEFAULT, relative_pose(pb, pa))
    # uniform outliers, redrawn when they happen to satisfy the true geometry
    out_a, out_b = np.zeros((0, 2)), np.zeros((0, 2))
    while len(out_a) < 20:
        a, b = rng.uniform([0, 0], [640, 480], (2, 2))
        if symmetric_distances(F_true, a[None], b[None])[0] > 2 * PairingConfig().ransac_threshold:
            out_a, out_b = np.r_[out_a, a[None]], np.r_[out_b, b[None]]
    full = MatchSet(
        0, 1, np.c_[np.arange(70), np.arange(70)], np.r_[ms.xa, out_a], np.r_[ms.xb, out_b]
    )
    F, v = ransac_fundamental(full, PairingConfig(), rng=0)
    assert v.status == PairStatus.ACCEPTED
    assert v.inlier_mask[:50].all()
    assert not v.inlier_mask[50:].any()
    assert np.linalg.matrix_rank(F, tol=1e-9 * np.abs(F).max()) == 2


def test_ransac_rejects_small_and_noise():
    rng = np.random.default_rng(5)
    _, _, ms, _ = two_view(rng, n=7)
    _, v = ransac_fundamental(ms, PairingConfig())
    assert v.status == PairStatus.REJECTED_BY_RANSAC
    noise = MatchSet(
        0, 1, np.c_[np.arange(100), np.arange(100)], rng.uniform(0, 480, (100, 2)), rng.uniform(0, 480, (100, 2))
    )
    _, v = ransac_fundamental(noise, PairingConfig(), rng=7)
    assert v.status == PairStatus.REJECTED_BY_RANSAC


def test_ransac_bit_reproducible():
    rng = np.random.default_rng(6)
    _, _, ms, _ = two_view(rng, n=80, noise=1.0)
    F1, v1 = ransac_fundamental(ms, PairingConfig(), rng=11)
    F2, v2 = ransac_fundamental(ms, PairingConfig(), rng=11)
    np.testing.assert_array_equal(F1, F2)
    np.testing.assert_array_equal(v1.inlier_mask, v2.inlier_mask)


def test_verify_pairs_empty_and_noise_free():
    rng = np.random.default_rng(7)
    poses = {0: Pose.identity()}
    for i in range(1, 4):
        poses[i] = Pose(Rotation.from_rotvec(rng.normal(size=3) * 0.03), [0.4 * i, 0, 0])
    vio = VioSequence(poses)
    X = np.c_[rng.uniform(-2, 3, 80), rng.uniform(-1.5, 1.5, 80), rng.uniform(4, 9, 80)]
    feats = {i: project(p, X, K_DEFAULT) for i, p in poses.items()}
    cands = generate_candidates(range(4), None, PairingConfig(n1_temporal=3))
    idx = np.c_[np.arange(80), np.arange(80)]
    ms = {(a, b): MatchSet.from_features(a, b, idx, feats[a], feats[b]) for a, b in cands}
    res = verify_pairs(cands, ms, vio, K_DEFAULT, PairingConfig())
    assert all(v.accepted and v.inlier_mask.all() for _, v in res.values())
    empty = verify_pairs(cands, {}, vio, K_DEFAULT, PairingConfig())
    assert all(v.status == PairStatus.REJECTED_BY_VIO for _, v in empty.values())


def test_accepted_matches_satisfy_both_thresholds():
    rng = np.random.default_rng(8)
    pa, pb, ms, _ = two_view(rng, n=120, noise=1.0)
    bad = rng.permutation(120)[:30]
    xb = ms.xb.copy()
    xb[bad] = rng.uniform(0, 480, (30, 2))
    ms = MatchSet(0, 1, ms.idx, ms.xa, xb)
    vio = VioSequence({0: pa, 1: compose(pb, Pose(Rotation.from_rotvec([0.002, 0, 0]), [0.005, 0, 0]))})
    cfg = PairingConfig()
    (_, v), = verify_pairs([(0, 1)], {(0, 1): ms}, vio, K_DEFAULT, cfg).values()
    assert v.accepted
    m = v.inlier_mask
    ee = epipolar_error(fundamental_from_prior(K_DEFAULT, vio.relative(1, 0)), ms.xa[m], ms.xb[m])
    assert ee.max() <= cfg.t_ee
    assert symmetric_distances(v.F, ms.xa[m], ms.xb[m]).max() <= cfg.ransac_threshold
    assert v.ee_outlier_ratio is not None
