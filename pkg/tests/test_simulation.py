import numpy as np
import pytest
from scipy import stats

from viosfm.geometry import (
    Pose,
    Rotation,
    compose,
    epipolar_error,
    fundamental_from_prior,
    log_map,
    project,
    relative_pose,
)
from viosfm.model import VioSequence
from viosfm.simulation import (
    ConfusingRetrieval,
    CovisibilityRetrieval,
    EvaluationError,
    GenerationError,
    ScenarioConfig,
    evaluate_ate,
    generate,
    simulate_vio,
)
from viosfm.verification import PairingConfig, ransac_fundamental


def small(world="box-cloud", **kw):
    kw.setdefault("num_frames", 40)
    kw.setdefault("num_points", 600)
    return generate(ScenarioConfig(world=world, **kw))


def circle_trajectory(n, radius=5.0):
    out = []
    for i in range(n):
        th = 2 * np.pi * i / n
        out.append(Pose(Rotation.from_rotvec([0, 0, th]), [radius * np.cos(th), radius * np.sin(th), 0.1 * i]))
    return out


def random_sim3(rng):
    return rng.uniform(0.5, 2.0), Rotation.from_rotvec(rng.normal(size=3)).matrix(), rng.normal(size=3) * 3


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(world="moon")
    with pytest.raises(ValueError):
        ScenarioConfig(num_frames=0)
    with pytest.raises(ValueError):
        ScenarioConfig(outlier_fraction=1.0)
    with pytest.raises(ValueError):
        ScenarioConfig(sigma_px=-1)
    with pytest.raises(ValueError):
        ScenarioConfig(texture_gaps=[(5, 3)])


def test_generate_is_deterministic():
    a, b = small(seed=3), small(seed=3)
    for f in a.frames:
        np.testing.assert_array_equal(a.features[f], b.features[f])
        np.testing.assert_array_equal(a.feature_points[f], b.feature_points[f])
        np.testing.assert_array_equal(a.vio[f].matrix(), b.vio[f].matrix())
    np.testing.assert_array_equal(a.points, b.points)
    ma, mb = a.matchset(2, 7), b.matchset(2, 7)
    np.testing.assert_array_equal(ma.idx, mb.idx)
    c = small(seed=4)
    assert not np.array_equal(a.features[1], c.features[1])


@pytest.mark.parametrize("world", ["box-cloud", "corridor-loop", "duplicated-corridor"])
def test_noise_free_matches_satisfy_epipolar_constraint(world):
    ds = small(world, num_frames=60, num_points=1500, sigma_px=0.0, outlier_fraction=0.0)
    K = ds.intrinsics
    checked = 0
    for a, b in sorted(ds.covisible_pairs(min_matches=10))[:40]:
        if (a, b) in ds.doppelganger_pairs:
            continue
        ms = ds.matchset(a, b)
        assert ds.gt_inlier_mask(a, b).all()
        rel = relative_pose(ds.gt_poses[b], ds.gt_poses[a])
        if np.linalg.norm(rel.translation) < 1e-6:
            continue
        ee = epipolar_error(fundamental_from_prior(K, rel), ms.xa, ms.xb)
        ok = np.isfinite(ee)
        assert ok.mean() > 0.9
        assert ee[ok].max() < 1e-6
        checked += 1
    assert checked > 5


def test_true_matches_reproject_within_five_sigma():
    ds = small("corridor-loop", num_frames=80, num_points=1500, sigma_px=1.0)
    for a, b in sorted(ds.covisible_pairs())[:30]:
        ms, true = ds.matchset(a, b), ds.gt_inlier_mask(a, b)
        pts = ds.points[ds.feature_points[a][ms.idx[true, 0]]]
        assert np.linalg.norm(project(ds.gt_poses[a], pts, ds.intrinsics) - ms.xa[true], axis=1).max() < 5.0
        assert np.linalg.norm(project(ds.gt_poses[b], pts, ds.intrinsics) - ms.xb[true], axis=1).max() < 5.0


def test_outlier_fraction_and_one_to_one():
    ds = small("corridor-loop", num_frames=80, num_points=1500, outlier_fraction=0.2)
    fracs = []
    for a, b in sorted(ds.covisible_pairs())[:30]:
        ms = ds.matchset(a, b)
        fracs.append(1 - ds.gt_inlier_mask(a, b).mean())
        assert len(np.unique(ms.idx[:, 1])) == len(ms)
    assert abs(np.mean(fracs) - 0.2) < 0.03


def test_duplicated_corridor_has_self_consistent_doppelgangers():
    # noise-free features, so only the injected outliers may disagree with the fitted model
    ds = small("duplicated-corridor", num_frames=120, num_points=1500, sigma_px=0.0)
    assert ds.doppelganger_pairs
    ranked = sorted(ds.doppelganger_pairs, key=lambda p: -len(ds.matchset(*p)))
    cfg = PairingConfig()
    a, b = ranked[0]
    ms = ds.matchset(a, b)
    _, v = ransac_fundamental(ms, cfg, rng=0)
    assert v.accepted
    assert v.num_inliers / len(ms) > 0.9
    # no scene point is shared: every match is a look-alike
    assert not ds.gt_inlier_mask(a, b).any()
    assert ds.true_match_count(a, b) == 0


def test_texture_gap_limits_correspondences():
    ds = small("corridor-loop", num_frames=100, num_points=1500, texture_gaps=[(40, 49)])
    for f in range(40, 50):
        assert len(ds.features[f]) <= 5
        assert len(ds.matchset(f, f + 1)) <= 5
    assert len(ds.features[30]) > 20


def test_generation_error_names_frame():
    with pytest.raises(GenerationError, match="frame 0"):
        generate(ScenarioConfig(world="box-cloud", num_frames=5, num_points=50, max_view_distance=0.05))


def test_retrieval_providers():
    ds = small("duplicated-corridor", num_frames=120, num_points=1500)
    cov = CovisibilityRetrieval(ds, exclude_window=3)
    for g in cov.query(10, 5):
        assert abs(g - 10) > 3
        assert ds.true_match_count(10, g) > 0
    conf = ConfusingRetrieval(ds, exclude_window=3, min_shared=8)
    hits = conf.query(10, 20)
    assert any((min(10, g), max(10, g)) in ds.doppelganger_pairs for g in hits)


def test_simulate_vio_zero_noise_is_exact():
    traj = circle_trajectory(300)
    vio = simulate_vio(traj, 0.0, 0.0, seed=1)
    for i, p in enumerate(traj):
        np.testing.assert_array_equal(vio[i].matrix(), p.matrix())
    d = {10 + i: p for i, p in enumerate(traj[:5])}
    assert simulate_vio(d, 0.0, 0.0).frame_ids == list(range(10, 15))


def test_simulate_vio_first_pose_and_requires_input():
    traj = circle_trajectory(10)
    assert simulate_vio(traj, 1.0, 0.1, seed=0)[0].matrix().tolist() == traj[0].matrix().tolist()
    with pytest.raises(ValueError):
        simulate_vio([], 0.1, 0.1)


def test_simulate_vio_drift_envelope():
    traj = [Pose.identity()] + [Pose(Rotation.identity(), [0.1 * i, 0, 0]) for i in range(1, 501)]
    terminal = []
    for seed in range(100):
        vio = simulate_vio(traj, 0.0, 0.005, seed=seed)
        terminal.append(np.linalg.norm(vio[500].translation - traj[500].translation))
    med = np.median(terminal)
    assert 0.05 <= med <= 0.35
    assert med > 5 * 0.005


def test_simulate_vio_drift_grows_with_frame_index():
    traj = circle_trajectory(400)
    early, late = [], []
    for seed in range(30):
        vio = simulate_vio(traj, 0.2, 0.005, seed=seed)
        early.append(np.linalg.norm(vio[50].translation - traj[50].translation))
        late.append(np.linalg.norm(vio[399].translation - traj[399].translation))
    assert np.median(late) > 2 * np.median(early)


def test_simulate_vio_relative_errors_are_zero_mean():
    traj = circle_trajectory(10001)
    vio = simulate_vio(traj, 0.2, 0.005, seed=5)
    err = np.array(
        [
            log_map(relative_pose(relative_pose(traj[k], traj[k + 1]), vio.relative(k, k + 1)))
            for k in range(10000)
        ]
    )
    pvals = stats.ttest_1samp(err, 0.0).pvalue
    # Bonferroni over the six tangent components
    assert pvals.min() > 0.05 / 6
    np.testing.assert_allclose(err[:, :3].std(axis=0), 0.005, rtol=0.05)
    np.testing.assert_allclose(err[:, 3:].std(axis=0), np.deg2rad(0.2), rtol=0.05)


def test_ate_identity_and_similarity():
    rng = np.random.default_rng(0)
    ref = {i: rng.normal(size=3) * 4 for i in range(50)}
    r = evaluate_ate(ref, ref)
    assert r.rmse == pytest.approx(0.0, abs=1e-12) and r.median == pytest.approx(0.0, abs=1e-12)
    s, R, t = random_sim3(rng)
    est = {i: s * R @ x + t for i, x in ref.items()}
    r = evaluate_ate(est, ref)
    assert r.rmse < 1e-9
    assert r.scale == pytest.approx(1 / s)
    assert evaluate_ate(est, ref, with_scale=False).rmse > 1e-3 or abs(s - 1) < 1e-6


def test_ate_accepts_poses_and_sequences():
    traj = circle_trajectory(30)
    poses = dict(enumerate(traj))
    assert evaluate_ate(VioSequence(poses), poses).rmse < 1e-12
    assert len(evaluate_ate(poses, {i: traj[i] for i in range(10)}).frames) == 10


def test_ate_iid_noise_matches_expectation():
    rng = np.random.default_rng(1)
    sigma = 0.05
    ref = {i: np.array([np.cos(i / 20), np.sin(i / 20), i / 100]) * 10 for i in range(300)}
    rmses = []
    for _ in range(100):
        est = {i: x + rng.normal(size=3) * sigma for i, x in ref.items()}
        rmses.append(evaluate_ate(est, ref).rmse)
    assert abs(np.mean(rmses) - np.sqrt(3) * sigma) < 0.1 * np.sqrt(3) * sigma


def test_ate_invariances():
    rng = np.random.default_rng(2)
    ref = {i: rng.normal(size=3) for i in range(40)}
    est = {i: x + rng.normal(size=3) * 0.1 for i, x in ref.items()}
    base = evaluate_ate(est, ref).rmse
    _, R, t = random_sim3(rng)
    both = evaluate_ate({i: R @ x + t for i, x in est.items()}, {i: R @ x + t for i, x in ref.items()})
    assert both.rmse == pytest.approx(base, rel=1e-9)
    s, R, t = random_sim3(rng)
    assert evaluate_ate({i: s * R @ x + t for i, x in est.items()}, ref).rmse == pytest.approx(base, rel=1e-9)
    base_rigid = evaluate_ate(est, ref, with_scale=False).rmse
    moved = evaluate_ate({i: R @ x + t for i, x in est.items()}, ref, with_scale=False).rmse
    assert moved == pytest.approx(base_rigid, rel=1e-9)


def test_ate_needs_three_common_frames():
    with pytest.raises(EvaluationError):
        evaluate_ate({0: np.zeros(3), 1: np.ones(3)}, {0: np.zeros(3), 1: np.ones(3)})
    with pytest.raises(EvaluationError):
        evaluate_ate({i: np.ones(3) * i for i in range(5)}, {i + 10: np.ones(3) * i for i in range(5)})
