import numpy as np

from viosfm.geometry import Intrinsics, Pose, Rotation, compose
from viosfm.model import Reconstruction, Track, VioSequence

K_DEFAULT = Intrinsics(400.0, 400.0, 320.0, 240.0)


def small_pose(rng, rot=0.05, trans=0.3):
    return Pose(Rotation.from_rotvec(rng.normal(size=3) * rot), rng.normal(size=3) * trans)


def make_ba_scene(rng, n_cams=6, n_points=80, noise_px=0.0, K=K_DEFAULT, spacing=0.4):
    """Cameras strafing along +x looking down +z at a point cloud; exact truth plus noisy observations."""
    poses = {}
    for i in range(n_cams):
        R = Rotation.from_rotvec(rng.normal(size=3) * 0.03)
        poses[i] = Pose(R, np.array([spacing * i, rng.normal() * 0.05, rng.normal() * 0.05]))
    if n_cams:
        poses[0] = Pose.identity()
    xs = spacing * (n_cams - 1)
    pts = np.c_[rng.uniform(-1.5, xs + 1.5, n_points), rng.uniform(-1.2, 1.2, n_points), rng.uniform(4.0, 8.0, n_points)]
    model = Reconstruction(intrinsics=K, gauge_frames={0})
    for j, X in enumerate(pts):
        track = Track(point=X.copy())
        for i, p in poses.items():
            Xc = p.to_camera(X)
            if Xc[2] <= 0.1:
                continue
            uv = np.array([K.fx * Xc[0] / Xc[2] + K.cx, K.fy * Xc[1] / Xc[2] + K.cy])
            if not (0 <= uv[0] < 640 and 0 <= uv[1] < 480):
                continue
            track.add(i, j, uv + rng.normal(size=2) * noise_px)
        if len(track) >= 2:
            model.add_track(track)
    model.poses = dict(poses)
    for i in range(n_cams - 1):
        model.pair_counts[(i, i + 1)] = sum(1 for t in model.tracks.values() if i in t.observations and i + 1 in t.observations)
    return model, dict(poses), pts


def perturb_model(model, rng, rot=0.01, trans=0.05, point=0.05):
    for f in model.poses:
        if f in model.gauge_frames:
            continue
        model.poses[f] = compose(model.poses[f], small_pose(rng, rot, trans))
    for t in model.tracks.values():
        t.point = t.point + rng.normal(size=3) * point
    return model


def vio_from(poses):
    return VioSequence(dict(poses))


# PASS/FAIL lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
