"""Value types shared by reconstruction and bundle adjustment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, relative_pose


class VioSequence:
    """Per-frame absolute VIO poses in the odometry's own local frame."""

    def __init__(self, poses: dict[int, Pose]):
        ids = sorted(poses)
        self.poses = {i: poses[i] for i in ids}
        self._ids = ids

    @property
    def frame_ids(self) -> list[int]:
        return list(self._ids)

    def __contains__(self, frame_id) -> bool:
        return frame_id in self.poses

    def __len__(self) -> int:
        return len(self._ids)

    def __getitem__(self, frame_id) -> Pose:
        return self.poses[frame_id]

    def relative(self, i: int, j: int) -> Pose:
        """Pose of frame j in frame i's camera frame (chained odometry)."""
        return relative_pose(self.poses[i], self.poses[j])


@dataclass
class Track:
    point: np.ndarray
    # frame id -> (feature index, pixel xy)
    observations: dict[int, tuple[int, np.ndarray]] = field(default_factory=dict)

    def __len__(self):
        return len(self.observations)

    def add(self, frame: int, feature: int, xy) -> None:
        if frame in self.observations:
            raise ValueError(f"track already observed in frame {frame}")
        self.observations[frame] = (int(feature), np.asarray(xy, dtype=float))


@dataclass
class Reconstruction:
    intrinsics: Intrinsics
    poses: dict[int, Pose] = field(default_factory=dict)
    tracks: dict[int, Track] = field(default_factory=dict)
    registered_batches: int = 0
    # frames held fixed by bundle adjustment
    gauge_frames: set[int] = field(default_factory=set)
    # verified correspondence counts of accepted pairs, keyed (a, b) with a < b
    pair_counts: dict[tuple[int, int], int] = field(default_factory=dict)
    # (frame, feature) -> track id
    node_track: dict[tuple[int, int], int] = field(default_factory=dict)
    consumed_pairs: set[tuple[int, int]] = field(default_factory=set)
    next_track_id: int = 0

    @property
    def registered_frames(self) -> list[int]:
        return sorted(self.poses)

    def correspondences(self, a: int, b: int) -> int:
        return self.pair_counts.get((min(a, b), max(a, b)), 0)

    def add_track(self, track: Track) -> int:
        tid = self.next_track_id
        self.next_track_id += 1
        self.tracks[tid] = track
        for frame, (feat, _) in track.observations.items():
            self.node_track[(frame, feat)] = tid
        return tid

    def remove_observation(self, tid: int, frame: int) -> None:
        feat, _ = self.tracks[tid].observations.pop(frame)
        self.node_track.pop((frame, feat), None)

    def remove_track(self, tid: int) -> None:
        track = self.tracks.pop(tid)
        for frame, (feat, _) in track.observations.items():
            self.node_track.pop((frame, feat), None)

    def points_array(self) -> tuple[list[int], np.ndarray]:
        ids = sorted(self.tracks)
        return ids, np.array([self.tracks[t].point for t in ids]).reshape(-1, 3)

    def num_observations(self) -> int:
        return sum(len(t) for t in self.tracks.values())
