"""Timestamped pose sequences and their CSV form (``t,x,y,z,qw,qx,qy,qz``)."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .geometry import Pose3

CSV_HEADER = ["t", "x", "y", "z", "qw", "qx", "qy", "qz"]


@dataclass
class Trajectory:
    times: np.ndarray  # (N,)
    quat: np.ndarray  # (N, 4) w, x, y, z
    trans: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.quat = np.asarray(self.quat, dtype=float).reshape(-1, 4)
        self.trans = np.asarray(self.trans, dtype=float).reshape(-1, 3)
        if not (len(self.times) == len(self.quat) == len(self.trans)):
            raise ValueError("trajectory arrays differ in length")

    @classmethod
    def from_poses(cls, times, poses) -> "Trajectory":
        poses = list(poses)
        return cls(
            times,
            np.array([p.rotation for p in poses]).reshape(-1, 4),
            np.array([p.translation for p in poses]).reshape(-1, 3),
        )

    def __len__(self):
        return len(self.times)

    def pose(self, i: int) -> Pose3:
        return Pose3(self.quat[i], self.trans[i])

    def poses(self) -> list:
        return [self.pose(i) for i in range(len(self))]

    @property
    def positions(self) -> np.ndarray:
        return self.trans

    def transformed(self, T: Pose3) -> "Trajectory":
        """Left-apply a rigid transform to every pose."""
        return Trajectory.from_poses(self.times, [T.compose(p) for p in self.poses()])

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for t, p, q in zip(self.times, self.trans, self.quat):
                w.writerow([repr(float(x)) for x in (t, *p, *q)])

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "Trajectory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or [h.strip() for h in rows[0]] != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float).reshape(-1, 8)
        return cls(data[:, 0], data[:, 4:8], data[:, 1:4])
