"""Canonical 16-joint skeleton, bone decomposition, pinhole projection and pose metrics.

All functions here are pure numpy and operate on arrays whose trailing
dimensions are ``(J, 3)`` (3D, millimetres) or ``(J, 2)`` (2D, pixels);
any leading batch/frame dimensions are carried through.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

SKELETON_FORMAT_VERSION = 1

JOINT_NAMES = (
    "pelvis",
    "spine",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
)
PARENTS = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)
SEGMENT_NAMES = ("left_arm", "right_arm", "left_leg", "right_leg", "torso", "ex_torso")
SEGMENTS = {
    "left_arm": (4, 5, 6),
    "right_arm": (7, 8, 9),
    "left_leg": (10, 11, 12),
    "right_leg": (13, 14, 15),
    "torso": (0, 1, 2, 3, 4, 7, 10, 13),
    # head, shoulders, hips and the four end effectors: joints with no direct bone between them
    "ex_torso": (3, 4, 7, 10, 13, 6, 9, 12, 15),
}

ZERO_LENGTH_TOL = 1e-9
DEPTH_EPS = 1.0


class ZeroLengthBone(ValueError):
    pass


class BehindCamera(ValueError):
    pass


class SkeletonMismatch(ValueError):
    pass


class DegeneratePose(ValueError):
    pass


class InvalidSkeleton(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    name: str
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    segments: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        n = len(self.parents)
        if len(self.joint_names) != n:
            raise InvalidSkeleton("joint_names and parents differ in length")
        if self.parents[0] != -1:
            raise InvalidSkeleton("joint 0 must be the root")
        for j in range(1, n):
            # parents precede children: guarantees a single tree and a topological bone order
            if not 0 <= self.parents[j] < j:
                raise InvalidSkeleton(f"joint {j} has parent {self.parents[j]}; parents must precede children")
        names = tuple(name for name, _ in self.segments)
        if names != SEGMENT_NAMES:
            raise InvalidSkeleton(f"segments must be exactly {SEGMENT_NAMES}, got {names}")
        covered = set()
        for name, joints in self.segments:
            if not joints or any(not 0 <= j < n for j in joints):
                raise InvalidSkeleton(f"segment {name} has invalid joints {joints}")
            covered.update(joints)
        if covered != set(range(n)):
            raise InvalidSkeleton(f"segments miss joints {sorted(set(range(n)) - covered)}")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def bones(self) -> list[tuple[int, int]]:
        return [(self.parents[c], c) for c in range(1, self.joint_count)]

    @property
    def bone_count(self) -> int:
        return self.joint_count - 1

    def segment(self, name: str) -> tuple[int, ...]:
        return dict(self.segments)[name]

    def to_dict(self) -> dict:
        return {
            "version": SKELETON_FORMAT_VERSION,
            "name": self.name,
            "joint_names": list(self.joint_names),
            "parents": list(self.parents),
            "segments": {name: list(joints) for name, joints in self.segments},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        if d.get("version") != SKELETON_FORMAT_VERSION:
            raise InvalidSkeleton(f"unsupported skeleton version {d.get('version')!r}")
        segs = d["segments"]
        return cls(
            name=d["name"],
            joint_names=tuple(d["joint_names"]),
            parents=tuple(int(p) for p in d["parents"]),
            segments=tuple((name, tuple(int(j) for j in segs[name])) for name in segs),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "Skeleton":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


DEFAULT_SKELETON = Skeleton(
    name="h36m16",
    joint_names=JOINT_NAMES,
    parents=PARENTS,
    segments=tuple((name, SEGMENTS[name]) for name in SEGMENT_NAMES),
)


def load_skeleton(path=None) -> Skeleton:
    return DEFAULT_SKELETON if path is None else Skeleton.load(path)


@dataclass(frozen=True)
class BoneSet:
    """Unit directions ``(..., B, 3)`` and lengths ``(..., B)`` in skeleton bone order."""

    directions: np.ndarray
    lengths: np.ndarray


@dataclass(frozen=True)
class Camera:
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0
    subject_depth_offset: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("fx", "fy", "cx", "cy", "subject_depth_offset")}


def _check_pose(pose, skel: Skeleton, dims: int) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.ndim < 2 or pose.shape[-2:] != (skel.joint_count, dims):
        raise SkeletonMismatch(f"expected (..., {skel.joint_count}, {dims}), got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose contains non-finite values")
    return pose


def root_center(pose, root: int = 0) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    return pose - pose[..., root : root + 1, :]


def bones_from_joints(pose, skel: Skeleton = DEFAULT_SKELETON) -> BoneSet:
    pose = _check_pose(pose, skel, 3)
    par = np.array([p for p, _ in skel.bones])
    chi = np.array([c for _, c in skel.bones])
    vec = pose[..., chi, :] - pose[..., par, :]
    lengths = np.linalg.norm(vec, axis=-1)
    if np.any(lengths < ZERO_LENGTH_TOL):
        bad = [skel.bones[i] for i in np.unique(np.nonzero(lengths < ZERO_LENGTH_TOL)[-1])]
        raise ZeroLengthBone(f"zero-length bones {bad}")
    return BoneSet(vec / lengths[..., None], lengths)


def joints_from_bones(bones: BoneSet, root_position=None, skel: Skeleton = DEFAULT_SKELETON) -> np.ndarray:
    dirs = np.asarray(bones.directions, dtype=np.float64)
    lengths = np.asarray(bones.lengths, dtype=np.float64)
    if dirs.shape[-2:] != (skel.bone_count, 3) or lengths.shape != dirs.shape[:-1]:
        raise SkeletonMismatch(f"bone arrays {dirs.shape}/{lengths.shape} do not fit skeleton")
    out = np.zeros(dirs.shape[:-2] + (skel.joint_count, 3))
    if root_position is not None:
        out[..., 0, :] = root_position
    for i, (p, c) in enumerate(skel.bones):
        out[..., c, :] = out[..., p, :] + lengths[..., i, None] * dirs[..., i, :]
    return out


def project(pose, cam: Camera, skel: Skeleton = DEFAULT_SKELETON) -> np.ndarray:
    pose = _check_pose(pose, skel, 3)
    depth = pose[..., 2] + cam.subject_depth_offset
    if np.any(depth <= DEPTH_EPS):
        raise BehindCamera(f"minimum depth {depth.min():.3f} mm is not in front of the camera")
    u = cam.fx * pose[..., 0] / depth + cam.cx
    v = cam.fy * pose[..., 1] / depth + cam.cy
    return np.stack([u, v], axis=-1)


def mpjpe(pred, gt, skel: Skeleton = DEFAULT_SKELETON) -> float:
    """Root-centred mean per-joint position error, averaged over every leading dimension."""
    pred = _check_pose(pred, skel, 3)
    gt = _check_pose(gt, skel, 3)
    if pred.shape != gt.shape:
        raise SkeletonMismatch(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(root_center(pred) - root_center(gt), axis=-1)))


def procrustes_align(pred, gt) -> np.ndarray:
    """Similarity-align ``pred`` onto ``gt`` (rotation, uniform scale, translation), batched."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mu_x = gt.mean(axis=-2, keepdims=True)
    mu_y = pred.mean(axis=-2, keepdims=True)
    x0 = gt - mu_x
    y0 = pred - mu_y
    norm_x = np.sqrt(np.sum(x0**2, axis=(-2, -1), keepdims=True))
    norm_y = np.sqrt(np.sum(y0**2, axis=(-2, -1), keepdims=True))
    if np.any(norm_x == 0):
        raise DegeneratePose("ground truth has zero spatial variance")
    flat_y = norm_y == 0
    norm_y = np.where(flat_y, 1.0, norm_y)
    x0 = x0 / norm_x
    y0 = y0 / norm_y
    h = np.swapaxes(y0, -1, -2) @ x0
    u, s, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    # reflection fix: flip the weakest axis when the best orthogonal map is improper
    sign = np.sign(np.linalg.det(v @ ut))
    sign = np.where(sign == 0, 1.0, sign)
    v[..., :, -1] *= sign[..., None]
    s[..., -1] *= sign
    r = v @ ut
    scale = (s.sum(axis=-1)[..., None, None]) * norm_x / norm_y
    scale = np.where(flat_y, 0.0, scale)
    aligned = scale * (pred - mu_y) @ np.swapaxes(r, -1, -2) + mu_x
    return aligned


def pa_mpjpe(pred, gt, skel: Skeleton = DEFAULT_SKELETON) -> float:
    pred = _check_pose(pred, skel, 3)
    gt = _check_pose(gt, skel, 3)
    if pred.shape != gt.shape:
        raise SkeletonMismatch(f"shape mismatch {pred.shape} vs {gt.shape}")
    aligned = procrustes_align(pred, gt)
    return float(np.mean(np.linalg.norm(aligned - gt, axis=-1)))


def segment_slices(pose, skel: Skeleton = DEFAULT_SKELETON) -> list[np.ndarray]:
    pose = np.asarray(pose)
    return [pose[..., list(joints), :] for _, joints in skel.segments]
