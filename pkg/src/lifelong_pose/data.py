"""Pose datasets: procedural synthetic domains, clip windows and the line-delimited pose file format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import DEFAULT_SKELETON, Camera, Skeleton, project

POSE_FILE_VERSION = 1
PRIMITIVES = ("walk", "reach", "squat", "wave")

# rest pose, millimetres, camera axes (x right, y down, z away from the camera); the subject faces the camera
TEMPLATE = np.array([
    [0, 0, 0], [0, -240, 0], [0, -500, 0], [0, -640, 0],
    [160, -470, 0], [160, -190, 0], [160, 60, 0],
    [-160, -470, 0], [-160, -190, 0], [-160, 60, 0],
    [110, 0, 0], [110, 440, 0], [110, 870, 0],
    [-110, 0, 0], [-110, 440, 0], [-110, 870, 0],
], dtype=np.float64)


class InvalidSpec(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class SkeletonHashMismatch(ValueError):
    pass


@dataclass
class PoseDataset:
    """Sequences of 2D poses (pixels) with optional 3D labels (mm, root-relative camera frame)."""

    name: str
    pose2d: list
    pose3d: list | None
    camera: Camera
    frame_rate: float = 50.0
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return int(sum(len(s) for s in self.pose2d))

    @property
    def labeled(self) -> bool:
        return self.pose3d is not None

    def frames2d(self) -> np.ndarray:
        return np.concatenate(self.pose2d, axis=0)

    def frames3d(self) -> np.ndarray:
        if self.pose3d is None:
            raise ValueError(f"dataset {self.name} has no 3D labels")
        return np.concatenate(self.pose3d, axis=0)

    def without_labels(self) -> "PoseDataset":
        return PoseDataset(self.name, self.pose2d, None, self.camera, self.frame_rate, dict(self.meta))


def normalize_2d(pose2d, cam: Camera) -> np.ndarray:
    """Pixels -> normalised image coordinates ((u - cx) / fx, (v - cy) / fy)."""
    pose2d = np.asarray(pose2d, dtype=np.float64)
    return np.stack([(pose2d[..., 0] - cam.cx) / cam.fx, (pose2d[..., 1] - cam.cy) / cam.fy], axis=-1)


def padded_windows(sequences, half: int):
    """Edge-pad every sequence by ``half`` frames and index one window per original frame.

    Returns ``(stacked, index)`` with ``stacked[index]`` of shape ``(N, 2 * half + 1, ...)``.
    """
    padded, centres, offset = [], [], 0
    for seq in sequences:
        seq = np.asarray(seq)
        pad = np.concatenate([np.repeat(seq[:1], half, 0), seq, np.repeat(seq[-1:], half, 0)], 0)
        padded.append(pad)
        centres.append(offset + half + np.arange(len(seq)))
        offset += len(pad)
    stacked = np.concatenate(padded, 0)
    centres = np.concatenate(centres)
    index = centres[:, None] + np.arange(-half, half + 1)[None, :]
    return stacked, index


# ------------------------------------------------------------------------------ synthesis


@dataclass
class SynthDomainSpec:
    name: str
    seed: int
    scale: float = 1.0
    yaw_deg: tuple = (-30.0, 30.0)
    pitch_deg: tuple = (0.0, 0.0)
    noise_px: float = 0.0
    mixture: dict = field(default_factory=lambda: {"walk": 0.5, "reach": 0.5})
    camera: Camera = field(default_factory=Camera)
    seq_len: int = 125
    frame_rate: float = 50.0

    def validate(self):
        if not self.scale > 0:
            raise InvalidSpec("scale must be positive")
        if self.noise_px < 0:
            raise InvalidSpec("noise must be non-negative")
        if set(self.mixture) - set(PRIMITIVES):
            raise InvalidSpec(f"unknown primitives {sorted(set(self.mixture) - set(PRIMITIVES))}")
        w = np.array(list(self.mixture.values()), dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidSpec("mixture weights must be non-negative and sum to 1")
        if self.seq_len < 1:
            raise InvalidSpec("seq_len must be positive")
        return self


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([o, z, z, z, c, -s, z, s, c], -1).reshape(a.shape + (3, 3))


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([c, z, s, z, o, z, -s, z, c], -1).reshape(a.shape + (3, 3))


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([c, -s, z, s, c, z, z, z, o], -1).reshape(a.shape + (3, 3))


def _primitive_angles(kind, t, rng):
    """Joint angles (radians) over time ``t`` for one motion primitive.

    Keys: spine, l/r_hip, l/r_knee, l/r_shoulder_flex, l/r_shoulder_abd, l/r_elbow.
    """
    f = rng.uniform(0.6, 1.4)
    a = rng.uniform(0.75, 1.2)
    phase = 2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)
    s = np.sin(phase)
    r = 0.5 - 0.5 * np.cos(phase * 0.5)
    z = np.zeros_like(t)
    ang = {k: z.copy() for k in ("spine", "l_hip", "r_hip", "l_knee", "r_knee", "l_shoulder_flex",
                                 "r_shoulder_flex", "l_shoulder_abd", "r_shoulder_abd", "l_elbow", "r_elbow")}
    if kind == "walk":
        ang["l_hip"], ang["r_hip"] = 0.45 * a * s, -0.45 * a * s
        ang["l_knee"] = 0.6 * a * (0.5 + 0.5 * np.sin(phase + 0.8))
        ang["r_knee"] = 0.6 * a * (0.5 + 0.5 * np.sin(phase + np.pi + 0.8))
        ang["l_shoulder_flex"], ang["r_shoulder_flex"] = -0.35 * a * s, 0.35 * a * s
        ang["l_elbow"] = ang["r_elbow"] = 0.3 + 0.15 * s
        ang["spine"] = 0.05 + z
    elif kind == "reach":
        side = rng.uniform(0.4, 1.0)
        ang["l_shoulder_flex"] = 1.5 * a * r
        ang["r_shoulder_flex"] = 1.5 * a * side * r
        ang["l_elbow"] = ang["r_elbow"] = 0.9 * (1 - r)
        ang["spine"] = 0.35 * a * r
        ang["l_hip"] = ang["r_hip"] = 0.15 * r
        ang["l_knee"] = ang["r_knee"] = 0.1 * r
    elif kind == "squat":
        ang["l_hip"] = ang["r_hip"] = 1.4 * a * r
        ang["l_knee"] = ang["r_knee"] = 1.9 * a * r
        ang["spine"] = 0.45 * r
        ang["l_shoulder_flex"] = ang["r_shoulder_flex"] = 1.3 * r
        ang["l_elbow"] = ang["r_elbow"] = 0.2 + z
    elif kind == "wave":
        ang["r_shoulder_abd"] = 2.0 + 0.4 * a * r
        ang["r_elbow"] = 0.9 + 0.5 * np.sin(2 * phase)
        ang["l_shoulder_abd"] = 0.15 + z
        ang["l_elbow"] = 0.2 + z
        ang["spine"] = 0.05 * np.sin(phase)
    else:
        raise InvalidSpec(f"unknown primitive {kind!r}")
    # per-sequence posture offsets
    for k in ang:
        ang[k] = ang[k] + rng.normal(0.0, 0.05)
    return ang


def forward_kinematics(root_rot, local_rot, offsets, parents=DEFAULT_SKELETON.parents):
    """Joint positions from per-joint local rotations ``(F, J, 3, 3)`` and rest offsets ``(J, 3)``."""
    n = local_rot.shape[0]
    glob = [None] * len(parents)
    pos = np.zeros((n, len(parents), 3))
    glob[0] = root_rot @ local_rot[:, 0]
    for j in range(1, len(parents)):
        p = parents[j]
        pos[:, j] = pos[:, p] + glob[p] @ offsets[j]
        glob[j] = glob[p] @ local_rot[:, j]
    return pos


def synth_sequence(kind, n_frames, rng, spec: SynthDomainSpec) -> np.ndarray:
    t = np.arange(n_frames) / spec.frame_rate
    ang = _primitive_angles(kind, t, rng)
    eye = np.broadcast_to(np.eye(3), (n_frames, 3, 3))
    local = np.array(np.broadcast_to(eye[:, None], (n_frames, 16, 3, 3)))
    local[:, 1] = _rx(ang["spine"])
    local[:, 10] = _rx(-ang["l_hip"])
    local[:, 13] = _rx(-ang["r_hip"])
    local[:, 11] = _rx(ang["l_knee"])
    local[:, 14] = _rx(ang["r_knee"])
    local[:, 4] = _rz(-ang["l_shoulder_abd"]) @ _rx(-ang["l_shoulder_flex"])
    local[:, 7] = _rz(ang["r_shoulder_abd"]) @ _rx(-ang["r_shoulder_flex"])
    local[:, 5] = _rx(-ang["l_elbow"])
    local[:, 8] = _rx(-ang["r_elbow"])
    yaw0 = np.deg2rad(rng.uniform(*spec.yaw_deg))
    sway = np.deg2rad(5.0) * np.sin(2 * np.pi * rng.uniform(0.1, 0.3) * t) if spec.yaw_deg[0] != spec.yaw_deg[1] else 0.0
    pitch = np.deg2rad(rng.uniform(*spec.pitch_deg))
    root = _ry(yaw0 + sway + 0 * t) @ _rx(pitch + 0 * t)
    offsets = np.zeros_like(TEMPLATE)
    for j, p in enumerate(DEFAULT_SKELETON.parents):
        if p >= 0:
            offsets[j] = spec.scale * (TEMPLATE[j] - TEMPLATE[p])
    return forward_kinematics(root, local, offsets)


def synth_domain(spec: SynthDomainSpec, n_clips: int, T: int = 27, split: str = "train") -> PoseDataset:
    """Procedural labelled domain with about ``n_clips`` clip centres (one per frame).

    ``split`` decorrelates the motion draws of train and evaluation sets built from one spec.
    """
    spec.validate()
    if T % 2 == 0:
        raise InvalidSpec("clip length must be odd")
    salt = {"train": 0, "eval": 1}.get(split, abs(hash(split)) % 1000 + 2)
    rng = np.random.default_rng([spec.seed, salt])
    # separate stream so the noise level never changes the motion draws
    noise_rng = np.random.default_rng([spec.seed, salt, 1])
    names = list(spec.mixture)
    probs = np.array([spec.mixture[k] for k in names], dtype=float)
    n_seq = max(1, math.ceil(n_clips / spec.seq_len))
    p2, p3, kinds = [], [], []
    for i in range(n_seq):
        length = spec.seq_len if i < n_seq - 1 else n_clips - spec.seq_len * (n_seq - 1)
        kind = names[rng.choice(len(names), p=probs)]
        pose = synth_sequence(kind, max(length, 1), rng, spec)
        uv = project(pose, spec.camera)
        if spec.noise_px > 0:
            uv = uv + noise_rng.normal(0.0, spec.noise_px, uv.shape)
        p3.append(pose)
        p2.append(uv)
        kinds.append(kind)
    meta = {"spec": {**spec.__dict__, "camera": spec.camera.to_dict(), "yaw_deg": list(spec.yaw_deg),
                     "pitch_deg": list(spec.pitch_deg)}, "split": split, "primitives": kinds}
    return PoseDataset(spec.name, p2, p3, spec.camera, spec.frame_rate, meta)


def template_bone_lengths(scale: float = 1.0) -> np.ndarray:
    return np.array([scale * np.linalg.norm(TEMPLATE[c] - TEMPLATE[p]) for p, c in DEFAULT_SKELETON.bones])


# ------------------------------------------------------------------------------ pose files


def write_pose_file(path, sequences, *, dims: int, units: str, domain: str, frame_rate: float = 50.0,
                    skel: Skeleton = DEFAULT_SKELETON, **extra) -> Path:
    path = Path(path)
    sequences = [np.asarray(s, dtype=np.float64) for s in sequences]
    for s in sequences:
        if s.shape[1:] != (skel.joint_count, dims):
            raise FormatError(f"sequence shape {s.shape} does not match {skel.joint_count}x{dims}")
        if not np.all(np.isfinite(s)):
            raise FormatError("non-finite values cannot be written")
    header = {
        "format": "lifelong-pose", "version": POSE_FILE_VERSION, "skeleton_hash": skel.hash(),
        "joint_order": list(skel.joint_names), "units": units, "dims": dims, "frame_rate": frame_rate,
        "domain": domain, "sequences": [len(s) for s in sequences], **extra,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in sequences:
            for frame in s.reshape(len(s), -1):
                fh.write(" ".join(repr(float(v)) for v in frame) + "\n")
    return path


def read_pose_file(path, skel: Skeleton = DEFAULT_SKELETON):
    """Return ``(header, sequences)``; raises FormatError naming the offending line."""
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"bad header: {e}", 1) from None
    for key in ("format", "version", "skeleton_hash", "units", "dims", "frame_rate", "domain", "sequences"):
        if key not in header:
            raise FormatError(f"header lacks {key!r}", 1)
    if header["format"] != "lifelong-pose" or header["version"] != POSE_FILE_VERSION:
        raise FormatError("unsupported format/version", 1)
    if header["skeleton_hash"] != skel.hash():
        raise SkeletonHashMismatch(f"file skeleton {header['skeleton_hash']} != {skel.hash()}")
    dims = int(header["dims"])
    if dims not in (2, 3):
        raise FormatError("dims must be 2 or 3", 1)
    width = skel.joint_count * dims
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != width:
            raise FormatError(f"expected {width} values, got {len(parts)}", i)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise FormatError("non-numeric value", i) from None
        if not all(math.isfinite(v) for v in vals):
            raise FormatError("non-finite value", i)
        rows.append(vals)
    lengths = [int(n) for n in header["sequences"]]
    if sum(lengths) != len(rows):
        raise FormatError(f"header announces {sum(lengths)} frames, found {len(rows)}", len(lines) + 1)
    arr = np.array(rows, dtype=np.float64).reshape(-1, skel.joint_count, dims)
    bounds = np.cumsum([0] + lengths)
    return header, [arr[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def write_dataset(path2d, ds: PoseDataset, skel: Skeleton = DEFAULT_SKELETON, **extra) -> Path:
    """Write the 2D file and, for labelled sets, a sibling ``*.3d.pose`` referenced from the 2D header."""
    path2d = Path(path2d)
    labels = None
    if ds.pose3d is not None:
        labels = path2d.name.replace(".2d.pose", "") + ".3d.pose"
        write_pose_file(path2d.parent / labels, ds.pose3d, dims=3, units="mm", domain=ds.name,
                        frame_rate=ds.frame_rate, skel=skel, **extra)
    write_pose_file(path2d, ds.pose2d, dims=2, units="px", domain=ds.name, frame_rate=ds.frame_rate,
                    skel=skel, camera=ds.camera.to_dict(), labels=labels, **extra)
    return path2d


def read_dataset(path2d, with_labels: bool = True, skel: Skeleton = DEFAULT_SKELETON) -> PoseDataset:
    path2d = Path(path2d)
    header, seq2d = read_pose_file(path2d, skel)
    if header["dims"] != 2:
        raise FormatError("expected a 2D pose file", 1)
    cam = Camera(**header["camera"]) if "camera" in header else Camera()
    seq3d = None
    if with_labels and header.get("labels"):
        h3, seq3d = read_pose_file(path2d.parent / header["labels"], skel)
        if [len(s) for s in seq3d] != [len(s) for s in seq2d]:
            raise FormatError("2D and 3D files disagree on sequence lengths", 1)
    return PoseDataset(header["domain"], seq2d, seq3d, cam, header["frame_rate"], {"header": header})
