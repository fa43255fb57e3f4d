"""Procedural articulated-tube dataset with ground-truth shape/pose factors.

A "subject" is a stack of cylindrical segments (its shape: per-segment
radius and length); a pose bends the stack at the joints between segments.
Topology is one fixed template for every parameter value, which is what
makes factor supervision, swap losses, and transfer oracles exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .mesh import TriangleMesh, save_obj
from .rng import counter_rng

SEGMENTS = 4
JOINTS = SEGMENTS - 1
RING_RESOLUTION = 16
RINGS_PER_SEGMENT = 6

RADIUS_RANGE = (0.05, 0.5)
LENGTH_RANGE = (0.3, 1.5)
ANGLE_RANGE = (-math.pi / 2, math.pi / 2)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ShapeParams:
    """Per-subject thickness/length profile of the tube."""

    segment_radii: tuple[float, ...]
    segment_lengths: tuple[float, ...]
    subject_id: int

    def __post_init__(self):
        object.__setattr__(self, "segment_radii", tuple(float(r) for r in self.segment_radii))
        object.__setattr__(self, "segment_lengths", tuple(float(l) for l in self.segment_lengths))
        if len(self.segment_radii) != SEGMENTS or len(self.segment_lengths) != SEGMENTS:
            raise ValueError(
                f"expected {SEGMENTS} radii and lengths, got "
                f"{len(self.segment_radii)} and {len(self.segment_lengths)}"
            )
        for r in self.segment_radii:
            if not RADIUS_RANGE[0] <= r <= RADIUS_RANGE[1]:
                raise ValueError(f"segment radius {r} outside {RADIUS_RANGE}")
        for l in self.segment_lengths:
            if not LENGTH_RANGE[0] <= l <= LENGTH_RANGE[1]:
                raise ValueError(f"segment length {l} outside {LENGTH_RANGE}")


@dataclass(frozen=True)
class PoseParams:
    """Joint bend angles (radians) applied root-to-tip."""

    joint_angles: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "joint_angles", tuple(float(a) for a in self.joint_angles))
        if len(self.joint_angles) != JOINTS:
            raise ValueError(f"expected {JOINTS} joint angles, got {len(self.joint_angles)}")
        for a in self.joint_angles:
            if not ANGLE_RANGE[0] <= a <= ANGLE_RANGE[1]:
                raise ValueError(f"joint angle {a} outside {ANGLE_RANGE}")


@dataclass(frozen=True)
class FactorLabels:
    """Ground-truth generative factors attached to every dataset sample."""

    subject_id: int
    shape: ShapeParams
    pose: PoseParams
    sequence_id: Optional[int] = None
    time_index: Optional[int] = None
    canonical_time: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "shape": {
                "segment_radii": list(self.shape.segment_radii),
                "segment_lengths": list(self.shape.segment_lengths),
            },
            "pose": {"joint_angles": list(self.pose.joint_angles)},
            "sequence_id": self.sequence_id,
            "time_index": self.time_index,
            "canonical_time": self.canonical_time,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FactorLabels":
        return cls(
            subject_id=int(data["subject_id"]),
            shape=ShapeParams(
                segment_radii=data["shape"]["segment_radii"],
                segment_lengths=data["shape"]["segment_lengths"],
                subject_id=int(data["subject_id"]),
            ),
            pose=PoseParams(joint_angles=data["pose"]["joint_angles"]),
            sequence_id=data.get("sequence_id"),
            time_index=data.get("time_index"),
            canonical_time=data.get("canonical_time"),
        )


# ---------------------------------------------------------------------------
# Mesh generation
# ---------------------------------------------------------------------------


def template_faces() -> np.ndarray:
    """Fixed template connectivity shared by all generated meshes."""
    r = RING_RESOLUTION
    n_rings = SEGMENTS * RINGS_PER_SEGMENT
    bottom = 0
    top = 1 + n_rings * r

    def ring_vertex(ring: int, i: int) -> int:
        return 1 + ring * r + (i % r)

    faces = []
    for i in range(r):
        faces.append((bottom, ring_vertex(0, i + 1), ring_vertex(0, i)))
    for ring in range(n_rings - 1):
        for i in range(r):
            a = ring_vertex(ring, i)
            b = ring_vertex(ring, i + 1)
            c = ring_vertex(ring + 1, i)
            d = ring_vertex(ring + 1, i + 1)
            faces.append((a, b, c))
            faces.append((b, d, c))
    for i in range(r):
        faces.append((top, ring_vertex(n_rings - 1, i), ring_vertex(n_rings - 1, i + 1)))
    return np.asarray(faces, dtype=np.int64)


_TEMPLATE_FACES = template_faces()
TEMPLATE_VERTEX_COUNT = 2 + SEGMENTS * RINGS_PER_SEGMENT * RING_RESOLUTION


def _rotation_about(center_z: float, angle: float) -> np.ndarray:
    """Homogeneous rotation about the x-axis line through (0, 0, center_z)."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.eye(4)
    rot[1, 1], rot[1, 2] = c, -s
    rot[2, 1], rot[2, 2] = s, c
    shift_in = np.eye(4)
    shift_in[2, 3] = -center_z
    shift_out = np.eye(4)
    shift_out[2, 3] = center_z
    return shift_out @ rot @ shift_in


def generate_mesh(shape: ShapeParams, pose: PoseParams) -> TriangleMesh:
    """Deterministically build the posed tube mesh for the given factors.

    Rest geometry stacks the segments along +z with rings at cell centers;
    joint j then rigidly rotates everything above the boundary between
    segments j and j+1 about the (moved) joint center, root to tip.
    """
    radii = np.asarray(shape.segment_radii)
    lengths = np.asarray(shape.segment_lengths)
    angles = pose.joint_angles
    cum = np.concatenate([[0.0], np.cumsum(lengths)])

    theta = 2.0 * math.pi * np.arange(RING_RESOLUTION) / RING_RESOLUTION
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    n_rings = SEGMENTS * RINGS_PER_SEGMENT
    rest = np.empty((TEMPLATE_VERTEX_COUNT, 3), dtype=np.float64)
    segment_of = np.empty(TEMPLATE_VERTEX_COUNT, dtype=np.int64)
    rest[0] = (0.0, 0.0, 0.0)
    segment_of[0] = 0
    for ring in range(n_rings):
        seg = ring // RINGS_PER_SEGMENT
        k = ring % RINGS_PER_SEGMENT
        z = cum[seg] + (k + 0.5) / RINGS_PER_SEGMENT * lengths[seg]
        sl = slice(1 + ring * RING_RESOLUTION, 1 + (ring + 1) * RING_RESOLUTION)
        rest[sl, 0] = radii[seg] * cos_t
        rest[sl, 1] = radii[seg] * sin_t
        rest[sl, 2] = z
        segment_of[sl] = seg
    rest[-1] = (0.0, 0.0, cum[-1])
    segment_of[-1] = SEGMENTS - 1

    transforms = [np.eye(4)]
    for j in range(JOINTS):
        local = _rotation_about(cum[j + 1], angles[j])
        transforms.append(transforms[-1] @ local)

    hom = np.concatenate([rest, np.ones((TEMPLATE_VERTEX_COUNT, 1))], axis=1)
    posed = np.empty_like(rest)
    for seg in range(SEGMENTS):
        mask = segment_of == seg
        posed[mask] = (hom[mask] @ transforms[seg].T)[:, :3]
    return TriangleMesh(posed, _TEMPLATE_FACES)


# ---------------------------------------------------------------------------
# Dataset sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    path: str
    labels: FactorLabels


@dataclass(frozen=True)
class DatasetManifest:
    template_topology_hash: str
    generator_seed: int
    samples: tuple[SampleRecord, ...]
    split: dict
    root: Optional[Path] = field(default=None, compare=False)

    def subjects(self) -> list[int]:
        return sorted({s.labels.subject_id for s in self.samples})

    def split_of(self, subject_id: int) -> str:
        for name in ("train", "val", "test"):
            if subject_id in self.split[name]:
                return name
        raise KeyError(f"subject {subject_id} not present in any split")

    def samples_in_split(self, name: str) -> list[SampleRecord]:
        wanted = set(self.split[name])
        return [s for s in self.samples if s.labels.subject_id in wanted]

    def mesh_path(self, sample: SampleRecord) -> Path:
        if self.root is None:
            raise ValueError("manifest has no root directory; load it from disk first")
        return self.root / sample.path

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "template_topology_hash": self.template_topology_hash,
            "generator_seed": self.generator_seed,
            "split": {k: list(v) for k, v in self.split.items()},
            "samples": [{"path": s.path, **s.labels.to_dict()} for s in self.samples],
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = directory / MANIFEST_NAME
        out.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return out

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {data.get('version')!r}")
        samples = tuple(
            SampleRecord(path=entry["path"], labels=FactorLabels.from_dict(entry))
            for entry in data["samples"]
        )
        return cls(
            template_topology_hash=data["template_topology_hash"],
            generator_seed=int(data["generator_seed"]),
            samples=samples,
            split={k: [int(s) for s in v] for k, v in data["split"].items()},
            root=path.parent,
        )


def subject_split(n_subjects: int) -> dict:
    """Subject-disjoint 70/15/15 split by subject index order."""
    n_train = max(1, int(math.floor(n_subjects * 0.70)))
    n_val = int(math.floor(n_subjects * 0.15))
    n_train = min(n_train, n_subjects - 1)  # keep at least one non-train subject
    ids = list(range(n_subjects))
    return {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val :],
    }


def draw_shape(seed: int, subject_id: int) -> ShapeParams:
    rng = counter_rng(seed, "shape", subject_id)
    radii = rng.uniform(*RADIUS_RANGE, size=SEGMENTS)
    lengths = rng.uniform(*LENGTH_RANGE, size=SEGMENTS)
    return ShapeParams(tuple(radii), tuple(lengths), subject_id)


def draw_pose(seed: int, subject_id: int, pose_index: int) -> PoseParams:
    rng = counter_rng(seed, "pose", subject_id, pose_index)
    return PoseParams(tuple(rng.uniform(*ANGLE_RANGE, size=JOINTS)))


def sample_dataset(
    n_subjects: int, n_poses_per_subject: int, seed: int, out_dir
) -> DatasetManifest:
    """Draw subjects and poses, write one OBJ per sample plus manifest.json."""
    if n_subjects < 2:
        raise ValueError(f"need at least 2 subjects, got {n_subjects}")
    if n_poses_per_subject < 2:
        raise ValueError(f"need at least 2 poses per subject, got {n_poses_per_subject}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    topology_hash = None
    for subject in range(n_subjects):
        shape = draw_shape(seed, subject)
        for pose_index in range(n_poses_per_subject):
            pose = draw_pose(seed, subject, pose_index)
            mesh = generate_mesh(shape, pose)
            if topology_hash is None:
                topology_hash = mesh.topology_hash()
            name = f"subject{subject:03d}_pose{pose_index:03d}.obj"
            save_obj(mesh, out_dir / name)
            records.append(
                SampleRecord(
                    path=name,
                    labels=FactorLabels(
                        subject_id=subject, shape=shape, pose=pose, time_index=pose_index
                    ),
                )
            )
    manifest = DatasetManifest(
        template_topology_hash=topology_hash,
        generator_seed=seed,
        samples=tuple(records),
        split=subject_split(n_subjects),
        root=out_dir,
    )
    manifest.save(out_dir)
    return manifest


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------

POSE_TRAJECTORY_AMPLITUDE = math.pi / 4


def canonical_pose(seed: int, t: float) -> PoseParams:
    """Smooth canonical trajectory: one sinusoid per joint, seed-drawn phases."""
    angles = []
    for j in range(JOINTS):
        phase = counter_rng(seed, "sequence-phase", j).uniform(0.0, 2.0 * math.pi)
        angles.append(POSE_TRAJECTORY_AMPLITUDE * math.sin(2.0 * math.pi * t + phase))
    return PoseParams(tuple(angles))


def make_sequence(
    shape: ShapeParams,
    n_frames: int,
    warp: Callable[[float], float],
    seed: int,
    sequence_id: Optional[int] = None,
) -> list[tuple[TriangleMesh, FactorLabels]]:
    """Render the canonical trajectory through a monotone time warp.

    Frame k is posed at canonical time warp(k / (n_frames - 1)); the labels
    carry both the frame index and that canonical time, which is the ground
    truth any alignment of two warps of the same seed is scored against.
    """
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")
    grid = [k / (n_frames - 1) for k in range(n_frames)]
    warped = [float(warp(t)) for t in grid]
    if abs(warped[0]) > 1e-9 or abs(warped[-1] - 1.0) > 1e-9:
        raise ValueError(f"warp must fix the endpoints, got warp(0)={warped[0]}, warp(1)={warped[-1]}")
    for a, b in zip(warped, warped[1:]):
        if b <= a:
            raise ValueError(f"warp is not strictly increasing on the frame grid ({a} -> {b})")
    frames = []
    for k, t in enumerate(warped):
        pose = canonical_pose(seed, t)
        labels = FactorLabels(
            subject_id=shape.subject_id,
            shape=shape,
            pose=pose,
            sequence_id=sequence_id,
            time_index=k,
            canonical_time=t,
        )
        frames.append((generate_mesh(shape, pose), labels))
    return frames
