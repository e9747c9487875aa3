"""Skeleton data: NTU ``.skeleton`` parsing, resampling, stream derivation,
synthetic datasets and the ``HOCS1`` binary cache.

Coordinates are stored channel-first as ``(C, T, N)`` or, for parsed NTU files,
``(C, T, N, M)`` with ``M = 2`` bodies.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CacheFormatError,
    EmptySequence,
    JointCountMismatch,
    MalformedHeader,
    SkeletonParseError,
    TooFewFrames,
    TruncatedFile,
)

NUM_NTU_JOINTS = 25
MAX_BODIES = 2
ROOT_JOINT = 0  # spine base

# (parent, child), 0-based NTU ordering, rooted at the spine base.
NTU_EDGES: tuple[tuple[int, int], ...] = (
    (0, 1), (1, 20), (20, 2), (2, 3),
    (20, 4), (4, 5), (5, 6), (6, 7), (7, 22), (22, 21),
    (20, 8), (8, 9), (9, 10), (10, 11), (11, 24), (24, 23),
    (0, 12), (12, 13), (13, 14), (14, 15),
    (0, 16), (16, 17), (17, 18), (18, 19),
)

STREAM_NAMES = ("joint", "bone", "joint_motion", "bone_motion", "joint_2nd", "vel_2nd")


@dataclass(frozen=True)
class SkeletonSequence:
    coords: np.ndarray
    skeleton_edges: tuple[tuple[int, int], ...] = NTU_EDGES
    label: Optional[int] = None
    caption: Optional[str] = None
    sample_id: Optional[str] = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim not in (3, 4):
            raise ValueError(f"coords must be (C, T, N[, M]), got shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords contain non-finite values")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "skeleton_edges", tuple(tuple(e) for e in self.skeleton_edges))
        if self.label is not None and self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")

    @property
    def frame_count(self) -> int:
        return self.coords.shape[1]

    @property
    def joint_count(self) -> int:
        return self.coords.shape[2]

    @property
    def num_bodies(self) -> int:
        return 1 if self.coords.ndim == 3 else self.coords.shape[3]


@dataclass(frozen=True)
class StreamBundle:
    joint: np.ndarray
    bone: np.ndarray
    joint_motion: np.ndarray
    bone_motion: np.ndarray
    joint_2nd: np.ndarray
    vel_2nd: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in STREAM_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in STREAM_NAMES}


# ----------------------------------------------------------------------------
# Topology helpers
# ----------------------------------------------------------------------------

def check_tree(edges: Sequence[tuple[int, int]], num_joints: int) -> None:
    """Raise ``ValueError`` unless ``edges`` is a spanning tree over the joints."""
    if len(edges) != num_joints - 1:
        raise ValueError(f"a tree over {num_joints} joints needs {num_joints - 1} edges, got {len(edges)}")
    parent = list(range(num_joints))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        if not (0 <= a < num_joints and 0 <= b < num_joints):
            raise ValueError(f"edge ({a}, {b}) out of range")
        ra, rb = find(a), find(b)
        if ra == rb:
            raise ValueError(f"edge ({a}, {b}) closes a cycle")
        parent[ra] = rb


def physical_mask(edges: Sequence[tuple[int, int]] = NTU_EDGES, num_joints: int = NUM_NTU_JOINTS) -> np.ndarray:
    """Binary N x N adjacency of the skeleton tree plus self-loops."""
    mask = np.eye(num_joints)
    for a, b in edges:
        mask[a, b] = mask[b, a] = 1.0
    return mask


def parent_array(edges: Sequence[tuple[int, int]], num_joints: int, root: int = ROOT_JOINT) -> np.ndarray:
    """Parent index per joint (root maps to itself), orienting edges away from ``root``."""
    adjacency: dict[int, list[int]] = {j: [] for j in range(num_joints)}
    for a, b in edges:
        adjacency[a].append(b)
        adjacency[b].append(a)
    parents = np.full(num_joints, -1, dtype=np.int64)
    parents[root] = root
    stack = [root]
    while stack:
        j = stack.pop()
        for k in adjacency[j]:
            if parents[k] < 0:
                parents[k] = j
                stack.append(k)
    if np.any(parents < 0):
        raise ValueError("skeleton edges do not connect every joint to the root")
    return parents


# ----------------------------------------------------------------------------
# NTU .skeleton grammar
# ----------------------------------------------------------------------------

BODY_HEADER_FIELDS = 10  # body id + 9 tracking values
JOINT_FIELDS = 12


@dataclass
class BodyRecord:
    header: list[str]
    joints: list[list[str]]

    def xyz(self) -> np.ndarray:
        return np.array([[float(v) for v in row[:3]] for row in self.joints], dtype=np.float64)


@dataclass
class SkeletonFileRecord:
    """Token-level view of a ``.skeleton`` file; serializes back losslessly."""

    frames: list[list[BodyRecord]] = field(default_factory=list)

    @property
    def frame_count(self) -> int:
        return len(self.frames)


class _Lines:
    def __init__(self, text: str):
        self._lines = [ln.strip() for ln in text.splitlines()]
        # trailing blank lines are not content
        while self._lines and not self._lines[-1]:
            self._lines.pop()
        self.pos = 0

    def next(self, what: str) -> list[str]:
        while self.pos < len(self._lines) and not self._lines[self.pos]:
            self.pos += 1
        if self.pos >= len(self._lines):
            raise TruncatedFile(f"unexpected end of file while reading {what}")
        tokens = self._lines[self.pos].split()
        self.pos += 1
        return tokens

    def remaining(self) -> list[str]:
        return [ln for ln in self._lines[self.pos:] if ln]


def _as_int(tokens: list[str], what: str, exc=SkeletonParseError) -> int:
    if len(tokens) != 1:
        raise exc(f"{what}: expected a single integer, got {' '.join(tokens)!r}")
    try:
        return int(tokens[0])
    except ValueError:
        raise exc(f"{what}: {tokens[0]!r} is not an integer") from None


def _check_floats(tokens: list[str], what: str) -> None:
    try:
        values = [float(t) for t in tokens]
    except ValueError:
        raise SkeletonParseError(f"{what}: non-numeric field in {' '.join(tokens)!r}") from None
    if not all(np.isfinite(values)):
        raise SkeletonParseError(f"{what}: non-finite value")


def parse_skeleton_records(text: str) -> SkeletonFileRecord:
    lines = _Lines(text)
    try:
        header = lines.next("frame count")
    except TruncatedFile:
        raise MalformedHeader("empty file") from None
    frame_count = _as_int(header, "frame count", MalformedHeader)
    if frame_count <= 0:
        raise MalformedHeader(f"frame count must be positive, got {frame_count}")

    record = SkeletonFileRecord()
    declared_joints: Optional[int] = None
    for f in range(frame_count):
        body_count = _as_int(lines.next(f"body count of frame {f}"), f"body count of frame {f}")
        if body_count < 0:
            raise SkeletonParseError(f"frame {f}: negative body count")
        bodies = []
        for b in range(body_count):
            where = f"frame {f} body {b}"
            body_header = lines.next(f"{where} header")
            if len(body_header) != BODY_HEADER_FIELDS:
                raise SkeletonParseError(f"{where}: header needs {BODY_HEADER_FIELDS} fields, got {len(body_header)}")
            _check_floats(body_header, where)
            joint_count = _as_int(lines.next(f"{where} joint count"), f"{where} joint count")
            if joint_count <= 0:
                raise JointCountMismatch(f"{where}: joint count must be positive, got {joint_count}")
            if declared_joints is None:
                declared_joints = joint_count
            elif joint_count != declared_joints:
                raise JointCountMismatch(f"{where}: declares {joint_count} joints, earlier bodies {declared_joints}")
            joints = []
            for j in range(joint_count):
                row = lines.next(f"{where} joint {j}")
                if len(row) != JOINT_FIELDS:
                    raise JointCountMismatch(
                        f"{where}: expected {joint_count} joint rows of {JOINT_FIELDS} fields, "
                        f"row {j} has {len(row)}")
                _check_floats(row, f"{where} joint {j}")
                joints.append(row)
            bodies.append(BodyRecord(header=body_header, joints=joints))
        record.frames.append(bodies)

    extra = lines.remaining()
    if extra:
        if len(extra[0].split()) == JOINT_FIELDS:
            raise JointCountMismatch("joint rows found beyond the declared joint count")
        raise SkeletonParseError(f"trailing content after {frame_count} frames")
    return record


def serialize_skeleton_records(record: SkeletonFileRecord) -> str:
    out = io.StringIO()
    out.write(f"{record.frame_count}\n")
    for bodies in record.frames:
        out.write(f"{len(bodies)}\n")
        for body in bodies:
            out.write(" ".join(body.header) + "\n")
            out.write(f"{len(body.joints)}\n")
            for row in body.joints:
                out.write(" ".join(row) + "\n")
    return out.getvalue()


def _select_bodies(record: SkeletonFileRecord, num_joints: int) -> np.ndarray:
    """(3, T, N, 2) coordinates of the two highest-motion bodies."""
    frames = record.frame_count
    tracks: dict[str, np.ndarray] = {}
    present: dict[str, np.ndarray] = {}
    order: list[str] = []
    for t, bodies in enumerate(record.frames):
        for slot, body in enumerate(bodies):
            body_id = body.header[0]
            # repeated ids within one frame are kept apart
            key = body_id if body_id not in present or not present[body_id][t] else f"{body_id}#{slot}"
            if key not in tracks:
                tracks[key] = np.zeros((frames, num_joints, 3))
                present[key] = np.zeros(frames, dtype=bool)
                order.append(key)
            tracks[key][t] = body.xyz()
            present[key][t] = True

    def energy(key: str) -> float:
        xyz = tracks[key][present[key]]
        if len(xyz) < 2:
            return 0.0
        return float(xyz.reshape(len(xyz), -1).var(axis=0).sum())

    ranked = sorted(order, key=lambda k: (-energy(k), order.index(k)))[:MAX_BODIES]
    ranked.sort(key=order.index)  # keep first-appearance order among survivors
    out = np.zeros((3, frames, num_joints, MAX_BODIES))
    for m, key in enumerate(ranked):
        out[:, :, :, m] = tracks[key].transpose(2, 0, 1)
    return out


def parse_skeleton_file(text: str, *, label: Optional[int] = None, caption: Optional[str] = None,
                        sample_id: Optional[str] = None) -> SkeletonSequence:
    """Parse NTU ``.skeleton`` text into a ``(3, T, N, 2)`` sequence.

    Only x, y, z of each joint row are kept. Frames carrying more than two bodies
    keep the two with the largest motion energy; absent bodies are zero.
    """
    record = parse_skeleton_records(text)
    num_joints = next((len(b.joints) for bodies in record.frames for b in bodies), NUM_NTU_JOINTS)
    coords = _select_bodies(record, num_joints)
    edges = NTU_EDGES if num_joints == NUM_NTU_JOINTS else tuple((j - 1, j) for j in range(1, num_joints))
    return SkeletonSequence(coords=coords, skeleton_edges=edges, label=label, caption=caption, sample_id=sample_id)


def read_skeleton_file(path: str | Path, **kwargs) -> SkeletonSequence:
    path = Path(path)
    kwargs.setdefault("sample_id", path.stem)
    if "label" not in kwargs:
        kwargs["label"] = ntu_action_label(path.stem)
    return parse_skeleton_file(path.read_text(), **kwargs)


def ntu_action_label(name: str) -> Optional[int]:
    """0-based action id from an NTU file stem such as ``S001C002P003R002A013``."""
    pos = name.upper().rfind("A")
    if pos < 0 or not name[pos + 1:pos + 4].isdigit():
        return None
    return int(name[pos + 1:pos + 4]) - 1


def format_skeleton_file(seq: SkeletonSequence) -> str:
    """Write a sequence in the ``.skeleton`` grammar (tracking fields zeroed)."""
    coords = seq.coords if seq.coords.ndim == 4 else seq.coords[..., None]
    record = SkeletonFileRecord()
    for t in range(seq.frame_count):
        bodies = []
        for m in range(coords.shape[3]):
            xyz = coords[:, t, :, m]
            if m > 0 and not np.any(coords[:, :, :, m]):
                continue
            header = [str(m)] + ["0"] * (BODY_HEADER_FIELDS - 1)
            joints = [[repr(float(v)) for v in xyz[:, j]] + ["0"] * (JOINT_FIELDS - 3) for j in range(seq.joint_count)]
            bodies.append(BodyRecord(header=header, joints=joints))
        record.frames.append(bodies)
    return serialize_skeleton_records(record)


# ----------------------------------------------------------------------------
# Streams and resampling
# ----------------------------------------------------------------------------

def temporal_difference(x: np.ndarray) -> np.ndarray:
    """x[:, t+1] - x[:, t], last frame zero."""
    out = np.zeros_like(x)
    out[:, :-1] = x[:, 1:] - x[:, :-1]
    return out


def bone_vectors(x: np.ndarray, edges: Sequence[tuple[int, int]], root: int = ROOT_JOINT) -> np.ndarray:
    parents = parent_array(edges, x.shape[2], root)
    bone = x - x[:, :, parents]
    bone[:, :, root] = 0.0
    return bone


def derive_streams(seq: SkeletonSequence) -> StreamBundle:
    if seq.frame_count < 3:
        raise TooFewFrames(f"stream derivation needs at least 3 frames, got {seq.frame_count}")
    joint = seq.coords.copy()
    bone = bone_vectors(joint, seq.skeleton_edges)
    joint_motion = temporal_difference(joint)
    bone_motion = temporal_difference(bone)
    return StreamBundle(
        joint=joint,
        bone=bone,
        joint_motion=joint_motion,
        bone_motion=bone_motion,
        joint_2nd=temporal_difference(joint_motion),
        vel_2nd=temporal_difference(bone_motion),
    )


def select_stream(seq: SkeletonSequence, stream: str) -> SkeletonSequence:
    if stream == "joint":
        return seq
    return replace(seq, coords=derive_streams(seq)[stream])


def resample(seq: SkeletonSequence, target_T: int) -> SkeletonSequence:
    """Linearly interpolate the time axis to exactly ``target_T`` frames."""
    if target_T < 1:
        raise ValueError(f"target_T must be >= 1, got {target_T}")
    T = seq.frame_count
    if T == 0:
        raise EmptySequence("cannot resample a sequence without frames")
    if T == target_T:
        return replace(seq, coords=seq.coords.copy())
    if target_T == 1 or T == 1:
        pos = np.zeros(target_T)
    else:
        pos = np.linspace(0.0, T - 1, target_T)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo).reshape((1, -1) + (1,) * (seq.coords.ndim - 2))
    coords = seq.coords[:, lo] * (1.0 - w) + seq.coords[:, hi] * w
    return replace(seq, coords=coords)


# ----------------------------------------------------------------------------
# Synthetic desk-scale data
# ----------------------------------------------------------------------------

# Rest pose in meters, 0-based NTU joint order.
_REST_POSE = np.array([
    [0.00, 0.00, 0.0], [0.00, 0.30, 0.0], [0.00, 0.62, 0.0], [0.00, 0.78, 0.0],
    [-0.18, 0.54, 0.0], [-0.42, 0.54, 0.0], [-0.64, 0.54, 0.0], [-0.72, 0.54, 0.0],
    [0.18, 0.54, 0.0], [0.42, 0.54, 0.0], [0.64, 0.54, 0.0], [0.72, 0.54, 0.0],
    [-0.10, -0.02, 0.0], [-0.12, -0.45, 0.0], [-0.13, -0.85, 0.0], [-0.13, -0.90, 0.10],
    [0.10, -0.02, 0.0], [0.12, -0.45, 0.0], [0.13, -0.85, 0.0], [0.13, -0.90, 0.10],
    [0.00, 0.52, 0.0], [-0.80, 0.54, 0.0], [-0.74, 0.50, 0.03], [0.80, 0.54, 0.0],
    [0.74, 0.50, 0.03],
])

# name, [(pivot joint, direction)], cycles per window, amplitude (m)
_MOTION_FAMILIES = (
    ("waving the right hand", [(8, (0.2, 1.0, 0.0))], 3.0, 0.35),
    ("waving the left hand", [(4, (-0.2, 1.0, 0.0))], 3.0, 0.35),
    ("kicking with the right leg", [(16, (0.0, 0.3, 1.0))], 1.0, 0.45),
    ("kicking with the left leg", [(12, (0.0, 0.3, 1.0))], 1.0, 0.45),
    ("jumping up", [(0, (0.0, 1.0, 0.0))], 2.0, 0.25),
    ("bowing", [(1, (0.0, -0.6, 1.0))], 1.0, 0.40),
    ("clapping", [(4, (1.0, 0.0, 0.5)), (8, (-1.0, 0.0, 0.5))], 4.0, 0.25),
    ("nodding the head", [(2, (0.0, -0.3, 1.0))], 4.0, 0.12),
)


def class_names(num_classes: int) -> list[str]:
    return [_MOTION_FAMILIES[k][0] if k < len(_MOTION_FAMILIES) else f"doing action {k}"
            for k in range(num_classes)]


def caption_for(name: str) -> str:
    return f"A person is {name}."


def _subtree_weights(pivot: int, parents: np.ndarray) -> np.ndarray:
    """Weights growing with chain depth below ``pivot``; the root pivot moves the whole body."""
    n = len(parents)
    if parents[pivot] == pivot:
        return np.ones(n)
    weights = np.zeros(n)
    for j in range(n):
        k, depth = j, 0
        while k != pivot and parents[k] != k:
            k = parents[k]
            depth += 1
        if k == pivot and depth > 0:
            weights[j] = min(1.0, 0.35 * depth)
    return weights


def _family(k: int):
    if k < len(_MOTION_FAMILIES):
        return _MOTION_FAMILIES[k][1:]
    base = _MOTION_FAMILIES[k % len(_MOTION_FAMILIES)]
    return base[1], base[2] + 0.5 * (k // len(_MOTION_FAMILIES)), base[3]


def make_synthetic_sample(label: int, index: int, seed: int, frames: int = 64) -> SkeletonSequence:
    """One sample of class ``label``; depends only on ``(seed, index)``."""
    rng = np.random.default_rng([seed, index])
    parents = parent_array(NTU_EDGES, NUM_NTU_JOINTS)
    pivots, cycles, amp = _family(label)
    t = np.arange(frames) / frames
    scale = rng.uniform(0.9, 1.1)
    pose = np.broadcast_to(_REST_POSE * scale, (frames, NUM_NTU_JOINTS, 3)).copy()
    phase = rng.uniform(0.0, 2.0 * np.pi)
    freq = cycles * rng.uniform(0.9, 1.1)
    amplitude = amp * rng.uniform(0.8, 1.2)
    wave = 0.6 + np.sin(2.0 * np.pi * freq * t + phase)
    for pivot, direction in pivots:
        direction = np.asarray(direction) / np.linalg.norm(direction)
        weights = _subtree_weights(pivot, parents)
        pose += amplitude * wave[:, None, None] * weights[None, :, None] * direction[None, None, :]
    pose[:, :, [0, 2]] += rng.normal(0.0, 0.1, size=2)
    pose += rng.normal(0.0, 0.01, size=pose.shape)
    name = class_names(label + 1)[label]
    return SkeletonSequence(coords=pose.transpose(2, 0, 1), label=label, caption=caption_for(name),
                            sample_id=f"syn{seed:04d}_{index:05d}")


def make_synthetic_dataset(num_classes: int, samples_per_class: int, seed: int,
                           frames: int = 64) -> list[SkeletonSequence]:
    """Class-major list of ``num_classes * samples_per_class`` samples."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    return [make_synthetic_sample(k, k * samples_per_class + i, seed, frames)
            for k in range(num_classes) for i in range(samples_per_class)]


# ----------------------------------------------------------------------------
# HOCS1 binary cache
# ----------------------------------------------------------------------------

CACHE_MAGIC = b"HOCS1\n"
CACHE_VERSION = 1


def dumps_cache(seq: SkeletonSequence) -> bytes:
    header = {
        "version": CACHE_VERSION,
        "shape": list(seq.coords.shape),
        "dtype": "float64",
        "label": seq.label,
        "caption": seq.caption,
        "sample_id": seq.sample_id,
        "edges": [list(e) for e in seq.skeleton_edges],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    return CACHE_MAGIC + struct.pack("<Q", len(blob)) + blob + seq.coords.astype("<f8").tobytes()


def loads_cache(data: bytes) -> SkeletonSequence:
    if not data.startswith(CACHE_MAGIC):
        raise CacheFormatError("missing HOCS1 magic header")
    offset = len(CACHE_MAGIC)
    if len(data) < offset + 8:
        raise CacheFormatError("truncated cache header")
    (size,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    try:
        header = json.loads(data[offset:offset + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheFormatError(f"unreadable cache header: {exc}") from None
    if header.get("version") != CACHE_VERSION or header.get("dtype") != "float64":
        raise CacheFormatError(f"unsupported cache version/dtype {header.get('version')}/{header.get('dtype')}")
    offset += size
    shape = tuple(header["shape"])
    expected = int(np.prod(shape)) * 8
    if len(data) - offset != expected:
        raise CacheFormatError(f"payload has {len(data) - offset} bytes, expected {expected}")
    coords = np.frombuffer(data, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)
    return SkeletonSequence(coords=coords, skeleton_edges=tuple(map(tuple, header["edges"])),
                            label=header["label"], caption=header["caption"], sample_id=header["sample_id"])


def save_cache(seq: SkeletonSequence, path: str | Path) -> None:
    Path(path).write_bytes(dumps_cache(seq))


def load_cache(path: str | Path) -> SkeletonSequence:
    return loads_cache(Path(path).read_bytes())


def read_caption_sidecar(path: str | Path) -> dict[str, str]:
    """``<sample_id>\\t<caption>`` lines; blank lines ignored."""
    captions = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        sample_id, sep, text = line.partition("\t")
        if not sep:
            raise ValueError(f"caption line without a tab: {line!r}")
        captions[sample_id.strip()] = text.strip()
    return captions
