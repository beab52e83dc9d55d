"""File formats: ascii PLY clouds, skeletons, motions, manifests, weight caches.

Text formats carry a leading magic + version line and write floats with full
round-trip precision, so write-then-read reproduces values to 64-bit decimal
fidelity.  Malformed files raise ParseError naming the file and line.
"""

from __future__ import annotations

import numpy as np

from .geometry import PointCloud, PoseFrame, Skeleton, SkinWeights

SKELETON_MAGIC = "PCMRSKEL 1"
MOTION_MAGIC = "PCMRMOTION 1"
MANIFEST_MAGIC = "PCMRMANIFEST 1"
WEIGHTS_MAGIC = b"PCMRWGT 1"


class ParseError(ValueError):
    """Malformed file; message carries path and 1-based line number."""


def _fmt(x) -> str:
    return repr(float(x))


def _floats(line, path, lineno, expect=None):
    try:
        vals = [float(tok) for tok in line.split()]
    except ValueError:
        raise ParseError(f"{path}:{lineno}: expected numbers, got {line.strip()!r}") from None
    if expect is not None and len(vals) != expect:
        raise ParseError(f"{path}:{lineno}: expected {expect} values, got {len(vals)}")
    return vals


class _Lines:
    def __init__(self, path):
        self.path = str(path)
        with open(path, "r") as f:
            self.lines = f.readlines()
        self.idx = 0

    @property
    def lineno(self):
        return self.idx  # 1-based number of the line just read

    def next(self, what="line"):
        if self.idx >= len(self.lines):
            raise ParseError(f"{self.path}:{self.idx + 1}: unexpected end of file, expected {what}")
        line = self.lines[self.idx]
        self.idx += 1
        return line

    def expect_magic(self, magic):
        line = self.next("magic line").strip()
        if line != magic:
            raise ParseError(f"{self.path}:1: bad magic {line!r}, expected {magic!r}")


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def write_ply(path, points, triangles=None):
    """Ascii PLY with double precision x y z per vertex, optional faces."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        f.write("ply\n")
        f.write("format ascii 1.0\n")
        f.write(f"element vertex {pts.shape[0]}\n")
        f.write("property double x\nproperty double y\nproperty double z\n")
        if triangles is not None:
            triangles = np.asarray(triangles, dtype=np.int64)
            f.write(f"element face {triangles.shape[0]}\n")
            f.write("property list uchar int vertex_indices\n")
        f.write("end_header\n")
        for p in pts:
            f.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        if triangles is not None:
            for t in triangles:
                f.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def read_ply(path):
    """Returns (points (V, 3), triangles (F, 3) or None)."""
    src = _Lines(path)
    if src.next("ply magic").strip() != "ply":
        raise ParseError(f"{src.path}:1: not a PLY file")
    fmt = src.next("format line").strip()
    if fmt != "format ascii 1.0":
        raise ParseError(f"{src.path}:2: unsupported format {fmt!r} (ascii 1.0 only)")
    n_vertex = None
    n_face = 0
    while True:
        line = src.next("header line").strip()
        if line == "end_header":
            break
        if line.startswith("element vertex"):
            n_vertex = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
        elif line.startswith(("property", "comment", "element")):
            continue
        else:
            raise ParseError(f"{src.path}:{src.lineno}: unexpected header line {line!r}")
    if n_vertex is None:
        raise ParseError(f"{src.path}:{src.lineno}: header declares no vertex element")

    points = np.empty((n_vertex, 3))
    for i in range(n_vertex):
        vals = _floats(src.next(f"vertex {i + 1} of {n_vertex}"), src.path, src.lineno)
        if len(vals) < 3:
            raise ParseError(f"{src.path}:{src.lineno}: vertex line has {len(vals)} values, need 3")
        points[i] = vals[:3]
    triangles = None
    if n_face:
        triangles = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            toks = src.next(f"face {i + 1} of {n_face}").split()
            if len(toks) != 4 or toks[0] != "3":
                raise ParseError(f"{src.path}:{src.lineno}: only triangle faces are supported")
            triangles[i] = [int(t) for t in toks[1:]]
    return points, triangles


# ---------------------------------------------------------------------------
# skeletons
# ---------------------------------------------------------------------------

def write_skeleton(path, skeleton: Skeleton):
    with open(path, "w") as f:
        f.write(SKELETON_MAGIC + "\n")
        f.write(f"{skeleton.joint_count}\n")
        f.write(" ".join(str(int(p)) for p in skeleton.parents) + "\n")
        for row in skeleton.rest_offsets:
            f.write(f"{_fmt(row[0])} {_fmt(row[1])} {_fmt(row[2])}\n")
        for row in skeleton.joint_positions:
            f.write(f"{_fmt(row[0])} {_fmt(row[1])} {_fmt(row[2])}\n")


def read_skeleton(path) -> Skeleton:
    src = _Lines(path)
    src.expect_magic(SKELETON_MAGIC)
    j = int(src.next("joint count"))
    parents = np.array([int(t) for t in src.next("parent array").split()], dtype=np.int64)
    if parents.shape[0] != j:
        raise ParseError(f"{src.path}:{src.lineno}: expected {j} parent indices, got {parents.shape[0]}")
    offsets = np.array([_floats(src.next("rest offset"), src.path, src.lineno, 3) for _ in range(j)])
    positions = np.array([_floats(src.next("joint position"), src.path, src.lineno, 3) for _ in range(j)])
    return Skeleton(parents=parents, rest_offsets=offsets, joint_positions=positions)


# ---------------------------------------------------------------------------
# motions
# ---------------------------------------------------------------------------

def write_motion(path, frames, fps=30):
    """Versioned text motion: header 'J n fps', then per frame the root
    translation triple followed by J quaternion quadruples."""
    frames = list(frames)
    if not frames:
        raise ValueError("cannot write an empty motion")
    j = frames[0].joint_count
    with open(path, "w") as f:
        f.write(MOTION_MAGIC + "\n")
        f.write(f"{j} {len(frames)} {_fmt(fps)}\n")
        for frame in frames:
            vals = [*frame.root_translation, *frame.rotations.reshape(-1)]
            f.write(" ".join(_fmt(v) for v in vals) + "\n")


def read_motion(path):
    """Returns (list of PoseFrame, fps)."""
    src = _Lines(path)
    src.expect_magic(MOTION_MAGIC)
    header = _floats(src.next("motion header"), src.path, src.lineno, 3)
    j, n, fps = int(header[0]), int(header[1]), header[2]
    frames = []
    for i in range(n):
        vals = _floats(src.next(f"frame {i + 1} of {n}"), src.path, src.lineno, 3 + 4 * j)
        trans = np.array(vals[:3])
        rot = np.array(vals[3:]).reshape(j, 4)
        frames.append(PoseFrame(rot, trans))
    return frames, fps


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

def write_manifest(path, entries):
    """entries: iterable of (frame_path, metadata dict)."""
    with open(path, "w") as f:
        f.write(MANIFEST_MAGIC + "\n")
        for frame_path, meta in entries:
            tokens = [str(frame_path)]
            tokens += [f"{k}={v}" for k, v in sorted(meta.items())]
            f.write(" ".join(tokens) + "\n")


def read_manifest(path):
    """Returns list of (frame_path, metadata dict); an empty manifest is fine."""
    src = _Lines(path)
    src.expect_magic(MANIFEST_MAGIC)
    entries = []
    while src.idx < len(src.lines):
        line = src.next().strip()
        if not line:
            continue
        tokens = line.split()
        meta = {}
        for tok in tokens[1:]:
            if "=" not in tok:
                raise ParseError(f"{src.path}:{src.lineno}: metadata token {tok!r} is not key=value")
            k, v = tok.split("=", 1)
            meta[k] = v
        entries.append((tokens[0], meta))
    return entries


# ---------------------------------------------------------------------------
# skin weight cache
# ---------------------------------------------------------------------------

def write_weight_cache(path, weights: SkinWeights):
    """Versioned binary: magic, 'V J' header line, row-major little-endian."""
    arr = np.ascontiguousarray(weights.weights, dtype="<f8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC + b"\n")
        f.write(f"{arr.shape[0]} {arr.shape[1]}\n".encode())
        f.write(arr.tobytes())


def read_weight_cache(path) -> SkinWeights:
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != WEIGHTS_MAGIC:
            raise ParseError(f"{path}:1: bad magic {magic!r}")
        try:
            v, j = (int(t) for t in f.readline().split())
        except ValueError:
            raise ParseError(f"{path}:2: malformed weight cache header") from None
        data = f.read()
    expected = v * j * 8
    if len(data) != expected:
        raise ParseError(f"{path}: weight block holds {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<f8").reshape(v, j).astype(np.float64)
    return SkinWeights(arr)
