"""Readers and writers for TUM trajectories, ASCII PLY clouds and PFM depth.

Parsers take text or bytes and return the geometry containers; writers
return text or bytes for the caller to put on disk.  Parse failures
raise ParseError carrying the 1-based line number where the problem
was found.  Formats we deliberately do not read (binary PLY, color
PFM) raise UnsupportedFormatError instead of producing garbage.
"""

from __future__ import annotations

import math
import warnings
from typing import Optional, Sequence, Tuple

import numpy as np

from .geometry_metrics import DepthMap, PointCloud, Pose, Trajectory

__all__ = [
    "ParseError",
    "UnsupportedFormatError",
    "parse_tum",
    "write_tum",
    "parse_ply_ascii",
    "write_ply_ascii",
    "parse_pfm",
    "write_pfm",
    "write_metrics_csv",
]


class ParseError(ValueError):
    """Malformed input; `line` is the 1-based offending line when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class UnsupportedFormatError(ParseError):
    """The file is recognizable but in a variant we do not read."""


# ---------------------------------------------------------------------------
# TUM trajectories: "timestamp tx ty tz qx qy qz qw" per line.

def parse_tum(text: str) -> Trajectory:
    """Parse TUM trajectory text; '#' lines and blank lines are skipped."""
    poses = []
    last_ts = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(
                f"expected 8 fields (timestamp tx ty tz qx qy qz qw), got {len(fields)}",
                lineno,
            )
        try:
            ts, tx, ty, tz, qx, qy, qz, qw = (float(f) for f in fields)
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", lineno) from None
        norm = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
        if abs(norm - 1.0) > 1e-3:
            raise ParseError(
                f"quaternion norm {norm!r} deviates from 1 by more than 1e-3", lineno
            )
        if last_ts is not None and ts <= last_ts:
            raise ParseError(
                f"timestamps must strictly increase, got {ts!r} after {last_ts!r}", lineno
            )
        last_ts = ts
        try:
            poses.append(Pose(ts, np.array([qw, qx, qy, qz]) / norm, (tx, ty, tz)))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    if not poses:
        raise ParseError("empty trajectory: no pose lines found")
    return Trajectory(tuple(poses))


def write_tum(traj: Trajectory) -> str:
    """Render a trajectory in TUM format with 17 significant digits,
    enough for float64 values to survive a write/parse round trip."""
    lines = ["# ttt-lab trajectory", "# timestamp tx ty tz qx qy qz qw"]
    for p in traj.poses:
        w, x, y, z = p.quat
        tx, ty, tz = p.translation
        lines.append(
            f"{p.timestamp:.17g} {tx:.17g} {ty:.17g} {tz:.17g} "
            f"{x:.17g} {y:.17g} {z:.17g} {w:.17g}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ASCII PLY point clouds.

_PLY_SCALARS = {
    "char", "uchar", "short", "ushort", "int", "uint",
    "int8", "uint8", "int16", "uint16", "int32", "uint32",
    "float", "double", "float32", "float64",
}


def parse_ply_ascii(text: str) -> PointCloud:
    """Parse an ASCII PLY vertex cloud.

    Vertex properties x/y/z are required; nx/ny/nz are picked up when
    all three are present (normals are re-normalized to unit length).
    Other vertex properties and non-vertex elements are skipped, with a
    warning for unrecognized vertex properties.  One data line per
    element instance is assumed, which is how ASCII PLY is written in
    practice.
    """
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("not a PLY file: first line must be 'ply'", 1)

    elements = []          # (name, count, [property names]) in declared order
    current = None
    fmt_seen = False
    data_start = None
    for lineno in range(1, len(lines)):
        tokens = lines[lineno].strip().split()
        if not tokens:
            continue
        keyword = tokens[0]
        if keyword == "comment" or keyword == "obj_info":
            continue
        if keyword == "format":
            if len(tokens) < 2:
                raise ParseError("malformed format line", lineno + 1)
            if tokens[1] in ("binary_little_endian", "binary_big_endian"):
                raise UnsupportedFormatError(
                    "binary PLY is not supported; convert to ascii", lineno + 1
                )
            if tokens[1] != "ascii":
                raise ParseError(f"unknown PLY format {tokens[1]!r}", lineno + 1)
            fmt_seen = True
        elif keyword == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", lineno + 1)
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"bad element count {tokens[2]!r}", lineno + 1) from None
            if count < 0:
                raise ParseError(f"negative element count {count}", lineno + 1)
            current = (tokens[1], count, [])
            elements.append(current)
        elif keyword == "property":
            if current is None:
                raise ParseError("property before any element", lineno + 1)
            if len(tokens) >= 2 and tokens[1] == "list":
                current[2].append(("list", tokens[-1]))
            elif len(tokens) == 3 and tokens[1] in _PLY_SCALARS:
                current[2].append(("scalar", tokens[2]))
            else:
                raise ParseError(f"malformed property line {lines[lineno].strip()!r}", lineno + 1)
        elif keyword == "end_header":
            data_start = lineno + 1
            break
        else:
            warnings.warn(f"skipping unknown PLY header keyword {keyword!r}")
    if data_start is None:
        raise ParseError("unterminated PLY header: no end_header line")
    if not fmt_seen:
        raise ParseError("PLY header is missing the format line")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise ParseError("PLY header declares no vertex element")
    _, v_count, v_props = vertex
    if v_count == 0:
        raise ParseError("empty cloud: vertex count is 0")
    if any(kind == "list" for kind, _ in v_props):
        raise UnsupportedFormatError("list-typed vertex properties are not supported")
    names = [name for _, name in v_props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(f"vertex element lacks required property {axis!r}")
    has_n = [axis for axis in ("nx", "ny", "nz") if axis in names]
    if has_n and len(has_n) != 3:
        raise ParseError("vertex normals must provide all of nx, ny, nz or none")
    known = {"x", "y", "z", "nx", "ny", "nz"}
    for name in names:
        if name not in known:
            warnings.warn(f"ignoring unknown vertex property {name!r}")

    # Data rows follow in element declaration order, one line per instance.
    cursor = data_start
    points = None
    normals = None
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            if cursor > len(lines):
                raise ParseError(
                    f"file ends inside element {name!r}: expected {count} rows", len(lines)
                )
            continue
        rows = np.empty((count, len(props)))
        for r in range(count):
            if cursor >= len(lines):
                raise ParseError(
                    f"file ends after {r} of {count} vertex rows", len(lines)
                )
            tokens = lines[cursor].split()
            if len(tokens) != len(props):
                raise ParseError(
                    f"expected {len(props)} vertex values, got {len(tokens)}", cursor + 1
                )
            try:
                rows[r] = [float(tok) for tok in tokens]
            except ValueError:
                raise ParseError(
                    f"non-numeric vertex value in {lines[cursor]!r}", cursor + 1
                ) from None
            cursor += 1
        cols = {nm: rows[:, i] for i, (_, nm) in enumerate(props)}
        points = np.column_stack([cols["x"], cols["y"], cols["z"]])
        if has_n:
            normals = np.column_stack([cols["nx"], cols["ny"], cols["nz"]])
            lengths = np.linalg.norm(normals, axis=1)
            if np.any(lengths == 0):
                raise ParseError("zero-length normal in vertex data")
            normals = normals / lengths[:, None]
    for extra in range(cursor, len(lines)):
        if lines[extra].strip():
            raise ParseError("unexpected trailing data after all elements", extra + 1)
    try:
        return PointCloud(points, normals)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def write_ply_ascii(cloud: PointCloud) -> str:
    """Render a cloud as ASCII PLY; normals are written when present."""
    n = len(cloud)
    header = ["ply", "format ascii 1.0", f"element vertex {n}",
              "property double x", "property double y", "property double z"]
    if cloud.normals is not None:
        header += ["property double nx", "property double ny", "property double nz"]
    header.append("end_header")
    lines = header
    if cloud.normals is None:
        for p in cloud.points:
            lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    else:
        for p, m in zip(cloud.points, cloud.normals):
            lines.append(
                f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {m[0]:.17g} {m[1]:.17g} {m[2]:.17g}"
            )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# PFM depth maps: grayscale "Pf", rows stored bottom-up, float32 samples.

def _pfm_token(buf: bytes, pos: int) -> Tuple[bytes, int]:
    while pos < len(buf) and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError("truncated PFM header")
    return buf[start:pos], pos


def parse_pfm(data: bytes) -> DepthMap:
    """Parse a grayscale PFM image into a top-down DepthMap.

    The scale line's sign encodes endianness (negative = little).
    Exactly one whitespace byte separates the header from the payload;
    the payload must hold exactly width*height float32 samples.
    """
    magic, pos = _pfm_token(data, 0)
    if magic == b"PF":
        raise UnsupportedFormatError("color PFM ('PF') is not supported, only grayscale 'Pf'")
    if magic != b"Pf":
        raise ParseError(f"not a PFM file: bad magic {magic!r}")
    w_tok, pos = _pfm_token(data, pos)
    h_tok, pos = _pfm_token(data, pos)
    try:
        width = int(w_tok)
        height = int(h_tok)
    except ValueError:
        raise ParseError(f"bad PFM dimensions {w_tok!r} x {h_tok!r}") from None
    if width < 1 or height < 1:
        raise ParseError(f"bad PFM dimensions {width} x {height}")
    scale_tok, pos = _pfm_token(data, pos)
    try:
        scale = float(scale_tok)
    except ValueError:
        raise ParseError(f"bad PFM scale {scale_tok!r}") from None
    if scale == 0:
        raise ParseError("PFM scale must be non-zero")
    payload = data[pos + 1:]
    expected = 4 * width * height
    if len(payload) != expected:
        raise ParseError(
            f"PFM payload holds {len(payload)} bytes, header implies {expected}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    rows = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return DepthMap(width, height, np.flipud(rows).astype(np.float64))


def write_pfm(depth: DepthMap) -> bytes:
    """Render a depth map as little-endian grayscale PFM (scale -1.0)."""
    header = f"Pf\n{depth.width} {depth.height}\n-1.0\n".encode("ascii")
    return header + np.flipud(depth.values).astype("<f4").tobytes()


# ---------------------------------------------------------------------------
# Metric reports.

def write_metrics_csv(rows: Sequence[Tuple[str, float]]) -> str:
    """Two-column report: metric,value with full float precision."""
    lines = ["metric,value"]
    for name, value in rows:
        lines.append(f"{name},{float(value)!r}")
    return "\n".join(lines) + "\n"
