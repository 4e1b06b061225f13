"""Readers and writers for the library's file formats.

Binary layouts (all little-endian, 4-byte ASCII magics, u32 version checked
strictly):

  DVPC  point cloud          magic, version=1, u32 N, N*3 f32 point-major
  DVFM  feature image        magic, version=1, u32 H, u32 W, u32 C, H*W*C f32
  DVPR  projection record    magic, version=1, u32 N, N pairs of u32 (u, v)
  DVGM  geodesic matrix      magic, version=1, u32 N, N*N f32 row-major
  DVTX  transform set        magic, version=1, u32 m, m*6 f32 theta, m*3 f32 delta
  DVSC  soft correspondence  magic, version=1, u32 N, u32 M, u32 top_n,
                             per row: u32 count, then count * (u32 idx, f32 w)

Text formats: XYZ clouds (one "x y z" per line, '#' comments), dense maps and
ground truth (one target index per line), ASCII PLY vertex extraction.
"""

from __future__ import annotations

import struct

import numpy as np

from .core import PointCloud
from .deformation import TransformSet
from .geodesics import GeodesicMatrix
from .matching import SoftCorrespondence
from .projection import ColorImage, FeatureImage, ProjectionRecord

__all__ = [
    "FormatError",
    "read_cloud",
    "read_xyz", "write_xyz",
    "read_ply_vertices",
    "read_dvpc", "write_dvpc",
    "read_dvfm", "write_dvfm",
    "read_dvpr", "write_dvpr",
    "read_dvgm", "write_dvgm",
    "read_dvtx", "write_dvtx",
    "read_dvsc", "write_dvsc",
    "read_dense_map", "write_dense_map",
    "write_png",
]


class FormatError(ValueError):
    pass


def _read_header(buf: bytes, magic: bytes, count: int):
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    fields = struct.unpack_from(f"<{count + 1}I", buf, 4)
    if fields[0] != 1:
        raise FormatError(f"unsupported {magic.decode()} version {fields[0]}")
    return fields[1:], 4 + 4 * (count + 1)


def _payload(buf: bytes, offset: int, dtype: str, count: int) -> np.ndarray:
    expected = offset + count * np.dtype(dtype).itemsize
    if len(buf) != expected:
        raise FormatError(f"truncated or oversized payload: {len(buf)} vs {expected} bytes")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


# --- text clouds ---

def read_xyz(path) -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 coordinates")
            rows.append([float(p) for p in parts])
    if not rows:
        raise FormatError(f"{path}: no points")
    return PointCloud(np.array(rows))


def write_xyz(path, cloud: PointCloud):
    with open(path, "w") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_ply_vertices(path) -> PointCloud:
    """Vertex positions from an ASCII PLY file; faces and extra properties ignored."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise FormatError(f"{path}: not a PLY file")
        n_verts = None
        props = []
        in_vertex = False
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise FormatError(f"{path}: only ascii PLY is supported")
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_verts = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n_verts is None:
            raise FormatError(f"{path}: no vertex element")
        try:
            cols = [props.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise FormatError(f"{path}: vertex element lacks x/y/z properties")
        pts = np.empty((n_verts, 3))
        for i in range(n_verts):
            vals = fh.readline().split()
            pts[i] = [float(vals[c]) for c in cols]
    return PointCloud(pts)


def read_cloud(path) -> PointCloud:
    """Dispatch on content: DVPC magic, PLY header, else ASCII XYZ."""
    path = str(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"DVPC":
        return read_dvpc(path)
    if head[:3] == b"ply":
        return read_ply_vertices(path)
    return read_xyz(path)


# --- binary formats ---

def write_dvpc(path, cloud: PointCloud):
    with open(path, "wb") as fh:
        fh.write(b"DVPC" + struct.pack("<II", 1, len(cloud)))
        fh.write(cloud.points.astype("<f4").tobytes())


def read_dvpc(path) -> PointCloud:
    buf = open(path, "rb").read()
    (n,), off = _read_header(buf, b"DVPC", 1)
    pts = _payload(buf, off, "<f4", n * 3).reshape(n, 3)
    return PointCloud(pts.astype(np.float64))


def write_dvfm(path, feat: FeatureImage):
    h, w, c = feat.values.shape
    with open(path, "wb") as fh:
        fh.write(b"DVFM" + struct.pack("<IIII", 1, h, w, c))
        fh.write(feat.values.astype("<f4").tobytes())


def read_dvfm(path) -> FeatureImage:
    buf = open(path, "rb").read()
    (h, w, c), off = _read_header(buf, b"DVFM", 3)
    vals = _payload(buf, off, "<f4", h * w * c).reshape(h, w, c)
    return FeatureImage(values=vals.astype(np.float64))


def write_dvpr(path, rec: ProjectionRecord):
    pairs = np.empty((len(rec), 2), dtype="<u4")
    pairs[:, 0] = rec.u
    pairs[:, 1] = rec.v
    with open(path, "wb") as fh:
        fh.write(b"DVPR" + struct.pack("<II", 1, len(rec)))
        fh.write(pairs.tobytes())


def read_dvpr(path, axis: str = "z", height: int | None = None,
              width: int | None = None) -> ProjectionRecord:
    """Pixel pairs from file; image dims default to the tightest bound."""
    buf = open(path, "rb").read()
    (n,), off = _read_header(buf, b"DVPR", 1)
    pairs = _payload(buf, off, "<u4", n * 2).reshape(n, 2).astype(np.int64)
    h = height if height is not None else int(pairs[:, 0].max()) + 1
    w = width if width is not None else int(pairs[:, 1].max()) + 1
    return ProjectionRecord(u=pairs[:, 0], v=pairs[:, 1], axis=axis,
                            height=h, width=w, delta=1.0, mins=(0.0, 0.0))


def write_dvgm(path, geo: GeodesicMatrix):
    n = len(geo)
    with open(path, "wb") as fh:
        fh.write(b"DVGM" + struct.pack("<II", 1, n))
        fh.write(geo.distances.astype("<f4").tobytes())


def read_dvgm(path) -> GeodesicMatrix:
    buf = open(path, "rb").read()
    (n,), off = _read_header(buf, b"DVGM", 1)
    d = _payload(buf, off, "<f4", n * n).reshape(n, n).astype(np.float64)
    # f32 rounding of a symmetric matrix stays symmetric; enforce the invariant
    return GeodesicMatrix(distances=d)


def write_dvtx(path, transforms: TransformSet):
    with open(path, "wb") as fh:
        fh.write(b"DVTX" + struct.pack("<II", 1, transforms.node_count))
        fh.write(transforms.theta.astype("<f4").tobytes())
        fh.write(transforms.delta.astype("<f4").tobytes())


def read_dvtx(path) -> TransformSet:
    buf = open(path, "rb").read()
    (m,), off = _read_header(buf, b"DVTX", 1)
    flat = _payload(buf, off, "<f4", m * 9)
    theta = flat[: m * 6].reshape(m, 6).astype(np.float64)
    delta = flat[m * 6 :].reshape(m, 3).astype(np.float64)
    return TransformSet(theta=theta, delta=delta)


def _absorb_deficit(w: np.ndarray) -> np.ndarray:
    """Make a weight row sum to exactly 1 by charging the deficit to its largest
    entry (ties to the lowest index). Shared by the reader and the writer so a
    write-read cycle is the identity on both bytes and in-memory values."""
    out = w.astype(np.float64, copy=True)
    j = int(np.argmax(out))
    out[j] += 1.0 - out.sum()
    return out


def _canonical_f32_weights(w: np.ndarray) -> np.ndarray:
    """f32 quantization whose reader view quantizes back to the same bits."""
    q = w.astype("<f4")
    adjusted = _absorb_deficit(q.astype(np.float64)).astype("<f4")
    # the deficit must not displace the argmax, or the reader would charge a
    # different entry; fall back to the raw quantization in that corner case
    if np.argmax(adjusted) == np.argmax(q):
        return adjusted
    return q


def write_dvsc(path, pi: SoftCorrespondence):
    chunks = [b"DVSC" + struct.pack("<IIII", 1, pi.rows, pi.cols, int(pi.counts.max(initial=0)))]
    for i in range(pi.rows):
        idx, w = pi.row(i)
        chunks.append(struct.pack("<I", idx.size))
        row = np.empty(idx.size, dtype=[("i", "<u4"), ("w", "<f4")])
        row["i"] = idx
        row["w"] = _canonical_f32_weights(w)
        chunks.append(row.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_dvsc(path) -> SoftCorrespondence:
    buf = open(path, "rb").read()
    (rows, cols, top_n), off = _read_header(buf, b"DVSC", 3)
    counts = np.empty(rows, dtype=np.int64)
    entries = []
    for i in range(rows):
        (c,) = struct.unpack_from("<I", buf, off)
        off += 4
        row = np.frombuffer(buf, dtype=[("i", "<u4"), ("w", "<f4")], count=c, offset=off)
        off += row.nbytes
        counts[i] = c
        entries.append(row)
    if off != len(buf):
        raise FormatError("trailing bytes after correspondence rows")
    width = max(1, int(counts.max(initial=1)))
    idx = np.zeros((rows, width), dtype=np.int64)
    weight = np.zeros((rows, width))
    for i, row in enumerate(entries):
        idx[i, : counts[i]] = row["i"]
        # f32 rounding breaks the unit row sum; charge the deficit to the
        # largest entry (mirrors the writer's canonical form)
        weight[i, : counts[i]] = _absorb_deficit(row["w"])
    return SoftCorrespondence(rows=rows, cols=cols, idx=idx, weight=weight, counts=counts)


# --- dense maps / ground truth ---

def write_dense_map(path, dense_map):
    arr = np.asarray(dense_map, dtype=np.int64).reshape(-1)
    with open(path, "w") as fh:
        fh.writelines(f"{i}\n" for i in arr)


def read_dense_map(path) -> np.ndarray:
    vals = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals.append(int(line))
    if not vals:
        raise FormatError(f"{path}: empty map file")
    arr = np.array(vals, dtype=np.int64)
    if (arr < 0).any():
        raise FormatError(f"{path}: negative index")
    return arr


def write_png(path, image: ColorImage):
    from PIL import Image

    rgb8 = np.clip(np.round(image.rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(path, format="PNG")
