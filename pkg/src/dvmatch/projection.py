"""Multi-view depth projection, pseudo-coloring, feature pull-back and positional encoding."""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .core import PointCloud

__all__ = [
    "AXES",
    "DEFAULT_IMAGE_SIZE",
    "DepthImage",
    "ProjectionRecord",
    "ColorImage",
    "FeatureImage",
    "FeatureBlend",
    "project_depth",
    "smooth_and_colorize",
    "pull_back_features",
    "assemble_visual_features",
    "positional_encoding",
    "compose_input_features",
]

AXES = ("z", "x", "y")
DEFAULT_IMAGE_SIZE = 224

# In-plane coordinate pair and depth coordinate per projection axis (cyclic).
_AXIS_COORDS = {"z": (0, 1, 2), "x": (1, 2, 0), "y": (2, 0, 1)}


@dataclass(frozen=True)
class DepthImage:
    intensity: np.ndarray  # (H, W) in [0, 1); 0 marks unprojected pixels
    axis: str

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")
        img = np.asarray(self.intensity, dtype=np.float64)
        if img.ndim != 2:
            raise ValueError("intensity must be 2D")
        object.__setattr__(self, "intensity", img)

    @property
    def shape(self):
        return self.intensity.shape


@dataclass(frozen=True)
class ProjectionRecord:
    """Per-point pixel coordinates; total (every point owns a pixel)."""

    u: np.ndarray  # (N,) row indices in [0, H)
    v: np.ndarray  # (N,) col indices in [0, W)
    axis: str
    height: int
    width: int
    delta: float
    mins: tuple  # in-plane minima used for the mapping
    degenerate: bool = False

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.int64)
        v = np.asarray(self.v, dtype=np.int64)
        if u.shape != v.shape or u.ndim != 1:
            raise ValueError("u, v must be matching 1D index arrays")
        if u.size and (u.min() < 0 or u.max() >= self.height):
            raise ValueError("u index out of range")
        if v.size and (v.min() < 0 or v.max() >= self.width):
            raise ValueError("v index out of range")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    def __len__(self):
        return self.u.size


@dataclass(frozen=True)
class ColorImage:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]

    def __post_init__(self):
        img = np.asarray(self.rgb, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("rgb must be (H, W, 3)")
        object.__setattr__(self, "rgb", img)


@dataclass(frozen=True)
class FeatureImage:
    values: np.ndarray  # (H, W, C)

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("feature image must be (H, W, C)")
        if not np.isfinite(arr).all():
            raise ValueError("feature image contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def channels(self):
        return self.values.shape[2]


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def project_depth(cloud: PointCloud, axis: str, height: int = DEFAULT_IMAGE_SIZE,
                  width: int = DEFAULT_IMAGE_SIZE):
    """Orthographic depth projection of a cloud along one coordinate axis.

    Pixel (u, v) = (floor((c1-c1min)/delta*H), floor((c2-c2min)/delta*W)) with
    delta the larger in-plane extent, clamped in range; intensity is the
    logistic of the depth coordinate, colliding points keep the maximum,
    unprojected pixels stay exactly 0.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    if height < 1 or width < 1:
        raise ValueError("image dimensions must be >= 1")
    i1, i2, idep = _AXIS_COORDS[axis]
    pts = cloud.points
    c1, c2, depth = pts[:, i1], pts[:, i2], pts[:, idep]
    c1min, c2min = c1.min(), c2.min()
    delta = float(max(c1.max() - c1min, c2.max() - c2min))
    degenerate = delta == 0.0
    if degenerate:
        delta = 1.0
    u = np.clip(np.floor((c1 - c1min) / delta * height).astype(np.int64), 0, height - 1)
    v = np.clip(np.floor((c2 - c2min) / delta * width).astype(np.int64), 0, width - 1)
    intensity = np.zeros((height, width))
    np.maximum.at(intensity, (u, v), _logistic(depth))
    rec = ProjectionRecord(u=u, v=v, axis=axis, height=height, width=width,
                           delta=delta, mins=(float(c1min), float(c2min)),
                           degenerate=degenerate)
    return DepthImage(intensity=intensity, axis=axis), rec


def _load_colormap() -> np.ndarray:
    path = importlib.resources.files("dvmatch").joinpath("data/pink_green_256.txt")
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(t) for t in line.split()])
    table = np.array(rows)
    assert table.shape == (256, 3)
    return table


_COLORMAP = _load_colormap()


def smooth_and_colorize(img: DepthImage) -> ColorImage:
    """3x3 mean filter (zero-padded borders), then the fixed diverging colormap."""
    smoothed = uniform_filter(img.intensity, size=3, mode="constant", cval=0.0)
    pos = np.clip(smoothed, 0.0, 1.0) * (len(_COLORMAP) - 1)
    anchor = np.arange(len(_COLORMAP), dtype=np.float64)
    rgb = np.stack(
        [np.interp(pos, anchor, _COLORMAP[:, c]) for c in range(3)], axis=-1
    )
    return ColorImage(rgb=rgb)


def pull_back_features(feat: FeatureImage, rec: ProjectionRecord) -> np.ndarray:
    """Gather each point's pixel feature: row i = F(u_i, v_i, :). No interpolation."""
    h, w, _ = feat.values.shape
    if (h, w) != (rec.height, rec.width):
        raise ValueError(
            f"feature image {h}x{w} does not match projection record "
            f"{rec.height}x{rec.width}"
        )
    return feat.values[rec.u, rec.v, :]


def assemble_visual_features(fz: np.ndarray, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Row-wise concatenation of per-view point features, fixed [z, x, y] order."""
    fz, fx, fy = (np.asarray(f, dtype=np.float64) for f in (fz, fx, fy))
    if not (fz.shape == fx.shape == fy.shape) or fz.ndim != 2:
        raise ValueError("per-view feature matrices must share an (N, C) shape")
    return np.hstack([fz, fx, fy])


def positional_encoding(cloud: PointCloud, bands: int = 64) -> np.ndarray:
    """Sinusoidal coordinate encoding: sin/cos of 2^k*pi*c for each coordinate.

    Output is (N, 3 * 2 * bands), coordinate-major, then band, then (sin, cos);
    the default 64 bands gives width 384.
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    pts = cloud.points
    freqs = (2.0 ** np.arange(bands)) * np.pi  # (bands,)
    phase = pts[:, :, None] * freqs[None, None, :]  # (N, 3, bands)
    out = np.empty((len(cloud), 3, bands, 2))
    out[..., 0] = np.sin(phase)
    out[..., 1] = np.cos(phase)
    return out.reshape(len(cloud), 3 * bands * 2)


@dataclass(frozen=True)
class FeatureBlend:
    visual_weight: float = 1.0
    encoding_weight: float = 1.0


def _standardize_columns(block: np.ndarray) -> np.ndarray:
    mean = block.mean(axis=0)
    std = block.std(axis=0)
    out = block - mean
    nonzero = std > 0
    out[:, nonzero] /= std[nonzero]
    out[:, ~nonzero] = 0.0
    return out


def compose_input_features(visual, encoding: np.ndarray,
                           blend: FeatureBlend = FeatureBlend()) -> np.ndarray:
    """Standardize each block per column, scale by its blend weight, concatenate.

    `visual` may be None, in which case the standardized encoding alone is
    returned. Zero-variance columns standardize to zeros.
    """
    encoding = np.asarray(encoding, dtype=np.float64)
    enc = _standardize_columns(encoding) * blend.encoding_weight
    if visual is None:
        return enc
    visual = np.asarray(visual, dtype=np.float64)
    if visual.shape[0] != encoding.shape[0]:
        raise ValueError(
            f"row mismatch: visual {visual.shape[0]} vs encoding {encoding.shape[0]}"
        )
    vis = _standardize_columns(visual) * blend.visual_weight
    return np.hstack([vis, enc])
