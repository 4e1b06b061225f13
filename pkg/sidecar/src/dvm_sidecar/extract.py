"""Backbone registry and DVFM extraction.

The sidecar's only contract with the matcher is the DVFM file: magic "DVFM",
u32 version=1, u32 H, u32 W, u32 C, then H*W*C little-endian f32 indexed
(u*W + v)*C + c. Files are written atomically (tmp + rename) so a crash never
leaves a partial file behind.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["ExtractorError", "ExtractorConfig", "BACKBONES", "extract", "selfcheck",
           "write_dvfm"]


class ExtractorError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExtractorConfig:
    backbone: str = "pyramid-stat"
    upsampler: str = "none"
    device: str = "cpu"
    channels: int | None = None  # None adopts the backbone's declared width

    def resolved(self):
        """Validate identifiers and the channel width before any file is touched."""
        if self.backbone not in BACKBONES:
            raise ExtractorError(
                f"unresolved identifier: backbone {self.backbone!r} "
                f"(known: {', '.join(sorted(BACKBONES))})"
            )
        spec = BACKBONES[self.backbone]
        if self.upsampler not in spec.upsamplers:
            raise ExtractorError(
                f"unresolved identifier: upsampler {self.upsampler!r} for "
                f"backbone {self.backbone!r} (allowed: {', '.join(spec.upsamplers)})"
            )
        channels = self.channels if self.channels is not None else spec.channels
        if channels != spec.channels:
            raise ExtractorError(
                f"channel mismatch: backbone {self.backbone!r} declares "
                f"{spec.channels} channels, configured {channels}"
            )
        return spec, channels


@dataclass(frozen=True)
class _BackboneSpec:
    channels: int
    upsamplers: tuple
    run: callable  # (H, W, 3) float image in [0,1] -> (H, W, C)


def _mock_uv(img):
    h, w, _ = img.shape
    out = np.empty((h, w, 2), dtype=np.float32)
    out[..., 0] = np.arange(h, dtype=np.float32)[:, None]
    out[..., 1] = np.arange(w, dtype=np.float32)[None, :]
    return out


def _box_filter(channel, radius):
    """Mean filter via an integral image; zero padding outside the frame."""
    h, w = channel.shape
    pad = np.zeros((h + 2 * radius + 1, w + 2 * radius + 1))
    pad[radius + 1 : radius + 1 + h, radius + 1 : radius + 1 + w] = channel
    ii = pad.cumsum(axis=0).cumsum(axis=1)
    size = 2 * radius + 1
    total = (ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size]
             + ii[:-size, :-size])
    return total[:h, :w] / (size * size)


def _pyramid_stat(img):
    """Deterministic multi-scale local statistics: per-channel box means at
    four radii. Self-contained stand-in for a pretrained encoder."""
    feats = []
    for radius in (0, 2, 5, 11):
        for c in range(3):
            feats.append(img[..., c] if radius == 0 else _box_filter(img[..., c], radius))
    return np.stack(feats, axis=-1).astype(np.float32)


def _dinov2_featup(img):
    try:
        import torch
    except ImportError as exc:
        raise ExtractorError(f"model load failure: torch unavailable ({exc})")
    try:
        upsampler = torch.hub.load("mhamilton723/FeatUp", "dinov2", use_norm=True)
    except Exception as exc:
        raise ExtractorError(f"model load failure: cannot fetch dinov2-featup weights ({exc})")
    with torch.inference_mode():
        upsampler.eval()
        tensor = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1)[None]
        feats = upsampler(tensor)[0].permute(1, 2, 0).cpu().numpy()
    if feats.shape[:2] != img.shape[:2]:
        raise ExtractorError(
            f"dimension mismatch: upsampled features {feats.shape[:2]} vs "
            f"image {img.shape[:2]}"
        )
    return feats


BACKBONES = {
    "mock-uv": _BackboneSpec(channels=2, upsamplers=("none",), run=_mock_uv),
    "pyramid-stat": _BackboneSpec(channels=12, upsamplers=("none",), run=_pyramid_stat),
    "dinov2-featup": _BackboneSpec(channels=384, upsamplers=("featup",), run=_dinov2_featup),
}


def load_image(path):
    from PIL import Image

    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
    return arr


def write_dvfm(path, values):
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 3:
        raise ExtractorError(f"feature map must be (H, W, C), got {values.shape}")
    h, w, c = values.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"DVFM" + struct.pack("<IIII", 1, h, w, c))
        fh.write(values.tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def extract(image_paths, out_dir, config: ExtractorConfig):
    """One DVFM per image, named after the image stem. Atomic per file."""
    spec, channels = config.resolved()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for image_path in image_paths:
        image_path = Path(image_path)
        img = load_image(image_path)
        feats = spec.run(img)
        if feats.shape[:2] != img.shape[:2] or feats.shape[2] != channels:
            raise ExtractorError(
                f"dimension mismatch for {image_path}: features {feats.shape} vs "
                f"image {img.shape[:2]} with {channels} channels"
            )
        target = out_dir / (image_path.stem + ".dvfm")
        write_dvfm(target, feats)
        written.append(target)
    return written


def selfcheck(config: ExtractorConfig):
    """Run the model on a fixed synthetic image; report dims and a payload checksum."""
    spec, channels = config.resolved()
    h = w = 64
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = np.stack([
        xx / (w - 1),
        yy / (h - 1),
        ((xx // 8 + yy // 8) % 2).astype(np.float64),
    ], axis=-1)
    feats = spec.run(img)
    if feats.shape != (h, w, channels):
        raise ExtractorError(
            f"selfcheck dimension mismatch: got {feats.shape}, "
            f"expected {(h, w, channels)}"
        )
    payload = np.ascontiguousarray(feats, dtype="<f4").tobytes()
    return {
        "backbone": config.backbone,
        "upsampler": config.upsampler,
        "height": h,
        "width": w,
        "channels": channels,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
