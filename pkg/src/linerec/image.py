"""Line-image preprocessing: load, deskew, trim, normalize, slice to patches.

Pixels are floats in [0, 1] with ink = 1 and background = 0. This is the
inverse of the file convention (PGM stores 0 = black ink on 255 = white
paper); the inversion happens at load time so that padding with zeros is
the natural additive identity everywhere downstream.

Skew estimation maximizes the variance of the horizontal ink-projection
profile over a grid of candidate angles, a standard document-analysis
technique that is directly testable by generate-rotate-recover round trips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import CapacityError, ContractError
from .tensor import Tensor

DEFAULT_PATCH_WIDTH = 12
DEFAULT_TARGET_HEIGHT = 64
DEFAULT_INK_THRESHOLD = 0.5

SKEW_GRID_DEGREES = 15.0
SKEW_GRID_STEP = 0.5


@dataclass
class LineImage:
    """Grayscale text-line raster, ink-positive, with optional skew metadata."""

    pixels: np.ndarray  # [height, width] floats in [0, 1]
    skew_angle: Optional[float] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ContractError(f"LineImage needs a 2-D raster, got shape {self.pixels.shape}")
        if self.pixels.min() < -1e-9 or self.pixels.max() > 1 + 1e-9:
            raise ContractError("LineImage pixels must lie in [0, 1]")
        np.clip(self.pixels, 0.0, 1.0, out=self.pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchSequence:
    """Flattened vertical strips of a line image, optionally padded for batching."""

    patches: Tensor            # [L, H * patch_width]
    original_width: int
    pad_mask: np.ndarray = field(default=None)  # bool [L], True = padding patch

    def __post_init__(self):
        if self.pad_mask is None:
            self.pad_mask = np.zeros(self.patches.shape[0], dtype=bool)

    def __len__(self) -> int:
        return self.patches.shape[0]


# ---------------------------------------------------------------------------
# file I/O


def load_pgm(path) -> LineImage:
    """Read a binary 8-bit PGM (P5), inverting to the ink-positive convention."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(data):
            raise ContractError(f"{path}: truncated PGM header")
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end > pos:
            fields.append(data[pos:end])
        pos = end + 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5":
        raise ContractError(f"{path}: not a binary PGM (P5) file")
    if maxval != 255:
        raise ContractError(f"{path}: only maxval 255 is supported")
    raw = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
    if raw.size != w * h:
        raise ContractError(f"{path}: pixel payload truncated")
    pixels = 1.0 - raw.reshape(h, w).astype(np.float64) / 255.0
    return LineImage(pixels)


def save_pgm(img: LineImage, path):
    """Write a binary PGM, converting back to 0=ink / 255=background."""
    raw = np.round((1.0 - img.pixels) * 255.0).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raw.tobytes())


def load_image(path) -> LineImage:
    """Dispatch on extension; PGM is native, PNG goes through Pillow."""
    name = str(path).lower()
    if name.endswith(".pgm"):
        return load_pgm(path)
    if name.endswith(".png"):
        return _load_png(path)
    raise ContractError(f"{path}: unsupported image format")


def _load_png(path) -> LineImage:
    try:
        from PIL import Image
    except ImportError as exc:
        raise ContractError("PNG support requires Pillow (install extra 'png')") from exc
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.float64)
    return LineImage(1.0 - gray / 255.0)


# ---------------------------------------------------------------------------
# geometry


def _projection_variance(pixels: np.ndarray, angle_deg: float) -> float:
    """Variance of the horizontal projection profile after a virtual rotation.

    Rows are binned at y + x*tan(angle); only ink mass moves, no resampling.
    The sign matches rotate(): estimate_skew(rotate(img, a)) recovers a.
    """
    h, w = pixels.shape
    slope = math.tan(math.radians(angle_deg))
    ys, xs = np.nonzero(pixels > 0.05)
    if ys.size == 0:
        return 0.0
    mass = pixels[ys, xs]
    shifted = np.round(ys + xs * slope).astype(np.int64)
    shifted -= shifted.min()
    profile = np.bincount(shifted, weights=mass)
    return float(np.var(profile))


def estimate_skew(img: LineImage,
                  max_angle: float = SKEW_GRID_DEGREES,
                  step: float = SKEW_GRID_STEP) -> float:
    """Skew angle in degrees that maximizes projection-profile variance."""
    angles = np.arange(-max_angle, max_angle + step / 2, step)
    best_angle, best_score = 0.0, -1.0
    for a in angles:
        score = _projection_variance(img.pixels, a)
        if score > best_score:
            best_angle, best_score = float(a), score
    return best_angle


def rotate(img: LineImage, angle_deg: float) -> LineImage:
    """Rotate by angle (bilinear), growing the canvas; corners fill with background."""
    if angle_deg == 0.0:
        return LineImage(img.pixels.copy(), skew_angle=img.skew_angle)
    out = ndimage.rotate(img.pixels, angle_deg, reshape=True, order=1,
                         mode="constant", cval=0.0, prefilter=False)
    return LineImage(np.clip(out, 0.0, 1.0))


def deskew(img: LineImage) -> LineImage:
    """Estimate skew and rotate it away; blank images pass through unchanged."""
    if not (img.pixels > 0.05).any():
        return LineImage(img.pixels.copy(), skew_angle=0.0)
    angle = estimate_skew(img)
    if abs(angle) < SKEW_GRID_STEP / 2:
        return LineImage(img.pixels.copy(), skew_angle=0.0)
    out = rotate(img, -angle)
    out.skew_angle = angle
    return out


def trim_whitespace(img: LineImage,
                    ink_threshold: float = DEFAULT_INK_THRESHOLD) -> LineImage:
    """Crop to the bounding box of pixels above threshold.

    A completely blank image collapses to the documented 1x1 background
    sentinel rather than an empty raster.
    """
    if not 0.0 < ink_threshold < 1.0:
        raise ContractError(f"ink_threshold {ink_threshold} outside (0, 1)")
    mask = img.pixels > ink_threshold
    if not mask.any():
        return LineImage(np.zeros((1, 1)))
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    cropped = img.pixels[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return LineImage(cropped.copy(), skew_angle=img.skew_angle)


def normalize_height(img: LineImage, target_h: int = DEFAULT_TARGET_HEIGHT) -> LineImage:
    """Bilinear resize to a fixed height, preserving aspect ratio."""
    if target_h < 8:
        raise ContractError(f"target height {target_h} < 8")
    h, w = img.pixels.shape
    if h == target_h:
        return LineImage(img.pixels.copy(), skew_angle=img.skew_angle)
    out_w = max(1, round(w * target_h / h))
    sy = h / target_h
    sx = w / out_w
    # map output pixel centers onto input pixel centers
    out = ndimage.affine_transform(
        img.pixels, np.diag([sy, sx]),
        offset=[0.5 * sy - 0.5, 0.5 * sx - 0.5],
        output_shape=(target_h, out_w), order=1,
        mode="nearest", prefilter=False)
    return LineImage(np.clip(out, 0.0, 1.0), skew_angle=img.skew_angle)


def to_patches(img: LineImage, patch_w: int = DEFAULT_PATCH_WIDTH,
               batch_len: Optional[int] = None,
               expected_height: Optional[int] = None) -> PatchSequence:
    """Slice into non-overlapping vertical strips, flattened row-major.

    The last strip is padded with background on the right; batch_len pads
    the sequence with all-background patches marked in pad_mask.
    """
    if expected_height is not None and img.height != expected_height:
        raise ContractError(
            f"to_patches: image height {img.height} != configured patch height {expected_height}")
    h, w = img.pixels.shape
    n_real = -(-w // patch_w)  # ceil division
    total = n_real if batch_len is None else batch_len
    if total < n_real:
        raise CapacityError(f"batch_len {batch_len} < required {n_real} patches")
    padded = np.zeros((h, total * patch_w), dtype=np.float64)
    padded[:, :w] = img.pixels
    # [h, L, p] -> [L, h, p] -> [L, h*p]
    strips = padded.reshape(h, total, patch_w).transpose(1, 0, 2).reshape(total, h * patch_w)
    pad_mask = np.arange(total) >= n_real
    return PatchSequence(Tensor(strips.astype(np.float32)), original_width=w,
                         pad_mask=pad_mask)


def patches_to_image(seq: PatchSequence, height: int) -> LineImage:
    """Reassemble patches into the (right-padded) image; exact inverse of slicing."""
    arr = seq.patches.data.astype(np.float64)
    total, flat = arr.shape
    patch_w = flat // height
    img = arr.reshape(total, height, patch_w).transpose(1, 0, 2).reshape(height, total * patch_w)
    return LineImage(img)


def preprocess(img: LineImage, target_h: int = DEFAULT_TARGET_HEIGHT,
               patch_w: int = DEFAULT_PATCH_WIDTH, run_deskew: bool = True,
               ink_threshold: float = DEFAULT_INK_THRESHOLD,
               batch_len: Optional[int] = None) -> PatchSequence:
    """Full pipeline: (deskew) -> trim -> normalize height -> patches."""
    if run_deskew:
        img = deskew(img)
    img = trim_whitespace(img, ink_threshold)
    img = normalize_height(img, target_h)
    return to_patches(img, patch_w, batch_len=batch_len)
