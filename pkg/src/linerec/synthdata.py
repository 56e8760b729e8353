"""Deterministic synthetic text-line rendering and augmentation.

Glyphs come from bitmap atlases instead of font files. A built-in
procedural atlas covers a small Latin alphabet for tests and demos: every
glyph is a distinct pattern of vertical bars (derived from the character's
index) sitting on a two-row baseline, which keeps glyphs distinguishable
after augmentation and gives the skew estimator a strong horizontal
signal. Real scripts are supplied as external atlases; contextual shaping
is out of scope.

All randomness is counter-based: every augmentation draw is keyed by
(seed, draw_index), so datasets are bit-reproducible regardless of
generation order or parallelism.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .image import LineImage, save_pgm, load_pgm

BUILTIN_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 .,-"
_GLYPH_HEIGHT = 16
_BASELINE_ROWS = 2


@dataclass
class GlyphAtlas:
    """Character to bitmap map with shared height and a rendering direction."""

    glyphs: dict[str, np.ndarray]
    spacing: int = 2
    baseline_offset: int = 0
    direction: str = "ltr"

    def __post_init__(self):
        if self.direction not in ("ltr", "rtl"):
            raise ContractError(f"direction must be ltr or rtl, got {self.direction!r}")
        heights = {g.shape[0] for g in self.glyphs.values()}
        if len(heights) > 1:
            raise ContractError(f"glyph heights differ: {sorted(heights)}")

    @property
    def height(self) -> int:
        return next(iter(self.glyphs.values())).shape[0]

    def __contains__(self, ch: str) -> bool:
        return ch in self.glyphs


def builtin_atlas(alphabet: str = BUILTIN_ALPHABET, direction: str = "ltr") -> GlyphAtlas:
    """Procedural bar-code style glyphs; distinct per character by construction."""
    glyphs = {}
    for idx, ch in enumerate(alphabet):
        width = 13 + idx % 3
        g = np.zeros((_GLYPH_HEIGHT, width))
        g[_GLYPH_HEIGHT - _BASELINE_ROWS:, :] = 1.0
        if ch != " ":
            bits = idx + 1
            for i in range(6):
                if bits >> i & 1:
                    col = 1 + 2 * i
                    g[1:_GLYPH_HEIGHT - _BASELINE_ROWS - 1, col] = 1.0
        glyphs[ch] = g
    return GlyphAtlas(glyphs, direction=direction)


def save_atlas(atlas: GlyphAtlas, out_dir):
    """Per-glyph PGM files plus an index (char TAB filename TAB width)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (ch, glyph) in enumerate(sorted(atlas.glyphs.items())):
        name = f"glyph_{i:04d}.pgm"
        save_pgm(LineImage(glyph), out / name)
        rows.append(f"{ch}\t{name}\t{glyph.shape[1]}")
    (out / "index.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_atlas(path, spacing: int = 2, direction: str = "ltr") -> GlyphAtlas:
    root = Path(path)
    glyphs = {}
    for line in (root / "index.tsv").read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        ch, name, width = line.split("\t")
        glyph = load_pgm(root / name).pixels
        if glyph.shape[1] != int(width):
            raise ContractError(f"atlas {name}: width {glyph.shape[1]} != index {width}")
        glyphs[ch] = glyph
    return GlyphAtlas(glyphs, spacing=spacing, direction=direction)


def render_line(text: str, atlas: GlyphAtlas, margin: int = 3) -> tuple[LineImage, str]:
    """Composite glyphs along the baseline; transcript stays in logical order."""
    missing = sorted({c for c in text if c not in atlas})
    if missing:
        raise ContractError(f"atlas has no glyph for: {missing}")
    height = atlas.height + 2 * margin + atlas.baseline_offset
    if not text:
        return LineImage(np.zeros((height, max(1, 2 * margin)))), ""
    widths = [atlas.glyphs[c].shape[1] for c in text]
    total_w = sum(widths) + atlas.spacing * (len(text) - 1) + 2 * margin
    canvas = np.zeros((height, total_w))
    glyph_order = text if atlas.direction == "ltr" else text[::-1]
    x = margin
    top = margin
    for ch in glyph_order:
        g = atlas.glyphs[ch]
        canvas[top:top + g.shape[0], x:x + g.shape[1]] = np.maximum(
            canvas[top:top + g.shape[0], x:x + g.shape[1]], g)
        x += g.shape[1] + atlas.spacing
    return LineImage(canvas), text


@dataclass
class AugmentationSpec:
    """Parameter ranges and per-op probabilities for image corruption.

    Defaults keep every probability at zero (identity). Ranges are stated
    as (low, high); actual values for draw i come from the counter-based
    stream keyed by (seed, i).
    """

    shear_slope: tuple[float, float] = (-0.3, 0.3)
    shear_prob: float = 0.0
    rotation_deg: tuple[float, float] = (-3.0, 3.0)
    rotation_prob: float = 0.0
    elastic_amplitude: float = 2.0
    elastic_sigma: float = 4.0
    elastic_prob: float = 0.0
    morph_radius: int = 1
    morph_prob: float = 0.0
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    blur_prob: float = 0.0
    noise_std: tuple[float, float] = (0.0, 0.05)
    noise_prob: float = 0.0
    quantize_levels: tuple[int, int] = (8, 32)
    quantize_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("shear_prob", "rotation_prob", "elastic_prob", "morph_prob",
                     "blur_prob", "noise_prob", "quantize_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"{name}={p} outside [0, 1]")
        for name in ("shear_slope", "rotation_deg", "blur_sigma", "noise_std"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ContractError(f"{name} range ({lo}, {hi}) invalid")


def default_augmentations(seed: int = 0) -> AugmentationSpec:
    """The full corruption family at moderate strength."""
    return AugmentationSpec(shear_prob=0.5, rotation_prob=0.5, elastic_prob=0.3,
                            morph_prob=0.3, blur_prob=0.3, noise_prob=0.5,
                            quantize_prob=0.3, seed=seed)


def _shear(pixels: np.ndarray, slope: float) -> np.ndarray:
    h, w = pixels.shape
    extra = int(np.ceil(abs(slope) * (h - 1)))
    if extra == 0:
        return pixels
    off = -slope * (h - 1) if slope > 0 else 0.0
    out = ndimage.affine_transform(
        pixels, [[1.0, 0.0], [slope, 1.0]], offset=[0.0, off],
        output_shape=(h, w + extra), order=1, mode="constant", cval=0.0,
        prefilter=False)
    return out


def _elastic(pixels: np.ndarray, amplitude: float, sigma: float,
             rng: np.random.Generator) -> np.ndarray:
    h, w = pixels.shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * amplitude
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * amplitude
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return ndimage.map_coordinates(pixels, [ys + dy, xs + dx], order=1,
                                   mode="constant", cval=0.0)


def augment(img: LineImage, spec: AugmentationSpec, draw_index: int) -> LineImage:
    """Apply the enabled corruption ops; deterministic in (seed, draw_index)."""
    rng = np.random.default_rng((spec.seed, draw_index))
    px = img.pixels.copy()

    if rng.random() < spec.shear_prob:
        px = _shear(px, rng.uniform(*spec.shear_slope))
    if rng.random() < spec.rotation_prob:
        angle = rng.uniform(*spec.rotation_deg)
        px = ndimage.rotate(px, angle, reshape=True, order=1, mode="constant",
                            cval=0.0, prefilter=False)
    if rng.random() < spec.elastic_prob:
        px = _elastic(px, spec.elastic_amplitude, spec.elastic_sigma, rng)
    if rng.random() < spec.morph_prob:
        size = 2 * spec.morph_radius + 1
        if rng.random() < 0.5:
            px = ndimage.grey_erosion(px, size=(size, size))
        else:
            px = ndimage.grey_dilation(px, size=(size, size))
    if rng.random() < spec.blur_prob:
        px = ndimage.gaussian_filter(px, rng.uniform(*spec.blur_sigma))
    if rng.random() < spec.noise_prob:
        px = px + rng.normal(0.0, rng.uniform(*spec.noise_std), px.shape)
    if rng.random() < spec.quantize_prob:
        levels = int(rng.integers(spec.quantize_levels[0], spec.quantize_levels[1] + 1))
        px = np.round(np.clip(px, 0.0, 1.0) * (levels - 1)) / (levels - 1)

    return LineImage(np.clip(px, 0.0, 1.0))


def generate_dataset(corpus, atlas: GlyphAtlas, spec: AugmentationSpec,
                     count: int, out_dir) -> Path:
    """Render `count` lines cycling through the corpus; returns manifest path.

    Images land in out_dir/images, the manifest is a UTF-8 TSV of
    relative_image_path TAB transcript. Existing image files are kept
    (regeneration is idempotent, so a partial run can resume).
    """
    lines = [l for l in corpus]
    if count < 1:
        raise ContractError("generate_dataset: count must be >= 1")
    if not lines:
        raise ContractError("generate_dataset: empty corpus")
    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {img_dir}: {exc}") from exc

    rows = []
    for i in range(count):
        text = lines[i % len(lines)]
        rel = f"images/{i:06d}.pgm"
        target = out / rel
        if not target.exists():
            img, transcript = render_line(text, atlas)
            img = augment(img, spec, draw_index=i)
            try:
                save_pgm(img, target)
            except OSError as exc:
                raise OSError(f"cannot write {target}: {exc}") from exc
        rows.append(f"{rel}\t{text}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path) -> list[tuple[str, str]]:
    """Rows of (relative image path, transcript)."""
    rows = []
    base = Path(path)
    for line in base.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        try:
            rel, text = line.split("\t", 1)
        except ValueError:
            raise ContractError(f"{path}: malformed manifest row {line!r}")
        rows.append((rel, text))
    if not rows:
        raise ContractError(f"{path}: empty manifest")
    return rows
