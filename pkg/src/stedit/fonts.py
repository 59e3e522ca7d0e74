"""Glyph atlases: per-font bitmap glyphs with advance metrics.

Each atlas is stored as a grid PNG (one cell per charset character,
row-major) plus a JSON sidecar with cell geometry and per-glyph advances.
The four shipped atlases live in stedit/assets and were rasterized from
the DejaVu family (see tools/build_atlases.py); bold and italic are
synthetic variants applied on top of the base bitmaps (dilation / shear).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from PIL import Image

from .errors import CharsetError, ConfigError

CHARSET = (
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "0123456789"
    " .,!?'\"-:()"
)

FONT_NAMES = ("Sans", "Serif", "Mono", "Heavy")

ITALIC_SHEAR = 0.25
BOLD_RADIUS = 1


@dataclass
class Variant:
    bold: bool = False
    italic: bool = False

    @property
    def tag(self) -> str:
        if self.bold and self.italic:
            return "BoldItalic"
        if self.bold:
            return "Bold"
        if self.italic:
            return "Italic"
        return ""

    def key(self) -> tuple:
        return (self.bold, self.italic)


PLAIN = Variant()


@dataclass
class GlyphAtlas:
    """Bitmap glyphs for one font: coverage grids in [0,1] plus advances."""

    font_id: int
    name: str
    ascent: int
    descent: int
    glyphs: dict = field(repr=False)  # char -> float32 coverage (cell_h, cell_w)
    advances: dict = field(repr=False)  # char -> float
    left_pad: int = 2

    @property
    def line_height(self) -> int:
        return self.ascent + self.descent

    def glyph(self, ch: str, variant: Variant = PLAIN) -> np.ndarray:
        if ch not in self.glyphs:
            raise CharsetError(f"character {ch!r} (U+{ord(ch):04X}) not in atlas charset")
        g = self.glyphs[ch]
        if variant.bold:
            g = _dilate(g, BOLD_RADIUS)
        return g

    def advance(self, ch: str, variant: Variant = PLAIN) -> float:
        if ch not in self.advances:
            raise CharsetError(f"character {ch!r} (U+{ord(ch):04X}) not in atlas charset")
        adv = self.advances[ch]
        if variant.bold:
            adv += BOLD_RADIUS
        return adv


def _dilate(g: np.ndarray, radius: int) -> np.ndarray:
    """Grayscale max-filter dilation; synthetic bold."""
    out = g
    for _ in range(radius):
        p = np.pad(out, 1)
        out = np.maximum.reduce([
            p[1:-1, 1:-1], p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:],
        ])
    return out


def _shear(patch: np.ndarray, factor: float, baseline: int) -> np.ndarray:
    """Horizontal shear about the baseline row; synthetic italic."""
    h, w = patch.shape
    max_shift = int(np.ceil(factor * baseline))
    out = np.zeros((h, w + max_shift), dtype=patch.dtype)
    for row in range(h):
        shift = factor * (baseline - row)
        lo = int(np.floor(shift))
        frac = shift - lo
        base = max_shift // 2 if factor >= 0 else 0
        start = base + lo
        seg = patch[row] * (1 - frac)
        seg2 = patch[row] * frac
        s0 = max(0, start)
        e0 = min(w + max_shift, start + w)
        if e0 > s0:
            out[row, s0:e0] = np.maximum(out[row, s0:e0], seg[s0 - start:e0 - start])
        start2 = start + 1
        s1 = max(0, start2)
        e1 = min(w + max_shift, start2 + w)
        if e1 > s1:
            out[row, s1:e1] = np.maximum(out[row, s1:e1], seg2[s1 - start2:e1 - start2])
    return out


def render_word(atlas: GlyphAtlas, text: str, color: tuple, variant: Variant = PLAIN):
    """Rasterize a word: returns (rgb patch HxWx3 float, alpha HxW float, metrics).

    metrics is a dict with 'width' (sum of advances, exact) and 'height'.
    Color channels are in [0,1]; alpha is glyph coverage.
    """
    height = atlas.line_height
    width = float(sum(atlas.advance(ch, variant) for ch in text))
    for ch in text:
        if ch not in atlas.glyphs:
            raise CharsetError(f"character {ch!r} (U+{ord(ch):04X}) not in atlas charset")
    buf_w = max(1, int(np.ceil(width)) + 2 * atlas.left_pad)
    alpha = np.zeros((height, buf_w), dtype=np.float32)
    x = float(atlas.left_pad)
    for ch in text:
        g = atlas.glyph(ch, variant)
        gx = int(round(x)) - atlas.left_pad
        gw = min(g.shape[1], buf_w - gx)
        if gw > 0 and gx + gw > 0:
            lo = max(0, gx)
            alpha[:, lo:gx + gw] = np.maximum(alpha[:, lo:gx + gw], g[:, lo - gx:gw])
        x += atlas.advance(ch, variant)
    if variant.italic:
        alpha = _shear(alpha, ITALIC_SHEAR, atlas.ascent)
    rgb = np.empty(alpha.shape + (3,), dtype=np.float32)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = (c / 255.0 for c in color)
    metrics = {"width": width, "height": height}
    return rgb, alpha, metrics


def _asset_bytes(name: str) -> bytes:
    return resources.files("stedit.assets").joinpath(name).read_bytes()


def load_atlas(font_id: int) -> GlyphAtlas:
    if not 0 <= font_id < len(FONT_NAMES):
        raise ConfigError(f"unknown font id {font_id}; have {len(FONT_NAMES)} atlases")
    name = FONT_NAMES[font_id]
    meta = json.loads(_asset_bytes(f"atlas_{name.lower()}.json"))
    import io

    grid = np.asarray(Image.open(io.BytesIO(_asset_bytes(f"atlas_{name.lower()}.png"))))
    cell_w, cell_h = meta["cell_w"], meta["cell_h"]
    cols = meta["grid_cols"]
    glyphs = {}
    for i, ch in enumerate(meta["charset"]):
        r, c = divmod(i, cols)
        cell = grid[r * cell_h:(r + 1) * cell_h, c * cell_w:(c + 1) * cell_w]
        glyphs[ch] = (cell.astype(np.float32) / 255.0)
    return GlyphAtlas(
        font_id=font_id,
        name=name,
        ascent=meta["ascent"],
        descent=meta["descent"],
        glyphs=glyphs,
        advances={ch: float(a) for ch, a in zip(meta["charset"], meta["advances"])},
        left_pad=meta["left_pad"],
    )


_atlas_cache: dict[int, GlyphAtlas] = {}


def get_atlas(font_id: int) -> GlyphAtlas:
    if font_id not in _atlas_cache:
        _atlas_cache[font_id] = load_atlas(font_id)
    return _atlas_cache[font_id]


def font_id_of(name: str) -> int:
    try:
        return FONT_NAMES.index(name)
    except ValueError:
        raise ConfigError(f"unknown font name {name!r}; known: {', '.join(FONT_NAMES)}")


def parse_font_label(label: str) -> tuple[int, Variant]:
    """Parse 'Serif' or 'Serif-BoldItalic' into (font_id, Variant)."""
    base, _, tag = label.partition("-")
    fid = font_id_of(base)
    v = Variant(bold="Bold" in tag, italic="Italic" in tag)
    return fid, v
