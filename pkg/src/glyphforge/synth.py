"""Synthetic glyph corpora for tests and demos.

Characters are parametric stroke figures drawn from four shape families
(boxes, rings, crosses, chevrons) at graded sizes, so held-out characters
stay near observed ones on the shape manifold. Fonts vary stroke width,
slant and scale, giving a recoverable style axis. Rendering is a soft
signed-distance threshold with a couple of pixels of anti-aliased edge;
intensities stay inside (0, 1) so a sigmoid decoder can match them exactly.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .corpus import GlyphImage, GlyphMatrix, save_corpus

FIRST_CODEPOINT = 0x41  # 'A'
INK = 0.92
BACKGROUND = 0.08


def _segment_distance(px, py, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    denom = vx * vx + vy * vy
    if denom == 0.0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / denom, 0.0, 1.0)
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def _shape_segments(shape_id: int) -> tuple[list[tuple], list[tuple]]:
    """Stroke primitives for one character in unit coordinates.

    Returns (segments, rings): segments as (ax, ay, bx, by), rings as
    (cx, cy, radius).
    """
    family, variant = divmod(shape_id, 4)
    c = 0.5
    if family == 0:  # box outlines at growing sizes
        h = 0.16 + 0.09 * variant
        a, b = c - h, c + h
        return [(a, a, b, a), (b, a, b, b), (b, b, a, b), (a, b, a, a)], []
    if family == 1:  # rings at growing radii
        return [], [(c, c, 0.12 + 0.075 * variant)]
    if family == 2:  # crosses with growing arms
        h = 0.14 + 0.085 * variant
        return [(c - h, c, c + h, c), (c, c - h, c, c + h)], []
    # chevrons rotating through four orientations
    ang = math.radians(20.0 + 22.0 * variant)
    dx, dy = 0.30 * math.cos(ang), 0.30 * math.sin(ang)
    return [(c - dx, c + dy, c, c - dy), (c, c - dy, c + dx, c + dy)], []


def font_styles(n_fonts: int, seed: int) -> list[dict]:
    """Per-font style parameters: stroke half-width, slant shear, scale."""
    rng = np.random.default_rng(seed)
    styles = []
    for i in range(n_fonts):
        styles.append(
            {
                "halfwidth": float(rng.uniform(0.03, 0.065)),
                "slant": float(rng.uniform(-0.18, 0.26)),
                "scale": float(rng.uniform(0.88, 1.08)),
            }
        )
    return styles


def render_glyph(shape_id: int, style: dict, side: int) -> np.ndarray:
    """Rasterize one shape in one style; float32 intensities in [0, 1]."""
    segments, rings = _shape_segments(shape_id)
    ys, xs = np.mgrid[0:side, 0:side]
    # invert the style transform: sample coordinates back into shape space
    u = (xs + 0.5) / side
    v = (ys + 0.5) / side
    u = u - style["slant"] * (v - 0.5)
    u = (u - 0.5) / style["scale"] + 0.5
    v = (v - 0.5) / style["scale"] + 0.5

    dist = np.full((side, side), np.inf)
    for ax, ay, bx, by in segments:
        dist = np.minimum(dist, _segment_distance(u, v, ax, ay, bx, by))
    for cx, cy, r in rings:
        dist = np.minimum(dist, np.abs(np.hypot(u - cx, v - cy) - r))

    aa = 2.0 / side  # soft edge width
    coverage = np.clip((style["halfwidth"] - dist) / aa + 0.5, 0.0, 1.0)
    return (BACKGROUND + (INK - BACKGROUND) * coverage).astype(np.float32)


def make_toy_matrix(
    n_fonts: int = 8, n_chars: int = 16, side: int = 64, seed: int = 0
) -> GlyphMatrix:
    """Fully populated synthetic matrix; every font its own family."""
    if n_chars > 16:
        raise ValueError("toy shape catalog has 16 characters")
    styles = font_styles(n_fonts, seed)
    images: dict[tuple[int, str], GlyphImage] = {}
    fonts = [f"font{i:02d}" for i in range(n_fonts)]
    chars = [FIRST_CODEPOINT + i for i in range(n_chars)]
    for j, font in enumerate(fonts):
        for i, char_id in enumerate(chars):
            pixels = render_glyph(i, styles[j], side)
            # quantize to the 8-bit grid so disk round-trips are exact
            pixels = np.round(pixels * 255.0).astype(np.float32) / 255.0
            images[(char_id, font)] = GlyphImage(pixels, font, char_id)
    return GlyphMatrix(
        images=images,
        char_index=chars,
        font_index=fonts,
        family={f: f"fam-{f}" for f in fonts},
        side=side,
    )


def make_toy_corpus(
    out_dir: str | Path,
    n_fonts: int = 8,
    n_chars: int = 16,
    side: int = 64,
    seed: int = 0,
) -> GlyphMatrix:
    """Write a synthetic corpus in the on-disk layout and return its matrix."""
    matrix = make_toy_matrix(n_fonts, n_chars, side, seed)
    save_corpus(matrix, out_dir)
    return matrix
