"""Glyph corpus ingestion, deduplication, splits and batch sampling.

On-disk layout: ``<root>/<font_id>/<codepoint_hex>.png`` (8-bit grayscale,
square power-of-two side) plus ``manifest.json`` mapping fonts to families
and optionally pinning the character list:

    {"families": {"roboto-regular": "roboto", ...},
     "chars": ["0041", "0042", ...]}

Rasterization is upstream of this module: glyphs are expected pre-rendered,
centered on the canvas at a fixed em size with a 10% margin. Fonts without a
family entry are treated as singleton families.

The in-memory ``GlyphMatrix`` is immutable after ingest and safe for
concurrent readers; batch sampling owns its RNG (one per training worker).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
SPLIT_RATIO = {"train": 0.6, "dev": 0.2, "test": 0.2}
MASK_FRACTION = 0.2


def char_to_hex(char_id: int) -> str:
    return f"{char_id:04x}"


def hex_to_char(name: str) -> int:
    return int(name, 16)


@dataclass(frozen=True)
class GlyphImage:
    """One rendered glyph: intensities in [0, 1] on a square power-of-two grid."""

    pixels: np.ndarray
    font_id: str
    char_id: int

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


@dataclass
class GlyphMatrix:
    """Sparse character-by-font grid of glyphs.

    ``images`` maps ``(char_id, font_id)`` to glyphs; ``char_index`` and
    ``font_index`` fix the row/column order; ``family`` maps every font to
    its family name.
    """

    images: dict[tuple[int, str], GlyphImage]
    char_index: list[int]
    font_index: list[str]
    family: dict[str, str]
    side: int = 0

    @property
    def n_chars(self) -> int:
        return len(self.char_index)

    @property
    def n_fonts(self) -> int:
        return len(self.font_index)

    def present(self, char_id: int, font_id: str) -> bool:
        return (char_id, font_id) in self.images

    def presence(self) -> np.ndarray:
        """I x J boolean bitmap."""
        grid = np.zeros((self.n_chars, self.n_fonts), dtype=bool)
        cpos = {c: i for i, c in enumerate(self.char_index)}
        fpos = {f: j for j, f in enumerate(self.font_index)}
        for (c, f) in self.images:
            grid[cpos[c], fpos[f]] = True
        return grid

    def chars_of_font(self, font_id: str) -> list[int]:
        return [c for c in self.char_index if (c, font_id) in self.images]

    def fonts_of_char(self, char_id: int) -> list[str]:
        return [f for f in self.font_index if (char_id, f) in self.images]

    def subset_fonts(self, fonts: list[str]) -> "GlyphMatrix":
        keep = set(fonts)
        images = {k: v for k, v in self.images.items() if k[1] in keep}
        return GlyphMatrix(
            images=images,
            char_index=list(self.char_index),
            font_index=[f for f in self.font_index if f in keep],
            family={f: fam for f, fam in self.family.items() if f in keep},
            side=self.side,
        )


@dataclass
class SplitManifest:
    """Font-family splits plus the masked ("unknown") character types."""

    split: dict[str, str]
    masked_chars: set[int]
    rng_seed: int

    def fonts_in(self, name: str) -> list[str]:
        return [f for f, s in self.split.items() if s == name]

    def to_json(self) -> str:
        payload = {
            "split": {f: self.split[f] for f in sorted(self.split)},
            "masked_chars": [char_to_hex(c) for c in sorted(self.masked_chars)],
            "rng_seed": self.rng_seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        payload = json.loads(Path(path).read_text())
        return cls(
            split=dict(payload["split"]),
            masked_chars={hex_to_char(c) for c in payload["masked_chars"]},
            rng_seed=int(payload["rng_seed"]),
        )


@dataclass
class Batch:
    """A training batch: for each font, its sampled observable glyphs."""

    font_ids: list[str]
    char_ids: list[list[int]] = field(default_factory=list)
    images: list[list[GlyphImage]] = field(default_factory=list)

    def n_glyphs(self) -> int:
        return sum(len(c) for c in self.char_ids)


def _load_glyph_png(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"glyph is not square: {path} has shape {arr.shape}")
    side = arr.shape[0]
    if side < 1 or (side & (side - 1)) != 0:
        raise ValueError(f"glyph side must be a power of two: {path} has side {side}")
    return arr


def ingest(glyph_dir: str | Path, manifest: str | Path | None = None) -> GlyphMatrix:
    """Read a corpus directory into a GlyphMatrix.

    ``manifest`` points at the manifest.json (defaults to one inside
    ``glyph_dir`` when present). Rejects non-square or non-power-of-two
    images and inconsistent sizes across the corpus.
    """
    root = Path(glyph_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")

    families: dict[str, str] = {}
    manifest_chars: list[int] = []
    manifest_path = Path(manifest) if manifest else root / "manifest.json"
    if manifest_path.exists():
        payload = json.loads(manifest_path.read_text())
        families = dict(payload.get("families", {}))
        manifest_chars = [hex_to_char(c) for c in payload.get("chars", [])]

    images: dict[tuple[int, str], GlyphImage] = {}
    fonts = sorted(p.name for p in root.iterdir() if p.is_dir())
    chars: set[int] = set(manifest_chars)
    side = 0
    for font in fonts:
        for png in sorted((root / font).glob("*.png")):
            try:
                char_id = hex_to_char(png.stem)
            except ValueError:
                log.warning("skipping non-codepoint file %s", png)
                continue
            arr = _load_glyph_png(png)
            if side == 0:
                side = arr.shape[0]
            elif arr.shape[0] != side:
                raise ValueError(
                    f"inconsistent glyph size: {png} has side {arr.shape[0]}, "
                    f"corpus uses {side}"
                )
            images[(char_id, font)] = GlyphImage(arr, font, char_id)
            chars.add(char_id)

    family = {f: families.get(f, f) for f in fonts}
    return GlyphMatrix(
        images=images,
        char_index=sorted(chars),
        font_index=fonts,
        family=family,
        side=side,
    )


def save_corpus(matrix: GlyphMatrix, out_dir: str | Path) -> None:
    """Write the matrix back to the on-disk layout (8-bit quantized PNGs).

    Round-trips bit-exactly for matrices whose intensities sit on the /255
    grid, i.e. anything produced by :func:`ingest`.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for (char_id, font_id), glyph in matrix.images.items():
        font_dir = root / font_id
        font_dir.mkdir(exist_ok=True)
        data = np.clip(np.round(glyph.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="L").save(font_dir / f"{char_to_hex(char_id)}.png")
    for font in matrix.font_index:
        (root / font).mkdir(exist_ok=True)
    payload = {
        "families": {f: matrix.family[f] for f in sorted(matrix.font_index)},
        "chars": [char_to_hex(c) for c in matrix.char_index],
    }
    (root / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def font_distance(matrix: GlyphMatrix, font_a: str, font_b: str) -> float:
    """Mean per-glyph squared L2 over shared characters; +inf when none shared."""
    total = 0.0
    count = 0
    for char_id in matrix.char_index:
        a = matrix.images.get((char_id, font_a))
        b = matrix.images.get((char_id, font_b))
        if a is None or b is None:
            continue
        diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
        total += float(np.sum(diff * diff))
        count += 1
    return total / count if count else math.inf


def _average_linkage(dist: np.ndarray, cut_height: float) -> list[list[int]]:
    # Lance-Williams average-linkage agglomeration; merging stops once the
    # closest pair of clusters sits above the cut height. Infinite distances
    # (no shared characters) propagate and never merge.
    n = dist.shape[0]
    d = dist.astype(np.float64).copy()
    np.fill_diagonal(d, np.inf)
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    active = sorted(members)
    while len(active) > 1:
        best = (np.inf, None)
        for ai, i in enumerate(active):
            for j in active[ai + 1 :]:
                if d[i, j] < best[0]:
                    best = (d[i, j], (i, j))
        if best[1] is None or best[0] > cut_height:
            break
        i, j = best[1]
        ni, nj = len(members[i]), len(members[j])
        for k in active:
            if k in (i, j):
                continue
            d[i, k] = d[k, i] = (ni * d[i, k] + nj * d[j, k]) / (ni + nj)
        members[i].extend(members[j])
        del members[j]
        active.remove(j)
    return [sorted(members[i]) for i in sorted(members)]


def dedup_fonts(matrix: GlyphMatrix, cut_height: float) -> GlyphMatrix:
    """Collapse near-duplicate fonts to cluster centroids.

    Average-linkage agglomerative clustering under :func:`font_distance`,
    dendrogram cut at ``cut_height``; each cluster is replaced by the member
    minimizing total distance to the rest (ties resolved by font order).
    See docs/dedup-calibration.md for how the default CLI cut height was
    chosen.
    """
    if cut_height <= 0:
        raise ValueError(f"cut_height must be positive, got {cut_height}")
    fonts = matrix.font_index
    n = len(fonts)
    if n <= 1:
        return matrix.subset_fonts(list(fonts))
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = font_distance(matrix, fonts[i], fonts[j])
    clusters = _average_linkage(dist, cut_height)
    keep = []
    for cluster in clusters:
        if len(cluster) == 1:
            keep.append(cluster[0])
            continue
        totals = [sum(dist[i, j] for j in cluster if j != i) for i in cluster]
        keep.append(cluster[int(np.argmin(totals))])
    keep_fonts = [fonts[i] for i in sorted(keep)]
    return matrix.subset_fonts(keep_fonts)


def make_splits(matrix: GlyphMatrix, seed: int) -> SplitManifest:
    """Family-respecting 3:1:1 splits plus the 20% masked character types.

    Families are shuffled by the seed and assigned greedily to whichever
    split keeps font counts closest to the target ratio, with the constraint
    that no split ends empty. round(0.2 * I) characters are drawn uniformly
    as the masked ("unknown") set. Deterministic given the seed.
    """
    families: dict[str, list[str]] = {}
    for font in matrix.font_index:
        families.setdefault(matrix.family[font], []).append(font)
    if len(families) < 3:
        raise ValueError(
            f"need at least 3 font families for disjoint splits, got {len(families)}"
        )
    rng = np.random.default_rng(seed)
    names = sorted(families)
    order = [names[i] for i in rng.permutation(len(names))]

    counts = {s: 0 for s in SPLITS}
    assignment: dict[str, str] = {}
    remaining = list(order)
    while remaining:
        empty = [s for s in SPLITS if counts[s] == 0]
        if len(remaining) <= len(empty):
            for fam, s in zip(remaining, empty):
                assignment[fam] = s
                counts[s] += len(families[fam])
            break
        fam = remaining.pop(0)
        size = len(families[fam])
        total_after = sum(counts.values()) + size
        best = None
        for s in SPLITS:
            trial = dict(counts)
            trial[s] += size
            dev = sum(abs(trial[t] - SPLIT_RATIO[t] * total_after) for t in SPLITS)
            if best is None or dev < best[0]:
                best = (dev, s)
        assignment[fam] = best[1]
        counts[best[1]] += size

    split = {f: assignment[fam] for fam, fonts in families.items() for f in fonts}

    n_masked = round(MASK_FRACTION * matrix.n_chars)
    chars = sorted(matrix.char_index)
    picked = rng.choice(len(chars), size=n_masked, replace=False) if n_masked else []
    masked = {chars[i] for i in picked}
    return SplitManifest(split=split, masked_chars=masked, rng_seed=seed)


def sample_batch(
    matrix: GlyphMatrix,
    manifest: SplitManifest,
    rng: np.random.Generator,
    fonts_per_batch: int = 10,
    chars_per_font: int = 20,
) -> Batch:
    """Sample a training batch: fonts without replacement, then per-font chars.

    Masked character types and dev/test fonts never appear. Fonts with no
    observable glyph are skipped with a warning and replaced by the next
    candidate. Fonts contributing fewer than ``chars_per_font`` glyphs give
    everything they have.
    """
    train_fonts = [f for f in matrix.font_index if manifest.split.get(f) == "train"]
    if not train_fonts:
        raise ValueError("train split is empty")
    order = rng.permutation(len(train_fonts))
    batch = Batch(font_ids=[])
    for idx in order:
        font = train_fonts[idx]
        eligible = [
            c for c in matrix.chars_of_font(font) if c not in manifest.masked_chars
        ]
        if not eligible:
            log.warning("font %s has no observable glyphs; resampling", font)
            continue
        take = min(chars_per_font, len(eligible))
        chosen = sorted(
            eligible[i] for i in rng.choice(len(eligible), size=take, replace=False)
        )
        batch.font_ids.append(font)
        batch.char_ids.append(chosen)
        batch.images.append([matrix.images[(c, font)] for c in chosen])
        if len(batch.font_ids) == fonts_per_batch:
            break
    if not batch.font_ids:
        raise ValueError("no train font has observable glyphs")
    return batch


def coverage_report(matrix: GlyphMatrix) -> dict:
    """Per-character and per-font support counts plus overall density."""
    presence = matrix.presence()
    total = presence.size
    return {
        "chars": matrix.n_chars,
        "fonts": matrix.n_fonts,
        "cells_present": int(presence.sum()),
        "density": float(presence.sum() / total) if total else 0.0,
        "char_counts": {
            char_to_hex(c): int(n)
            for c, n in zip(matrix.char_index, presence.sum(axis=1))
        },
        "font_counts": {
            f: int(n) for f, n in zip(matrix.font_index, presence.sum(axis=0))
        },
    }
