"""Few-shot reconstruction protocol, metrics, baselines and exports.

SSIM follows the original reference settings: 11x11 Gaussian window with
sigma 1.5, stability constants K1=0.01 / K2=0.03 at dynamic range 1, means
taken over the positions where the window fully fits. L2 is the sum of
squared intensity differences over pixels, intensities in [0, 1].
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.signal import correlate2d

from .corpus import GlyphMatrix, SplitManifest, char_to_hex
from .model import GlyphModel

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = size // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1, dtype=np.float64) / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity of two same-side images with [0,1] intensities."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    w = _gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = correlate2d(a, w, mode="valid")
    mu_b = correlate2d(b, w, mode="valid")
    var_a = correlate2d(a * a, w, mode="valid") - mu_a**2
    var_b = correlate2d(b * b, w, mode="valid") - mu_b**2
    cov = correlate2d(a * b, w, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def l2_per_glyph(a: np.ndarray, b: np.ndarray) -> float:
    """Sum over pixels of squared intensity difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


# -- amortized inference over a frozen checkpoint ---------------------------


def _pixels(matrix: GlyphMatrix, char_id: int, font_id: str) -> np.ndarray:
    return matrix.images[(char_id, font_id)].pixels


@torch.no_grad()
def infer_char_embeddings(
    model: GlyphModel,
    matrix: GlyphMatrix,
    manifest: SplitManifest,
    split: str = "train",
) -> dict[int, np.ndarray]:
    """Posterior-mean shape embedding per character row.

    Rows are encoded from every glyph in the chosen split (masked characters
    included: at test time their examples become observable). Characters
    with no glyph in that split are omitted.
    """
    model.eval()
    fonts = set(manifest.fonts_in(split)) if split else set(matrix.font_index)
    out: dict[int, np.ndarray] = {}
    for char_id in matrix.char_index:
        sources = [f for f in matrix.fonts_of_char(char_id) if f in fonts]
        if not sources:
            continue
        stack = torch.as_tensor(
            np.stack([_pixels(matrix, char_id, f) for f in sources])
        )
        post = model.encode_characters(stack)
        out[char_id] = post.mean.numpy().astype(np.float32)
    return out


@dataclass
class FontInference:
    """Style embedding for one font plus the observation set used."""

    mean: np.ndarray
    observed_chars: list[int]
    requested_n: int

    @property
    def actual_n(self) -> int:
        return len(self.observed_chars)


@torch.no_grad()
def infer_font_embedding(
    model: GlyphModel,
    matrix: GlyphMatrix,
    manifest: SplitManifest,
    font_id: str,
    char_means: dict[int, np.ndarray],
    n_obs: int,
    seed: int = 0,
) -> FontInference:
    """Posterior-mean style embedding from n seed-fixed observations.

    Observations are drawn from the font's present never-masked characters
    (falling back to any present character when none qualify); fonts with
    fewer than n candidates contribute everything they have.
    """
    model.eval()
    present = matrix.chars_of_font(font_id)
    candidates = [
        c for c in present if c not in manifest.masked_chars and c in char_means
    ]
    if not candidates:
        candidates = [c for c in present if c in char_means]
    if not candidates:
        raise ValueError(f"font {font_id} has no observable glyphs with known rows")
    rng = np.random.default_rng(seed)
    take = min(n_obs, len(candidates))
    observed = sorted(
        candidates[i] for i in rng.choice(len(candidates), size=take, replace=False)
    )
    if take < n_obs:
        log.warning(
            "font %s has only %d observable glyphs (requested %d)",
            font_id, take, n_obs,
        )
    glyphs = torch.as_tensor(np.stack([_pixels(matrix, c, font_id) for c in observed]))
    y = torch.as_tensor(np.stack([char_means[c] for c in observed]))
    post = model.encode_font(glyphs, y)
    return FontInference(
        mean=post.mean.numpy().astype(np.float32),
        observed_chars=observed,
        requested_n=n_obs,
    )


def infer_test_embeddings(
    model: GlyphModel,
    matrix: GlyphMatrix,
    manifest: SplitManifest,
    n_obs: int,
    seed: int = 0,
) -> tuple[dict[int, np.ndarray], dict[str, FontInference]]:
    """Character means from the train split plus a style embedding per test
    font given ``n_obs`` seed-fixed observations."""
    char_means = infer_char_embeddings(model, matrix, manifest)
    fonts = {}
    for font_id in manifest.fonts_in("test"):
        if font_id not in matrix.font_index:
            continue
        fonts[font_id] = infer_font_embedding(
            model, matrix, manifest, font_id, char_means, n_obs, seed
        )
    return char_means, fonts


@torch.no_grad()
def reconstruct(
    model: GlyphModel,
    char_means: dict[int, np.ndarray],
    font_mean: np.ndarray,
    target_chars: list[int],
) -> dict[int, np.ndarray]:
    """Decode each requested character in the given style."""
    model.eval()
    missing = [c for c in target_chars if c not in char_means]
    if missing:
        raise ValueError(
            "no inferred shape embedding for characters: "
            + ", ".join(char_to_hex(c) for c in missing)
        )
    if not target_chars:
        return {}
    y = torch.as_tensor(np.stack([char_means[c] for c in target_chars]))
    z = torch.as_tensor(font_mean)
    out = model.decode(y, z).numpy()
    return {c: out[i] for i, c in enumerate(target_chars)}


def save_reconstructions(
    recon: dict[int, np.ndarray], font_id: str, out_dir: str | Path
) -> None:
    """Write decoded glyphs as a PNG mirror of the corpus layout."""
    from PIL import Image

    font_dir = Path(out_dir) / font_id
    font_dir.mkdir(parents=True, exist_ok=True)
    for char_id, img in recon.items():
        data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="L").save(font_dir / f"{char_to_hex(char_id)}.png")


# -- baselines ---------------------------------------------------------------


@dataclass
class NNResult:
    """Nearest-neighbor reconstruction: copied glyphs and their provenance."""

    glyphs: dict[int, np.ndarray]
    source: dict[int, str]
    unsupported: list[int]
    ranking: list[tuple[str, float]]


def nn_baseline(
    matrix: GlyphMatrix,
    manifest: SplitManifest,
    test_font: str,
    observed_chars: list[int],
    target_chars: list[int] | None = None,
) -> NNResult:
    """Copy missing glyphs from the closest train fonts.

    Train fonts are ranked by mean L2 over the observed characters (on the
    shared subset; fonts sharing none are infinitely far and excluded). Each
    target comes from the nearest ranked font that has it, walking down the
    ranking; characters no ranked font supports are reported unsupported.
    """
    observed = [c for c in observed_chars if matrix.present(c, test_font)]
    if not observed:
        raise ValueError(f"no observed characters present in font {test_font}")
    train_fonts = [f for f in matrix.font_index if manifest.split.get(f) == "train"]
    ranking = []
    for font in train_fonts:
        shared = [c for c in observed if matrix.present(c, font)]
        if not shared:
            continue
        dist = float(
            np.mean(
                [
                    l2_per_glyph(_pixels(matrix, c, font), _pixels(matrix, c, test_font))
                    for c in shared
                ]
            )
        )
        ranking.append((font, dist))
    if not ranking:
        raise ValueError(
            f"no train font shares any observed character with {test_font}"
        )
    order = {f: i for i, f in enumerate(matrix.font_index)}
    ranking.sort(key=lambda item: (item[1], order[item[0]]))

    if target_chars is None:
        target_chars = [
            c for c in matrix.chars_of_font(test_font) if c not in set(observed)
        ]
    glyphs: dict[int, np.ndarray] = {}
    source: dict[int, str] = {}
    unsupported: list[int] = []
    for char_id in target_chars:
        for font, _ in ranking:
            if matrix.present(char_id, font):
                glyphs[char_id] = _pixels(matrix, char_id, font).copy()
                source[char_id] = font
                break
        else:
            unsupported.append(char_id)
    return NNResult(glyphs=glyphs, source=source, unsupported=unsupported, ranking=ranking)


def mean_glyph_baseline(
    matrix: GlyphMatrix, manifest: SplitManifest, char_id: int
) -> np.ndarray:
    """Pixelwise mean of the character over train-split fonts."""
    train_fonts = set(manifest.fonts_in("train"))
    sources = [f for f in matrix.fonts_of_char(char_id) if f in train_fonts]
    if not sources:
        raise ValueError(
            f"character {char_to_hex(char_id)} absent from every train font"
        )
    stack = np.stack([_pixels(matrix, char_id, f) for f in sources]).astype(np.float64)
    return stack.mean(axis=0).astype(np.float32)


# -- evaluation protocol -------------------------------------------------------


def _cell_scores(
    model: GlyphModel,
    matrix: GlyphMatrix,
    char_means: dict[int, np.ndarray],
    info: FontInference,
    font_id: str,
    masked: set[int],
) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
    observed = set(info.observed_chars)
    targets = [
        c
        for c in matrix.chars_of_font(font_id)
        if c not in observed and c in char_means
    ]
    recon = reconstruct(model, char_means, info.mean, targets)
    known_scores, unknown_scores = [], []
    for c in targets:
        gold = _pixels(matrix, c, font_id)
        pair = (ssim(recon[c], gold), l2_per_glyph(recon[c], gold))
        (unknown_scores if c in masked else known_scores).append(pair)
    return known_scores, unknown_scores


def _aggregate(scores: list[tuple[float, float]]) -> dict:
    if not scores:
        return {"ssim": None, "l2": None, "count": 0}
    arr = np.asarray(scores, dtype=np.float64)
    return {
        "ssim": float(arr[:, 0].mean()),
        "l2": float(arr[:, 1].mean()),
        "count": len(scores),
    }


def evaluate(
    model: GlyphModel,
    matrix: GlyphMatrix,
    manifest: SplitManifest,
    n_list: list[int] = (1, 8, 16, 32),
    seed: int = 0,
    dataset: str = "corpus",
) -> list[dict]:
    """Reconstruction metrics per observation count on the test split.

    For each n and test font, every present non-observed cell is decoded and
    scored; means are reported separately for known and unknown (masked)
    character types. Returns one report dict per n, mirroring the JSON
    schema in docs/cli.md.
    """
    char_means = infer_char_embeddings(model, matrix, manifest)
    masked = manifest.masked_chars
    reports = []
    for n in n_list:
        per_font = []
        all_known: list[tuple[float, float]] = []
        all_unknown: list[tuple[float, float]] = []
        for font_id in manifest.fonts_in("test"):
            if font_id not in matrix.font_index:
                continue
            info = infer_font_embedding(
                model, matrix, manifest, font_id, char_means, n, seed
            )
            known, unknown = _cell_scores(
                model, matrix, char_means, info, font_id, masked
            )
            all_known.extend(known)
            all_unknown.extend(unknown)
            per_font.append(
                {
                    "font": font_id,
                    "actual_n": info.actual_n,
                    "observed": [char_to_hex(c) for c in info.observed_chars],
                    "known": _aggregate(known),
                    "unknown": _aggregate(unknown),
                }
            )
        reports.append(
            {
                "dataset": dataset,
                "n": n,
                "known": _aggregate(all_known),
                "unknown": _aggregate(all_unknown),
                "per_font": per_font,
            }
        )
    return reports


@torch.no_grad()
def quick_dev_ssim(
    model: GlyphModel,
    matrix: GlyphMatrix,
    manifest: SplitManifest,
    n_obs: int = 8,
    seed: int = 0,
    max_fonts: int = 4,
    max_cells: int = 32,
) -> float | None:
    """Cheap dev-split SSIM used for the best-checkpoint snapshot."""
    was_training = model.training
    model.eval()
    try:
        char_means = infer_char_embeddings(model, matrix, manifest)
        scores = []
        for font_id in manifest.fonts_in("dev")[:max_fonts]:
            if font_id not in matrix.font_index:
                continue
            try:
                info = infer_font_embedding(
                    model, matrix, manifest, font_id, char_means, n_obs, seed
                )
            except ValueError:
                continue
            observed = set(info.observed_chars)
            targets = [
                c
                for c in matrix.chars_of_font(font_id)
                if c not in observed and c in char_means
            ][:max_cells]
            recon = reconstruct(model, char_means, info.mean, targets)
            scores.extend(
                ssim(recon[c], _pixels(matrix, c, font_id)) for c in targets
            )
        return float(np.mean(scores)) if scores else None
    finally:
        if was_training:
            model.train()


# -- qualitative exports -------------------------------------------------------


@torch.no_grad()
def interpolate(
    model: GlyphModel,
    y_pair: tuple[np.ndarray, np.ndarray],
    z_pair: tuple[np.ndarray, np.ndarray],
    steps: int,
) -> np.ndarray:
    """Grid of decodes linearly interpolating shape (columns) and style (rows).

    Corner (0, 0) decodes exactly (y_a, z_a); returns (steps, steps, S, S).
    """
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    model.eval()
    y_a, y_b = (torch.as_tensor(v, dtype=torch.float32) for v in y_pair)
    z_a, z_b = (torch.as_tensor(v, dtype=torch.float32) for v in z_pair)
    ts = torch.linspace(0.0, 1.0, steps)
    side = model.config.side
    out = np.empty((steps, steps, side, side), dtype=np.float32)
    # decode cell by cell so grid corners are bit-identical to plain decode
    # calls (batched convolution is not bitwise batch-size invariant)
    for r, tz in enumerate(ts):
        z = (1.0 - tz) * z_a + tz * z_b
        for c, ty in enumerate(ts):
            y = (1.0 - ty) * y_a + ty * y_b
            out[r, c] = model.decode(y, z).numpy()
    return out


def tile_grid(grid: np.ndarray) -> np.ndarray:
    """(R, C, S, S) grid -> single (R*S, C*S) image for PNG export."""
    r, c, s, _ = grid.shape
    return grid.transpose(0, 2, 1, 3).reshape(r * s, c * s)


def export_embeddings(
    model: GlyphModel,
    matrix: GlyphMatrix,
    manifest: SplitManifest,
    out_path: str | Path,
) -> int:
    """Write posterior-mean embeddings for every character and font as CSV.

    Rows are inferred from all present glyphs (analysis export, not the
    evaluation protocol). Returns the number of rows written (I + J when
    every row and column has at least one glyph).
    """
    char_means = infer_char_embeddings(model, matrix, manifest, split=None)
    k = model.config.k
    rows = 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "id"] + [f"e{i}" for i in range(k)])
        for char_id in matrix.char_index:
            if char_id not in char_means:
                continue
            writer.writerow(
                ["char", char_to_hex(char_id)]
                + [f"{v:.8e}" for v in char_means[char_id]]
            )
            rows += 1
        for font_id in matrix.font_index:
            present = matrix.chars_of_font(font_id)
            usable = [c for c in present if c in char_means]
            if not usable:
                continue
            glyphs = torch.as_tensor(
                np.stack([_pixels(matrix, c, font_id) for c in usable])
            )
            y = torch.as_tensor(np.stack([char_means[c] for c in usable]))
            with torch.no_grad():
                post = model.encode_font(glyphs, y)
            writer.writerow(
                ["font", font_id] + [f"{v:.8e}" for v in post.mean.numpy()]
            )
            rows += 1
    return rows
