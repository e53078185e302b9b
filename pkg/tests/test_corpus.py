"""Corpus ingestion, dedup, splits and batch sampling."""

import json
import math

import numpy as np
import pytest
from PIL import Image

from glyphforge import corpus as cp
from glyphforge.corpus import (
    GlyphImage,
    GlyphMatrix,
    SplitManifest,
    coverage_report,
    dedup_fonts,
    font_distance,
    ingest,
    make_splits,
    sample_batch,
    save_corpus,
)


def build_matrix(cells, side=8, families=None):
    """cells: iterable of (char_id, font_id, fill value or array)."""
    images = {}
    chars, fonts = [], []
    for char_id, font_id, value in cells:
        arr = (
            np.full((side, side), value, dtype=np.float32)
            if np.isscalar(value)
            else np.asarray(value, dtype=np.float32)
        )
        images[(char_id, font_id)] = GlyphImage(arr, font_id, char_id)
        if char_id not in chars:
            chars.append(char_id)
        if font_id not in fonts:
            fonts.append(font_id)
    families = families or {f: f for f in fonts}
    return GlyphMatrix(
        images=images,
        char_index=sorted(chars),
        font_index=sorted(fonts),
        family=families,
        side=side,
    )


def write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="L").save(path)


class TestIngest:
    def test_empty_directory(self, tmp_path):
        matrix = ingest(tmp_path)
        assert matrix.n_chars == 0
        assert matrix.n_fonts == 0
        assert coverage_report(matrix)["density"] == 0.0

    def test_single_saturated_glyph_scales_to_one(self, tmp_path):
        write_png(tmp_path / "fontA" / "0041.png", np.full((8, 8), 255))
        matrix = ingest(tmp_path)
        glyph = matrix.images[(0x41, "fontA")]
        assert np.all(glyph.pixels == 1.0)

    def test_presence_counts_files(self, tmp_path):
        # 3 fonts x {A, B}, font2 lacks B -> 5 present cells
        for font in ("font1", "font2", "font3"):
            write_png(tmp_path / font / "0041.png", np.zeros((8, 8)))
            if font != "font2":
                write_png(tmp_path / font / "0042.png", np.zeros((8, 8)))
        matrix = ingest(tmp_path)
        assert matrix.presence().sum() == 5
        assert not matrix.present(0x42, "font2")

    def test_non_square_rejected(self, tmp_path):
        write_png(tmp_path / "f" / "0041.png", np.zeros((8, 16)))
        with pytest.raises(ValueError, match="0041.png"):
            ingest(tmp_path)

    def test_non_power_of_two_rejected(self, tmp_path):
        write_png(tmp_path / "f" / "0041.png", np.zeros((12, 12)))
        with pytest.raises(ValueError, match="power of two"):
            ingest(tmp_path)

    def test_inconsistent_sizes_rejected(self, tmp_path):
        write_png(tmp_path / "f" / "0041.png", np.zeros((8, 8)))
        write_png(tmp_path / "g" / "0041.png", np.zeros((16, 16)))
        with pytest.raises(ValueError, match="inconsistent"):
            ingest(tmp_path)

    def test_manifest_families_and_singletons(self, tmp_path):
        write_png(tmp_path / "a" / "0041.png", np.zeros((8, 8)))
        write_png(tmp_path / "b" / "0041.png", np.zeros((8, 8)))
        (tmp_path / "manifest.json").write_text(json.dumps({"families": {"a": "fam"}}))
        matrix = ingest(tmp_path)
        assert matrix.family == {"a": "fam", "b": "b"}

    def test_serialize_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        src = tmp_path / "src"
        for font in ("x", "y"):
            for ch in (0x41, 0x5A):
                write_png(
                    src / font / f"{ch:04x}.png", rng.integers(0, 256, (8, 8))
                )
        matrix = ingest(src)
        out = tmp_path / "copy"
        save_corpus(matrix, out)
        again = ingest(out)
        assert again.char_index == matrix.char_index
        assert again.font_index == matrix.font_index
        assert again.family == matrix.family
        for key, glyph in matrix.images.items():
            assert np.array_equal(again.images[key].pixels, glyph.pixels)


class TestDedup:
    def test_identical_fonts_collapse(self):
        matrix = build_matrix(
            [(0x41, "a", 0.5), (0x42, "a", 0.2), (0x41, "b", 0.5), (0x42, "b", 0.2)]
        )
        out = dedup_fonts(matrix, cut_height=0.001)
        assert out.n_fonts == 1

    def test_singleton_unchanged(self):
        matrix = build_matrix([(0x41, "solo", 0.5)])
        out = dedup_fonts(matrix, cut_height=10.0)
        assert out.font_index == ["solo"]
        assert out.images.keys() == matrix.images.keys()

    def test_disjoint_fonts_never_merge(self):
        matrix = build_matrix([(0x41, "a", 0.5), (0x42, "b", 0.5)])
        assert math.isinf(font_distance(matrix, "a", "b"))
        out = dedup_fonts(matrix, cut_height=1e9)
        assert out.n_fonts == 2

    def _two_pair_fixture(self):
        rng = np.random.default_rng(1)
        base1 = rng.random((8, 8)).astype(np.float32)
        base2 = np.clip(base1 + 0.5, 0, 1).astype(np.float32)
        eps = 0.01
        cells = []
        for ch in (0x41, 0x42):
            cells += [
                (ch, "a1", base1),
                (ch, "a2", np.clip(base1 + eps, 0, 1)),
                (ch, "b1", base2),
                (ch, "b2", np.clip(base2 + eps, 0, 1)),
            ]
        return build_matrix(cells)

    def test_two_tight_pairs_against_pairwise_oracle(self):
        matrix = self._two_pair_fixture()
        fonts = matrix.font_index
        # exhaustive pairwise-distance oracle on the fixture
        dists = {
            (f, g): font_distance(matrix, f, g)
            for i, f in enumerate(fonts)
            for g in fonts[i + 1 :]
        }
        intra = [dists[("a1", "a2")], dists[("b1", "b2")]]
        inter = [v for k, v in dists.items() if k not in (("a1", "a2"), ("b1", "b2"))]
        cut = math.sqrt(max(intra) * min(inter))  # between the two scales
        assert max(intra) < cut < min(inter)
        out = dedup_fonts(matrix, cut)
        assert out.n_fonts == 2
        assert {f[0] for f in out.font_index} == {"a", "b"}
        # centroid = member minimizing total distance within its pair; both
        # members tie up to eps so the earlier one wins deterministically
        assert out.font_index == ["a1", "b1"]

    def test_idempotent(self):
        matrix = self._two_pair_fixture()
        once = dedup_fonts(matrix, 1.0)
        twice = dedup_fonts(once, 1.0)
        assert once.font_index == twice.font_index

    def test_bad_cut_height(self):
        with pytest.raises(ValueError):
            dedup_fonts(build_matrix([(0x41, "a", 0.5)]), 0.0)


class TestMakeSplits:
    def _matrix(self, n_families=5, fonts_per_family=1, n_chars=10):
        cells = []
        fam = {}
        for i in range(n_families):
            for j in range(fonts_per_family):
                font = f"f{i}_{j}"
                fam[font] = f"family{i}"
                for c in range(n_chars):
                    cells.append((0x41 + c, font, 0.5))
        return build_matrix(cells, families=fam)

    def test_five_singletons_split_311(self):
        manifest = make_splits(self._matrix(5), seed=0)
        sizes = {s: len(manifest.fonts_in(s)) for s in ("train", "dev", "test")}
        assert sizes == {"train": 3, "dev": 1, "test": 1}

    def test_three_families_all_splits_nonempty(self):
        manifest = make_splits(self._matrix(3), seed=4)
        for s in ("train", "dev", "test"):
            assert len(manifest.fonts_in(s)) == 1

    def test_deterministic(self):
        m = self._matrix(6, 2)
        a = make_splits(m, seed=123)
        b = make_splits(m, seed=123)
        assert a.to_json() == b.to_json()
        c = make_splits(m, seed=124)
        assert a.to_json() != c.to_json()

    def test_masked_fraction(self):
        manifest = make_splits(self._matrix(5, n_chars=10), seed=0)
        assert len(manifest.masked_chars) == 2
        manifest16 = make_splits(self._matrix(5, n_chars=16), seed=0)
        assert len(manifest16.masked_chars) == round(0.2 * 16)

    def test_families_never_straddle(self):
        matrix = self._matrix(6, fonts_per_family=3)
        manifest = make_splits(matrix, seed=9)
        for fam in set(matrix.family.values()):
            splits = {
                manifest.split[f] for f, g in matrix.family.items() if g == fam
            }
            assert len(splits) == 1

    def test_too_few_families(self):
        with pytest.raises(ValueError, match="3 font families"):
            make_splits(self._matrix(2), seed=0)

    def test_json_roundtrip(self, tmp_path):
        manifest = make_splits(self._matrix(5), seed=7)
        path = tmp_path / "splits.json"
        manifest.save(path)
        loaded = SplitManifest.load(path)
        assert loaded.split == manifest.split
        assert loaded.masked_chars == manifest.masked_chars
        assert loaded.rng_seed == 7
        payload = json.loads(path.read_text())
        assert set(payload) == {"split", "masked_chars", "rng_seed"}


class TestSampleBatch:
    def _setup(self, n_fonts=12, n_chars=30, sparse=None):
        cells = []
        fam = {}
        for i in range(n_fonts):
            font = f"font{i:02d}"
            fam[font] = f"family{i}"
            for c in range(n_chars):
                if sparse and (c, font) in sparse:
                    continue
                cells.append((0x41 + c, font, 0.5))
        matrix = build_matrix(cells, families=fam)
        manifest = make_splits(matrix, seed=0)
        return matrix, manifest

    def test_full_corpus_gives_requested_block(self):
        matrix, manifest = self._setup()
        batch = sample_batch(matrix, manifest, np.random.default_rng(0), 10, 20)
        n_train = len(manifest.fonts_in("train"))
        assert len(batch.font_ids) == min(10, n_train)
        assert all(len(chars) == 20 for chars in batch.char_ids)

    def test_clamps_to_available(self):
        matrix, manifest = self._setup(n_chars=30)
        # font with exactly 5 present unmasked glyphs contributes 5
        train_font = manifest.fonts_in("train")[0]
        keep = [c for c in matrix.chars_of_font(train_font)
                if c not in manifest.masked_chars][:5]
        matrix.images = {
            k: v
            for k, v in matrix.images.items()
            if k[1] != train_font or k[0] in keep
        }
        rng = np.random.default_rng(1)
        for _ in range(20):
            batch = sample_batch(matrix, manifest, rng, 12, 20)
            if train_font in batch.font_ids:
                i = batch.font_ids.index(train_font)
                assert sorted(batch.char_ids[i]) == sorted(keep)
                break
        else:
            pytest.fail("train font never sampled")

    def test_never_masked_never_heldout(self):
        matrix, manifest = self._setup()
        rng = np.random.default_rng(2)
        heldout = set(manifest.fonts_in("dev")) | set(manifest.fonts_in("test"))
        for _ in range(50):
            batch = sample_batch(matrix, manifest, rng, 10, 20)
            assert not (set(batch.font_ids) & heldout)
            for chars in batch.char_ids:
                assert not (set(chars) & manifest.masked_chars)

    def test_empty_font_skipped_with_warning(self, caplog):
        matrix, manifest = self._setup()
        starved = manifest.fonts_in("train")[0]
        matrix.images = {k: v for k, v in matrix.images.items() if k[1] != starved}
        rng = np.random.default_rng(3)
        with caplog.at_level("WARNING", logger="glyphforge.corpus"):
            for _ in range(30):
                batch = sample_batch(matrix, manifest, rng, 10, 20)
                assert starved not in batch.font_ids
        assert any("resampling" in r.message for r in caplog.records)

    def test_empty_train_split_rejected(self):
        matrix, manifest = self._setup()
        for f in manifest.fonts_in("train"):
            manifest.split[f] = "dev"
        with pytest.raises(ValueError, match="train split is empty"):
            sample_batch(matrix, manifest, np.random.default_rng(0))

    def test_char_selection_uniform(self):
        # binomial-count oracle over 10k draws on a uniform fixture
        matrix, manifest = self._setup(n_fonts=6, n_chars=25)
        rng = np.random.default_rng(4)
        unmasked = [c for c in matrix.char_index if c not in manifest.masked_chars]
        counts = {c: 0 for c in unmasked}
        draws = 10_000
        take = 5
        for _ in range(draws):
            batch = sample_batch(matrix, manifest, rng, 1, take)
            for c in batch.char_ids[0]:
                counts[c] += 1
        p = take / len(unmasked)
        n_trials = draws
        mean = n_trials * p
        sigma = math.sqrt(n_trials * p * (1 - p))
        for c, count in counts.items():
            assert abs(count - mean) < 3 * sigma, f"char {c:#x}: {count} vs {mean}"


class TestCoverage:
    def test_full_matrix_density_one(self):
        matrix = build_matrix([(0x41, "a", 0.1), (0x42, "a", 0.1)])
        assert coverage_report(matrix)["density"] == 1.0

    def test_partial_density(self):
        matrix = build_matrix(
            [
                (0x41, "a", 0.1), (0x42, "a", 0.1), (0x43, "a", 0.1),
                (0x41, "b", 0.1), (0x42, "b", 0.1),
            ]
        )
        report = coverage_report(matrix)
        assert report["density"] == pytest.approx(5 / 6)
        assert report["char_counts"]["0043"] == 1
        assert report["font_counts"]["b"] == 2
